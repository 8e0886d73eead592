use mdgm::autodiff::{AdamState, ParamStore, Tape, Tensor};
use mdgm::data::{generate_sbm, Dataset, SbmParams};
use mdgm::dgm::{sample_edges, symmetrize, DgmConfig, DgmLayer};
use mdgm::gnn::{Activation, DenseKind, DenseLayer, DgmDefaults, Mode, NetworkSpec, Preset, Propagation};
use mdgm::manifold::ModelSpace;
use mdgm::product::{edge_distances, ManifoldSignature};
use mdgm::training::{accuracy, edge_homophily, ModelSetup, RewardTracker};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn latent(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    vec(-2.0f64..2.0, n * d).prop_map(move |v| tensor(n, d, v))
}

fn spaces() -> Vec<ModelSpace> {
    vec![ModelSpace::euclidean(3), ModelSpace::hyperboloid(3), ModelSpace::hypersphere(3)]
}

fn point(space: &ModelSpace, v: &[f64]) -> Vec<f64> {
    space.exp_map_origin(v).unwrap()
}

#[test]
fn values_used_twice_accumulate_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(tensor(1, 3, vec![0.5, -1.0, 2.0])).unwrap();
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn clipping_keeps_near_domain_arguments_finite() {
    let h = ModelSpace::hyperboloid(2);
    let o = h.origin();
    let mut inside = o.clone();
    inside[0] = 1.0 - 1e-9;
    assert!(h.distance(&o, &inside).is_finite());
    let s = ModelSpace::hypersphere(2);
    let p = s.origin();
    let outside: Vec<f64> = p.iter().map(|x| x * (1.0 + 1e-9)).collect();
    assert!(s.distance(&p, &outside).is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_are_exactly_symmetric(a in vec(-3.0f64..3.0, 3), b in vec(-3.0f64..3.0, 3)) {
        for s in spaces() {
            let (x, y) = (point(&s, &a), point(&s, &b));
            prop_assert_eq!(s.distance(&x, &y).to_bits(), s.distance(&y, &x).to_bits());
        }
    }

    #[test]
    fn triangle_inequality(a in vec(-3.0f64..3.0, 3), b in vec(-3.0f64..3.0, 3), c in vec(-3.0f64..3.0, 3)) {
        for s in spaces() {
            let (x, y, z) = (point(&s, &a), point(&s, &b), point(&s, &c));
            prop_assert!(s.distance(&x, &z) <= s.distance(&x, &y) + s.distance(&y, &z) + 1e-9);
        }
    }

    #[test]
    fn euclidean_components_collapse(a in vec(-5.0f64..5.0, 5), b in vec(-5.0f64..5.0, 5)) {
        let split = ManifoldSignature::parse("E2×E3", 1).unwrap();
        let whole = ManifoldSignature::parse("E5", 1).unwrap();
        let d1 = split.product_distance(&a, &b, false).unwrap();
        let d2 = whole.product_distance(&a, &b, false).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn scaled_metric_equals_rescaled_component_distances(
        x in latent(12, 6),
        raw in vec(-3.0f64..3.0, 3),
    ) {
        let mut sig = ManifoldSignature::parse("E2×H2×S2", 2).unwrap();
        sig.alpha_raw = raw;
        let pts = sig.embed(&x).unwrap();
        let alphas = sig.alphas();
        let top = sample_edges(&sig, &x, 3, 1.0, None, 1).unwrap();
        for i in 0..12 {
            let d = |j: usize| {
                let mut comp = [0.0; 3];
                sig.component_distances(pts.row(i), pts.row(j), &mut comp);
                comp.iter().zip(&alphas).map(|(d, a)| (a * d).powi(2)).sum::<f64>().sqrt()
            };
            let mut order: Vec<usize> = (0..12).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            prop_assert_eq!(top.row_indices(i), &order[..3]);
        }
    }

    #[test]
    fn product_distance_grows_with_a_component(
        p in vec(-2.0f64..2.0, 4),
        q in vec(-2.0f64..2.0, 4),
        stretch in 1.01f64..3.0,
    ) {
        let sig = ManifoldSignature::parse("E2×H2", 2).unwrap();
        prop_assume!((p[0] - q[0]).abs() + (p[1] - q[1]).abs() > 1e-3);
        let embed = |v: &[f64]| sig.embed(&tensor(1, 4, v.to_vec())).unwrap().row(0).to_vec();
        let mut far = q.clone();
        far[0] = p[0] + stretch * (q[0] - p[0]);
        far[1] = p[1] + stretch * (q[1] - p[1]);
        let (ep, eq, ef) = (embed(&p), embed(&q), embed(&far));
        prop_assert!(sig.product_distance(&ep, &ef, true).unwrap() > sig.product_distance(&ep, &eq, true).unwrap());
    }

    #[test]
    fn symmetrize_is_idempotent(edges in vec((0usize..20, 0usize..20), 0..60)) {
        let once = symmetrize(&edges);
        prop_assert_eq!(symmetrize(&once), once.clone());
        for &(i, j) in &once {
            prop_assert!(i != j);
            prop_assert!(once.binary_search(&(j, i)).is_ok());
        }
    }

    #[test]
    fn every_node_gets_k_distinct_neighbours(x in latent(15, 4), k in 1usize..8, seed in any::<u64>()) {
        let sig = ManifoldSignature::parse("E2×H2", 2).unwrap();
        let top = sample_edges(&sig, &x, k, 1.0, Some(seed), 1).unwrap();
        for i in 0..15 {
            let row = top.row_indices(i);
            prop_assert_eq!(row.len(), k);
            prop_assert!(!row.contains(&i));
            let mut sorted = row.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k);
        }
    }

    #[test]
    fn deterministic_edges_ignore_temperature_scale(x in latent(15, 6), t in 0.01f64..10.0, s in 0.01f64..100.0) {
        let sig = ManifoldSignature::parse("E2×H2×S2", 2).unwrap();
        let a = sample_edges(&sig, &x, 4, t, None, 1).unwrap();
        let b = sample_edges(&sig, &x, 4, t * s, None, 1).unwrap();
        prop_assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn log_probabilities_are_nonpositive_and_reproducible(x in vec(-2.0f64..2.0, 10 * 5), seed in any::<u64>(), input_edges in vec((0usize..10, 0usize..10), 0..20)) {
        let sig = ManifoldSignature::parse("H2×S3", 2).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DenseLayer::new(&mut store, &mut rng, "f", DenseKind::Linear, 10, sig.tangent_dim(), Activation::Sigmoid, false).unwrap();
        let cfg = DgmConfig { k: 3, signature: sig.clone(), use_input_graph: false, deterministic: false, temperature_init: 1.7, workers: 1 };
        let mut layer = DgmLayer::new(cfg, vec![f], &mut store, "dgm").unwrap();
        let x = tensor(10, 5, x);

        let run = |layer: &mut DgmLayer, edges: &[(usize, usize)]| {
            let graph = Propagation::gcn(10, &symmetrize(edges)).unwrap();
            let mut tape = Tape::new();
            let input = tape.constant(x.concat_cols(&x).unwrap()).unwrap();
            let (_, g) = layer.forward(&mut tape, &store, input, Some(&graph), true, Some(seed)).unwrap();
            (g.edges.clone(), tape.value(g.edge_logp).clone(), g)
        };
        let (edges, logp, g) = run(&mut layer, &input_edges);
        prop_assert_eq!(&run(&mut layer, &[]).0, &edges);
        prop_assert_eq!(edges.len(), 30);

        let s = layer.signature(&store);
        let pts = s.embed(&g.latent).unwrap();
        let alphas = s.alphas();
        for (e, &(i, j)) in edges.iter().enumerate() {
            let lp = logp.data()[e];
            prop_assert!(lp <= 0.0);
            let direct = -g.temperature * s.distance_embedded(pts.row(i), pts.row(j), Some(&alphas));
            prop_assert!((lp - direct).abs() < 1e-12, "{} vs {}", lp, direct);
        }
    }

    #[test]
    fn scaling_parameters_stay_in_the_unit_interval(target in -1.0f64..2.0, steps in 1usize..300) {
        let mut sig = ManifoldSignature::parse("E2×H2", 2).unwrap();
        let mut store = ParamStore::new();
        let id = store.add("alpha_raw", tensor(1, 2, vec![0.0, 0.0]));
        let mut adam = AdamState::new(0.1, 0.0);
        let feats = tensor(2, 4, vec![0.1, 0.2, 0.3, -0.1, 1.0, -0.5, 0.2, 0.4]);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let a = tape.param(&store, id).unwrap();
            let x = tape.constant(feats.clone()).unwrap();
            let d = edge_distances(&mut tape, &sig, x, a, vec![(0, 1)].into()).unwrap();
            let c = tape.constant(Tensor::scalar(target)).unwrap();
            let r = tape.sub(d, c).unwrap();
            let sq = tape.mul(r, r).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap().write_params(&mut store);
            adam.step(&mut store).unwrap();
        }
        sig.alpha_raw = store.value(id).data().to_vec();
        for a in sig.alphas() {
            prop_assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn reward_expectation_has_closed_form(u in 0usize..60) {
        let mut r = RewardTracker::new(1);
        for _ in 0..u {
            r.reward_delta(0, true);
        }
        prop_assert!((r.expected[0] - (1.0 - 0.5 * 0.9f64.powi(u as i32))).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_class_relabelling(
        labels in vec(0usize..4, 12),
        preds in vec(0usize..4, 12),
        mask in vec(any::<bool>(), 12),
        edges in vec((0usize..12, 0usize..12), 1..40),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
        prop_assert_eq!(accuracy(&preds, &labels, &mask), accuracy(&relabel(&preds), &relabel(&labels), &mask));
        let h = edge_homophily(&edges, &labels);
        let hp = edge_homophily(&edges, &relabel(&labels));
        match (h, hp) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }
}

#[test]
fn gcn_on_a_regular_graph_keeps_uniform_rows_uniform() {
    let n = 10;
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), (i, (i + 2) % n)]).collect();
    let graph = Propagation::gcn(n, &symmetrize(&edges)).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(n, 3, 0.7)).unwrap();
    let y = graph.apply(&mut tape, x).unwrap();
    let out = tape.value(y);
    for r in 0..n {
        for c in 0..3 {
            assert!((out.get(r, c) - 0.7).abs() < 1e-15);
        }
    }
}

#[test]
fn gcn_without_edges_is_a_per_node_linear_map() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv = DenseLayer::new(&mut store, &mut rng, "c", DenseKind::GraphConv, 3, 2, Activation::None, false).unwrap();
    let x = tensor(4, 3, (0..12).map(|v| v as f64 * 0.1 - 0.4).collect());
    let graph = Propagation::gcn(4, &[]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let y = conv.forward(&mut tape, &store, xv, Some(&graph), true).unwrap();
    let mut expect = x.matmul(store.value(conv.weight())).unwrap();
    for r in 0..4 {
        for c in 0..2 {
            expect.set(r, c, expect.get(r, c) + store.value(conv.bias()).get(0, c));
        }
    }
    for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn permuted(ds: &Dataset, perm: &[usize]) -> Dataset {
    // new row r holds old node perm[r]
    let mut inverse = vec![0; perm.len()];
    for (r, &old) in perm.iter().enumerate() {
        inverse[old] = r;
    }
    let rows: Vec<Vec<f64>> = perm.iter().map(|&o| ds.features.row(o).to_vec()).collect();
    let mut out = ds.clone();
    out.features = Tensor::from_rows(&rows).unwrap();
    out.labels = perm.iter().map(|&o| ds.labels[o]).collect();
    out.ids = perm.iter().map(|&o| ds.ids[o].clone()).collect();
    out.edges = ds
        .edges
        .as_ref()
        .map(|e| symmetrize(&e.iter().map(|&(a, b)| (inverse[a], inverse[b])).collect::<Vec<_>>()));
    out
}

#[test]
fn logits_are_permutation_equivariant() {
    let params = SbmParams {
        nodes_per_class: 8,
        num_classes: 3,
        p_intra: 0.3,
        p_inter: 0.05,
        feature_dim: 5,
        sigma_sep: 1.0,
        sigma_noise: 0.5,
    };
    let ds = generate_sbm(&params, 11).unwrap();
    let mut perm: Vec<usize> = (0..ds.num_nodes()).collect();
    perm.reverse();
    perm.swap(0, 7);
    let other = permuted(&ds, &perm);
    for preset in [Preset::GcnDdgm, Preset::GcnDdgmStarHetero] {
        let sig = ManifoldSignature::parse("E2×H2", 2).unwrap();
        let setup = ModelSetup {
            spec: NetworkSpec {
                layers: preset.layers(3, sig.len(), sig.tangent_dim()),
            },
            defaults: DgmDefaults {
                k: 3,
                signature: sig,
                deterministic: true,
                temperature_init: 1.0,
                workers: 1,
            },
        };
        let logits = |d: &Dataset| {
            let (mut net, store) = setup.build(d, 4).unwrap();
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &store, &d.features, d.edges.as_deref(), Mode::Eval).unwrap();
            tape.value(out.logits).clone()
        };
        let (a, b) = (logits(&ds), logits(&other));
        for (r, &old) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((b.get(r, c) - a.get(old, c)).abs() < 1e-10, "{preset:?} row {r}");
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let params = SbmParams {
        nodes_per_class: 6,
        num_classes: 2,
        p_intra: 0.4,
        p_inter: 0.1,
        feature_dim: 4,
        sigma_sep: 1.0,
        sigma_noise: 0.5,
    };
    let ds = generate_sbm(&params, 1).unwrap();
    let sig = ManifoldSignature::parse("EHS", 2).unwrap();
    let setup = ModelSetup {
        spec: NetworkSpec {
            layers: Preset::GcnDdgm.layers(2, sig.len(), sig.tangent_dim()),
        },
        defaults: DgmDefaults {
            k: 3,
            signature: sig,
            deterministic: false,
            temperature_init: 1.0,
            workers: 2,
        },
    };
    let run = || {
        let (mut net, store) = setup.build(&ds, 0).unwrap();
        let mut tape = Tape::new();
        let out = net
            .forward(&mut tape, &store, &ds.features, ds.edges.as_deref(), Mode::Train { noise_seed: 5 })
            .unwrap();
        (tape.value(out.logits).clone(), out.graphs[0].edges.clone())
    };
    assert_eq!(run(), run());
}
