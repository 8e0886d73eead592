//! Self-check suites: geometry, gradients against finite differences,
//! sampler distribution and the lazy reduction against a dense oracle.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamStore, Tape, Tensor, Unary, Var};
use crate::dgm::{edge_logp_loss_terms, sample_edges, symmetrize, LatentGraph};
use crate::error::{Error, Result};
use crate::gnn::{Activation, DenseKind, DenseLayer, Propagation};
use crate::manifold::{Clipping, ModelSpace, ModelSpaceKind};
use crate::product::{edge_distances, ManifoldSignature};
use crate::reduction::{gumbel, LazyPairwise, ScoreMode};
use crate::training::graph_loss;

/// Step of the central finite differences.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 20;
pub const SAMPLER_DRAWS: u64 = 100_000;
pub const SAMPLER_TV_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Gradients,
    Sampler,
    Reduction,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "geometry" => Suite::Geometry,
            "gradients" => Suite::Gradients,
            "sampler" => Suite::Sampler,
            "reduction" => Suite::Reduction,
            "all" => Suite::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown suite `{other}` (geometry, gradients, sampler, reduction, all)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn below(suite: &'static str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: measured < tolerance,
            measured,
            tolerance,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn failed(suite: &'static str, name: impl Into<String>, err: &Error) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            tolerance: 0.0,
            detail: err.to_string(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: measured {:e} (tolerance {:e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, clip: Clipping) -> Vec<Check> {
    match suite {
        Suite::Geometry => geometry(clip),
        Suite::Gradients => gradients(),
        Suite::Sampler => sampler(),
        Suite::Reduction => reduction(),
        Suite::All => {
            let mut all = geometry(clip);
            all.extend(gradients());
            all.extend(sampler());
            all.extend(reduction());
            all
        }
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// Tangent vector for the radial checks; sphere radii stay below `pi - 1e-3`.
fn tangent_sample(rng: &mut impl Rng, space: &ModelSpace) -> Vec<f64> {
    let mut v = normal_vec(rng, space.dim);
    if space.kind == ModelSpaceKind::Hypersphere {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = rng.random_range(0.0..=std::f64::consts::PI - 1e-3);
        v.iter_mut().for_each(|x| *x *= r / norm);
    }
    v
}

pub fn geometry(clip: Clipping) -> Vec<Check> {
    const S: &str = "geometry";
    const SAMPLES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for space in [
        ModelSpace::euclidean(4),
        ModelSpace::hyperboloid(4),
        ModelSpace::hypersphere(4),
    ] {
        let origin = space.origin();
        let (mut residual, mut radial, mut nan) = (0.0f64, 0.0f64, 0usize);
        let mut self_dist = 0.0f64;
        for _ in 0..SAMPLES {
            let v = tangent_sample(&mut rng, &space);
            let x = match space.exp_map_origin(&v) {
                Ok(x) => x,
                Err(e) => {
                    out.push(Check::failed(S, format!("{space} exp map"), &e));
                    return out;
                }
            };
            residual = residual.max(space.constraint_residual(&x).abs());
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let d = space.distance_with(&origin, &x, clip);
            let dd = space.distance_with(&x, &x, clip);
            if !d.is_finite() || !dd.is_finite() {
                nan += 1;
                continue;
            }
            radial = radial.max((d - norm).abs());
            self_dist = self_dist.max(dd);
        }
        out.push(Check::below(S, format!("{space} constraint residual"), residual, 1e-9));
        out.push(Check::below(S, format!("{space} radial isometry"), radial, 1e-7));
        out.push(Check::below(S, format!("{space} self distance"), self_dist, 1.5e-6));
        out.push(
            Check::below(S, format!("{space} non-finite distances"), nan as f64, 0.5)
                .with_detail(format!("NaN in {nan} of {SAMPLES} samples")),
        );
    }
    let mut collapse = 0.0f64;
    for _ in 0..SAMPLES {
        let a = rng.random_range(1..=4);
        let b = rng.random_range(1..=4);
        let split = ManifoldSignature::new(vec![ModelSpace::euclidean(a), ModelSpace::euclidean(b)])
            .expect("valid signature");
        let joint = ManifoldSignature::new(vec![ModelSpace::euclidean(a + b)]).expect("valid signature");
        let p = normal_vec(&mut rng, a + b);
        let q = normal_vec(&mut rng, a + b);
        let d1 = split.distance_embedded(&p, &q, None);
        let d2 = joint.distance_embedded(&p, &q, None);
        collapse = collapse.max((d1 - d2).abs());
    }
    out.push(Check::below(S, "euclidean product collapse", collapse, 1e-12));
    out
}

/// Worst entry-wise relative error `|a - n| / (|a| + 1e-8)` between the
/// analytic gradient and central differences of `f` at `x0`; `f` returns
/// the value and analytic gradient.
pub fn gradient_error(x0: &Tensor, f: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>) -> Result<f64> {
    let (_, analytic) = f(x0)?;
    let mut x = x0.clone();
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let up = f(&x)?.0;
        x.data_mut()[i] = orig - FD_STEP;
        let down = f(&x)?.0;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + 1e-8);
        if !err.is_finite() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient of a scalar tape function of a single leaf.
fn leaf_fn<'a>(build: impl Fn(&mut Tape, Var) -> Result<Var> + 'a) -> impl Fn(&Tensor) -> Result<(f64, Tensor)> + 'a {
    move |x: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone())?;
        let mut y = build(&mut tape, v)?;
        if tape.value(y).shape() != (1, 1) {
            y = tape.sum(y)?;
        }
        let g = tape.backward(y)?;
        let grad = g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        Ok((tape.value(y).item(), grad))
    }
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches")
}

fn grad_check(
    name: &str,
    instances: Vec<Tensor>,
    f: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>,
) -> Check {
    let mut worst = 0.0f64;
    for x in &instances {
        match gradient_error(x, f) {
            Ok(e) if e.is_finite() => worst = worst.max(e),
            Ok(e) => {
                worst = e;
                break;
            }
            Err(err) => return Check::failed("gradients", name, &err),
        }
    }
    Check::below("gradients", name, worst, GRAD_TOL)
        .with_detail(format!("worst of {} instances", instances.len()))
}

fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                e.push((i, j));
            }
        }
    }
    symmetrize(&e)
}

pub fn gradients() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut out = Vec::new();
    let m = GRAD_INSTANCES;
    let batch = |rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64| -> Vec<Tensor> {
        (0..m).map(|_| random_tensor(rng, r, c, s)).collect()
    };

    let b = random_tensor(&mut rng, 4, 3, 1.0);
    out.push(grad_check(
        "matmul",
        batch(&mut rng, 5, 4, 1.0),
        &leaf_fn(move |t, x| {
            let w = t.constant(b.clone())?;
            let y = t.matmul(x, w)?;
            t.unary(Unary::Square, y)
        }),
    ));
    let a = random_tensor(&mut rng, 3, 5, 1.0);
    out.push(grad_check(
        "matmul right operand",
        batch(&mut rng, 5, 2, 1.0),
        &leaf_fn(move |t, x| {
            let l = t.constant(a.clone())?;
            let y = t.matmul(l, x)?;
            t.sigmoid(y)
        }),
    ));
    for (name, op) in [
        ("elu", Unary::Elu),
        ("sigmoid", Unary::Sigmoid),
        ("exp", Unary::Exp),
        ("square", Unary::Square),
        ("neg", Unary::Neg),
        ("scale", Unary::Scale(-2.5)),
    ] {
        let w = random_tensor(&mut rng, 3, 4, 1.0);
        out.push(grad_check(
            name,
            batch(&mut rng, 3, 4, 1.0),
            &leaf_fn(move |t, x| {
                let y = t.unary(op, x)?;
                let w = t.constant(w.clone())?;
                t.mul(y, w)
            }),
        ));
    }
    for (name, op) in [("log", Unary::Log), ("sqrt", Unary::Sqrt)] {
        let pos: Vec<Tensor> = batch(&mut rng, 3, 3, 1.0)
            .into_iter()
            .map(|t| t.map(|v| v.abs() + 0.5))
            .collect();
        out.push(grad_check(name, pos, &leaf_fn(move |t, x| t.unary(op, x))));
    }
    let other = random_tensor(&mut rng, 3, 4, 1.0);
    out.push(grad_check(
        "add sub mul",
        batch(&mut rng, 3, 4, 1.0),
        &leaf_fn(move |t, x| {
            let o = t.constant(other.clone())?;
            let s = t.add(x, o)?;
            let d = t.sub(s, x)?;
            let p = t.mul(x, s)?;
            let q = t.mul(p, d)?;
            t.sub(q, x)
        }),
    ));
    let wide = random_tensor(&mut rng, 3, 4, 1.0);
    out.push(grad_check(
        "scalar broadcast",
        batch(&mut rng, 1, 1, 1.0),
        &leaf_fn(move |t, x| {
            let w = t.constant(wide.clone())?;
            let y = t.mul(x, w)?;
            let y = t.add(y, x)?;
            t.elu(y)
        }),
    ));
    let rows = random_tensor(&mut rng, 4, 3, 1.0);
    out.push(grad_check(
        "add_row concat sum",
        batch(&mut rng, 1, 3, 1.0),
        &leaf_fn(move |t, x| {
            let r = t.constant(rows.clone())?;
            let y = t.add_row(r, x)?;
            let y = t.unary(Unary::Square, y)?;
            let z = t.concat_cols(y, r)?;
            let z = t.sigmoid(z)?;
            t.sum(z)
        }),
    ));
    let edges: Rc<[(usize, usize)]> = random_graph(&mut rng, 6, 0.5).into();
    let ew: Rc<[f64]> = (0..edges.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
    out.push(grad_check(
        "gather_sum",
        batch(&mut rng, 6, 2, 1.0),
        &leaf_fn(move |t, x| {
            let y = t.rows_gather_sum(x, edges.clone(), ew.clone())?;
            t.unary(Unary::Square, y)
        }),
    ));
    let labels = vec![0, 2, 1, 1, 3, 0];
    let mask = vec![true, true, false, true, true, true];
    out.push(grad_check(
        "softmax cross-entropy",
        batch(&mut rng, 6, 4, 2.0),
        &leaf_fn(move |t, x| t.softmax_cross_entropy(x, &labels, &mask)),
    ));
    let mix = random_tensor(&mut rng, 5, 3, 1.0);
    let (gamma, beta) = (random_tensor(&mut rng, 1, 3, 1.0), random_tensor(&mut rng, 1, 3, 1.0));
    {
        let (mix, gamma, beta) = (mix.clone(), gamma.clone(), beta.clone());
        out.push(grad_check(
            "batch norm input",
            batch(&mut rng, 5, 3, 1.0),
            &leaf_fn(move |t, x| {
                let g = t.constant(gamma.clone())?;
                let b = t.constant(beta.clone())?;
                let y = t.batch_norm(x, g, b, 1e-5)?;
                let w = t.constant(mix.clone())?;
                t.mul(y, w)
            }),
        ));
    }
    for (name, as_gamma) in [("batch norm scale", true), ("batch norm shift", false)] {
        let xs = random_tensor(&mut rng, 5, 3, 1.0);
        let (mix, other) = (mix.clone(), if as_gamma { beta.clone() } else { gamma.clone() });
        out.push(grad_check(
            name,
            batch(&mut rng, 1, 3, 1.0),
            &leaf_fn(move |t, p| {
                let x = t.constant(xs.clone())?;
                let o = t.constant(other.clone())?;
                let (g, b) = if as_gamma { (p, o) } else { (o, p) };
                let y = t.batch_norm(x, g, b, 1e-5)?;
                let w = t.constant(mix.clone())?;
                t.mul(y, w)
            }),
        ));
    }
    out.push(grad_check(
        "batch norm running statistics",
        batch(&mut rng, 4, 2, 1.0),
        &leaf_fn(|t, x| {
            let g = t.constant(Tensor::from_rows(&[vec![1.5, -0.5]])?)?;
            let b = t.constant(Tensor::from_rows(&[vec![0.1, 0.2]])?)?;
            let y = t.batch_norm_fixed(x, g, b, &[0.3, -0.2], &[2.0, 0.5], 1e-5)?;
            t.unary(Unary::Square, y)
        }),
    ));

    // GCN layer on a random 8-node graph, with respect to input and weight
    let graph = random_graph(&mut rng, 8, 0.35);
    let prop = Propagation::gcn(8, &graph).expect("valid graph");
    let mut store = ParamStore::new();
    let layer = DenseLayer::new(
        &mut store,
        &mut rng,
        "gcn",
        DenseKind::GraphConv,
        3,
        2,
        Activation::Elu,
        false,
    )
    .expect("valid widths");
    {
        let (store, layer, prop) = (store.clone(), layer.clone(), prop.clone());
        out.push(grad_check(
            "gcn input",
            batch(&mut rng, 8, 3, 1.0),
            &leaf_fn(move |t, x| {
                let mut l = layer.clone();
                let y = l.forward(t, &store, x, Some(&prop), true)?;
                t.unary(Unary::Square, y)
            }),
        ));
    }
    let x_fixed = random_tensor(&mut rng, 8, 3, 1.0);
    let weight_fn = move |w: &Tensor| -> Result<(f64, Tensor)> {
        let mut s = store.clone();
        *s.value_mut(layer.weight()) = w.clone();
        let mut l = layer.clone();
        let mut t = Tape::new();
        let x = t.constant(x_fixed.clone())?;
        let y = l.forward(&mut t, &s, x, Some(&prop), true)?;
        let y = t.unary(Unary::Square, y)?;
        let y = t.sum(y)?;
        t.backward(y)?.write_params(&mut s);
        Ok((t.value(y).item(), s.grad(l.weight()).expect("written").clone()))
    };
    out.push(grad_check("gcn weight", batch(&mut rng, 3, 2, 0.8), &weight_fn));

    // exponential maps
    for space in [ModelSpace::euclidean(3), ModelSpace::hyperboloid(3), ModelSpace::hypersphere(3)] {
        let w = normal_vec(&mut rng, space.ambient_dim());
        let f = move |v: &Tensor| -> Result<(f64, Tensor)> {
            let x = space.exp_map_origin(v.data())?;
            let value = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let mut g = vec![0.0; space.dim];
            space.exp_map_vjp(v.data(), &w, &mut g);
            Ok((value, Tensor::from_vec(1, space.dim, g)?))
        };
        let mut inst = batch(&mut rng, 1, 3, 1.0);
        inst.push(Tensor::from_rows(&[vec![1e-4, -2e-4, 5e-5]]).expect("row"));
        out.push(grad_check(&format!("exp map {space}"), inst, &f));
    }

    // product distances through the tape, features and scaling parameters
    for text in ["E4", "H4", "S4", "E2×H2×S2", "E4×H4×H4"] {
        let sig = ManifoldSignature::parse(text, 4).expect("valid signature");
        let pairs: Rc<[(usize, usize)]> = vec![(0, 1), (1, 2), (2, 0), (3, 1), (0, 3)].into();
        let alpha = random_tensor(&mut rng, 1, sig.len(), 1.0);
        {
            let (sig, pairs, alpha) = (sig.clone(), pairs.clone(), alpha.clone());
            out.push(grad_check(
                &format!("product distance features {sig}"),
                batch(&mut rng, 4, sig.tangent_dim(), 0.7),
                &leaf_fn(move |t, x| {
                    let a = t.constant(alpha.clone())?;
                    edge_distances(t, &sig, x, a, pairs.clone())
                }),
            ));
        }
        let feats = random_tensor(&mut rng, 4, sig.tangent_dim(), 0.7);
        out.push(grad_check(
            &format!("product distance alpha {sig}"),
            batch(&mut rng, 1, sig.len(), 1.0),
            &leaf_fn(move |t, a| {
                let x = t.constant(feats.clone())?;
                edge_distances(t, &sig, x, a, pairs.clone())
            }),
        ));
    }

    // log p = -T d with respect to log T, through the per-node loss terms
    let sig = ManifoldSignature::parse("E2×H2", 2).expect("valid signature");
    let feats = random_tensor(&mut rng, 6, sig.tangent_dim(), 0.7);
    let deltas = [-0.5, 0.2, 0.0, 0.4, -0.1, 0.3];
    {
        let (sig, feats) = (sig.clone(), feats.clone());
        out.push(grad_check(
            "edge log-probability temperature",
            batch(&mut rng, 1, 1, 0.5),
            &leaf_fn(move |t, log_t| {
                let g = toy_graph(t, &sig, &feats, log_t, None)?;
                graph_loss(t, &deltas, &[g])
            }),
        ));
    }
    out.push(grad_check(
        "edge log-probability features",
        batch(&mut rng, 6, sig.tangent_dim(), 0.7),
        &leaf_fn(move |t, x| {
            let log_t = t.constant(Tensor::scalar(0.3))?;
            let g = toy_graph(t, &sig, &feats, log_t, Some(x))?;
            edge_logp_loss_terms(t, &g)
        }),
    ));
    out
}

/// Fixed 2-nearest-neighbour edges of `feats` with log-probabilities of
/// `x` (or `feats`) recorded on `t`.
fn toy_graph(
    t: &mut Tape,
    sig: &ManifoldSignature,
    feats: &Tensor,
    log_t: Var,
    x: Option<Var>,
) -> Result<LatentGraph> {
    let top = sample_edges(sig, feats, 2, 1.0, None, 1)?;
    let edges = top.pairs();
    let x = match x {
        Some(x) => x,
        None => t.constant(feats.clone())?,
    };
    let alpha = t.constant(Tensor::from_vec(1, sig.len(), sig.alpha_raw.clone())?)?;
    let d = edge_distances(t, sig, x, alpha, edges.clone().into())?;
    let temp = t.exp(log_t)?;
    let td = t.mul(temp, d)?;
    let edge_logp = t.neg(td)?;
    let temperature = t.value(temp).item();
    Ok(LatentGraph::new(t, 2, edges, edge_logp, temperature, sig.alphas(), feats.clone()))
}

/// Total-variation distance between empirical neighbour frequencies and the
/// categorical `p_ij / sum_r p_ir`, maximised over rows.
pub fn sampler_tv(sig: &ManifoldSignature, latent: &Tensor, temperature: f64, draws: u64) -> Result<f64> {
    let n = latent.rows();
    let points = sig.embed(latent)?;
    let alphas = sig.alphas();
    let mut counts = vec![0u64; n * n];
    for s in 0..draws {
        let top = sample_edges(sig, latent, 1, temperature, Some(s), 1)?;
        for (i, &j) in top.indices.iter().enumerate() {
            counts[i * n + j] += 1;
        }
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        let w: Vec<f64> = (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    (-temperature * sig.distance_embedded(points.row(i), points.row(j), Some(&alphas))).exp()
                }
            })
            .collect();
        let z: f64 = w.iter().sum();
        let tv: f64 = (0..n)
            .map(|j| (counts[i * n + j] as f64 / draws as f64 - w[j] / z).abs())
            .sum::<f64>()
            / 2.0;
        worst = worst.max(tv);
    }
    Ok(worst)
}

pub fn sampler_fixture() -> (ManifoldSignature, Tensor) {
    let sig = ManifoldSignature::parse("E2×H2", 2).expect("valid signature");
    let latent = Tensor::from_rows(&[
        vec![0.0, 0.0, 0.1, 0.0],
        vec![0.5, 0.2, 0.0, 0.3],
        vec![-0.4, 0.6, 0.2, -0.2],
        vec![1.0, -0.5, -0.3, 0.4],
    ])
    .expect("rectangular");
    (sig, latent)
}

pub fn sampler() -> Vec<Check> {
    const S: &str = "sampler";
    let (sig, latent) = sampler_fixture();
    let mut out = Vec::new();
    match sampler_tv(&sig, &latent, 1.0, SAMPLER_DRAWS) {
        Ok(tv) => out.push(
            Check::below(S, "4-node categorical total variation", tv, SAMPLER_TV_TOL)
                .with_detail(format!("over {SAMPLER_DRAWS} draws")),
        ),
        Err(e) => out.push(Check::failed(S, "4-node categorical total variation", &e)),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0usize;
    for _ in 0..20 {
        let x = random_tensor(&mut rng, 30, sig.tangent_dim(), 0.8);
        let temperature = rng.random_range(0.1..5.0);
        let got = match sample_edges(&sig, &x, 3, temperature, None, 1) {
            Ok(t) => t,
            Err(e) => {
                out.push(Check::failed(S, "deterministic equals kNN", &e));
                return out;
            }
        };
        let points = sig.embed(&x).expect("finite");
        let want = dense_topk(&sig, &points, ScoreMode::Distance, 3, true);
        if got.indices != want.0 {
            mismatches += 1;
        }
    }
    out.push(Check::below(S, "deterministic equals kNN", mismatches as f64, 0.5));
    out
}

/// Dense oracle: component distances straight from the model spaces, full
/// matrix, then a stable sort per row.
pub fn dense_topk(
    sig: &ManifoldSignature,
    points: &crate::product::ProductPoints,
    mode: ScoreMode,
    k: usize,
    exclude_self: bool,
) -> (Vec<usize>, Vec<f64>) {
    let n = points.rows();
    let alphas = sig.alphas();
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (p, q) = (points.row(i), points.row(j));
            let mut offset = 0;
            let mut total = 0.0;
            for (c, space) in sig.components().iter().enumerate() {
                let w = space.ambient_dim();
                let d = alphas[c] * space.distance(&p[offset..offset + w], &q[offset..offset + w]);
                total += d * d;
                offset += w;
            }
            let d = total.sqrt();
            matrix[i * n + j] = match mode {
                ScoreMode::Distance => d,
                ScoreMode::LogProb { temperature, noise } => {
                    -temperature * d + noise.map_or(0.0, |s| gumbel(s, i, j))
                }
            };
        }
    }
    let desc = matches!(mode, ScoreMode::LogProb { .. });
    let mut idx = Vec::with_capacity(n * k);
    let mut sc = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| !(exclude_self && j == i)).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (matrix[i * n + a], matrix[i * n + b]);
            let o = if desc { y.total_cmp(&x) } else { x.total_cmp(&y) };
            o.then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            idx.push(j);
            sc.push(matrix[i * n + j]);
        }
    }
    (idx, sc)
}

pub const REDUCTION_SIZES: [usize; 4] = [7, 64, 257, 512];
pub const REDUCTION_SIGNATURES: [&str; 5] = ["E4", "H4", "S4", "E2×H2×S2", "E4×H4×H4"];
pub const REDUCTION_KS: [usize; 4] = [1, 3, 7, 10];

pub fn reduction() -> Vec<Check> {
    const S: &str = "reduction";
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut out = Vec::new();
    let (mut mismatched, mut worst, mut cases, mut rejected) = (0usize, 0.0f64, 0usize, 0usize);
    for text in REDUCTION_SIGNATURES {
        let mut sig = ManifoldSignature::parse(text, 4).expect("valid signature");
        sig.alpha_raw = normal_vec(&mut rng, sig.len());
        for n in REDUCTION_SIZES {
            let x = random_tensor(&mut rng, n, sig.tangent_dim(), 0.8);
            let points = sig.embed(&x).expect("finite");
            for (m, mode) in [
                ScoreMode::Distance,
                ScoreMode::LogProb {
                    temperature: 1.7,
                    noise: Some(n as u64),
                },
            ]
            .into_iter()
            .enumerate()
            {
                for k in REDUCTION_KS {
                    let exclude_self = m == 0;
                    let candidates = if exclude_self { n - 1 } else { n };
                    for tile in [(1, 1), (n, n)] {
                        let lazy = LazyPairwise::new(&points, &sig, mode)
                            .with_tile(tile.0, tile.1)
                            .topk_reduce(k, exclude_self);
                        if k > candidates {
                            if lazy.is_ok() {
                                mismatched += 1;
                            } else {
                                rejected += 1;
                            }
                            continue;
                        }
                        cases += 1;
                        let (idx, sc) = dense_topk(&sig, &points, mode, k, exclude_self);
                        match lazy {
                            Ok(top) => {
                                if top.indices != idx {
                                    mismatched += 1;
                                }
                                for (a, b) in top.scores.iter().zip(&sc) {
                                    worst = worst.max((a - b).abs());
                                }
                            }
                            Err(_) => mismatched += 1,
                        }
                    }
                }
            }
        }
    }
    out.push(
        Check::below(S, "index mismatches vs dense argsort", mismatched as f64, 0.5)
            .with_detail(format!("{cases} cases, {rejected} infeasible k rejected")),
    );
    out.push(Check::below(S, "score deviation vs dense matrix", worst, 1e-12));

    // worker count does not change the result
    let sig = ManifoldSignature::parse("E2×H2×S2", 2).expect("valid signature");
    let x = random_tensor(&mut rng, 300, sig.tangent_dim(), 0.8);
    let points = sig.embed(&x).expect("finite");
    let mode = ScoreMode::LogProb {
        temperature: 1.0,
        noise: Some(3),
    };
    let one = LazyPairwise::new(&points, &sig, mode).with_tile(16, 64).topk_reduce(5, true);
    let many = LazyPairwise::new(&points, &sig, mode)
        .with_tile(16, 64)
        .with_workers(4)
        .topk_reduce(5, true);
    let same = matches!((&one, &many), (Ok(a), Ok(b)) if a == b);
    out.push(Check::below(S, "worker-count invariance", if same { 0.0 } else { 1.0 }, 0.5));
    out
}
