use std::fmt::Write as _;
use std::fs;

use mdgm::autodiff::Tensor;
use mdgm::data::{
    generate_sbm, load_citation_tsv, load_manifest, load_masks, load_pointcloud_csv, make_splits, write_dataset,
    Dataset, Masks, SbmParams, SplitSpec,
};
use mdgm::dgm::symmetrize;
use mdgm::training::edge_homophily;
use mdgm::Error;
use proptest::collection::vec;
use proptest::prelude::*;

fn write_files(dir: &std::path::Path, nodes: &str, edges: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let (n, e) = (dir.join("nodes.tsv"), dir.join("edges.tsv"));
    fs::write(&n, nodes).unwrap();
    fs::write(&e, edges).unwrap();
    (n, e)
}

#[test]
fn two_node_file_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (n, e) = write_files(dir.path(), "a\t1\t0.1\t-2.5\nb\t0\t3e-7\t4\n", "a\tb\n");
    let ds = load_citation_tsv(&n, &e).unwrap();
    assert_eq!(ds.ids, ["a", "b"]);
    assert_eq!(ds.labels, [1, 0]);
    assert_eq!(ds.features.data(), &[0.1, -2.5, 3e-7, 4.0]);
    assert_eq!(ds.edges, Some(vec![(0, 1), (1, 0)]));
    assert_eq!(ds.undirected_edge_count(), 1);

    let out = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&ds, out.path()).unwrap();
    let back = load_manifest(&manifest).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.ids, ds.ids);
}

#[test]
fn string_labels_are_encoded_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    let (n, e) = write_files(dir.path(), "1\tTheory\t0\n2\tAI\t1\n3\tTheory\t2\n", "1\t3\n");
    let ds = load_citation_tsv(&n, &e).unwrap();
    assert_eq!(ds.label_names, ["AI", "Theory"]);
    assert_eq!(ds.labels, [1, 0, 1]);
    assert_eq!(edge_homophily(ds.edges.as_ref().unwrap(), &ds.labels).unwrap(), 1.0);
}

#[test]
fn unknown_edge_endpoint_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (n, e) = write_files(dir.path(), "a\t0\t1\nb\t1\t2\n", "a\tb\nb\tzz\n");
    let err = load_citation_tsv(&n, &e).unwrap_err();
    assert!(matches!(err, Error::Parse(_)));
    let msg = err.to_string();
    assert!(msg.contains(":2") && msg.contains("zz"), "{msg}");
}

#[test]
fn ragged_feature_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (n, e) = write_files(dir.path(), "a\t0\t1\t2\nb\t1\t2\n", "");
    let msg = load_citation_tsv(&n, &e).unwrap_err().to_string();
    assert!(msg.contains(":2"), "{msg}");
}

#[test]
fn mask_file_assigns_splits() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("masks.tsv");
    fs::write(&p, "x\ttrain\ny\tval\nz\ttest\n").unwrap();
    let ids: Vec<String> = ["x", "y", "z", "w"].iter().map(|s| s.to_string()).collect();
    let m = load_masks(&p, &ids).unwrap();
    assert_eq!(m.train, [true, false, false, false]);
    assert_eq!(m.counts(), (1, 1, 1));
    fs::write(&p, "x\ttrain\ny\tholdout\n").unwrap();
    assert!(load_masks(&p, &ids).unwrap_err().to_string().contains(":2"));
}

fn pointcloud(rows: usize, features: usize, classes: usize) -> String {
    let mut s = String::new();
    for f in 0..features {
        let _ = write!(s, "f{f},");
    }
    s.push_str("label\n");
    for r in 0..rows {
        for f in 0..features {
            let _ = write!(s, "{},", (r * 31 + f * 7) % 13);
        }
        let _ = writeln!(s, "{}", r % classes);
    }
    s
}

#[test]
fn pointcloud_shapes() {
    let dir = tempfile::tempdir().unwrap();
    for (rows, feats, classes) in [(564, 30, 3), (1456, 1, 4), (1, 3, 1)] {
        let p = dir.path().join(format!("pc{rows}.csv"));
        fs::write(&p, pointcloud(rows, feats, classes)).unwrap();
        let ds = load_pointcloud_csv(&p, "label").unwrap();
        assert_eq!((ds.num_nodes(), ds.num_features(), ds.num_classes), (rows, feats, classes));
        assert!(ds.edges.is_none());
        ds.validate().unwrap();
    }
}

#[test]
fn pointcloud_rejects_non_numeric_cells() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "a,b,label\n1,2,0\n3,x,1\n").unwrap();
    let msg = load_pointcloud_csv(&p, "label").unwrap_err().to_string();
    assert!(msg.contains(":3") && msg.contains('x'), "{msg}");
}

fn params(p_intra: f64, p_inter: f64, per_class: usize, classes: usize) -> SbmParams {
    SbmParams {
        nodes_per_class: per_class,
        num_classes: classes,
        p_intra,
        p_inter,
        feature_dim: 3,
        sigma_sep: 1.0,
        sigma_noise: 1.0,
    }
}

#[test]
fn sbm_homophily_examples() {
    let h = |p: &SbmParams| {
        let ds = generate_sbm(p, 1).unwrap();
        edge_homophily(ds.edges.as_ref().unwrap(), &ds.labels).unwrap()
    };
    assert_eq!(h(&params(1.0, 0.0, 10, 3)), 1.0);
    assert_eq!(h(&params(0.0, 1.0, 10, 2)), 0.0);
    // p_intra = p_inter: each edge is intra-class with probability
    // (n/C - 1) / (n - 1); check within three binomial standard deviations
    let (per, c) = (100usize, 4usize);
    let ds = generate_sbm(&params(0.05, 0.05, per, c), 2).unwrap();
    let edges = ds.edges.as_ref().unwrap();
    let m = (edges.len() / 2) as f64;
    let n = (per * c) as f64;
    let q = (per as f64 - 1.0) / (n - 1.0);
    let got = edge_homophily(edges, &ds.labels).unwrap();
    assert!((got - q).abs() < 3.0 * (q * (1.0 - q) / m).sqrt(), "{got} vs {q}");
    assert!((q - 1.0 / c as f64).abs() < 0.01);
    assert!(generate_sbm(&params(1.5, 0.0, 2, 2), 0).is_err());
}

#[test]
fn sbm_is_reproducible() {
    let p = params(0.2, 0.1, 15, 3);
    assert_eq!(generate_sbm(&p, 4).unwrap(), generate_sbm(&p, 4).unwrap());
    assert_ne!(generate_sbm(&p, 4).unwrap().features, generate_sbm(&p, 5).unwrap().features);
}

#[test]
fn split_examples() {
    let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
    let frac = SplitSpec::Fractions {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    let m = make_splits(&labels, 4, &frac, 3).unwrap();
    assert_eq!(m.counts(), (60, 20, 20));
    assert_eq!(m, make_splits(&labels, 4, &frac, 3).unwrap());
    assert_ne!(m, make_splits(&labels, 4, &frac, 4).unwrap());

    let cora_like: Vec<usize> = (0..2708).map(|i| i % 7).collect();
    let per = SplitSpec::PerClass {
        train: 20,
        val: 70,
        test: 140,
    };
    assert_eq!(make_splits(&cora_like, 7, &per, 0).unwrap().counts().0, 140);
    let small = SplitSpec::PerClass {
        train: 20,
        val: 10,
        test: 10,
    };
    assert!(make_splits(&labels, 4, &small, 0).is_err());
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (3usize..12, 1usize..4, 1usize..4).prop_flat_map(|(n, f, c)| {
        (
            vec(-1e3f64..1e3, n * f),
            vec(0..c, n),
            vec((0..n, 0..n), 0..3 * n),
            vec(0u8..4, n),
        )
            .prop_map(move |(feats, mut labels, edges, split)| {
                labels[0] = c - 1;
                let mut masks = Masks {
                    train: split.iter().map(|&s| s == 0).collect(),
                    val: split.iter().map(|&s| s == 1).collect(),
                    test: split.iter().map(|&s| s == 2).collect(),
                };
                // first three nodes pin one node to each split
                for i in 0..3 {
                    masks.train[i] = i == 0;
                    masks.val[i] = i == 1;
                    masks.test[i] = i == 2;
                }
                Dataset {
                    name: "toy".into(),
                    ids: (0..n).map(|i| format!("n{i}")).collect(),
                    features: Tensor::from_vec(n, f, feats).unwrap(),
                    labels,
                    label_names: (0..c).map(|i| i.to_string()).collect(),
                    edges: Some(symmetrize(&edges)),
                    masks: Some(masks),
                    num_classes: c,
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn written_datasets_load_back_identically(ds in dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let loaded = load_manifest(&write_dataset(&ds, dir.path()).unwrap()).unwrap();
        prop_assert_eq!(&loaded, &ds);
        let again = tempfile::tempdir().unwrap();
        prop_assert_eq!(load_manifest(&write_dataset(&loaded, again.path()).unwrap()).unwrap(), loaded);
    }
}
