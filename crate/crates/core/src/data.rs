//! Datasets: citation-graph TSV, pointcloud CSV, a stochastic block model
//! generator and stratified splits.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dgm::{symmetrize, undirected};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (c(&self.train), c(&self.val), c(&self.test))
    }

    /// Disjoint, of length `n`, each non-empty.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(Error::Dataset(format!("masks do not cover {n} nodes")));
        }
        for i in 0..n {
            let hits = self.train[i] as u8 + self.val[i] as u8 + self.test[i] as u8;
            if hits > 1 {
                return Err(Error::Dataset(format!("node {i} is in more than one split")));
            }
        }
        let (a, b, c) = self.counts();
        if a == 0 || b == 0 || c == 0 {
            return Err(Error::Dataset(format!(
                "every split must be non-empty, got train {a} / val {b} / test {c}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Original node identifiers, in row order.
    pub ids: Vec<String>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Class names indexed by label.
    pub label_names: Vec<String>,
    /// Both directions of every undirected edge, sorted; `None` for pointclouds.
    pub edges: Option<Vec<(usize, usize)>>,
    pub masks: Option<Masks>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn undirected_edge_count(&self) -> usize {
        self.edges.as_deref().map_or(0, |e| undirected(e).count())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.rows() != n || self.ids.len() != n {
            return Err(Error::Dataset(format!(
                "{} feature rows and {} ids for {n} labels",
                self.features.rows(),
                self.ids.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "label {y} outside [0, {})",
                self.num_classes
            )));
        }
        if let Some(edges) = &self.edges {
            if symmetrize(edges) != *edges {
                return Err(Error::Dataset("edge set is not symmetric and deduplicated".into()));
            }
            if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n) {
                return Err(Error::Dataset(format!("edge ({i}, {j}) out of range")));
            }
        }
        if let Some(m) = &self.masks {
            m.validate(n)?;
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}:{line}: {msg}", path.display()))
}

/// Label strings to dense ids: numeric labels keep their value, anything
/// else is numbered in sorted order.
fn encode_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let numeric: Option<Vec<usize>> = raw.iter().map(|s| s.parse().ok()).collect();
    match numeric {
        Some(ys) => {
            let c = ys.iter().max().map_or(0, |m| m + 1);
            (ys, (0..c).map(|i| i.to_string()).collect())
        }
        None => {
            let names: Vec<String> = raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            let index: HashMap<&str, usize> =
                names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            (raw.iter().map(|s| index[s.as_str()]).collect(), names)
        }
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Node rows `id \t label \t f1 ... fF`, edge rows `id \t id`.
pub fn load_citation_tsv(node_file: &Path, edge_file: &Path) -> Result<Dataset> {
    let text = read(node_file)?;
    let mut ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (ln, line) in lines(&text) {
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        let label = cols
            .next()
            .ok_or_else(|| parse_err(node_file, ln, "missing label column"))?
            .to_string();
        let start = data.len();
        for c in cols {
            let v: f64 = c
                .trim()
                .parse()
                .map_err(|_| parse_err(node_file, ln, format!("non-numeric feature `{c}`")))?;
            data.push(v);
        }
        let w = data.len() - start;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(parse_err(
                    node_file,
                    ln,
                    format!("{w} features, expected {expected}"),
                ))
            }
            _ => {}
        }
        ids.push(id);
        raw_labels.push(label);
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != ids.len() {
        return Err(Error::Parse(format!("{}: duplicate node id", node_file.display())));
    }
    let text = read(edge_file)?;
    let mut edges = Vec::new();
    for (ln, line) in lines(&text) {
        let mut cols = line.split('\t');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err(edge_file, ln, "expected two tab-separated ids"));
        };
        let lookup = |s: &str| {
            index
                .get(s.trim())
                .copied()
                .ok_or_else(|| parse_err(edge_file, ln, format!("unknown node id `{s}`")))
        };
        edges.push((lookup(a)?, lookup(b)?));
    }
    let n = ids.len();
    let (labels, label_names) = encode_labels(&raw_labels);
    let ds = Dataset {
        name: node_file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        ids,
        features: Tensor::from_vec(n, width.unwrap_or(0), data)?,
        num_classes: label_names.len(),
        labels,
        label_names,
        edges: Some(symmetrize(&edges)),
        masks: None,
    };
    Ok(ds)
}

/// Rows `id \t split` with split one of `train`, `val`, `test`; unlisted
/// nodes belong to no split.
pub fn load_masks(path: &Path, ids: &[String]) -> Result<Masks> {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = ids.len();
    let mut masks = Masks {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    for (ln, line) in lines(&read(path)?) {
        let mut cols = line.split('\t');
        let (Some(id), Some(split), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err(path, ln, "expected `id \\t split`"));
        };
        let &i = index
            .get(id.trim())
            .ok_or_else(|| parse_err(path, ln, format!("unknown node id `{id}`")))?;
        let slot = match split.trim() {
            "train" => &mut masks.train,
            "val" => &mut masks.val,
            "test" => &mut masks.test,
            other => return Err(parse_err(path, ln, format!("unknown split `{other}`"))),
        };
        slot[i] = true;
    }
    masks.validate(n)?;
    Ok(masks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub nodes_file: String,
    pub edges_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks_file: Option<String>,
    pub num_classes: usize,
}

/// Load a dataset described by a JSON manifest; file paths are relative to
/// the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&read(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ds = load_citation_tsv(&base.join(&manifest.nodes_file), &base.join(&manifest.edges_file))?;
    ds.name = manifest.name.clone();
    if manifest.num_classes < ds.num_classes {
        return Err(Error::Dataset(format!(
            "manifest declares {} classes but labels use {}",
            manifest.num_classes, ds.num_classes
        )));
    }
    if manifest.num_classes > ds.label_names.len() && ds.label_names.iter().all(|l| l.parse::<usize>().is_ok()) {
        ds.label_names = (0..manifest.num_classes).map(|i| i.to_string()).collect();
    }
    ds.num_classes = manifest.num_classes;
    if let Some(m) = &manifest.masks_file {
        ds.masks = Some(load_masks(&base.join(m), &ds.ids)?);
    }
    ds.validate()?;
    Ok(ds)
}

/// Header row plus numeric columns; `label_column` holds integer labels.
pub fn load_pointcloud_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let label_at = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Parse(format!("{}: no column `{label_column}`", path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let ln = row + 2;
        let record = record.map_err(|e| parse_err(path, ln, e))?;
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == label_at {
                labels.push(
                    cell.parse::<usize>()
                        .map_err(|_| parse_err(path, ln, format!("non-integer label `{cell}`")))?,
                );
            } else {
                data.push(
                    cell.parse::<f64>()
                        .map_err(|_| parse_err(path, ln, format!("non-numeric cell `{cell}`")))?,
                );
            }
        }
    }
    let n = labels.len();
    let width = headers.len() - 1;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        ids: (0..n).map(|i| i.to_string()).collect(),
        features: Tensor::from_vec(n, width, data)?,
        labels,
        label_names: (0..num_classes).map(|i| i.to_string()).collect(),
        edges: None,
        masks: None,
        num_classes,
    })
}

/// Write `nodes.tsv`, `edges.tsv`, optional `masks.tsv` and
/// `manifest.json` into `dir`. Returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut nodes = String::new();
    for i in 0..ds.num_nodes() {
        nodes.push_str(&ds.ids[i]);
        nodes.push('\t');
        nodes.push_str(&ds.label_names[ds.labels[i]]);
        for v in ds.features.row(i) {
            nodes.push('\t');
            nodes.push_str(&format!("{v:?}"));
        }
        nodes.push('\n');
    }
    let mut edges = String::new();
    for (i, j) in undirected(ds.edges.as_deref().unwrap_or(&[])) {
        edges.push_str(&format!("{}\t{}\n", ds.ids[i], ds.ids[j]));
    }
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("nodes.tsv", &nodes)?;
    write("edges.tsv", &edges)?;
    if let Some(m) = &ds.masks {
        let mut body = String::new();
        for (i, id) in ds.ids.iter().enumerate() {
            let split = if m.train[i] {
                "train"
            } else if m.val[i] {
                "val"
            } else if m.test[i] {
                "test"
            } else {
                continue;
            };
            body.push_str(&format!("{id}\t{split}\n"));
        }
        write("masks.tsv", &body)?;
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        nodes_file: "nodes.tsv".into(),
        edges_file: "edges.tsv".into(),
        masks_file: ds.masks.as_ref().map(|_| "masks.tsv".into()),
        num_classes: ds.num_classes,
    };
    write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    Ok(dir.join("manifest.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmParams {
    pub nodes_per_class: usize,
    pub num_classes: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-class mean vectors.
    pub sigma_sep: f64,
    /// Standard deviation of per-node noise around the class mean.
    pub sigma_noise: f64,
}

/// Planted-partition graph with Gaussian class-conditional features.
pub fn generate_sbm(params: &SbmParams, seed: u64) -> Result<Dataset> {
    let valid = |p: f64| (0.0..=1.0).contains(&p);
    if !valid(params.p_intra) || !valid(params.p_inter) {
        return Err(Error::Config(format!(
            "edge probabilities must lie in [0, 1], got {} / {}",
            params.p_intra, params.p_inter
        )));
    }
    if params.num_classes == 0 || params.nodes_per_class == 0 || params.feature_dim == 0 {
        return Err(Error::Config("SBM sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = params.num_classes;
    let n = c * params.nodes_per_class;
    let f = params.feature_dim;
    let labels: Vec<usize> = (0..n).map(|i| i / params.nodes_per_class).collect();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<f64> = (0..c * f).map(|_| params.sigma_sep * normal()).collect();
    let mut data = Vec::with_capacity(n * f);
    for &y in &labels {
        for d in 0..f {
            data.push(means[y * f + d] + params.sigma_noise * normal());
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] {
                params.p_intra
            } else {
                params.p_inter
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Ok(Dataset {
        name: "sbm".into(),
        ids: (0..n).map(|i| i.to_string()).collect(),
        features: Tensor::from_vec(n, f, data)?,
        labels,
        label_names: (0..c).map(|i| i.to_string()).collect(),
        edges: Some(symmetrize(&edges)),
        masks: None,
        num_classes: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    PerClass { train: usize, val: usize, test: usize },
}

/// Stratified random split, deterministic per seed.
pub fn make_splits(labels: &[usize], num_classes: usize, spec: &SplitSpec, seed: u64) -> Result<Masks> {
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::Dataset(format!("label {y} outside [0, {num_classes})")))?
            .push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let mut masks = Masks {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    match *spec {
        SplitSpec::PerClass { train, val, test } => {
            for (c, members) in by_class.iter().enumerate() {
                if members.len() < train + val + test {
                    return Err(Error::Dataset(format!(
                        "class {c} has {} nodes, {} requested",
                        members.len(),
                        train + val + test
                    )));
                }
                for (r, &i) in members.iter().enumerate() {
                    if r < train {
                        masks.train[i] = true;
                    } else if r < train + val {
                        masks.val[i] = true;
                    } else if r < train + val + test {
                        masks.test[i] = true;
                    }
                }
            }
        }
        SplitSpec::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || train + val + test > 1.0 + 1e-9 {
                return Err(Error::Config(format!(
                    "split fractions {train}/{val}/{test} must be non-negative and sum to at most 1"
                )));
            }
            // Interleave classes by relative rank so any prefix is stratified.
            let mut order: Vec<(f64, usize, usize)> = by_class
                .iter()
                .enumerate()
                .flat_map(|(c, m)| {
                    let len = m.len() as f64;
                    m.iter().enumerate().map(move |(r, &i)| ((r as f64 + 0.5) / len, c, i))
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let count = |f: f64| (f * n as f64).round() as usize;
            let n_train = count(train).min(n);
            let n_val = count(val).min(n - n_train);
            let n_test = count(test).min(n - n_train - n_val);
            for (r, &(_, _, i)) in order.iter().enumerate() {
                if r < n_train {
                    masks.train[i] = true;
                } else if r < n_train + n_val {
                    masks.val[i] = true;
                } else if r < n_train + n_val + n_test {
                    masks.test[i] = true;
                }
            }
        }
    }
    masks.validate(n)?;
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_split_sizes() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let spec = SplitSpec::Fractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        let m = make_splits(&labels, 3, &spec, 4).unwrap();
        assert_eq!(m.counts(), (60, 20, 20));
        assert_eq!(m, make_splits(&labels, 3, &spec, 4).unwrap());
    }

    #[test]
    fn per_class_split_needs_enough_nodes() {
        let labels = vec![0, 0, 1, 1, 1];
        let spec = SplitSpec::PerClass {
            train: 1,
            val: 1,
            test: 1,
        };
        assert!(make_splits(&labels, 2, &spec, 0).is_err());
    }

    #[test]
    fn sbm_extremes() {
        let mut p = SbmParams {
            nodes_per_class: 10,
            num_classes: 2,
            p_intra: 1.0,
            p_inter: 0.0,
            feature_dim: 3,
            sigma_sep: 1.0,
            sigma_noise: 1.0,
        };
        let ds = generate_sbm(&p, 1).unwrap();
        assert_eq!(ds.undirected_edge_count(), 2 * 45);
        p.p_intra = 0.0;
        p.p_inter = 1.0;
        let ds = generate_sbm(&p, 1).unwrap();
        assert_eq!(ds.undirected_edge_count(), 100);
        p.p_inter = 1.5;
        assert!(generate_sbm(&p, 1).is_err());
    }

    #[test]
    fn string_labels_are_sorted() {
        let raw: Vec<String> = ["b", "a", "b"].iter().map(|s| s.to_string()).collect();
        let (y, names) = encode_labels(&raw);
        assert_eq!(y, vec![1, 0, 1]);
        assert_eq!(names, vec!["a", "b"]);
    }
}
