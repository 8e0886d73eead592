//! Discrete latent graph sampling: feature map, product-manifold embedding,
//! Gumbel top-k edge selection and edge log-probabilities.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{DenseLayer, Propagation};
use crate::product::{edge_distances, ManifoldSignature};
use crate::reduction::{LazyPairwise, ScoreMode, TopKResult};

#[derive(Debug, Clone, PartialEq)]
pub struct DgmConfig {
    pub k: usize,
    pub signature: ManifoldSignature,
    /// Graph layers of the feature map see the working graph (dDGM) rather
    /// than plain linear layers only (dDGM*).
    pub use_input_graph: bool,
    /// Disable Gumbel noise during training, giving pure kNN selection.
    pub deterministic: bool,
    pub temperature_init: f64,
    pub workers: usize,
}

#[derive(Debug)]
pub struct DgmLayer {
    pub cfg: DgmConfig,
    pub f_theta: Vec<DenseLayer>,
    alpha_raw: ParamId,
    log_t: ParamId,
}

/// A sampled latent graph tied to the tape that recorded its log-probabilities.
#[derive(Debug, Clone)]
pub struct LatentGraph {
    tape_id: u64,
    pub nodes: usize,
    pub k: usize,
    /// `N * k` directed pairs `(i, j)`, grouped by `i`, best first.
    pub edges: Vec<(usize, usize)>,
    /// Union of `edges` with its transpose, sorted and without self-loops.
    pub symmetric_edges: Vec<(usize, usize)>,
    /// `E x 1` noise-free `-T * d(x_i, x_j)` for `edges`.
    pub edge_logp: Var,
    pub temperature: f64,
    pub alphas: Vec<f64>,
    /// Tangent features the embedding was computed from.
    pub latent: Tensor,
}

impl LatentGraph {
    /// Assemble a graph whose `edge_logp` lives on `tape`.
    pub fn new(
        tape: &Tape,
        k: usize,
        edges: Vec<(usize, usize)>,
        edge_logp: Var,
        temperature: f64,
        alphas: Vec<f64>,
        latent: Tensor,
    ) -> Self {
        Self {
            tape_id: tape.id(),
            nodes: latent.rows(),
            k,
            symmetric_edges: symmetrize(&edges),
            edges,
            edge_logp,
            temperature,
            alphas,
            latent,
        }
    }

    pub fn tape_id(&self) -> u64 {
        self.tape_id
    }

    pub fn snapshot(&self, epoch: usize, labels: &[usize]) -> Result<GraphSnapshot> {
        Ok(GraphSnapshot {
            epoch,
            nodes: self.nodes,
            k: self.k,
            edges: undirected(&self.symmetric_edges)
                .map(|(i, j)| [i, j])
                .collect(),
            homophily: crate::training::edge_homophily(&self.symmetric_edges, labels)?,
        })
    }
}

/// Serializable record of a latent graph at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSnapshot {
    pub epoch: usize,
    pub nodes: usize,
    pub k: usize,
    pub edges: Vec<[usize; 2]>,
    pub homophily: f64,
}

impl GraphSnapshot {
    pub fn to_dot(&self, labels: &[usize]) -> String {
        let mut out = String::from("graph latent {\n");
        let _ = writeln!(out, "  // epoch {} homophily {}", self.epoch, self.homophily);
        for i in 0..self.nodes {
            let label = labels.get(i).copied().unwrap_or(0);
            let _ = writeln!(out, "  {i} [class={label}];");
        }
        for [i, j] in &self.edges {
            let _ = writeln!(out, "  {i} -- {j};");
        }
        out.push_str("}\n");
        out
    }
}

/// Pairs with `i < j` of a symmetric edge list.
pub fn undirected(edges: &[(usize, usize)]) -> impl Iterator<Item = (usize, usize)> + '_ {
    edges.iter().copied().filter(|&(i, j)| i < j)
}

/// Union with the transpose, deduplicated, diagonal removed, sorted.
pub fn symmetrize(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = edges
        .iter()
        .filter(|(i, j)| i != j)
        .flat_map(|&(i, j)| [(i, j), (j, i)])
        .collect();
    set.into_iter().collect()
}

/// Select `k` neighbours per row of `latent` under `-T * d`, perturbed by
/// Gumbel noise when `noise` is set. Self-pairs are never selected.
pub fn sample_edges(
    sig: &ManifoldSignature,
    latent: &Tensor,
    k: usize,
    temperature: f64,
    noise: Option<u64>,
    workers: usize,
) -> Result<TopKResult> {
    if latent.rows() <= k {
        return Err(Error::Value(format!(
            "k = {k} needs more than {k} nodes, got {}",
            latent.rows()
        )));
    }
    let points = sig.embed(latent)?;
    LazyPairwise::new(&points, sig, ScoreMode::LogProb { temperature, noise })
        .with_workers(workers)
        .topk_reduce(k, true)
}

impl DgmLayer {
    pub fn new(cfg: DgmConfig, f_theta: Vec<DenseLayer>, store: &mut ParamStore, name: &str) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::Config(format!("`{name}` needs k >= 1")));
        }
        if !(cfg.temperature_init > 0.0 && cfg.temperature_init.is_finite()) {
            return Err(Error::Config(format!(
                "`{name}` temperature must be positive, got {}",
                cfg.temperature_init
            )));
        }
        let alpha_raw = store.add(
            format!("{name}.alpha_raw"),
            Tensor::from_vec(1, cfg.signature.len(), cfg.signature.alpha_raw.clone())?,
        );
        let log_t = store.add(format!("{name}.log_t"), Tensor::scalar(cfg.temperature_init.ln()));
        Ok(Self {
            cfg,
            f_theta,
            alpha_raw,
            log_t,
        })
    }

    pub fn alpha_raw(&self) -> ParamId {
        self.alpha_raw
    }

    pub fn log_temperature(&self) -> ParamId {
        self.log_t
    }

    pub fn temperature(&self, store: &ParamStore) -> f64 {
        store.value(self.log_t).item().exp()
    }

    /// Signature with the current scaling parameters.
    pub fn signature(&self, store: &ParamStore) -> ManifoldSignature {
        let mut sig = self.cfg.signature.clone();
        sig.alpha_raw = store.value(self.alpha_raw).data().to_vec();
        sig
    }

    /// Map `input` through the feature map, sample `k` edges per node and
    /// record their log-probabilities on `tape`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        graph: Option<&Propagation>,
        train: bool,
        noise: Option<u64>,
    ) -> Result<(Var, LatentGraph)> {
        if self.cfg.use_input_graph && graph.is_none() {
            return Err(Error::Config("dDGM requires an input graph".into()));
        }
        let mut h = input;
        for layer in &mut self.f_theta {
            h = layer.forward(tape, store, h, graph, train)?;
        }
        let latent = tape.value(h).clone();
        let sig = self.signature(store);
        let temperature = self.temperature(store);
        let top = sample_edges(&sig, &latent, self.cfg.k, temperature, noise, self.cfg.workers)?;
        let edges = top.pairs();
        let pairs: Rc<[(usize, usize)]> = edges.clone().into();

        let alpha = tape.param(store, self.alpha_raw)?;
        let log_t = tape.param(store, self.log_t)?;
        let d = edge_distances(tape, &sig, h, alpha, pairs)?;
        let t = tape.exp(log_t)?;
        let td = tape.mul(t, d)?;
        let edge_logp = tape.neg(td)?;

        let graph = LatentGraph::new(tape, self.cfg.k, edges, edge_logp, temperature, sig.alphas(), latent);
        Ok((h, graph))
    }
}

/// Per-node sums of sampled-edge log-probabilities as an `N x 1` tape value.
pub fn edge_logp_loss_terms(tape: &mut Tape, graph: &LatentGraph) -> Result<Var> {
    if graph.tape_id != tape.id() {
        return Err(Error::StaleTape {
            expected: tape.id(),
            found: graph.tape_id,
        });
    }
    let pairs: Rc<[(usize, usize)]> = graph
        .edges
        .iter()
        .enumerate()
        .map(|(e, &(i, _))| (e, i))
        .collect();
    let weights: Rc<[f64]> = vec![1.0; pairs.len()].into();
    tape.gather_sum(graph.edge_logp, pairs, weights, graph.nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrize_examples() {
        assert_eq!(symmetrize(&[(0, 1)]), vec![(0, 1), (1, 0)]);
        assert!(symmetrize(&[]).is_empty());
        assert_eq!(symmetrize(&[(2, 2), (1, 0), (0, 1)]), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn duplicate_points_select_each_other() {
        let sig = ManifoldSignature::parse("E2", 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, 0.3], vec![0.3, 0.3], vec![5.0, -2.0]]).unwrap();
        let top = sample_edges(&sig, &x, 1, 1.0, None, 1).unwrap();
        assert_eq!(top.row_indices(0), &[1]);
        assert_eq!(top.row_indices(1), &[0]);
        assert_eq!(top.row_scores(0), &[0.0]);
    }

    #[test]
    fn too_few_nodes_is_an_error() {
        let sig = ManifoldSignature::parse("E2", 2).unwrap();
        assert!(sample_edges(&sig, &Tensor::zeros(3, 2), 3, 1.0, None, 1).is_err());
    }

    #[test]
    fn dot_lists_every_edge() {
        let snap = GraphSnapshot {
            epoch: 1,
            nodes: 2,
            k: 1,
            edges: vec![[0, 1]],
            homophily: 1.0,
        };
        let dot = snap.to_dot(&[0, 0]);
        assert!(dot.contains("0 -- 1;"));
        assert!(dot.starts_with("graph latent {"));
    }
}
