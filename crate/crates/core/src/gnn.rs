//! Diffusion layers, network specifications and full-network assembly.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::dgm::{DgmConfig, DgmLayer, LatentGraph};
use crate::error::{Error, Result};
use crate::product::ManifoldSignature;
use crate::reduction::mix_seed;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Elu,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::None => Ok(x),
            Activation::Elu => tape.elu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Normalised propagation `D^-1/2 (A + I) D^-1/2` as weighted
/// `(src, dst)` pairs, self-loops included.
#[derive(Debug, Clone)]
pub struct Propagation {
    nodes: usize,
    pairs: Rc<[(usize, usize)]>,
    weights: Rc<[f64]>,
}

impl Propagation {
    /// `edges` must list both directions of every undirected edge;
    /// self-loops in the input are ignored.
    pub fn gcn(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut degree = vec![1.0f64; nodes];
        for &(a, b) in edges {
            if a >= nodes || b >= nodes {
                return Err(Error::Index(format!(
                    "edge ({a}, {b}) out of range for {nodes} nodes"
                )));
            }
            if a != b {
                degree[a] += 1.0;
            }
        }
        let mut pairs = Vec::with_capacity(edges.len() + nodes);
        let mut weights = Vec::with_capacity(edges.len() + nodes);
        for (i, &d) in degree.iter().enumerate() {
            pairs.push((i, i));
            weights.push(1.0 / d);
        }
        for &(a, b) in edges.iter().filter(|(a, b)| a != b) {
            pairs.push((a, b));
            weights.push(1.0 / (degree[a] * degree[b]).sqrt());
        }
        Ok(Self {
            nodes,
            pairs: pairs.into(),
            weights: weights.into(),
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).rows() != self.nodes {
            return Err(Error::Dimension(format!(
                "propagation over {} nodes applied to {} rows",
                self.nodes,
                tape.value(x).rows()
            )));
        }
        tape.rows_gather_sum(x, self.pairs.clone(), self.weights.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseKind {
    Linear,
    GraphConv,
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    pub state: BatchNormState,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(1, width, 1.0)),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(1, width)),
            state: BatchNormState {
                running_mean: vec![0.0; width],
                running_var: vec![1.0; width],
            },
        }
    }

    fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Result<Var> {
        let gamma = tape.param(store, self.gamma)?;
        let beta = tape.param(store, self.beta)?;
        if !train {
            let s = &self.state;
            return tape.batch_norm_fixed(x, gamma, beta, &s.running_mean, &s.running_var, BN_EPS);
        }
        let v = tape.value(x);
        let (n, c) = v.shape();
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(v.row(r)) {
                *m += x / n as f64;
            }
        }
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, &x), &m) in var.iter_mut().zip(v.row(r)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        for j in 0..c {
            let s = &mut self.state;
            s.running_mean[j] = (1.0 - BN_MOMENTUM) * s.running_mean[j] + BN_MOMENTUM * mean[j];
            s.running_var[j] = (1.0 - BN_MOMENTUM) * s.running_var[j] + BN_MOMENTUM * var[j] / denom;
        }
        tape.batch_norm(x, gamma, beta, BN_EPS)
    }
}

/// Affine map (optionally preceded by graph propagation), then batch norm,
/// then activation.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub kind: DenseKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    weight: ParamId,
    bias: ParamId,
    pub batch_norm: Option<BatchNorm>,
}

impl DenseLayer {
    /// Linear layers use the `U(-1/sqrt(in), 1/sqrt(in))` initialisation
    /// for weight and bias; graph convolutions use Glorot-uniform weights
    /// and a zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        kind: DenseKind,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        batch_norm: bool,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "layer `{name}` needs positive widths, got ({in_dim}, {out_dim})"
            )));
        }
        let (w_bound, b_bound) = match kind {
            DenseKind::Linear => {
                let b = 1.0 / (in_dim as f64).sqrt();
                (b, b)
            }
            DenseKind::GraphConv => ((6.0 / (in_dim + out_dim) as f64).sqrt(), 0.0),
        };
        let mut uniform = |rows, cols, bound: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    if bound == 0.0 {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    }
                })
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        let weight = store.add(format!("{name}.weight"), uniform(in_dim, out_dim, w_bound)?);
        let bias = store.add(format!("{name}.bias"), uniform(1, out_dim, b_bound)?);
        let batch_norm = batch_norm.then(|| BatchNorm::new(store, name, out_dim));
        Ok(Self {
            kind,
            in_dim,
            out_dim,
            activation,
            weight,
            bias,
            batch_norm,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: Option<&Propagation>,
        train: bool,
    ) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim {
            return Err(Error::Dimension(format!(
                "layer expects {} input features, got {cols}",
                self.in_dim
            )));
        }
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let mut h = tape.matmul(x, w)?;
        if self.kind == DenseKind::GraphConv {
            let graph = graph.ok_or_else(|| {
                Error::Config("graph convolution applied without an edge set".into())
            })?;
            h = graph.apply(tape, h)?;
        }
        h = tape.add_row(h, b)?;
        if let Some(bn) = &mut self.batch_norm {
            h = bn.forward(tape, store, h, train)?;
        }
        self.activation.apply(tape, h)
    }
}

fn default_true() -> bool {
    true
}

/// One entry of a network description. Widths are inferred from the
/// previous layer; an explicit `in` is checked against the inferred value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        #[serde(default, rename = "in", skip_serializing_if = "Option::is_none")]
        in_dim: Option<usize>,
        out: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        batch_norm: bool,
    },
    Gcn {
        #[serde(default, rename = "in", skip_serializing_if = "Option::is_none")]
        in_dim: Option<usize>,
        out: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        batch_norm: bool,
    },
    Ddgm {
        /// Layers of the latent feature map; the last width must equal the
        /// tangent dimension of the signature.
        f_theta: Vec<LayerSpec>,
        #[serde(default = "default_true")]
        use_input_graph: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        signature: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deterministic: Option<bool>,
    },
}

impl LayerSpec {
    pub fn linear(out: usize, activation: Activation, batch_norm: bool) -> Self {
        LayerSpec::Linear {
            in_dim: None,
            out,
            activation,
            batch_norm,
        }
    }

    pub fn gcn(out: usize, activation: Activation, batch_norm: bool) -> Self {
        LayerSpec::Gcn {
            in_dim: None,
            out,
            activation,
            batch_norm,
        }
    }

    fn dense(conv: bool, out: usize, activation: Activation, batch_norm: bool) -> Self {
        if conv {
            Self::gcn(out, activation, batch_norm)
        } else {
            Self::linear(out, activation, batch_norm)
        }
    }
}

/// Shared settings for dDGM layers that do not override them.
#[derive(Debug, Clone, PartialEq)]
pub struct DgmDefaults {
    pub k: usize,
    pub signature: ManifoldSignature,
    pub deterministic: bool,
    pub temperature_init: f64,
    pub workers: usize,
}

impl Default for DgmDefaults {
    fn default() -> Self {
        Self {
            k: 7,
            signature: ManifoldSignature::parse("EHS", 4).expect("valid default signature"),
            deterministic: false,
            temperature_init: 1.0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mlp,
    Gcn,
    GcnDdgm,
    GcnDdgmStar,
    MlpHetero,
    GcnHetero,
    GcnDdgmHetero,
    GcnDdgmStarHetero,
}

impl Preset {
    /// Layer list for this architecture. `components` and `tangent_dim`
    /// describe the dDGM signature.
    pub fn layers(self, num_classes: usize, components: usize, tangent_dim: usize) -> Vec<LayerSpec> {
        use Activation::{Elu, None as Raw, Sigmoid};
        let s = components;
        let ddgm = |star: bool, hetero: bool| {
            let conv = !star;
            let f_theta = if hetero {
                vec![
                    LayerSpec::linear(32, Elu, true),
                    LayerSpec::dense(conv, 4 * s, Elu, star),
                    LayerSpec::dense(conv, tangent_dim, Sigmoid, star),
                ]
            } else {
                vec![
                    LayerSpec::linear(32, Elu, false),
                    LayerSpec::dense(conv, 16 * s, Elu, false),
                    LayerSpec::dense(conv, tangent_dim, Sigmoid, false),
                ]
            };
            LayerSpec::Ddgm {
                f_theta,
                use_input_graph: !star,
                k: None,
                signature: None,
                deterministic: None,
            }
        };
        let classical = |conv: bool| {
            vec![
                LayerSpec::dense(conv, 32, Elu, false),
                LayerSpec::dense(conv, 16, Elu, false),
                LayerSpec::dense(conv, 8, Elu, false),
                LayerSpec::linear(8, Elu, false),
                LayerSpec::linear(8, Elu, false),
                LayerSpec::linear(num_classes, Raw, false),
            ]
        };
        let hetero = |conv: bool| {
            vec![
                LayerSpec::dense(conv, 16, Elu, false),
                LayerSpec::dense(conv, 8, Elu, false),
                LayerSpec::linear(8, Elu, true),
                LayerSpec::linear(num_classes, Raw, false),
            ]
        };
        let with = |head: LayerSpec, mut rest: Vec<LayerSpec>| {
            rest.insert(0, head);
            rest
        };
        match self {
            Preset::Mlp => classical(false),
            Preset::Gcn => classical(true),
            Preset::GcnDdgm => with(ddgm(false, false), classical(true)),
            Preset::GcnDdgmStar => with(ddgm(true, false), classical(true)),
            Preset::MlpHetero => hetero(false),
            Preset::GcnHetero => hetero(true),
            Preset::GcnDdgmHetero => with(ddgm(false, true), hetero(true)),
            Preset::GcnDdgmStarHetero => with(ddgm(true, true), hetero(true)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug)]
pub enum Block {
    Dense(DenseLayer),
    Dgm(DgmLayer),
}

/// Forward pass flavour: training uses batch statistics and, unless a
/// dDGM is deterministic, Gumbel-perturbed sampling keyed by `noise_seed`;
/// evaluation uses running statistics and noise-free top-k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { noise_seed: u64 },
    Eval,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub graphs: Vec<LatentGraph>,
}

#[derive(Debug)]
pub struct Network {
    pub blocks: Vec<Block>,
    pub in_features: usize,
    pub num_classes: usize,
}

fn check_in(spec_in: Option<usize>, width: usize, name: &str) -> Result<()> {
    match spec_in {
        Some(w) if w != width => Err(Error::Config(format!(
            "layer `{name}` declares {w} inputs but receives {width}"
        ))),
        _ => Ok(()),
    }
}

fn build_dense(
    spec: &LayerSpec,
    width: usize,
    name: &str,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<DenseLayer> {
    match *spec {
        LayerSpec::Linear {
            in_dim,
            out,
            activation,
            batch_norm,
        } => {
            check_in(in_dim, width, name)?;
            DenseLayer::new(store, rng, name, DenseKind::Linear, width, out, activation, batch_norm)
        }
        LayerSpec::Gcn {
            in_dim,
            out,
            activation,
            batch_norm,
        } => {
            check_in(in_dim, width, name)?;
            DenseLayer::new(
                store,
                rng,
                name,
                DenseKind::GraphConv,
                width,
                out,
                activation,
                batch_norm,
            )
        }
        LayerSpec::Ddgm { .. } => Err(Error::Config(format!(
            "`{name}`: a dDGM cannot be nested inside a feature map"
        ))),
    }
}

impl Network {
    pub fn build(
        spec: &NetworkSpec,
        in_features: usize,
        num_classes: usize,
        defaults: &DgmDefaults,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut blocks = Vec::with_capacity(spec.layers.len());
        let mut width = in_features;
        let mut latent_width: Option<usize> = None;
        for (index, layer) in spec.layers.iter().enumerate() {
            let name = format!("layer{index}");
            match layer {
                LayerSpec::Ddgm {
                    f_theta,
                    use_input_graph,
                    k,
                    signature,
                    deterministic,
                } => {
                    let signature = match signature {
                        Some(text) => ManifoldSignature::parse(text, 4)
                            .map_err(|e| Error::Config(format!("`{name}` signature: {e}")))?,
                        None => defaults.signature.clone(),
                    };
                    if f_theta.is_empty() {
                        return Err(Error::Config(format!("`{name}` has an empty f_theta")));
                    }
                    let mut w = width + latent_width.unwrap_or(width);
                    let mut layers = Vec::with_capacity(f_theta.len());
                    for (li, l) in f_theta.iter().enumerate() {
                        let dense = build_dense(l, w, &format!("{name}.f{li}"), store, rng)?;
                        w = dense.out_dim;
                        layers.push(dense);
                    }
                    if w != signature.tangent_dim() {
                        return Err(Error::Config(format!(
                            "`{name}` f_theta emits {w} features but signature {signature} needs {}",
                            signature.tangent_dim()
                        )));
                    }
                    let cfg = DgmConfig {
                        k: k.unwrap_or(defaults.k),
                        signature,
                        use_input_graph: *use_input_graph,
                        deterministic: deterministic.unwrap_or(defaults.deterministic),
                        temperature_init: defaults.temperature_init,
                        workers: defaults.workers,
                    };
                    blocks.push(Block::Dgm(DgmLayer::new(cfg, layers, store, &name)?));
                    latent_width = Some(w);
                }
                dense => {
                    let layer = build_dense(dense, width, &name, store, rng)?;
                    width = layer.out_dim;
                    blocks.push(Block::Dense(layer));
                }
            }
        }
        if width != num_classes {
            return Err(Error::Config(format!(
                "network emits {width} outputs for {num_classes} classes"
            )));
        }
        Ok(Self {
            blocks,
            in_features,
            num_classes,
        })
    }

    pub fn dgm_layers(&self) -> impl Iterator<Item = &DgmLayer> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Dgm(d) => Some(d),
            Block::Dense(_) => None,
        })
    }

    pub fn dgm_count(&self) -> usize {
        self.dgm_layers().count()
    }

    /// Running statistics of every batch-norm layer in block order.
    pub fn batch_norm_states(&self) -> Vec<BatchNormState> {
        let mut out = Vec::new();
        for block in &self.blocks {
            let layers: Vec<&DenseLayer> = match block {
                Block::Dense(d) => vec![d],
                Block::Dgm(g) => g.f_theta.iter().collect(),
            };
            out.extend(layers.into_iter().filter_map(|l| l.batch_norm.as_ref().map(|b| b.state.clone())));
        }
        out
    }

    pub fn load_batch_norm_states(&mut self, states: &[BatchNormState]) -> Result<()> {
        let mut slots: Vec<&mut BatchNorm> = Vec::new();
        for block in &mut self.blocks {
            match block {
                Block::Dense(d) => slots.extend(d.batch_norm.as_mut()),
                Block::Dgm(g) => slots.extend(g.f_theta.iter_mut().filter_map(|l| l.batch_norm.as_mut())),
            }
        }
        if slots.len() != states.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} batch-norm states, model has {}",
                states.len(),
                slots.len()
            )));
        }
        for (slot, state) in slots.into_iter().zip(states) {
            if slot.state.running_mean.len() != state.running_mean.len()
                || slot.state.running_var.len() != state.running_var.len()
            {
                return Err(Error::Config("batch-norm state width mismatch".into()));
            }
            slot.state = state.clone();
        }
        Ok(())
    }

    /// Run the network on `features`. Each dDGM replaces the working edge
    /// set for all later graph layers; graph layers before the first dDGM
    /// use `input_edges`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &Tensor,
        input_edges: Option<&[(usize, usize)]>,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let n = features.rows();
        if features.cols() != self.in_features {
            return Err(Error::Dimension(format!(
                "network expects {} features, got {}",
                self.in_features,
                features.cols()
            )));
        }
        let train = matches!(mode, Mode::Train { .. });
        let mut working: Option<Propagation> = match input_edges {
            Some(e) => Some(Propagation::gcn(n, e)?),
            None => None,
        };
        let mut x = tape.constant(features.clone())?;
        let mut latent: Option<Var> = None;
        let mut graphs = Vec::new();
        for (index, block) in self.blocks.iter_mut().enumerate() {
            match block {
                Block::Dense(layer) => {
                    if layer.kind == DenseKind::GraphConv && working.is_none() {
                        return Err(Error::Config(format!(
                            "graph layer {index} has no input graph and no preceding dDGM"
                        )));
                    }
                    x = layer.forward(tape, store, x, working.as_ref(), train)?;
                }
                Block::Dgm(dgm) => {
                    if dgm.cfg.use_input_graph && working.is_none() {
                        return Err(Error::Config(format!(
                            "dDGM layer {index} uses the input graph but the dataset has none"
                        )));
                    }
                    let input = tape.concat_cols(x, latent.unwrap_or(x))?;
                    let noise = match mode {
                        Mode::Train { noise_seed } if !dgm.cfg.deterministic => {
                            Some(mix_seed(noise_seed, index as u64))
                        }
                        _ => None,
                    };
                    let graph_in = if dgm.cfg.use_input_graph {
                        working.as_ref()
                    } else {
                        None
                    };
                    let (xhat, graph) = dgm.forward(tape, store, input, graph_in, train, noise)?;
                    working = Some(Propagation::gcn(n, &graph.symmetric_edges)?);
                    latent = Some(xhat);
                    graphs.push(graph);
                }
            }
        }
        Ok(ForwardOutput { logits: x, graphs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn isolated_node_is_affine() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = DenseLayer::new(
            &mut store,
            &mut rng,
            "g",
            DenseKind::GraphConv,
            2,
            3,
            Activation::None,
            false,
        )
        .unwrap();
        store.value_mut(layer.bias()).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]).unwrap();
        let prop = Propagation::gcn(3, &[(0, 1), (1, 0)]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let out = layer.forward(&mut tape, &store, xv, Some(&prop), true).unwrap();
        let expect = x.matmul(store.value(layer.weight())).unwrap();
        for c in 0..3 {
            let want = expect.get(2, c) + store.value(layer.bias()).get(0, c);
            assert!((tape.value(out).get(2, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn presets_match_layer_counts() {
        assert_eq!(Preset::Mlp.layers(7, 1, 4).len(), 6);
        assert_eq!(Preset::GcnDdgm.layers(7, 1, 4).len(), 7);
        assert_eq!(Preset::GcnDdgmStarHetero.layers(5, 2, 8).len(), 5);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Linear {
                in_dim: Some(3),
                out: 2,
                activation: Activation::None,
                batch_norm: false,
            }],
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Network::build(&spec, 4, 2, &DgmDefaults::default(), &mut store, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn layer_spec_rejects_unknown_keys() {
        let ok: LayerSpec = serde_json::from_str(r#"{"type":"gcn","out":4,"activation":"elu"}"#).unwrap();
        assert_eq!(ok, LayerSpec::gcn(4, Activation::Elu, false));
        assert!(serde_json::from_str::<LayerSpec>(r#"{"type":"gcn","out":4,"activaton":"elu"}"#).is_err());
    }
}
