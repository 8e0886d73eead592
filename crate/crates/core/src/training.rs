//! Compound loss (task cross-entropy plus reward-weighted graph loss),
//! metrics and the training loop.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamStore, Tape, Tensor, Var};
use crate::data::{Dataset, Masks};
use crate::dgm::{edge_logp_loss_terms, GraphSnapshot, LatentGraph};
use crate::error::{Error, Result};
use crate::gnn::{BatchNormState, DgmDefaults, ForwardOutput, Mode, Network, NetworkSpec};
use crate::reduction::mix_seed;

/// Per-node exponential moving average of training accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTracker {
    pub expected: Vec<f64>,
    pub beta: f64,
}

impl RewardTracker {
    pub fn new(nodes: usize) -> Self {
        Self {
            expected: vec![0.5; nodes],
            beta: 0.9,
        }
    }

    /// `E(ac_i) - ac_i` with the pre-update expectation, then the EMA update.
    pub fn reward_delta(&mut self, node: usize, correct: bool) -> f64 {
        let ac = if correct { 1.0 } else { 0.0 };
        let e = &mut self.expected[node];
        let delta = *e - ac;
        *e = self.beta * *e + (1.0 - self.beta) * ac;
        delta
    }

    /// Rewards for the nodes in `mask`; zero elsewhere.
    pub fn deltas(&mut self, predictions: &[usize], labels: &[usize], mask: &[bool]) -> Vec<f64> {
        (0..labels.len())
            .map(|i| {
                if mask[i] {
                    self.reward_delta(i, predictions[i] == labels[i])
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// `sum_i delta_i sum_l sum_{j:(i,j) in E_l} log p_ij` with `delta` held constant.
pub fn graph_loss(tape: &mut Tape, deltas: &[f64], graphs: &[LatentGraph]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0))?;
    for g in graphs {
        if deltas.len() != g.nodes {
            return Err(Error::Dimension(format!(
                "{} rewards for a {}-node graph",
                deltas.len(),
                g.nodes
            )));
        }
        let terms = edge_logp_loss_terms(tape, g)?;
        let pairs: Rc<[(usize, usize)]> = (0..g.nodes).map(|i| (i, 0)).collect();
        let weights: Rc<[f64]> = deltas.into();
        let weighted = tape.gather_sum(terms, pairs, weights, 1)?;
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// Fraction of undirected edges joining nodes with the same label.
pub fn edge_homophily(edges: &[(usize, usize)], labels: &[usize]) -> Result<f64> {
    let set: BTreeSet<(usize, usize)> = edges
        .iter()
        .filter(|(i, j)| i != j)
        .map(|&(i, j)| (i.min(j), i.max(j)))
        .collect();
    if set.is_empty() {
        return Err(Error::Value("homophily of an empty edge set".into()));
    }
    let mut same = 0usize;
    for &(i, j) in &set {
        let (a, b) = (labels.get(i), labels.get(j));
        match (a, b) {
            (Some(a), Some(b)) => same += (a == b) as usize,
            _ => {
                return Err(Error::Index(format!(
                    "edge ({i}, {j}) out of range for {} labels",
                    labels.len()
                )))
            }
        }
    }
    Ok(same as f64 / set.len() as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize], mask: &[bool]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..labels.len() {
        if mask[i] {
            total += 1;
            hit += (predictions[i] == labels[i]) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub graph_loss_weight: f64,
    /// Snapshot the evaluation graphs at epoch 1, every `snapshot_every`
    /// epochs and at the last epoch; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-4,
            epochs: 1500,
            graph_loss_weight: 1.0,
            snapshot_every: 100,
        }
    }
}

/// Architecture plus shared dDGM settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSetup {
    pub spec: NetworkSpec,
    pub defaults: DgmDefaults,
}

impl ModelSetup {
    pub fn build(&self, dataset: &Dataset, seed: u64) -> Result<(Network, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1417));
        let net = Network::build(
            &self.spec,
            dataset.num_features(),
            dataset.num_classes,
            &self.defaults,
            &mut store,
            &mut rng,
        )?;
        Ok((net, store))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub graph_loss: f64,
    pub acc_train: f64,
    pub acc_val: f64,
    pub acc_test: f64,
    /// Latent-graph homophily per dDGM layer.
    pub homophily: Vec<f64>,
    /// Scaling coefficients per dDGM layer.
    pub alphas: Vec<Vec<f64>>,
    /// Temperature per dDGM layer.
    pub temperature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub selected_epoch: usize,
    pub selected: EpochRecord,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc_test: MeanStd,
    pub acc_val: MeanStd,
    pub homophily: Vec<MeanStd>,
    pub input_homophily: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dataset: String,
    pub seeds: Vec<SeedReport>,
    pub summary: Summary,
}

impl TrainReport {
    pub fn new(dataset: &Dataset, seeds: Vec<SeedReport>) -> Self {
        let pick = |f: fn(&EpochRecord) -> f64| seeds.iter().map(|s| f(&s.selected)).collect::<Vec<_>>();
        let layers = seeds.first().map_or(0, |s| s.selected.homophily.len());
        let homophily = (0..layers)
            .map(|l| MeanStd::of(&seeds.iter().map(|s| s.selected.homophily[l]).collect::<Vec<_>>()))
            .collect();
        let input_homophily = dataset
            .edges
            .as_deref()
            .and_then(|e| edge_homophily(e, &dataset.labels).ok());
        let summary = Summary {
            acc_test: MeanStd::of(&pick(|r| r.acc_test)),
            acc_val: MeanStd::of(&pick(|r| r.acc_val)),
            homophily,
            input_homophily,
        };
        Self {
            dataset: dataset.name.clone(),
            seeds,
            summary,
        }
    }
}

/// Parameter values and batch-norm statistics of a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: usize,
    pub params: ParamStore,
    pub batch_norm: Vec<BatchNormState>,
}

impl Checkpoint {
    pub fn capture(seed: u64, epoch: usize, net: &Network, store: &ParamStore) -> Self {
        Self {
            seed,
            epoch,
            params: store.clone(),
            batch_norm: net.batch_norm_states(),
        }
    }

    pub fn restore(&self, net: &mut Network, store: &mut ParamStore) -> Result<()> {
        store.load_values(&self.params)?;
        net.load_batch_norm_states(&self.batch_norm)
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub report: SeedReport,
    pub checkpoint: Checkpoint,
    /// `(dDGM index, snapshot)` pairs in epoch order.
    pub snapshots: Vec<(usize, GraphSnapshot)>,
}

/// Inference pass with running statistics and noise-free edge selection.
pub struct Evaluation {
    pub logits: Tensor,
    pub predictions: Vec<usize>,
    pub graphs: Vec<LatentGraph>,
}

pub fn evaluate(net: &mut Network, store: &ParamStore, dataset: &Dataset) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let ForwardOutput { logits, graphs } =
        net.forward(&mut tape, store, &dataset.features, dataset.edges.as_deref(), Mode::Eval)?;
    let logits = tape.value(logits).clone();
    Ok(Evaluation {
        predictions: logits.argmax_rows(),
        logits,
        graphs,
    })
}

fn diverged(seed: u64, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Divergence { seed, epoch, detail },
        other => other,
    }
}

fn record(
    epoch: usize,
    task_loss: f64,
    graph_loss: f64,
    eval: &Evaluation,
    net: &Network,
    store: &ParamStore,
    dataset: &Dataset,
    masks: &Masks,
) -> Result<EpochRecord> {
    let y = &dataset.labels;
    let homophily = eval
        .graphs
        .iter()
        .map(|g| edge_homophily(&g.symmetric_edges, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpochRecord {
        epoch,
        task_loss,
        graph_loss,
        acc_train: accuracy(&eval.predictions, y, &masks.train),
        acc_val: accuracy(&eval.predictions, y, &masks.val),
        acc_test: accuracy(&eval.predictions, y, &masks.test),
        homophily,
        alphas: net.dgm_layers().map(|d| d.signature(store).alphas()).collect(),
        temperature: net.dgm_layers().map(|d| d.temperature(store)).collect(),
    })
}

/// Train one seed. Epoch 0 records the initial model; the selected epoch is
/// the earliest with the best validation accuracy, falling back to the last
/// epoch when no training epoch ran.
pub fn train_seed(
    setup: &ModelSetup,
    dataset: &Dataset,
    masks: &Masks,
    opts: &TrainOptions,
    seed: u64,
) -> Result<SeedOutcome> {
    masks.validate(dataset.num_nodes())?;
    let (mut net, mut store) = setup.build(dataset, seed)?;
    let mut adam = AdamState::new(opts.lr, opts.weight_decay);
    let mut tracker = RewardTracker::new(dataset.num_nodes());
    let labels = &dataset.labels;
    let edges = dataset.edges.as_deref();
    let every = opts.snapshot_every;
    let mut snapshots = Vec::new();

    let eval = evaluate(&mut net, &store, dataset).map_err(diverged(seed, 0))?;
    let init_loss = {
        let mut tape = Tape::new();
        let z = tape.constant(eval.logits.clone())?;
        let ce = tape.softmax_cross_entropy(z, labels, &masks.train)?;
        tape.value(ce).item()
    };
    let first = record(0, init_loss, 0.0, &eval, &net, &store, dataset, masks)?;
    let mut best = (first.acc_val, 0usize);
    let mut checkpoint = Checkpoint::capture(seed, 0, &net, &store);
    let mut history = vec![first];

    for epoch in 1..=opts.epochs {
        let fail = diverged(seed, epoch);
        let mut tape = Tape::new();
        let noise_seed = mix_seed(mix_seed(seed, 0x6e6f_6973), epoch as u64);
        let out = net
            .forward(&mut tape, &store, &dataset.features, edges, Mode::Train { noise_seed })
            .map_err(&fail)?;
        let ce = tape.softmax_cross_entropy(out.logits, labels, &masks.train).map_err(&fail)?;
        let task_loss = tape.value(ce).item();
        let (total, gl_value) = if out.graphs.is_empty() {
            (ce, 0.0)
        } else {
            let predictions = tape.value(out.logits).argmax_rows();
            let deltas = tracker.deltas(&predictions, labels, &masks.train);
            let gl = graph_loss(&mut tape, &deltas, &out.graphs).map_err(&fail)?;
            let value = tape.value(gl).item();
            let weighted = tape.scale(gl, opts.graph_loss_weight).map_err(&fail)?;
            (tape.add(ce, weighted).map_err(&fail)?, value)
        };
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::Divergence {
                seed,
                epoch,
                detail: format!("loss is {total_value}"),
            });
        }
        let grads = tape.backward(total).map_err(&fail)?;
        grads.write_params(&mut store);
        adam.step(&mut store)?;
        if let Some(p) = store.iter().find(|p| !p.value.is_finite()) {
            return Err(Error::Divergence {
                seed,
                epoch,
                detail: format!("parameter `{}` became non-finite", p.name),
            });
        }

        let eval = evaluate(&mut net, &store, dataset).map_err(&fail)?;
        let rec = record(epoch, task_loss, gl_value, &eval, &net, &store, dataset, masks)?;
        if epoch == 1 || rec.acc_val > best.0 {
            best = (rec.acc_val, epoch);
            checkpoint = Checkpoint::capture(seed, epoch, &net, &store);
        }
        if every > 0 && (epoch == 1 || epoch % every == 0 || epoch == opts.epochs) {
            for (l, g) in eval.graphs.iter().enumerate() {
                snapshots.push((l, g.snapshot(epoch, labels)?));
            }
        }
        history.push(rec);
    }
    let selected_epoch = best.1;
    Ok(SeedOutcome {
        report: SeedReport {
            seed,
            selected_epoch,
            selected: history[selected_epoch].clone(),
            history,
        },
        checkpoint,
        snapshots,
    })
}

/// Train every seed, using up to `jobs` threads; results keep seed order.
pub fn train_seeds(
    setup: &ModelSetup,
    dataset: &Dataset,
    masks_for: &(dyn Fn(u64) -> Result<Masks> + Sync),
    opts: &TrainOptions,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SeedOutcome>> {
    let run = |seed: u64| -> Result<SeedOutcome> {
        let masks = masks_for(seed)?;
        train_seed(setup, dataset, &masks, opts, seed)
    };
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| run(s)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<SeedOutcome>>>> =
        seeds.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(run(seeds[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every seed ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let mut t = RewardTracker::new(2);
        assert_eq!(t.reward_delta(0, true), -0.5);
        assert!((t.expected[0] - 0.55).abs() < 1e-15);
        assert_eq!(t.reward_delta(1, false), 0.5);
        assert!((t.expected[1] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn homophily_examples() {
        assert_eq!(edge_homophily(&[(0, 1), (1, 0)], &[2, 2]).unwrap(), 1.0);
        assert_eq!(edge_homophily(&[(0, 1), (2, 3)], &[0, 1, 1, 0]).unwrap(), 0.0);
        assert!(edge_homophily(&[], &[0]).is_err());
    }

    #[test]
    fn population_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
