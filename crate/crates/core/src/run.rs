//! Command implementations behind the `mdgm` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{DatasetConfig, RunConfig};
use crate::data::{self, Dataset, Masks};
use crate::dgm::GraphSnapshot;
use crate::error::{Error, Result};
use crate::training::{evaluate, train_seeds, Checkpoint, SeedReport, TrainReport};

pub const OUT_DIR_ENV: &str = "MDGM_OUT_DIR";

/// Process exit code for an error: 1 configuration, 2 dataset or
/// checkpoint input, 3 divergence, 4 anything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Dataset(_) | Error::Parse(_) | Error::Io { .. } => 2,
        Error::Divergence { .. } => 3,
        _ => 4,
    }
}

fn dataset_error(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Dataset(m),
        other => other,
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        DatasetConfig::Manifest { path } => data::load_manifest(&cfg.resolve(path))?,
        DatasetConfig::Tsv {
            nodes_file,
            edges_file,
            masks_file,
            name,
        } => {
            let mut ds = data::load_citation_tsv(&cfg.resolve(nodes_file), &cfg.resolve(edges_file))?;
            if let Some(m) = masks_file {
                ds.masks = Some(data::load_masks(&cfg.resolve(m), &ds.ids)?);
            }
            if let Some(n) = name {
                ds.name = n.clone();
            }
            ds
        }
        DatasetConfig::Pointcloud { file, label_column } => {
            data::load_pointcloud_csv(&cfg.resolve(file), label_column)?
        }
        DatasetConfig::Sbm { params, seed } => data::generate_sbm(params, *seed).map_err(dataset_error)?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Dataset masks when present, otherwise a seeded split.
pub fn masks_for(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<Masks> {
    match &ds.masks {
        Some(m) => Ok(m.clone()),
        None => data::make_splits(&ds.labels, ds.num_classes, &cfg.split, seed).map_err(dataset_error),
    }
}

pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.outputs.dir.clone(),
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Column names of `curves.csv` for a model with the given per-layer
/// component counts.
pub fn curves_header(components: &[usize]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "seed", "epoch", "task_loss", "graph_loss", "acc_train", "acc_val", "acc_test",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for (l, &c) in components.iter().enumerate() {
        cols.push(format!("homophily_{l}"));
        cols.extend((0..c).map(|i| format!("alpha_{l}_{i}")));
        cols.push(format!("temperature_{l}"));
    }
    cols
}

/// One row per training epoch and seed; the initial epoch 0 appears only
/// in `report.json`.
pub fn curves_csv(seeds: &[SeedReport]) -> String {
    let components: Vec<usize> = seeds
        .first()
        .and_then(|s| s.history.first())
        .map(|r| r.alphas.iter().map(Vec::len).collect())
        .unwrap_or_default();
    let mut out = curves_header(&components).join(",");
    out.push('\n');
    for s in seeds {
        for r in s.history.iter().filter(|r| r.epoch > 0) {
            let _ = write!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?}",
                s.seed, r.epoch, r.task_loss, r.graph_loss, r.acc_train, r.acc_val, r.acc_test
            );
            for l in 0..components.len() {
                let _ = write!(out, ",{:?}", r.homophily[l]);
                for a in &r.alphas[l] {
                    let _ = write!(out, ",{a:?}");
                }
                let _ = write!(out, ",{:?}", r.temperature[l]);
            }
            out.push('\n');
        }
    }
    out
}

fn write_snapshot(dir: &Path, stem: &str, snap: &GraphSnapshot, labels: &[usize]) -> Result<()> {
    write(&dir.join(format!("{stem}.json")), &serde_json::to_string(snap)?)?;
    write(&dir.join(format!("{stem}.dot")), &snap.to_dot(labels))
}

/// Train every configured seed and write `report.json`, `curves.csv`,
/// `snapshots/` and `checkpoints/` under `out`.
pub fn train(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<TrainReport> {
    let ds = load_dataset(cfg)?;
    let setup = cfg.model_setup(ds.num_classes)?;
    let masks = |seed: u64| masks_for(cfg, &ds, seed);
    let outcomes = train_seeds(&setup, &ds, &masks, &cfg.train_options(), &cfg.seed_list(), jobs)?;
    for o in &outcomes {
        let seed = o.report.seed;
        for (l, snap) in &o.snapshots {
            let stem = format!("seed{seed}_layer{l}_epoch{}", snap.epoch);
            write_snapshot(&out.join("snapshots"), &stem, snap, &ds.labels)?;
        }
        write(
            &out.join("checkpoints").join(format!("seed{seed}.json")),
            &serde_json::to_string(&o.checkpoint)?,
        )?;
    }
    let report = TrainReport::new(&ds, outcomes.into_iter().map(|o| o.report).collect());
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write(&out.join("curves.csv"), &curves_csv(&report.seeds))?;
    Ok(report)
}

/// Rebuild the model from `checkpoint`, sample its latent graphs noise-free
/// and write one JSON and DOT snapshot per dDGM layer. Returns the
/// snapshots with the paths written.
pub fn latent_graph(
    cfg: &RunConfig,
    checkpoint: &Path,
    epoch_tag: Option<&str>,
    out: &Path,
) -> Result<Vec<(PathBuf, GraphSnapshot)>> {
    let text = fs::read_to_string(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", checkpoint.display())))?;
    let ds = load_dataset(cfg)?;
    let setup = cfg.model_setup(ds.num_classes)?;
    let (mut net, mut store) = setup.build(&ds, ck.seed)?;
    if net.dgm_count() == 0 {
        return Err(Error::Config("model has no dDGM layer".into()));
    }
    ck.restore(&mut net, &mut store)?;
    let eval = evaluate(&mut net, &store, &ds)?;
    let tag = epoch_tag.map_or_else(|| ck.epoch.to_string(), str::to_string);
    let mut written = Vec::new();
    for (l, g) in eval.graphs.iter().enumerate() {
        let snap = g.snapshot(ck.epoch, &ds.labels)?;
        let stem = if eval.graphs.len() == 1 {
            format!("latent_graph_{tag}")
        } else {
            format!("latent_graph_{tag}_layer{l}")
        };
        write_snapshot(out, &stem, &snap, &ds.labels)?;
        written.push((out.join(format!("{stem}.json")), snap));
    }
    Ok(written)
}
