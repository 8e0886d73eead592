//! Tiled per-row top-k over an implicit pairwise score matrix.
//!
//! Entries `M_ij = F(x_i, x_j)` are evaluated tile by tile into a single
//! `tile_rows x tile_cols` buffer per worker; only the running top-k of each
//! row is kept. The Gumbel perturbation of entry `(i, j)` is a pure function
//! of `(seed, i, j)`, so the result does not depend on the tiling or on the
//! number of workers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::product::{ManifoldSignature, ProductPoints};

pub const DEFAULT_TILE: (usize, usize) = (256, 4096);

/// How a pair is scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreMode {
    /// Scaled product distance; smaller is better.
    Distance,
    /// `-T * d_ij`, plus Gumbel noise when a seed is given; larger is better.
    LogProb { temperature: f64, noise: Option<u64> },
}

impl ScoreMode {
    fn descending(&self) -> bool {
        matches!(self, ScoreMode::LogProb { .. })
    }
}

/// Implicit pairwise matrix between two embedded point sets.
pub struct LazyPairwise<'a> {
    left: &'a ProductPoints,
    right: &'a ProductPoints,
    sig: &'a ManifoldSignature,
    alphas: Vec<f64>,
    mode: ScoreMode,
    tile: (usize, usize),
    workers: usize,
}

/// Per-row selections, best first; ties broken by smaller column index.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub k: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl TopKResult {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row_indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_scores(&self, i: usize) -> &[f64] {
        &self.scores[i * self.k..(i + 1) * self.k]
    }

    /// Selected `(row, col)` pairs in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.rows())
            .flat_map(|i| self.row_indices(i).iter().map(move |&j| (i, j)))
            .collect()
    }
}

impl<'a> LazyPairwise<'a> {
    /// Pairwise matrix of a point set with itself.
    pub fn new(points: &'a ProductPoints, sig: &'a ManifoldSignature, mode: ScoreMode) -> Self {
        Self::cross(points, points, sig, mode)
    }

    pub fn cross(
        left: &'a ProductPoints,
        right: &'a ProductPoints,
        sig: &'a ManifoldSignature,
        mode: ScoreMode,
    ) -> Self {
        Self {
            left,
            right,
            sig,
            alphas: sig.alphas(),
            mode,
            tile: DEFAULT_TILE,
            workers: 1,
        }
    }

    pub fn with_tile(mut self, rows: usize, cols: usize) -> Self {
        self.tile = (rows.max(1), cols.max(1));
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn tile(&self) -> (usize, usize) {
        self.tile
    }

    /// Score of entry `(i, j)`.
    #[inline]
    pub fn score(&self, i: usize, j: usize) -> f64 {
        let d = self
            .sig
            .distance_embedded(self.left.row(i), self.right.row(j), Some(&self.alphas));
        match self.mode {
            ScoreMode::Distance => d,
            ScoreMode::LogProb { temperature, noise } => {
                let logp = -temperature * d;
                match noise {
                    Some(seed) => logp + gumbel(seed, i, j),
                    None => logp,
                }
            }
        }
    }

    fn check_width(&self) -> Result<()> {
        let w = self.sig.ambient_dim();
        if self.left.width() != w || self.right.width() != w {
            return Err(Error::Dimension(format!(
                "point width {} / {} does not match signature {} (ambient {w})",
                self.left.width(),
                self.right.width(),
                self.sig
            )));
        }
        Ok(())
    }

    /// Exact per-row top-k under the configured score.
    pub fn topk_reduce(&self, k: usize, exclude_self: bool) -> Result<TopKResult> {
        self.check_width()?;
        let n_rows = self.left.rows();
        let n_cols = self.right.rows();
        let candidates = if exclude_self {
            n_cols.saturating_sub(1)
        } else {
            n_cols
        };
        if k == 0 || k > candidates {
            return Err(Error::Value(format!(
                "k = {k} needs 1 <= k <= {candidates} for {n_cols} columns{}",
                if exclude_self { " with self-exclusion" } else { "" }
            )));
        }
        let mut indices = vec![0usize; n_rows * k];
        let mut scores = vec![0.0f64; n_rows * k];
        let (tr, tc) = self.tile;
        let n_tiles = n_rows.div_ceil(tr);
        let buf_len = tr.min(n_rows) * tc.min(n_cols);

        if self.workers <= 1 || n_tiles <= 1 {
            let mut buf = vec![0.0; buf_len];
            for t in 0..n_tiles {
                let r0 = t * tr;
                let r1 = (r0 + tr).min(n_rows);
                self.reduce_row_tile(
                    r0,
                    r1,
                    k,
                    exclude_self,
                    &mut buf,
                    &mut indices[r0 * k..r1 * k],
                    &mut scores[r0 * k..r1 * k],
                )?;
            }
        } else {
            let next = AtomicUsize::new(0);
            let failure: Mutex<Option<Error>> = Mutex::new(None);
            let chunks: Vec<(usize, &mut [usize], &mut [f64])> = indices
                .chunks_mut(tr * k)
                .zip(scores.chunks_mut(tr * k))
                .enumerate()
                .map(|(t, (i, s))| (t, i, s))
                .collect();
            let slots: Vec<Mutex<Option<(&mut [usize], &mut [f64])>>> = chunks
                .into_iter()
                .map(|(_, i, s)| Mutex::new(Some((i, s))))
                .collect();
            std::thread::scope(|scope| {
                for _ in 0..self.workers.min(n_tiles) {
                    scope.spawn(|| {
                        let mut buf = vec![0.0; buf_len];
                        loop {
                            let t = next.fetch_add(1, Ordering::Relaxed);
                            if t >= n_tiles {
                                break;
                            }
                            let (idx, sc) = slots[t].lock().unwrap().take().unwrap();
                            let r0 = t * tr;
                            let r1 = (r0 + tr).min(n_rows);
                            if let Err(e) =
                                self.reduce_row_tile(r0, r1, k, exclude_self, &mut buf, idx, sc)
                            {
                                failure.lock().unwrap().get_or_insert(e);
                                break;
                            }
                        }
                    });
                }
            });
            if let Some(e) = failure.into_inner().unwrap() {
                return Err(e);
            }
        }
        Ok(TopKResult {
            k,
            indices,
            scores,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn reduce_row_tile(
        &self,
        r0: usize,
        r1: usize,
        k: usize,
        exclude_self: bool,
        buf: &mut [f64],
        out_idx: &mut [usize],
        out_score: &mut [f64],
    ) -> Result<()> {
        let n_cols = self.right.rows();
        let tc = self.tile.1;
        let desc = self.mode.descending();
        let mut fill = vec![0usize; r1 - r0];
        let mut c0 = 0;
        while c0 < n_cols {
            let c1 = (c0 + tc).min(n_cols);
            let w = c1 - c0;
            for i in r0..r1 {
                let row = &mut buf[(i - r0) * w..(i - r0 + 1) * w];
                for (j, slot) in (c0..c1).zip(row.iter_mut()) {
                    *slot = self.score(i, j);
                }
            }
            for i in r0..r1 {
                let local = i - r0;
                let row = &buf[local * w..(local + 1) * w];
                let idx = &mut out_idx[local * k..(local + 1) * k];
                let sc = &mut out_score[local * k..(local + 1) * k];
                let len = &mut fill[local];
                for (off, &s) in row.iter().enumerate() {
                    let j = c0 + off;
                    if exclude_self && j == i {
                        continue;
                    }
                    if !s.is_finite() {
                        return Err(Error::NonFinite(format!("pair score ({i}, {j})")));
                    }
                    insert_topk(idx, sc, len, k, j, s, desc);
                }
            }
            c0 = c1;
        }
        Ok(())
    }

    /// Recompute the scores of explicit pairs.
    pub fn gather_selected_scores(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        self.check_width()?;
        pairs
            .iter()
            .map(|&(i, j)| {
                if i >= self.left.rows() || j >= self.right.rows() {
                    return Err(Error::Index(format!(
                        "pair ({i}, {j}) out of range for {}x{} matrix",
                        self.left.rows(),
                        self.right.rows()
                    )));
                }
                Ok(self.score(i, j))
            })
            .collect()
    }
}

/// `a` ranks before `b`.
#[inline]
fn better(sa: f64, ia: usize, sb: f64, ib: usize, desc: bool) -> bool {
    if sa == sb {
        ia < ib
    } else if desc {
        sa > sb
    } else {
        sa < sb
    }
}

#[inline]
fn insert_topk(
    idx: &mut [usize],
    sc: &mut [f64],
    len: &mut usize,
    k: usize,
    j: usize,
    s: f64,
    desc: bool,
) {
    if *len == k {
        if !better(s, j, sc[k - 1], idx[k - 1], desc) {
            return;
        }
    } else {
        *len += 1;
    }
    let mut pos = *len - 1;
    while pos > 0 && better(s, j, sc[pos - 1], idx[pos - 1], desc) {
        sc[pos] = sc[pos - 1];
        idx[pos] = idx[pos - 1];
        pos -= 1;
    }
    sc[pos] = s;
    idx[pos] = j;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a parent seed and a label.
pub fn mix_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Uniform variate in the open interval (0, 1) keyed by `(seed, i, j)`.
#[inline]
pub fn counter_uniform(seed: u64, i: usize, j: usize) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ i as u64) ^ j as u64);
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard Gumbel variate `-ln(-ln u)` keyed by `(seed, i, j)`.
#[inline]
pub fn gumbel(seed: u64, i: usize, j: usize) -> f64 {
    -(-counter_uniform(seed, i, j).ln()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn nearest_on_a_line() {
        let sig = ManifoldSignature::parse("E1", 1).unwrap();
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let pts = sig.embed(&x).unwrap();
        let lp = LazyPairwise::new(&pts, &sig, ScoreMode::Distance);
        let top = lp.topk_reduce(1, true).unwrap();
        assert_eq!(top.indices, vec![1, 0, 1]);
    }

    #[test]
    fn ties_break_towards_smaller_index() {
        let sig = ManifoldSignature::parse("E1", 1).unwrap();
        let x = Tensor::from_rows(&[vec![0.0], vec![-1.0], vec![1.0]]).unwrap();
        let pts = sig.embed(&x).unwrap();
        let top = LazyPairwise::new(&pts, &sig, ScoreMode::Distance)
            .topk_reduce(1, true)
            .unwrap();
        assert_eq!(top.row_indices(0), &[1]);
    }

    #[test]
    fn k_bounds_are_enforced() {
        let sig = ManifoldSignature::parse("E1", 1).unwrap();
        let pts = sig.embed(&Tensor::zeros(3, 1)).unwrap();
        let lp = LazyPairwise::new(&pts, &sig, ScoreMode::Distance);
        assert!(lp.topk_reduce(3, true).is_err());
        assert!(lp.topk_reduce(0, false).is_err());
        assert!(lp.topk_reduce(3, false).is_ok());
    }

    #[test]
    fn gather_matches_and_checks_range() {
        let sig = ManifoldSignature::parse("E2", 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 0.0]]).unwrap();
        let pts = sig.embed(&x).unwrap();
        let mode = ScoreMode::LogProb {
            temperature: 2.0,
            noise: Some(9),
        };
        let lp = LazyPairwise::new(&pts, &sig, mode);
        let top = lp.topk_reduce(2, true).unwrap();
        assert_eq!(lp.gather_selected_scores(&top.pairs()).unwrap(), top.scores);
        assert!(lp.gather_selected_scores(&[]).unwrap().is_empty());
        assert!(matches!(
            lp.gather_selected_scores(&[(0, 3)]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn uniform_stays_open() {
        for j in 0..1000 {
            let u = counter_uniform(42, 7, j);
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
