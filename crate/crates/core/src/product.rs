//! Product manifolds of model spaces.
//!
//! A feature row of width `sum(d_c)` is split in signature order, each block
//! is mapped by its component's exponential map, and distances aggregate by
//! root-sum-of-squares. The scaled metric multiplies each component distance
//! by `alpha_c = sigmoid(alpha_raw_c)`, which plays the role of a learnable
//! curvature while the components keep canonical curvature.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::manifold::{ModelSpace, ModelSpaceKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSignature {
    components: Vec<ModelSpace>,
    /// Unconstrained scaling parameters, one per component.
    pub alpha_raw: Vec<f64>,
}

impl ManifoldSignature {
    pub fn new(components: Vec<ModelSpace>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Parse("signature has no components".into()));
        }
        let n = components.len();
        Ok(Self {
            components,
            alpha_raw: vec![0.0; n],
        })
    }

    /// Parse `E4×H4×S4` (separators `×`, `x` or `*` optional) or the compact
    /// letter form `EHS`, using `default_dim` for components without digits.
    pub fn parse(text: &str, default_dim: usize) -> Result<Self> {
        let mut components = Vec::new();
        let mut chars = text.trim().chars().peekable();
        while let Some(c) = chars.next() {
            if matches!(c, '×' | 'x' | '*') && !components.is_empty() {
                continue;
            }
            let kind = ModelSpaceKind::from_letter(c).ok_or_else(|| {
                Error::Parse(format!("unknown model space `{c}` in signature `{text}`"))
            })?;
            let mut digits = String::new();
            while let Some(d) = chars.peek().filter(|d| d.is_ascii_digit()) {
                digits.push(*d);
                chars.next();
            }
            let dim = if digits.is_empty() {
                default_dim
            } else {
                digits
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad dimension `{digits}` in `{text}`")))?
            };
            if dim == 0 {
                return Err(Error::Parse(format!("zero dimension in signature `{text}`")));
            }
            components.push(ModelSpace { kind, dim });
        }
        Self::new(components)
    }

    pub fn components(&self) -> &[ModelSpace] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn tangent_dim(&self) -> usize {
        self.components.iter().map(|c| c.dim).sum()
    }

    pub fn ambient_dim(&self) -> usize {
        self.components.iter().map(ModelSpace::ambient_dim).sum()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.alpha_raw.iter().map(|&a| sigmoid(a)).collect()
    }

    /// `(tangent offset, ambient offset)` of each component.
    fn offsets(&self) -> impl Iterator<Item = (&ModelSpace, usize, usize)> {
        let mut t = 0;
        let mut a = 0;
        self.components.iter().map(move |c| {
            let out = (c, t, a);
            t += c.dim;
            a += c.ambient_dim();
            out
        })
    }

    /// Map one tangent feature row into `out` (length `ambient_dim`).
    pub fn embed_row(&self, features: &[f64], out: &mut [f64]) {
        for (c, t, a) in self.offsets() {
            c.exp_map_into(&features[t..t + c.dim], &mut out[a..a + c.ambient_dim()]);
        }
    }

    /// Embed every row of a feature matrix.
    pub fn embed(&self, features: &Tensor) -> Result<ProductPoints> {
        if features.cols() != self.tangent_dim() {
            return Err(Error::Dimension(format!(
                "feature width {} does not match tangent dimension {} of {self}",
                features.cols(),
                self.tangent_dim()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Value("non-finite features cannot be embedded".into()));
        }
        let width = self.ambient_dim();
        let mut data = vec![0.0; features.rows() * width];
        for r in 0..features.rows() {
            self.embed_row(features.row(r), &mut data[r * width..(r + 1) * width]);
        }
        Ok(ProductPoints {
            rows: features.rows(),
            width,
            data,
        })
    }

    /// Per-component geodesic distances between two embedded points.
    pub fn component_distances(&self, p: &[f64], q: &[f64], out: &mut [f64]) {
        for ((c, _, a), o) in self.offsets().zip(out.iter_mut()) {
            let n = c.ambient_dim();
            *o = c.distance(&p[a..a + n], &q[a..a + n]);
        }
    }

    /// Product distance between embedded points; `alphas` scales each
    /// component when present.
    #[inline]
    pub fn distance_embedded(&self, p: &[f64], q: &[f64], alphas: Option<&[f64]>) -> f64 {
        let mut s = 0.0;
        for (idx, (c, _, a)) in self.offsets().enumerate() {
            let n = c.ambient_dim();
            let mut d = c.distance(&p[a..a + n], &q[a..a + n]);
            if let Some(al) = alphas {
                d *= al[idx];
            }
            s += d * d;
        }
        s.sqrt()
    }

    /// Checked product distance between two embedded points.
    pub fn product_distance(&self, p: &[f64], q: &[f64], scaled: bool) -> Result<f64> {
        let n = self.ambient_dim();
        if p.len() != n || q.len() != n {
            return Err(Error::Dimension(format!(
                "points of width {} and {} for signature {self} (ambient {n})",
                p.len(),
                q.len()
            )));
        }
        for (c, _, a) in self.offsets() {
            let m = c.ambient_dim();
            c.geodesic_distance(&p[a..a + m], &q[a..a + m])?;
        }
        let alphas = scaled.then(|| self.alphas());
        Ok(self.distance_embedded(p, q, alphas.as_deref()))
    }

    /// Product distance between two *tangent* feature rows together with
    /// its gradient with respect to both rows and every `alpha_raw`.
    pub fn product_distance_grad(
        &self,
        p_features: &[f64],
        q_features: &[f64],
        scaled: bool,
    ) -> Result<DistanceGrad> {
        let t = self.tangent_dim();
        if p_features.len() != t || q_features.len() != t {
            return Err(Error::Dimension(format!(
                "feature rows of width {} and {} for tangent dimension {t}",
                p_features.len(),
                q_features.len()
            )));
        }
        let alphas = if scaled {
            self.alphas()
        } else {
            vec![1.0; self.len()]
        };
        let mut out = DistanceGrad {
            distance: 0.0,
            grad_p: vec![0.0; t],
            grad_q: vec![0.0; t],
            grad_alpha_raw: vec![0.0; self.len()],
        };
        let mut scratch = GradScratch::new(self);
        self.distance_grad_into(p_features, q_features, &alphas, scaled, &mut scratch, &mut out);
        Ok(out)
    }

    fn distance_grad_into(
        &self,
        p: &[f64],
        q: &[f64],
        alphas: &[f64],
        scaled: bool,
        s: &mut GradScratch,
        out: &mut DistanceGrad,
    ) {
        self.embed_row(p, &mut s.p_amb);
        self.embed_row(q, &mut s.q_amb);
        let mut total = 0.0;
        for (idx, (c, _, a)) in self.offsets().enumerate() {
            let n = c.ambient_dim();
            let d = c.distance_grad(
                &s.p_amb[a..a + n],
                &s.q_amb[a..a + n],
                &mut s.gp_amb[a..a + n],
                &mut s.gq_amb[a..a + n],
            );
            s.dists[idx] = d;
            total += (alphas[idx] * d).powi(2);
        }
        let dist = total.sqrt();
        out.distance = dist;
        out.grad_p.fill(0.0);
        out.grad_q.fill(0.0);
        out.grad_alpha_raw.fill(0.0);
        if dist == 0.0 {
            return;
        }
        for (idx, (c, t, a)) in self.offsets().enumerate() {
            let n = c.ambient_dim();
            let d = s.dists[idx];
            let al = alphas[idx];
            // dD/dd_c
            let w = al * al * d / dist;
            for g in &mut s.gp_amb[a..a + n] {
                *g *= w;
            }
            for g in &mut s.gq_amb[a..a + n] {
                *g *= w;
            }
            c.exp_map_vjp(&p[t..t + c.dim], &s.gp_amb[a..a + n], &mut out.grad_p[t..t + c.dim]);
            c.exp_map_vjp(&q[t..t + c.dim], &s.gq_amb[a..a + n], &mut out.grad_q[t..t + c.dim]);
            if scaled {
                out.grad_alpha_raw[idx] = al * d * d / dist * al * (1.0 - al);
            }
        }
    }
}

impl fmt::Display for ManifoldSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                f.write_str("×")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for ManifoldSignature {
    type Err = Error;

    /// Explicit form only; every component must carry its dimension.
    fn from_str(s: &str) -> Result<Self> {
        let sig = Self::parse(s, 0).map_err(|e| match e {
            Error::Parse(m) if m.starts_with("zero dimension") => {
                Error::Parse(format!("component without dimension in `{s}`"))
            }
            other => other,
        })?;
        Ok(sig)
    }
}

/// Embedded rows, concatenated per-component ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoints {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProductPoints {
    pub fn from_raw(rows: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * width {
            return Err(Error::Dimension(format!(
                "{} values for {rows} points of width {width}",
                data.len()
            )));
        }
        Ok(Self { rows, width, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGrad {
    pub distance: f64,
    pub grad_p: Vec<f64>,
    pub grad_q: Vec<f64>,
    pub grad_alpha_raw: Vec<f64>,
}

struct GradScratch {
    p_amb: Vec<f64>,
    q_amb: Vec<f64>,
    gp_amb: Vec<f64>,
    gq_amb: Vec<f64>,
    dists: Vec<f64>,
}

impl GradScratch {
    fn new(sig: &ManifoldSignature) -> Self {
        let n = sig.ambient_dim();
        Self {
            p_amb: vec![0.0; n],
            q_amb: vec![0.0; n],
            gp_amb: vec![0.0; n],
            gq_amb: vec![0.0; n],
            dists: vec![0.0; sig.len()],
        }
    }
}

/// Record scaled product distances for the requested row pairs of
/// `features` (tangent coordinates) on the tape, differentiable with respect
/// to the features and the `1 x C` tensor of raw scaling parameters.
pub fn edge_distances(
    tape: &mut Tape,
    sig: &ManifoldSignature,
    features: Var,
    alpha_raw: Var,
    pairs: Rc<[(usize, usize)]>,
) -> Result<Var> {
    let x = tape.value(features);
    let a = tape.value(alpha_raw);
    if x.cols() != sig.tangent_dim() {
        return Err(Error::Dimension(format!(
            "feature width {} does not match tangent dimension {} of {sig}",
            x.cols(),
            sig.tangent_dim()
        )));
    }
    if a.len() != sig.len() {
        return Err(Error::Dimension(format!(
            "{} scaling parameters for {} components",
            a.len(),
            sig.len()
        )));
    }
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= x.rows() || j >= x.rows()) {
        return Err(Error::Index(format!(
            "pair ({i}, {j}) out of range for {} rows",
            x.rows()
        )));
    }
    let alphas: Vec<f64> = a.data().iter().map(|&v| sigmoid(v)).collect();
    let e = pairs.len();
    let t = sig.tangent_dim();
    let mut values = Vec::with_capacity(e);
    let mut left = Tensor::zeros(e, t);
    let mut right = Tensor::zeros(e, t);
    let mut dparams = Tensor::zeros(e, sig.len());
    let mut scratch = GradScratch::new(sig);
    let mut g = DistanceGrad {
        distance: 0.0,
        grad_p: vec![0.0; t],
        grad_q: vec![0.0; t],
        grad_alpha_raw: vec![0.0; sig.len()],
    };
    for (k, &(i, j)) in pairs.iter().enumerate() {
        sig.distance_grad_into(x.row(i), x.row(j), &alphas, true, &mut scratch, &mut g);
        values.push(g.distance);
        left.row_mut(k).copy_from_slice(&g.grad_p);
        right.row_mut(k).copy_from_slice(&g.grad_q);
        dparams.row_mut(k).copy_from_slice(&g.grad_alpha_raw);
    }
    tape.pair_scalar(features, alpha_raw, pairs, values, left, right, dparams)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_explicit_signature() {
        let sig = ManifoldSignature::parse("E2×H2×S2", 4).unwrap();
        let dims: Vec<_> = sig.components().iter().map(|c| c.dim).collect();
        let amb: Vec<_> = sig.components().iter().map(|c| c.ambient_dim()).collect();
        assert_eq!(dims, vec![2, 2, 2]);
        assert_eq!(amb, vec![2, 3, 3]);
        assert_eq!(sig.to_string(), "E2×H2×S2");
        assert_eq!(sig.alpha_raw, vec![0.0; 3]);
    }

    #[test]
    fn parse_compact_signature() {
        let sig = ManifoldSignature::parse("EHS", 4).unwrap();
        assert_eq!(sig.to_string(), "E4×H4×S4");
        assert_eq!(sig.tangent_dim(), 12);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(ManifoldSignature::parse("X3", 4), Err(Error::Parse(_))));
        assert!(matches!(ManifoldSignature::parse("E0", 4), Err(Error::Parse(_))));
        assert!(matches!(ManifoldSignature::parse("", 4), Err(Error::Parse(_))));
        assert!("EH".parse::<ManifoldSignature>().is_err());
    }

    #[test]
    fn embed_examples() {
        let sig = ManifoldSignature::parse("E1×H1", 1).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 1.0]]).unwrap();
        let pts = sig.embed(&x).unwrap();
        assert_eq!(pts.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(pts.row(1)[0], 3.0);
        assert!((pts.row(1)[1] - 1f64.cosh()).abs() < 1e-15);
        assert!((pts.row(1)[2] - 1f64.sinh()).abs() < 1e-15);
        assert!(sig.embed(&Tensor::zeros(1, 3)).is_err());

        let e = ManifoldSignature::parse("E3", 1).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(e.embed(&y).unwrap().row(0), y.row(0));
    }

    #[test]
    fn euclidean_product_distance_example() {
        let sig = ManifoldSignature::parse("E2×E2", 2).unwrap();
        let p = [0.0, 0.0, 0.0, 0.0];
        let q = [1.0, 0.0, 0.0, 1.0];
        let d = sig.product_distance(&p, &q, false).unwrap();
        let single = ManifoldSignature::parse("E4", 4).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d, single.product_distance(&p, &q, false).unwrap());
        let scaled = sig.product_distance(&p, &q, true).unwrap();
        assert!((scaled - 0.5 * d).abs() < 1e-15);
    }

    #[test]
    fn self_distance_within_clamp_tolerance() {
        let sig = ManifoldSignature::parse("E2×H2×S2", 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4]]).unwrap();
        let pts = sig.embed(&x).unwrap();
        assert!(sig.product_distance(pts.row(0), pts.row(0), false).unwrap() < 1.5e-6 * 2.0);
    }

    #[test]
    fn euclidean_gradient_is_unit_direction() {
        let sig = ManifoldSignature::parse("E3", 3).unwrap();
        let p = [1.0, 2.0, -1.0];
        let q = [0.0, 0.0, 1.0];
        let g = sig.product_distance_grad(&p, &q, false).unwrap();
        let norm = 3.0;
        for i in 0..3 {
            assert!((g.grad_p[i] - (p[i] - q[i]) / norm).abs() < 1e-15);
            assert!((g.grad_q[i] + (p[i] - q[i]) / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_gradient_carries_sigmoid_factor() {
        // single component: D = alpha * d, dD/dalpha_raw = d * S'(0) = 0.25 d
        let sig = ManifoldSignature::parse("E2", 2).unwrap();
        let g = sig.product_distance_grad(&[3.0, 0.0], &[0.0, 4.0], true).unwrap();
        assert!((g.grad_alpha_raw[0] - 0.25 * 5.0).abs() < 1e-15);
    }

    #[test]
    fn zero_distance_has_zero_gradient() {
        let sig = ManifoldSignature::parse("E2", 2).unwrap();
        let g = sig.product_distance_grad(&[1.0, 1.0], &[1.0, 1.0], true).unwrap();
        assert_eq!(g.distance, 0.0);
        assert!(g.grad_p.iter().chain(&g.grad_alpha_raw).all(|&v| v == 0.0));
    }
}
