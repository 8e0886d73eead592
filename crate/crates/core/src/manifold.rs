//! Constant-curvature model spaces with canonical curvature.
//!
//! Points on the hyperboloid (`K = -1`) and hypersphere (`K = +1`) live in an
//! ambient space one dimension larger than the tangent space. Euclidean
//! features are lifted to the tangent space at the north pole
//! `o = (1, 0, ..., 0)` by prepending a zero, so the exponential map only
//! needs the Euclidean feature itself.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tangent vectors shorter than this map exactly to the origin.
pub const SMALL_NORM: f64 = 1e-12;

/// Clip margin applied inside arccosh / arccos.
pub const CLIP_MARGIN: f64 = 1e-12;

/// Tolerance for points on the manifold.
pub const CONSTRAINT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSpaceKind {
    Euclidean,
    Hyperboloid,
    Hypersphere,
}

impl ModelSpaceKind {
    pub fn letter(self) -> char {
        match self {
            ModelSpaceKind::Euclidean => 'E',
            ModelSpaceKind::Hyperboloid => 'H',
            ModelSpaceKind::Hypersphere => 'S',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'E' => Some(ModelSpaceKind::Euclidean),
            'H' => Some(ModelSpaceKind::Hyperboloid),
            'S' => Some(ModelSpaceKind::Hypersphere),
            _ => None,
        }
    }

    pub fn curvature(self) -> f64 {
        match self {
            ModelSpaceKind::Euclidean => 0.0,
            ModelSpaceKind::Hyperboloid => -1.0,
            ModelSpaceKind::Hypersphere => 1.0,
        }
    }
}

/// How the arccosh / arccos arguments are kept inside their domains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clipping {
    Margin(f64),
    /// Raw closed forms; arguments just outside the domain produce NaN.
    Disabled,
}

impl Default for Clipping {
    fn default() -> Self {
        Clipping::Margin(CLIP_MARGIN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpace {
    pub kind: ModelSpaceKind,
    pub dim: usize,
}

impl fmt::Display for ModelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.letter(), self.dim)
    }
}

impl ModelSpace {
    pub fn new(kind: ModelSpaceKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Value("model space dimension must be positive".into()));
        }
        Ok(Self { kind, dim })
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::new(ModelSpaceKind::Euclidean, dim).expect("positive dim")
    }

    pub fn hyperboloid(dim: usize) -> Self {
        Self::new(ModelSpaceKind::Hyperboloid, dim).expect("positive dim")
    }

    pub fn hypersphere(dim: usize) -> Self {
        Self::new(ModelSpaceKind::Hypersphere, dim).expect("positive dim")
    }

    pub fn ambient_dim(&self) -> usize {
        match self.kind {
            ModelSpaceKind::Euclidean => self.dim,
            _ => self.dim + 1,
        }
    }

    pub fn origin(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.ambient_dim()];
        if self.kind != ModelSpaceKind::Euclidean {
            o[0] = 1.0;
        }
        o
    }

    /// Signed distance of `x` from the manifold constraint
    /// (`<x,x>_L + 1` or `<x,x>_2 - 1`; zero for Euclidean).
    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        match self.kind {
            ModelSpaceKind::Euclidean => 0.0,
            ModelSpaceKind::Hyperboloid => lorentz_raw(x, x) + 1.0,
            ModelSpaceKind::Hypersphere => dot(x, x) - 1.0,
        }
    }

    /// Exponential map at the origin of a `dim`-long tangent vector.
    pub fn exp_map_origin(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::Dimension(format!(
                "tangent vector of length {} for {self}",
                v.len()
            )));
        }
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::Value(format!("non-finite tangent coordinate {bad}")));
        }
        let mut out = vec![0.0; self.ambient_dim()];
        self.exp_map_into(v, &mut out);
        Ok(out)
    }

    /// Unchecked exponential map writing into `out` (length `ambient_dim`).
    pub fn exp_map_into(&self, v: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelSpaceKind::Euclidean => out.copy_from_slice(v),
            ModelSpaceKind::Hyperboloid | ModelSpaceKind::Hypersphere => {
                let r = dot(v, v).sqrt();
                if r < SMALL_NORM {
                    out.fill(0.0);
                    out[0] = 1.0;
                    return;
                }
                let (head, factor) = if self.kind == ModelSpaceKind::Hyperboloid {
                    (r.cosh(), r.sinh() / r)
                } else {
                    (r.cos(), r.sin() / r)
                };
                out[0] = head;
                for (o, &x) in out[1..].iter_mut().zip(v) {
                    *o = factor * x;
                }
            }
        }
    }

    /// Vector-Jacobian product of [`exp_map_into`](Self::exp_map_into):
    /// given `g = dL/d exp(v)`, accumulate `dL/dv` into `out`.
    pub fn exp_map_vjp(&self, v: &[f64], g: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelSpaceKind::Euclidean => {
                for (o, &x) in out.iter_mut().zip(g) {
                    *o += x;
                }
            }
            ModelSpaceKind::Hyperboloid | ModelSpaceKind::Hypersphere => {
                let hyper = self.kind == ModelSpaceKind::Hyperboloid;
                let r2 = dot(v, v);
                let r = r2.sqrt();
                let g0 = g[0];
                let rest = &g[1..];
                if r < SMALL_NORM {
                    // the forward pass returns the constant origin here
                    return;
                }
                // factor f(r) = sinh(r)/r or sin(r)/r and f'(r)/r
                let (factor, dfactor_over_r, head_coeff) = if hyper {
                    let f = r.sinh() / r;
                    let d = if r < 1e-3 {
                        1.0 / 3.0 + r2 / 30.0
                    } else {
                        (r * r.cosh() - r.sinh()) / (r2 * r)
                    };
                    (f, d, f)
                } else {
                    let f = r.sin() / r;
                    let d = if r < 1e-3 {
                        -1.0 / 3.0 + r2 / 30.0
                    } else {
                        (r * r.cos() - r.sin()) / (r2 * r)
                    };
                    (f, d, -f)
                };
                let vg = dot(v, rest);
                for ((o, &x), &gr) in out.iter_mut().zip(v).zip(rest) {
                    *o += g0 * head_coeff * x + factor * gr + dfactor_over_r * vg * x;
                }
            }
        }
    }

    /// Geodesic distance between two ambient points, validating that both
    /// satisfy the manifold constraint within [`CONSTRAINT_TOL`].
    pub fn geodesic_distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.geodesic_distance_with(x, y, Clipping::default())
    }

    pub fn geodesic_distance_with(&self, x: &[f64], y: &[f64], clip: Clipping) -> Result<f64> {
        let n = self.ambient_dim();
        if x.len() != n || y.len() != n {
            return Err(Error::Dimension(format!(
                "points of length {} and {} for {self} (ambient {n})",
                x.len(),
                y.len()
            )));
        }
        for p in [x, y] {
            let res = self.constraint_residual(p);
            if !(res.abs() <= CONSTRAINT_TOL) {
                return Err(Error::Geometry(format!(
                    "point violates the {self} constraint by {res:e}"
                )));
            }
        }
        Ok(self.distance_with(x, y, clip))
    }

    /// Unchecked distance with the default clipping.
    #[inline]
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        self.distance_with(x, y, Clipping::default())
    }

    #[inline]
    pub fn distance_with(&self, x: &[f64], y: &[f64], clip: Clipping) -> f64 {
        match self.kind {
            ModelSpaceKind::Euclidean => {
                let mut s = 0.0;
                for (a, b) in x.iter().zip(y) {
                    let d = a - b;
                    s += d * d;
                }
                s.sqrt()
            }
            ModelSpaceKind::Hyperboloid => {
                let u = -lorentz_raw(x, y);
                match clip {
                    Clipping::Margin(m) => u.max(1.0 + m).acosh(),
                    Clipping::Disabled => u.acosh(),
                }
            }
            ModelSpaceKind::Hypersphere => {
                let c = dot(x, y);
                match clip {
                    Clipping::Margin(m) => c.clamp(-1.0 + m, 1.0 - m).acos(),
                    Clipping::Disabled => c.acos(),
                }
            }
        }
    }

    /// Distance and its gradients with respect to both ambient points.
    /// Gradients vanish where the clamp is active and at zero Euclidean
    /// distance.
    pub fn distance_grad(&self, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) -> f64 {
        gx.fill(0.0);
        gy.fill(0.0);
        match self.kind {
            ModelSpaceKind::Euclidean => {
                let d = self.distance(x, y);
                if d > 0.0 {
                    for i in 0..x.len() {
                        let g = (x[i] - y[i]) / d;
                        gx[i] = g;
                        gy[i] = -g;
                    }
                }
                d
            }
            ModelSpaceKind::Hyperboloid => {
                let u = -lorentz_raw(x, y);
                let lo = 1.0 + CLIP_MARGIN;
                if u <= lo {
                    return lo.acosh();
                }
                let dd_du = 1.0 / (u * u - 1.0).sqrt();
                gx[0] = dd_du * y[0];
                gy[0] = dd_du * x[0];
                for i in 1..x.len() {
                    gx[i] = -dd_du * y[i];
                    gy[i] = -dd_du * x[i];
                }
                u.acosh()
            }
            ModelSpaceKind::Hypersphere => {
                let c = dot(x, y);
                let (lo, hi) = (-1.0 + CLIP_MARGIN, 1.0 - CLIP_MARGIN);
                if c >= hi || c <= lo {
                    return c.clamp(lo, hi).acos();
                }
                let dd_dc = -1.0 / (1.0 - c * c).sqrt();
                for i in 0..x.len() {
                    gx[i] = dd_dc * y[i];
                    gy[i] = dd_dc * x[i];
                }
                c.acos()
            }
        }
    }
}

/// Lorentz inner product `-x1 y1 + sum_{j>=2} xj yj`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!(
            "Lorentz inner product of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(lorentz_raw(x, y))
}

#[inline]
fn lorentz_raw(x: &[f64], y: &[f64]) -> f64 {
    let mut s = -x[0] * y[0];
    for (a, b) in x[1..].iter().zip(&y[1..]) {
        s += a * b;
    }
    s
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorentz_examples() {
        assert_eq!(lorentz_inner(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(lorentz_inner(&[2.0, 1.0], &[3.0, 2.0]).unwrap(), -4.0);
        assert!(lorentz_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn exp_map_examples() {
        let h = ModelSpace::hyperboloid(2);
        assert_eq!(h.exp_map_origin(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        let p = h.exp_map_origin(&[1.0, 0.0]).unwrap();
        assert!((p[0] - 1.543_080_634_815_243_7).abs() < 1e-12);
        assert!((p[1] - 1.175_201_193_643_801_4).abs() < 1e-12);
        assert_eq!(p[2], 0.0);

        let s = ModelSpace::hypersphere(2);
        let q = s.exp_map_origin(&[std::f64::consts::PI, 0.0]).unwrap();
        assert!((q[0] + 1.0).abs() < 1e-12 && q[1].abs() < 1e-12 && q[2] == 0.0);

        let e = ModelSpace::euclidean(2);
        assert_eq!(e.exp_map_origin(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(h.exp_map_origin(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn distance_examples() {
        let h = ModelSpace::hyperboloid(3);
        let o = h.origin();
        assert!(h.geodesic_distance(&o, &o).unwrap() <= 1.5e-6);
        for r in [0.1, 1.0, 5.0] {
            let x = h.exp_map_origin(&[r, 0.0, 0.0]).unwrap();
            assert!((h.geodesic_distance(&o, &x).unwrap() - r).abs() < 1e-7);
        }
        let s = ModelSpace::hypersphere(2);
        let d = s
            .geodesic_distance(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0])
            .unwrap();
        assert!((d - std::f64::consts::PI).abs() < 1.5e-6);
    }

    #[test]
    fn off_manifold_point_is_geometry_error() {
        let h = ModelSpace::hyperboloid(1);
        assert!(matches!(
            h.geodesic_distance(&[1.0, 0.0], &[2.0, 0.0]),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn clipping_keeps_out_of_domain_arguments_finite() {
        let h = ModelSpace::hyperboloid(1);
        // -<x,x>_L = 1 - 1e-9
        let x = [(1.0f64 - 1e-9).sqrt(), 0.0];
        assert!(h.distance(&x, &x).is_finite());
        assert!(h.distance_with(&x, &x, Clipping::Disabled).is_nan());

        let s = ModelSpace::hypersphere(1);
        let y = [(1.0f64 + 1e-9).sqrt(), 0.0];
        assert!(s.distance(&y, &y).is_finite());
        assert!(s.distance_with(&y, &y, Clipping::Disabled).is_nan());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(ModelSpace::new(ModelSpaceKind::Hyperboloid, 0).is_err());
    }
}
