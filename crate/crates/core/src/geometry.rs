//! Axis-aligned regions, hard IoU, and the soft overlap kernel family.
//!
//! Overlap between regions is modelled as the normalized inner product
//! `rho(R, Q) = <R,Q> / (<R,R> + <Q,Q> - <R,Q>)` of their indicator
//! functions. With hard indicators this is plain IoU; replacing each
//! Heaviside step by a logistic sigmoid of steepness `alpha` gives the soft
//! IoU (SIoU), which stays positive for disjoint boxes. Both are positive
//! definite kernels, so Gram matrices built from either are PSD.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quadrature::{graded_integral, GaussLegendre};

/// An axis-aligned box `[x1, x2] x [y1, y2]` with strictly positive area.
///
/// Coordinates are continuous pixels with the origin at the top-left corner.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Region {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Region {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let bad = |reason| Error::InvalidRegion {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite coordinate"));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(bad("zero or negative area"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(
            cx - 0.5 * width,
            cy - 0.5 * height,
            cx + 0.5 * width,
            cy + 0.5 * height,
        )
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn max_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Area of the intersection, zero when interiors are disjoint.
    pub fn intersection_area(&self, other: &Region) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection as a region, or `None` when it has no area.
    pub fn intersection(&self, other: &Region) -> Option<Region> {
        Region::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
        .ok()
    }

    pub fn contains(&self, other: &Region) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Applies `p -> scale * p + (tx, ty)`.
    pub fn similarity(&self, scale: f64, tx: f64, ty: f64) -> Result<Region> {
        Region::new(
            scale * self.x1 + tx,
            scale * self.y1 + ty,
            scale * self.x2 + tx,
            scale * self.y2 + ty,
        )
    }
}

impl TryFrom<[f64; 4]> for Region {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Region::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Region> for [f64; 4] {
    fn from(r: Region) -> Self {
        r.to_array()
    }
}

impl fmt::Debug for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Region[{}, {}]x[{}, {}]",
            self.x1, self.x2, self.y1, self.y2
        )
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x1, self.y1, self.x2, self.y2
        )
    }
}

/// Hard intersection-over-union.
pub fn iou(r: &Region, q: &Region) -> f64 {
    let inter = r.intersection_area(q);
    inter / (r.area() + q.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    Hard,
    Soft,
}

/// How the sigmoid steepness `alpha` (1/pixel) is chosen for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Steepness {
    Fixed {
        alpha: f64,
    },
    /// `alpha = numerator / sqrt(max_side(r) * max_side(q))`, clamped.
    ScaleAdaptive {
        numerator: f64,
        min: f64,
        max: f64,
    },
}

impl Default for Steepness {
    fn default() -> Self {
        Steepness::ScaleAdaptive {
            numerator: 50.0,
            min: 0.01,
            max: 10.0,
        }
    }
}

/// Evaluation route for the 1-D factors of the soft inner product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftIntegral {
    #[default]
    ClosedForm,
    GaussLegendre,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlapConfig {
    pub mode: OverlapMode,
    pub steepness: Steepness,
    #[serde(default)]
    pub integral: SoftIntegral,
    /// Gauss–Legendre nodes per panel (quadrature route only).
    pub quadrature_nodes: usize,
    /// Integration window padding, in multiples of `1/alpha`.
    pub support_pad: f64,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self {
            mode: OverlapMode::Soft,
            steepness: Steepness::default(),
            integral: SoftIntegral::ClosedForm,
            quadrature_nodes: 64,
            support_pad: 36.0,
        }
    }
}

impl OverlapConfig {
    pub fn hard() -> Self {
        Self {
            mode: OverlapMode::Hard,
            ..Self::default()
        }
    }

    pub fn soft_fixed(alpha: f64) -> Self {
        Self {
            mode: OverlapMode::Soft,
            steepness: Steepness::Fixed { alpha },
            ..Self::default()
        }
    }

    pub fn with_integral(mut self, integral: SoftIntegral) -> Self {
        self.integral = integral;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.steepness {
            Steepness::Fixed { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::Config(format!("alpha must be > 0, got {alpha}")))
            }
            Steepness::ScaleAdaptive { numerator, min, max }
                if !(numerator > 0.0 && min > 0.0 && max >= min) =>
            {
                return Err(Error::Config(format!(
                    "adaptive steepness needs numerator > 0 and 0 < min <= max, got {numerator}, {min}, {max}"
                )))
            }
            _ => {}
        }
        if self.quadrature_nodes < 8 {
            return Err(Error::Config(format!(
                "quadrature_nodes must be >= 8, got {}",
                self.quadrature_nodes
            )));
        }
        if !(self.support_pad > 0.0) {
            return Err(Error::Config("support_pad must be positive".into()));
        }
        Ok(())
    }

    /// Steepness used for the pair `(r, q)`.
    pub fn alpha_for(&self, r: &Region, q: &Region) -> f64 {
        match self.steepness {
            Steepness::Fixed { alpha } => alpha,
            Steepness::ScaleAdaptive { numerator, min, max } => {
                (numerator / (r.max_side() * q.max_side()).sqrt()).clamp(min, max)
            }
        }
    }
}

/// Logistic step `H_alpha(z) = exp(alpha z) / (1 + exp(alpha z))`.
#[inline]
pub fn soft_step(alpha: f64, z: f64) -> f64 {
    let t = alpha * z;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `d / (e^d - 1)`, continuous at zero.
#[inline]
fn bernoulli_ratio(d: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else {
        d / d.exp_m1()
    }
}

/// Regularized antiderivative of `s(t - p) s(t - q)` at `+inf` (minus `t`).
#[inline]
fn pair_tail(p: f64, q: f64) -> f64 {
    -q - bernoulli_ratio(q - p)
}

/// `int H(x-a1) H(a2-x) H(x-b1) H(b2-x) dx` in closed form.
///
/// Uses `s(t-A1) s(A2-t) = (s(t-A1) - s(t-A2)) / (1 - e^{-(A2-A1)})` to
/// reduce the four-sigmoid product to sums of two-sigmoid products, whose
/// integrals have the elementary tail `pair_tail`.
fn soft_axis_closed(a1: f64, a2: f64, b1: f64, b2: f64, alpha: f64) -> f64 {
    let c = 0.25 * (a1 + a2 + b1 + b2);
    let (p1, p2, q1, q2) = (
        alpha * (a1 - c),
        alpha * (a2 - c),
        alpha * (b1 - c),
        alpha * (b2 - c),
    );
    let ca = 1.0 / -(-(p2 - p1)).exp_m1();
    let cb = 1.0 / -(-(q2 - q1)).exp_m1();
    let sum = pair_tail(p1, q1) - pair_tail(p1, q2) - pair_tail(p2, q1) + pair_tail(p2, q2);
    (ca * cb * sum / alpha).max(0.0)
}

fn soft_axis_quadrature(
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
    alpha: f64,
    cfg: &OverlapConfig,
) -> f64 {
    let rule = GaussLegendre::new(cfg.quadrature_nodes);
    let pad = cfg.support_pad / alpha;
    let lo = a1.min(b1) - pad;
    let hi = a2.max(b2) + pad;
    graded_integral(&rule, lo, hi, &[a1, a2, b1, b2], 2.0 / alpha, |x| {
        soft_step(alpha, x - a1)
            * soft_step(alpha, a2 - x)
            * soft_step(alpha, x - b1)
            * soft_step(alpha, b2 - x)
    })
}

fn soft_axis(a1: f64, a2: f64, b1: f64, b2: f64, alpha: f64, cfg: &OverlapConfig) -> f64 {
    match cfg.integral {
        SoftIntegral::ClosedForm => soft_axis_closed(a1, a2, b1, b2, alpha),
        SoftIntegral::GaussLegendre => soft_axis_quadrature(a1, a2, b1, b2, alpha, cfg),
    }
}

/// Soft inner product `<S_r, S_q>` at an explicit steepness.
///
/// The integrand is separable, so the 2-D integral is the product of an
/// x-axis and a y-axis integral.
pub fn smooth_inner_at(r: &Region, q: &Region, alpha: f64, cfg: &OverlapConfig) -> f64 {
    soft_axis(r.x1, r.x2, q.x1, q.x2, alpha, cfg) * soft_axis(r.y1, r.y2, q.y1, q.y2, alpha, cfg)
}

/// Soft inner product using the steepness chosen by `cfg` for this pair.
pub fn smooth_inner(r: &Region, q: &Region, cfg: &OverlapConfig) -> Result<f64> {
    if cfg.mode != OverlapMode::Soft {
        return Err(Error::Config(
            "smooth_inner requires a soft overlap configuration".into(),
        ));
    }
    Ok(smooth_inner_at(r, q, cfg.alpha_for(r, q), cfg))
}

/// The normalized overlap kernel: IoU in hard mode, SIoU in soft mode.
pub fn rho(r: &Region, q: &Region, cfg: &OverlapConfig) -> f64 {
    match cfg.mode {
        OverlapMode::Hard => iou(r, q),
        OverlapMode::Soft => {
            let alpha = cfg.alpha_for(r, q);
            let rq = smooth_inner_at(r, q, alpha, cfg);
            let rr = smooth_inner_at(r, r, alpha, cfg);
            let qq = smooth_inner_at(q, q, alpha, cfg);
            let denom = rr + qq - rq;
            assert!(
                denom > 0.0,
                "kernel denominator must be positive for valid regions"
            );
            (rq / denom).clamp(0.0, 1.0)
        }
    }
}

/// `G[i][j] = rho(regions[i], regions[j])`, evaluated once per unordered pair.
pub fn gram_matrix(regions: &[Region], cfg: &OverlapConfig) -> Matrix {
    let n = regions.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| rho(&regions[i], &regions[j], cfg)).collect())
        .collect();
    let mut g = Matrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            let j = i + off;
            g[(i, j)] = *v;
            g[(j, i)] = *v;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region::new(x1, y1, x2, y2).unwrap()
    }

    /// Midpoint rule on a dense grid; the 2-D grid sum of a separable
    /// integrand equals the product of the per-axis sums.
    fn midpoint_inner(a: &Region, b: &Region, alpha: f64, points: usize) -> f64 {
        let axis = |a1: f64, a2: f64, b1: f64, b2: f64| {
            let lo = a1.min(b1) - 40.0 / alpha;
            let hi = a2.max(b2) + 40.0 / alpha;
            let h = (hi - lo) / points as f64;
            (0..points)
                .map(|i| {
                    let x = lo + (i as f64 + 0.5) * h;
                    soft_step(alpha, x - a1)
                        * soft_step(alpha, a2 - x)
                        * soft_step(alpha, x - b1)
                        * soft_step(alpha, b2 - x)
                })
                .sum::<f64>()
                * h
        };
        axis(a.x1, a.x2, b.x1, b.x2) * axis(a.y1, a.y2, b.y1, b.y2)
    }

    #[test]
    fn iou_examples() {
        let unit = r(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        assert!((iou(&unit, &r(0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&unit, &r(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn degenerate_regions_are_rejected() {
        assert!(Region::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Region::new(0.0, 1.0, 1.0, 0.5).is_err());
        assert!(Region::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        let err: std::result::Result<Region, _> = serde_json::from_str("[0, 0, -1, 1]");
        assert!(err.is_err());
    }

    #[test]
    fn smooth_inner_matches_area_for_steep_sigmoid() {
        let a = r(0.0, 0.0, 10.0, 10.0);
        let cfg = OverlapConfig::soft_fixed(100.0);
        let got = smooth_inner(&a, &a, &cfg).unwrap();
        let oracle = midpoint_inner(&a, &a, 100.0, 4096);
        // frozen from the midpoint oracle: (10 - 2/alpha)^2
        assert!((oracle - 99.6004).abs() < 1e-9, "oracle {oracle}");
        assert!((got - oracle).abs() < 1e-9 * oracle, "{got} vs {oracle}");
        assert!((got - 100.0).abs() < 0.5);
    }

    #[test]
    fn disjoint_boxes_have_positive_soft_overlap() {
        let a = r(0.0, 0.0, 1.0, 1.0);
        let b = r(2.0, 0.0, 3.0, 1.0);
        let cfg = OverlapConfig::soft_fixed(1.0);
        let got = smooth_inner(&a, &b, &cfg).unwrap();
        let oracle = midpoint_inner(&a, &b, 1.0, 4096);
        assert!(got > 0.0);
        // frozen from the midpoint oracle
        assert!((oracle - 0.116_133_467_210_755_7).abs() < 1e-12);
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        assert!(rho(&a, &b, &cfg) > 0.0);
    }

    #[test]
    fn both_soft_routes_agree() {
        let cases = [
            (r(0.0, 0.0, 1.0, 1.0), r(0.5, 0.2, 1.5, 0.9), 1.0),
            (r(0.0, 0.0, 1.0, 1.0), r(0.2, 0.3, 0.7, 0.4), 1000.0),
            (r(10.0, 5.0, 40.0, 30.0), r(45.0, 0.0, 80.0, 25.0), 0.05),
            (r(0.0, 0.0, 3.0, 1.0), r(0.0, 0.0, 3.0, 1.0), 7.0),
        ];
        for (a, b, alpha) in cases {
            let closed = smooth_inner_at(&a, &b, alpha, &OverlapConfig::soft_fixed(alpha));
            let quad = smooth_inner_at(
                &a,
                &b,
                alpha,
                &OverlapConfig::soft_fixed(alpha).with_integral(SoftIntegral::GaussLegendre),
            );
            assert!(
                (closed - quad).abs() <= 1e-10 * closed.max(1.0),
                "{a:?} {b:?} alpha={alpha}: {closed} vs {quad}"
            );
        }
    }

    #[test]
    fn rho_hard_is_iou_and_identity_is_one() {
        let a = r(1.0, 2.0, 4.0, 7.0);
        let b = r(2.0, 1.0, 5.0, 3.0);
        assert_eq!(rho(&a, &b, &OverlapConfig::hard()), iou(&a, &b));
        assert_eq!(rho(&a, &a, &OverlapConfig::hard()), 1.0);
        let soft = OverlapConfig::soft_fixed(0.3);
        assert!((rho(&a, &a, &soft) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn soft_inner_obeys_cauchy_schwarz_but_not_self_bound() {
        // A small box inside the soft support of a larger one can overlap it
        // more than it overlaps itself, since S_r^2 < S_r pointwise.
        let cfg = OverlapConfig::soft_fixed(0.7);
        let a = r(0.0, 0.0, 2.0, 1.0);
        let b = r(1.0, -1.0, 4.0, 3.0);
        let ab = smooth_inner(&a, &b, &cfg).unwrap();
        let aa = smooth_inner(&a, &a, &cfg).unwrap();
        let bb = smooth_inner(&b, &b, &cfg).unwrap();
        assert!((ab - 0.8356232052579389).abs() < 1e-9, "{ab}");
        assert!((aa - 0.3637098775679748).abs() < 1e-9, "{aa}");
        assert!((bb - 2.3964244288047136).abs() < 1e-9, "{bb}");
        assert!(ab <= (aa * bb).sqrt());
        assert!(ab > aa);
        assert!(rho(&a, &b, &cfg) <= 1.0);
    }

    #[test]
    fn smooth_inner_requires_soft_mode() {
        let a = r(0.0, 0.0, 1.0, 1.0);
        assert!(smooth_inner(&a, &a, &OverlapConfig::hard()).is_err());
    }

    #[test]
    fn single_region_gram() {
        let g = gram_matrix(&[r(0.0, 0.0, 2.0, 2.0)], &OverlapConfig::default());
        assert_eq!(g.rows(), 1);
        assert!((g[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(OverlapConfig::soft_fixed(0.0).validate().is_err());
        let mut c = OverlapConfig::default();
        c.quadrature_nodes = 4;
        assert!(c.validate().is_err());
        assert!(OverlapConfig::default().validate().is_ok());
    }

    #[test]
    fn adaptive_alpha_clamps() {
        let cfg = OverlapConfig::default();
        let tiny = r(0.0, 0.0, 1.0, 1.0);
        assert_eq!(cfg.alpha_for(&tiny, &tiny), 10.0);
        let big = r(0.0, 0.0, 1e5, 1e5);
        assert_eq!(cfg.alpha_for(&big, &big), 0.01);
        let mid = r(0.0, 0.0, 100.0, 25.0);
        assert!((cfg.alpha_for(&mid, &mid) - 0.5).abs() < 1e-15);
    }
}
