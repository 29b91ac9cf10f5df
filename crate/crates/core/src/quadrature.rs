//! Gauss–Legendre rules and a graded composite integrator for integrands
//! with a handful of sharp, known transition points.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, refined by Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates `f` over `[lo, hi]` using panels that start at width `h0`
/// next to every breakpoint and double in width away from it.
pub fn graded_integral(
    rule: &GaussLegendre,
    lo: f64,
    hi: f64,
    breakpoints: &[f64],
    h0: f64,
    f: impl Fn(f64) -> f64,
) -> f64 {
    let mut cuts: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|b| *b > lo && *b < hi)
        .collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();

    let mut total = 0.0;
    for pair in cuts.windows(2) {
        let (u, v) = (pair[0], pair[1]);
        for (a, b) in graded_panels(u, v, h0) {
            total += rule.integrate(a, b, &f);
        }
    }
    total
}

fn graded_panels(u: f64, v: f64, h0: f64) -> Vec<(f64, f64)> {
    let mid = 0.5 * (u + v);
    let mut left = vec![u];
    let mut h = h0;
    while left.last().copied().unwrap_or(u) + h < mid {
        let next = left.last().copied().unwrap_or(u) + h;
        left.push(next);
        h *= 2.0;
    }
    let mut right = vec![v];
    let mut h = h0;
    while right.last().copied().unwrap_or(v) - h > mid {
        let next = right.last().copied().unwrap_or(v) - h;
        right.push(next);
        h *= 2.0;
    }
    right.reverse();
    let points: Vec<f64> = left.into_iter().chain(right).collect();
    points.windows(2).map(|w| (w[0], w[1])).collect()
}
