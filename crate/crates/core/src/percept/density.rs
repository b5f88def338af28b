//! Beta prior, Gaussian KDE on a fixed grid and the discretized KL term
//! between them, with an analytic gradient of the KL term with respect to the
//! samples (including through the data-driven bandwidth).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Density floor applied to every KDE evaluation.
pub const DENSITY_FLOOR: f64 = 1e-6;
/// Lower bound of the automatic bandwidth.
pub const MIN_BANDWIDTH: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Config(format!("beta parameters must be positive, got a={a} b={b}")));
        }
        Ok(BetaParams { a, b })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.a, self.b).map(|_| ())
    }
}

impl Default for BetaParams {
    fn default() -> Self {
        BetaParams { a: 0.5, b: 0.5 }
    }
}

pub fn beta_pdf(p: f64, beta: BetaParams) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid(format!("beta_pdf needs 0 < p < 1, got {p}")));
    }
    let ln = (beta.a - 1.0) * p.ln() + (beta.b - 1.0) * (1.0 - p).ln()
        - statrs::function::beta::ln_beta(beta.a, beta.b);
    Ok(ln.exp())
}

/// Sorted evaluation points strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DensityGrid {
    points: Vec<f64>,
}

impl DensityGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("density grid is empty".into()));
        }
        if points.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Invalid("density grid points must lie in (0,1)".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("density grid must be strictly increasing".into()));
        }
        Ok(DensityGrid { points })
    }

    /// `n` bin midpoints `(2i-1)/(2n)`.
    pub fn midpoints(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Default for DensityGrid {
    fn default() -> Self {
        Self::midpoints(32).expect("valid")
    }
}

impl TryFrom<Vec<f64>> for DensityGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DensityGrid> for Vec<f64> {
    fn from(g: DensityGrid) -> Self {
        g.points
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Silverman's rule with a lower bound of [`MIN_BANDWIDTH`].
    #[default]
    Auto,
    Fixed(f64),
}

fn gauss(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Linear-interpolated quantile on sorted data: (value, lower index, weight of upper).
fn quantile(sorted: &[f64], q: f64) -> (f64, usize, f64) {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let hi = (lo + 1).min(sorted.len() - 1);
    (sorted[lo] + frac * (sorted[hi] - sorted[lo]), lo, frac)
}

/// Silverman bandwidth and its gradient with respect to each sample.
fn silverman_with_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    let sorted: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let (q1, lo1, f1) = quantile(&sorted, 0.25);
    let (q3, lo3, f3) = quantile(&sorted, 0.75);
    let iqr_scaled = (q3 - q1) / 1.34;

    let scale = 0.9 * nf.powf(-0.2);
    let spread = sd.min(iqr_scaled);
    let h = scale * spread;
    let mut grad = vec![0.0; n];
    if h < MIN_BANDWIDTH {
        return (MIN_BANDWIDTH, grad);
    }
    if sd <= iqr_scaled {
        if sd > 0.0 {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = scale * (v - mean) / ((nf - 1.0) * sd);
            }
        }
    } else {
        let c = scale / 1.34;
        let hi = |lo: usize| (lo + 1).min(n - 1);
        grad[order[lo3]] += c * (1.0 - f3);
        grad[order[hi(lo3)]] += c * f3;
        grad[order[lo1]] -= c * (1.0 - f1);
        grad[order[hi(lo1)]] -= c * f1;
    }
    (h, grad)
}

/// Silverman's rule: `max(0.9·min(σ, IQR/1.34)·n^(-1/5), 0.01)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    silverman_with_grad(samples).0
}

/// A Gaussian kernel density estimate over a fixed sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub bandwidth: f64,
    pub floor: f64,
    samples: Vec<f64>,
}

impl DensityEstimate {
    pub fn new(samples: &[f64], bandwidth: Bandwidth) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Invalid(format!(
                "density estimate needs >= 2 samples, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite sample in density estimate".into()));
        }
        let bandwidth = match bandwidth {
            Bandwidth::Auto => silverman_bandwidth(samples),
            Bandwidth::Fixed(h) if h > 0.0 => h,
            Bandwidth::Fixed(h) => {
                return Err(Error::Config(format!("bandwidth must be positive, got {h}")))
            }
        };
        Ok(DensityEstimate {
            bandwidth,
            floor: DENSITY_FLOOR,
            samples: samples.to_vec(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn eval(&self, p: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self.samples.iter().map(|&x| gauss((p - x) / h)).sum();
        (s / (self.samples.len() as f64 * h)).max(self.floor)
    }

    pub fn on_grid(&self, grid: &DensityGrid) -> Vec<f64> {
        grid.points().iter().map(|&p| self.eval(p)).collect()
    }
}

/// Floored Gaussian KDE of `samples` evaluated at every grid point.
pub fn kde_eval(samples: &[f64], grid: &DensityGrid, bandwidth: Bandwidth) -> Result<Vec<f64>> {
    Ok(DensityEstimate::new(samples, bandwidth)?.on_grid(grid))
}

/// `Σ_p β(p)·ln(β(p)/q(p))` over the grid, unnormalized.
pub fn kl_beta_vs_kde(grid: &DensityGrid, beta: BetaParams, q: &[f64]) -> Result<f64> {
    if q.len() != grid.len() {
        return Err(Error::shape("kl_beta_vs_kde", &[grid.len()], &[q.len()]));
    }
    if let Some(bad) = q.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Invalid(format!("kde value must be positive, got {bad}")));
    }
    let mut d = 0.0;
    for (&p, &qp) in grid.points().iter().zip(q) {
        let b = beta_pdf(p, beta)?;
        d += b * (b / qp).ln();
    }
    Ok(d)
}

/// Value of [`kl_beta_vs_kde`] on the KDE of `samples`, and its gradient with
/// respect to each sample.
pub fn kde_kl_with_grad(
    samples: &[f64],
    grid: &DensityGrid,
    beta: BetaParams,
    bandwidth: Bandwidth,
) -> Result<(f64, Vec<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Invalid(format!("density estimate needs >= 2 samples, got {n}")));
    }
    let (h, dh) = match bandwidth {
        Bandwidth::Auto => silverman_with_grad(samples),
        Bandwidth::Fixed(h) if h > 0.0 => (h, vec![0.0; n]),
        Bandwidth::Fixed(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
    };
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    let mut dd_dh = 0.0;
    let mut z = vec![0.0; n];
    let mut phi = vec![0.0; n];
    for &p in grid.points() {
        let b = beta_pdf(p, beta)?;
        let mut s = 0.0;
        let mut s_h = 0.0;
        for j in 0..n {
            z[j] = (p - samples[j]) / h;
            phi[j] = gauss(z[j]);
            s += phi[j];
            s_h += phi[j] * (z[j] * z[j] - 1.0);
        }
        let q_raw = s / (nf * h);
        let q = q_raw.max(DENSITY_FLOOR);
        value += b * (b / q).ln();
        if q_raw < DENSITY_FLOOR {
            continue;
        }
        let dq = -b / q;
        let c = dq / (nf * h * h);
        for j in 0..n {
            grad[j] += c * phi[j] * z[j];
        }
        dd_dh += dq * s_h / (nf * h * h);
    }
    for (g, d) in grad.iter_mut().zip(&dh) {
        *g += dd_dh * d;
    }
    Ok((value, grad))
}
