//! Distance-preserving embedding of categories into [0,1]^M by projected
//! gradient descent with random restarts.

use super::density::{kde_kl_with_grad, Bandwidth, BetaParams, DensityGrid};
use super::{embedding_distance, CategoryAttributeMatrix, Matrix, PerceptualDistanceMatrix};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub step: f64,
    /// Weight of the per-column Beta prior term.
    pub gamma: f64,
    pub beta: BetaParams,
    pub grid: DensityGrid,
    pub bandwidth: Bandwidth,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            restarts: 8,
            iterations: 2000,
            step: 0.05,
            gamma: 0.01,
            beta: BetaParams::default(),
            grid: DensityGrid::default(),
            bandwidth: Bandwidth::Auto,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub matrix: CategoryAttributeMatrix,
    /// Full objective: stress + γ·Σ column prior terms.
    pub objective: f64,
    /// Distance-preservation term alone.
    pub stress: f64,
    /// Root mean squared error of the pairwise distances.
    pub rmse: f64,
    pub restart: usize,
    /// Objective after every accepted iterate of the winning restart.
    pub trace: Vec<f64>,
}

/// `Σ_{k<l} (‖a_k − a_l‖/√M − D_kl)²` for a row-major K×M buffer.
pub fn pairwise_stress(a: &[f64], m: usize, d: &PerceptualDistanceMatrix) -> f64 {
    let k = d.k();
    let mut s = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let r = embedding_distance(&a[i * m..(i + 1) * m], &a[j * m..(j + 1) * m]) - d.get(i, j);
            s += r * r;
        }
    }
    s
}

struct Problem<'a> {
    d: &'a PerceptualDistanceMatrix,
    m: usize,
    cfg: &'a SolverConfig,
}

impl Problem<'_> {
    fn k(&self) -> usize {
        self.d.k()
    }

    fn column(&self, a: &[f64], c: usize) -> Vec<f64> {
        (0..self.k()).map(|r| a[r * self.m + c]).collect()
    }

    fn prior(&self, a: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        if self.cfg.gamma == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        let mut grad = grad;
        for c in 0..self.m {
            let col = self.column(a, c);
            let (v, g) = kde_kl_with_grad(&col, &self.cfg.grid, self.cfg.beta, self.cfg.bandwidth)?;
            total += v;
            if let Some(buf) = grad.as_deref_mut() {
                for (r, gr) in g.into_iter().enumerate() {
                    buf[r * self.m + c] += self.cfg.gamma * gr;
                }
            }
        }
        Ok(self.cfg.gamma * total)
    }

    fn objective(&self, a: &[f64]) -> Result<f64> {
        Ok(pairwise_stress(a, self.m, self.d) + self.prior(a, None)?)
    }

    fn gradient(&self, a: &[f64]) -> Result<Vec<f64>> {
        let (k, m) = (self.k(), self.m);
        let sqrt_m = (m as f64).sqrt();
        let mut g = vec![0.0; k * m];
        for i in 0..k {
            for j in i + 1..k {
                let (ri, rj) = (&a[i * m..(i + 1) * m], &a[j * m..(j + 1) * m]);
                let dist = embedding_distance(ri, rj);
                if dist == 0.0 {
                    continue;
                }
                let coef = 2.0 * (dist - self.d.get(i, j)) / (dist * sqrt_m * sqrt_m);
                for c in 0..m {
                    let diff = coef * (ri[c] - rj[c]);
                    g[i * m + c] += diff;
                    g[j * m + c] -= diff;
                }
            }
        }
        self.prior(a, Some(&mut g))?;
        Ok(g)
    }
}

fn project(a: &mut [f64]) {
    a.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Best of `cfg.restarts` projected-gradient runs. A trial step that raises the
/// objective is rejected and retried at half the step size, so accepted
/// iterates never increase the objective.
pub fn solve_category_attribute_matrix(
    d: &PerceptualDistanceMatrix,
    m: usize,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if m == 0 {
        return Err(Error::Config("attribute count must be >= 1".into()));
    }
    if cfg.restarts == 0 || !(cfg.step > 0.0) || !(cfg.gamma >= 0.0) {
        return Err(Error::Config("solver needs restarts >= 1, step > 0, gamma >= 0".into()));
    }
    cfg.beta.validate()?;
    let k = d.k();
    let prob = Problem { d, m, cfg };
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>)> = None;

    for restart in 0..cfg.restarts {
        let mut rng = rng::rng(rng::mix(cfg.seed, restart as u64));
        let mut a: Vec<f64> = (0..k * m).map(|_| rng.gen::<f64>()).collect();
        let mut e = prob.objective(&a)?;
        let mut trace = vec![e];
        let mut step = cfg.step;
        for _ in 0..cfg.iterations {
            let g = prob.gradient(&a)?;
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial: Vec<f64> = a.iter().zip(&g).map(|(v, gv)| v - step * gv).collect();
                project(&mut trial);
                let et = prob.objective(&trial)?;
                if et <= e {
                    a = trial;
                    e = et;
                    trace.push(e);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            step = (step * 2.0).min(cfg.step);
        }
        if best.as_ref().is_none_or(|b| e < b.0) {
            best = Some((e, restart, a, trace));
        }
    }

    let (objective, restart, a, trace) = best.expect("restarts >= 1");
    let stress = pairwise_stress(&a, m, d);
    let pairs = (k * (k - 1) / 2).max(1) as f64;
    let matrix = CategoryAttributeMatrix::new(Matrix::new(k, m, a)?)?;
    Ok(SolveReport {
        matrix,
        objective,
        stress,
        rmse: (stress / pairs).sqrt(),
        restart,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(k: usize, m: usize, seed: u64) -> (CategoryAttributeMatrix, PerceptualDistanceMatrix) {
        let mut rng = rng::rng(seed);
        let a: Vec<f64> = (0..k * m).map(|_| rng.gen::<f64>()).collect();
        let a = CategoryAttributeMatrix::new(Matrix::new(k, m, a).unwrap()).unwrap();
        let d = PerceptualDistanceMatrix::from_embedding(&a).unwrap();
        (a, d)
    }

    #[test]
    fn extremal_pair() {
        let d = PerceptualDistanceMatrix::new(Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        let cfg = SolverConfig { gamma: 0.0, ..Default::default() };
        let r = solve_category_attribute_matrix(&d, 1, &cfg).unwrap();
        let (x, y) = (r.matrix.row(0)[0], r.matrix.row(1)[0]);
        assert!((x.min(y)).abs() < 1e-9 && (x.max(y) - 1.0).abs() < 1e-9, "{x} {y}");
        assert!(r.objective < 1e-12);
    }

    #[test]
    fn zero_distances_collapse_rows() {
        let d = PerceptualDistanceMatrix::new(Matrix::new(3, 3, vec![0.0; 9]).unwrap()).unwrap();
        let cfg = SolverConfig { gamma: 0.0, ..Default::default() };
        let r = solve_category_attribute_matrix(&d, 2, &cfg).unwrap();
        assert!(r.stress < 1e-6, "stress {}", r.stress);
        for row in 1..3 {
            assert!(embedding_distance(r.matrix.row(0), r.matrix.row(row)) < 1e-3);
        }
    }

    #[test]
    fn planted_embedding_recovered() {
        let (_, d) = planted(4, 3, 3);
        let cfg = SolverConfig { gamma: 0.0, ..Default::default() };
        let r = solve_category_attribute_matrix(&d, 3, &cfg).unwrap();
        assert!(r.objective < 1e-3, "objective {}", r.objective);
        assert!(r.rmse < 0.05);
    }

    #[test]
    fn planted_recovery_with_prior() {
        for (k, m, seed) in [(4, 3, 3), (6, 4, 8), (5, 2, 13)] {
            let (_, d) = planted(k, m, seed);
            let r = solve_category_attribute_matrix(&d, m, &SolverConfig::default()).unwrap();
            assert!(r.rmse < 0.05, "K={k} M={m}: rmse {}", r.rmse);
        }
    }

    #[test]
    fn accepted_iterates_monotone() {
        let (_, d) = planted(5, 3, 9);
        let cfg = SolverConfig { restarts: 2, iterations: 300, ..Default::default() };
        let r = solve_category_attribute_matrix(&d, 3, &cfg).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.trace.last().unwrap(), r.objective);
    }

    #[test]
    fn deterministic_given_seed() {
        let (_, d) = planted(4, 2, 1);
        let cfg = SolverConfig { restarts: 3, iterations: 200, ..Default::default() };
        let a = solve_category_attribute_matrix(&d, 2, &cfg).unwrap();
        let b = solve_category_attribute_matrix(&d, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, d) = planted(4, 3, 21);
        let cfg = SolverConfig::default();
        let prob = Problem { d: &d, m: 3, cfg: &cfg };
        let mut rng = rng::rng(2);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..0.9)).collect();
        let g = prob.gradient(&a).unwrap();
        for i in 0..a.len() {
            let mut p = a.clone();
            p[i] += 1e-6;
            let up = prob.objective(&p).unwrap();
            p[i] -= 2e-6;
            let dn = prob.objective(&p).unwrap();
            let fd = (up - dn) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_zero_attributes() {
        let (_, d) = planted(3, 2, 0);
        assert!(solve_category_attribute_matrix(&d, 0, &SolverConfig::default()).is_err());
    }
}
