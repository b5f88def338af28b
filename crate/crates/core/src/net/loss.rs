use super::{KdeMode, MacNetwork, NetworkConfig, ForwardOutputs, Trace};
use crate::error::{Error, Result};
use crate::percept::{kde_kl_with_grad, CategoryAttributeMatrix};
use crate::tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

/// The terms of the joint objective for one batch.
///
/// `total = cross_entropy + λ_attr·(Σ u_layers + u_final) + λ_dist·d`.
/// Terms whose weight is zero are still reported but contribute nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    /// One entry per auxiliary (pool stage) head.
    pub u_layers: Vec<f64>,
    /// The combination head's attribute loss; 0 without aux heads.
    pub u_final: f64,
    /// Distribution-matching term on the combination head.
    pub d: f64,
    pub total: f64,
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", &[n], &[labels.len()]));
    }
    match labels.iter().find(|&&l| l >= k) {
        Some(bad) => Err(Error::Invalid(format!("label {bad} out of range for {k} categories"))),
        None => Ok(()),
    }
}

/// L1 distance between each present category's mean prediction and its row
/// of `a`, averaged over the categories present in the batch. Returns the
/// value and its gradient with respect to `phi` [N, M].
pub fn category_mean_l1(phi: &Tensor, labels: &[usize], a: &CategoryAttributeMatrix) -> Result<(f64, Vec<f64>)> {
    let s = phi.shape();
    if s.len() != 2 || s[1] != a.m() {
        return Err(Error::shape("category_mean_l1", s, &[labels.len(), a.m()]));
    }
    let (n, m, k) = (s[0], s[1], a.k());
    check_labels(labels, n, k)?;
    let mut counts = vec![0usize; k];
    let mut means = vec![0.0; k * m];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (acc, v) in means[l * m..(l + 1) * m].iter_mut().zip(phi.row(i)) {
            *acc += v;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut value = 0.0;
    let mut sgn = vec![0.0; k * m];
    for c in (0..k).filter(|&c| counts[c] > 0) {
        for j in 0..m {
            let mean = means[c * m + j] / counts[c] as f64;
            let diff = mean - a.row(c)[j];
            value += diff.abs();
            sgn[c * m + j] = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    let mut grad = vec![0.0; n * m];
    for (i, &l) in labels.iter().enumerate() {
        let scale = 1.0 / (present * counts[l] as f64);
        for j in 0..m {
            grad[i * m + j] = sgn[l * m + j] * scale;
        }
    }
    Ok((value / present, grad))
}

/// Divergence of the target Beta from the KDE of the batch's predictions,
/// with its gradient with respect to `phi` [N, M].
pub fn distribution_term(phi: &Tensor, cfg: &NetworkConfig) -> Result<(f64, Vec<f64>)> {
    let s = phi.shape();
    if s.len() != 2 {
        return Err(Error::shape("distribution_term", s, &[0, cfg.attributes]));
    }
    match cfg.kde_mode {
        KdeMode::Pooled => kde_kl_with_grad(phi.data(), &cfg.grid, cfg.beta, cfg.bandwidth),
        KdeMode::PerAttribute => {
            let (n, m) = (s[0], s[1]);
            let mut value = 0.0;
            let mut grad = vec![0.0; n * m];
            for j in 0..m {
                let col: Vec<f64> = (0..n).map(|i| phi.data()[i * m + j]).collect();
                let (v, g) = kde_kl_with_grad(&col, &cfg.grid, cfg.beta, cfg.bandwidth)?;
                value += v / m as f64;
                for i in 0..n {
                    grad[i * m + j] = g[i] / m as f64;
                }
            }
            Ok((value, grad))
        }
    }
}

fn attribute_terms(
    layers: &[&Tensor],
    last: Option<&Tensor>,
    labels: &[usize],
    a: Option<&CategoryAttributeMatrix>,
    cfg: &NetworkConfig,
) -> Result<(Vec<(f64, Vec<f64>)>, Option<(f64, Vec<f64>)>, Option<(f64, Vec<f64>)>)> {
    let Some(last) = last else {
        return Ok((Vec::new(), None, None));
    };
    let a = a.ok_or_else(|| Error::Invalid("attribute losses need a category-attribute matrix".into()))?;
    if a.m() != cfg.attributes {
        return Err(Error::Config(format!(
            "matrix has {} attributes, network has {}",
            a.m(),
            cfg.attributes
        )));
    }
    let u: Vec<_> = layers
        .iter()
        .map(|t| category_mean_l1(t, labels, a))
        .collect::<Result<_>>()?;
    let uf = category_mean_l1(last, labels, a)?;
    let d = distribution_term(last, cfg)?;
    Ok((u, Some(uf), Some(d)))
}

fn total(cfg: &NetworkConfig, ce: f64, u: &[f64], uf: f64, d: f64, has_attr: bool) -> f64 {
    let mut t = ce;
    if has_attr && cfg.lambda_attr != 0.0 {
        for &v in u.iter().chain([&uf]) {
            t += cfg.lambda_attr * v;
        }
    }
    if has_attr && cfg.lambda_dist != 0.0 {
        t += cfg.lambda_dist * d;
    }
    t
}

/// Loss values for already-computed outputs. `a` may be `None` only for a
/// network without aux heads.
pub fn compute_loss(
    out: &ForwardOutputs,
    labels: &[usize],
    a: Option<&CategoryAttributeMatrix>,
    cfg: &NetworkConfig,
) -> Result<LossBreakdown> {
    let s = out.logits.shape();
    check_labels(labels, s[0], s[1])?;
    let mut ce = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        ce -= out.probabilities.row(i)[l].max(f64::MIN_POSITIVE).ln();
    }
    let ce = ce / labels.len() as f64;
    let layers: Vec<&Tensor> = out.layer_attributes.iter().collect();
    let (u, uf, d) = attribute_terms(&layers, out.attributes.as_ref(), labels, a, cfg)?;
    let u: Vec<f64> = u.into_iter().map(|(v, _)| v).collect();
    let uf = uf.map_or(0.0, |t| t.0);
    let d = d.map_or(0.0, |t| t.0);
    Ok(LossBreakdown {
        total: total(cfg, ce, &u, uf, d, out.attributes.is_some()),
        cross_entropy: ce,
        u_layers: u,
        u_final: uf,
        d,
    })
}

impl MacNetwork {
    /// Attaches the joint objective to a recorded forward pass. Terms with a
    /// zero weight are left out of the graph entirely.
    pub fn attach_loss(
        &self,
        trace: &mut Trace,
        labels: &[usize],
        a: Option<&CategoryAttributeMatrix>,
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.cfg;
        let g = &mut trace.graph;
        let ce_var = g.softmax_cross_entropy(trace.logits, labels)?;
        let ce = g.value(ce_var).item();
        let layers: Vec<&Tensor> = trace.layer_attributes.iter().map(|&v| g.value(v)).collect();
        let last = trace.attributes.map(|v| g.value(v));
        let (u, uf, d) = attribute_terms(&layers, last, labels, a, cfg)?;

        let mut terms: Vec<(Var, f64)> = vec![(ce_var, 1.0)];
        let has_attr = trace.attributes.is_some();
        let uvals: Vec<f64> = u.iter().map(|t| t.0).collect();
        let (ufv, dv) = (uf.as_ref().map_or(0.0, |t| t.0), d.as_ref().map_or(0.0, |t| t.0));
        if let (Some(final_var), Some(uf), Some(d)) = (trace.attributes, uf, d) {
            if cfg.lambda_attr != 0.0 {
                for (&var, (v, grad)) in trace.layer_attributes.iter().zip(u) {
                    terms.push((g.scalar_fn(var, v, grad)?, cfg.lambda_attr));
                }
                terms.push((g.scalar_fn(final_var, uf.0, uf.1)?, cfg.lambda_attr));
            }
            if cfg.lambda_dist != 0.0 {
                terms.push((g.scalar_fn(final_var, d.0, d.1)?, cfg.lambda_dist));
            }
        }
        let loss = if terms.len() == 1 { ce_var } else { g.weighted_sum(&terms)? };
        let breakdown = LossBreakdown {
            total: total(cfg, ce, &uvals, ufv, dv, has_attr),
            cross_entropy: ce,
            u_layers: uvals,
            u_final: ufv,
            d: dv,
        };
        Ok((loss, breakdown))
    }
}
