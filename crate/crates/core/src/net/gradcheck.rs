use super::MacNetwork;
use crate::error::Result;
use crate::percept::CategoryAttributeMatrix;
use crate::tensor::Tensor;
use serde::Serialize;

/// Worst disagreement between backprop and central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_relative_error: f64,
    pub worst_parameter: String,
}

/// Compares every scalar parameter gradient of the joint loss with
/// `(L(θ+ε) − L(θ−ε)) / 2ε`. Relative error is
/// `|fd − bp| / max(|fd|, |bp|, floor)`.
pub fn gradient_check(
    net: &MacNetwork,
    images: &Tensor,
    labels: &[usize],
    a: Option<&CategoryAttributeMatrix>,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let loss_of = |n: &MacNetwork| -> Result<f64> {
        let mut t = n.trace(images.clone())?;
        Ok(n.attach_loss(&mut t, labels, a)?.1.total)
    };
    let mut trace = net.trace(images.clone())?;
    let (loss, _) = net.attach_loss(&mut trace, labels, a)?;
    let grads = trace.graph.backward(loss)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        worst_relative_error: 0.0,
        worst_parameter: String::new(),
    };
    for (id, bp) in grads.iter() {
        for j in 0..bp.len() {
            let orig = probe.params().get(id).value.data()[j];
            probe.params_mut().get_mut(id).value.data_mut()[j] = orig + eps;
            let up = loss_of(&probe)?;
            probe.params_mut().get_mut(id).value.data_mut()[j] = orig - eps;
            let dn = loss_of(&probe)?;
            probe.params_mut().get_mut(id).value.data_mut()[j] = orig;
            let fd = (up - dn) / (2.0 * eps);
            let rel = (fd - bp[j]).abs() / fd.abs().max(bp[j].abs()).max(floor);
            report.checked += 1;
            if rel > report.worst_relative_error {
                report.worst_relative_error = rel;
                report.worst_parameter = format!("{}[{j}]", net.params().name(id));
            }
        }
    }
    Ok(report)
}
