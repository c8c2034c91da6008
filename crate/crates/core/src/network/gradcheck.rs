use crate::error::{Error, Result};
use crate::network::{Tensor, UNet64};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_param: Option<usize>,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU or max-pool switch at
    /// every tried step; their difference quotient is not a derivative.
    pub skipped: usize,
}

/// Compares backpropagated parameter gradients against central differences.
///
/// `loss` maps the network output to a scalar and its gradient w.r.t. that
/// output. A parameter whose `+-step` perturbation changes the activation
/// pattern is retried with steps 10x and 100x smaller.
pub fn grad_check<F>(net: &UNet64, input: &Tensor<f64>, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let eval = |n: &UNet64| -> Result<(f64, Vec<u64>)> {
        let (y, tape) = n.forward_train(input)?;
        let (l, _) = loss(&y)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss = {l}")));
        }
        Ok((l, tape.activation_pattern()))
    };
    let (y, tape) = net.forward_train(input)?;
    let (l0, upstream) = loss(&y)?;
    if !l0.is_finite() {
        return Err(Error::NonFinite(format!("loss = {l0}")));
    }
    let pattern = tape.activation_pattern();
    let analytic = net.backward(&tape, &upstream)?.params;

    let mut probe = net.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: None, checked: 0, skipped: 0 };
    for (i, &a) in analytic.iter().enumerate() {
        let theta = net.params()[i];
        let mut numeric = None;
        for h in [step, step / 10.0, step / 100.0] {
            probe.params_mut()[i] = theta + h;
            let (lp, pp) = eval(&probe)?;
            probe.params_mut()[i] = theta - h;
            let (lm, pm) = eval(&probe)?;
            if pp == pattern && pm == pattern {
                numeric = Some((lp - lm) / (2.0 * h));
                break;
            }
        }
        probe.params_mut()[i] = theta;
        let Some(n) = numeric else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = Some(i);
        }
    }
    Ok(report)
}
