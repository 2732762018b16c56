//! Central finite-difference oracle for the network gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;

use super::loss::softmax_cross_entropy;
use super::model::{backward, forward};
use super::{ConvNetConfig, ModelParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - cd| / max(|analytic|, |cd|, 1e-8) over checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose +/- epsilon probes landed on different ReLU / argmax
    /// regimes; the loss is not differentiable across those, so they are skipped.
    pub skipped_kinks: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backprop gradients (all parameters plus the input) against
/// central differences on up to `samples_per_tensor` entries per tensor.
pub fn finite_difference_check(
    config: &ConvNetConfig,
    params: &ModelParams,
    input: &Tensor,
    label: usize,
    epsilon: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be in (0, 1e-2], got {epsilon}"
        )));
    }
    let pass = forward(config, params, input)?;
    let (_, grad_logits) = softmax_cross_entropy(&pass.logits, label)?;
    let (grads, grad_input) = backward(params, &pass, &grad_logits)?;

    let loss_at = |p: &ModelParams, x: &Tensor| -> Result<(f64, (Vec<bool>, Vec<usize>))> {
        let pass = forward(config, p, x)?;
        let (loss, _) = softmax_cross_entropy(&pass.logits, label)?;
        Ok((loss, pass.regime()))
    };

    let mut rng = rng::stream(seed, &[rng::tag::SAMPLE]);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut record = |analytic: f64, plus: (f64, _), minus: (f64, _)| {
        if plus.1 != minus.1 {
            report.skipped_kinks += 1;
            return;
        }
        let cd = (plus.0 - minus.0) / (2.0 * epsilon);
        report.max_rel_error = report.max_rel_error.max(rel_error(analytic, cd));
        report.checked += 1;
    };

    let n_tensors = params.named_tensors().len();
    for t in 0..=n_tensors {
        let len = if t < n_tensors {
            params.named_tensors()[t].1.len()
        } else {
            input.len()
        };
        let picks: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, samples_per_tensor).into_vec()
        };
        for i in picks {
            if t < n_tensors {
                let analytic = grads.named_tensors()[t].1.data()[i];
                let mut p = params.clone();
                p.tensors_mut()[t].data_mut()[i] += epsilon;
                let plus = loss_at(&p, input)?;
                p.tensors_mut()[t].data_mut()[i] -= 2.0 * epsilon;
                let minus = loss_at(&p, input)?;
                record(analytic, plus, minus);
            } else {
                let analytic = grad_input.data()[i];
                let mut x = input.clone();
                x.data_mut()[i] += epsilon;
                let plus = loss_at(params, &x)?;
                x.data_mut()[i] -= 2.0 * epsilon;
                let minus = loss_at(params, &x)?;
                record(analytic, plus, minus);
            }
        }
    }
    Ok(report)
}
