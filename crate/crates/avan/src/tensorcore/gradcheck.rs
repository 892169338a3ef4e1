//! Central-difference gradient verification.
//!
//! Runs entirely in f64: each checked parameter entry is nudged by ±h and
//! ±h/2, the scalar loss re-evaluated, and the Richardson-extrapolated slope
//! `(4·D(h/2) − D(h)) / 3` compared against the analytic gradient with
//! relative error `|a - n| / max(|a|, |n|, 1e-6)`. The extrapolation cancels
//! the O(h²) truncation term, which matters for deep compositions where no
//! single step width clears both truncation and roundoff at once.

use crate::error::Result;

use super::graph::{Graph, Mode, NodeId};
use super::tensor::{ParamStore, Tensor};

pub struct GradCheckReport {
    /// Worst relative error seen, with the parameter entry it occurred at.
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compare analytic gradients of `loss` against central differences for
/// every trainable parameter entry. `h` is the probe step (1e-5 is a good
/// default at f64).
pub fn check_gradients(
    graph: &Graph<f64>,
    params: &ParamStore<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    mode: Mode,
    loss: NodeId,
    h: f64,
) -> Result<GradCheckReport> {
    let eval = graph.evaluate(params, inputs, mode)?;
    let grads = graph.gradients(&eval, params, loss)?;

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let len = params.require(&name)?.len();
        let analytic: Vec<f64> = match grads.param(&name) {
            Some(g) => g.to_vec(),
            // A trainable parameter that the loss never touches has an
            // all-zero gradient.
            None => vec![0.0; len],
        };
        for idx in 0..len {
            let orig = probe.require(&name)?.data()[idx];
            let mut loss_at = |w: f64| -> Result<f64> {
                probe.get_mut(&name).unwrap().data_mut()[idx] = w;
                Ok(graph.evaluate(&probe, inputs, mode)?.scalar(loss))
            };
            let d_full = (loss_at(orig + h)? - loss_at(orig - h)?) / (2.0 * h);
            let d_half = (loss_at(orig + h / 2.0)? - loss_at(orig - h / 2.0)?) / h;
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig;

            let numeric = (4.0 * d_half - d_full) / 3.0;
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
