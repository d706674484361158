//! Central-difference verification of reverse-mode gradients.
//!
//! For each parameter element the checker compares the analytic gradient
//! against (f(θ+ε) − f(θ−ε)) / 2ε. Probes whose two evaluations land on
//! different sides of a relu kink are excluded and counted instead of
//! compared; dropout masks are replayed from their seeds, so a fixed graph
//! is piecewise linear in the probe direction everywhere else.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Below this magnitude both gradients are compared absolutely; a relative
/// quotient of two vanishing numbers would only amplify rounding noise.
const VANISH_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    pub eps: f64,
    pub tolerance: f64,
    /// Fault-injection hook: relative bias added to every analytic gradient
    /// before comparison. Zero in real use; the negative-control test sets
    /// it to prove the checker actually fails on a corrupted backward pass.
    pub analytic_bias: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            tolerance: 1e-4,
            analytic_bias: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl ParamCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.params.iter().all(|p| p.passed(self.tolerance))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn total_skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    /// One line per parameter plus a verdict line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("parameter\tmax_rel_err\tmean_rel_err\tchecked\tskipped\tstatus\n");
        for p in &self.params {
            out.push_str(&format!(
                "{}\t{:.3e}\t{:.3e}\t{}\t{}\t{}\n",
                p.name,
                p.max_rel_err,
                p.mean_rel_err,
                p.checked,
                p.skipped,
                if p.passed(self.tolerance) { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "verdict\t{}\ttolerance\t{:.1e}\n",
            if self.all_passed() { "ok" } else { "FAIL" },
            self.tolerance
        ));
        out
    }
}

/// Checks the gradients of `build` with respect to every parameter.
///
/// `build` must assemble the same graph for the same inputs on every call;
/// any stochastic op inside must draw from a fixed seed.
pub fn grad_check<S, F>(
    build: F,
    params: &[(String, Tensor<S>)],
    settings: &GradCheckSettings,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[TensorId]) -> Result<TensorId>,
{
    if settings.eps <= 0.0 {
        return Err(Error::attr("grad_check", format!("eps {} must be > 0", settings.eps)));
    }

    // One forward returning the loss plus relu activation signatures.
    let eval = |sets: &[Vec<S>]| -> Result<(f64, Vec<Vec<bool>>)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(params.len());
        for ((_, proto), vals) in params.iter().zip(sets) {
            ids.push(tape.leaf(Tensor::new(proto.shape().to_vec(), vals.clone())?));
        }
        let loss = build(&mut tape, &ids)?;
        let loss_tensor = tape.tensor(loss)?;
        if loss_tensor.numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: loss_tensor.numel(),
            });
        }
        let sigs = tape
            .relu_signatures()
            .into_iter()
            .map(|s| s.to_vec())
            .collect();
        Ok((loss_tensor.item().as_f64(), sigs))
    };

    // Base pass with gradients.
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(params.len());
    for (_, proto) in params {
        ids.push(tape.leaf(proto.clone().with_grad()));
    }
    let loss = build(&mut tape, &ids)?;
    if tape.tensor(loss)?.numel() != 1 {
        return Err(Error::NonScalarLoss {
            numel: tape.tensor(loss)?.numel(),
        });
    }
    let analytic = tape.backward(loss)?;

    let base: Vec<Vec<S>> = params.iter().map(|(_, t)| t.values().to_vec()).collect();
    let eps = S::of(settings.eps);
    let mut checks = Vec::with_capacity(params.len());

    for (pi, (name, proto)) in params.iter().enumerate() {
        let grads = &analytic[&ids[pi]];
        let mut max_rel: f64 = 0.0;
        let mut sum_rel: f64 = 0.0;
        let mut checked = 0usize;
        let mut skipped = 0usize;

        for i in 0..proto.numel() {
            let mut plus = base.clone();
            plus[pi][i] = plus[pi][i] + eps;
            let mut minus = base.clone();
            minus[pi][i] = minus[pi][i] - eps;
            let (f_plus, sig_plus) = eval(&plus)?;
            let (f_minus, sig_minus) = eval(&minus)?;

            if sig_plus != sig_minus {
                // The probe straddles a relu kink; the central difference is
                // not an estimate of any one-sided derivative there.
                skipped += 1;
                continue;
            }

            let numeric = (f_plus - f_minus) / (2.0 * settings.eps);
            let a = grads[i].as_f64() * (1.0 + settings.analytic_bias);
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < VANISH_THRESHOLD {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            checked += 1;
        }

        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            mean_rel_err: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
            checked,
            skipped,
        });
    }

    Ok(GradCheckReport {
        params: checks,
        tolerance: settings.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(name: &str, shape: &[usize], vals: &[f64]) -> (String, Tensor<f64>) {
        (
            name.to_string(),
            Tensor::from_f64_slice(shape.to_vec(), vals).unwrap(),
        )
    }

    #[test]
    fn square_function_passes() {
        // f(x) = x² at x = 3: analytic 6, central difference agrees to O(ε²).
        let report = grad_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.reduce_sum(sq)
            },
            &[leaf("x", &[1], &[3.0])],
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.all_passed(), "{}", report.to_text());
        assert_eq!(report.params[0].checked, 1);
        assert_eq!(report.params[0].skipped, 0);
    }

    #[test]
    fn relu_probed_at_kink_is_skipped() {
        let report = grad_check(
            |tape, ids| {
                let y = tape.relu(ids[0])?;
                tape.reduce_sum(y)
            },
            &[leaf("x", &[1], &[0.0])],
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert_eq!(report.params[0].skipped, 1);
        assert_eq!(report.params[0].checked, 0);
        assert!(report.all_passed());
        assert_eq!(report.total_skipped(), 1);
    }

    #[test]
    fn corrupted_backward_fails() {
        let settings = GradCheckSettings {
            analytic_bias: 0.01,
            ..GradCheckSettings::default()
        };
        let report = grad_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.reduce_sum(sq)
            },
            &[leaf("x", &[3], &[1.0, -2.0, 0.5])],
            &settings,
        )
        .unwrap();
        assert!(!report.all_passed());
        assert!(report.worst().unwrap().max_rel_err > 1e-3);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let err = grad_check(
            |tape, ids| tape.relu(ids[0]),
            &[leaf("x", &[2], &[1.0, 2.0])],
            &GradCheckSettings::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn multi_parameter_graph_passes() {
        let report = grad_check(
            |tape, ids| {
                let h = tape.matmul(ids[0], ids[1])?;
                let r = tape.relu(h)?;
                let n = tape.row_l2_normalize(r)?;
                tape.reduce_mean(n)
            },
            &[
                leaf("x", &[2, 3], &[0.9, -0.4, 0.7, 0.3, 0.8, -0.6]),
                leaf("w", &[3, 2], &[0.5, -0.7, 0.2, 0.9, -0.3, 0.4]),
            ],
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.all_passed(), "{}", report.to_text());
    }
}
