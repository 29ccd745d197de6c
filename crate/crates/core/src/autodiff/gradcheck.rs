use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{PctError, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over checked scalars.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Scalars whose `±step` probes cross a ReLU kink, an argmax/argmin switch
    /// or a rotation fallback; the function is not differentiable there.
    pub excluded: usize,
}

fn evaluate<F>(params: &ParamStore, loss: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_kink_tracking(params);
    let l = loss(&mut tape)?;
    let v = tape.value(l);
    if v.shape() != (1, 1) {
        return Err(PctError::dim("loss", "1x1", format!("{}x{}", v.rows(), v.cols())));
    }
    let v = v.get(0, 0);
    if !v.is_finite() {
        return Err(PctError::Numeric(format!("loss is not finite ({v})")));
    }
    Ok((v, tape.kink_signature().expect("tracking enabled")))
}

/// Checks every parameter scalar of `params` against central finite
/// differences with the given step.
pub fn grad_check<F>(params: &ParamStore, loss: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let (_, base_sig) = evaluate(params, &loss)?;
    let grads = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l)
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for id in 0..params.len() {
        for k in 0..params.tensor(id).len() {
            let orig = params.tensor(id).data()[k];
            work.tensor_mut(id).data_mut()[k] = orig + step;
            let (up, sig_up) = evaluate(&work, &loss)?;
            work.tensor_mut(id).data_mut()[k] = orig - step;
            let (down, sig_down) = evaluate(&work, &loss)?;
            work.tensor_mut(id).data_mut()[k] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                report.excluded += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * step);
            let ad = grads.get(id).data()[k];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
