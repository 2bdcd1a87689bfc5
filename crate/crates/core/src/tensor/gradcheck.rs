use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order)
/// and returns a scalar loss. Returns the maximum over all parameter entries
/// of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut work: Vec<Tensor> = params.iter().map(|p| p.clone().into_param()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &vars)?;
    check_finite(tape.value(loss).data(), "loss")?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(v)).collect();
    for g in &analytic {
        check_finite(g.data(), "analytic gradient")?;
    }

    let mut eval = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(Error::Data(format!("loss must be scalar, got {}", v.shape())));
        }
        check_finite(v.data(), "loss")?;
        Ok(v.data()[0])
    };

    let mut worst: f64 = 0.0;
    for pi in 0..work.len() {
        for i in 0..work[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} during gradient check")))
    }
}
