use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the function has a kink there.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

const MAX_COORDS: usize = 64;

fn coordinates(numel: usize) -> Vec<usize> {
    if numel <= MAX_COORDS {
        return (0..numel).collect();
    }
    // evenly spread, always including both ends
    (0..MAX_COORDS)
        .map(|i| i * (numel - 1) / (MAX_COORDS - 1))
        .collect()
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// input.
///
/// Each input is perturbed by `+-eps` on at most 64 coordinates. A
/// coordinate where the forward and backward one-sided slopes disagree
/// sharply sits on a kink (ReLU at 0, `|x|` at 0) and is skipped.
pub fn gradient_check<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for idx in coordinates(inputs[which].numel()) {
            let orig = inputs[which].data()[idx];
            work[which].data_mut()[idx] = orig + eps;
            let fp = evaluate(&f, &work)?;
            work[which].data_mut()[idx] = orig - eps;
            let fm = evaluate(&f, &work)?;
            work[which].data_mut()[idx] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let (fwd, bwd) = ((fp - f0) / eps, (f0 - fm) / eps);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1.0) {
                report.skipped += 1;
                continue;
            }
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((which, idx));
            }
        }
    }
    Ok(report)
}
