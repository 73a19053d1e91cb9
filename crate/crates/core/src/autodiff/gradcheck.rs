//! Central finite-difference oracle for tape gradients.

use super::{AutodiffError, Tape, Tensor, Var};

/// Entries whose magnitude is below this are compared in absolute terms.
pub const SMALL_GRADIENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over entries with |grad| >= [`SMALL_GRADIENT`].
    pub max_rel_error: f64,
    /// Largest absolute error over the remaining (near-zero) entries.
    pub max_abs_error_small: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol_small: f64) -> bool {
        self.max_rel_error < rel_tol && self.max_abs_error_small < abs_tol_small
    }
}

/// Compares analytic gradients of `f` against central differences with step `h`.
///
/// `entries` restricts the check to `(input index, flat element index)` pairs;
/// `None` checks every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    entries: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|v| v.grad().expect("leaf requires grad"))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &leaves)?.value().item())
    };

    let all: Vec<(usize, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error_small: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let exact = analytic[i].data()[j];
        let scale = exact.abs().max(numeric.abs());
        if scale < SMALL_GRADIENT {
            report.max_abs_error_small = report.max_abs_error_small.max((exact - numeric).abs());
        } else {
            report.max_rel_error = report.max_rel_error.max((exact - numeric).abs() / scale);
        }
        report.checked += 1;
    }
    Ok(report)
}
