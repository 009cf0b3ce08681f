//! Central finite differences as an independent oracle for tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Relative step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms; below it the
/// finite-difference roundoff (about `|f| * 1e-16 / FD_STEP`) dominates.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Matrix], with_grad: bool) -> Result<(f64, Option<Vec<Matrix>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if with_grad {
                tape.param(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.shape() != (1, 1) {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check (expects scalar)",
            left: value.shape(),
            right: (1, 1),
        });
    }
    let value = value.get(0, 0);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .take(*v)
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((value, Some(grads)))
}

/// Compares tape gradients of `f` against central differences on `sample`
/// coordinates drawn without replacement from all entries of `params`.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Matrix],
    sample: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let total: usize = params.iter().map(Matrix::len).sum();
    if sample > total {
        return Err(Error::OutOfRange {
            what: "finite_diff_check sample",
            index: sample,
            limit: total,
        });
    }
    let (_, grads) = evaluate(&f, params, true)?;
    let grads = grads.expect("gradients requested");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = rand::seq::index::sample(&mut rng, total, sample).into_vec();
    coords.sort_unstable();

    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for p in params {
        offsets.push(acc);
        acc += p.len();
    }

    let mut work = params.to_vec();
    let mut max_rel = 0.0_f64;
    let mut worst = None;
    for flat in coords {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let ei = flat - offsets[pi];
        let x = params[pi].as_slice()[ei];
        let h = FD_STEP * x.abs().max(1.0);
        work[pi].as_mut_slice()[ei] = x + h;
        let (fp, _) = evaluate(&f, &work, false)?;
        work[pi].as_mut_slice()[ei] = x - h;
        let (fm, _) = evaluate(&f, &work, false)?;
        work[pi].as_mut_slice()[ei] = x;
        let fd = (fp - fm) / (2.0 * h);
        let ad = grads[pi].as_slice()[ei];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(GRAD_FLOOR);
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some((pi, ei));
        }
    }
    Ok(GradCheckReport {
        checked: sample,
        tolerance: tol,
        max_rel_error: max_rel,
        worst,
        passed: max_rel <= tol,
    })
}
