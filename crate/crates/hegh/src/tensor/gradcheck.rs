//! Central-difference validation of the tape's analytic gradients.
//!
//! The checker rebuilds the computation from scratch for every probe, so
//! the `build` closure must be deterministic: same parameter values in,
//! same loss out. Checks run in `f64`; finite differences in `f32` lose
//! too many digits to verify anything.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// A named evaluation point: one tensor per parameter, registered on the
/// tape in slice order before `build` runs.
pub type CheckPoint = Vec<(String, Tensor<f64>)>;

fn eval<F>(point: &[(String, Tensor<f64>)], build: &F) -> Result<(f64, f64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        point.iter().map(|(name, t)| tape.param(name.clone(), t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss).item().map_err(|_| {
        Error::Usage(format!(
            "grad_check needs a scalar loss, got shape {:?}",
            tape.value(loss).shape()
        ))
    })?;
    Ok((value, tape.min_kink_distance()))
}

/// Compares the tape's gradients against central differences at `point`.
///
/// Returns the max over all parameter elements of
/// `|analytic - central| / max(1, |central|)`.
///
/// The guard against non-differentiable points uses the centre
/// evaluation: if any recorded op sits within `10 * epsilon` of a kink
/// (a relu or abs input near 0, a near-tied max, a hinge near its
/// threshold), the point is rejected with [`Error::NonDifferentiable`]
/// so the caller can resample. Probe evaluations move each coordinate by
/// only `epsilon`, which the 10x margin absorbs.
pub fn grad_check<F>(point: &[(String, Tensor<f64>)], build: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Usage(format!(
            "epsilon {epsilon:e} outside the supported range [1e-7, 1e-3]"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        point.iter().map(|(name, t)| tape.param(name.clone(), t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar loss, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let kink = tape.min_kink_distance();
    if kink < 10.0 * epsilon {
        return Err(Error::NonDifferentiable { distance: kink });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| tape.grad(v).expect("param grad after backward").to_vec()).collect();
    drop(tape);

    // Probe passes: one coordinate at a time.
    let mut probe: CheckPoint = point.to_vec();
    let mut max_err = 0.0f64;
    for pi in 0..probe.len() {
        for j in 0..probe[pi].1.numel() {
            let orig = probe[pi].1.data()[j];
            probe[pi].1.data_mut()[j] = orig + epsilon;
            let (up, _) = eval(&probe, &build)?;
            probe[pi].1.data_mut()[j] = orig - epsilon;
            let (down, _) = eval(&probe, &build)?;
            probe[pi].1.data_mut()[j] = orig;
            let central = (up - down) / (2.0 * epsilon);
            let err = (analytic[pi][j] - central).abs() / central.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Runs [`grad_check`] on freshly sampled points until one avoids every
/// kink, up to `attempts` tries. Points that land near a kink are skipped,
/// not failed; any other error is returned immediately.
pub fn grad_check_resampling<S, F>(
    mut sample: S,
    build: F,
    epsilon: f64,
    attempts: usize,
) -> Result<f64>
where
    S: FnMut(usize) -> CheckPoint,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut last_distance = f64::NAN;
    for attempt in 0..attempts {
        let point = sample(attempt);
        match grad_check(&point, |t, v| build(t, v), epsilon) {
            Err(Error::NonDifferentiable { distance }) => last_distance = distance,
            other => return other,
        }
    }
    Err(Error::NonDifferentiable { distance: last_distance })
}
