//! Forward (noising) process: single transitions q(x_t | x_{t−1}) and the
//! closed-form jump q(x_t | x_0).

use crate::batch::{Batch, Origin};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{tags, StreamRng};
use crate::schedule::NoiseSchedule;

/// One noising step from `x_prev` (at t − 1) to t:
/// `x_t = √(1 − β_t) x_{t−1} + √β_t ε`, with ε drawn per vector from
/// stream `(t, i)` of `rng`.
pub fn forward_step(x_prev: &Batch, sched: &NoiseSchedule, rng: &StreamRng) -> Result<Batch> {
    let t = x_prev.t() + 1;
    if t > sched.steps() {
        return Err(Error::TimeRange {
            t,
            lo: 1,
            hi: sched.steps(),
        });
    }
    let keep = sched.alpha(t).sqrt();
    let noise_scale = sched.beta(t).sqrt();
    let streams = rng.derive(tags::FORWARD_STEP).derive(t as u64);
    let dim = x_prev.dim();
    let src = x_prev.as_slice();
    let mut out = vec![0.0; src.len()];
    par::for_each_row_mut(&mut out, dim, |i, row| {
        streams.fill_normal(i as u64, row);
        let prev = &src[i * dim..(i + 1) * dim];
        for (o, p) in row.iter_mut().zip(prev) {
            *o = keep * p + noise_scale * *o;
        }
    });
    Ok(Batch::from_parts(out, dim, t, Origin::Forward))
}

/// Closed-form jump from data to step t:
/// `x_t = √ᾱ_t x_0 + √(1 − ᾱ_t) ε`. Returns `(x_t, ε)`.
pub fn forward_jump(x0: &Batch, t: usize, sched: &NoiseSchedule, rng: &StreamRng) -> Result<(Batch, Batch)> {
    sched.check_t(t)?;
    if x0.t() != 0 {
        return Err(Error::Invalid(format!(
            "forward_jump expects a batch at t = 0, got t = {}",
            x0.t()
        )));
    }
    let ab = sched.alpha_bar_at(t);
    let (keep, scale) = (ab.sqrt(), (1.0 - ab).sqrt());
    let streams = rng.derive(tags::FORWARD_JUMP).derive(t as u64);
    let dim = x0.dim();
    let mut noise = vec![0.0; x0.as_slice().len()];
    par::for_each_row_mut(&mut noise, dim, |i, row| streams.fill_normal(i as u64, row));
    let out: Vec<f64> = x0
        .as_slice()
        .iter()
        .zip(&noise)
        .map(|(x, e)| keep * x + scale * e)
        .collect();
    Ok((
        Batch::from_parts(out, dim, t, Origin::Forward),
        Batch::from_parts(noise, dim, t, Origin::Forward),
    ))
}
