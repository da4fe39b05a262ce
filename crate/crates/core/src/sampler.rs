//! Backward (denoising) process: the ε-parameterized posterior mean,
//! single ancestral steps, full chains from N(0, I), and the bootstrap
//! short chain that warm-starts at a forward-process sample.

use std::collections::{BTreeMap, BTreeSet};

use crate::batch::{Batch, Origin};
use crate::eps_net::{EpsNet, EpsPredictor, GradientVector, Tape};
use crate::error::{Error, Result};
use crate::forward::forward_jump;
use crate::par;
use crate::rng::{tags, StreamRng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DenoiseOptions {
    /// Drop the σ_1 noise on the final step (t = 1).
    pub noiseless_final: bool,
}

/// Coefficients `(1/√α_t, β_t/√(1−ᾱ_t))` of the posterior mean at step t.
fn mean_coeffs(t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let beta = sched.beta(t);
    let ab = sched.alpha_bar_at(t);
    let c2 = if beta == 0.0 { 0.0 } else { beta / (1.0 - ab).sqrt() };
    (1.0 / sched.alpha(t).sqrt(), c2)
}

/// `μ = (x_t − β_t/√(1−ᾱ_t) ε̂) / √α_t`, elementwise over row-major slices.
pub fn posterior_mean_from_eps(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let (c1, c2) = mean_coeffs(t, sched);
    x_t.iter().zip(eps_hat).map(|(x, e)| c1 * (x - c2 * e)).collect()
}

pub fn posterior_mean<P: EpsPredictor + ?Sized>(
    predictor: &P,
    x_t: &Batch,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Batch> {
    sched.check_t(t)?;
    x_t.check_dim(predictor.dim())?;
    let eps = predictor.predict_eps(x_t, t)?;
    let mu = posterior_mean_from_eps(x_t.as_slice(), eps.as_slice(), t, sched);
    Ok(Batch::from_parts(mu, x_t.dim(), t, Origin::Backward))
}

fn step_sigma(t: usize, sched: &NoiseSchedule, opts: DenoiseOptions) -> f64 {
    if t == 1 && opts.noiseless_final {
        0.0
    } else {
        sched.sigma(t)
    }
}

fn add_noise(mu: &mut [f64], dim: usize, sigma: f64, t: usize, rng: &StreamRng) {
    if sigma == 0.0 {
        return;
    }
    let streams = rng.derive(tags::DENOISE).derive(t as u64);
    par::for_each_row_mut(mu, dim, |i, row| {
        let mut e = vec![0.0; dim];
        streams.fill_normal(i as u64, &mut e);
        for (m, v) in row.iter_mut().zip(&e) {
            *m += sigma * v;
        }
    });
}

/// One ancestral step `x_{t−1} = μ_θ(x_t, t) + σ_t ε`.
pub fn denoise_step<P: EpsPredictor + ?Sized>(
    predictor: &P,
    x_t: &Batch,
    t: usize,
    sched: &NoiseSchedule,
    rng: &StreamRng,
    opts: DenoiseOptions,
) -> Result<Batch> {
    let mu = posterior_mean(predictor, x_t, t, sched)?;
    let dim = mu.dim();
    let mut out = mu.into_vec();
    add_noise(&mut out, dim, step_sigma(t, sched, opts), t, rng);
    Ok(Batch::from_parts(out, dim, t - 1, Origin::Backward))
}

/// Runs the full backward chain from `n` standard normal draws at t = T
/// down to t = 0, returning the batches at every index in `record_at`.
pub fn sample_chain<P: EpsPredictor + ?Sized>(
    predictor: &P,
    n: usize,
    sched: &NoiseSchedule,
    rng: &StreamRng,
    record_at: &BTreeSet<usize>,
    opts: DenoiseOptions,
) -> Result<BTreeMap<usize, Batch>> {
    if n == 0 {
        return Err(Error::BatchSize { need: 1, got: 0 });
    }
    let big_t = sched.steps();
    if let Some(&bad) = record_at.iter().find(|&&t| t > big_t) {
        return Err(Error::TimeRange {
            t: bad,
            lo: 0,
            hi: big_t,
        });
    }
    let dim = predictor.dim();
    let init = rng.derive(tags::CHAIN_INIT);
    let mut data = vec![0.0; n * dim];
    par::for_each_row_mut(&mut data, dim, |i, row| init.fill_normal(i as u64, row));
    let mut x = Batch::from_parts(data, dim, big_t, Origin::Backward);
    let mut out = BTreeMap::new();
    if record_at.contains(&big_t) {
        out.insert(big_t, x.clone());
    }
    let lowest = record_at.iter().next().copied().unwrap_or(big_t);
    for t in (lowest + 1..=big_t).rev() {
        x = denoise_step(predictor, &x, t, sched, rng, opts)?;
        if record_at.contains(&(t - 1)) {
            out.insert(t - 1, x.clone());
        }
    }
    Ok(out)
}

/// Start index for a bootstrap chain ending at `t`: uniform over
/// `{t+1, …, min(t+L, T)}`.
pub fn draw_bootstrap_start(t: usize, span: usize, steps: usize, rng: &StreamRng) -> Result<usize> {
    if t >= steps {
        return Err(Error::TimeRange {
            t,
            lo: 0,
            hi: steps - 1,
        });
    }
    if span == 0 {
        return Err(Error::Invalid("bootstrap span L must be at least 1".into()));
    }
    let hi = (t + span).min(steps);
    Ok(rng.derive(tags::BOOTSTRAP_START).uniform_int(t as u64, t + 1, hi))
}

fn warm_start(data: &Batch, s: usize, sched: &NoiseSchedule, rng: &StreamRng) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::BatchSize { need: 1, got: 0 });
    }
    let (x, _) = forward_jump(data, s, sched, &rng.derive(tags::BOOTSTRAP_WARM))?;
    Ok(x)
}

/// Bootstrap estimate of a backward sample at `t`: warm-start at a random
/// `s ∈ {t+1, …, min(t+L, T)}` with the forward jump from `data`, then
/// denoise from s down to t. Returns the batch and the chosen s.
pub fn bootstrap_backward<P: EpsPredictor + ?Sized>(
    predictor: &P,
    data: &Batch,
    t: usize,
    span: usize,
    sched: &NoiseSchedule,
    rng: &StreamRng,
) -> Result<(Batch, usize)> {
    data.check_dim(predictor.dim())?;
    let s = draw_bootstrap_start(t, span, sched.steps(), rng)?;
    let mut x = warm_start(data, s, sched, rng)?;
    let chain = rng.derive(tags::BOOTSTRAP_CHAIN);
    for k in (t + 1..=s).rev() {
        x = denoise_step(predictor, &x, k, sched, &chain, DenoiseOptions::default())?;
    }
    Ok((x.retag(t, Origin::Bootstrap), s))
}

/// [`bootstrap_backward`] with every network evaluation recorded, so the
/// gradient of a loss on the output can be pushed back to the parameters
/// through all denoising steps. The noise terms are fixed draws, so they
/// pass gradients through unchanged.
#[derive(Debug)]
pub struct BootstrapTape {
    s: usize,
    t: usize,
    dim: usize,
    steps: Vec<(usize, Tape)>,
    output: Batch,
}

pub fn bootstrap_backward_tape(
    net: &EpsNet,
    data: &Batch,
    t: usize,
    span: usize,
    sched: &NoiseSchedule,
    rng: &StreamRng,
) -> Result<BootstrapTape> {
    data.check_dim(net.dim())?;
    let s = draw_bootstrap_start(t, span, sched.steps(), rng)?;
    let dim = data.dim();
    let mut x = warm_start(data, s, sched, rng)?.into_vec();
    let chain = rng.derive(tags::BOOTSTRAP_CHAIN);
    let mut steps = Vec::with_capacity(s - t);
    for k in (t + 1..=s).rev() {
        let tape = net.forward_tape(&x, k)?;
        let mut next = posterior_mean_from_eps(&x, tape.output(), k, sched);
        add_noise(&mut next, dim, sched.sigma(k), k, &chain);
        steps.push((k, tape));
        x = next;
    }
    Ok(BootstrapTape {
        s,
        t,
        dim,
        steps,
        output: Batch::from_parts(x, dim, t, Origin::Bootstrap),
    })
}

impl BootstrapTape {
    pub fn start(&self) -> usize {
        self.s
    }

    pub fn end(&self) -> usize {
        self.t
    }

    pub fn output(&self) -> &Batch {
        &self.output
    }

    /// Network evaluations per vector spent on this chain.
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// ∂L/∂θ given ∂L/∂x̃_t (row-major, same layout as the output).
    pub fn backward(&self, net: &EpsNet, sched: &NoiseSchedule, grad_out: &[f64]) -> Result<GradientVector> {
        if grad_out.len() != self.output.as_slice().len() {
            return Err(Error::Dimension {
                expected: self.output.as_slice().len(),
                got: grad_out.len(),
            });
        }
        let _ = self.dim;
        let mut total = GradientVector::zeros(net.num_params());
        let mut g = grad_out.to_vec();
        // Steps were recorded from k = s down to t + 1; walk them back up.
        for (k, tape) in self.steps.iter().rev() {
            let (c1, c2) = mean_coeffs(*k, sched);
            let g_eps: Vec<f64> = g.iter().map(|v| -c1 * c2 * v).collect();
            let (g_theta, g_x) = tape.backward(net, &g_eps)?;
            total.add_scaled(&g_theta, 1.0);
            for (a, b) in g.iter_mut().zip(&g_x) {
                *a = c1 * *a + b;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eps_net::NetShape;
    use crate::schedule::make_linear_schedule;
    use approx::assert_relative_eq;

    struct ConstEps(f64, usize);

    impl EpsPredictor for ConstEps {
        fn dim(&self) -> usize {
            self.1
        }
        fn predict_eps(&self, x: &Batch, t: usize) -> Result<Batch> {
            Ok(Batch::from_parts(
                vec![self.0; x.as_slice().len()],
                x.dim(),
                t,
                Origin::Backward,
            ))
        }
    }

    fn fwd_batch(rows: &[f64], dim: usize, t: usize) -> Batch {
        Batch::new(rows.to_vec(), dim, t, Origin::Forward).unwrap()
    }

    #[test]
    fn zero_eps_mean_is_rescaled_input() {
        let s = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        let x = fwd_batch(&[1.0, -2.0, 0.5, 3.0], 2, 6);
        let mu = posterior_mean(&ConstEps(0.0, 2), &x, 6, &s).unwrap();
        for (m, v) in mu.as_slice().iter().zip(x.as_slice()) {
            assert_eq!(*m, v / s.alpha(6).sqrt());
        }
    }

    #[test]
    fn scalar_plug_in() {
        // α_t = 0.99 and ᾱ_t = 0.5 at t = 2.
        let s = NoiseSchedule::from_betas(vec![1.0 - 0.5 / 0.99, 0.01]).unwrap();
        assert_relative_eq!(s.alpha_bar_at(2), 0.5, max_relative = 1e-15);
        let x = fwd_batch(&[1.0], 1, 2);
        let mu = posterior_mean(&ConstEps(1.0, 1), &x, 2, &s).unwrap();
        let expect = (1.0 - 0.01 / 0.5f64.sqrt()) / 0.99f64.sqrt();
        assert_relative_eq!(mu.as_slice()[0], expect, max_relative = 1e-14);
    }

    #[test]
    fn mean_is_affine_in_x() {
        let s = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        let e = [0.7];
        let m1 = posterior_mean_from_eps(&[1.0], &e, 4, &s)[0];
        let m3 = posterior_mean_from_eps(&[3.0], &e, 4, &s)[0];
        let m0 = posterior_mean_from_eps(&[0.0], &e, 4, &s)[0];
        assert_relative_eq!(m3 - m0, 3.0 * (m1 - m0), max_relative = 1e-12);
        assert_relative_eq!(m1 - m0, 1.0 / s.alpha(4).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn eps_form_recovers_ddpm_posterior_mean() {
        // With ε̂ := (x − √ᾱ_t m)/√(1 − ᾱ_t) the mean must equal the forward
        // posterior mean √ᾱ_{t−1}β_t/(1−ᾱ_t) m + √α_t(1−ᾱ_{t−1})/(1−ᾱ_t) x.
        let s = make_linear_schedule(50, 1e-3, 0.2).unwrap();
        for t in [2usize, 10, 37, 50] {
            for (x, m) in [(0.3, -1.2), (2.0, 0.5), (-1.0, 1.0)] {
                let ab = s.alpha_bar_at(t);
                let abp = s.alpha_bar_at(t - 1);
                let eps = (x - ab.sqrt() * m) / (1.0 - ab).sqrt();
                let mu = posterior_mean_from_eps(&[x], &[eps], t, &s)[0];
                let ddpm = abp.sqrt() * s.beta(t) / (1.0 - ab) * m + s.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab) * x;
                assert_relative_eq!(mu, ddpm, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_zero_eps_step() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let x = fwd_batch(&[2.0, 4.0], 2, 1);
        let opts = DenoiseOptions { noiseless_final: true };
        let y = denoise_step(&ConstEps(0.0, 2), &x, 1, &s, &StreamRng::new(1), opts).unwrap();
        assert_eq!(y.t(), 0);
        assert_eq!(y.as_slice(), &[2.0 / 0.9f64.sqrt(), 4.0 / 0.9f64.sqrt()]);
    }

    #[test]
    fn step_is_seed_deterministic() {
        let s = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        let net = EpsNet::init(NetShape::new(2, 4, vec![8]).unwrap(), 3);
        let x = fwd_batch(&[0.1, 0.2, 0.3, 0.4], 2, 5);
        let a = denoise_step(&net, &x, 5, &s, &StreamRng::new(2), DenoiseOptions::default()).unwrap();
        let b = denoise_step(&net, &x, 5, &s, &StreamRng::new(2), DenoiseOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_mean_within_clt_bound() {
        let s = make_linear_schedule(10, 1e-2, 0.2).unwrap();
        let n = 100_000;
        let net = EpsNet::init(NetShape::new(2, 4, vec![8]).unwrap(), 5);
        let x = Batch::new([0.4, -0.9].repeat(n), 2, 7, Origin::Forward).unwrap();
        let mu = posterior_mean(&net, &x, 7, &s).unwrap();
        let y = denoise_step(&net, &x, 7, &s, &StreamRng::new(4), DenoiseOptions::default()).unwrap();
        let m = y.mean();
        let bound = 4.0 * s.sigma(7) / (n as f64).sqrt();
        for (a, b) in m.iter().zip(mu.row(0)) {
            assert!((a - b).abs() < bound);
        }
    }

    #[test]
    fn chain_records_and_counts() {
        let s = make_linear_schedule(6, 1e-2, 0.2).unwrap();
        let net = EpsNet::init(NetShape::new(2, 4, vec![8]).unwrap(), 5);
        let rec: BTreeSet<usize> = [6].into_iter().collect();
        let out = sample_chain(&net, 40, &s, &StreamRng::new(3), &rec, DenoiseOptions::default()).unwrap();
        assert_eq!(net.evals(), 0);
        assert_eq!(out[&6].t(), 6);
        let rec: BTreeSet<usize> = [0, 3, 6].into_iter().collect();
        let out2 = sample_chain(&net, 40, &s, &StreamRng::new(3), &rec, DenoiseOptions::default()).unwrap();
        assert_eq!(out2[&6], out[&6]);
        assert_eq!(net.evals(), 6 * 40);
        assert_eq!(out2[&0].t(), 0);
        let bad: BTreeSet<usize> = [7].into_iter().collect();
        assert!(sample_chain(&net, 4, &s, &StreamRng::new(3), &bad, DenoiseOptions::default()).is_err());
    }

    #[test]
    fn single_step_chain() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let net = EpsNet::init(NetShape::new(1, 2, vec![4]).unwrap(), 1);
        let rec: BTreeSet<usize> = [0, 1].into_iter().collect();
        let rng = StreamRng::new(8);
        let out = sample_chain(&net, 10, &s, &rng, &rec, DenoiseOptions::default()).unwrap();
        let direct = denoise_step(&net, &out[&1], 1, &s, &rng, DenoiseOptions::default()).unwrap();
        assert_eq!(out[&0], direct);
        assert_eq!(net.evals(), 20);
    }

    #[test]
    fn bootstrap_start_distribution() {
        let rng = StreamRng::new(5);
        let mut counts = [0usize; 5];
        let trials = 20_000;
        for i in 0..trials {
            let s = draw_bootstrap_start(990, 5, 1000, &rng.derive(i)).unwrap();
            assert!((991..=995).contains(&s));
            counts[s - 991] += 1;
        }
        for c in counts {
            let p = c as f64 / trials as f64;
            assert!((p - 0.2).abs() < 4.0 * (0.2 * 0.8 / trials as f64).sqrt());
        }
        for i in 0..50 {
            assert_eq!(draw_bootstrap_start(999, 5, 1000, &rng.derive(i)).unwrap(), 1000);
        }
        assert!(draw_bootstrap_start(1000, 5, 1000, &rng).is_err());
        assert!(draw_bootstrap_start(3, 0, 1000, &rng).is_err());
    }

    #[test]
    fn unit_span_is_one_step_composition() {
        let s = make_linear_schedule(20, 1e-3, 0.2).unwrap();
        let net = EpsNet::init(NetShape::new(2, 4, vec![8]).unwrap(), 9);
        let mut d = vec![0.0; 30];
        StreamRng::new(1).fill_normal(0, &mut d);
        let data = Batch::new(d, 2, 0, Origin::Data).unwrap();
        let rng = StreamRng::new(12);
        let (x, start) = bootstrap_backward(&net, &data, 7, 1, &s, &rng).unwrap();
        assert_eq!(start, 8);
        assert_eq!(net.evals(), 15);
        let (warm, _) = forward_jump(&data, 8, &s, &rng.derive(tags::BOOTSTRAP_WARM)).unwrap();
        let direct = denoise_step(
            &net,
            &warm,
            8,
            &s,
            &rng.derive(tags::BOOTSTRAP_CHAIN),
            DenoiseOptions::default(),
        )
        .unwrap();
        assert_eq!(x.as_slice(), direct.as_slice());
        assert_eq!(x.origin(), Origin::Bootstrap);
    }

    #[test]
    fn bootstrap_eval_bound_and_tape_agreement() {
        let s = make_linear_schedule(30, 1e-3, 0.2).unwrap();
        let net = EpsNet::init(NetShape::new(2, 4, vec![8]).unwrap(), 9);
        let mut d = vec![0.0; 40];
        StreamRng::new(1).fill_normal(0, &mut d);
        let data = Batch::new(d, 2, 0, Origin::Data).unwrap();
        for i in 0..20u64 {
            let rng = StreamRng::new(100 + i);
            net.reset_evals();
            let (x, start) = bootstrap_backward(&net, &data, 12, 4, &s, &rng).unwrap();
            assert!(net.evals() <= 4 * 20);
            assert_eq!(net.evals() as usize, (start - 12) * 20);
            let tape = bootstrap_backward_tape(&net, &data, 12, 4, &s, &rng).unwrap();
            assert_eq!(tape.start(), start);
            assert_eq!(tape.output().as_slice(), x.as_slice());
        }
        let empty_dim = Batch::new(vec![0.0; 3], 3, 0, Origin::Data).unwrap();
        assert!(bootstrap_backward(&net, &empty_dim, 1, 2, &s, &StreamRng::new(1)).is_err());
    }

    #[test]
    fn tape_gradient_matches_fd() {
        let s = make_linear_schedule(12, 1e-2, 0.3).unwrap();
        let net = EpsNet::init(NetShape::new(2, 4, vec![5]).unwrap(), 4);
        let mut d = vec![0.0; 8];
        StreamRng::new(2).fill_normal(0, &mut d);
        let data = Batch::new(d, 2, 0, Origin::Data).unwrap();
        let rng = StreamRng::new(77);
        let w: Vec<f64> = (0..8).map(|i| 1.0 - 0.2 * i as f64).collect();
        let probe = |n: &EpsNet| {
            let tape = bootstrap_backward_tape(n, &data, 3, 5, &s, &rng).unwrap();
            tape.output().as_slice().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = bootstrap_backward_tape(&net, &data, 3, 5, &s, &rng).unwrap();
        assert!(tape.depth() >= 1);
        let g = tape.backward(&net, &s, &w).unwrap();
        let p = net.params();
        for k in 0..p.len() {
            let mut q = p.clone();
            q[k] += 1e-5;
            let mut up = net.clone();
            up.set_params(&q).unwrap();
            q[k] -= 2e-5;
            let mut dn = net.clone();
            dn.set_params(&q).unwrap();
            let fd = (probe(&up) - probe(&dn)) / 2e-5;
            assert!(
                (g.0[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-2),
                "{k}: {} vs {fd}",
                g.0[k]
            );
        }
    }
}
