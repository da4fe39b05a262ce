use nalgebra::{DMatrix, DVector};

use super::gaussian::{gaussian_kl, logdet, Gaussian, MAX_FULL_DIM};
use crate::batch::{Batch, Origin};
use crate::eps_net::EpsPredictor;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// `p(x_{t−1} | x_t) = N(A x_t + b, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStep {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl AffineStep {
    pub fn isotropic(a: DMatrix<f64>, b: DVector<f64>, sigma2: f64) -> Self {
        let k = b.len();
        AffineStep {
            a,
            b,
            cov: DMatrix::identity(k, k) * sigma2,
        }
    }

    fn is_diagonal(&self) -> bool {
        let off = |m: &DMatrix<f64>| (0..m.nrows()).any(|i| (0..m.ncols()).any(|j| i != j && m[(i, j)] != 0.0));
        !off(&self.a) && !off(&self.cov)
    }
}

/// Exact posterior `q(x_{t−1} | x_t) = N(Ã x_t + b̃, C̃)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Linear-Gaussian backward chain against the forward process of a
/// Gaussian data law. Steps are stored for t = 1..=T at index t − 1; the
/// chain starts from `p(x_T) = N(0, I)`.
#[derive(Debug, Clone)]
pub struct GaussChain {
    sched: NoiseSchedule,
    data: Gaussian,
    steps: Vec<AffineStep>,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

impl GaussChain {
    pub fn new(sched: NoiseSchedule, data: Gaussian, steps: Vec<AffineStep>) -> Result<Self> {
        let k = data.dim();
        if steps.len() != sched.steps() {
            return Err(Error::Invalid(format!(
                "chain has {} steps, schedule has {}",
                steps.len(),
                sched.steps()
            )));
        }
        for (i, s) in steps.iter().enumerate() {
            if s.a.shape() != (k, k) || s.b.len() != k || s.cov.shape() != (k, k) {
                return Err(Error::Invalid(format!("step {} has inconsistent dimensions", i + 1)));
            }
            Gaussian::checked(s.b.clone(), s.cov.clone(), false)
                .map_err(|e| Error::NotSpd(format!("step {} covariance: {e}", i + 1)))?;
            if data.is_diagonal() && k > MAX_FULL_DIM && !s.is_diagonal() {
                return Err(Error::Invalid(format!(
                    "step {} is not diagonal in diagonal mode",
                    i + 1
                )));
            }
        }
        Ok(GaussChain { sched, data, steps })
    }

    /// The chain whose conditionals are the exact forward posteriors.
    pub fn perfect(sched: NoiseSchedule, data: Gaussian) -> Result<Self> {
        let tmp = GaussChain {
            sched: sched.clone(),
            data: data.clone(),
            steps: Vec::new(),
        };
        let steps = (1..=sched.steps())
            .map(|t| {
                let p = tmp.q_posterior_coeffs(t)?;
                Ok(AffineStep {
                    a: p.a,
                    b: p.b,
                    cov: p.cov,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GaussChain::new(sched, data, steps)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn data(&self) -> &Gaussian {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> &AffineStep {
        &self.steps[t - 1]
    }

    fn wrap(&self, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Gaussian> {
        Gaussian::checked(mean, symmetrize(cov), self.data.is_diagonal())
    }

    /// `q(x_t) = N(√ᾱ_t m, ᾱ_t S + (1 − ᾱ_t) I)`.
    pub fn q_marginal(&self, t: usize) -> Result<Gaussian> {
        if t > self.sched.steps() {
            return Err(Error::TimeRange {
                t,
                lo: 0,
                hi: self.sched.steps(),
            });
        }
        let ab = self.sched.alpha_bar_at(t);
        let k = self.dim();
        let mean = self.data.mean() * ab.sqrt();
        let cov = self.data.cov() * ab + DMatrix::identity(k, k) * (1.0 - ab);
        self.wrap(mean, cov)
    }

    /// Conjugate posterior: `Ã = √α_t S_{t−1} S_t⁻¹`, `b̃ = m_{t−1} − Ã m_t`,
    /// `C̃ = S_{t−1} − α_t S_{t−1} S_t⁻¹ S_{t−1}`.
    pub fn q_posterior_coeffs(&self, t: usize) -> Result<Posterior> {
        self.sched.check_t(t)?;
        let prev = self.q_marginal(t - 1)?;
        let cur = self.q_marginal(t)?;
        let alpha = self.sched.alpha(t);
        let chol = cur
            .cov()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("q_{t} covariance")))?;
        // S_t⁻¹ S_{t−1}, transposed: S_{t−1} S_t⁻¹ (both symmetric).
        let gain = chol.solve(prev.cov()).transpose();
        let a = &gain * alpha.sqrt();
        let b = prev.mean() - &a * cur.mean();
        let cov = symmetrize(prev.cov() - &gain * prev.cov() * alpha);
        Ok(Posterior { a, b, cov })
    }

    /// Backward marginals `p(x_t)` for t = 0..=T (index t).
    pub fn p_marginals(&self) -> Result<Vec<Gaussian>> {
        let big_t = self.steps();
        let k = self.dim();
        let mut cur = Gaussian::checked(DVector::zeros(k), DMatrix::identity(k, k), self.data.is_diagonal())?;
        let mut out = vec![cur.clone(); big_t + 1];
        out[big_t] = cur.clone();
        for t in (1..=big_t).rev() {
            let s = self.step(t);
            let mean = &s.a * cur.mean() + &s.b;
            let cov = &s.a * cur.cov() * s.a.transpose() + &s.cov;
            cur = self.wrap(mean, cov)?;
            out[t - 1] = cur.clone();
        }
        Ok(out)
    }

    pub fn p_marginal(&self, t: usize) -> Result<Gaussian> {
        if t > self.steps() {
            return Err(Error::TimeRange {
                t,
                lo: 0,
                hi: self.steps(),
            });
        }
        Ok(self.p_marginals()?.swap_remove(t))
    }

    /// `E_{x_t∼p}[KL(p(·|x_t) ‖ q(·|x_t))]` given the marginal `p(x_t)`.
    pub(crate) fn modular_error_given(&self, t: usize, pt: &Gaussian) -> Result<f64> {
        let post = self.q_posterior_coeffs(t)?;
        let s = self.step(t);
        let k = self.dim() as f64;
        let cq = post
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("posterior covariance at t = {t}")))?;
        let cp = s
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("step covariance at t = {t}")))?;
        let d = &s.a - &post.a;
        let dm = &d * pt.mean() + (&s.b - &post.b);
        let tr_cov = cq.solve(&s.cov).trace();
        let tr_spread = cq.solve(&(&d * pt.cov() * d.transpose())).trace();
        let quad = dm.dot(&cq.solve(&dm));
        Ok((0.5 * (tr_cov - k + logdet(&cq) - logdet(&cp) + tr_spread + quad)).max(0.0))
    }

    pub fn modular_error(&self, t: usize) -> Result<f64> {
        self.sched.check_t(t)?;
        self.modular_error_given(t, &self.p_marginal(t)?)
    }

    /// `KL(p(x_{t−1}) ‖ q(x_{t−1}))` for t in 1..=T, and 0 for the sentinel t = T + 1.
    pub fn cumulative_error(&self, t: usize) -> Result<f64> {
        if t == self.steps() + 1 {
            return Ok(0.0);
        }
        self.sched.check_t(t)?;
        gaussian_kl(&self.p_marginal(t - 1)?, &self.q_marginal(t - 1)?)
    }

    /// `E_{p(x_t)}‖ε̂‖²` for the ε-prediction implied by the step mean,
    /// `ε̂ = √(1−ᾱ_t)/β_t · ((I − √α_t A) x_t − √α_t b)`.
    pub(crate) fn eps_second_moment_given(&self, t: usize, pt: &Gaussian) -> f64 {
        let (g, off) = self.residual_map(t);
        let spread = (&g * pt.cov() * g.transpose()).trace();
        let mean = &g * pt.mean() - off;
        let beta = self.sched.beta(t);
        (1.0 - self.sched.alpha_bar_at(t)) / (beta * beta) * (spread + mean.norm_squared())
    }

    /// `(I − √α A, √α b)` for step t.
    fn residual_map(&self, t: usize) -> (DMatrix<f64>, DVector<f64>) {
        let s = self.step(t);
        let ra = self.sched.alpha(t).sqrt();
        let k = self.dim();
        (DMatrix::identity(k, k) - &s.a * ra, &s.b * ra)
    }

    /// `I_t = H(N(·, C_t)) − (K/2) ln(2πβ_t) − E‖x_t − √α_t x_{t−1}‖²/(2β_t)`,
    /// expectation over `p(x_t) p(x_{t−1}|x_t)`.
    pub(crate) fn i_term_given(&self, t: usize, pt: &Gaussian) -> Result<f64> {
        let s = self.step(t);
        let (g, off) = self.residual_map(t);
        let alpha = self.sched.alpha(t);
        let beta = self.sched.beta(t);
        let k = self.dim() as f64;
        let mean = &g * pt.mean() - off;
        let r2 = (&g * pt.cov() * g.transpose()).trace() + mean.norm_squared() + alpha * s.cov.trace();
        let cp = s
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("step covariance at t = {t}")))?;
        let h = 0.5 * (k * (std::f64::consts::TAU.ln() + 1.0) + logdet(&cp));
        Ok(h - 0.5 * k * (std::f64::consts::TAU * beta).ln() - r2 / (2.0 * beta))
    }

    pub fn i_term(&self, t: usize) -> Result<f64> {
        self.sched.check_t(t)?;
        self.i_term_given(t, &self.p_marginal(t)?)
    }

    /// Applies `f` to step t.
    pub fn perturbed(mut self, t: usize, f: impl FnOnce(&mut AffineStep)) -> Result<Self> {
        self.sched.check_t(t)?;
        f(&mut self.steps[t - 1]);
        GaussChain::new(self.sched, self.data, self.steps)
    }

    /// `A_t ← factor · A_t`.
    pub fn scale_a(self, t: usize, factor: f64) -> Result<Self> {
        self.perturbed(t, |s| s.a *= factor)
    }

    /// `b_t ← b_t + shift`.
    pub fn shift_b(self, t: usize, shift: &[f64]) -> Result<Self> {
        let k = self.dim();
        if shift.len() != k {
            return Err(Error::Dimension {
                expected: k,
                got: shift.len(),
            });
        }
        self.perturbed(t, |s| s.b += DVector::from_column_slice(shift))
    }

    /// `C_t ← factor² · C_t` (σ inflated by `factor`).
    pub fn inflate_sigma(self, t: usize, factor: f64) -> Result<Self> {
        self.perturbed(t, |s| s.cov *= factor * factor)
    }
}

/// Noise predictor that is optimal for Gaussian data:
/// `ε̂(x, t) = √(1−ᾱ_t) S_t⁻¹ (x − √ᾱ_t m)` with `S_t` the covariance of `q(x_t)`.
pub struct GaussianOptimalEps {
    chain: GaussChain,
}

impl GaussianOptimalEps {
    pub fn new(sched: NoiseSchedule, data: Gaussian) -> Result<Self> {
        let steps = (0..sched.steps())
            .map(|_| AffineStep::isotropic(DMatrix::zeros(data.dim(), data.dim()), DVector::zeros(data.dim()), 1.0))
            .collect();
        Ok(GaussianOptimalEps {
            chain: GaussChain::new(sched, data, steps)?,
        })
    }
}

impl EpsPredictor for GaussianOptimalEps {
    fn dim(&self) -> usize {
        self.chain.dim()
    }

    fn predict_eps(&self, x: &Batch, t: usize) -> Result<Batch> {
        x.check_dim(self.dim())?;
        let q = self.chain.q_marginal(t)?;
        let ab = self.chain.schedule().alpha_bar_at(t);
        let inv = q
            .cov()
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotSpd(format!("q_{t} covariance")))?;
        let k = self.dim();
        let c = (1.0 - ab).sqrt();
        let mut out = vec![0.0; x.as_slice().len()];
        crate::par::for_each_row_mut(&mut out, k, |i, row| {
            let xi = x.row(i);
            for r in 0..k {
                let mut v = 0.0;
                for j in 0..k {
                    v += inv[(r, j)] * (xi[j] - q.mean()[j]);
                }
                row[r] = c * v;
            }
        });
        Batch::new(out, k, t, Origin::Backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward_jump;
    use crate::rng::StreamRng;
    use crate::sampler::{sample_chain, DenoiseOptions};
    use crate::schedule::{make_linear_schedule, SigmaMode};
    use approx::assert_relative_eq;
    use std::collections::BTreeSet;

    fn sched(t: usize) -> NoiseSchedule {
        make_linear_schedule(t, 1e-3, 0.5).unwrap()
    }

    fn data2() -> Gaussian {
        Gaussian::new(vec![1.0, -0.5], DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.2, 0.3])).unwrap()
    }

    #[test]
    fn standard_data_is_fixed_point() {
        let c = GaussChain::perfect(sched(30), Gaussian::standard(3)).unwrap();
        for t in [0, 1, 15, 30] {
            let q = c.q_marginal(t).unwrap();
            assert!(q.mean().norm() == 0.0);
            assert!((q.cov() - DMatrix::identity(3, 3)).amax() < 1e-15);
        }
    }

    #[test]
    fn q_marginal_mean_scales() {
        let s = sched(20);
        let c = GaussChain::perfect(s.clone(), Gaussian::isotropic(vec![2.0, -1.0], 1e-8).unwrap()).unwrap();
        let q = c.q_marginal(7).unwrap();
        assert_relative_eq!(q.mean()[0], 2.0 * s.alpha_bar_at(7).sqrt(), max_relative = 1e-15);
        assert!(c.q_marginal(21).is_err());
    }

    #[test]
    fn posterior_covariance_matches_ddpm_variance_for_point_mass_limit() {
        let s = sched(20);
        let c = GaussChain::perfect(s.clone(), Gaussian::isotropic(vec![0.5], 1e-14).unwrap()).unwrap();
        for t in 2..=20 {
            let p = c.q_posterior_coeffs(t).unwrap();
            let beta_tilde = s.beta(t) * (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - s.alpha_bar_at(t));
            assert_relative_eq!(p.cov[(0, 0)], beta_tilde, max_relative = 1e-6);
        }
    }

    #[test]
    fn q_marginal_matches_forward_simulation() {
        let s = sched(20);
        let c = GaussChain::perfect(s.clone(), data2()).unwrap();
        let n = 1_000_000;
        let x0 = Batch::new(c.data().sample(n, &StreamRng::new(1)), 2, 0, Origin::Data).unwrap();
        for t in [1usize, 5, 20] {
            let (xt, _) = forward_jump(&x0, t, &s, &StreamRng::new(2)).unwrap();
            let q = c.q_marginal(t).unwrap();
            let (m, cv) = (xt.mean(), xt.covariance());
            for i in 0..2 {
                let sd = q.cov()[(i, i)].sqrt();
                assert!((m[i] - q.mean()[i]).abs() < 4.0 * sd / (n as f64).sqrt());
                // Var of a sample variance is ≈ 2σ⁴/n for Gaussians.
                assert!((cv[i * 2 + i] - q.cov()[(i, i)]).abs() < 4.0 * q.cov()[(i, i)] * (2.0 / n as f64).sqrt());
            }
        }
    }

    #[test]
    fn p_marginal_matches_backward_simulation() {
        let s = sched(10);
        let c = GaussChain::perfect(s, data2())
            .unwrap()
            .scale_a(6, 1.1)
            .unwrap()
            .shift_b(3, &[0.2, 0.0])
            .unwrap();
        let n = 1_000_000;
        let pm = c.p_marginals().unwrap();
        assert_eq!(pm[10].cov(), &DMatrix::identity(2, 2));
        let mut x = Gaussian::standard(2).sample(n, &StreamRng::new(5));
        for t in (1..=10).rev() {
            let st = c.step(t);
            let noise = Gaussian::checked(DVector::zeros(2), st.cov.clone(), false)
                .unwrap()
                .sample(n, &StreamRng::new(100 + t as u64));
            for i in 0..n {
                let xi = DVector::from_column_slice(&x[2 * i..2 * i + 2]);
                let y = &st.a * xi + &st.b;
                x[2 * i] = y[0] + noise[2 * i];
                x[2 * i + 1] = y[1] + noise[2 * i + 1];
            }
        }
        let b = Batch::new(x, 2, 0, Origin::Backward).unwrap();
        let (m, cv) = (b.mean(), b.covariance());
        for i in 0..2 {
            let var = pm[0].cov()[(i, i)];
            assert!((m[i] - pm[0].mean()[i]).abs() < 4.0 * (var / n as f64).sqrt());
            assert!((cv[i * 2 + i] - var).abs() < 4.0 * var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn perfect_chain_has_no_error() {
        for k in [1usize, 2, 4] {
            let mean: Vec<f64> = (0..k).map(|i| 0.5 - 0.3 * i as f64).collect();
            let c = GaussChain::perfect(sched(100), Gaussian::isotropic(mean, 0.4).unwrap()).unwrap();
            for t in 1..=100 {
                assert!(c.cumulative_error(t).unwrap() <= 1e-10, "k={k} t={t}");
                assert!(c.modular_error(t).unwrap() <= 1e-10);
            }
            assert_eq!(c.cumulative_error(101).unwrap(), 0.0);
        }
    }

    #[test]
    fn perfect_marginals_agree() {
        // p(x_T) = N(0, I) differs from q(x_T) by O(√ᾱ_T) ≈ 1e-6 here.
        let c = GaussChain::perfect(sched(100), data2()).unwrap();
        let pm = c.p_marginals().unwrap();
        for t in [0usize, 10, 99] {
            let q = c.q_marginal(t).unwrap();
            assert!((pm[t].mean() - q.mean()).amax() < 1e-5);
            assert!((pm[t].cov() - q.cov()).amax() < 1e-9);
        }
    }

    #[test]
    fn perturbation_errors_are_positive_below_the_step() {
        let c = GaussChain::perfect(sched(100), data2())
            .unwrap()
            .scale_a(12, 1.05)
            .unwrap();
        for t in 1..=100 {
            let e = c.cumulative_error(t).unwrap();
            if t <= 12 {
                assert!(e > 0.0, "t={t}");
            } else {
                assert!(e < 1e-10);
            }
        }
        assert!(c.modular_error(12).unwrap() > 0.0);
        assert!(c.modular_error(11).unwrap() < 1e-10);
    }

    #[test]
    fn modular_error_matches_monte_carlo() {
        // Outer expectation over x_t ∼ p(x_t) sampled, inner KL closed form.
        let s = sched(20);
        let c = GaussChain::perfect(s, data2())
            .unwrap()
            .inflate_sigma(15, 1.2)
            .unwrap()
            .scale_a(9, 1.05)
            .unwrap();
        let t = 9;
        let pt = c.p_marginal(t).unwrap();
        let post = c.q_posterior_coeffs(t).unwrap();
        let st = c.step(t);
        let n = 100_000;
        let xs = pt.sample(n, &StreamRng::new(11));
        let vals: Vec<f64> = xs
            .chunks(2)
            .map(|x| {
                let x = DVector::from_column_slice(x);
                let p = Gaussian::checked(&st.a * &x + &st.b, st.cov.clone(), false).unwrap();
                let q = Gaussian::checked(&post.a * &x + &post.b, post.cov.clone(), false).unwrap();
                gaussian_kl(&p, &q).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let exact = c.modular_error(t).unwrap();
        assert!(
            (mean - exact).abs() < 3.0 * (var / n as f64).sqrt(),
            "{mean} vs {exact}"
        );
    }

    #[test]
    fn one_dim_cumulative_error_matches_grid_kl() {
        let c = GaussChain::perfect(sched(15), Gaussian::isotropic(vec![0.8], 0.2).unwrap())
            .unwrap()
            .shift_b(6, &[0.1])
            .unwrap();
        let t = 4;
        let p = c.p_marginal(t - 1).unwrap();
        let q = c.q_marginal(t - 1).unwrap();
        let (m, sd) = (p.mean()[0], p.cov()[(0, 0)].sqrt());
        let h = sd * 1e-3;
        let mut acc = 0.0;
        let mut x = m - 12.0 * sd;
        while x < m + 12.0 * sd {
            let lp = p.log_density(&[x]);
            acc += h * lp.exp() * (lp - q.log_density(&[x]));
            x += h;
        }
        assert!((c.cumulative_error(t).unwrap() - acc).abs() < 1e-8);
    }

    #[test]
    fn recursion_terms_close() {
        // T_{t−1} = T_t + E_mod(t) + I_t on perturbed and perfect chains.
        let base = GaussChain::perfect(sched(25), data2()).unwrap();
        let bent = base
            .clone()
            .scale_a(20, 0.9)
            .unwrap()
            .inflate_sigma(7, 1.5)
            .unwrap()
            .shift_b(3, &[0.3, -0.1])
            .unwrap();
        for c in [base, bent] {
            let pm = c.p_marginals().unwrap();
            for t in 1..=25 {
                let t_prev = pm[t - 1].cross_entropy(&c.q_marginal(t - 1).unwrap()).unwrap();
                let t_cur = pm[t].cross_entropy(&c.q_marginal(t).unwrap()).unwrap();
                let r = t_prev - t_cur - c.modular_error(t).unwrap() - c.i_term(t).unwrap();
                assert!(r.abs() < 1e-9, "t={t} residual {r}");
            }
        }
    }

    #[test]
    fn i_term_for_unit_residual() {
        // With C = βI and E‖ε̂‖² = K exactly, I_t = −(K/2) β ᾱ/(1−ᾱ).
        let s = sched(10);
        let t = 6;
        let (al, be, ab) = (s.alpha(t), s.beta(t), s.alpha_bar_at(t));
        let base = GaussChain::perfect(s.clone(), Gaussian::isotropic(vec![0.4], 0.3).unwrap()).unwrap();
        let pt = base.p_marginal(t).unwrap();
        let (pm, pv) = (pt.mean()[0], pt.cov()[(0, 0)]);
        let a = (1.0 - be / ((1.0 - ab) * pv).sqrt()) / al.sqrt();
        let b = (1.0 - al.sqrt() * a) * pm / al.sqrt();
        let c = base
            .perturbed(t, |st| {
                *st = AffineStep::isotropic(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), be);
            })
            .unwrap();
        assert_relative_eq!(c.eps_second_moment_given(t, &pt), 1.0, max_relative = 1e-12);
        assert_relative_eq!(c.i_term(t).unwrap(), -0.5 * be * ab / (1.0 - ab), max_relative = 1e-9);
    }

    #[test]
    fn residual_second_moment_matches_simulation() {
        let s = sched(12);
        let c = GaussChain::perfect(s.clone(), data2())
            .unwrap()
            .scale_a(5, 1.1)
            .unwrap();
        let t = 5;
        let pt = c.p_marginal(t).unwrap();
        let n = 200_000;
        let xs = pt.sample(n, &StreamRng::new(3));
        let st = c.step(t);
        let (ra, be, ab) = (s.alpha(t).sqrt(), s.beta(t), s.alpha_bar_at(t));
        let vals: Vec<f64> = xs
            .chunks(2)
            .map(|x| {
                let x = DVector::from_column_slice(x);
                let mu = &st.a * &x + &st.b;
                let e = (x - mu * ra) * ((1.0 - ab).sqrt() / be);
                e.norm_squared()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let exact = c.eps_second_moment_given(t, &pt);
        assert!((mean - exact).abs() < 4.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn diagonal_mode_high_dim() {
        let k = 16;
        let data = Gaussian::diagonal(
            (0..k).map(|i| i as f64 * 0.1).collect(),
            (0..k).map(|i| 0.2 + 0.05 * i as f64).collect(),
        )
        .unwrap();
        let c = GaussChain::perfect(sched(50), data)
            .unwrap()
            .inflate_sigma(10, 1.1)
            .unwrap();
        let pm = c.p_marginals().unwrap();
        assert!(pm.iter().all(|g| g.is_diagonal()));
        assert!(c.cumulative_error(5).unwrap() > 0.0);
        let dense = GaussChain::perfect(sched(5), data2()).unwrap();
        let scaled = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]);
        assert!(dense.perturbed(2, |s| s.a = &s.a * &scaled).is_ok());
    }

    #[test]
    fn oracle_predictor_reproduces_point_mass() {
        // Point-mass data with the posterior variance schedule: the sampled
        // chain collapses onto the data point and tracks q(x_t) on the way.
        let s = make_linear_schedule(30, 1e-3, 0.3)
            .unwrap()
            .with_sigma_mode(SigmaMode::Posterior);
        let m = vec![1.5, -0.5];
        let eps = GaussianOptimalEps::new(s.clone(), Gaussian::isotropic(m.clone(), 1e-12).unwrap()).unwrap();
        let rec: BTreeSet<usize> = [0, 10].into_iter().collect();
        let n = 50_000;
        let out = sample_chain(
            &eps,
            n,
            &s,
            &StreamRng::new(2),
            &rec,
            DenoiseOptions { noiseless_final: true },
        )
        .unwrap();
        for row in out[&0].rows() {
            assert!((row[0] - m[0]).abs() < 1e-3 && (row[1] - m[1]).abs() < 1e-3);
        }
        let x10 = &out[&10];
        let (mean, cov) = (x10.mean(), x10.covariance());
        let ab = s.alpha_bar_at(10);
        for i in 0..2 {
            assert!((mean[i] - ab.sqrt() * m[i]).abs() < 4.0 * ((1.0 - ab) / n as f64).sqrt());
            assert!((cov[3 * i] - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
        }
    }
}
