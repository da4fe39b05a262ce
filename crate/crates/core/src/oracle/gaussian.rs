use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Largest dimension for which dense covariances are accepted.
pub const MAX_FULL_DIM: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate normal with an SPD covariance. Diagonal-mode Gaussians keep
/// their covariance diagonal through every chain operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    diag: bool,
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotSpd(what.to_string()))
}

pub(crate) fn logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if k > MAX_FULL_DIM {
            return Err(Error::Invalid(format!(
                "dense covariance limited to K <= {MAX_FULL_DIM}; use diagonal mode for K = {k}"
            )));
        }
        Self::checked(DVector::from_vec(mean), cov, false)
    }

    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: var.len(),
            });
        }
        let cov = DMatrix::from_diagonal(&DVector::from_vec(var));
        Self::checked(DVector::from_vec(mean), cov, true)
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let k = mean.len();
        Self::diagonal(mean, vec![var; k])
    }

    pub fn standard(k: usize) -> Self {
        Gaussian {
            mean: DVector::zeros(k),
            cov: DMatrix::identity(k, k),
            diag: true,
        }
    }

    pub(crate) fn checked(mean: DVector<f64>, cov: DMatrix<f64>, diag: bool) -> Result<Self> {
        let k = mean.len();
        if k == 0 {
            return Err(Error::Invalid("zero-dimensional Gaussian".into()));
        }
        if cov.nrows() != k || cov.ncols() != k {
            return Err(Error::Dimension {
                expected: k,
                got: cov.nrows(),
            });
        }
        let scale = cov.amax().max(1.0);
        for i in 0..k {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotSpd(format!("covariance not symmetric at ({i}, {j})")));
                }
                if diag && (cov[(i, j)] != 0.0 || cov[(j, i)] != 0.0) {
                    return Err(Error::Invalid("off-diagonal entry in diagonal-mode covariance".into()));
                }
            }
        }
        cholesky(&cov, "covariance")?;
        Ok(Gaussian { mean, cov, diag })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn is_diagonal(&self) -> bool {
        self.diag
    }

    pub fn log_det(&self) -> f64 {
        if self.diag {
            self.cov.diagonal().iter().map(|v| v.ln()).sum()
        } else {
            logdet(&cholesky(&self.cov, "covariance").expect("checked at construction"))
        }
    }

    /// Differential entropy `½ ln((2πe)^K det Σ)`.
    pub fn entropy(&self) -> f64 {
        0.5 * (self.dim() as f64 * (LN_2PI + 1.0) + self.log_det())
    }

    /// `E_{x∼self}[−ln other(x)]`.
    pub fn cross_entropy(&self, other: &Gaussian) -> Result<f64> {
        check_dims(self, other)?;
        let c = cholesky(&other.cov, "covariance")?;
        let d = &self.mean - &other.mean;
        let tr = (c.solve(&self.cov)).trace();
        let quad = d.dot(&c.solve(&d));
        Ok(0.5 * (self.dim() as f64 * LN_2PI + logdet(&c) + tr + quad))
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let c = cholesky(&self.cov, "covariance").expect("checked at construction");
        let d = DVector::from_column_slice(x) - &self.mean;
        -0.5 * (self.dim() as f64 * LN_2PI + logdet(&c) + d.dot(&c.solve(&d)))
    }

    /// `n` draws, row-major, from per-row streams of `rng`.
    pub fn sample(&self, n: usize, rng: &StreamRng) -> Vec<f64> {
        let k = self.dim();
        let l = cholesky(&self.cov, "covariance")
            .expect("checked at construction")
            .unpack();
        let mut out = vec![0.0; n * k];
        crate::par::for_each_row_mut(&mut out, k, |i, row| {
            let mut z = vec![0.0; k];
            rng.fill_normal(i as u64, &mut z);
            for r in 0..k {
                let mut v = self.mean[r];
                for c in 0..=r {
                    v += l[(r, c)] * z[c];
                }
                row[r] = v;
            }
        });
        out
    }
}

fn check_dims(a: &Gaussian, b: &Gaussian) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// `KL(p ‖ q) = ½[tr(Σq⁻¹Σp) + (μq−μp)ᵀΣq⁻¹(μq−μp) − K + ln det Σq − ln det Σp]`,
/// clamped at 0 against rounding.
pub fn gaussian_kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    check_dims(p, q)?;
    let kl = p.cross_entropy(q)? - p.entropy();
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn g1(m: f64, v: f64) -> Gaussian {
        Gaussian::isotropic(vec![m], v).unwrap()
    }

    /// Adaptive Simpson on [a, b].
    fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    #[test]
    fn kl_basics() {
        assert_eq!(gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap(), 0.0);
        assert_relative_eq!(
            gaussian_kl(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap(),
            0.5,
            max_relative = 1e-14
        );
        let s2: f64 = 2.5;
        assert_relative_eq!(
            gaussian_kl(&g1(0.7, s2), &g1(0.0, 1.0)).unwrap(),
            0.5 * (0.49 + s2 - 1.0 - s2.ln()),
            max_relative = 1e-13
        );
        assert!(gaussian_kl(&g1(0.0, 1.0), &Gaussian::standard(2)).is_err());
    }

    #[test]
    fn kl_matches_quadrature() {
        for (mp, vp, mq, vq) in [
            (0.0, 1.0, 0.5, 2.0),
            (1.2, 0.3, -0.4, 0.9),
            (0.0, 4.0, 0.0, 1.0),
            (2.0, 0.05, 1.9, 0.07),
        ] {
            let (p, q) = (g1(mp, vp), g1(mq, vq));
            let sd = f64::sqrt(vp);
            let f = |x: f64| {
                let lp = p.log_density(&[x]);
                lp.exp() * (lp - q.log_density(&[x]))
            };
            let quad = integrate(&f, mp - 14.0 * sd, mp + 14.0 * sd, 1e-13);
            assert!(
                (gaussian_kl(&p, &q).unwrap() - quad).abs() < 1e-8,
                "{mp} {vp} {mq} {vq}"
            );
        }
    }

    #[test]
    fn entropy_and_cross_entropy() {
        let p = Gaussian::new(vec![0.3, -1.0], DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        assert_relative_eq!(p.cross_entropy(&p).unwrap(), p.entropy(), max_relative = 1e-13);
        assert_relative_eq!(g1(0.0, 1.0).entropy(), 0.5 * (LN_2PI + 1.0), max_relative = 1e-15);
        let q = Gaussian::standard(2);
        let kl = gaussian_kl(&p, &q).unwrap();
        let by_hand = 0.5 * (3.0 + 1.09 - 2.0 - (1.75f64).ln());
        assert_relative_eq!(kl, by_hand, max_relative = 1e-13);
    }

    #[test]
    fn construction_checks() {
        assert!(Gaussian::new(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(Gaussian::new(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])).is_err());
        assert!(Gaussian::new(vec![0.0; 9], DMatrix::identity(9, 9)).is_err());
        assert!(Gaussian::diagonal(vec![0.0; 20], vec![1.0; 20]).is_ok());
        assert!(Gaussian::diagonal(vec![0.0; 2], vec![1.0, -1.0]).is_err());
        assert!(Gaussian::isotropic(vec![], 1.0).is_err());
    }

    #[test]
    fn sample_moments() {
        let p = Gaussian::new(vec![1.0, -2.0], DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5])).unwrap();
        let n = 200_000;
        let xs = p.sample(n, &StreamRng::new(4));
        let b = crate::batch::Batch::new(xs, 2, 0, crate::batch::Origin::Data).unwrap();
        let (m, c) = (b.mean(), b.covariance());
        assert!((m[0] - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        assert!((m[1] + 2.0).abs() < 4.0 * (0.5 / n as f64).sqrt());
        assert!((c[1] - 0.6).abs() < 0.02 && (c[0] - 2.0).abs() < 0.04);
    }
}
