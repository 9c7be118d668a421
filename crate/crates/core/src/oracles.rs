//! Closed-form scores for Gaussians, Gaussian mixtures and the bivariate
//! joint Gaussian used as a conditional-generation testbed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest dimension accepted by the mixture oracle.
pub const MAX_ORACLE_DIM: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn to_matrix(cov: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension(format!("covariance must be {d}x{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| cov[i][j]))
}

/// Score of `N(mean, cov)` at `x`, `-cov^{-1} (x - mean)`.
pub fn gaussian_score(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = x.len();
    if mean.len() != d {
        return Err(Error::Dimension(format!("x has {d} entries, mean {}", mean.len())));
    }
    let chol = to_matrix(cov, d)?
        .cholesky()
        .ok_or_else(|| Error::Decomposition("covariance is not positive definite".into()))?;
    let diff = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    Ok(chol.solve(&diff).iter().map(|v| -v).collect())
}

/// One mixture component kept in its eigenbasis, so that adding `sigma^2 I`
/// only shifts the eigenvalues.
#[derive(Debug, Clone, PartialEq)]
struct Component {
    mean: Vec<f64>,
    eigvals: Vec<f64>,
    /// Column-major eigenvectors.
    eigvecs: DMatrix<f64>,
}

impl Component {
    /// `(log N(x; mean, cov + sigma^2 I), score)`.
    fn eval(&self, x: &[f64], sigma: f64) -> (f64, Vec<f64>) {
        let d = x.len();
        let s2 = sigma * sigma;
        let mut y = vec![0.0; d];
        for (k, yk) in y.iter_mut().enumerate() {
            *yk = (0..d).map(|i| self.eigvecs[(i, k)] * (x[i] - self.mean[i])).sum();
        }
        let mut logp = -0.5 * d as f64 * LN_2PI;
        for (yk, lam) in y.iter_mut().zip(&self.eigvals) {
            let v = lam + s2;
            logp -= 0.5 * (*yk * *yk / v + v.ln());
            *yk /= v;
        }
        let score = (0..d)
            .map(|i| -(0..d).map(|k| self.eigvecs[(i, k)] * y[k]).sum::<f64>())
            .collect();
        (logp, score)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Component>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covariances.len() {
            return Err(Error::Validation(format!(
                "mixture needs matching non-empty lists: {} weights, {} means, {} covariances",
                weights.len(),
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Validation("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 || dim > MAX_ORACLE_DIM {
            return Err(Error::Validation(format!(
                "oracle dimension must be in 1..={MAX_ORACLE_DIM}, got {dim}"
            )));
        }
        let mut components = Vec::with_capacity(means.len());
        for (k, (mean, cov)) in means.into_iter().zip(&covariances).enumerate() {
            if mean.len() != dim {
                return Err(Error::Dimension(format!("component {k} mean has wrong length")));
            }
            let m = to_matrix(cov, dim)?;
            if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
                return Err(Error::Validation(format!("covariance {k} is not symmetric")));
            }
            if m.clone().cholesky().is_none() {
                return Err(Error::Validation(format!("covariance {k} is not positive definite")));
            }
            let eig = SymmetricEigen::new(m);
            components.push(Component {
                mean,
                eigvals: eig.eigenvalues.iter().copied().collect(),
                eigvecs: eig.eigenvectors,
            });
        }
        Ok(GaussianMixture {
            weights,
            components,
            dim,
        })
    }

    /// Scalar mixture from means and variances.
    pub fn one_d(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        GaussianMixture::new(
            weights,
            means.into_iter().map(|m| vec![m]).collect(),
            variances.into_iter().map(|v| vec![vec![v]]).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    fn check(&self, x: &[f64], sigma: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "mixture is {}-dimensional, point has {} entries",
                self.dim,
                x.len()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::Domain(format!("noise level must be >= 0, got {sigma}")));
        }
        Ok(())
    }

    /// Log density of the mixture convolved with `N(0, sigma^2 I)`.
    pub fn perturbed_log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check(x, sigma)?;
        let logs: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w.ln() + c.eval(x, sigma).0)
            .collect();
        Ok(log_sum_exp(&logs))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.perturbed_log_density(x, 0.0)
    }

    /// Score of the perturbed mixture: responsibility-weighted component
    /// scores with covariances `Sigma_k + sigma^2 I`.
    pub fn perturbed_score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check(x, sigma)?;
        let evals: Vec<(f64, Vec<f64>)> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let (lp, s) = c.eval(x, sigma);
                (w.ln() + lp, s)
            })
            .collect();
        let logs: Vec<f64> = evals.iter().map(|e| e.0).collect();
        let norm = log_sum_exp(&logs);
        let mut out = vec![0.0; self.dim];
        for (lp, s) in &evals {
            let r = (lp - norm).exp();
            for (o, si) in out.iter_mut().zip(s) {
                *o += r * si;
            }
        }
        Ok(out)
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.perturbed_score(x, 0.0)
    }

    /// CDF of a one-dimensional perturbed mixture.
    pub fn cdf_1d(&self, x: f64, sigma: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::Dimension("cdf_1d needs a one-dimensional mixture".into()));
        }
        self.check(&[x], sigma)?;
        let mut total = 0.0;
        for (c, w) in self.components.iter().zip(&self.weights) {
            let sd = (c.eigvals[0] + sigma * sigma).sqrt();
            let n = Normal::new(c.mean[0], sd).map_err(|e| Error::Validation(e.to_string()))?;
            total += w * n.cdf(x);
        }
        Ok(total.min(1.0))
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Bivariate Gaussian over `(target, guide)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointGaussian {
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

impl JointGaussian {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        if mean.iter().chain(cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("joint Gaussian entries must be finite".into()));
        }
        if cov[0][1] != cov[1][0] {
            return Err(Error::Validation("joint covariance is not symmetric".into()));
        }
        if !(cov[0][0] > 0.0 && cov[1][1] > 0.0) {
            return Err(Error::Validation("joint variances must be positive".into()));
        }
        let jg = JointGaussian { mean, cov };
        if !(jg.rho().abs() < 1.0) {
            return Err(Error::Validation(format!("|rho| must be < 1, got {}", jg.rho())));
        }
        Ok(jg)
    }

    /// Zero-mean, unit-variance pair with correlation `rho`.
    pub fn standard(rho: f64) -> Result<Self> {
        JointGaussian::new([0.0, 0.0], [[1.0, rho], [rho, 1.0]])
    }

    pub fn mean(&self) -> [f64; 2] {
        self.mean
    }

    pub fn cov(&self) -> [[f64; 2]; 2] {
        self.cov
    }

    pub fn sigma_target(&self) -> f64 {
        self.cov[0][0].sqrt()
    }

    pub fn sigma_guide(&self) -> f64 {
        self.cov[1][1].sqrt()
    }

    pub fn rho(&self) -> f64 {
        self.cov[0][1] / (self.sigma_target() * self.sigma_guide())
    }

    /// `(mean, variance)` of the target given the guide value.
    pub fn conditional_gaussian(&self, guide_value: f64) -> (f64, f64) {
        let rho = self.rho();
        let (st, sg) = (self.sigma_target(), self.sigma_guide());
        let mean = self.mean[0] + rho * (st / sg) * (guide_value - self.mean[1]);
        (mean, st * st * (1.0 - rho * rho))
    }

    /// Log density of `(x_target, guide)` when only the target has been
    /// perturbed with noise of standard deviation `sigma`.
    pub fn joint_perturbed_log_density(&self, x_target: f64, guide_value: f64, sigma: f64) -> f64 {
        let a = self.cov[0][0] + sigma * sigma;
        let (b, c) = (self.cov[0][1], self.cov[1][1]);
        let det = a * c - b * b;
        let (u, v) = (x_target - self.mean[0], guide_value - self.mean[1]);
        -LN_2PI - 0.5 * det.ln() - 0.5 * (c * u * u - 2.0 * b * u * v + a * v * v) / det
    }

    /// Log density of the noisy target given the clean guide.
    pub fn conditional_perturbed_log_density(&self, x_target: f64, guide_value: f64, sigma: f64) -> f64 {
        let (m, var) = self.conditional_gaussian(guide_value);
        let v = var + sigma * sigma;
        -0.5 * ((x_target - m).powi(2) / v + v.ln() + LN_2PI)
    }

    /// Target derivative of the joint perturbed log density, computed from
    /// the inverse of the inflated 2x2 covariance.
    pub fn joint_perturbed_score(&self, x_target: f64, guide_value: f64, sigma: f64) -> f64 {
        let a = self.cov[0][0] + sigma * sigma;
        let (b, c) = (self.cov[0][1], self.cov[1][1]);
        let det = a * c - b * b;
        let (u, v) = (x_target - self.mean[0], guide_value - self.mean[1]);
        -(c * u - b * v) / det
    }

    /// The same score through the conditional: `-(x - m) / (var + sigma^2)`.
    pub fn conditional_perturbed_score(&self, x_target: f64, guide_value: f64, sigma: f64) -> f64 {
        let (m, var) = self.conditional_gaussian(guide_value);
        -(x_target - m) / (var + sigma * sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-5 * (1.0 + x[i].abs());
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        (0..d).map(|k| a[i][k] * a[j][k]).sum::<f64>() + if i == j { 0.3 } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    fn bimodal() -> GaussianMixture {
        GaussianMixture::one_d(vec![0.5, 0.5], vec![-2.0, 2.0], vec![0.25, 0.25]).unwrap()
    }

    #[test]
    fn gaussian_score_examples() {
        let cov = vec![vec![2.0, 0.3], vec![0.3, 1.0]];
        assert_eq!(gaussian_score(&[1.0, -1.0], &[1.0, -1.0], &cov).unwrap(), vec![0.0, 0.0]);
        assert_eq!(gaussian_score(&[2.0], &[0.0], &[vec![1.0]]).unwrap(), vec![-2.0]);
        let singular = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(
            gaussian_score(&[0.0, 0.0], &[0.0, 0.0], &singular),
            Err(Error::Decomposition(_))
        ));
    }

    #[test]
    fn gaussian_score_matches_log_density_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = rng.random_range(1..=4);
            let cov = random_spd(d, &mut rng);
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = GaussianMixture::new(vec![1.0], vec![mean.clone()], vec![cov.clone()]).unwrap();
            let fd = fd_grad(|p| g.log_density(p).unwrap(), &x);
            let s = gaussian_score(&x, &mean, &cov).unwrap();
            assert!(rel_err(&s, &fd) < 1e-6);
            assert!(rel_err(&g.score(&x).unwrap(), &s) < 1e-10);
        }
    }

    #[test]
    fn single_component_is_inflated_gaussian() {
        let cov = vec![vec![1.5, -0.4], vec![-0.4, 0.8]];
        let g = GaussianMixture::new(vec![1.0], vec![vec![0.5, 1.0]], vec![cov.clone()]).unwrap();
        let sigma = 0.7;
        let inflated = vec![vec![1.5 + 0.49, -0.4], vec![-0.4, 0.8 + 0.49]];
        let x = [2.0, -1.0];
        let a = g.perturbed_score(&x, sigma).unwrap();
        let b = gaussian_score(&x, &[0.5, 1.0], &inflated).unwrap();
        assert!(rel_err(&a, &b) < 1e-12);
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_origin() {
        for sigma in [0.0, 0.3, 5.0] {
            assert!(bimodal().perturbed_score(&[0.0], sigma).unwrap()[0].abs() < 1e-15);
        }
    }

    #[test]
    fn bimodal_example_matches_finite_differences() {
        let g = bimodal();
        let s = g.perturbed_score(&[1.0], 1.0).unwrap();
        let fd = fd_grad(|p| g.perturbed_log_density(p, 1.0).unwrap(), &[1.0]);
        assert!(rel_err(&s, &fd) < 1e-6);
    }

    #[test]
    fn mixture_scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let d = rng.random_range(1..=3);
            let k = rng.random_range(1..=4);
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let rest: f64 = weights[1..].iter().sum();
            weights[0] = 1.0 - rest;
            let means = (0..k).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let covs = (0..k).map(|_| random_spd(d, &mut rng)).collect();
            let g = GaussianMixture::new(weights, means, covs).unwrap();
            let sigma = rng.random_range(0.0..3.0);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            let s = g.perturbed_score(&x, sigma).unwrap();
            let fd = fd_grad(|p| g.perturbed_log_density(p, sigma).unwrap(), &x);
            assert!(rel_err(&s, &fd) < 1e-6, "rel {}", rel_err(&s, &fd));
        }
    }

    #[test]
    fn far_points_do_not_underflow() {
        let s = bimodal().score(&[60.0]).unwrap()[0];
        assert_relative_eq!(s, -(60.0 - 2.0) / 0.25, max_relative = 1e-12);
        assert!(bimodal().perturbed_log_density(&[1e3], 0.0).unwrap().is_finite());
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::one_d(vec![0.5, 0.4], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::one_d(vec![1.0], vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0; 9]], vec![vec![vec![0.0; 9]; 9]]).is_err());
        assert!(matches!(bimodal().perturbed_score(&[0.0, 1.0], 1.0), Err(Error::Dimension(_))));
        assert!(bimodal().perturbed_score(&[0.0], -1.0).is_err());
    }

    #[test]
    fn cdf_endpoints_and_symmetry() {
        let g = bimodal();
        assert_relative_eq!(g.cdf_1d(0.0, 0.0).unwrap(), 0.5, epsilon = 1e-15);
        assert!(g.cdf_1d(-20.0, 0.5).unwrap() < 1e-12);
        assert!(g.cdf_1d(20.0, 0.5).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn conditional_examples() {
        let jg = JointGaussian::new([1.0, -2.0], [[4.0, 0.0], [0.0, 9.0]]).unwrap();
        assert_eq!(jg.conditional_gaussian(5.0), (1.0, 4.0));
        let (m, v) = JointGaussian::standard(0.8).unwrap().conditional_gaussian(1.0);
        assert_relative_eq!(m, 0.8, epsilon = 1e-15);
        assert_relative_eq!(v, 0.36, epsilon = 1e-15);
        let jg = JointGaussian::new([0.3, 1.5], [[2.0, -0.9], [-0.9, 0.7]]).unwrap();
        assert_relative_eq!(jg.conditional_gaussian(1.5).0, 0.3, epsilon = 1e-15);
        assert!(JointGaussian::standard(1.0).is_err());
        assert!(JointGaussian::new([0.0, 0.0], [[1.0, 0.2], [0.3, 1.0]]).is_err());
    }

    #[test]
    fn joint_score_at_conditional_mean_is_zero() {
        let jg = JointGaussian::standard(0.8).unwrap();
        assert!(jg.joint_perturbed_score(0.8, 1.0, 0.0).abs() < 1e-15);
    }

    #[test]
    fn joint_score_large_sigma_asymptotics() {
        let jg = JointGaussian::new([0.0, 0.5], [[1.3, 0.6], [0.6, 0.9]]).unwrap();
        let sigma = 1e3;
        for x in [-2.0, 0.7, 3.0] {
            let s = jg.joint_perturbed_score(x, 0.5, sigma);
            // quadratic in x, so a wide central difference is exact up to rounding
            let h = 1.0;
            let fd = (jg.joint_perturbed_log_density(x + h, 0.5, sigma)
                - jg.joint_perturbed_log_density(x - h, 0.5, sigma))
                / (2.0 * h);
            assert_relative_eq!(s, fd, max_relative = 1e-6);
            assert_relative_eq!(s, -x / (sigma * sigma), max_relative = 1e-5);
        }
    }

    #[test]
    fn joint_score_matches_both_densities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let st: f64 = rng.random_range(0.3..2.0);
            let sg: f64 = rng.random_range(0.3..2.0);
            let rho = rng.random_range(-0.95..0.95);
            let jg = JointGaussian::new(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                [[st * st, rho * st * sg], [rho * st * sg, sg * sg]],
            )
            .unwrap();
            let (x, g, sigma) = (rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..5.0));
            let s = jg.joint_perturbed_score(x, g, sigma);
            let fd_joint = fd_grad(|p| jg.joint_perturbed_log_density(p[0], g, sigma), &[x])[0];
            let fd_cond = fd_grad(|p| jg.conditional_perturbed_log_density(p[0], g, sigma), &[x])[0];
            assert!(rel_err(&[s], &[fd_joint]) < 1e-6);
            assert!(rel_err(&[s], &[fd_cond]) < 1e-6);
            assert!(rel_err(&[s], &[jg.conditional_perturbed_score(x, g, sigma)]) < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn zero_noise_is_the_clean_score(x in -5.0f64..5.0) {
            let g = bimodal();
            prop_assert_eq!(g.perturbed_score(&[x], 0.0).unwrap(), g.score(&[x]).unwrap());
        }

        #[test]
        fn cdf_is_monotone(a in -6.0f64..6.0, b in -6.0f64..6.0, sigma in 0.0f64..3.0) {
            let g = bimodal();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(g.cdf_1d(lo, sigma).unwrap() <= g.cdf_1d(hi, sigma).unwrap());
        }
    }
}
