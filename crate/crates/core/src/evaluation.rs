//! PSNR and the distributional statistics used by the oracle checks.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Reported PSNR when candidate and reference agree exactly.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Normalization span of `[-1, 1]` data.
pub const DEFAULT_PEAK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub mse: f64,
    pub peak: f64,
    pub exact: bool,
}

pub fn mse(reference: &Grid, candidate: &Grid) -> Result<f64> {
    reference.check_shape(candidate, "psnr reference vs candidate")?;
    let sum: f64 = reference
        .as_slice()
        .iter()
        .zip(candidate.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Grid, candidate: &Grid, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Argument(format!("peak must be positive, got {peak}")));
    }
    let mse = mse(reference, candidate)?;
    let exact = mse == 0.0;
    let db = if exact {
        PSNR_CAP_DB
    } else {
        psnr_from_mse(mse, peak).min(PSNR_CAP_DB)
    };
    Ok(Psnr { db, mse, peak, exact })
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    10.0 * (peak * peak / mse).log10()
}

/// Mean PSNR over a set of pairs plus named extras.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub mse: f64,
    pub peak: f64,
    pub n_samples: usize,
    pub extra: Vec<(String, f64)>,
}

impl MetricReport {
    /// `psnr_db` is the mean of per-pair PSNR values; `mse` is the mean MSE.
    pub fn from_pairs(references: &[Grid], candidates: &[Grid], peak: f64) -> Result<Self> {
        if references.is_empty() || references.len() != candidates.len() {
            return Err(Error::Argument(format!(
                "need equally many references and candidates, got {} and {}",
                references.len(),
                candidates.len()
            )));
        }
        let scores = references
            .iter()
            .zip(candidates)
            .map(|(r, c)| psnr(r, c, peak))
            .collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        Ok(MetricReport {
            psnr_db: scores.iter().map(|p| p.db).sum::<f64>() / n,
            mse: scores.iter().map(|p| p.mse).sum::<f64>() / n,
            peak,
            n_samples: scores.len(),
            extra: Vec::new(),
        })
    }

    pub fn with_extra(mut self, name: &str, value: f64) -> Self {
        self.extra.push((name.to_string(), value));
        self
    }

    pub fn extra(&self, name: &str) -> Option<f64> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// `name,value` lines, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("psnr_db,{}\n", self.psnr_db));
        out.push_str(&format!("mse,{}\n", self.mse));
        out.push_str(&format!("peak,{}\n", self.peak));
        out.push_str(&format!("n_samples,{}\n", self.n_samples));
        for (name, value) in &self.extra {
            out.push_str(&format!("{name},{value}\n"));
        }
        out
    }
}

/// Sample mean and unbiased covariance.
pub fn sample_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if samples.len() < 2 {
        return Err(Error::Argument(format!(
            "moments need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Dimension("samples have different lengths".into()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n - 1.0);
    Ok((mean, cov))
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `samples` and `cdf`.
/// The samples need not be sorted.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("KS distance needs at least one sample".into()));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::Argument("KS samples contain NaN".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d.min(1.0))
}

/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn effective_sqrt_n(n: usize) -> f64 {
    let rn = (n as f64).sqrt();
    rn + 0.12 + 0.11 / rn
}

/// Asymptotic one-sample KS p-value with Stephens' small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    kolmogorov_survival(effective_sqrt_n(n) * d)
}

/// Largest distance still accepted at significance `alpha`.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 5.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) / effective_sqrt_n(n)
}
