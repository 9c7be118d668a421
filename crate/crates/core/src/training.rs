//! Denoising score matching and the Adam training loop.
//!
//! Per sample: `t ~ U[t_epsilon, 1]`, `z ~ N(0, I)`, the target channel is
//! perturbed to `x_t = x0 + sigma(t) z` (guide untouched) and the loss is
//! `0.5 * |sigma(t) * s(X_t, sigma(t)) + z|^2`, averaged over the batch.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::joint::JointState;
use crate::network::ScoreNetwork;
use crate::schedule::NoiseSchedule;
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_iters: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// `0` disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Lower end of the `t` sampling interval.
    pub t_epsilon: f64,
    pub divergence_threshold: f64,
    /// Number of equal-width `t` buckets used for per-sigma loss reporting.
    pub sigma_buckets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            num_iters: 2000,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            t_epsilon: 1e-5,
            divergence_threshold: 1e6,
            sigma_buckets: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if !(self.t_epsilon > 0.0 && self.t_epsilon < 1.0) {
            return fail(format!("t_epsilon must lie in (0, 1), got {}", self.t_epsilon));
        }
        if !(self.divergence_threshold > 0.0) {
            return fail("divergence_threshold must be positive".into());
        }
        if self.sigma_buckets == 0 {
            return fail("sigma_buckets must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketLoss {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub loss: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    /// Non-empty buckets only.
    pub sigma_bucket_losses: Vec<BucketLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub t: f64,
    pub sigma: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct DsmOutcome {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub samples: Vec<SampleLoss>,
}

/// Loss `0.5 * |sigma * score + z|^2` for one sample and its derivative
/// with respect to the score.
pub fn dsm_sample_loss(score: &Grid, sigma: f64, z: &Grid) -> Result<(f64, Grid)> {
    score.check_shape(z, "dsm residual")?;
    let residual: Vec<f64> = score
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .map(|(s, z)| sigma * s + z)
        .collect();
    let loss = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
    let dscore = residual.iter().map(|r| sigma * r).collect();
    Ok((loss, Grid::new(score.height(), score.width(), dscore)?))
}

/// Batch DSM loss and its gradient. Sample `i` draws `(t, z)` from ChaCha
/// stream `i + 1` under `rng_seed`; the gradient is reduced in index order.
pub fn dsm_loss(
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    batch: &[&JointState],
    rng_seed: u64,
    t_epsilon: f64,
) -> Result<DsmOutcome> {
    dsm_loss_with(net, net.parameters(), schedule, batch, rng_seed, t_epsilon)
}

pub(crate) fn dsm_loss_with(
    net: &ScoreNetwork,
    theta: &[f64],
    schedule: &NoiseSchedule,
    batch: &[&JointState],
    rng_seed: u64,
    t_epsilon: f64,
) -> Result<DsmOutcome> {
    if batch.is_empty() {
        return Err(Error::Argument("DSM loss needs a non-empty batch".into()));
    }
    if let Some(i) = batch.iter().position(|s| !s.time().is_clean()) {
        return Err(Error::Argument(format!("batch item {i} is not a clean (t = 0) state")));
    }
    let scale = 1.0 / batch.len() as f64;
    let per_sample: Vec<Result<(SampleLoss, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, state)| {
            let mut rng = seeding::stream_rng(rng_seed, i as u64 + 1);
            let t = rng.random_range(t_epsilon..=1.0);
            let (h, w) = state.target().shape();
            let z = Grid::standard_normal(h, w, &mut rng);
            let sigma = schedule.sigma_at(t)?;
            let noisy = state.perturb(schedule, t, &z)?;
            let rec = net.record_with(theta, &noisy, sigma)?;
            let (loss, dscore) = dsm_sample_loss(&rec.score()?, sigma, &z)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { sigma });
            }
            let seed = dscore.map(|d| d * scale);
            let grad = net.backward_with(theta, &rec, &seed)?;
            Ok((SampleLoss { t, sigma, loss }, grad))
        })
        .collect();

    let mut gradient = vec![0.0; theta.len()];
    let mut samples = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for item in per_sample {
        let (sample, grad) = item?;
        total += sample.loss;
        samples.push(sample);
        for (acc, g) in gradient.iter_mut().zip(&grad) {
            *acc += g;
        }
    }
    Ok(DsmOutcome {
        loss: total * scale,
        gradient,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grad.len() != theta.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "adam: theta {}, grad {}, moments {}/{}",
            theta.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

fn bucket_losses(
    schedule: &NoiseSchedule,
    samples: &[SampleLoss],
    buckets: usize,
) -> Result<Vec<BucketLoss>> {
    let mut sums = vec![(0.0, 0usize); buckets];
    for s in samples {
        let k = ((s.t * buckets as f64) as usize).min(buckets - 1);
        sums[k].0 += s.loss;
        sums[k].1 += 1;
    }
    let mut out = Vec::new();
    for (k, (sum, count)) in sums.into_iter().enumerate() {
        if count == 0 {
            continue;
        }
        out.push(BucketLoss {
            sigma_lo: schedule.sigma_at(k as f64 / buckets as f64)?,
            sigma_hi: schedule.sigma_at((k + 1) as f64 / buckets as f64)?,
            loss: sum / count as f64,
            count,
        });
    }
    Ok(out)
}

/// Receives per-iteration records and periodic checkpoints.
pub trait TrainHooks {
    fn on_record(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iter: usize, _net: &ScoreNetwork, _adam: &AdamState) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Optimizer state for continuing a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumePoint {
    pub completed_iters: usize,
    pub adam: AdamState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNetwork,
    pub adam: AdamState,
    pub records: Vec<LossRecord>,
}

/// Trains until `cfg.num_iters` iterations have completed in total.
///
/// Iteration `k` draws everything from seeds derived from `(cfg.seed, k)`,
/// so a resumed run follows the same path as an uninterrupted one.
pub fn train(
    mut net: ScoreNetwork,
    schedule: &NoiseSchedule,
    dataset: &[JointState],
    cfg: &TrainConfig,
    resume: Option<ResumePoint>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training dataset is empty".into()));
    }
    let (start, mut adam) = match resume {
        Some(r) => (r.completed_iters, r.adam),
        None => (0, AdamState::new(net.param_count())),
    };
    let mut records = Vec::with_capacity(cfg.num_iters.saturating_sub(start));
    for it in start..cfg.num_iters {
        let iter_seed = seeding::index_seed(cfg.seed, it as u64);
        let mut pick = seeding::stream_rng(iter_seed, 0);
        let batch: Vec<&JointState> = (0..cfg.batch_size)
            .map(|_| &dataset[pick.random_range(0..dataset.len())])
            .collect();
        let out = dsm_loss(&net, schedule, &batch, iter_seed, cfg.t_epsilon)?;
        let iter = it + 1;
        if out.loss > cfg.divergence_threshold {
            return Err(Error::Divergence {
                iter,
                loss: out.loss,
                threshold: cfg.divergence_threshold,
            });
        }
        adam_step(net.parameters_mut(), &out.gradient, &mut adam, cfg)?;
        let record = LossRecord {
            iter,
            loss: out.loss,
            sigma_bucket_losses: bucket_losses(schedule, &out.samples, cfg.sigma_buckets)?,
        };
        hooks.on_record(&record)?;
        records.push(record);
        if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 {
            hooks.on_checkpoint(iter, &net, &adam)?;
        }
    }
    Ok(TrainOutcome { net, adam, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::{dense_spec, unet_spec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(0.01, 50.0, 1000).unwrap()
    }

    #[test]
    fn exact_minimizer_has_zero_loss() {
        let z = Grid::from_vec(vec![0.3, -1.1, 2.0]).unwrap();
        let sigma = 0.7;
        let score = z.map(|v| -v / sigma);
        let (loss, d) = dsm_sample_loss(&score, sigma, &z).unwrap();
        assert!(loss.abs() < 1e-30);
        assert!(d.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn scalar_hand_value() {
        let (loss, _) = dsm_sample_loss(&Grid::scalar(0.0), 2.0, &Grid::scalar(0.5)).unwrap();
        assert_eq!(loss, 0.125);
    }

    #[test]
    fn zero_network_loss_is_half_dimension() {
        // E|z|^2 = d, so a zero score gives d/2 on average.
        let d = 4;
        let net = ScoreNetwork::init(dense_spec(d, vec![8], false), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let state = JointState::new(Grid::zeros(1, d), Grid::zeros(1, d)).unwrap();
        let n = 10_000;
        let batch: Vec<&JointState> = vec![&state; n];
        let out = dsm_loss(&net, &sched(), &batch, 123, 1e-5).unwrap();
        let expected = d as f64 / 2.0;
        // per-sample loss is chi^2_d / 2 with variance d/2
        let tol = 3.0 * (d as f64 / 2.0).sqrt() / (n as f64).sqrt();
        assert!((out.loss - expected).abs() < tol, "loss {} vs {expected}", out.loss);
        assert!(out.gradient.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn empty_and_unclean_batches_rejected() {
        let net = ScoreNetwork::init(dense_spec(1, vec![4], false), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(matches!(
            dsm_loss(&net, &sched(), &[], 0, 1e-5),
            Err(Error::Argument(_))
        ));
        let noisy = JointState::new(Grid::scalar(0.0), Grid::scalar(0.0))
            .unwrap()
            .perturb(&sched(), 0.5, &Grid::scalar(1.0))
            .unwrap();
        assert!(matches!(
            dsm_loss(&net, &sched(), &[&noisy], 0, 1e-5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let mut net = ScoreNetwork::init(unet_spec(4, vec![2, 3]), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in net.parameters_mut() {
            *p = rng.random_range(-0.4..0.4);
        }
        let states: Vec<JointState> = (0..3)
            .map(|_| {
                JointState::new(
                    Grid::standard_normal(4, 4, &mut rng).map(|v| v.tanh()),
                    Grid::standard_normal(4, 4, &mut rng).map(|v| v.tanh()),
                )
                .unwrap()
            })
            .collect();
        let batch: Vec<&JointState> = states.iter().collect();
        let s = sched();
        let out = dsm_loss(&net, &s, &batch, 77, 1e-5).unwrap();
        let mut theta = net.parameters().to_vec();
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..theta.len() {
            let orig = theta[k];
            let h = 1e-6 * (1.0 + orig.abs());
            theta[k] = orig + h;
            let p = dsm_loss_with(&net, &theta, &s, &batch, 77, 1e-5).unwrap().loss;
            theta[k] = orig - h;
            let m = dsm_loss_with(&net, &theta, &s, &batch, 77, 1e-5).unwrap().loss;
            theta[k] = orig;
            let fd = (p - m) / (2.0 * h);
            num += (fd - out.gradient[k]).powi(2);
            den += fd * fd;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig::default();
        let mut theta = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3);
        adam_step(&mut theta, &[0.0; 3], &mut st, &cfg).unwrap();
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);

        // first step: m_hat = g, v_hat = g^2 => delta = -lr * g / (|g| + eps)
        let mut theta = vec![0.0; 4];
        let g = [3.0, -0.2, 1e-3, 3.0];
        let mut st = AdamState::new(4);
        adam_step(&mut theta, &g, &mut st, &cfg).unwrap();
        for (t, gi) in theta.iter().zip(g) {
            let expected = -cfg.learning_rate * gi / (gi.abs() + cfg.adam_eps);
            assert_relative_eq!(*t, expected, max_relative = 1e-12);
            assert_relative_eq!(t.abs(), cfg.learning_rate, max_relative = 1e-4);
        }
        // identical gradients, identical updates
        assert_eq!(theta[0], theta[3]);

        let mut st = AdamState::new(2);
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut st, &cfg).is_err());
    }

    #[test]
    fn bucket_losses_average_to_total() {
        let s = sched();
        let samples: Vec<SampleLoss> = (0..37)
            .map(|i| {
                let t = (i as f64 * 0.618).fract();
                SampleLoss {
                    t,
                    sigma: s.sigma_at(t).unwrap(),
                    loss: 1.0 + (i as f64).sin(),
                }
            })
            .collect();
        let buckets = bucket_losses(&s, &samples, 4).unwrap();
        let total: f64 = samples.iter().map(|x| x.loss).sum::<f64>() / samples.len() as f64;
        let weighted: f64 = buckets.iter().map(|b| b.loss * b.count as f64).sum::<f64>()
            / buckets.iter().map(|b| b.count).sum::<usize>() as f64;
        assert_relative_eq!(weighted, total, max_relative = 1e-12);
        assert_eq!(buckets[0].sigma_lo, 0.01);
        assert_eq!(buckets.last().unwrap().sigma_hi, 50.0);
    }

    fn toy_dataset(n: usize) -> Vec<JointState> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|_| {
                JointState::new(Grid::standard_normal(1, 1, &mut rng), Grid::zeros(1, 1)).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_iterations_returns_initial_network() {
        let net = ScoreNetwork::init(dense_spec(1, vec![8], false), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let cfg = TrainConfig {
            num_iters: 0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &sched(), &toy_dataset(8), &cfg, None, &mut NoHooks).unwrap();
        assert_eq!(out.net, net);
        assert!(out.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let net = ScoreNetwork::init(dense_spec(1, vec![8, 8], false), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let data = toy_dataset(64);
        let cfg = TrainConfig {
            num_iters: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(net.clone(), &sched(), &data, &cfg, None, &mut NoHooks).unwrap();
        let b = train(net.clone(), &sched(), &data, &cfg, None, &mut NoHooks).unwrap();
        assert_eq!(a.net.parameters(), b.net.parameters());

        let half = TrainConfig {
            num_iters: 20,
            ..cfg.clone()
        };
        let first = train(net, &sched(), &data, &half, None, &mut NoHooks).unwrap();
        let resumed = train(
            first.net,
            &sched(),
            &data,
            &cfg,
            Some(ResumePoint {
                completed_iters: 20,
                adam: first.adam,
            }),
            &mut NoHooks,
        )
        .unwrap();
        assert_eq!(resumed.records.first().unwrap().iter, 21);
        assert_eq!(resumed.net.parameters(), a.net.parameters());
        assert_eq!(resumed.records[0].loss, a.records[20].loss);
    }

    #[test]
    fn divergence_is_reported() {
        let net = ScoreNetwork::init(dense_spec(1, vec![4], false), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let cfg = TrainConfig {
            num_iters: 3,
            batch_size: 4,
            divergence_threshold: 1e-3,
            ..TrainConfig::default()
        };
        let err = train(net, &sched(), &toy_dataset(4), &cfg, None, &mut NoHooks).unwrap_err();
        assert!(matches!(err, Error::Divergence { iter: 1, .. }));
    }
}
