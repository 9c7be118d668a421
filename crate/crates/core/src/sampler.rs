//! Predictor-corrector sampling of the target channel with the guide held fixed.
//!
//! A trajectory starts from `target ~ N(0, sigma_max^2 I)` at level `N` and
//! walks down the ladder. Each level `k = N..1` takes one reverse-diffusion
//! predictor step with the score at `sigma_k`, then `M` Langevin corrector
//! steps at the new level `sigma_{k-1}`. The last level has `sigma_0 = 0`,
//! where the score is undefined, so it gets no corrector.
//!
//! Trajectories sampled together form a batch and share the corrector step
//! size, which is computed from batch-mean norms.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::joint::{JointState, TimeIndex};
use crate::network::ScoreNetwork;
use crate::oracles::{GaussianMixture, JointGaussian};
use crate::schedule::{DiscretizationCoefficients, NoiseSchedule};
use crate::seeding;

/// Anything that can estimate the target-channel score at noise level `sigma`.
pub trait ScoreFn: Sync {
    fn score(&self, target: &Grid, guide: &Grid, sigma: f64) -> Result<Grid>;
}

impl ScoreFn for ScoreNetwork {
    fn score(&self, target: &Grid, guide: &Grid, sigma: f64) -> Result<Grid> {
        self.forward(&JointState::new(target.clone(), guide.clone())?, sigma)
    }
}

impl<S: ScoreFn + ?Sized> ScoreFn for &S {
    fn score(&self, target: &Grid, guide: &Grid, sigma: f64) -> Result<Grid> {
        (**self).score(target, guide, sigma)
    }
}

/// Adapts a closure.
pub struct FnScore<F>(pub F);

impl<F> ScoreFn for FnScore<F>
where
    F: Fn(&Grid, &Grid, f64) -> Result<Grid> + Sync,
{
    fn score(&self, target: &Grid, guide: &Grid, sigma: f64) -> Result<Grid> {
        (self.0)(target, guide, sigma)
    }
}

/// Exact perturbed-mixture score over the flattened target; the guide is ignored.
pub struct MixtureScore(pub GaussianMixture);

impl ScoreFn for MixtureScore {
    fn score(&self, target: &Grid, _guide: &Grid, sigma: f64) -> Result<Grid> {
        let s = self.0.perturbed_score(target.as_slice(), sigma)?;
        Grid::new(target.height(), target.width(), s)
    }
}

/// Exact joint score applied pixelwise: each target pixel is paired with
/// the guide pixel at the same position.
pub struct JointGaussianScore(pub JointGaussian);

impl ScoreFn for JointGaussianScore {
    fn score(&self, target: &Grid, guide: &Grid, sigma: f64) -> Result<Grid> {
        target.check_shape(guide, "joint oracle target vs guide")?;
        let s = target
            .as_slice()
            .iter()
            .zip(guide.as_slice())
            .map(|(x, g)| self.0.joint_perturbed_score(*x, *g, sigma))
            .collect();
        Grid::new(target.height(), target.width(), s)
    }
}

/// Flips the sign of another score. Useful as a deliberately wrong score.
pub struct Negated<S>(pub S);

impl<S: ScoreFn> ScoreFn for Negated<S> {
    fn score(&self, target: &Grid, guide: &Grid, sigma: f64) -> Result<Grid> {
        Ok(self.0.score(target, guide, sigma)?.map(|v| -v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSizeConvention {
    /// `eps = 2 alpha (r |z| / |s|)^2`
    SquaredRatio,
    /// `eps = 2 alpha r |z| / |s|`
    LinearRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorConfig {
    pub snr: f64,
    pub alpha: f64,
    pub corrector_steps: usize,
    pub step_size_convention: StepSizeConvention,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            snr: 0.16,
            alpha: 1.0,
            corrector_steps: 1,
            step_size_convention: StepSizeConvention::SquaredRatio,
        }
    }
}

impl CorrectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Validation(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub corrector: CorrectorConfig,
    pub seed: u64,
    pub denoise_final: bool,
    /// Keep a per-level summary of each trajectory.
    pub record_trace: bool,
    /// Output range for the clamped result.
    pub clamp: (f64, f64),
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule, seed: u64) -> Self {
        SamplerConfig {
            schedule,
            corrector: CorrectorConfig::default(),
            seed,
            denoise_final: true,
            record_trace: false,
            clamp: (-1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corrector.validate()?;
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::Validation("clamp range must be increasing".into()));
        }
        Ok(())
    }
}

/// Corrector step size from the noise and score norms.
pub fn corrector_step_size(cfg: &CorrectorConfig, z_norm: f64, score_norm: f64) -> Result<f64> {
    if score_norm == 0.0 {
        return Err(Error::ZeroScore);
    }
    let ratio = cfg.snr * z_norm / score_norm;
    Ok(match cfg.step_size_convention {
        StepSizeConvention::SquaredRatio => 2.0 * cfg.alpha * ratio * ratio,
        StepSizeConvention::LinearRatio => 2.0 * cfg.alpha * ratio,
    })
}

/// `target + eps * score + sqrt(2 eps) * z`
pub fn langevin_update(target: &Grid, score: &Grid, z: &Grid, eps: f64) -> Result<Grid> {
    target.add_scaled(score, eps)?.add_scaled(z, (2.0 * eps).sqrt())
}

fn checked_score<S: ScoreFn + ?Sized>(
    score_fn: &S,
    state: &JointState,
    sigma: f64,
    step: usize,
) -> Result<Grid> {
    let s = score_fn.score(state.target(), state.guide(), sigma)?;
    state.target().check_shape(&s, "score vs target")?;
    if !s.is_finite() {
        return Err(Error::NonFiniteScore { step });
    }
    Ok(s)
}

fn in_trajectory(trajectory: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Trajectory {
        trajectory,
        step,
        source: Box::new(e),
    }
}

/// Reverse-diffusion step from level `step` to `step - 1`:
/// `target + g^2 s(target, sigma_step) + g z`. The guide is carried over unchanged.
pub fn predictor_step<S: ScoreFn + ?Sized>(
    state: &JointState,
    score_fn: &S,
    coeffs: &DiscretizationCoefficients,
    step: usize,
    z: &Grid,
) -> Result<JointState> {
    if step == 0 || step > coeffs.len() {
        return Err(Error::Argument(format!(
            "predictor step must be in 1..={}, got {step}",
            coeffs.len()
        )));
    }
    let g = coeffs.g(step);
    let s = checked_score(score_fn, state, coeffs.sigma(step), step)?;
    let target = state.target().add_scaled(&s, g * g)?.add_scaled(z, g)?;
    Ok(state.with_target(target)?.with_time(TimeIndex::Step(step - 1)))
}

/// One Langevin refinement at fixed `sigma` for a batch of states.
///
/// Norms are taken per state over the target channel and averaged over the
/// batch, so all states move with one shared `eps`. Fails with
/// [`Error::ZeroScore`] when the mean score norm is zero; the sampler then
/// skips the step. Score failures carry the batch position as trajectory.
pub fn corrector_step_batch<S: ScoreFn + ?Sized>(
    states: &[JointState],
    score_fn: &S,
    cfg: &CorrectorConfig,
    sigma: f64,
    step: usize,
    zs: &[Grid],
) -> Result<Vec<JointState>> {
    let ids: Vec<usize> = (0..states.len()).collect();
    corrector_batch(states, &ids, score_fn, cfg, sigma, step, zs)
}

fn corrector_batch<S: ScoreFn + ?Sized>(
    states: &[JointState],
    ids: &[usize],
    score_fn: &S,
    cfg: &CorrectorConfig,
    sigma: f64,
    step: usize,
    zs: &[Grid],
) -> Result<Vec<JointState>> {
    if states.is_empty() || states.len() != zs.len() {
        return Err(Error::Argument(format!(
            "corrector needs one noise draw per state, got {} states and {} draws",
            states.len(),
            zs.len()
        )));
    }
    let scores = states
        .par_iter()
        .zip(ids)
        .map(|(st, &id)| checked_score(score_fn, st, sigma, step).map_err(in_trajectory(id, step)))
        .collect::<Result<Vec<Grid>>>()?;
    let n = states.len() as f64;
    let z_norm = zs.iter().map(Grid::norm).sum::<f64>() / n;
    let s_norm = scores.iter().map(Grid::norm).sum::<f64>() / n;
    let eps = corrector_step_size(cfg, z_norm, s_norm)?;
    states
        .par_iter()
        .zip(&scores)
        .zip(zs)
        .map(|((st, s), z)| st.with_target(langevin_update(st.target(), s, z, eps)?))
        .collect()
}

/// Single-state corrector step (a batch of one).
pub fn corrector_step<S: ScoreFn + ?Sized>(
    state: &JointState,
    score_fn: &S,
    cfg: &CorrectorConfig,
    sigma: f64,
    step: usize,
    z: &Grid,
) -> Result<JointState> {
    let mut out = corrector_step_batch(
        std::slice::from_ref(state),
        score_fn,
        cfg,
        sigma,
        step,
        std::slice::from_ref(z),
    )?;
    Ok(out.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// Ladder level reached after the predictor and its correctors.
    pub level: usize,
    pub sigma: f64,
    /// Root-mean-square of the target channel.
    pub target_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub unclamped: Grid,
    pub clamped: Grid,
    /// Largest `|guide - initial guide|` seen over every step.
    pub max_guide_deviation: f64,
    /// Corrector steps skipped because the batch score norm was zero.
    pub skipped_corrector_steps: usize,
    pub trace: Vec<TraceEntry>,
}

fn rms(g: &Grid) -> f64 {
    g.norm() / (g.len() as f64).sqrt()
}

fn draw_noise(rngs: &mut [ChaCha8Rng], shapes: &[(usize, usize)]) -> Vec<Grid> {
    rngs.par_iter_mut()
        .zip(shapes)
        .map(|(r, &(h, w))| Grid::standard_normal(h, w, r))
        .collect()
}

/// Runs trajectories `ids[i]` with guides `guides[i]` in lockstep. Each
/// trajectory draws from its own stream seeded with `cfg.seed ^ id`.
fn run_batch<S: ScoreFn + ?Sized>(
    guides: &[&Grid],
    ids: &[usize],
    score_fn: &S,
    cfg: &SamplerConfig,
) -> Result<Vec<SampleOutput>> {
    cfg.validate()?;
    if guides.is_empty() {
        return Err(Error::Argument("sampling needs at least one guide".into()));
    }
    if let Some(i) = guides.iter().position(|g| !g.is_finite()) {
        return Err(Error::Validation(format!("guide {i} contains non-finite values")));
    }
    let coeffs = cfg.schedule.diffusion_coefficients();
    let n = coeffs.len();
    let shapes: Vec<(usize, usize)> = guides.iter().map(|g| g.shape()).collect();
    let mut rngs: Vec<ChaCha8Rng> = ids.iter().map(|&id| seeding::rng(cfg.seed ^ id as u64)).collect();

    let init = draw_noise(&mut rngs, &shapes);
    let mut states = init
        .into_iter()
        .zip(guides)
        .zip(ids)
        .map(|((z, g), &id)| {
            JointState::new(z.map(|v| v * cfg.schedule.sigma_max()), (*g).clone())
                .map(|s| s.with_time(TimeIndex::Step(n)))
                .map_err(in_trajectory(id, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut max_dev = vec![0.0f64; states.len()];
    let mut skipped = 0;
    let mut traces = vec![Vec::new(); states.len()];

    let track = |states: &[JointState], max_dev: &mut [f64]| -> Result<()> {
        for ((st, g), dev) in states.iter().zip(guides).zip(max_dev.iter_mut()) {
            *dev = dev.max(st.guide().max_abs_diff(g)?);
        }
        Ok(())
    };

    for k in (1..=n).rev() {
        let mut zs = draw_noise(&mut rngs, &shapes);
        if k == 1 && cfg.denoise_final {
            zs = shapes.iter().map(|&(h, w)| Grid::zeros(h, w)).collect();
        }
        states = states
            .par_iter()
            .zip(&zs)
            .zip(ids)
            .map(|((st, z), &id)| {
                predictor_step(st, score_fn, &coeffs, k, z).map_err(in_trajectory(id, k))
            })
            .collect::<Result<Vec<_>>>()?;
        track(&states, &mut max_dev)?;
        let level = k - 1;
        if level > 0 {
            let sigma = coeffs.sigma(level);
            for _ in 0..cfg.corrector.corrector_steps {
                let zs = draw_noise(&mut rngs, &shapes);
                match corrector_batch(&states, ids, score_fn, &cfg.corrector, sigma, level, &zs) {
                    Ok(next) => states = next,
                    Err(Error::ZeroScore) => skipped += 1,
                    Err(e) => return Err(e),
                }
                track(&states, &mut max_dev)?;
            }
        }
        if cfg.record_trace {
            for (trace, st) in traces.iter_mut().zip(&states) {
                trace.push(TraceEntry {
                    level,
                    sigma: coeffs.sigma(level),
                    target_rms: rms(st.target()),
                });
            }
        }
    }
    Ok(states
        .into_iter()
        .zip(max_dev)
        .zip(traces)
        .map(|((st, dev), trace)| {
            let unclamped = st.target().clone();
            SampleOutput {
                clamped: unclamped.clamp(cfg.clamp.0, cfg.clamp.1),
                unclamped,
                max_guide_deviation: dev,
                skipped_corrector_steps: skipped,
                trace,
            }
        })
        .collect())
}

/// Runs one trajectory on its own; its random stream is seeded with
/// `cfg.seed ^ trajectory`.
pub fn pc_sample<S: ScoreFn + ?Sized>(
    guide: &Grid,
    score_fn: &S,
    cfg: &SamplerConfig,
    trajectory: usize,
) -> Result<SampleOutput> {
    Ok(run_batch(&[guide], &[trajectory], score_fn, cfg)?.remove(0))
}

/// One trajectory per guide, advanced together; trajectory `i` uses guide
/// `i` and the shared corrector step size of the batch.
pub fn pc_sample_batch<S: ScoreFn + ?Sized>(
    guides: &[Grid],
    score_fn: &S,
    cfg: &SamplerConfig,
) -> Result<Vec<SampleOutput>> {
    let refs: Vec<&Grid> = guides.iter().collect();
    let ids: Vec<usize> = (0..guides.len()).collect();
    run_batch(&refs, &ids, score_fn, cfg)
}

/// `count` trajectories sharing one guide, advanced as one batch.
pub fn pc_sample_many<S: ScoreFn + ?Sized>(
    guide: &Grid,
    score_fn: &S,
    cfg: &SamplerConfig,
    count: usize,
) -> Result<Vec<SampleOutput>> {
    let refs = vec![guide; count];
    let ids: Vec<usize> = (0..count).collect();
    run_batch(&refs, &ids, score_fn, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_state(x: f64) -> JointState {
        JointState::new(Grid::scalar(x), Grid::scalar(0.25)).unwrap()
    }

    fn zero_score() -> FnScore<impl Fn(&Grid, &Grid, f64) -> Result<Grid> + Sync> {
        FnScore(|t: &Grid, _: &Grid, _| Ok(Grid::zeros(t.height(), t.width())))
    }

    fn const_score(v: f64) -> FnScore<impl Fn(&Grid, &Grid, f64) -> Result<Grid> + Sync> {
        FnScore(move |t: &Grid, _: &Grid, _| Ok(Grid::filled(t.height(), t.width(), v)))
    }

    #[test]
    fn zero_score_zero_noise_predictor_is_identity() {
        let coeffs = NoiseSchedule::new(0.01, 50.0, 10).unwrap().diffusion_coefficients();
        let s = scalar_state(0.7);
        let next = predictor_step(&s, &zero_score(), &coeffs, 5, &Grid::scalar(0.0)).unwrap();
        assert_eq!(next.target(), s.target());
        assert_eq!(next.guide(), s.guide());
        assert_eq!(next.time(), TimeIndex::Step(4));
    }

    #[test]
    fn predictor_hand_value() {
        // ladder [0, sqrt(0.5)] has g_1^2 = 0.5
        let coeffs = DiscretizationCoefficients::from_ladder(&[0.0, 0.5f64.sqrt()]).unwrap();
        let next = predictor_step(&scalar_state(1.0), &const_score(-1.0), &coeffs, 1, &Grid::scalar(0.0))
            .unwrap();
        assert_relative_eq!(next.target().as_slice()[0], 0.5, epsilon = 1e-15);
        assert!(predictor_step(&scalar_state(1.0), &const_score(-1.0), &coeffs, 2, &Grid::scalar(0.0)).is_err());
    }

    #[test]
    fn langevin_hand_value() {
        let out = langevin_update(&Grid::scalar(1.0), &Grid::scalar(2.0), &Grid::scalar(0.0), 0.1).unwrap();
        assert_relative_eq!(out.as_slice()[0], 1.2, epsilon = 1e-15);
    }

    #[test]
    fn step_size_conventions() {
        let mut cfg = CorrectorConfig::default();
        assert_eq!(corrector_step_size(&cfg, 3.0, 3.0).unwrap(), 2.0 * 0.16 * 0.16);
        cfg.step_size_convention = StepSizeConvention::LinearRatio;
        assert_eq!(corrector_step_size(&cfg, 3.0, 3.0).unwrap(), 0.32);
        assert!(matches!(corrector_step_size(&cfg, 1.0, 0.0), Err(Error::ZeroScore)));
    }

    #[test]
    fn zero_score_corrector_is_skipped() {
        let sched = NoiseSchedule::new(0.01, 1.0, 5).unwrap();
        let out = pc_sample(&Grid::scalar(0.0), &zero_score(), &SamplerConfig::new(sched, 3), 0).unwrap();
        assert_eq!(out.skipped_corrector_steps, 4);
    }

    #[test]
    fn non_finite_score_reports_step() {
        let sched = NoiseSchedule::new(0.01, 1.0, 5).unwrap();
        let bad = FnScore(|t: &Grid, _: &Grid, s: f64| {
            Ok(Grid::filled(t.height(), t.width(), if s < 0.5 { f64::NAN } else { 1.0 }))
        });
        let err = pc_sample(&Grid::scalar(0.0), &bad, &SamplerConfig::new(sched, 3), 7).unwrap_err();
        match err {
            Error::Trajectory { trajectory: 7, step, source } => {
                assert!(matches!(*source, Error::NonFiniteScore { .. }));
                assert!(step < 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn guide_never_moves_and_runs_are_deterministic() {
        let sched = NoiseSchedule::new(0.01, 10.0, 50).unwrap();
        let jg = JointGaussianScore(JointGaussian::standard(0.8).unwrap());
        let guide = Grid::new(2, 2, vec![1.0, -0.5, 0.25, 0.0]).unwrap();
        let cfg = SamplerConfig::new(sched, 11);
        let a = pc_sample(&guide, &jg, &cfg, 2).unwrap();
        let b = pc_sample(&guide, &jg, &cfg, 2).unwrap();
        let c = pc_sample(&guide, &jg, &cfg, 3).unwrap();
        assert_eq!(a.max_guide_deviation, 0.0);
        assert_eq!(a, b);
        assert_ne!(a.unclamped, c.unclamped);
    }

    #[test]
    fn predictor_only_run_uses_no_corrector() {
        let sched = NoiseSchedule::new(0.01, 10.0, 20).unwrap();
        let mut cfg = SamplerConfig::new(sched, 0);
        cfg.corrector.corrector_steps = 0;
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let counting = FnScore(|t: &Grid, _: &Grid, _| {
            calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Ok(t.map(|v| -v))
        });
        pc_sample(&Grid::scalar(0.0), &counting, &cfg, 0).unwrap();
        assert_eq!(calls.into_inner(), 20);
    }

    #[test]
    fn trace_decreases_from_sigma_max() {
        let sched = NoiseSchedule::new(0.01, 20.0, 200).unwrap();
        let mut cfg = SamplerConfig::new(sched, 1);
        cfg.record_trace = true;
        let guide = Grid::zeros(1, 8);
        let cov = (0..8)
            .map(|i| (0..8).map(|j| if i == j { 0.01 } else { 0.0 }).collect())
            .collect();
        let mix8 = MixtureScore(GaussianMixture::new(vec![1.0], vec![vec![0.0; 8]], vec![cov]).unwrap());
        let out = pc_sample(&guide, &mix8, &cfg, 0).unwrap();
        let first = out.trace.first().unwrap();
        let last = out.trace.last().unwrap();
        assert!(first.target_rms > 5.0 && first.target_rms < 40.0, "{first:?}");
        assert!(last.target_rms < 0.3, "{last:?}");
        assert_eq!(last.level, 0);
    }

    #[test]
    fn predictor_only_batch_matches_individual_runs() {
        // without a corrector nothing couples the trajectories
        let sched = NoiseSchedule::new(0.01, 5.0, 30).unwrap();
        let jg = JointGaussianScore(JointGaussian::standard(0.5).unwrap());
        let mut cfg = SamplerConfig::new(sched, 4);
        cfg.corrector.corrector_steps = 0;
        let guides = vec![Grid::scalar(0.3), Grid::scalar(-1.0), Grid::scalar(2.0)];
        let batch = pc_sample_batch(&guides, &jg, &cfg).unwrap();
        for (i, g) in guides.iter().enumerate() {
            assert_eq!(batch[i], pc_sample(g, &jg, &cfg, i).unwrap());
        }
    }

    #[test]
    fn corrector_shares_one_step_size() {
        let cfg = CorrectorConfig::default();
        let states = vec![scalar_state(1.0), scalar_state(-2.0)];
        let score = FnScore(|t: &Grid, _: &Grid, _| Ok(t.map(|v| -v)));
        let zs = vec![Grid::scalar(0.5), Grid::scalar(-1.5)];
        let out = corrector_step_batch(&states, &score, &cfg, 1.0, 3, &zs).unwrap();
        // mean |z| = 1.0, mean |s| = 1.5
        let eps = 2.0 * (0.16f64 * 1.0 / 1.5).powi(2);
        for ((st, z), o) in states.iter().zip(&zs).zip(&out) {
            let x = st.target().as_slice()[0];
            let expected = x - eps * x + (2.0 * eps).sqrt() * z.as_slice()[0];
            assert_relative_eq!(o.target().as_slice()[0], expected, epsilon = 1e-15);
            assert_eq!(o.guide(), st.guide());
        }
    }
}
