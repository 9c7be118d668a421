//! The pipeline steps behind the `jpddm` command line.
//!
//! Every command that writes into a directory takes a lock file there, writes
//! `config.resolved.toml` (the full config, sufficient to rerun) and
//! `run.txt` (command, derived seeds, format versions), and writes each
//! artifact through a temporary file and a rename.
//!
//! Exit codes (see [`Error::exit_code`]): 0 success, 1 other failure,
//! 2 config, 3 I/O or file format, 4 missing dataset, 5 divergence,
//! 6 shape or schedule mismatch, 7 failed oracle check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::{self, load_checkpoint, load_resume, save_checkpoint, save_resume, Checkpoint};
use crate::config::{RunConfig, SEED_DATA, SEED_INIT, SEED_ORACLE, SEED_SAMPLING, SEED_TRAINING};
use crate::data_io::{
    self, atomic_write, load_dataset, read_image, read_pgm, save_dataset, write_image, write_pgm, DatasetManifest,
    PairedDataset, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evaluation::{ks_critical_value, ks_distance, ks_p_value, psnr, sample_moments, DEFAULT_PEAK};
use crate::grid::Grid;
use crate::network::ScoreNetwork;
use crate::sampler::{pc_sample_batch, pc_sample_many, JointGaussianScore, MixtureScore, Negated, SampleOutput, SamplerConfig, ScoreFn};
use crate::schedule::NoiseSchedule;
use crate::seeding;
use crate::training::{train, AdamState, LossRecord, ResumePoint, TrainHooks};

pub const EXIT_ORACLE_FAILED: i32 = 7;
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";
pub const RUN_MANIFEST_FILE: &str = "run.txt";
pub const LOCK_FILE: &str = "run.lock";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "iter,loss,sigma_lo,sigma_hi,bucket_loss";
pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "model.adam";
pub const SAMPLES_MANIFEST_FILE: &str = "samples.txt";
pub const RUN_FORMAT_VERSION: u32 = 1;

/// Exclusive claim on a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Argument(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_run_files(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let snapshot = cfg.to_toml();
    atomic_write(&dir.join(SNAPSHOT_FILE), snapshot.as_bytes())?;
    let mut m = String::new();
    let _ = writeln!(m, "run_format {RUN_FORMAT_VERSION}");
    let _ = writeln!(m, "command {command}");
    let _ = writeln!(m, "crate_version {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "image_format JPIM {}", data_io::IMAGE_VERSION);
    let _ = writeln!(m, "checkpoint_format JPDM {}", checkpoint::FORMAT_VERSION);
    let _ = writeln!(m, "root_seed {}", cfg.run.seed);
    for label in [SEED_DATA, SEED_INIT, SEED_TRAINING, SEED_SAMPLING, SEED_ORACLE] {
        let _ = writeln!(m, "seed {label} {}", cfg.seed_for(label));
    }
    let _ = writeln!(m, "config_sha256 {}", hex(&Sha256::digest(snapshot.as_bytes())));
    atomic_write(&dir.join(RUN_MANIFEST_FILE), m.as_bytes())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let data = cfg.generate_dataset()?;
    let _lock = RunLock::acquire(out)?;
    let manifest = save_dataset(out, &data)?;
    write_run_files(out, cfg, "generate-data")?;
    Ok(manifest)
}

/// Loads a dataset, reporting a missing manifest as [`Error::MissingDataset`].
pub fn open_dataset(dir: &Path) -> Result<PairedDataset> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::MissingDataset { path: dir.to_path_buf() });
    }
    load_dataset(dir)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub records: Vec<LossRecord>,
    pub net: ScoreNetwork,
}

fn metrics_rows(record: &LossRecord, out: &mut String) {
    for b in &record.sigma_bucket_losses {
        let _ = writeln!(out, "{},{},{},{},{}", record.iter, record.loss, b.sigma_lo, b.sigma_hi, b.loss);
    }
}

/// Rows of an existing metrics file up to and including `last_iter`.
fn metrics_prefix(path: &Path, last_iter: usize) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines() {
        if line == METRICS_HEADER {
            continue;
        }
        let iter: usize = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("bad metrics row {line:?}"),
            })?;
        if iter <= last_iter {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

struct TrainWriter<'a> {
    dir: &'a Path,
    normalization: (f64, f64),
    rows: String,
}

impl TrainWriter<'_> {
    fn flush_metrics(&self) -> Result<()> {
        let text = format!("{METRICS_HEADER}\n{}", self.rows);
        atomic_write(&self.dir.join(METRICS_FILE), text.as_bytes())
    }

    fn save_state(&self, iter: usize, net: &ScoreNetwork, adam: &AdamState) -> Result<()> {
        save_checkpoint(&self.dir.join(MODEL_FILE), net, self.normalization)?;
        save_resume(
            &self.dir.join(OPTIMIZER_FILE),
            &ResumePoint {
                completed_iters: iter,
                adam: adam.clone(),
            },
        )
    }
}

impl TrainHooks for TrainWriter<'_> {
    fn on_record(&mut self, record: &LossRecord) -> Result<()> {
        metrics_rows(record, &mut self.rows);
        Ok(())
    }

    fn on_checkpoint(&mut self, iter: usize, net: &ScoreNetwork, adam: &AdamState) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_checkpoint(&dir.join(format!("iter_{iter:06}.ckpt")), net, self.normalization)?;
        self.save_state(iter, net, adam)?;
        self.flush_metrics()
    }
}

/// Trains on the training split of `data_dir`. With `resume`, continues from
/// the model and optimizer state last saved in `out`.
pub fn train_run(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<TrainSummary> {
    let data = open_dataset(data_dir)?;
    if (data.height, data.width) != cfg.image_shape() {
        return Err(Error::Mismatch(format!(
            "dataset is {}x{}, config expects {}x{}",
            data.height,
            data.width,
            cfg.image_shape().0,
            cfg.image_shape().1
        )));
    }
    let states = data.training_states()?;
    let schedule = cfg.schedule()?;
    let spec = cfg.arch_spec()?;
    let tcfg = cfg.train_config();
    let _lock = RunLock::acquire(out)?;

    let (net, resume_point, rows) = if resume {
        let ck = load_checkpoint(&out.join(MODEL_FILE))?;
        if ck.net.spec() != &spec {
            return Err(Error::Mismatch("checkpoint architecture differs from the config".into()));
        }
        let rp = load_resume(&out.join(OPTIMIZER_FILE))?;
        if rp.adam.m.len() != ck.net.param_count() {
            return Err(Error::Mismatch("optimizer state does not match the checkpoint".into()));
        }
        let rows = metrics_prefix(&out.join(METRICS_FILE), rp.completed_iters)?;
        (ck.net, Some(rp), rows)
    } else {
        let net = ScoreNetwork::init(spec, &mut seeding::rng(cfg.seed_for(SEED_INIT)))?;
        (net, None, String::new())
    };

    write_run_files(out, cfg, "train")?;
    let mut writer = TrainWriter {
        dir: out,
        normalization: data.normalization,
        rows,
    };
    let outcome = train(net, &schedule, &states, &tcfg, resume_point.clone(), &mut writer)?;
    let completed = tcfg.num_iters.max(resume_point.map_or(0, |r| r.completed_iters));
    writer.save_state(completed, &outcome.net, &outcome.adam)?;
    writer.flush_metrics()?;
    Ok(TrainSummary {
        first_loss: outcome.records.first().map(|r| r.loss),
        last_loss: outcome.records.last().map(|r| r.loss),
        records: outcome.records,
        net: outcome.net,
    })
}

/// Where the guides for `sample` come from.
#[derive(Debug, Clone)]
pub enum GuideSource {
    /// `.jpim` or `.pgm` files, already in the normalized `[-1, 1]` range.
    Files(Vec<PathBuf>),
    /// Pairs of a dataset by index; ground-truth targets are copied alongside.
    Dataset { dir: PathBuf, indices: Vec<usize> },
    /// Every held-out pair of a dataset.
    Heldout { dir: PathBuf },
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub name: String,
    pub seed: u64,
    pub max_guide_deviation: f64,
    pub skipped_corrector_steps: usize,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub records: Vec<SampleRecord>,
    pub outputs: Vec<SampleOutput>,
}

struct NamedGuide {
    name: String,
    guide: Grid,
    target: Option<Grid>,
}

fn resolve_guides(source: &GuideSource) -> Result<Vec<NamedGuide>> {
    let from_dataset = |data: &PairedDataset, idx: &[usize]| -> Result<Vec<NamedGuide>> {
        idx.iter()
            .map(|&i| {
                let p = data.pairs.get(i).ok_or_else(|| {
                    Error::Argument(format!("dataset index {i} out of range (dataset has {})", data.pairs.len()))
                })?;
                Ok(NamedGuide {
                    name: format!("{i:05}"),
                    guide: p.guide.clone(),
                    target: Some(p.target.clone()),
                })
            })
            .collect()
    };
    let guides = match source {
        GuideSource::Files(paths) => paths
            .iter()
            .map(|p| {
                let guide = match p.extension().and_then(|e| e.to_str()) {
                    Some("pgm") => read_pgm(p)?,
                    _ => read_image(p)?,
                };
                let name = p.file_stem().map_or_else(|| "guide".into(), |s| s.to_string_lossy().into_owned());
                Ok(NamedGuide { name, guide, target: None })
            })
            .collect::<Result<Vec<_>>>()?,
        GuideSource::Dataset { dir, indices } => from_dataset(&open_dataset(dir)?, indices)?,
        GuideSource::Heldout { dir } => {
            let data = open_dataset(dir)?;
            let n = data.pairs.len();
            from_dataset(&data, &((n - data.heldout)..n).collect::<Vec<_>>())?
        }
    };
    if guides.is_empty() {
        return Err(Error::Argument("no guides to sample from".into()));
    }
    let mut names: Vec<&str> = guides.iter().map(|g| g.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Argument(format!("two guides share the name {}", w[0])));
    }
    Ok(guides)
}

/// Samples one target per guide. Trajectory `k` uses seed
/// `sampling_seed ^ k`, recorded in `samples.txt`.
pub fn sample_run(cfg: &RunConfig, checkpoint_path: &Path, source: &GuideSource, out: &Path) -> Result<SampleRun> {
    let ck: Checkpoint = load_checkpoint(checkpoint_path)?;
    let scfg: SamplerConfig = cfg.sampler_config()?;
    ck.check_schedule(&scfg.schedule)?;
    let guides = resolve_guides(source)?;
    let shape = (ck.net.spec().height, ck.net.spec().width);
    for g in &guides {
        if g.guide.shape() != shape {
            return Err(Error::Dimension(format!(
                "guide {} is {}x{}, the network expects {}x{}",
                g.name,
                g.guide.height(),
                g.guide.width(),
                shape.0,
                shape.1
            )));
        }
    }
    let refs: Vec<Grid> = guides.iter().map(|g| g.guide.clone()).collect();
    let outputs = pc_sample_batch(&refs, &ck.net, &scfg)?;

    let _lock = RunLock::acquire(out)?;
    let mut records = Vec::with_capacity(guides.len());
    let mut manifest = String::from("name seed max_guide_deviation skipped_corrector_steps\n");
    for dir in ["samples", "guides"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    if guides.iter().any(|g| g.target.is_some()) {
        let d = out.join("targets");
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (k, (g, o)) in guides.iter().zip(&outputs).enumerate() {
        write_image(&out.join("samples").join(format!("{}.jpim", g.name)), &o.clamped)?;
        write_pgm(&out.join("samples").join(format!("{}.pgm", g.name)), &o.clamped)?;
        write_image(&out.join("guides").join(format!("{}.jpim", g.name)), &g.guide)?;
        if let Some(t) = &g.target {
            write_image(&out.join("targets").join(format!("{}.jpim", g.name)), t)?;
        }
        let rec = SampleRecord {
            name: g.name.clone(),
            seed: scfg.seed ^ k as u64,
            max_guide_deviation: o.max_guide_deviation,
            skipped_corrector_steps: o.skipped_corrector_steps,
        };
        let _ = writeln!(
            manifest,
            "{} {} {} {}",
            rec.name, rec.seed, rec.max_guide_deviation, rec.skipped_corrector_steps
        );
        records.push(rec);
    }
    atomic_write(&out.join(SAMPLES_MANIFEST_FILE), manifest.as_bytes())?;
    write_run_files(out, cfg, "sample")?;
    Ok(SampleRun { records, outputs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub name: String,
    pub psnr_db: f64,
    pub mse: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairScore>,
    pub mean_psnr_db: f64,
    pub mean_mse: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,psnr_db,mse,exact\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{},{}", p.name, p.psnr_db, p.mse, p.exact);
        }
        let all_exact = self.pairs.iter().all(|p| p.exact);
        let _ = writeln!(s, "mean,{},{},{}", self.mean_psnr_db, self.mean_mse, all_exact);
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "pairs      {}\nmean PSNR  {:.4} dB\nmean MSE   {:.6e}\n",
            self.pairs.len(),
            self.mean_psnr_db,
            self.mean_mse
        )
    }
}

fn image_names(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("jpim") {
            if let Some(stem) = path.file_stem() {
                names.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// PSNR of every `.jpim` in `candidates` against the same-named file in
/// `references`, peak-to-peak range 2.
pub fn eval_dirs(references: &Path, candidates: &Path) -> Result<EvalReport> {
    let refs = image_names(references)?;
    let cands = image_names(candidates)?;
    if refs.is_empty() && cands.is_empty() {
        return Err(Error::Argument(format!(
            "no .jpim files in {} or {}",
            references.display(),
            candidates.display()
        )));
    }
    let only_ref: Vec<&String> = refs.iter().filter(|n| cands.binary_search(n).is_err()).collect();
    let only_cand: Vec<&String> = cands.iter().filter(|n| refs.binary_search(n).is_err()).collect();
    if !only_ref.is_empty() || !only_cand.is_empty() {
        return Err(Error::Mismatch(format!(
            "unpaired files: reference only {only_ref:?}, candidate only {only_cand:?}"
        )));
    }
    let mut pairs = Vec::with_capacity(refs.len());
    for name in &refs {
        let file = format!("{name}.jpim");
        let r = read_image(&references.join(&file))?;
        let c = read_image(&candidates.join(&file))?;
        let p = psnr(&r, &c, DEFAULT_PEAK)?;
        pairs.push(PairScore {
            name: name.clone(),
            psnr_db: p.db,
            mse: p.mse,
            exact: p.exact,
        });
    }
    let n = pairs.len() as f64;
    Ok(EvalReport {
        mean_psnr_db: pairs.iter().map(|p| p.psnr_db).sum::<f64>() / n,
        mean_mse: pairs.iter().map(|p| p.mse).sum::<f64>() / n,
        pairs,
    })
}

pub fn eval_run(references: &Path, candidates: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let report = eval_dirs(references, candidates)?;
    if let Some(out) = out {
        let _lock = RunLock::acquire(out)?;
        atomic_write(&out.join("eval.csv"), report.to_csv().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub name: String,
    pub corrector_steps: usize,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleReport {
    pub results: Vec<CriterionResult>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CriterionResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("criterion,corrector_steps,measured,threshold,passed\n");
        for r in &self.results {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.corrector_steps, r.measured, r.threshold, r.passed);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<4} {:<18} M={} {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.corrector_steps,
                r.detail
            );
        }
        s
    }
}

fn oracle_sample<S: ScoreFn>(
    guide: f64,
    score: S,
    negate: bool,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<SampleOutput>> {
    if negate {
        pc_sample_many(&Grid::scalar(guide), &Negated(score), cfg, n)
    } else {
        pc_sample_many(&Grid::scalar(guide), &score, cfg, n)
    }
}

fn failed_run(name: &str, m: usize, err: &Error) -> CriterionResult {
    CriterionResult {
        name: name.into(),
        corrector_steps: m,
        measured: f64::NAN,
        threshold: f64::NAN,
        passed: false,
        detail: format!("sampler failed: {err}"),
    }
}

/// Runs the analytic-score suite once per entry of `oracle.corrector_sweep`.
pub fn oracle_check(cfg: &RunConfig) -> Result<OracleReport> {
    let o = &cfg.oracle;
    let mixture = cfg.mixture()?;
    let joint = cfg.joint_gaussian()?;
    let schedule = NoiseSchedule::new(o.sigma_min, o.sigma_max, o.num_steps)?;
    let n = o.trajectories;
    let mut report = OracleReport::default();
    for &m in &o.corrector_sweep {
        let mut scfg = SamplerConfig::new(schedule.clone(), cfg.seed_for(SEED_ORACLE));
        scfg.corrector = cfg.sampler.corrector.clone();
        scfg.corrector.corrector_steps = m;
        scfg.denoise_final = cfg.sampler.denoise_final;
        let mut max_dev: f64 = 0.0;
        let mut sampled_any = false;

        match oracle_sample(0.0, MixtureScore(mixture.clone()), o.negate_score, &scfg, n) {
            Ok(outs) => {
                sampled_any = true;
                max_dev = outs.iter().map(|s| s.max_guide_deviation).fold(max_dev, f64::max);
                let xs: Vec<f64> = outs.iter().map(|s| s.unclamped.as_slice()[0]).collect();
                let d = ks_distance(&xs, |x| mixture.cdf_1d(x, 0.0).unwrap_or(f64::NAN))?;
                let p = ks_p_value(d, n);
                let crit = ks_critical_value(n, o.significance);
                report.results.push(CriterionResult {
                    name: "mixture_ks".into(),
                    corrector_steps: m,
                    measured: d,
                    threshold: crit,
                    passed: p >= o.significance,
                    detail: format!("D = {d:.5}, critical {crit:.5}, p = {p:.4}"),
                });
            }
            Err(e) => report.results.push(failed_run("mixture_ks", m, &e)),
        }

        match oracle_sample(o.joint.guide, JointGaussianScore(joint.clone()), o.negate_score, &scfg, n) {
            Ok(outs) => {
                sampled_any = true;
                max_dev = outs.iter().map(|s| s.max_guide_deviation).fold(max_dev, f64::max);
                let xs: Vec<Vec<f64>> = outs.iter().map(|s| s.unclamped.as_slice().to_vec()).collect();
                let (mean, cov) = sample_moments(&xs)?;
                let (mu, var) = joint.conditional_gaussian(o.joint.guide);
                let nf = n as f64;
                let se_mean = (var / nf).sqrt();
                let se_var = var * (2.0 / (nf - 1.0)).sqrt();
                let k = o.moment_tolerance_se;
                let zm = (mean[0] - mu).abs() / se_mean;
                let zv = (cov[0][0] - var).abs() / se_var;
                report.results.push(CriterionResult {
                    name: "joint_mean".into(),
                    corrector_steps: m,
                    measured: mean[0],
                    threshold: mu,
                    passed: zm <= k,
                    detail: format!("{:.5} vs {mu:.5} ({zm:.2} SE, limit {k})", mean[0]),
                });
                report.results.push(CriterionResult {
                    name: "joint_variance".into(),
                    corrector_steps: m,
                    measured: cov[0][0],
                    threshold: var,
                    passed: zv <= k,
                    detail: format!("{:.5} vs {var:.5} ({zv:.2} SE, limit {k})", cov[0][0]),
                });
            }
            Err(e) => {
                report.results.push(failed_run("joint_mean", m, &e));
                report.results.push(failed_run("joint_variance", m, &e));
            }
        }

        report.results.push(CriterionResult {
            name: "guide_invariance".into(),
            corrector_steps: m,
            measured: max_dev,
            threshold: 0.0,
            passed: sampled_any && max_dev == 0.0,
            detail: format!("max guide deviation {max_dev:e}"),
        });
    }
    Ok(report)
}

pub fn oracle_check_run(cfg: &RunConfig, out: Option<&Path>) -> Result<OracleReport> {
    let report = oracle_check(cfg)?;
    if let Some(out) = out {
        let _lock = RunLock::acquire(out)?;
        atomic_write(&out.join("oracle.csv"), report.to_csv().as_bytes())?;
        write_run_files(out, cfg, "oracle-check")?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image_config() -> RunConfig {
        RunConfig::parse(
            r#"
            [schedule]
            num_steps = 4
            [network]
            channels = [2, 4]
            [training]
            batch_size = 2
            num_iters = 3
            checkpoint_every = 2
            [data]
            count = 6
            heldout = 2
            size = 8
            "#,
        )
        .unwrap()
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn missing_dataset_has_its_own_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = train_run(&tiny_image_config(), &dir.path().join("none"), &dir.path().join("run"), false)
            .unwrap_err();
        assert!(matches!(err, Error::MissingDataset { .. }));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn metrics_have_one_row_per_bucket() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_image_config();
        generate_data(&cfg, &dir.path().join("data")).unwrap();
        let summary = train_run(&cfg, &dir.path().join("data"), &dir.path().join("run"), false).unwrap();
        let text = fs::read_to_string(dir.path().join("run").join(METRICS_FILE)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        let rows: usize = summary.records.iter().map(|r| r.sigma_bucket_losses.len()).sum();
        assert_eq!(lines.count(), rows);
        assert!(dir.path().join("run/checkpoints/iter_000002.ckpt").is_file());
        assert!(!dir.path().join("run").join(LOCK_FILE).exists());
    }

    #[test]
    fn eval_reports_unpaired_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        assert!(eval_dirs(&a, &b).is_err());
        write_image(&a.join("x.jpim"), &Grid::zeros(2, 2)).unwrap();
        write_image(&a.join("y.jpim"), &Grid::zeros(2, 2)).unwrap();
        write_image(&b.join("x.jpim"), &Grid::zeros(2, 2)).unwrap();
        let err = eval_dirs(&a, &b).unwrap_err().to_string();
        assert!(err.contains("\"y\""), "{err}");
        write_image(&b.join("y.jpim"), &Grid::filled(2, 2, 0.5)).unwrap();
        let r = eval_dirs(&a, &b).unwrap();
        assert!(r.pairs[0].exact);
        assert!(!r.pairs[1].exact);
    }
}
