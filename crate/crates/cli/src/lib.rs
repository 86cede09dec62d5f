//! Command implementations behind the `crc` binary.
//!
//! Each command returns its machine-readable result as text for stdout;
//! progress goes through `log` to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use crc_core::data::{generate, labels_to_text, load_labels, load_video, SyntheticSpec, Video};
use crc_core::scoring::{score_video, EvalReport, ScoreSeries};
use crc_core::training::{
    full_loss_gradcheck, loss_csv, parse_pairs, resume, training_clips, Checkpoint, Profile, TrainConfig,
    FULL_CHECK_TOL, LOSS_CSV_HEADER,
};
use crc_core::Error;

/// Environment variable overriding the seed of a config file.
pub const SEED_ENV: &str = "CRC_SEED";

pub const TRAIN_VIDEO: &str = "train.crcv";
pub const TEST_VIDEO: &str = "test.crcv";
pub const TEST_LABELS: &str = "test_labels.txt";

const SYNTH_PREFIX: &str = "synth.";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

/// Exit code for an error chain: the first library error found decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Dimension { .. } | Error::BatchSize { .. } => exit::CONFIG,
                Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Inference(_) => exit::DATA,
                Error::Evaluation(_) | Error::Invariant(_) => exit::NUMERIC,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::DATA;
        }
        if let Some(NumericFailure(_)) = cause.downcast_ref::<NumericFailure>() {
            return exit::NUMERIC;
        }
    }
    exit::CONFIG
}

/// A run completed but a numerical acceptance bound was missed.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Flat `key=value` run description: every [`TrainConfig`] key, every
/// [`SyntheticSpec`] key behind a `synth.` prefix, and optional paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    /// Directory holding the videos written by `synth`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::profile(Profile::Synth),
            synth: SyntheticSpec::default(),
            data: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Defaults: the `synth` training profile and the default synthetic
    /// spec. A `profile` line resets the training keys before any other
    /// key is applied.
    pub fn from_text(text: &str) -> crc_core::Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "profile") {
            cfg.train.set("profile", p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> crc_core::Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => match key.strip_prefix(SYNTH_PREFIX) {
                Some(k) => self.synth.set(k, value)?,
                None if TrainConfig::knows(key) => self.train.set(key, value)?,
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.train.to_text();
        for (k, v) in self.synth.to_pairs() {
            writeln!(out, "{SYNTH_PREFIX}{k}={v}").expect("string write");
        }
        for (k, p) in [("data", &self.data), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = p {
                writeln!(out, "{k}={}", p.display()).expect("string write");
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Seed precedence: flag, then environment, then file.
pub fn resolve_seed(file: u64, flag: Option<u64>, env: Option<&str>) -> crc_core::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(file),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes the training video, test video and test labels into `out`.
pub fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<String> {
    let mut run = match spec_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    run.synth.seed = resolve_seed(run.synth.seed, seed, env_seed().as_deref())?;
    info!("generating synthetic videos with seed {}", run.synth.seed);
    let data = generate(&run.synth)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let train = out.join(TRAIN_VIDEO);
    let test = out.join(TEST_VIDEO);
    let labels = out.join(TEST_LABELS);
    let train_bytes = data.train.to_bytes();
    let test_bytes = data.test.to_bytes();
    write_file(&train, &train_bytes)?;
    write_file(&test, &test_bytes)?;
    write_file(&labels, labels_to_text(&data.labels))?;
    let anomalous = data.labels.iter().filter(|&&l| l == 1).count();
    Ok(format!(
        "train={}\ntrain_bytes={}\ntest={}\ntest_bytes={}\nlabels={}\nanomalous_frames={anomalous}\n",
        train.display(),
        train_bytes.len(),
        test.display(),
        test_bytes.len(),
        labels.display(),
    ))
}

/// Path of the loss log written next to a checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

fn load_training_video(data: &Path) -> Result<Video> {
    let path = if data.is_dir() { data.join(TRAIN_VIDEO) } else { data.to_path_buf() };
    load_video(&path).with_context(|| format!("loading training video {}", path.display()))
}

/// Trains (or resumes) and writes the checkpoint plus its loss log.
///
/// On resume the checkpoint's configuration must equal the file's apart
/// from `total_epochs`, which may grow.
pub fn cmd_train(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    resume_from: Option<&Path>,
    seed: Option<u64>,
) -> Result<String> {
    let run = RunConfig::load(config)?;
    let mut cfg = run.train.clone();
    cfg.seed = resolve_seed(cfg.seed, seed, env_seed().as_deref())?;
    let data = data
        .map(Path::to_path_buf)
        .or(run.data.clone())
        .ok_or_else(|| Error::Config("no training data given (flag --data or key data)".into()))?;
    let video = load_training_video(&data)?;
    let clips = training_clips(&video, &cfg)?;

    let start = match resume_from {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let mut expected = ck.config.clone();
            expected.total_epochs = cfg.total_epochs;
            if expected != cfg {
                return Err(Error::Config("resume config differs from the checkpoint beyond total_epochs".into()).into());
            }
            if (ck.epoch as usize) > cfg.total_epochs {
                return Err(Error::Config(format!(
                    "checkpoint already has {} epochs, total_epochs is {}",
                    ck.epoch, cfg.total_epochs
                ))
                .into());
            }
            Checkpoint { config: cfg.clone(), ..ck }
        }
        None => Checkpoint::init(&cfg)?,
    };
    let first_epoch = start.epoch + 1;
    info!("training on {} clips from epoch {first_epoch} to {}", clips.len(), cfg.total_epochs);
    let outcome = resume(start, &clips)?;
    outcome.checkpoint.save(out).with_context(|| format!("writing {}", out.display()))?;

    let log_path = loss_log_path(out);
    let csv = loss_csv(&outcome.log);
    match resume_from {
        Some(_) if log_path.exists() => {
            let mut existing = fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
            existing.push_str(csv.strip_prefix(&format!("{LOSS_CSV_HEADER}\n")).unwrap_or(&csv));
            write_file(&log_path, existing)?;
        }
        _ => write_file(&log_path, csv)?,
    }

    let monitor = &outcome.monitor;
    let mut report = format!(
        "checkpoint={}\nloss_log={}\nepochs={}\ninvariant_checks={}\ninvariant_violations={}\n",
        out.display(),
        log_path.display(),
        outcome.checkpoint.epoch,
        monitor.checks,
        monitor.violations.len()
    );
    if let Some(last) = outcome.log.last() {
        writeln!(report, "final_loss={}", last.loss.total).expect("string write");
    }
    if !monitor.is_clean() {
        warn!("{} invariant violations during training", monitor.violations.len());
        return Err(anyhow::Error::new(NumericFailure(format!(
            "{} invariant violations, first: {}",
            monitor.violations.len(),
            monitor.violations[0]
        )))
        .context(report));
    }
    Ok(report)
}

/// Scores every frame of a video and writes the score CSV.
pub fn cmd_score(ckpt: &Path, video: &Path, out: &Path, labels: Option<&Path>) -> Result<String> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let v = load_video(video).with_context(|| format!("loading video {}", video.display()))?;
    info!("scoring {} frames", v.frames());
    let mut series = score_video(&v, &ck)?;
    if let Some(l) = labels {
        series = series.with_labels(load_labels(l).with_context(|| format!("loading labels {}", l.display()))?)?;
    }
    write_file(out, series.to_csv())?;
    Ok(format!("scores={}\nframes={}\n", out.display(), series.len()))
}

/// Frame-level AUC and EER over the concatenation of every score file.
///
/// Labels come from `labels` (one file per score file) or, when none are
/// given, from the score files' own label column.
pub fn cmd_eval(scores: &[PathBuf], labels: &[PathBuf], roc_out: Option<&Path>) -> Result<String> {
    if scores.is_empty() {
        return Err(Error::Config("no score files given".into()).into());
    }
    if !labels.is_empty() && labels.len() != scores.len() {
        return Err(Error::Config(format!("{} score files but {} label files", scores.len(), labels.len())).into());
    }
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    for (i, path) in scores.iter().enumerate() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let series = ScoreSeries::from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        let l = match labels.get(i) {
            Some(lp) => load_labels(lp).with_context(|| format!("loading labels {}", lp.display()))?,
            None => match series.labels.clone() {
                Some(l) => l,
                None => bail!(Error::Config(format!("{} has no label column and no label file", path.display()))),
            },
        };
        if l.len() != series.len() {
            return Err(Error::Data(format!(
                "{}: {} scores but {} labels",
                path.display(),
                series.len(),
                l.len()
            ))
            .into());
        }
        all_scores.extend_from_slice(&series.normalized);
        all_labels.extend(l);
    }
    let report = EvalReport::new(&all_scores, &all_labels)?;
    if let Some(p) = roc_out {
        write_file(p, report.roc_csv())?;
    }
    Ok(report.to_text())
}

/// Full-loss gradient check without and with the clustering term.
pub fn cmd_gradcheck(seed: u64) -> Result<String> {
    let mut out = String::new();
    let mut worst: f64 = 0.0;
    for (mode, clusters) in [("off", false), ("on", true)] {
        let r = full_loss_gradcheck(seed, clusters)?;
        info!("seed {seed} clustering {mode}: max relative error {:e} over {} entries", r.max_rel_error, r.checked);
        writeln!(out, "clustering_{mode}_max_rel_error={}", r.max_rel_error).expect("string write");
        worst = worst.max(r.max_rel_error);
    }
    writeln!(out, "seed={seed}\ntolerance={FULL_CHECK_TOL}\npass={}", worst < FULL_CHECK_TOL).expect("string write");
    if !(worst < FULL_CHECK_TOL) {
        return Err(anyhow::Error::new(NumericFailure(format!(
            "relative error {worst:e} is not below {FULL_CHECK_TOL:e}"
        )))
        .context(out));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_fixpoint() {
        let text = "profile=tiny\nlambda=4\nsynth.test_frames=500\nsynth.anomalies=10..20,30..40\ndata=/tmp/x\n";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.train.lambda, 4.0);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.synth.anomalies, vec![(10, 20), (30, 40)]);
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour=red\n", "synth.colour=red\n", "synth.seed=x\n"] {
            assert!(matches!(RunConfig::from_text(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(1, Some(3), Some("2")).unwrap(), 3);
        assert_eq!(resolve_seed(1, None, Some("2")).unwrap(), 2);
        assert_eq!(resolve_seed(1, None, None).unwrap(), 1);
        assert!(resolve_seed(1, None, Some("two")).is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e).context("while testing"));
        assert_eq!(code(Error::Config("x".into())), exit::CONFIG);
        assert_eq!(code(Error::Data("x".into())), exit::DATA);
        assert_eq!(code(Error::Format { offset: 3, detail: "x".into() }), exit::DATA);
        assert_eq!(code(Error::Invariant("x".into())), exit::NUMERIC);
        assert_eq!(exit_code(&anyhow::Error::new(NumericFailure("x".into()))), exit::NUMERIC);
    }
}
