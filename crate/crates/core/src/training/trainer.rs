use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::characterizer::{symmetry_deviation, CorrelationSet};
use crate::clustering::{kmeans_fit, ClusterModel};
use crate::data::Video;
use crate::error::{Error, Result};
use crate::init::CrcRng;
use crate::layers::Params;
use crate::numerics::{Tape, Tensor, Var};

use super::adam::{adam_step, AdamHyper};
use super::checkpoint::Checkpoint;
use super::config::{Batching, TrainConfig};
use super::extractor::check_clip;
use super::model::{batch_on_tape, representations, BatchVars, LossBreakdown, ModelVars};

pub const LOSS_CSV_HEADER: &str = "epoch,phase,total,consistency,compact,separate,cluster";

/// Tolerance on softmax row sums.
pub const SOFTMAX_TOL: f64 = 1e-12;
/// Tolerance on memory column norms after a write.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Tolerance on C2/C3 symmetry and unit diagonal.
pub const CORRELATION_TOL: f64 = 1e-9;

/// Mean loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub phase: u8,
    pub loss: LossBreakdown,
}

pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for e in log {
        let l = &e.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.phase, l.total, l.consistency, l.compact, l.separate, l.cluster
        ));
    }
    out
}

/// Counts structural checks made during training and keeps a description
/// of every failure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvariantMonitor {
    pub checks: u64,
    pub violations: Vec<String>,
}

impl InvariantMonitor {
    pub fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            let d = detail();
            warn!("invariant violated: {d}");
            self.violations.push(d);
        }
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Epochs run by this call only.
    pub log: Vec<EpochLog>,
    pub monitor: InvariantMonitor,
}

/// Clips of a normal training video. Window batching needs every clip
/// (stride 1); shuffled batching subsamples by `clip_stride`.
pub fn training_clips(video: &Video, config: &TrainConfig) -> Result<Vec<Tensor>> {
    let stride = match config.batching {
        Batching::Shuffled => config.clip_stride,
        Batching::Windows => 1,
    };
    video.clips(config.clip_len, stride)
}

/// Trains from the seeded initialization of `config`.
pub fn train(clips: &[Tensor], config: &TrainConfig) -> Result<TrainOutcome> {
    resume(Checkpoint::init(config)?, clips)
}

/// Continues training until `checkpoint.config.total_epochs`.
///
/// Epochs up to `phase1_epochs` train without the clustering term. Each
/// later epoch first refreshes the cluster centers from the representations
/// of every training clip (k-means the first time, one center update
/// afterwards) and then trains with the centers held fixed.
pub fn resume(mut ck: Checkpoint, clips: &[Tensor]) -> Result<TrainOutcome> {
    let cfg = ck.config.clone();
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for c in clips {
        check_clip(c, &cfg)?;
    }
    let b = cfg.batch_size;
    if clips.len() < b {
        return Err(Error::Data(format!("{} training clips, batch size is {b}", clips.len())));
    }
    if cfg.use_cluster && cfg.total_epochs > cfg.phase1_epochs && clips.len() < cfg.clusters {
        return Err(Error::Config(format!(
            "{} clusters but only {} training clips",
            cfg.clusters,
            clips.len()
        )));
    }

    let mut monitor = InvariantMonitor::default();
    let mut log = Vec::new();
    while (ck.epoch as usize) < cfg.total_epochs {
        let epoch = ck.epoch + 1;
        let phase2 = cfg.use_cluster && epoch as usize > cfg.phase1_epochs;
        if phase2 {
            let r = representations(clips, &ck.params, &ck.memory, &cfg)?;
            ck.clusters = Some(match &ck.clusters {
                None => kmeans_fit(&r, cfg.clusters, cfg.seed, cfg.kmeans_iters)?.0,
                Some(model) => model.update_centers(&r)?,
            });
        }
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for idx in epoch_batches(clips.len(), b, cfg.batching, &mut ck.rng) {
            let batch: Vec<&Tensor> = idx.iter().map(|&i| &clips[i]).collect();
            let loss = step(&mut ck, &batch, phase2, &mut monitor)?;
            if !loss.total.is_finite() {
                return Err(Error::Invariant(format!("non-finite loss in epoch {epoch}")));
            }
            sum.total += loss.total;
            sum.consistency += loss.consistency;
            sum.compact += loss.compact;
            sum.separate += loss.separate;
            sum.cluster += loss.cluster;
            batches += 1;
        }
        let n = batches as f64;
        let mean = LossBreakdown {
            total: sum.total / n,
            consistency: sum.consistency / n,
            compact: sum.compact / n,
            separate: sum.separate / n,
            cluster: sum.cluster / n,
        };
        ck.epoch = epoch;
        let phase = if phase2 { 2 } else { 1 };
        info!(
            "epoch {epoch} phase {phase}: total {:.6} consistency {:.6} compact {:.6} separate {:.6} cluster {:.6}",
            mean.total, mean.consistency, mean.compact, mean.separate, mean.cluster
        );
        log.push(EpochLog {
            epoch,
            phase,
            loss: mean,
        });
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        monitor,
    })
}

/// Clip indices of every batch of one epoch, in visiting order.
fn epoch_batches(n: usize, b: usize, batching: Batching, rng: &mut CrcRng) -> Vec<Vec<usize>> {
    match batching {
        Batching::Shuffled => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks_exact(b).map(<[usize]>::to_vec).collect()
        }
        Batching::Windows => {
            let offset = rng.gen_range(0..b.min(n - b + 1));
            let mut starts: Vec<usize> = (offset..=n - b).step_by(b).collect();
            starts.shuffle(rng);
            starts.into_iter().map(|s| (s..s + b).collect()).collect()
        }
    }
}

/// One optimizer step on one batch, followed by the memory write.
fn step(ck: &mut Checkpoint, batch: &[&Tensor], phase2: bool, monitor: &mut InvariantMonitor) -> Result<LossBreakdown> {
    let cfg = &ck.config;
    let mut tape = Tape::new();
    let vars = ModelVars::record(&mut tape, &ck.params, true);
    let m = tape.constant(ck.memory.matrix().clone());
    let xs: Vec<Var> = batch.iter().map(|c| tape.constant((*c).clone())).collect();
    let clusters: Option<&ClusterModel> = if phase2 { ck.clusters.as_ref() } else { None };
    let out = batch_on_tape(&mut tape, &vars, m, &xs, clusters, cfg)?;
    let loss = LossBreakdown::from_tape(&tape, &out);
    if !loss.total.is_finite() {
        return Ok(loss);
    }
    let grads = tape.backward(out.total)?;
    let grads: Vec<Tensor> = vars.all.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    check_batch(&tape, &out, monitor);
    adam_step(ck.params.tensors_mut(), &grads, &mut ck.adam, cfg.lr, AdamHyper::default())?;
    monitor.check(ck.params.is_finite(), || "parameters became non-finite".into());

    let features: Vec<Tensor> = out.clips.iter().map(|c| tape.value(c.features).clone()).collect();
    ck.memory = ck.memory.write(&features)?;
    let dev = ck.memory.max_norm_deviation();
    monitor.check(dev <= UNIT_NORM_TOL, || format!("memory column norm off by {dev:e}"));
    Ok(loss)
}

fn check_batch(tape: &Tape, out: &BatchVars, monitor: &mut InvariantMonitor) {
    for c in &out.clips {
        let attn = tape.value(c.attention);
        let (rows, cols) = (attn.shape()[0], attn.shape()[1]);
        let worst = (0..rows)
            .map(|i| (attn.data()[i * cols..(i + 1) * cols].iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        monitor.check(worst <= SOFTMAX_TOL, || format!("attention row sum off by {worst:e}"));
        for (name, v) in [("alpha", c.alpha), ("beta", c.beta)] {
            let vals = tape.value(v).data();
            monitor.check(vals.iter().all(|&x| x > 0.0 && x < 1.0), || {
                format!("{name} left (0, 1): {vals:?}")
            });
        }
    }
    let corr = CorrelationSet {
        c1: tape.value(out.c1).clone(),
        c2: tape.value(out.c2).clone(),
        c3: tape.value(out.c3).clone(),
    };
    let dev = symmetry_deviation(&corr);
    monitor.check(dev <= CORRELATION_TOL, || format!("C2/C3 symmetry or diagonal off by {dev:e}"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{rng_from_seed, uniform};
    use crate::training::config::Profile;

    fn clips(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| uniform(&[16, 16, 4], 0.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig {
            total_epochs: 0,
            phase1_epochs: 0,
            ..TrainConfig::profile(Profile::Tiny)
        };
        let out = train(&clips(4, 0), &cfg).unwrap();
        assert_eq!(out.checkpoint, Checkpoint::init(&cfg).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn same_seed_same_bytes_and_phases() {
        let cfg = TrainConfig {
            phase1_epochs: 1,
            total_epochs: 3,
            ..TrainConfig::profile(Profile::Tiny)
        };
        let data = clips(6, 1);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(loss_csv(&a.log), loss_csv(&b.log));
        let phases: Vec<u8> = a.log.iter().map(|e| e.phase).collect();
        assert_eq!(phases, vec![1, 2, 2]);
        assert_eq!(a.log[0].loss.cluster, 0.0);
        assert!(a.log[1].loss.cluster >= 0.0);
        assert!(a.checkpoint.clusters.is_some());
        assert!(a.monitor.checks > 0);
        assert!(a.monitor.is_clean(), "{:?}", a.monitor.violations);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = TrainConfig {
            phase1_epochs: 1,
            total_epochs: 3,
            ..TrainConfig::profile(Profile::Tiny)
        };
        let data = clips(6, 2);
        let full = train(&data, &cfg).unwrap();
        let first = train(&data, &TrainConfig { total_epochs: 2, ..cfg.clone() }).unwrap();
        let mut ck = Checkpoint::from_bytes(&first.checkpoint.to_bytes()).unwrap();
        ck.config.total_epochs = 3;
        let rest = resume(ck, &data).unwrap();
        assert_eq!(rest.log.len(), 1);
        assert_eq!(rest.log[0].epoch, 3);
        assert_eq!(rest.checkpoint.to_bytes(), full.checkpoint.to_bytes());
    }

    #[test]
    fn empty_and_short_datasets() {
        let cfg = TrainConfig::profile(Profile::Tiny);
        assert!(matches!(train(&[], &cfg), Err(Error::Data(_))));
        let cfg8 = TrainConfig {
            batch_size: 8,
            ..cfg
        };
        assert!(matches!(train(&clips(3, 0), &cfg8), Err(Error::Data(_))));
    }

    #[test]
    fn csv_header_and_rows() {
        let log = [EpochLog {
            epoch: 1,
            phase: 1,
            loss: LossBreakdown {
                total: 1.5,
                consistency: 1.0,
                compact: 2.5,
                separate: 2.5,
                cluster: 0.0,
            },
        }];
        assert_eq!(
            loss_csv(&log),
            "epoch,phase,total,consistency,compact,separate,cluster\n1,1,1.5,1,2.5,2.5,0\n"
        );
    }
}
