use crate::characterizer::{consistency_on_tape, correlations_on_tape, CicParams, CicVars};
use crate::clustering::{clustering_loss_on_tape, ClusterModel};
use crate::decomposer::{decomposer_on_tape, DecomposerParams, DecomposerVars};
use crate::error::{Error, Result};
use crate::init::CrcRng;
use crate::layers::{self, Params};
use crate::memory::{compactness_on_tape, read_on_tape, separateness_on_tape, MemoryPool};
use crate::numerics::{Tape, Tensor, Var};

use super::config::TrainConfig;
use super::extractor::{check_clip, ExtractorParams, ExtractorVars};

/// All gradient-trained parameters, in recording order: extractor,
/// decomposer, characterizer.
#[derive(Clone, Debug, PartialEq)]
pub struct CrcParams {
    pub extractor: ExtractorParams,
    pub decomposer: DecomposerParams,
    pub cic: CicParams,
}

impl CrcParams {
    pub fn new(cfg: &TrainConfig, rng: &mut CrcRng) -> Result<Self> {
        let extractor = ExtractorParams::new(cfg, rng)?;
        let decomposer = DecomposerParams::new(cfg.channels(), rng);
        let (h, w) = cfg.feature_dims();
        let cic = CicParams::new((h, w, cfg.channels()), cfg.cic_width, cfg.factors, rng)?;
        Ok(Self {
            extractor,
            decomposer,
            cic,
        })
    }

    /// Tensor counts of the three groups, in recording order.
    pub fn group_sizes(&self) -> [usize; 3] {
        [
            self.extractor.tensors().len(),
            self.decomposer.tensors().len(),
            self.cic.tensors().len(),
        ]
    }
}

impl Params for CrcParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.extractor.tensors();
        out.extend(self.decomposer.tensors());
        out.extend(self.cic.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.extractor.tensors_mut();
        out.extend(self.decomposer.tensors_mut());
        out.extend(self.cic.tensors_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub extractor: ExtractorVars,
    pub decomposer: DecomposerVars,
    pub cic: CicVars,
    /// Every recorded parameter var, aligned with `CrcParams::tensors`.
    pub all: Vec<Var>,
}

impl ModelVars {
    pub fn record(tape: &mut Tape, params: &CrcParams, trainable: bool) -> Self {
        let all = layers::record(tape, params, trainable);
        Self::bind(params, all)
    }

    /// Binds vars given in `CrcParams::tensors` order.
    pub fn bind(params: &CrcParams, all: Vec<Var>) -> Self {
        let mut it = all.clone().into_iter();
        let extractor = ExtractorVars::bind(&params.extractor, &mut it);
        let decomposer = DecomposerVars::bind(&mut it);
        let cic = CicVars::bind(&params.cic, &mut it);
        debug_assert!(it.next().is_none());
        Self {
            extractor,
            decomposer,
            cic,
            all,
        }
    }
}

/// Per-clip intermediate results of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClipVars {
    pub features: Var,
    pub attention: Var,
    pub alpha: Var,
    pub beta: Var,
    /// `[1, n]` shared-branch representation.
    pub r: Var,
    /// `[1, n]` private-branch representation.
    pub r_tilde: Var,
}

/// Runs one clip through extractor, memory read, decomposer and CiC.
pub fn clip_on_tape(tape: &mut Tape, vars: &ModelVars, memory: Var, clip: Var, cfg: &TrainConfig) -> Result<ClipVars> {
    let features = vars.extractor.forward(tape, clip, cfg.final_relu)?;
    let read = read_on_tape(tape, memory, features)?;
    let parts = decomposer_on_tape(tape, &vars.decomposer, features, read.prototype, cfg.pooling)?;
    let r = vars.cic.forward(tape, parts.shared)?;
    let r_tilde = vars.cic.forward(tape, parts.private)?;
    Ok(ClipVars {
        features,
        attention: read.attention,
        alpha: parts.alpha,
        beta: parts.beta,
        r,
        r_tilde,
    })
}

/// Loss vars of one batch; every term is a scalar.
#[derive(Clone, Debug)]
pub struct BatchVars {
    pub total: Var,
    pub consistency: Var,
    pub compact: Var,
    pub separate: Var,
    /// Zero constant when the clustering term is off.
    pub cluster: Var,
    pub clips: Vec<ClipVars>,
    pub r: Var,
    pub r_tilde: Var,
    pub c1: Var,
    pub c2: Var,
    pub c3: Var,
}

/// Plain values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub consistency: f64,
    pub compact: f64,
    pub separate: f64,
    pub cluster: f64,
}

impl LossBreakdown {
    pub fn from_tape(tape: &Tape, b: &BatchVars) -> Self {
        Self {
            total: tape.value(b.total).item(),
            consistency: tape.value(b.consistency).item(),
            compact: tape.value(b.compact).item(),
            separate: tape.value(b.separate).item(),
            cluster: tape.value(b.cluster).item(),
        }
    }
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64))
}

/// Total loss of one batch of stacked clips:
/// `consistency + μ_c·compact + μ_s·separate [+ μ_k·cluster]`.
/// The clustering term enters when `clusters` is given.
pub fn batch_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    memory: Var,
    clips: &[Var],
    clusters: Option<&ClusterModel>,
    cfg: &TrainConfig,
) -> Result<BatchVars> {
    if clips.len() < 2 {
        return Err(Error::BatchSize {
            got: clips.len(),
            min: 2,
        });
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    for &c in clips {
        per_clip.push(clip_on_tape(tape, vars, memory, c, cfg)?);
    }
    let r = tape.stack_rows(&per_clip.iter().map(|c| c.r).collect::<Vec<_>>())?;
    let r_tilde = tape.stack_rows(&per_clip.iter().map(|c| c.r_tilde).collect::<Vec<_>>())?;
    let (c1, c2, c3) = correlations_on_tape(tape, r, r_tilde)?;
    let consistency = consistency_on_tape(tape, (c1, c2, c3), &cfg.consistency_terms())?;

    let mut compacts = Vec::with_capacity(clips.len());
    let mut separates = Vec::with_capacity(clips.len());
    for c in &per_clip {
        compacts.push(compactness_on_tape(tape, memory, c.features)?);
        separates.push(separateness_on_tape(tape, memory, c.features, cfg.margin)?);
    }
    let compact = mean_of(tape, &compacts)?;
    let separate = mean_of(tape, &separates)?;

    let cluster = match clusters {
        Some(model) => clustering_loss_on_tape(tape, r, model)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };

    let wc = tape.scale(compact, cfg.mu_compact);
    let ws = tape.scale(separate, cfg.mu_separate);
    let mut total = tape.add(consistency, wc)?;
    total = tape.add(total, ws)?;
    if clusters.is_some() {
        let wk = tape.scale(cluster, cfg.mu_cluster);
        total = tape.add(total, wk)?;
    }
    Ok(BatchVars {
        total,
        consistency,
        compact,
        separate,
        cluster,
        clips: per_clip,
        r,
        r_tilde,
        c1,
        c2,
        c3,
    })
}

/// Loss terms of a batch without recording gradients.
pub fn total_loss(
    clips: &[Tensor],
    params: &CrcParams,
    memory: &MemoryPool,
    clusters: Option<&ClusterModel>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    for c in clips {
        check_clip(c, cfg)?;
    }
    let mut tape = Tape::new();
    let vars = ModelVars::record(&mut tape, params, false);
    let m = tape.constant(memory.matrix().clone());
    let xs: Vec<Var> = clips.iter().map(|c| tape.constant(c.clone())).collect();
    let batch = batch_on_tape(&mut tape, &vars, m, &xs, clusters, cfg)?;
    Ok(LossBreakdown::from_tape(&tape, &batch))
}

/// Inference-time quantities of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEmbedding {
    pub features: Tensor,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub r: Vec<f64>,
    pub r_tilde: Vec<f64>,
}

/// Forward pass of one clip against a frozen memory.
pub fn embed_clip(clip: &Tensor, params: &CrcParams, memory: &MemoryPool, cfg: &TrainConfig) -> Result<ClipEmbedding> {
    check_clip(clip, cfg)?;
    let mut tape = Tape::new();
    let vars = ModelVars::record(&mut tape, params, false);
    let m = tape.constant(memory.matrix().clone());
    let x = tape.constant(clip.clone());
    let out = clip_on_tape(&mut tape, &vars, m, x, cfg)?;
    Ok(ClipEmbedding {
        features: tape.value(out.features).clone(),
        alpha: tape.value(out.alpha).data().to_vec(),
        beta: tape.value(out.beta).data().to_vec(),
        r: tape.value(out.r).data().to_vec(),
        r_tilde: tape.value(out.r_tilde).data().to_vec(),
    })
}

/// Shared-branch representations of every clip, one row each.
pub fn representations(clips: &[Tensor], params: &CrcParams, memory: &MemoryPool, cfg: &TrainConfig) -> Result<Tensor> {
    let rows = clips
        .iter()
        .map(|c| embed_clip(c, params, memory, cfg).map(|e| e.r))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characterizer::{characterize, consistency_loss, correlation_matrices, CausalBatch};
    use crate::clustering::kmeans_fit;
    use crate::decomposer::{decompose, difference_scores, pool_stats};
    use crate::init::{rng_from_seed, uniform};
    use crate::training::config::Profile;
    use crate::training::extractor::extract;

    fn setup(seed: u64) -> (TrainConfig, CrcParams, MemoryPool, Vec<Tensor>) {
        let cfg = TrainConfig::profile(Profile::Tiny);
        let mut rng = rng_from_seed(seed);
        let params = CrcParams::new(&cfg, &mut rng).unwrap();
        let memory = MemoryPool::random(cfg.channels(), cfg.memory_entries, &mut rng).unwrap();
        let clips = (0..3).map(|_| uniform(&[16, 16, 4], 0.0, 1.0, &mut rng)).collect();
        (cfg, params, memory, clips)
    }

    /// Recomputes every term through the eager component functions.
    fn termwise(
        clips: &[Tensor],
        params: &CrcParams,
        memory: &MemoryPool,
        clusters: Option<&ClusterModel>,
        cfg: &TrainConfig,
    ) -> LossBreakdown {
        let mut shared = Vec::new();
        let mut private = Vec::new();
        let (mut compact, mut separate) = (0.0, 0.0);
        for c in clips {
            let f = extract(c, &params.extractor, cfg).unwrap();
            let proto = memory.read(&f).unwrap();
            let stats = pool_stats(&f, &proto).unwrap();
            let (a, b) = difference_scores(&stats, &params.decomposer).unwrap();
            let (fp, fs) = decompose(&f, &proto, &a, &b).unwrap();
            shared.push(fs);
            private.push(fp);
            compact += memory.compactness_loss(&f).unwrap() / clips.len() as f64;
            separate += memory.separateness_loss(&f, cfg.margin).unwrap() / clips.len() as f64;
        }
        let r = characterize(&shared, &params.cic).unwrap();
        let rt = characterize(&private, &params.cic).unwrap();
        let corr = correlation_matrices(&CausalBatch::new(r.clone(), rt).unwrap()).unwrap();
        let consistency = consistency_loss(&corr, &cfg.consistency_terms()).unwrap();
        let cluster = clusters.map_or(0.0, |m| m.clustering_loss(&r).unwrap());
        LossBreakdown {
            total: consistency
                + cfg.mu_compact * compact
                + cfg.mu_separate * separate
                + cfg.mu_cluster * cluster,
            consistency,
            compact,
            separate,
            cluster,
        }
    }

    fn close(a: &LossBreakdown, b: &LossBreakdown) {
        for (x, y) in [
            (a.total, b.total),
            (a.consistency, b.consistency),
            (a.compact, b.compact),
            (a.separate, b.separate),
            (a.cluster, b.cluster),
        ] {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn total_loss_matches_termwise_oracle() {
        for seed in 0..3 {
            let (cfg, params, memory, clips) = setup(seed);
            let got = total_loss(&clips, &params, &memory, None, &cfg).unwrap();
            close(&got, &termwise(&clips, &params, &memory, None, &cfg));

            let r = representations(&clips, &params, &memory, &cfg).unwrap();
            let (model, _) = kmeans_fit(&r, 2, seed, 20).unwrap();
            let got = total_loss(&clips, &params, &memory, Some(&model), &cfg).unwrap();
            close(&got, &termwise(&clips, &params, &memory, Some(&model), &cfg));
        }
    }

    #[test]
    fn phases_differ_by_weighted_cluster_term() {
        let (cfg, params, memory, clips) = setup(4);
        let r = representations(&clips, &params, &memory, &cfg).unwrap();
        let (model, _) = kmeans_fit(&r, 2, 0, 20).unwrap();
        let p1 = total_loss(&clips, &params, &memory, None, &cfg).unwrap();
        let p2 = total_loss(&clips, &params, &memory, Some(&model), &cfg).unwrap();
        assert_eq!(p1.cluster, 0.0);
        assert!(p2.cluster >= 0.0);
        let diff = p2.total - p1.total;
        assert!((diff - cfg.mu_cluster * p2.cluster).abs() < 1e-12);
    }

    #[test]
    fn single_clip_batch_is_rejected() {
        let (cfg, params, memory, clips) = setup(0);
        assert!(matches!(
            total_loss(&clips[..1], &params, &memory, None, &cfg),
            Err(Error::BatchSize { got: 1, min: 2 })
        ));
    }

    #[test]
    fn group_sizes_cover_all_tensors() {
        let (_, params, _, _) = setup(0);
        let sizes = params.group_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), params.tensors().len());
        assert_eq!(sizes, [10, 12, 20]);
    }
}
