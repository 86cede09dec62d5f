use crate::clustering::kmeans_fit;
use crate::error::Result;
use crate::init::{rng_from_seed, uniform};
use crate::layers::Params;
use crate::numerics::{grad_check_many, GradCheckReport, Tensor, Var};

use super::checkpoint::Checkpoint;
use super::config::{Profile, TrainConfig};
use super::model::{batch_on_tape, representations, ModelVars};

/// Acceptance bound on the relative error of the full-loss check.
pub const FULL_CHECK_TOL: f64 = 1e-4;
/// Initial finite-difference step.
pub const FULL_CHECK_STEP: f64 = 1e-3;

/// Finite-difference check of the total loss w.r.t. every trainable tensor
/// on the tiny profile (b = 2, 16x16 frames, C = 8, n = 4, N = 4).
///
/// With `with_clusters`, centers are fitted on extra random clips and the
/// clustering term is part of the loss.
pub fn full_loss_gradcheck(seed: u64, with_clusters: bool) -> Result<GradCheckReport> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::profile(Profile::Tiny)
    };
    let ck = Checkpoint::init(&cfg)?;
    let mut rng = rng_from_seed(seed.wrapping_add(0x5eed));
    let shape = [cfg.height, cfg.width, cfg.clip_channels()];
    let mut clip = || uniform(&shape, 0.0, 1.0, &mut rng);
    let batch: Vec<Tensor> = (0..cfg.batch_size).map(|_| clip()).collect();
    let clusters = if with_clusters {
        let pool: Vec<Tensor> = (0..6).map(|_| clip()).collect();
        let r = representations(&pool, &ck.params, &ck.memory, &cfg)?;
        Some(kmeans_fit(&r, cfg.clusters, seed, cfg.kmeans_iters)?.0)
    } else {
        None
    };
    let inputs: Vec<Tensor> = ck.params.tensors().into_iter().cloned().collect();
    grad_check_many(
        |tape, vars: &[Var]| {
            let model = ModelVars::bind(&ck.params, vars.to_vec());
            let m = tape.constant(ck.memory.matrix().clone());
            let xs: Vec<Var> = batch.iter().map(|c| tape.constant(c.clone())).collect();
            let out = batch_on_tape(tape, &model, m, &xs, clusters.as_ref(), &cfg)?;
            Ok(out.total)
        },
        &inputs,
        FULL_CHECK_STEP,
    )
}
