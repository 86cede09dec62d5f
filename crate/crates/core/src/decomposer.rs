//! Prototype decomposer: channel-wise split of a feature map `F` and its
//! memory prototype `F'` into private and shared features.
//!
//! Pooled differences between `F` and `F'` pass through two small MLPs whose
//! sigmoid outputs are per-channel difference scores `alpha` (average pooling)
//! and `beta` (max pooling). With `w = (alpha + beta) / 2`:
//!
//! ```text
//! F_p = w ⊛ F        F_s = (1 - w) ⊛ F'
//! ```

use crate::error::{Error, Result};
use crate::init::CrcRng;
use crate::layers::{self, Linear, LinearVars, Params};
use crate::numerics::{Tape, Tensor, Var};

/// Three fully connected layers, ReLU between, sigmoid on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMlp {
    pub layers: [Linear; 3],
}

impl ScoreMlp {
    /// `C -> C/4 -> C/4 -> C`, hidden width at least one.
    pub fn new(channels: usize, rng: &mut CrcRng) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            layers: [
                Linear::new(channels, hidden, rng),
                Linear::new(hidden, hidden, rng),
                Linear::new(hidden, channels, rng),
            ],
        }
    }
}

impl Params for ScoreMlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Params::tensors).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Params::tensors_mut).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposerParams {
    /// Scores from average-pooled differences (`alpha`).
    pub avg_mlp: ScoreMlp,
    /// Scores from max-pooled differences (`beta`).
    pub max_mlp: ScoreMlp,
}

impl DecomposerParams {
    pub fn new(channels: usize, rng: &mut CrcRng) -> Self {
        Self {
            avg_mlp: ScoreMlp::new(channels, rng),
            max_mlp: ScoreMlp::new(channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.avg_mlp.layers[0].inputs()
    }
}

impl Params for DecomposerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.avg_mlp.tensors();
        out.extend(self.max_mlp.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.avg_mlp.tensors_mut();
        out.extend(self.max_mlp.tensors_mut());
        out
    }
}

/// Which pooled branches feed the channel weights. Disabling one branch makes
/// the other branch's score the weight on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingSwitches {
    pub average: bool,
    pub max: bool,
}

impl Default for PoolingSwitches {
    fn default() -> Self {
        Self {
            average: true,
            max: true,
        }
    }
}

/// `(f_avg, f'_avg, f_max, f'_max)` as plain vectors of length C.
pub fn pool_stats(f: &Tensor, prototype: &Tensor) -> Result<[Vec<f64>; 4]> {
    if f.shape() != prototype.shape() {
        return Err(Error::dim(
            "pool_stats",
            format!("{:?} vs {:?}", f.shape(), prototype.shape()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let p = tape.constant(prototype.clone());
    let outs = [
        tape.spatial_mean(x)?,
        tape.spatial_mean(p)?,
        tape.spatial_max(x)?,
        tape.spatial_max(p)?,
    ];
    Ok(outs.map(|v| tape.value(v).data().to_vec()))
}

/// Parameters of one MLP recorded on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: [LinearVars; 3],
}

impl MlpVars {
    pub fn bind(it: &mut impl Iterator<Item = Var>) -> Self {
        Self {
            layers: [LinearVars::bind(it), LinearVars::bind(it), LinearVars::bind(it)],
        }
    }

    /// `[1, C]` input row to `[1, C]` scores in (0, 1).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(tape, h)?;
            h = if i < 2 { tape.relu(z) } else { tape.sigmoid(z) };
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct DecomposerVars {
    pub avg: MlpVars,
    pub max: MlpVars,
}

impl DecomposerVars {
    /// Binds vars recorded in [`DecomposerParams::tensors`] order.
    pub fn bind(it: &mut impl Iterator<Item = Var>) -> Self {
        Self {
            avg: MlpVars::bind(it),
            max: MlpVars::bind(it),
        }
    }

    pub fn record(tape: &mut Tape, params: &DecomposerParams, trainable: bool) -> Self {
        Self::bind(&mut layers::record(tape, params, trainable).into_iter())
    }
}

/// Decomposition of one map, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecomposedVars {
    pub private: Var,
    pub shared: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// `alpha = MLP(f_avg - f'_avg)`, `beta = MLP(f_max - f'_max)`.
pub fn difference_scores_on_tape(
    tape: &mut Tape,
    vars: &DecomposerVars,
    f: Var,
    prototype: Var,
) -> Result<(Var, Var)> {
    let fa = tape.spatial_mean(f)?;
    let pa = tape.spatial_mean(prototype)?;
    let fm = tape.spatial_max(f)?;
    let pm = tape.spatial_max(prototype)?;
    let da = tape.sub(fa, pa)?;
    let dm = tape.sub(fm, pm)?;
    let alpha = vars.avg.forward(tape, da)?;
    let beta = vars.max.forward(tape, dm)?;
    Ok((alpha, beta))
}

/// `F_p = w ⊛ F`, `F_s = (1 - w) ⊛ F'` with `w` the channel weights.
pub fn decompose_on_tape(tape: &mut Tape, f: Var, prototype: Var, weight: Var) -> Result<(Var, Var)> {
    let private = tape.channel_scale(f, weight)?;
    let neg = tape.scale(weight, -1.0);
    let rest = tape.add_scalar(neg, 1.0);
    let shared = tape.channel_scale(prototype, rest)?;
    Ok((private, shared))
}

/// Full decomposer pass: scores, channel weights, split.
pub fn decomposer_on_tape(
    tape: &mut Tape,
    vars: &DecomposerVars,
    f: Var,
    prototype: Var,
    pooling: PoolingSwitches,
) -> Result<DecomposedVars> {
    let (alpha, beta) = difference_scores_on_tape(tape, vars, f, prototype)?;
    let weight = match (pooling.average, pooling.max) {
        (true, true) => {
            let s = tape.add(alpha, beta)?;
            tape.scale(s, 0.5)
        }
        (true, false) => alpha,
        (false, true) => beta,
        (false, false) => {
            return Err(Error::Config("at least one pooling branch must be enabled".into()))
        }
    };
    let (private, shared) = decompose_on_tape(tape, f, prototype, weight)?;
    Ok(DecomposedVars {
        private,
        shared,
        alpha,
        beta,
    })
}

/// Eager difference scores for given pooled statistics.
pub fn difference_scores(stats: &[Vec<f64>; 4], params: &DecomposerParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = params.channels();
    if stats.iter().any(|s| s.len() != c) {
        return Err(Error::dim("difference_scores", format!("expected {c} channels")));
    }
    let mut tape = Tape::new();
    let vars = DecomposerVars::record(&mut tape, params, false);
    let diff = |a: &Vec<f64>, b: &Vec<f64>| Tensor::row(a.iter().zip(b).map(|(x, y)| x - y).collect());
    let da = tape.constant(diff(&stats[0], &stats[1]));
    let dm = tape.constant(diff(&stats[2], &stats[3]));
    let alpha = vars.avg.forward(&mut tape, da)?;
    let beta = vars.max.forward(&mut tape, dm)?;
    Ok((tape.value(alpha).data().to_vec(), tape.value(beta).data().to_vec()))
}

/// Eager split of `F`, `F'` with per-channel scores.
pub fn decompose(f: &Tensor, prototype: &Tensor, alpha: &[f64], beta: &[f64]) -> Result<(Tensor, Tensor)> {
    let c = *f.shape().last().unwrap();
    if alpha.len() != c || beta.len() != c {
        return Err(Error::dim("decompose", format!("scores must have {c} entries")));
    }
    if f.shape() != prototype.shape() {
        return Err(Error::dim("decompose", "feature and prototype shapes differ"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let p = tape.constant(prototype.clone());
    let w = tape.constant(Tensor::row(
        alpha.iter().zip(beta).map(|(a, b)| (a + b) / 2.0).collect(),
    ));
    let (fp, fs) = decompose_on_tape(&mut tape, x, p, w)?;
    Ok((tape.value(fp).clone(), tape.value(fs).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{self, rng_from_seed};

    #[test]
    fn pool_stats_cases() {
        let c = Tensor::full([2, 3, 2], 1.5);
        let [a, pa, m, pm] = pool_stats(&c, &c).unwrap();
        assert_eq!(a, vec![1.5, 1.5]);
        assert_eq!(m, a);
        assert_eq!(pa, pm);

        let v = Tensor::new([1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        let [a, _, m, _] = pool_stats(&v, &v).unwrap();
        assert_eq!(a, v.data());
        assert_eq!(m, v.data());

        let f = Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let [a, _, m, _] = pool_stats(&f, &f).unwrap();
        assert_eq!(a, vec![2.5]);
        assert_eq!(m, vec![4.0]);

        assert!(pool_stats(&f, &Tensor::zeros([1, 4, 1])).is_err());
    }

    #[test]
    fn equal_inputs_give_half_scores() {
        let mut rng = rng_from_seed(1);
        let params = DecomposerParams::new(8, &mut rng);
        let f = init::uniform(&[2, 2, 8], -1.0, 1.0, &mut rng);
        let stats = pool_stats(&f, &f).unwrap();
        let (alpha, beta) = difference_scores(&stats, &params).unwrap();
        assert!(alpha.iter().chain(&beta).all(|&v| v == 0.5));
    }

    #[test]
    fn scores_stay_in_open_unit_interval() {
        let mut rng = rng_from_seed(2);
        let params = DecomposerParams::new(8, &mut rng);
        for scale in [1e-3, 1.0, 30.0] {
            let f = init::uniform(&[2, 2, 8], -scale, scale, &mut rng);
            let p = init::uniform(&[2, 2, 8], -scale, scale, &mut rng);
            let (alpha, beta) = difference_scores(&pool_stats(&f, &p).unwrap(), &params).unwrap();
            assert!(alpha.iter().chain(&beta).all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_matches_independent_mlp() {
        let mut rng = rng_from_seed(9);
        let params = DecomposerParams::new(8, &mut rng);
        let f = init::uniform(&[3, 2, 8], -1.0, 1.0, &mut rng);
        let p = init::uniform(&[3, 2, 8], -1.0, 1.0, &mut rng);
        let stats = pool_stats(&f, &p).unwrap();
        let (alpha, _) = difference_scores(&stats, &params).unwrap();

        // plain loops over the same weights
        let mut h: Vec<f64> = stats[0].iter().zip(&stats[1]).map(|(a, b)| a - b).collect();
        for (i, layer) in params.avg_mlp.layers.iter().enumerate() {
            let (rows, cols) = (layer.inputs(), layer.outputs());
            let mut next = layer.bias.data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    next[c] += h[r] * layer.weight.data()[r * cols + c];
                }
            }
            h = if i < 2 {
                next.into_iter().map(|v| v.max(0.0)).collect()
            } else {
                next.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
            };
        }
        for (a, b) in alpha.iter().zip(&h) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decompose_extremes() {
        let mut rng = rng_from_seed(4);
        let f = init::uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let p = init::uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let (fp, fs) = decompose(&f, &p, &[1.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(fp, f);
        assert!(fs.data().iter().all(|&v| v == 0.0));
        let (fp, fs) = decompose(&f, &p, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(fp.data().iter().all(|&v| v == 0.0));
        assert_eq!(fs, p);
        let (fp, fs) = decompose(&f, &f, &[0.5; 3], &[0.5; 3]).unwrap();
        let half = f.map(|v| 0.5 * v);
        assert_eq!(fp, half);
        assert_eq!(fs, half);
    }

    #[test]
    fn decompose_rejects_bad_score_length() {
        let f = Tensor::zeros([1, 1, 3]);
        assert!(decompose(&f, &f, &[0.5; 2], &[0.5; 3]).is_err());
    }
}
