//! Causality-inspired characterizer (CiC).
//!
//! One shared encoder maps the shared and private features of every clip in
//! a batch to `n` causal factors, giving `R` (shared branch) and `R̃`
//! (private branch), both `[b, n]`. Correlations are taken between factor
//! columns across the batch:
//!
//! ```text
//! C1(i, j) = cos(R[:, i], R̃[:, j])
//! C2(i, j) = cos(R[:, i], R[:, j])
//! C3(i, j) = cos(R̃[:, i], R̃[:, j])
//! loss = λ‖C1 − I‖² + ‖C2 − I‖² + ‖C3 − I‖²
//! ```
//!
//! The diagonal of the C1 term carries the per-factor agreement between the
//! two branches; there is no separate agreement objective.

use crate::error::{Error, Result};
use crate::init::CrcRng;
use crate::layers::{self, Conv, ConvVars, Linear, LinearVars, Params};
use crate::numerics::{fro_sq_diff, Tape, Tensor, Var};

pub const CIC_BLOCKS: usize = 3;

/// `relu(conv_b(relu(conv_a(x))) + skip(x))`, downsampling by two.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv_a: Conv,
    pub conv_b: Conv,
    pub skip: Conv,
}

impl ResidualBlock {
    fn new(inputs: usize, width: usize, rng: &mut CrcRng) -> Self {
        Self {
            conv_a: Conv::new(3, inputs, width, 2, rng),
            conv_b: Conv::new(3, width, width, 1, rng),
            skip: Conv::new(1, inputs, width, 2, rng),
        }
    }
}

impl Params for ResidualBlock {
    fn tensors(&self) -> Vec<&Tensor> {
        [&self.conv_a, &self.conv_b, &self.skip]
            .into_iter()
            .flat_map(Params::tensors)
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conv_a.tensors_mut();
        out.extend(self.conv_b.tensors_mut());
        out.extend(self.skip.tensors_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CicParams {
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

impl CicParams {
    /// Encoder for `[h, w, channels]` maps producing `factors` outputs.
    /// Requires `2 <= factors <= h·w·channels / 4`.
    pub fn new(
        (h, w, channels): (usize, usize, usize),
        width: usize,
        factors: usize,
        rng: &mut CrcRng,
    ) -> Result<Self> {
        if factors < 2 {
            return Err(Error::Config(format!("need at least 2 causal factors, got {factors}")));
        }
        if factors > h * w * channels / 4 {
            return Err(Error::Config(format!(
                "{factors} causal factors is not small against a {h}x{w}x{channels} feature map"
            )));
        }
        if width == 0 {
            return Err(Error::Config("characterizer width must be positive".into()));
        }
        let mut blocks = Vec::with_capacity(CIC_BLOCKS);
        let mut inputs = channels;
        for _ in 0..CIC_BLOCKS {
            blocks.push(ResidualBlock::new(inputs, width, rng));
            inputs = width;
        }
        Ok(Self {
            blocks,
            head: Linear::new(width, factors, rng),
        })
    }

    pub fn factors(&self) -> usize {
        self.head.outputs()
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].conv_a.inputs()
    }
}

impl Params for CicParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(Params::tensors).collect();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(Params::tensors_mut).collect();
        out.extend(self.head.tensors_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct CicVars {
    blocks: Vec<[ConvVars; 3]>,
    head: LinearVars,
}

impl CicVars {
    pub fn bind(params: &CicParams, it: &mut impl Iterator<Item = Var>) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|b| {
                [
                    ConvVars::bind(&b.conv_a, it),
                    ConvVars::bind(&b.conv_b, it),
                    ConvVars::bind(&b.skip, it),
                ]
            })
            .collect();
        Self {
            blocks,
            head: LinearVars::bind(it),
        }
    }

    pub fn record(tape: &mut Tape, params: &CicParams, trainable: bool) -> Self {
        Self::bind(params, &mut layers::record(tape, params, trainable).into_iter())
    }

    /// `[H, W, C]` map to a `[1, n]` causal representation.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for [a, b, skip] in &self.blocks {
            let y = a.forward(tape, h)?;
            let y = tape.relu(y);
            let y = b.forward(tape, y)?;
            let s = skip.forward(tape, h)?;
            let y = tape.add(y, s)?;
            h = tape.relu(y);
        }
        let pooled = tape.spatial_mean(h)?;
        self.head.forward(tape, pooled)
    }
}

/// Shared-branch and private-branch representations of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalBatch {
    pub r: Tensor,
    pub r_tilde: Tensor,
}

impl CausalBatch {
    pub fn new(r: Tensor, r_tilde: Tensor) -> Result<Self> {
        let (b, _) = r.dims2("causal batch")?;
        if r.shape() != r_tilde.shape() {
            return Err(Error::dim(
                "causal batch",
                format!("{:?} vs {:?}", r.shape(), r_tilde.shape()),
            ));
        }
        if b < 2 {
            return Err(Error::BatchSize { got: b, min: 2 });
        }
        Ok(Self { r, r_tilde })
    }

    pub fn batch_size(&self) -> usize {
        self.r.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSet {
    pub c1: Tensor,
    pub c2: Tensor,
    pub c3: Tensor,
}

/// Which correlation constraints enter the loss, and the weight on C1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyTerms {
    pub lambda: f64,
    pub c1: bool,
    pub c2: bool,
    pub c3: bool,
}

impl ConsistencyTerms {
    pub fn all(lambda: f64) -> Self {
        Self {
            lambda,
            c1: true,
            c2: true,
            c3: true,
        }
    }
}

/// Runs the characterizer on every map; row `i` of the result belongs to
/// `features[i]`.
pub fn characterize(features: &[Tensor], params: &CicParams) -> Result<Tensor> {
    if features.len() < 2 {
        return Err(Error::BatchSize {
            got: features.len(),
            min: 2,
        });
    }
    let shape = features[0].shape();
    if features.iter().any(|f| f.shape() != shape) {
        return Err(Error::dim("characterize", "feature maps differ in shape"));
    }
    let mut tape = Tape::new();
    let vars = CicVars::record(&mut tape, params, false);
    let mut rows = Vec::with_capacity(features.len());
    for f in features {
        let x = tape.constant(f.clone());
        rows.push(vars.forward(&mut tape, x)?);
    }
    let r = tape.stack_rows(&rows)?;
    Ok(tape.value(r).clone())
}

/// `(C1, C2, C3)` between factor columns of `[b, n]` representations.
pub fn correlations_on_tape(tape: &mut Tape, r: Var, r_tilde: Var) -> Result<(Var, Var, Var)> {
    let rn = tape.l2_normalize(r, 0)?;
    let tn = tape.l2_normalize(r_tilde, 0)?;
    let rnt = tape.transpose(rn)?;
    let tnt = tape.transpose(tn)?;
    let c1 = tape.matmul(rnt, tn)?;
    let c2 = tape.matmul(rnt, rn)?;
    let c3 = tape.matmul(tnt, tn)?;
    Ok((c1, c2, c3))
}

/// `‖c − I‖²_F` on a tape.
pub fn identity_gap_on_tape(tape: &mut Tape, c: Var) -> Result<Var> {
    let n = tape.value(c).dims2("identity gap")?.0;
    let eye = tape.constant(Tensor::eye(n));
    let d = tape.sub(c, eye)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Weighted sum of the enabled identity gaps.
pub fn consistency_on_tape(
    tape: &mut Tape,
    (c1, c2, c3): (Var, Var, Var),
    terms: &ConsistencyTerms,
) -> Result<Var> {
    let mut parts = Vec::new();
    if terms.c1 {
        let g = identity_gap_on_tape(tape, c1)?;
        parts.push(tape.scale(g, terms.lambda));
    }
    if terms.c2 {
        parts.push(identity_gap_on_tape(tape, c2)?);
    }
    if terms.c3 {
        parts.push(identity_gap_on_tape(tape, c3)?);
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(total)
}

pub fn correlation_matrices(batch: &CausalBatch) -> Result<CorrelationSet> {
    let mut tape = Tape::new();
    let r = tape.constant(batch.r.clone());
    let t = tape.constant(batch.r_tilde.clone());
    let (c1, c2, c3) = correlations_on_tape(&mut tape, r, t)?;
    Ok(CorrelationSet {
        c1: tape.value(c1).clone(),
        c2: tape.value(c2).clone(),
        c3: tape.value(c3).clone(),
    })
}

pub fn consistency_loss(corr: &CorrelationSet, terms: &ConsistencyTerms) -> Result<f64> {
    if !(terms.lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {}", terms.lambda)));
    }
    let eye = Tensor::eye(corr.c1.shape()[0]);
    let mut total = 0.0;
    if terms.c1 {
        total += terms.lambda * fro_sq_diff(&corr.c1, &eye)?;
    }
    if terms.c2 {
        total += fro_sq_diff(&corr.c2, &eye)?;
    }
    if terms.c3 {
        total += fro_sq_diff(&corr.c3, &eye)?;
    }
    Ok(total)
}

/// Largest violation of symmetry or unit diagonal over C2 and C3.
pub fn symmetry_deviation(corr: &CorrelationSet) -> f64 {
    let mut worst: f64 = 0.0;
    for c in [&corr.c2, &corr.c3] {
        let n = c.shape()[0];
        for i in 0..n {
            worst = worst.max((c.at2(i, i) - 1.0).abs());
            for j in 0..i {
                worst = worst.max((c.at2(i, j) - c.at2(j, i)).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{self, rng_from_seed};

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn factor_count_bounds() {
        let mut rng = rng_from_seed(0);
        assert!(CicParams::new((2, 2, 8), 8, 1, &mut rng).is_err());
        assert!(CicParams::new((2, 2, 8), 8, 9, &mut rng).is_err());
        assert!(CicParams::new((2, 2, 8), 8, 8, &mut rng).is_ok());
    }

    #[test]
    fn characterize_shape_and_identical_rows() {
        let mut rng = rng_from_seed(7);
        let params = CicParams::new((4, 4, 6), 6, 5, &mut rng).unwrap();
        let f = init::uniform(&[4, 4, 6], -1.0, 1.0, &mut rng);
        let g = init::uniform(&[4, 4, 6], -1.0, 1.0, &mut rng);
        let r = characterize(&[f.clone(), g, f.clone()], &params).unwrap();
        assert_eq!(r.shape(), &[3, 5]);
        assert_eq!(r.row_slice(0), r.row_slice(2));
        assert!(matches!(
            characterize(&[f], &params),
            Err(Error::BatchSize { got: 1, min: 2 })
        ));
    }

    #[test]
    fn equal_branches_give_equal_matrices() {
        let r = m(&[vec![1.0, 2.0, -1.0], vec![0.5, -1.0, 2.0], vec![3.0, 0.0, 1.0]]);
        let corr = correlation_matrices(&CausalBatch::new(r.clone(), r).unwrap()).unwrap();
        assert_eq!(corr.c1, corr.c2);
        assert_eq!(corr.c2, corr.c3);
        for i in 0..3 {
            assert!((corr.c1.at2(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_columns_give_identity() {
        let r = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let corr = correlation_matrices(&CausalBatch::new(r.clone(), r).unwrap()).unwrap();
        assert_eq!(corr.c1, Tensor::eye(2));
    }

    #[test]
    fn column_cosine_hand_case() {
        let r = m(&[vec![1.0, 1.0], vec![1.0, -1.0]]);
        let t = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let corr = correlation_matrices(&CausalBatch::new(r, t).unwrap()).unwrap();
        // R columns (1,1), (1,-1); R̃ columns (1,0), (0,1)
        let s = 1.0 / 2f64.sqrt();
        let expected = [s, s, s, -s];
        for (got, want) in corr.c1.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        // C2: cos((1,1),(1,-1)) = 0
        assert!(corr.c2.at2(0, 1).abs() < 1e-15);
    }

    #[test]
    fn consistency_loss_cases() {
        let eye = Tensor::eye(2);
        let at_id = CorrelationSet {
            c1: eye.clone(),
            c2: eye.clone(),
            c3: eye.clone(),
        };
        assert_eq!(consistency_loss(&at_id, &ConsistencyTerms::all(10.0)).unwrap(), 0.0);

        let c2 = m(&[vec![1.0, 0.3], vec![0.3, 1.0]]);
        let corr = CorrelationSet {
            c1: eye.clone(),
            c2,
            c3: eye,
        };
        let got = consistency_loss(&corr, &ConsistencyTerms::all(10.0)).unwrap();
        assert!((got - 0.18).abs() < 1e-15);
        assert!(consistency_loss(&corr, &ConsistencyTerms::all(0.0)).is_err());
    }

    #[test]
    fn loss_is_affine_in_lambda() {
        let c1 = m(&[vec![0.8, 0.1], vec![-0.2, 0.9]]);
        let c2 = m(&[vec![1.0, 0.3], vec![0.3, 1.0]]);
        let corr = CorrelationSet {
            c1: c1.clone(),
            c2: c2.clone(),
            c3: c2,
        };
        let slope = fro_sq_diff(&c1, &Tensor::eye(2)).unwrap();
        let at = |l| consistency_loss(&corr, &ConsistencyTerms::all(l)).unwrap();
        assert!(((at(7.0) - at(2.0)) / 5.0 - slope).abs() < 1e-12);
    }

    #[test]
    fn disabled_terms_drop_out() {
        let c1 = m(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let corr = CorrelationSet {
            c1: c1.clone(),
            c2: c1.clone(),
            c3: c1,
        };
        let gap = 0.25 * 2.0 + 0.25 * 2.0;
        let terms = ConsistencyTerms {
            lambda: 10.0,
            c1: false,
            c2: true,
            c3: false,
        };
        assert!((consistency_loss(&corr, &terms).unwrap() - gap).abs() < 1e-15);
    }
}
