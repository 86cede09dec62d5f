//! Prototype memory pool.
//!
//! `M` is a `[C, N]` matrix of unit-norm entries. Reading reconstructs every
//! spatial feature vector as an attention-weighted mix of entries (softmax
//! over the N entries per location). Writing pulls every entry towards an
//! attention-weighted mix of the observed feature vectors (softmax over the
//! locations per entry) and renormalises each column.

use crate::error::{Error, Result};
use crate::init::{self, CrcRng};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryPool {
    m: Tensor,
}

/// Result of a read recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ReadOutput {
    /// Prototype map, same `[H, W, C]` shape as the query.
    pub prototype: Var,
    /// `[H·W, N]` attention weights; every row sums to one.
    pub attention: Var,
}

/// `[H, W, C]` to `[C, H·W]`; column `j` is the channel vector at location `j`
/// in row-major scan order.
pub fn expand(f: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(f, "expand")?;
    f.reshape([h * w, c])?.transpose()
}

/// Inverse of [`expand`].
pub fn unexpand(e: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, n) = e.dims2("unexpand")?;
    if n != h * w {
        return Err(Error::dim("unexpand", format!("{n} columns for a {h}x{w} map")));
    }
    e.transpose()?.reshape([h, w, c])
}

fn hwc(f: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match f.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::dim(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

impl MemoryPool {
    /// Wraps an existing `[C, N]` matrix as-is.
    pub fn from_matrix(m: Tensor) -> Result<Self> {
        m.dims2("memory")?;
        if !m.is_finite() {
            return Err(Error::Config("memory contains non-finite values".into()));
        }
        Ok(Self { m })
    }

    /// Entries uniform in `[-1, 1]`, then column-normalised.
    pub fn random(channels: usize, entries: usize, rng: &mut CrcRng) -> Result<Self> {
        if channels == 0 || entries == 0 {
            return Err(Error::Config("memory needs at least one channel and entry".into()));
        }
        let m = init::uniform(&[channels, entries], -1.0, 1.0, rng).l2_normalize(0)?;
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    pub fn channels(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn entries(&self) -> usize {
        self.m.shape()[1]
    }

    /// Largest deviation of a column norm from one.
    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.entries())
            .map(|j| {
                let n = self.m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    fn check_channels(&self, f: &Tensor, op: &'static str) -> Result<()> {
        let (_, _, c) = hwc(f, op)?;
        if c != self.channels() {
            return Err(Error::dim(
                op,
                format!("feature has {c} channels, memory has {}", self.channels()),
            ));
        }
        Ok(())
    }

    /// Prototype reconstruction `F'` of a `[H, W, C]` feature map.
    pub fn read(&self, f: &Tensor) -> Result<Tensor> {
        self.check_channels(f, "memory read")?;
        let mut tape = Tape::new();
        let m = tape.constant(self.m.clone());
        let x = tape.constant(f.clone());
        let out = read_on_tape(&mut tape, m, x)?;
        Ok(tape.value(out.prototype).clone())
    }

    /// Attention of each location over the entries, `[H·W, N]`.
    pub fn read_attention(&self, f: &Tensor) -> Result<Tensor> {
        self.check_channels(f, "memory read")?;
        let e = expand(f)?;
        let scores = e.transpose()?.matmul(&self.m)?;
        let scale = 1.0 / (self.channels() as f64).sqrt();
        scores.map(|s| s * scale).softmax(1)
    }

    /// Updated pool after observing `features` (all locations of all maps
    /// pooled into one key/value set).
    pub fn write(&self, features: &[Tensor]) -> Result<MemoryPool> {
        if features.is_empty() {
            return Err(Error::Data("memory write needs at least one feature map".into()));
        }
        let mut columns = Vec::new();
        for f in features {
            self.check_channels(f, "memory write")?;
            columns.push(expand(f)?.transpose()?.into_data());
        }
        let c = self.channels();
        let locations = columns.iter().map(Vec::len).sum::<usize>() / c;
        // keys/values as rows: [N̂, C]
        let kv = Tensor::new([locations, c], columns.concat())?;
        let scale = 1.0 / (c as f64).sqrt();
        let attn = kv.matmul(&self.m)?.map(|s| s * scale).softmax(0)?;
        let update = kv.transpose()?.matmul(&attn)?;
        let sum = self.m.zip_map(&update, "memory write", |a, b| a + b)?;
        Ok(Self {
            m: sum.l2_normalize(0)?,
        })
    }

    pub fn compactness_loss(&self, f: &Tensor) -> Result<f64> {
        self.check_channels(f, "compactness_loss")?;
        let mut tape = Tape::new();
        let m = tape.constant(self.m.clone());
        let x = tape.constant(f.clone());
        let loss = compactness_on_tape(&mut tape, m, x)?;
        Ok(tape.value(loss).item())
    }

    pub fn separateness_loss(&self, f: &Tensor, margin: f64) -> Result<f64> {
        self.check_channels(f, "separateness_loss")?;
        let mut tape = Tape::new();
        let m = tape.constant(self.m.clone());
        let x = tape.constant(f.clone());
        let loss = separateness_on_tape(&mut tape, m, x, margin)?;
        Ok(tape.value(loss).item())
    }
}

/// Differentiable read w.r.t. both the memory `[C, N]` and the map `[H, W, C]`.
pub fn read_on_tape(tape: &mut Tape, memory: Var, f: Var) -> Result<ReadOutput> {
    let (h, w, c) = hwc(tape.value(f), "memory read")?;
    let x = tape.reshape(f, &[h * w, c])?;
    let scores = tape.matmul(x, memory)?;
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let attention = tape.softmax(scores, 1)?;
    let mt = tape.transpose(memory)?;
    let rows = tape.matmul(attention, mt)?;
    let prototype = tape.reshape(rows, &[h, w, c])?;
    Ok(ReadOutput {
        prototype,
        attention,
    })
}

/// Indices of the nearest and second-nearest memory column for every row of
/// `queries` (`[Q, C]`). Ties go to the lower index.
fn ranked_entries(queries: &Tensor, memory: &Tensor, need_second: bool) -> (Vec<usize>, Vec<usize>) {
    let (q, c) = (queries.shape()[0], queries.shape()[1]);
    let n = memory.shape()[1];
    let mut first = Vec::with_capacity(q);
    let mut second = Vec::with_capacity(q);
    for i in 0..q {
        let row = queries.row_slice(i);
        let mut best = (f64::INFINITY, 0usize);
        let mut runner = (f64::INFINITY, 0usize);
        for j in 0..n {
            let d: f64 = (0..c).map(|k| (row[k] - memory.at2(k, j)).powi(2)).sum();
            if d < best.0 {
                runner = best;
                best = (d, j);
            } else if need_second && d < runner.0 {
                runner = (d, j);
            }
        }
        first.push(best.1);
        second.push(runner.1);
    }
    (first, second)
}

/// Per-location squared distances `[Q, 1]` between query rows and the
/// memory columns picked by `idx`.
fn picked_distances(tape: &mut Tape, x: Var, mt: Var, idx: &[usize]) -> Result<Var> {
    let picked = tape.gather_rows(mt, idx)?;
    let diff = tape.sub(x, picked)?;
    let sq = tape.square(diff);
    tape.sum_axis(sq, 1)
}

/// Mean over locations of the squared distance to the nearest entry.
pub fn compactness_on_tape(tape: &mut Tape, memory: Var, f: Var) -> Result<Var> {
    let (h, w, c) = hwc(tape.value(f), "compactness_loss")?;
    let x = tape.reshape(f, &[h * w, c])?;
    let (first, _) = ranked_entries(tape.value(x), tape.value(memory), false);
    let mt = tape.transpose(memory)?;
    let d = picked_distances(tape, x, mt, &first)?;
    Ok(tape.mean(d))
}

/// Mean over locations of `max(0, d_1st - d_2nd + margin)` with squared
/// distances to the nearest and second-nearest entries.
pub fn separateness_on_tape(tape: &mut Tape, memory: Var, f: Var, margin: f64) -> Result<Var> {
    let (h, w, c) = hwc(tape.value(f), "separateness_loss")?;
    if tape.value(memory).shape()[1] < 2 {
        return Err(Error::Config("separateness loss needs at least two memory entries".into()));
    }
    let x = tape.reshape(f, &[h * w, c])?;
    let (first, second) = ranked_entries(tape.value(x), tape.value(memory), true);
    let mt = tape.transpose(memory)?;
    let d1 = picked_distances(tape, x, mt, &first)?;
    let d2 = picked_distances(tape, x, mt, &second)?;
    let gap = tape.sub(d1, d2)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    Ok(tape.mean(hinge))
}
