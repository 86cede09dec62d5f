//! K-means over causal representations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::rng_from_seed;
use crate::numerics::{Tape, Tensor, Var};

/// Seeded restarts per fit; the lowest-inertia run wins.
pub const DEFAULT_RESTARTS: usize = 10;
/// Inputs with at most this many k-subsets additionally run Lloyd from
/// every k-subset of the points, which pins down small problems.
pub const EXHAUSTIVE_SEEDINGS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    centers: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub restarts: usize,
}

/// Outcome of the winning restart.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Within-cluster sum of squares after every assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitReport {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia_trace.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl ClusterModel {
    pub fn new(centers: Tensor) -> Result<Self> {
        centers.dims2("cluster model")?;
        if !centers.is_finite() {
            return Err(Error::Config("cluster centers must be finite".into()));
        }
        Ok(Self { centers })
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn k(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    /// Nearest center by squared distance, ties to the lowest index.
    fn nearest_sq(&self, r: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for j in 0..self.k() {
            let d = sq_dist(r, self.centers.row_slice(j));
            if d < best.0 {
                best = (d, j);
            }
        }
        best
    }

    /// Euclidean distance to the nearest center and that center's index.
    pub fn nearest_distance(&self, r: &[f64]) -> Result<(f64, usize)> {
        if r.len() != self.dim() {
            return Err(Error::dim(
                "nearest_distance",
                format!("vector has {} entries, centers have {}", r.len(), self.dim()),
            ));
        }
        let (d, j) = self.nearest_sq(r);
        Ok((d.sqrt(), j))
    }

    pub fn assign(&self, points: &Tensor) -> Result<Vec<usize>> {
        self.check_points(points)?;
        Ok((0..points.shape()[0])
            .map(|i| self.nearest_sq(points.row_slice(i)).1)
            .collect())
    }

    pub fn inertia(&self, points: &Tensor) -> Result<f64> {
        self.check_points(points)?;
        Ok((0..points.shape()[0])
            .map(|i| self.nearest_sq(points.row_slice(i)).0)
            .sum())
    }

    fn check_points(&self, points: &Tensor) -> Result<()> {
        let (_, n) = points.dims2("clustering")?;
        if n != self.dim() {
            return Err(Error::dim(
                "clustering",
                format!("points have {n} dims, centers have {}", self.dim()),
            ));
        }
        Ok(())
    }

    /// Moves every center to the mean of the points currently assigned to
    /// it. Centers with no points stay where they are.
    pub fn update_centers(&self, points: &Tensor) -> Result<ClusterModel> {
        let assignment = self.assign(points)?;
        Ok(Self {
            centers: recompute_centers(points, &assignment, &self.centers),
        })
    }

    /// Mean squared distance of each row of `r` to its nearest center.
    pub fn clustering_loss(&self, r: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(r.clone());
        let loss = clustering_loss_on_tape(&mut tape, v, self)?;
        Ok(tape.value(loss).item())
    }
}

fn recompute_centers(points: &Tensor, assignment: &[usize], previous: &Tensor) -> Tensor {
    let (k, n) = (previous.shape()[0], previous.shape()[1]);
    let mut sums = vec![0.0; k * n];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * n..(c + 1) * n].iter_mut().zip(points.row_slice(i)) {
            *s += v;
        }
    }
    let mut centers = previous.clone();
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        for d in 0..n {
            centers.data_mut()[c * n + d] = sums[c * n + d] / counts[c] as f64;
        }
    }
    centers
}

/// Mean over rows of `r` (`[b, n]`) of the squared distance to the nearest
/// center. Centers are constants; the gradient flows to `r` only.
pub fn clustering_loss_on_tape(tape: &mut Tape, r: Var, model: &ClusterModel) -> Result<Var> {
    let assignment = model.assign(tape.value(r))?;
    let rows = assignment.len();
    let centers = tape.constant(model.centers.clone());
    let picked = tape.gather_rows(centers, &assignment)?;
    let diff = tape.sub(r, picked)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// k-means++ seeding: first center uniform, every further center drawn with
/// probability proportional to squared distance from the chosen ones.
fn seed_centers(points: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let m = points.shape()[0];
    let mut chosen = vec![rng.gen_range(0..m)];
    let mut d2: Vec<f64> = (0..m)
        .map(|i| sq_dist(points.row_slice(i), points.row_slice(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            // rounding can run past the end; fall back to the farthest point
            pick.unwrap_or_else(|| farthest(&d2))
        } else {
            // all remaining points coincide with chosen centers
            (0..m).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row_slice(i), points.row_slice(next)));
        }
    }
    rows_of(points, &chosen)
}

fn farthest(d2: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in d2.iter().enumerate() {
        if d > d2[best] {
            best = i;
        }
    }
    best
}

/// Lloyd iterations from one seeding.
fn lloyd(points: &Tensor, mut centers: Tensor, max_iter: usize) -> (ClusterModel, FitReport) {
    let mut trace = Vec::new();
    let mut assignment: Option<Vec<usize>> = None;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        let model = ClusterModel { centers };
        let next = model.assign(points).expect("points checked by caller");
        let inertia = model.inertia(points).expect("points checked by caller");
        centers = model.centers;
        trace.push(inertia);
        iterations += 1;
        if assignment.as_ref() == Some(&next) {
            converged = true;
            break;
        }
        centers = recompute_centers(points, &next, &centers);
        assignment = Some(next);
    }
    (
        ClusterModel { centers },
        FitReport {
            inertia_trace: trace,
            iterations,
            converged,
        },
    )
}

/// k-means with [`DEFAULT_RESTARTS`] seeded restarts.
pub fn kmeans_fit(points: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<(ClusterModel, FitReport)> {
    kmeans_fit_with(
        points,
        &KMeansOptions {
            k,
            seed,
            max_iter,
            restarts: DEFAULT_RESTARTS,
        },
    )
}

pub fn kmeans_fit_with(points: &Tensor, opts: &KMeansOptions) -> Result<(ClusterModel, FitReport)> {
    let (m, _) = points.dims2("kmeans_fit")?;
    if opts.k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if m < opts.k {
        return Err(Error::Config(format!("k-means with k = {} on {m} points", opts.k)));
    }
    if !points.is_finite() {
        return Err(Error::Data("k-means input contains non-finite values".into()));
    }
    let mut rng = rng_from_seed(opts.seed);
    let mut best: Option<(ClusterModel, FitReport)> = None;
    let mut consider = |init: Tensor| {
        let (model, report) = lloyd(points, init, opts.max_iter);
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| report.final_inertia() < b.final_inertia());
        if better {
            best = Some((model, report));
        }
    };
    for _ in 0..opts.restarts.max(1) {
        consider(seed_centers(points, opts.k, &mut rng));
    }
    if binomial(m, opts.k) <= EXHAUSTIVE_SEEDINGS {
        for subset in k_subsets(m, opts.k) {
            consider(rows_of(points, &subset));
        }
    }
    Ok(best.expect("at least one restart"))
}

fn binomial(m: usize, k: usize) -> usize {
    let k = k.min(m - k);
    let mut c: usize = 1;
    for i in 0..k {
        c = match c.checked_mul(m - i) {
            Some(v) => v / (i + 1),
            None => return usize::MAX,
        };
    }
    c
}

/// All increasing index sequences of length `k` below `m`, in lexicographic order.
fn k_subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < m - k + i) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn rows_of(points: &Tensor, rows: &[usize]) -> Tensor {
    let n = points.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        data.extend_from_slice(points.row_slice(r));
    }
    Tensor::new([rows.len(), n], data).expect("rows of n")
}
