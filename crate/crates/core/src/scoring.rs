//! Frame-level anomaly scores, max-min normalization and ROC metrics.
//!
//! A window of `b` consecutive clips forms the correlation batch. Its raw
//! score is `‖C1 − I‖²_F` times the mean nearest-center distance of the
//! window's shared-branch representations; the score belongs to the last
//! frame of the window.

use std::fmt::Write as _;

use crate::characterizer::{correlation_matrices, CausalBatch};
use crate::clustering::ClusterModel;
use crate::data::Video;
use crate::error::{Error, Result};
use crate::numerics::{fro_sq_diff, Tensor};
use crate::training::{embed_clip, Checkpoint, ClipEmbedding, TrainConfig};

pub const SCORE_CSV_HEADER: &str = "frame_index,raw,normalized";
pub const ROC_CSV_HEADER: &str = "threshold,fpr,tpr";

/// Components of one window score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowScore {
    /// `‖C1 − I‖²_F`.
    pub gap: f64,
    /// Mean nearest-center distance; 1 when clustering is disabled.
    pub distance: f64,
    pub raw: f64,
}

/// `‖c − I‖²_F` for a square matrix.
pub fn identity_gap(c: &Tensor) -> Result<f64> {
    let (n, m) = c.dims2("identity gap")?;
    if n != m {
        return Err(Error::dim("identity gap", format!("{n}x{m} is not square")));
    }
    fro_sq_diff(c, &Tensor::eye(n))
}

/// Mean nearest-center distance over the rows of `r`.
pub fn mean_distance(r: &Tensor, clusters: &ClusterModel) -> Result<f64> {
    let (b, _) = r.dims2("mean distance")?;
    let mut total = 0.0;
    for i in 0..b {
        total += clusters.nearest_distance(r.row_slice(i))?.0;
    }
    Ok(total / b as f64)
}

/// Scores one window from its clip embeddings.
///
/// With `use_cluster` the checkpoint must carry centers; without it the
/// distance factor is 1.
pub fn window_from_embeddings(
    window: &[&ClipEmbedding],
    clusters: Option<&ClusterModel>,
    use_cluster: bool,
) -> Result<WindowScore> {
    let r = Tensor::from_rows(&window.iter().map(|e| e.r.clone()).collect::<Vec<_>>())?;
    let r_tilde = Tensor::from_rows(&window.iter().map(|e| e.r_tilde.clone()).collect::<Vec<_>>())?;
    let distance = match (use_cluster, clusters) {
        (false, _) => 1.0,
        (true, Some(c)) => mean_distance(&r, c)?,
        (true, None) => return Err(Error::Inference("checkpoint has no cluster centers".into())),
    };
    let corr = correlation_matrices(&CausalBatch::new(r, r_tilde)?)?;
    let gap = identity_gap(&corr.c1)?;
    Ok(WindowScore {
        gap,
        distance,
        raw: gap * distance,
    })
}

/// Raw score of `b` consecutive clips. The memory is only read.
pub fn window_score(clips: &[Tensor], ck: &Checkpoint) -> Result<WindowScore> {
    let cfg = &ck.config;
    if clips.len() != cfg.batch_size {
        return Err(Error::BatchSize {
            got: clips.len(),
            min: cfg.batch_size,
        });
    }
    let embs = clips
        .iter()
        .map(|c| embed_clip(c, &ck.params, &ck.memory, cfg))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ClipEmbedding> = embs.iter().collect();
    window_from_embeddings(&refs, ck.clusters.as_ref(), cfg.use_cluster)
}

/// Scores of every full window of a video, in order. Window `w` covers
/// clips `w..w+b` and ends on frame `w + b + T − 2`.
pub fn video_windows(video: &Video, ck: &Checkpoint) -> Result<Vec<WindowScore>> {
    let cfg = &ck.config;
    let (t, b) = (cfg.clip_len, cfg.batch_size);
    if video.frames() < t + b - 1 {
        return Err(Error::Data(format!(
            "{}-frame video is shorter than one scoring window ({} frames)",
            video.frames(),
            t + b - 1
        )));
    }
    if cfg.use_cluster && ck.clusters.is_none() {
        return Err(Error::Inference("checkpoint has no cluster centers".into()));
    }
    let embs = video
        .clips(t, 1)?
        .iter()
        .map(|c| embed_clip(c, &ck.params, &ck.memory, cfg))
        .collect::<Result<Vec<_>>>()?;
    embs.windows(b)
        .map(|w| {
            let refs: Vec<&ClipEmbedding> = w.iter().collect();
            window_from_embeddings(&refs, ck.clusters.as_ref(), cfg.use_cluster)
        })
        .collect()
}

/// Per-frame series from window scores: frame `lead + i` takes window `i`,
/// earlier frames repeat the first window.
pub fn spread_to_frames(windows: &[f64], lead: usize) -> Vec<f64> {
    let mut out = vec![windows.first().copied().unwrap_or(0.0); lead];
    out.extend_from_slice(windows);
    out
}

/// Frames before the end of the first window: `T + b − 2`.
pub fn window_lead(cfg: &TrainConfig) -> usize {
    cfg.clip_len + cfg.batch_size - 2
}

/// Per-frame series of one video from its window scores.
pub fn series_from_windows(windows: &[WindowScore], cfg: &TrainConfig) -> Result<ScoreSeries> {
    let raw: Vec<f64> = windows.iter().map(|w| w.raw).collect();
    ScoreSeries::from_raw(spread_to_frames(&raw, window_lead(cfg)))
}

/// Per-frame scores of one video, normalized over that video.
pub fn score_video(video: &Video, ck: &Checkpoint) -> Result<ScoreSeries> {
    series_from_windows(&video_windows(video, ck)?, &ck.config)
}

/// Max-min normalization; a constant series maps to zeros.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&x| ((x - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Mean absolute difference to the previous frame; frame 0 repeats frame 1.
pub fn frame_difference_scores(video: &Video) -> Result<Vec<f64>> {
    if video.frames() < 2 {
        return Err(Error::Data("frame differences need at least 2 frames".into()));
    }
    let mut out = Vec::with_capacity(video.frames());
    for t in 1..video.frames() {
        let (a, b) = (video.frame(t - 1), video.frame(t));
        let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
        out.push(sum / a.len() as f64);
    }
    out.insert(0, out[0]);
    Ok(out)
}

/// Per-frame scores with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl ScoreSeries {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Data("empty score series".into()));
        }
        if let Some(i) = raw.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Invariant(format!("raw score {} at frame {i}", raw[i])));
        }
        let normalized = normalize(&raw);
        Ok(Self {
            raw,
            normalized,
            labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.raw.len() {
            return Err(Error::Data(format!(
                "{} labels for {} frames",
                labels.len(),
                self.raw.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCORE_CSV_HEADER);
        if self.labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for i in 0..self.raw.len() {
            write!(out, "{i},{},{}", self.raw[i], self.normalized[i]).expect("string write");
            if let Some(l) = &self.labels {
                write!(out, ",{}", l[i]).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`ScoreSeries::to_csv`] output; the normalized column is kept
    /// as written.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().unwrap_or("").trim_end();
        let with_labels = match header {
            h if h == SCORE_CSV_HEADER => false,
            h if h == format!("{SCORE_CSV_HEADER},label") => true,
            _ => {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("unexpected score header {header:?}"),
                })
            }
        };
        let mut offset = text.find('\n').map_or(text.len(), |i| i + 1);
        let (mut raw, mut normalized, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let fail = |d: String| Error::Format {
                offset: offset as u64,
                detail: d,
            };
            let row = line.trim_end();
            if !row.is_empty() {
                let cols: Vec<&str> = row.split(',').collect();
                if cols.len() != 3 + usize::from(with_labels) {
                    return Err(fail(format!("expected {} columns", 3 + usize::from(with_labels))));
                }
                if cols[0].parse::<usize>().ok() != Some(raw.len()) {
                    return Err(fail(format!("frame index {:?} out of sequence", cols[0])));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| fail(format!("bad number {s:?}")));
                raw.push(num(cols[1])?);
                let n = num(cols[2])?;
                if !(0.0..=1.0).contains(&n) {
                    return Err(fail(format!("normalized score {n} outside [0, 1]")));
                }
                normalized.push(n);
                if with_labels {
                    labels.push(match cols[3] {
                        "0" => 0,
                        "1" => 1,
                        l => return Err(fail(format!("label {l:?} is not 0 or 1"))),
                    });
                }
            }
            offset += line.len();
        }
        if raw.is_empty() {
            return Err(Error::Data("score file has no rows".into()));
        }
        Ok(Self {
            raw,
            normalized,
            labels: with_labels.then_some(labels),
        })
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Evaluation(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation("labels contain a single class".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by score, then groups of equal scores as
/// `(positives, negatives, score)` in ascending score order.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(u64, u64, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(u64, u64, f64)> = Vec::new();
    for i in idx {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.2 == s => {}
            _ => groups.push((0, 0, s)),
        }
        let g = groups.last_mut().expect("group");
        if labels[i] != 0 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a positive outscores a negative, ties counting half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    // twice the concordant-pair count, kept integral
    let mut twice = 0u128;
    let mut neg_below = 0u64;
    for (p, n, _) in tie_groups(scores, labels) {
        twice += 2 * p as u128 * neg_below as u128 + p as u128 * n as u128;
        neg_below += n;
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Reference AUC by counting every positive/negative pair.
pub fn roc_auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut twice = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            twice += match si.partial_cmp(&sj) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// One operating point: frames with `score >= threshold` are flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Threshold sweep from `+inf` (nothing flagged) down to the smallest
/// score (everything flagged).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n, s) in tie_groups(scores, labels).into_iter().rev() {
        tp += p;
        fp += n;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Rate at which false positives equal misses, interpolated linearly
/// between adjacent sweep points.
pub fn eer_from_curve(curve: &[RocPoint]) -> f64 {
    // fpr + tpr - 1 is non-decreasing along the sweep, from -1 to 1
    let g = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    for w in curve.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (ga, gb) = (g(a), g(b));
        if ga == 0.0 {
            return a.fpr;
        }
        if ga < 0.0 && gb >= 0.0 {
            let t = -ga / (gb - ga);
            let fpr = a.fpr + t * (b.fpr - a.fpr);
            let fnr = 1.0 - (a.tpr + t * (b.tpr - a.tpr));
            return 0.5 * (fpr + fnr);
        }
    }
    curve.last().map_or(1.0, |p| p.fpr)
}

pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(eer_from_curve(&roc_curve(scores, labels)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub eer: f64,
    pub positives: usize,
    pub negatives: usize,
    pub roc: Vec<RocPoint>,
}

impl EvalReport {
    pub fn new(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let (positives, negatives) = class_counts(scores, labels)?;
        let roc = roc_curve(scores, labels)?;
        Ok(Self {
            auc: roc_auc(scores, labels)?,
            eer: eer_from_curve(&roc),
            positives,
            negatives,
            roc,
        })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "auc={}\neer={}\npositives={}\nnegatives={}\n",
            self.auc, self.eer, self.positives, self.negatives
        )
    }

    pub fn roc_csv(&self) -> String {
        let mut out = format!("{ROC_CSV_HEADER}\n");
        for p in &self.roc {
            writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr).expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans_fit;
    use crate::data::{generate, SyntheticSpec};
    use crate::training::{representations, Profile};

    fn emb(r: Vec<f64>, r_tilde: Vec<f64>) -> ClipEmbedding {
        ClipEmbedding {
            features: Tensor::scalar(0.0),
            alpha: vec![0.5],
            beta: vec![0.5],
            r,
            r_tilde,
        }
    }

    #[test]
    fn identical_branches_give_zero_gap() {
        let a = emb(vec![1.0, 0.0], vec![1.0, 0.0]);
        let b = emb(vec![0.0, 1.0], vec![0.0, 1.0]);
        let w = window_from_embeddings(&[&a, &b], None, false).unwrap();
        assert_eq!(w.gap, 0.0);
        assert_eq!(w.distance, 1.0);
        assert_eq!(w.raw, 0.0);
    }

    #[test]
    fn zero_distance_gives_zero_raw() {
        let a = emb(vec![1.0, 0.0], vec![0.0, 1.0]);
        let b = emb(vec![0.0, 1.0], vec![1.0, 0.0]);
        let centers = ClusterModel::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let w = window_from_embeddings(&[&a, &b], Some(&centers), true).unwrap();
        // C1 = [[0,1],[1,0]], gap 4
        assert!((w.gap - 4.0).abs() < 1e-12);
        assert_eq!(w.distance, 0.0);
        assert_eq!(w.raw, 0.0);
    }

    #[test]
    fn gap_times_distance() {
        // C1 = diag(1, -1)
        let a = emb(vec![1.0, 0.0], vec![1.0, 0.0]);
        let b = emb(vec![0.0, 1.0], vec![0.0, -1.0]);
        let centers = ClusterModel::new(Tensor::from_rows(&[vec![1.0, 0.75]]).unwrap()).unwrap();
        let w = window_from_embeddings(&[&a, &b], Some(&centers), true).unwrap();
        assert!((w.gap - 4.0).abs() < 1e-12);
        // distances 0.75 and sqrt(1 + 0.0625)
        let d = (0.75 + (1.0f64 + 0.0625).sqrt()) / 2.0;
        assert!((w.distance - d).abs() < 1e-12);
        assert!((w.raw - 4.0 * d).abs() < 1e-12);

        // gap 2, distance 1.5
        let c1 = Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, 1.0]]).unwrap();
        assert_eq!(identity_gap(&c1).unwrap() * 1.5, 3.0);
    }

    #[test]
    fn missing_centers_is_an_inference_error() {
        let a = emb(vec![1.0, 0.0], vec![1.0, 0.0]);
        let b = emb(vec![0.0, 1.0], vec![0.0, 1.0]);
        assert!(matches!(
            window_from_embeddings(&[&a, &b], None, true),
            Err(Error::Inference(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize(&[5.0, 5.0]), vec![0.0, 0.0]);
        let n = normalize(&[1.0, 2.0, 3.5, 10.0]);
        assert!(n.windows(2).all(|w| w[0] < w[1]));
        assert!(normalize(&[]).is_empty());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.2, 0.4, 0.6, 0.8], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::Evaluation(_))));
        assert!(matches!(roc_auc(&[0.1], &[1, 0]), Err(Error::Evaluation(_))));
    }

    /// Sweeps every threshold and returns the error rate where the gap
    /// between false-positive and miss rates changes sign.
    fn eer_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut th: Vec<f64> = scores.to_vec();
        th.push(f64::INFINITY);
        th.sort_by(|a, b| b.total_cmp(a));
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let neg = labels.len() as f64 - pos;
        let rates: Vec<(f64, f64)> = th
            .iter()
            .map(|&t| {
                let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count() as f64;
                let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count() as f64;
                (fp / neg, 1.0 - tp / pos)
            })
            .collect();
        for w in rates.windows(2) {
            let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
            if d0 == 0.0 {
                return w[0].0;
            }
            if d0 < 0.0 && d1 >= 0.0 {
                let t = d0 / (d0 - d1);
                return w[0].0 + t * (w[1].0 - w[0].0);
            }
        }
        unreachable!()
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&[0.1, 0.9], &[0, 1]).unwrap(), 0.0);
        assert_eq!(eer(&[0.9, 0.1], &[0, 1]).unwrap(), 1.0);
        let (s, l) = ([0.2, 0.4, 0.6, 0.8], [0u8, 1, 0, 1]);
        assert_eq!(eer(&s, &l).unwrap(), 0.5);
        assert_eq!(eer(&s, &l).unwrap(), eer_oracle(&s, &l));
        let (s, l) = ([0.1, 0.3, 0.35, 0.4, 0.8, 0.9], [0u8, 0, 1, 0, 1, 1]);
        assert!((eer(&s, &l).unwrap() - eer_oracle(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn curve_endpoints_and_ties() {
        let c = roc_curve(&[0.3, 0.3, 0.7], &[0, 1, 1]).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!((c[0].fpr, c[0].tpr), (0.0, 0.0));
        assert_eq!((c[1].threshold, c[1].fpr, c[1].tpr), (0.7, 0.0, 0.5));
        assert_eq!((c[2].fpr, c[2].tpr), (1.0, 1.0));
    }

    #[test]
    fn report_text() {
        let r = EvalReport::new(&[0.1, 0.9], &[0, 1]).unwrap();
        assert_eq!(r.to_text(), "auc=1\neer=0\npositives=1\nnegatives=1\n");
        assert_eq!(r.roc_csv(), "threshold,fpr,tpr\ninf,0,0\n0.9,0,1\n0.1,1,1\n");
    }

    #[test]
    fn score_csv_round_trip() {
        let s = ScoreSeries::from_raw(vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(s.to_csv(), "frame_index,raw,normalized\n0,2,0\n1,4,0.5\n2,6,1\n");
        assert_eq!(ScoreSeries::from_csv(&s.to_csv()).unwrap(), s);
        let l = s.with_labels(vec![0, 0, 1]).unwrap();
        assert_eq!(ScoreSeries::from_csv(&l.to_csv()).unwrap(), l);
        let bad = "frame_index,raw,normalized\n0,2,0\n1,x,0.5\n";
        assert!(matches!(ScoreSeries::from_csv(bad), Err(Error::Format { offset: 33, .. })));
        assert!(matches!(ScoreSeries::from_csv("a,b\n"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn frame_difference_fixture() {
        let v = Video::new(3, 1, 2, 1, vec![0.0, 0.0, 0.5, 0.25, 0.5, 0.75]).unwrap();
        assert_eq!(frame_difference_scores(&v).unwrap(), vec![0.375, 0.375, 0.25]);
    }

    fn tiny_checkpoint(video: &Video) -> Checkpoint {
        let cfg = TrainConfig::profile(Profile::Tiny);
        let mut ck = Checkpoint::init(&cfg).unwrap();
        let clips = video.clips(cfg.clip_len, 1).unwrap();
        let r = representations(&clips, &ck.params, &ck.memory, &cfg).unwrap();
        ck.clusters = Some(kmeans_fit(&r, cfg.clusters, 0, 20).unwrap().0);
        ck
    }

    fn tiny_video(frames: usize) -> Video {
        let spec = SyntheticSpec {
            height: 16,
            width: 16,
            train_frames: frames,
            test_frames: frames,
            anomalies: vec![],
            ..SyntheticSpec::default()
        };
        generate(&spec).unwrap().train
    }

    #[test]
    fn minimal_video_is_one_window() {
        // T = 4, b = 2
        let v = tiny_video(5);
        let ck = tiny_checkpoint(&v);
        let s = score_video(&v, &ck).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.raw.iter().all(|&x| x == s.raw[0]));
        assert_eq!(s.normalized, vec![0.0; 5]);
        assert!(matches!(score_video(&tiny_video(4), &ck), Err(Error::Data(_))));
    }

    #[test]
    fn video_scores_match_direct_windows() {
        let v = tiny_video(9);
        let ck = tiny_checkpoint(&v);
        let before = ck.memory.clone();
        let s = score_video(&v, &ck).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(ck.memory, before);
        assert!(s.normalized.iter().all(|x| (0.0..=1.0).contains(x)));
        // frame 7 is the last frame of the window over clips 3 and 4
        let clips = [v.clip(3, 4).unwrap(), v.clip(4, 4).unwrap()];
        assert_eq!(window_score(&clips, &ck).unwrap().raw, s.raw[7]);
        assert_eq!(s.raw[0], s.raw[4]);
        let mut no_centers = ck.clone();
        no_centers.clusters = None;
        assert!(matches!(score_video(&v, &no_centers), Err(Error::Inference(_))));
    }
}
