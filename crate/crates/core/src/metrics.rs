//! CER, unvoiced collapsing, FastDTW and DTW-aligned MSE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("frame sequence is empty")]
    EmptyFrames,
    #[error("frame widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("threshold must be finite and nonnegative")]
    BadThreshold,
}

/// Levenshtein distance over `reference.len()`.
pub fn cer<S: Eq>(hypothesis: &[S], reference: &[S]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(levenshtein(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Unit-cost edit distance.
pub fn levenshtein<S: Eq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Replaces each maximal run of frames with L2 norm below `threshold` by
/// the run's mean frame.
pub fn collapse_unvoiced(frames: &Tensor<f32>, threshold: f64) -> Result<Tensor<f32>, MetricError> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(MetricError::BadThreshold);
    }
    let d = frames.cols;
    let mut out: Vec<f32> = Vec::with_capacity(frames.len());
    let mut run: Vec<f64> = vec![0.0; d];
    let mut run_len = 0usize;
    let flush = |out: &mut Vec<f32>, run: &mut Vec<f64>, run_len: &mut usize| {
        if *run_len > 0 {
            out.extend(run.iter().map(|s| (s / *run_len as f64) as f32));
            run.iter_mut().for_each(|s| *s = 0.0);
            *run_len = 0;
        }
    };
    for r in 0..frames.rows {
        let row = frames.row(r);
        if norm(row) < threshold {
            for (s, &v) in run.iter_mut().zip(row) {
                *s += v as f64;
            }
            run_len += 1;
        } else {
            flush(&mut out, &mut run, &mut run_len);
            out.extend_from_slice(row);
        }
    }
    flush(&mut out, &mut run, &mut run_len);
    let rows = if d == 0 { 0 } else { out.len() / d };
    Ok(Tensor::from_vec(rows, d, out))
}

fn norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Median L2 norm over every frame of every sequence.
pub fn median_frame_norm<'a>(seqs: impl IntoIterator<Item = &'a Tensor<f32>>) -> f64 {
    let mut norms: Vec<f64> = seqs.into_iter().flat_map(|t| (0..t.rows).map(move |r| norm(t.row(r)))).collect();
    if norms.is_empty() {
        return 0.0;
    }
    norms.sort_by(f64::total_cmp);
    let n = norms.len();
    if n % 2 == 1 {
        norms[n / 2]
    } else {
        0.5 * (norms[n / 2 - 1] + norms[n / 2])
    }
}

/// Default unvoiced threshold: 10% of the median frame norm.
pub fn default_unvoiced_threshold<'a>(seqs: impl IntoIterator<Item = &'a Tensor<f32>>) -> f64 {
    0.1 * median_frame_norm(seqs)
}

/// Monotone warping path from `(0, 0)` to `(n-1, m-1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath(pub Vec<(usize, usize)>);

impl AlignmentPath {
    pub fn is_valid(&self, n: usize, m: usize) -> bool {
        let p = &self.0;
        if p.first() != Some(&(0, 0)) || p.last() != Some(&(n - 1, m - 1)) {
            return false;
        }
        p.windows(2).all(|w| {
            let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

/// Column range `lo..=hi` allowed in each row.
type Window = Vec<(usize, usize)>;

/// DTW restricted to `window`, with squared-L2 local cost. Ties prefer the
/// diagonal, then advancing `a`, then advancing `b`.
fn dtw_window(a: &Tensor<f32>, b: &Tensor<f32>, window: &Window) -> (f64, AlignmentPath) {
    let (n, m) = (a.rows, b.rows);
    let mut cost: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut from: Vec<Vec<u8>> = Vec::with_capacity(n);
    let get = |cost: &Vec<Vec<f64>>, i: usize, j: usize| -> f64 {
        let (lo, hi) = window[i];
        if j < lo || j > hi {
            f64::INFINITY
        } else {
            cost[i][j - lo]
        }
    };
    for i in 0..n {
        let (lo, hi) = window[i];
        let mut row = vec![f64::INFINITY; hi - lo + 1];
        let mut dir = vec![0u8; hi - lo + 1];
        for j in lo..=hi {
            let local = sq_dist(a.row(i), b.row(j));
            let (best, d) = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let diag = if i > 0 && j > 0 { get(&cost, i - 1, j - 1) } else { f64::INFINITY };
                let up = if i > 0 { get(&cost, i - 1, j) } else { f64::INFINITY };
                let left = if j > lo { row[j - 1 - lo] } else { f64::INFINITY };
                if diag <= up && diag <= left {
                    (diag, 1)
                } else if up <= left {
                    (up, 2)
                } else {
                    (left, 3)
                }
            };
            row[j - lo] = best + local;
            dir[j - lo] = d;
        }
        cost.push(row);
        from.push(dir);
    }
    let total = get(&cost, n - 1, m - 1);
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        match from[i][j - window[i].0] {
            1 => {
                i -= 1;
                j -= 1
            }
            2 => i -= 1,
            3 => j -= 1,
            _ => unreachable!("unreachable cell on path"),
        }
        path.push((i, j));
    }
    path.reverse();
    (total, AlignmentPath(path))
}

/// Full O(nm) dynamic time warping.
pub fn exact_dtw(a: &Tensor<f32>, b: &Tensor<f32>) -> (f64, AlignmentPath) {
    dtw_window(a, b, &vec![(0, b.rows - 1); a.rows])
}

/// FastDTW settings. Sequences up to `exact_below` frames (either side) are
/// aligned exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastDtw {
    pub radius: usize,
    pub exact_below: usize,
}

impl Default for FastDtw {
    fn default() -> Self {
        Self { radius: 1, exact_below: 32 }
    }
}

fn halve(x: &Tensor<f32>) -> Tensor<f32> {
    let n = x.rows / 2;
    Tensor::from_fn(n, x.cols, |i, c| 0.5 * (x.at(2 * i, c) + x.at(2 * i + 1, c)))
}

/// Projects a coarse path to full resolution and widens it by `radius`.
fn expand_window(path: &AlignmentPath, n: usize, m: usize, radius: usize) -> Window {
    let mut lo = vec![usize::MAX; n];
    let mut hi = vec![0usize; n];
    let r = radius as isize;
    for &(i, j) in &path.0 {
        for di in -r..=r {
            for dj in -r..=r {
                let (ci, cj) = (i as isize + di, j as isize + dj);
                if ci < 0 || cj < 0 {
                    continue;
                }
                for (fi, fj) in [(2 * ci, 2 * cj), (2 * ci + 1, 2 * cj), (2 * ci, 2 * cj + 1), (2 * ci + 1, 2 * cj + 1)] {
                    let (fi, fj) = (fi as usize, fj as usize);
                    if fi < n && fj < m {
                        lo[fi] = lo[fi].min(fj);
                        hi[fi] = hi[fi].max(fj);
                    }
                }
            }
        }
    }
    // odd lengths can leave trailing rows or columns outside the projection
    for i in 0..n {
        if lo[i] == usize::MAX {
            let (plo, phi) = if i > 0 { (lo[i - 1], hi[i - 1]) } else { (0, 0) };
            lo[i] = plo;
            hi[i] = phi;
        }
    }
    lo[0] = 0;
    hi[n - 1] = m - 1;
    for i in (0..n - 1).rev() {
        lo[i] = lo[i].min(lo[i + 1]);
    }
    for i in 1..n {
        hi[i] = hi[i].max(hi[i - 1]);
        lo[i] = lo[i].min(hi[i - 1] + 1);
    }
    lo.into_iter().zip(hi).collect()
}

impl FastDtw {
    pub fn align(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, AlignmentPath), MetricError> {
        if a.rows == 0 || b.rows == 0 {
            return Err(MetricError::EmptyFrames);
        }
        if a.cols != b.cols {
            return Err(MetricError::WidthMismatch(a.cols, b.cols));
        }
        Ok(self.recurse(a, b))
    }

    fn recurse(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> (f64, AlignmentPath) {
        let (n, m) = (a.rows, b.rows);
        let min_size = (self.radius + 2).max(self.exact_below + 1);
        if n < min_size || m < min_size || self.radius >= n.max(m) {
            return exact_dtw(a, b);
        }
        let (_, coarse) = self.recurse(&halve(a), &halve(b));
        let window = expand_window(&coarse, n, m, self.radius);
        dtw_window(a, b, &window)
    }
}

pub fn fastdtw(a: &Tensor<f32>, b: &Tensor<f32>, radius: usize) -> Result<(f64, AlignmentPath), MetricError> {
    FastDtw { radius, ..FastDtw::default() }.align(a, b)
}

/// Collapses unvoiced runs in both sequences, aligns them with FastDTW and
/// returns the mean per-dimension squared error along the path.
pub fn dtw_mse(pred: &Tensor<f32>, reference: &Tensor<f32>, threshold: f64, radius: usize) -> Result<f64, MetricError> {
    let a = collapse_unvoiced(pred, threshold)?;
    let b = collapse_unvoiced(reference, threshold)?;
    let (cost, path) = fastdtw(&a, &b, radius)?;
    Ok(cost / (path.0.len() * a.cols.max(1)) as f64)
}

/// Aggregate and per-sample metrics for one language.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub language: String,
    pub cer: f64,
    pub cer_ex: f64,
    pub dtw_mse: f64,
    pub n: usize,
    pub per_sample_cer: Vec<f64>,
    pub per_sample_cer_ex: Vec<f64>,
    pub per_sample_dtw_mse: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricReport {
    pub fn new(language: &str, cer: Vec<f64>, cer_ex: Vec<f64>, dtw_mse: Vec<f64>) -> Self {
        Self {
            language: language.to_string(),
            cer: mean(&cer),
            cer_ex: mean(&cer_ex),
            dtw_mse: mean(&dtw_mse),
            n: cer.len(),
            per_sample_cer: cer,
            per_sample_cer_ex: cer_ex,
            per_sample_dtw_mse: dtw_mse,
        }
    }

    pub const CSV_HEADER: &'static str = "language,n,cer,cer_ex,dtw_mse";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.6}", self.language, self.n, self.cer, self.cer_ex, self.dtw_mse)
    }
}
