//! Locating CO starts in a long trace with a trained window classifier.
//!
//! The pipeline: sweep the classifier across the trace at a fixed stride
//! and keep the class-1 ("CO start") score per window, binarize the score
//! series into a +/-1 square wave with a threshold, clean isolated
//! flips with a median filter, and read CO start estimates off the rising
//! edges (converted back to sample positions by the stride).
//!
//! The point of classifier-guided cutting over fixed-pitch cutting is that
//! each estimate tracks the *content* of its own CO, so the random-delay
//! jitter accumulated earlier in the trace cancels instead of compounding.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax2, Model};
use crate::parallel;
use crate::trace::{window_count, GroundTruth, ScoreSeries};

/// Windows scored per parallel work item during the sweep.
const SWEEP_CHUNK: usize = 64;

/// Which scalar the sweep keeps from the classifier's two outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// The raw class-1 logit (the default; linear in the final layer).
    Logit,
    /// The class-1 softmax probability.
    Prob,
}

/// Binarized score series: +1 where the score cleared the threshold, -1
/// elsewhere, at the same stride as the originating sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquareWave {
    pub values: Vec<i8>,
    pub stride: usize,
    pub window_size: usize,
}

/// Full locator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocateConfig {
    /// Inference window length in samples (need not match the training
    /// window length).
    pub window_len: usize,
    /// Sweep stride in samples.
    pub stride: usize,
    /// Score above which a window counts as a CO start.
    pub threshold: f64,
    /// Median filter length in wave positions; odd, 1 disables.
    pub median_len: usize,
    pub score: ScoreKind,
}

impl LocateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window_len and stride must be positive, got {} and {}",
                self.window_len, self.stride
            )));
        }
        if self.median_len % 2 == 0 {
            return Err(Error::Config(format!(
                "median filter length must be odd, got {}",
                self.median_len
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Everything [`locate`] produces.
#[derive(Debug, Clone)]
pub struct LocateResult {
    pub series: ScoreSeries,
    pub wave: SquareWave,
    /// Estimated CO start positions in samples, ascending.
    pub starts: Vec<u64>,
}

/// Sweeps the classifier over `samples` and records the class-1 score of
/// every window at origins `0, stride, 2*stride, ...`.
pub fn classify_series(
    model: &Model,
    samples: &[f64],
    window_len: usize,
    stride: usize,
    kind: ScoreKind,
) -> Result<ScoreSeries> {
    if window_len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window_len and stride must be positive, got {window_len} and {stride}"
        )));
    }
    if window_len > samples.len() {
        return Err(Error::Config(format!(
            "window of {window_len} does not fit a {} sample trace",
            samples.len()
        )));
    }
    let count = window_count(samples.len(), window_len, stride);
    let chunks = count.div_ceil(SWEEP_CHUNK);
    let chunk_scores: Vec<Result<Vec<f64>>> = parallel::indexed_map(chunks, |c| {
        let lo = c * SWEEP_CHUNK;
        let hi = (lo + SWEEP_CHUNK).min(count);
        let mut flat = Vec::with_capacity((hi - lo) * window_len);
        for w in lo..hi {
            let origin = w * stride;
            flat.extend_from_slice(&samples[origin..origin + window_len]);
        }
        let logits = model.predict_logits_len(&flat, window_len)?;
        Ok(logits
            .into_iter()
            .map(|l| match kind {
                ScoreKind::Logit => l[1],
                ScoreKind::Prob => softmax2(l)[1],
            })
            .collect())
    });
    let mut scores = Vec::with_capacity(count);
    for cs in chunk_scores {
        scores.extend(cs?);
    }
    Ok(ScoreSeries { scores, stride, window_size: window_len })
}

/// Binarizes a score series: strictly above `threshold` becomes +1,
/// everything else -1.
pub fn threshold(series: &ScoreSeries, threshold: f64) -> SquareWave {
    SquareWave {
        values: series
            .scores
            .iter()
            .map(|&s| if s > threshold { 1 } else { -1 })
            .collect(),
        stride: series.stride,
        window_size: series.window_size,
    }
}

/// Median filter over a +/-1 wave with mirror padding (the edge sample is
/// the mirror axis and is not repeated). `len` must be odd; 1 returns the
/// input unchanged. Since the window length is odd and values are +/-1,
/// the median is the sign of the windowed sum.
pub fn median_filter(wave: &SquareWave, len: usize) -> Result<SquareWave> {
    if len % 2 == 0 || len == 0 {
        return Err(Error::Config(format!(
            "median filter length must be odd and positive, got {len}"
        )));
    }
    let n = wave.values.len();
    if len == 1 || n == 0 {
        return Ok(wave.clone());
    }
    let half = len / 2;
    if half > n - 1 {
        return Err(Error::Config(format!(
            "median filter of {len} needs at least {} positions, wave has {n}",
            half + 1
        )));
    }
    // Mirror index: -1 -> 1, -2 -> 2; n -> n-2, n+1 -> n-3.
    let reflect = |i: isize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let values = (0..n)
        .map(|i| {
            let mut sum = 0i32;
            for d in -(half as isize)..=(half as isize) {
                sum += wave.values[reflect(i as isize + d)] as i32;
            }
            if sum > 0 { 1 } else { -1 }
        })
        .collect();
    Ok(SquareWave { values, stride: wave.stride, window_size: wave.window_size })
}

/// Positions where the wave goes from -1 to +1. A wave that starts at +1
/// has an edge at position 0 (a CO already underway at the first window).
pub fn rising_edges(wave: &SquareWave) -> Vec<usize> {
    let mut edges = Vec::new();
    let mut prev = -1i8;
    for (i, &v) in wave.values.iter().enumerate() {
        if v == 1 && prev == -1 {
            edges.push(i);
        }
        prev = v;
    }
    edges
}

/// Converts wave positions back to sample positions.
pub fn to_sample_starts(edges: &[usize], stride: usize) -> Vec<u64> {
    edges.iter().map(|&e| (e * stride) as u64).collect()
}

/// The full location pipeline: sweep, threshold, median filter, edges.
pub fn locate(model: &Model, samples: &[f64], cfg: &LocateConfig) -> Result<LocateResult> {
    cfg.validate()?;
    let series = classify_series(model, samples, cfg.window_len, cfg.stride, cfg.score)?;
    let raw_wave = threshold(&series, cfg.threshold);
    let wave = median_filter(&raw_wave, cfg.median_len)?;
    let starts = to_sample_starts(&rising_edges(&wave), cfg.stride);
    Ok(LocateResult { series, wave, starts })
}

/// Rows of `seg_len` samples cut at each start; starts whose row would run
/// past the end of the trace are dropped (their count is returned).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBlock {
    pub seg_len: usize,
    /// Row-major `[rows][seg_len]`.
    pub data: Vec<f64>,
    /// The start position each row was cut at.
    pub starts: Vec<u64>,
}

impl AlignedBlock {
    pub fn rows(&self) -> usize {
        self.starts.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.seg_len..(r + 1) * self.seg_len]
    }
}

/// Cuts one row per start. Returns the block and how many starts were
/// dropped because their row overran the trace.
pub fn align(samples: &[f64], starts: &[u64], seg_len: usize) -> Result<(AlignedBlock, usize)> {
    if seg_len == 0 {
        return Err(Error::Config("aligned rows must be non-empty".into()));
    }
    let mut data = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for &s in starts {
        let lo = s as usize;
        match lo.checked_add(seg_len) {
            Some(hi) if hi <= samples.len() => {
                data.extend_from_slice(&samples[lo..hi]);
                kept.push(s);
            }
            _ => dropped += 1,
        }
    }
    Ok((AlignedBlock { seg_len, data, starts: kept }, dropped))
}

/// Score of predicted starts against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hits {
    /// Truth starts matched by a prediction within tolerance.
    pub matched: usize,
    /// Truth starts no prediction came close to.
    pub missed: usize,
    /// Predictions left over after matching.
    pub false_starts: usize,
    /// `100 * matched / truth_count`; 100 when there was nothing to find.
    pub percent: f64,
}

/// Greedy in-order one-to-one matching of ascending predictions against
/// ascending truth starts: each truth start takes the earliest unused
/// prediction within `tol` samples.
pub fn hits(predicted: &[u64], truth: &[u64], tol: u64) -> Hits {
    debug_assert!(predicted.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(truth.windows(2).all(|w| w[0] <= w[1]));
    let mut matched = 0usize;
    let mut missed = 0usize;
    let mut i = 0usize;
    for &t in truth {
        while i < predicted.len() && predicted[i] + tol < t {
            i += 1; // too early for this and every later truth start
        }
        if i < predicted.len() && predicted[i] <= t + tol {
            matched += 1;
            i += 1;
        } else {
            missed += 1;
        }
    }
    let percent = if truth.is_empty() {
        100.0
    } else {
        100.0 * matched as f64 / truth.len() as f64
    };
    Hits {
        matched,
        missed,
        false_starts: predicted.len() - matched,
        percent,
    }
}

/// Looks up the plaintext of the CO each predicted start points at, by
/// nearest ground-truth start. Fails if a prediction is further than
/// `max_dist` from every truth start or two predictions claim the same CO.
pub fn plaintexts_for_starts(
    predicted: &[u64],
    truth: &GroundTruth,
    max_dist: u64,
) -> Result<Vec<[u8; 16]>> {
    let mut claimed = vec![false; truth.starts.len()];
    let mut result = Vec::with_capacity(predicted.len());
    for &p in predicted {
        let nearest = truth
            .starts
            .iter()
            .enumerate()
            .min_by_key(|(_, &t)| t.abs_diff(p))
            .ok_or_else(|| Error::Meta("ground truth holds no CO starts".into()))?;
        let (idx, &t) = nearest;
        if t.abs_diff(p) > max_dist {
            return Err(Error::Config(format!(
                "predicted start {p} is {} samples from the nearest CO at {t}, cap is {max_dist}",
                t.abs_diff(p)
            )));
        }
        if claimed[idx] {
            return Err(Error::Config(format!(
                "two predicted starts claim the CO at {t}"
            )));
        }
        claimed[idx] = true;
        result.push(truth.plaintexts[idx]);
    }
    Ok(result)
}

/// File magic for aligned-block containers.
pub const BLOCK_MAGIC: [u8; 4] = *b"SCAB";
/// Current aligned-block container version.
pub const BLOCK_VERSION: u8 = 1;
/// Dtype tag for little-endian `f32` payloads.
pub const BLOCK_DTYPE_F32: u8 = 0;

/// Writes an aligned block: 16-byte header (magic `SCAB`, version, dtype,
/// plaintext flag, u64 row count), u64 seg_len, the row starts as u64 LE,
/// the per-row plaintexts when given, then the rows as f32 LE.
pub fn write_block(
    path: &Path,
    block: &AlignedBlock,
    plaintexts: Option<&[[u8; 16]]>,
) -> Result<()> {
    if block.data.len() != block.rows() * block.seg_len {
        return Err(Error::Shape(format!(
            "{} samples do not fill {} rows of {}",
            block.data.len(),
            block.rows(),
            block.seg_len
        )));
    }
    if let Some(pts) = plaintexts {
        if pts.len() != block.rows() {
            return Err(Error::Shape(format!(
                "{} plaintexts for {} rows",
                pts.len(),
                block.rows()
            )));
        }
    }
    for (i, &x) in block.data.iter().enumerate() {
        if !x.is_finite() || x.abs() > f32::MAX as f64 {
            return Err(Error::Numeric(format!("sample {i} ({x:e}) does not fit an f32")));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&BLOCK_MAGIC)?;
    w.write_all(&[BLOCK_VERSION, BLOCK_DTYPE_F32, plaintexts.is_some() as u8, 0])?;
    w.write_all(&(block.rows() as u64).to_le_bytes())?;
    w.write_all(&(block.seg_len as u64).to_le_bytes())?;
    for &s in &block.starts {
        w.write_all(&s.to_le_bytes())?;
    }
    if let Some(pts) = plaintexts {
        for pt in pts {
            w.write_all(pt)?;
        }
    }
    for &x in &block.data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an aligned block written by [`write_block`].
pub fn read_block(path: &Path) -> Result<(AlignedBlock, Option<Vec<[u8; 16]>>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 {
        return Err(Error::Format("block file shorter than its header".into()));
    }
    if bytes[..4] != BLOCK_MAGIC {
        return Err(Error::Format("bad magic, not an aligned-block file".into()));
    }
    if bytes[4] != BLOCK_VERSION {
        return Err(Error::Format(format!("unsupported block version {}", bytes[4])));
    }
    if bytes[5] != BLOCK_DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {}", bytes[5])));
    }
    let has_pts = match bytes[6] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad plaintext flag {other}"))),
    };
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let seg_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let (rows, seg_len) = (usize::try_from(rows), usize::try_from(seg_len));
    let (rows, seg_len) = match (rows, seg_len) {
        (Ok(r), Ok(s)) if s > 0 => (r, s),
        _ => return Err(Error::Format("block dimensions out of range".into())),
    };
    let need = 24usize
        .checked_add(rows.checked_mul(8).unwrap_or(usize::MAX))
        .and_then(|x| x.checked_add(if has_pts { rows * 16 } else { 0 }))
        .and_then(|x| rows.checked_mul(seg_len).and_then(|n| n.checked_mul(4)).map(|p| x + p))
        .ok_or_else(|| Error::Format("block dimensions out of range".into()))?;
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "block file is {} bytes, dimensions need {need}",
            bytes.len()
        )));
    }
    let mut pos = 24;
    let mut starts = Vec::with_capacity(rows);
    for _ in 0..rows {
        starts.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
        pos += 8;
    }
    if !starts.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Format("block starts must be strictly increasing".into()));
    }
    let plaintexts = if has_pts {
        let mut pts = Vec::with_capacity(rows);
        for _ in 0..rows {
            pts.push(<[u8; 16]>::try_from(&bytes[pos..pos + 16]).unwrap());
            pos += 16;
        }
        Some(pts)
    } else {
        None
    };
    let mut data = Vec::with_capacity(rows * seg_len);
    for c in bytes[pos..].chunks_exact(4) {
        let x = f32::from_le_bytes(c.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::Numeric("block payload holds a non-finite sample".into()));
        }
        data.push(x as f64);
    }
    Ok((AlignedBlock { seg_len, data, starts }, plaintexts))
}
