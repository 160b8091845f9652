//! Correlation power analysis against AES first-round S-box output.
//!
//! Rows cut at estimated CO starts are aggregated into coarse columns
//! (sums of `width` consecutive samples), then each key byte guess is
//! scored by the largest absolute Pearson correlation between its
//! predicted S-box Hamming weights and any aggregated column. Key
//! recovery working at all is the end-to-end proof that the estimated
//! starts are aligned: correlation dies when rows are cut at the wrong
//! offsets.

use serde::{Deserialize, Serialize};

use crate::autograd::conv_kernel;
use crate::error::{Error, Result};
use crate::locator::AlignedBlock;
use crate::parallel;
use crate::synth::{aes_sbox, hw};

/// Aggregated trace matrix, column-major: `cols` columns of `rows` sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Aggregated {
    pub fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }
}

/// Sums every `width` consecutive samples of each row into one column
/// value; a trailing remainder narrower than `width` is dropped.
pub fn aggregate(block: &AlignedBlock, width: usize) -> Result<Aggregated> {
    if width == 0 || width > block.seg_len {
        return Err(Error::Config(format!(
            "aggregation width must be in 1..={}, got {width}",
            block.seg_len
        )));
    }
    let rows = block.rows();
    let cols = block.seg_len / width;
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = block.row(r);
        for c in 0..cols {
            let sum: f64 = row[c * width..(c + 1) * width].iter().sum();
            data[c * rows + r] = sum;
        }
    }
    Ok(Aggregated { rows, cols, data })
}

/// Predicted Hamming weights of the first-round S-box output for one key
/// byte guess: `hw(sbox(pt[byte] ^ guess))` per plaintext.
pub fn hypothesis(pts: &[[u8; 16]], byte: usize, guess: u8) -> Vec<f64> {
    pts.iter()
        .map(|pt| hw(aes_sbox(pt[byte] ^ guess)) as f64)
        .collect()
}

/// Pearson correlation coefficient. Returns 0 when either side has zero
/// variance (a flat hypothesis or a dead column carries no information).
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "correlation needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Config(format!(
            "correlation needs at least 2 points, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Scores for one key byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpaByte {
    /// `scores[g]` is the best absolute correlation guess `g` reached over
    /// all aggregated columns.
    pub scores: Vec<f64>,
    pub best_guess: u8,
    /// Column where the winning guess peaked.
    pub best_col: usize,
    /// Rank of the true key byte (1 = winner), counting every other guess
    /// scoring at least as high. Present when the true key was supplied.
    pub rank: Option<usize>,
}

/// Full 16-byte attack outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpaResult {
    pub bytes: Vec<CpaByte>,
}

impl CpaResult {
    /// The winning guess per byte position.
    pub fn recovered_key(&self) -> [u8; 16] {
        let mut key = [0u8; 16];
        for (k, b) in key.iter_mut().zip(&self.bytes) {
            *k = b.best_guess;
        }
        key
    }

    /// Whether every true key byte ranked first. None when the attack ran
    /// without a reference key.
    pub fn all_rank1(&self) -> Option<bool> {
        self.bytes
            .iter()
            .map(|b| b.rank)
            .collect::<Option<Vec<_>>>()
            .map(|ranks| ranks.iter().all(|&r| r == 1))
    }

    /// How many of the 16 bytes ranked first.
    pub fn rank1_count(&self) -> Option<usize> {
        self.bytes
            .iter()
            .map(|b| b.rank)
            .collect::<Option<Vec<_>>>()
            .map(|ranks| ranks.iter().filter(|&&r| r == 1).count())
    }
}

/// Centered copy with the mean removed, plus its variance sum. A zero
/// variance flags a degenerate vector.
fn center(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let var: f64 = centered.iter().map(|x| x * x).sum();
    (centered, var)
}

/// Correlation attack over aligned rows. `width` sets the aggregation
/// column width; pass the true key to get per-byte ranks.
pub fn attack(
    block: &AlignedBlock,
    pts: &[[u8; 16]],
    width: usize,
    true_key: Option<&[u8; 16]>,
) -> Result<CpaResult> {
    if block.rows() != pts.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} plaintexts",
            block.rows(),
            pts.len()
        )));
    }
    if block.rows() < 2 {
        return Err(Error::Config(format!(
            "correlation attack needs at least 2 rows, got {}",
            block.rows()
        )));
    }
    let agg = aggregate(block, width)?;

    // Columns are shared by every guess; center them once.
    let centered_cols: Vec<(Vec<f64>, f64)> =
        (0..agg.cols).map(|c| center(agg.col(c))).collect();

    let bytes: Vec<CpaByte> = parallel::indexed_map(16, |byte| {
        let mut scores = Vec::with_capacity(256);
        let mut best_cols = Vec::with_capacity(256);
        for guess in 0..=255u8 {
            let (h, hvar) = center(&hypothesis(pts, byte, guess));
            let mut best = 0.0f64;
            let mut best_col = 0usize;
            if hvar > 0.0 {
                for (c, (col, cvar)) in centered_cols.iter().enumerate() {
                    if *cvar == 0.0 {
                        continue;
                    }
                    let r = (conv_kernel::dot(&h, col) / (hvar * cvar).sqrt()).abs();
                    if r > best {
                        best = r;
                        best_col = c;
                    }
                }
            }
            scores.push(best);
            best_cols.push(best_col);
        }
        let best_guess = scores
            .iter()
            .enumerate()
            .max_by(|(ga, a), (gb, b)| a.partial_cmp(b).unwrap().then(gb.cmp(ga)))
            .map(|(g, _)| g)
            .expect("256 guesses scored");
        let rank = true_key.map(|key| {
            let t = key[byte] as usize;
            1 + scores
                .iter()
                .enumerate()
                .filter(|&(g, &s)| g != t && s >= scores[t])
                .count()
        });
        CpaByte {
            best_guess: best_guess as u8,
            best_col: best_cols[best_guess],
            scores,
            rank,
        }
    });
    Ok(CpaResult { bytes })
}

/// One evaluation point of [`min_cos_to_rank1`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulePoint {
    /// How many rows (COs) the attack used.
    pub co_count: usize,
    /// Rank of each true key byte at this budget.
    pub ranks: Vec<usize>,
    /// Bytes whose true value ranked first.
    pub rank1_bytes: usize,
    pub all_rank1: bool,
}

/// Outcome of the row-budget sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinCosReport {
    pub points: Vec<SchedulePoint>,
    /// Smallest scheduled row count where all 16 bytes ranked first; None
    /// when no point got there.
    pub min_cos: Option<usize>,
}

/// Attacks growing prefixes of the rows and reports the smallest budget
/// that fully recovers the key. `schedule` must be ascending and within
/// the row count.
pub fn min_cos_to_rank1(
    block: &AlignedBlock,
    pts: &[[u8; 16]],
    width: usize,
    true_key: &[u8; 16],
    schedule: &[usize],
) -> Result<MinCosReport> {
    if schedule.is_empty() {
        return Err(Error::Config("schedule has no row counts".into()));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("schedule must be strictly ascending".into()));
    }
    if *schedule.last().expect("non-empty") > block.rows() {
        return Err(Error::Config(format!(
            "schedule ends at {} rows, block has {}",
            schedule.last().expect("non-empty"),
            block.rows()
        )));
    }
    let mut points = Vec::with_capacity(schedule.len());
    let mut min_cos = None;
    for &count in schedule {
        let prefix = AlignedBlock {
            seg_len: block.seg_len,
            data: block.data[..count * block.seg_len].to_vec(),
            starts: block.starts[..count].to_vec(),
        };
        let result = attack(&prefix, &pts[..count], width, Some(true_key))?;
        let ranks: Vec<usize> =
            result.bytes.iter().map(|b| b.rank.expect("ranks present")).collect();
        let rank1_bytes = ranks.iter().filter(|&&r| r == 1).count();
        let all = rank1_bytes == 16;
        points.push(SchedulePoint { co_count: count, ranks, rank1_bytes, all_rank1: all });
        if all && min_cos.is_none() {
            min_cos = Some(count);
        }
    }
    Ok(MinCosReport { points, min_cos })
}
