//! Labeled window datasets cut from synthesized traces.
//!
//! Each single-CO cipher trace contributes the window that begins at the
//! CO's first sample (class 1, "start") and a quota of the consecutive
//! windows that follow it (class 0, "rest"). Separate noise traces
//! contribute windows at random origins (class 0). The pools are shuffled
//! together and split 80/15/5 into train/validation/test, and
//! standardization constants are computed over the training split only.
//!
//! Windows are stored as f32 (as captured trace formats would), labels as
//! one byte each. A dataset on disk is a directory holding `manifest.json`
//! plus one binary shard per split: the f32 little-endian window matrix
//! followed by the label bytes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domains, substream};
use crate::trace::{ClassLabel, Trace};

const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Fractions of the shuffled pool per split, in train/val/test order.
const SPLIT_FRACTIONS: [f64; 2] = [0.80, 0.15];

/// Standardization constants computed over a training split and applied to
/// every window before it reaches the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// No-op standardization, used by freshly initialized models.
    pub fn identity() -> Self {
        NormStats { mean: 0.0, std: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !self.std.is_finite() || self.std <= 0.0 {
            return Err(Error::Config(format!(
                "standardization stats must be finite with positive std, got mean {} std {}",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// How many windows of each origin the full pool holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    /// Class-1 windows at CO starts (one per cipher trace).
    pub start: usize,
    /// Class-0 windows from inside/after COs in cipher traces.
    pub rest: usize,
    /// Class-0 windows from dedicated noise traces.
    pub noise: usize,
}

impl PoolCounts {
    pub fn total(&self) -> usize {
        self.start + self.rest + self.noise
    }
}

/// One split of the dataset: row-major windows and one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    window_len: usize,
    windows: Vec<f32>,
    labels: Vec<u8>,
}

impl Split {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn windows(&self) -> &[f32] {
        &self.windows
    }

    /// Window rows widened back to f64 for the model.
    pub fn windows_f64(&self) -> Vec<f64> {
        self.windows.iter().map(|&v| v as f64).collect()
    }

    /// One window row.
    pub fn window(&self, i: usize) -> &[f32] {
        &self.windows[i * self.window_len..(i + 1) * self.window_len]
    }
}

/// A shuffled, split, labeled window dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub window_len: usize,
    pub seed: u64,
    pub norm: NormStats,
    pub counts: PoolCounts,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Pool sizes and provenance for a dataset build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Window length in samples.
    pub window_len: usize,
    /// Number of start windows; also the exact number of cipher traces the
    /// builder expects.
    pub start_count: usize,
    /// Number of rest windows, spread evenly across the cipher traces.
    pub rest_count: usize,
    /// Number of noise windows, spread evenly across the noise traces.
    pub noise_count: usize,
    /// Exact number of noise traces the builder expects.
    pub noise_traces: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be positive".into()));
        }
        if self.start_count == 0 {
            return Err(Error::Config("a dataset needs at least one start window".into()));
        }
        if self.noise_count > 0 && self.noise_traces == 0 {
            return Err(Error::Config(format!(
                "{} noise windows requested but no noise traces declared",
                self.noise_count
            )));
        }
        let total = self.start_count + self.rest_count + self.noise_count;
        if total < 20 {
            return Err(Error::Config(format!(
                "dataset of {total} windows cannot fill a 5% test split; need at least 20"
            )));
        }
        Ok(())
    }

    fn counts(&self) -> PoolCounts {
        PoolCounts {
            start: self.start_count,
            rest: self.rest_count,
            noise: self.noise_count,
        }
    }
}

/// Split `total` into train/val/test by the 80/15/5 fractions, rounding
/// the first two and giving the remainder to test.
fn split_sizes(total: usize) -> Result<(usize, usize, usize)> {
    let n_train = (total as f64 * SPLIT_FRACTIONS[0]).round() as usize;
    let n_val = (total as f64 * SPLIT_FRACTIONS[1]).round() as usize;
    let used = n_train + n_val;
    if used >= total {
        return Err(Error::Config(format!(
            "dataset of {total} windows rounds to an empty test split"
        )));
    }
    Ok((n_train, n_val, total - used))
}

/// Evenly spreads `total` items over `groups` consumers: group `i` gets
/// `debt(i+1) - debt(i)` where `debt(x) = x * total / groups`.
fn quota(i: usize, groups: usize, total: usize) -> usize {
    ((i + 1) * total / groups) - (i * total / groups)
}

/// Accumulates windows from traces, then shuffles, splits, and
/// standardizes. Feed it exactly `start_count` cipher traces and
/// `noise_traces` noise traces, then call [`DatasetBuilder::finish`].
pub struct DatasetBuilder {
    cfg: DatasetConfig,
    start_windows: Vec<f32>,
    rest_windows: Vec<f32>,
    noise_windows: Vec<f32>,
    cipher_seen: usize,
    noise_seen: usize,
}

impl DatasetBuilder {
    pub fn new(cfg: DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DatasetBuilder {
            start_windows: Vec::with_capacity(cfg.start_count * cfg.window_len),
            rest_windows: Vec::with_capacity(cfg.rest_count * cfg.window_len),
            noise_windows: Vec::with_capacity(cfg.noise_count * cfg.window_len),
            cfg,
            cipher_seen: 0,
            noise_seen: 0,
        })
    }

    /// Cuts this trace's start window and its rest-window quota. Traces
    /// must arrive in a fixed order for reproducible builds; the selection
    /// substream is indexed by arrival position.
    pub fn add_cipher_trace(&mut self, trace: &Trace) -> Result<()> {
        if self.cipher_seen == self.cfg.start_count {
            return Err(Error::Config(format!(
                "already received the {} cipher traces this dataset uses",
                self.cfg.start_count
            )));
        }
        let truth = trace
            .truth()
            .ok_or_else(|| Error::Meta("cipher trace has no ground truth".into()))?;
        if truth.starts.len() != 1 {
            return Err(Error::Meta(format!(
                "dataset building expects single-CO cipher traces, got {} starts",
                truth.starts.len()
            )));
        }
        let n = self.cfg.window_len;
        let start = truth.starts[0] as usize;
        if start + n > trace.len() {
            return Err(Error::Config(format!(
                "window of {n} at CO start {start} overruns the {} sample trace",
                trace.len()
            )));
        }
        push_f32(&mut self.start_windows, &trace.samples[start..start + n]);

        let avail = (trace.len() - start - n) / n;
        let want = quota(self.cipher_seen, self.cfg.start_count, self.cfg.rest_count);
        if want > avail {
            return Err(Error::Config(format!(
                "cipher trace {} offers {avail} rest windows, quota needs {want}",
                self.cipher_seen
            )));
        }
        if want > 0 {
            let mut rng = substream(self.cfg.seed, domains::DATASET_SELECT, self.cipher_seen as u64);
            let mut slots: Vec<usize> = (0..avail).collect();
            for j in 0..want {
                let pick = rng.gen_range(j..avail);
                slots.swap(j, pick);
            }
            let mut picked = slots[..want].to_vec();
            picked.sort_unstable();
            for k in picked {
                let origin = start + n + k * n;
                push_f32(&mut self.rest_windows, &trace.samples[origin..origin + n]);
            }
        }
        self.cipher_seen += 1;
        Ok(())
    }

    /// Cuts this noise trace's window quota at random origins.
    pub fn add_noise_trace(&mut self, trace: &Trace) -> Result<()> {
        if self.noise_seen == self.cfg.noise_traces {
            return Err(Error::Config(format!(
                "already received the {} noise traces this dataset uses",
                self.cfg.noise_traces
            )));
        }
        let n = self.cfg.window_len;
        let want = quota(self.noise_seen, self.cfg.noise_traces, self.cfg.noise_count);
        if want > 0 && trace.len() < n {
            return Err(Error::Config(format!(
                "noise trace of {} samples cannot hold a {n} sample window",
                trace.len()
            )));
        }
        let mut rng = substream(self.cfg.seed, domains::DATASET_NOISE, self.noise_seen as u64);
        for _ in 0..want {
            let origin = rng.gen_range(0..=trace.len() - n);
            push_f32(&mut self.noise_windows, &trace.samples[origin..origin + n]);
        }
        self.noise_seen += 1;
        Ok(())
    }

    /// Shuffles the pools together, splits 80/15/5, and computes the
    /// training-split standardization constants.
    pub fn finish(self) -> Result<Dataset> {
        let cfg = &self.cfg;
        if self.cipher_seen != cfg.start_count {
            return Err(Error::Config(format!(
                "dataset needs {} cipher traces, saw {}",
                cfg.start_count, self.cipher_seen
            )));
        }
        if self.noise_seen != cfg.noise_traces {
            return Err(Error::Config(format!(
                "dataset needs {} noise traces, saw {}",
                cfg.noise_traces, self.noise_seen
            )));
        }
        let n = cfg.window_len;
        let counts = cfg.counts();
        let total = counts.total();

        // Pool order is fixed: starts, rests, noise.
        let label_of = |i: usize| -> u8 {
            if i < counts.start {
                ClassLabel::CoStart.index() as u8
            } else {
                ClassLabel::NotStart.index() as u8
            }
        };
        let window_of = |i: usize| -> &[f32] {
            if i < counts.start {
                &self.start_windows[i * n..(i + 1) * n]
            } else if i < counts.start + counts.rest {
                let j = i - counts.start;
                &self.rest_windows[j * n..(j + 1) * n]
            } else {
                let j = i - counts.start - counts.rest;
                &self.noise_windows[j * n..(j + 1) * n]
            }
        };

        let mut order: Vec<usize> = (0..total).collect();
        let mut rng = substream(cfg.seed, domains::DATASET_SHUFFLE, 0);
        for i in (1..total).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let (n_train, n_val, n_test) = split_sizes(total)?;
        let mut splits = Vec::with_capacity(3);
        let mut cursor = 0;
        for size in [n_train, n_val, n_test] {
            let mut windows = Vec::with_capacity(size * n);
            let mut labels = Vec::with_capacity(size);
            for &idx in &order[cursor..cursor + size] {
                windows.extend_from_slice(window_of(idx));
                labels.push(label_of(idx));
            }
            cursor += size;
            splits.push(Split { window_len: n, windows, labels });
        }
        let test = splits.pop().expect("three splits built");
        let val = splits.pop().expect("three splits built");
        let train = splits.pop().expect("three splits built");

        let norm = train_norm(&train)?;
        Ok(Dataset {
            window_len: n,
            seed: cfg.seed,
            norm,
            counts,
            train,
            val,
            test,
        })
    }
}

/// Mean and population standard deviation over every sample of the
/// training split, accumulated in f64 in storage order.
fn train_norm(train: &Split) -> Result<NormStats> {
    let total = train.windows.len();
    if total == 0 {
        return Err(Error::Config("cannot standardize an empty training split".into()));
    }
    let mut sum = 0.0f64;
    for &v in &train.windows {
        sum += v as f64;
    }
    let mean = sum / total as f64;
    let mut sq = 0.0f64;
    for &v in &train.windows {
        let d = v as f64 - mean;
        sq += d * d;
    }
    let std = (sq / total as f64).sqrt();
    if std <= 0.0 {
        return Err(Error::Numeric(
            "training split is constant; cannot standardize".into(),
        ));
    }
    Ok(NormStats { mean, std })
}

fn push_f32(dst: &mut Vec<f32>, samples: &[f64]) {
    dst.extend(samples.iter().map(|&v| v as f32));
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    window_len: usize,
    seed: u64,
    norm: NormStats,
    counts: PoolCounts,
    /// Window rows per split, in train/val/test order.
    splits: [usize; 3],
}

/// Writes `manifest.json` plus `train.bin` / `val.bin` / `test.bin` into
/// `dir` (created if missing). Each shard is the f32 little-endian window
/// matrix followed by one label byte per row.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        window_len: ds.window_len,
        seed: ds.seed,
        norm: ds.norm,
        counts: ds.counts,
        splits: [ds.train.count(), ds.val.count(), ds.test.count()],
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;

    for (name, split) in SPLIT_NAMES.iter().zip([&ds.train, &ds.val, &ds.test]) {
        let mut bytes = Vec::with_capacity(split.windows.len() * 4 + split.labels.len());
        for &v in &split.windows {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&split.labels);
        std::fs::write(dir.join(format!("{name}.bin")), bytes)?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "dataset manifest version {} unsupported, this build reads {MANIFEST_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.window_len == 0 {
        return Err(Error::Format("dataset manifest has window_len 0".into()));
    }
    manifest.norm.validate()?;
    if manifest.counts.total() != manifest.splits.iter().sum::<usize>() {
        return Err(Error::Format(format!(
            "manifest pool counts {:?} disagree with split sizes {:?}",
            manifest.counts, manifest.splits
        )));
    }

    let n = manifest.window_len;
    let mut splits = Vec::with_capacity(3);
    for (name, &count) in SPLIT_NAMES.iter().zip(&manifest.splits) {
        let path = dir.join(format!("{name}.bin"));
        let bytes = std::fs::read(&path)?;
        let expect = count * n * 4 + count;
        if bytes.len() != expect {
            return Err(Error::Format(format!(
                "{} holds {} bytes, expected {expect} for {count} windows of {n}",
                path.display(),
                bytes.len()
            )));
        }
        let (window_bytes, label_bytes) = bytes.split_at(count * n * 4);
        let windows: Vec<f32> = window_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if windows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{name}.bin holds non-finite samples")));
        }
        if let Some(&bad) = label_bytes.iter().find(|&&l| l > 1) {
            return Err(Error::Format(format!(
                "{name}.bin holds label {bad}, valid labels are 0 and 1"
            )));
        }
        splits.push(Split { window_len: n, windows, labels: label_bytes.to_vec() });
    }
    let test = splits.pop().expect("three splits read");
    let val = splits.pop().expect("three splits read");
    let train = splits.pop().expect("three splits read");
    Ok(Dataset {
        window_len: n,
        seed: manifest.seed,
        norm: manifest.norm,
        counts: manifest.counts,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_cipher_trace, gen_noise_trace, CipherProfile, SynthConfig};

    fn small_synth(seed: u64) -> SynthConfig {
        let profile = CipherProfile::custom("toy", 200, 4).unwrap();
        let mut cfg = SynthConfig::defaults(profile, seed);
        cfg.nop_preamble_instr = 10;
        cfg
    }

    fn build_toy(seed: u64) -> Dataset {
        // 8 start + 8 rest + 4 noise = 20 windows, splits 16/3/1.
        let synth = small_synth(seed);
        let cfg = DatasetConfig {
            window_len: 40,
            start_count: 8,
            rest_count: 8,
            noise_count: 4,
            noise_traces: 2,
            seed,
        };
        let mut b = DatasetBuilder::new(cfg).unwrap();
        for i in 0..8 {
            b.add_cipher_trace(&gen_cipher_trace(&synth, i).unwrap()).unwrap();
        }
        for _ in 0..2 {
            b.add_noise_trace(&gen_noise_trace(&synth, 100).unwrap()).unwrap();
        }
        b.finish().unwrap()
    }

    #[test]
    fn builds_shuffles_and_splits() {
        let ds = build_toy(5);
        assert_eq!(ds.train.count(), 16);
        assert_eq!(ds.val.count(), 3);
        assert_eq!(ds.test.count(), 1);
        assert_eq!(ds.counts, PoolCounts { start: 8, rest: 8, noise: 4 });

        let ones: usize = [&ds.train, &ds.val, &ds.test]
            .iter()
            .map(|s| s.labels.iter().filter(|&&l| l == 1).count())
            .sum();
        assert_eq!(ones, 8, "every start window keeps label 1");

        // Start windows carry the CO content: with the toy synth config the
        // window at the CO start is reproducible straight from the trace.
        let synth = small_synth(5);
        let t0 = gen_cipher_trace(&synth, 0).unwrap();
        let start = t0.truth().unwrap().starts[0] as usize;
        let expected: Vec<f32> =
            t0.samples[start..start + 40].iter().map(|&v| v as f32).collect();
        let found = [&ds.train, &ds.val, &ds.test].iter().any(|s| {
            (0..s.count()).any(|i| s.labels[i] == 1 && s.window(i) == expected.as_slice())
        });
        assert!(found, "trace 0's start window is missing from the dataset");
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_toy(9);
        let b = build_toy(9);
        assert_eq!(a, b);
        let c = build_toy(10);
        assert_ne!(a, c);
    }

    #[test]
    fn norm_stats_standardize_the_training_split() {
        let ds = build_toy(7);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let total = ds.train.windows().len() as f64;
        for &v in ds.train.windows() {
            let z = ds.norm.standardize(v as f64);
            sum += z;
            sq += z * z;
        }
        assert!((sum / total).abs() < 1e-9, "standardized mean {}", sum / total);
        assert!(((sq / total) - 1.0).abs() < 1e-9, "standardized var {}", sq / total);
    }

    #[test]
    fn quota_spreads_evenly() {
        // 5 items over 3 groups: 1, 2, 2.
        assert_eq!(quota(0, 3, 5), 1);
        assert_eq!(quota(1, 3, 5), 2);
        assert_eq!(quota(2, 3, 5), 2);
        // Every split sums to the total.
        for (groups, total) in [(7usize, 23usize), (8, 8192), (3, 0), (1, 4)] {
            let sum: usize = (0..groups).map(|i| quota(i, groups, total)).sum();
            assert_eq!(sum, total);
        }
    }

    #[test]
    fn split_sizes_match_published_counts() {
        // 8192 + 8192 + 4096 pool windows split exactly 80/15/5.
        assert_eq!(split_sizes(20480).unwrap(), (16384, 3072, 1024));
        assert_eq!(split_sizes(20).unwrap(), (16, 3, 1));
        // Too small to give test anything.
        assert!(split_sizes(10).is_err());
    }

    #[test]
    fn rejects_bad_usage() {
        let synth = small_synth(1);
        let cfg = DatasetConfig {
            window_len: 40,
            start_count: 8,
            rest_count: 8,
            noise_count: 4,
            noise_traces: 2,
            seed: 1,
        };

        // Finish before all traces arrive.
        let b = DatasetBuilder::new(cfg).unwrap();
        assert!(b.finish().is_err());

        // A trace with no ground truth cannot be a cipher trace.
        let mut b = DatasetBuilder::new(cfg).unwrap();
        let noise = gen_noise_trace(&synth, 100).unwrap();
        assert!(b.add_cipher_trace(&noise).is_err());

        // One trace too many.
        let mut b = DatasetBuilder::new(cfg).unwrap();
        for i in 0..8 {
            b.add_cipher_trace(&gen_cipher_trace(&synth, i).unwrap()).unwrap();
        }
        assert!(b.add_cipher_trace(&gen_cipher_trace(&synth, 8).unwrap()).is_err());

        // Window longer than the trace body.
        let huge = DatasetConfig { window_len: 100_000, ..cfg };
        let mut b = DatasetBuilder::new(huge).unwrap();
        assert!(b.add_cipher_trace(&gen_cipher_trace(&synth, 0).unwrap()).is_err());

        // Noise trace shorter than the window.
        let mut b = DatasetBuilder::new(cfg).unwrap();
        let short = gen_noise_trace(&synth, 5).unwrap();
        assert!(b.add_noise_trace(&short).is_err());

        // Config validation.
        assert!(DatasetConfig { window_len: 0, ..cfg }.validate().is_err());
        assert!(DatasetConfig { start_count: 0, ..cfg }.validate().is_err());
        assert!(DatasetConfig { noise_traces: 0, ..cfg }.validate().is_err());
        assert!(
            DatasetConfig { start_count: 5, rest_count: 5, noise_count: 5, ..cfg }
                .validate()
                .is_err()
        );
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_toy(3);
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn load_rejects_corrupt_directories() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_toy(4);
        save_dataset(&ds, dir.path()).unwrap();

        // Truncated shard.
        let shard = dir.path().join("train.bin");
        let bytes = std::fs::read(&shard).unwrap();
        std::fs::write(&shard, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        std::fs::write(&shard, &bytes).unwrap();
        load_dataset(dir.path()).unwrap();

        // Manifest with inconsistent counts.
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
        manifest["counts"]["start"] = serde_json::json!(9999);
        std::fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        // Missing directory.
        assert!(load_dataset(&dir.path().join("nope")).is_err());
    }
}
