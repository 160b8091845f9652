//! Trace container, ground-truth sidecar, and window slicing.
//!
//! A trace is a sequence of power samples stored on disk as a small binary
//! container: a 16-byte header (magic `SCTR`, format version, sample dtype,
//! reserved pad, little-endian u64 sample count) followed by the samples as
//! little-endian f32. Ground truth and provenance travel in an optional JSON
//! sidecar at `<path>.meta.json`. In memory samples are f64; the f32 width
//! only applies on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File magic for trace containers.
pub const TRACE_MAGIC: [u8; 4] = *b"SCTR";
/// Current trace container version.
pub const TRACE_VERSION: u8 = 1;
/// Dtype tag for little-endian `f32` payloads, the only dtype defined so far.
pub const TRACE_DTYPE_F32: u8 = 0;

/// Ground truth recorded by the generator: where each cryptographic operation
/// starts and what it processed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    /// Sample index of the first sample of each CO, strictly increasing.
    pub starts: Vec<u64>,
    /// One 16-byte plaintext per CO, same order as `starts`.
    pub plaintexts: Vec<[u8; 16]>,
    /// Session key, if the generator chose to record it.
    pub key: Option<[u8; 16]>,
}

impl GroundTruth {
    fn validate(&self) -> Result<()> {
        if !self.starts.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Meta("truth starts must be strictly increasing".into()));
        }
        if self.starts.len() != self.plaintexts.len() {
            return Err(Error::Meta(format!(
                "{} starts but {} plaintexts",
                self.starts.len(),
                self.plaintexts.len()
            )));
        }
        Ok(())
    }
}

/// Metadata attached to a trace, persisted as a flat JSON sidecar.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceMeta {
    /// Name of the cipher profile that produced the trace.
    pub profile_name: String,
    /// Random-delay bound `m` in effect (0 disables the countermeasure).
    pub rd_max: Option<u32>,
    /// Generator seed, if recorded.
    pub seed: Option<u64>,
    /// Ground truth, when the generator knows it.
    pub truth: Option<GroundTruth>,
}

/// Flat on-disk shape of the sidecar. Kept separate from [`TraceMeta`] so the
/// JSON stays a plain object (hex strings for blocks) while the API groups the
/// truth fields together and types them.
#[derive(Serialize, Deserialize)]
struct SidecarJson {
    profile_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rd_max: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    starts: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plaintexts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<String>,
}

fn decode_block(hexstr: &str, what: &str) -> Result<[u8; 16]> {
    let bytes =
        hex::decode(hexstr).map_err(|e| Error::Meta(format!("bad hex in {what}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| Error::Meta(format!("{what} must be 16 bytes (32 hex digits)")))
}

impl TraceMeta {
    /// Minimal metadata carrying just a profile name.
    pub fn named(profile_name: impl Into<String>) -> Self {
        TraceMeta { profile_name: profile_name.into(), ..Default::default() }
    }

    fn to_json(&self) -> SidecarJson {
        let truth = self.truth.as_ref();
        SidecarJson {
            profile_name: self.profile_name.clone(),
            rd_max: self.rd_max,
            seed: self.seed,
            starts: truth.map(|t| t.starts.clone()),
            plaintexts: truth.map(|t| t.plaintexts.iter().map(hex::encode).collect()),
            key: truth.and_then(|t| t.key.map(hex::encode)),
        }
    }

    fn from_json(j: SidecarJson) -> Result<Self> {
        let truth = match (j.starts, j.plaintexts) {
            (None, None) => {
                if j.key.is_some() {
                    return Err(Error::Meta("sidecar has a key but no starts/plaintexts".into()));
                }
                None
            }
            (starts, plaintexts) => {
                let starts = starts.unwrap_or_default();
                let plaintexts = plaintexts
                    .unwrap_or_default()
                    .iter()
                    .map(|s| decode_block(s, "plaintext"))
                    .collect::<Result<Vec<_>>>()?;
                let key = j.key.as_deref().map(|s| decode_block(s, "key")).transpose()?;
                Some(GroundTruth { starts, plaintexts, key })
            }
        };
        let meta =
            TraceMeta { profile_name: j.profile_name, rd_max: j.rd_max, seed: j.seed, truth };
        meta.validate()?;
        Ok(meta)
    }

    /// Checks internal consistency (nonempty profile name, truth shape).
    pub fn validate(&self) -> Result<()> {
        if self.profile_name.is_empty() {
            return Err(Error::Meta("profile_name must not be empty".into()));
        }
        if let Some(t) = &self.truth {
            t.validate()?;
        }
        Ok(())
    }
}

/// A power trace: samples plus optional metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub samples: Vec<f64>,
    pub meta: Option<TraceMeta>,
}

impl Trace {
    pub fn new(samples: Vec<f64>, meta: Option<TraceMeta>) -> Self {
        Trace { samples, meta }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground truth if the metadata carries one.
    pub fn truth(&self) -> Option<&GroundTruth> {
        self.meta.as_ref().and_then(|m| m.truth.as_ref())
    }

    fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Format("trace must contain at least one sample".into()));
        }
        if let Some(meta) = &self.meta {
            meta.validate()?;
            if let Some(t) = &meta.truth {
                let n = self.samples.len() as u64;
                if let Some(&bad) = t.starts.iter().find(|&&s| s >= n) {
                    return Err(Error::Meta(format!(
                        "truth start {bad} is out of range for a {n}-sample trace"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Binary class attached to a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    /// Not the beginning of a CO (class index 0).
    NotStart,
    /// Beginning of a CO (class index 1).
    CoStart,
}

impl ClassLabel {
    /// Class index used throughout: 0 for `NotStart`, 1 for `CoStart`.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::NotStart => 0,
            ClassLabel::CoStart => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ClassLabel::NotStart),
            1 => Ok(ClassLabel::CoStart),
            _ => Err(Error::Format(format!("class index {i} out of range"))),
        }
    }

    /// One-hot target vector; component 1 flags the CO-start class.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            ClassLabel::NotStart => [1.0, 0.0],
            ClassLabel::CoStart => [0.0, 1.0],
        }
    }
}

/// A window cut from a trace, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Sample index of the window's first sample in the source trace.
    pub origin: usize,
    pub values: Vec<f64>,
    pub label: Option<ClassLabel>,
}

/// Classifier scores from a window sweep over one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    /// One score per window position, in sweep order.
    pub scores: Vec<f64>,
    /// Stride between consecutive window origins, in samples.
    pub stride: usize,
    /// Window length in samples.
    pub window_size: usize,
}

impl ScoreSeries {
    /// Sample origin of the `i`-th score's window.
    pub fn origin(&self, i: usize) -> usize {
        i * self.stride
    }
}

/// Number of length-`n` windows at stride `s` that fit in `len` samples.
pub fn window_count(len: usize, n: usize, s: usize) -> usize {
    if n == 0 || s == 0 || len < n {
        return 0;
    }
    (len - n) / s + 1
}

/// Cuts every window of length `n` at stride `s` from the trace, unlabeled.
///
/// Errors when `n` or `s` is zero or the trace is shorter than one window.
pub fn slice(trace: &Trace, n: usize, s: usize) -> Result<Vec<Window>> {
    if n == 0 || s == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    if trace.samples.len() < n {
        return Err(Error::Config(format!(
            "window of {n} samples does not fit in a {}-sample trace",
            trace.samples.len()
        )));
    }
    let count = window_count(trace.samples.len(), n, s);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let origin = i * s;
        out.push(Window {
            origin,
            values: trace.samples[origin..origin + n].to_vec(),
            label: None,
        });
    }
    Ok(out)
}

/// Sidecar path for a trace file: `<path>.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes a trace (and its sidecar when metadata is present).
///
/// Samples must be finite and representable as `f32`; the trace must be
/// nonempty and any truth starts must fall inside it.
pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    trace.validate()?;
    for (i, &x) in trace.samples.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sample {i} is not finite")));
        }
        if x.abs() > f32::MAX as f64 {
            return Err(Error::Numeric(format!("sample {i} ({x:e}) overflows f32")));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TRACE_MAGIC)?;
    w.write_all(&[TRACE_VERSION, TRACE_DTYPE_F32, 0, 0])?;
    w.write_all(&(trace.samples.len() as u64).to_le_bytes())?;
    for &x in &trace.samples {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    if let Some(meta) = &trace.meta {
        let mut text = serde_json::to_string_pretty(&meta.to_json())?;
        text.push('\n');
        std::fs::write(sidecar_path(path), text)?;
    }
    Ok(())
}

/// Reads a trace, picking up the sidecar if one sits next to it.
pub fn read_trace(path: &Path) -> Result<Trace> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("trace file shorter than its header".into()))?;
    if header[..4] != TRACE_MAGIC {
        return Err(Error::Format("bad magic, not a trace file".into()));
    }
    if header[4] != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported trace version {}", header[4])));
    }
    if header[5] != TRACE_DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {}", header[5])));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
    if count == 0 {
        return Err(Error::Format("trace must contain at least one sample".into()));
    }
    let bytes = count
        .checked_mul(4)
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(|| Error::Format(format!("sample count {count} overflows this platform")))?;
    let mut payload = vec![0u8; bytes];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format("trace payload truncated".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after trace payload".into()));
    }
    let samples: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();

    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        let j: SidecarJson = serde_json::from_str(&text)?;
        Some(TraceMeta::from_json(j)?)
    } else {
        None
    };
    let trace = Trace { samples, meta };
    trace.validate()?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn demo_meta() -> TraceMeta {
        TraceMeta {
            profile_name: "demo".into(),
            rd_max: Some(2),
            seed: Some(7),
            truth: Some(GroundTruth {
                starts: vec![0, 40],
                plaintexts: vec![[0x11; 16], [0x22; 16]],
                key: Some([0xab; 16]),
            }),
        }
    }

    #[test]
    fn roundtrip_preserves_samples_and_meta() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sctr");
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 * 0.25).sin()).collect();
        let trace = Trace::new(samples.clone(), Some(demo_meta()));
        write_trace(&path, &trace).unwrap();
        assert!(sidecar_path(&path).ends_with("t.sctr.meta.json"));
        assert!(sidecar_path(&path).exists());

        let back = read_trace(&path).unwrap();
        assert_eq!(back.meta, trace.meta);
        for (a, b) in back.samples.iter().zip(&samples) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn roundtrip_without_sidecar() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bare.sctr");
        write_trace(&path, &Trace::new(vec![1.0, -2.5], None)).unwrap();
        assert!(!sidecar_path(&path).exists());
        let back = read_trace(&path).unwrap();
        assert!(back.meta.is_none());
        assert_eq!(back.samples, vec![1.0, -2.5]);
    }

    #[test]
    fn rejects_bad_samples() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.sctr");
        for bad in [f64::NAN, f64::INFINITY, 1e39] {
            let err = write_trace(&path, &Trace::new(vec![0.0, bad], None)).unwrap_err();
            assert!(matches!(err, Error::Numeric(_)), "{bad} accepted");
        }
        let err = write_trace(&path, &Trace::new(vec![], None)).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sctr");
        write_trace(&path, &Trace::new(vec![1.0, 2.0, 3.0], None)).unwrap();
        let good = std::fs::read(&path).unwrap();

        let cases: Vec<(&str, Vec<u8>)> = vec![
            ("magic", { let mut b = good.clone(); b[0] = b'X'; b }),
            ("version", { let mut b = good.clone(); b[4] = 9; b }),
            ("dtype", { let mut b = good.clone(); b[5] = 1; b }),
            ("count", { let mut b = good.clone(); b[8] = 99; b }),
            ("trailing", { let mut b = good.clone(); b.push(0); b }),
            ("truncated", good[..good.len() - 2].to_vec()),
            ("header only", good[..10].to_vec()),
        ];
        for (what, bytes) in cases {
            std::fs::write(&path, &bytes).unwrap();
            let err = read_trace(&path).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "{what} was accepted");
        }
    }

    #[test]
    fn meta_validation_catches_shape_errors() {
        let mut meta = demo_meta();
        meta.truth.as_mut().unwrap().starts = vec![40, 40];
        assert!(meta.validate().is_err());

        let mut meta = demo_meta();
        meta.truth.as_mut().unwrap().plaintexts.pop();
        assert!(meta.validate().is_err());

        let mut meta = demo_meta();
        meta.profile_name.clear();
        assert!(meta.validate().is_err());
    }

    #[test]
    fn write_rejects_out_of_range_start() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sctr");
        let mut meta = demo_meta();
        meta.truth.as_mut().unwrap().starts = vec![0, 500];
        let err = write_trace(&path, &Trace::new(vec![0.0; 100], Some(meta))).unwrap_err();
        assert!(matches!(err, Error::Meta(_)));
    }

    #[test]
    fn sidecar_hex_is_decoded() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sctr");
        write_trace(&path, &Trace::new(vec![0.5; 64], Some(demo_meta()))).unwrap();
        let text = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(text.contains("\"abababab"));
        let back = read_trace(&path).unwrap();
        let truth = back.truth().unwrap();
        assert_eq!(truth.key, Some([0xab; 16]));
        assert_eq!(truth.plaintexts[1], [0x22; 16]);
    }

    #[test]
    fn window_count_formula() {
        assert_eq!(window_count(10_000, 1000, 100), 91);
        assert_eq!(window_count(10, 10, 3), 1);
        assert_eq!(window_count(9, 10, 3), 0);
        assert_eq!(window_count(10, 0, 3), 0);
        assert_eq!(window_count(10, 3, 0), 0);
    }

    #[test]
    fn slice_origins_and_errors() {
        let trace = Trace::new((0..10).map(f64::from).collect(), None);
        let ws = slice(&trace, 4, 3).unwrap();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0].origin, 0);
        assert_eq!(ws[2].origin, 6);
        assert_eq!(ws[2].values, vec![6.0, 7.0, 8.0, 9.0]);
        assert!(ws.iter().all(|w| w.label.is_none()));

        assert!(slice(&trace, 11, 1).is_err());
        assert!(slice(&trace, 0, 1).is_err());
        assert!(slice(&trace, 4, 0).is_err());
    }

    #[test]
    fn labels_one_hot_and_index() {
        assert_eq!(ClassLabel::CoStart.one_hot(), [0.0, 1.0]);
        assert_eq!(ClassLabel::NotStart.one_hot(), [1.0, 0.0]);
        assert_eq!(ClassLabel::CoStart.index(), 1);
        assert_eq!(ClassLabel::from_index(0).unwrap(), ClassLabel::NotStart);
        assert!(ClassLabel::from_index(2).is_err());
    }

    #[test]
    fn score_series_origin_arithmetic() {
        let s = ScoreSeries { scores: vec![0.0; 5], stride: 7, window_size: 32 };
        assert_eq!(s.origin(0), 0);
        assert_eq!(s.origin(4), 28);
    }
}
