//! Declarative run configuration: TOML files with preset inheritance.
//!
//! A config names an optional built-in preset; the preset's values form the
//! base and the file's own keys override them field by field. The merged
//! config is validated as a whole and hashed (SHA-256 of its canonical TOML
//! form) so every artifact can state exactly which configuration made it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use colocate_core::dataset::DatasetConfig;
use colocate_core::locator::{LocateConfig, ScoreKind};
use colocate_core::model::TrainConfig;
use colocate_core::synth::{CipherProfile, SynthConfig};

/// Error split the exit-code contract needs: usage errors exit 2, everything
/// else exits 1.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown keys, invalid values, missing upstream
    /// artifacts. Exit code 2.
    Usage(String),
    /// Failure while running: I/O, numerics, metric gates. Exit code 1.
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<colocate_core::Error> for CliError {
    fn from(e: colocate_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// One of the built-in cipher profiles.
    pub profile: String,
    /// Divides the profile's full-size mean length.
    pub scale: usize,
    /// Samples per instruction (E).
    pub samples_per_instr: usize,
    /// Random-delay bound m (0 disables the countermeasure).
    pub rd_max: u32,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub nop_preamble_instr: usize,
    /// COs in the session trace.
    pub num_cos: usize,
    /// Probability of a noise burst between consecutive session COs.
    pub noise_mix: f64,
    pub noise_len_range: (usize, usize),
    /// Length of the standalone noise trace, in instructions.
    pub noise_trace_instr: usize,
    /// Standalone cipher traces `synth` writes for inspection.
    pub cipher_trace_count: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            profile: "simon128".into(),
            scale: 10,
            samples_per_instr: 4,
            rd_max: 4,
            alpha: 1.0,
            beta: 0.0,
            sigma: 0.5,
            nop_preamble_instr: 97,
            num_cos: 64,
            noise_mix: 0.0,
            noise_len_range: (10, 100),
            noise_trace_instr: 50_000,
            cipher_trace_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Training window length in samples (N_train).
    pub window_len: usize,
    pub start_count: usize,
    pub rest_count: usize,
    pub noise_count: usize,
    pub noise_traces: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            window_len: 200,
            start_count: 8192,
            rest_count: 4096,
            noise_count: 4096,
            noise_traces: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    /// Exit-1 gate on test-split accuracy, in [0, 1]; absent disables it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_test_accuracy: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 2,
            batch_size: 64,
            lr: 1e-3,
            bn_momentum: 0.1,
            min_test_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocateSection {
    /// Inference window length in samples (N_inf).
    pub window_len: usize,
    /// Sweep stride in samples (s).
    pub stride: usize,
    pub threshold: f64,
    /// `logit` scores with the raw class-1 output, `prob` with its softmax.
    pub score: String,
    pub median_len: usize,
    /// Row length for alignment; absent means the profile mean length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_len: Option<usize>,
}

impl Default for LocateSection {
    fn default() -> Self {
        LocateSection {
            window_len: 200,
            stride: 10,
            threshold: 0.0,
            score: "logit".into(),
            median_len: 5,
            seg_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Aggregation column width A; absent means one instruction (A = E).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agg_width: Option<usize>,
    /// CO budgets for the rank-vs-count sweep; strictly ascending.
    pub schedule: Vec<usize>,
    /// Exit-1 gate: require every key byte at rank 1 on the full block.
    pub require_rank1: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            agg_width: None,
            schedule: vec![16, 32, 48, 64],
            require_rank1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Hits tolerance in samples; absent means two strides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<u64>,
    /// Exit-1 gate on the hits percentage; absent disables it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_hits_percent: Option<f64>,
    /// Exit-1 gate on leftover predictions; absent disables it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_false_starts: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { tol: None, min_hits_percent: None, max_false_starts: None }
    }
}

/// The whole declarative run: one seed, six stage sections.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base preset this config was built on, if any (resolved before
    /// deserialization; kept so the canonical form records it).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed: u64,
    pub synth: SynthSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub locate: LocateSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
}

const PRESETS: [(&str, &str); 10] = [
    ("aes128", include_str!("../presets/aes128.toml")),
    ("aes128-scaled", include_str!("../presets/aes128-scaled.toml")),
    ("aes128-masked", include_str!("../presets/aes128-masked.toml")),
    ("aes128-masked-scaled", include_str!("../presets/aes128-masked-scaled.toml")),
    ("clefia128", include_str!("../presets/clefia128.toml")),
    ("clefia128-scaled", include_str!("../presets/clefia128-scaled.toml")),
    ("camellia128", include_str!("../presets/camellia128.toml")),
    ("camellia128-scaled", include_str!("../presets/camellia128-scaled.toml")),
    ("simon128", include_str!("../presets/simon128.toml")),
    ("simon128-scaled", include_str!("../presets/simon128-scaled.toml")),
];

/// Names of the built-in presets, in listing order.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

fn preset_toml(name: &str) -> CliResult<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            usage(format!("unknown preset {name:?}; known: {}", preset_names().join(", ")))
        })
}

/// Recursively overlays `over` onto `base`: tables merge key by key, any
/// other value replaces the base outright.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_toml(text: &str, what: &str) -> CliResult<toml::Value> {
    text.parse::<toml::Value>().map_err(|e| usage(format!("{what}: {e}")))
}

/// Loads and merges a run configuration.
///
/// Precedence, lowest to highest: built-in defaults, the preset (from
/// `--preset` or the file's `preset` key), the config file, `--seed`.
pub fn load(
    config_path: Option<&Path>,
    preset_flag: Option<&str>,
    seed_flag: Option<u64>,
) -> CliResult<RunConfig> {
    let file_value = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            Some(parse_toml(&text, &format!("config {}", path.display()))?)
        }
        None => None,
    };

    let file_preset = file_value
        .as_ref()
        .and_then(|v| v.get("preset"))
        .map(|p| match p {
            toml::Value::String(s) => Ok(s.clone()),
            other => Err(usage(format!("preset must be a string, got {other}"))),
        })
        .transpose()?;

    let preset = match (preset_flag, file_preset) {
        (Some(a), Some(b)) if a != b => {
            return Err(usage(format!(
                "--preset {a} conflicts with the config file's preset = {b:?}"
            )));
        }
        (Some(a), _) => Some(a.to_string()),
        (None, b) => b,
    };

    let mut value = toml::Value::try_from(RunConfig::default())
        .expect("defaults serialize");
    if let Some(name) = &preset {
        merge(&mut value, parse_toml(preset_toml(name)?, &format!("preset {name}"))?);
    }
    if let Some(file) = file_value {
        merge(&mut value, file);
    }
    if let Some(name) = &preset {
        merge(
            &mut value,
            toml::Value::Table({
                let mut t = toml::map::Map::new();
                t.insert("preset".into(), toml::Value::String(name.clone()));
                t
            }),
        );
    }

    let mut cfg: RunConfig =
        value.try_into().map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Canonical TOML form of the merged config.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML, as lowercase hex.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_toml().as_bytes()))
    }

    /// The cipher profile the synth section describes.
    pub fn profile(&self) -> CliResult<CipherProfile> {
        CipherProfile::from_preset(
            &self.synth.profile,
            self.synth.scale,
            self.synth.samples_per_instr,
        )
        .map_err(|e| usage(e.to_string()))
    }

    /// Generator configuration for this run.
    pub fn synth_config(&self) -> CliResult<SynthConfig> {
        let s = &self.synth;
        let cfg = SynthConfig {
            profile: self.profile()?,
            rd_max: s.rd_max,
            samples_per_instr: s.samples_per_instr,
            alpha: s.alpha,
            beta: s.beta,
            sigma: s.sigma,
            nop_preamble_instr: s.nop_preamble_instr,
            seed: self.seed,
            num_cos: s.num_cos,
            noise_mix: s.noise_mix,
            noise_len_range: s.noise_len_range,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn dataset_config(&self) -> CliResult<DatasetConfig> {
        let d = &self.dataset;
        let cfg = DatasetConfig {
            window_len: d.window_len,
            start_count: d.start_count,
            rest_count: d.rest_count,
            noise_count: d.noise_count,
            noise_traces: d.noise_traces,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let mut cfg = TrainConfig::standard(self.seed);
        cfg.epochs = t.epochs;
        cfg.batch_size = t.batch_size;
        cfg.adam.lr = t.lr;
        cfg.bn_momentum = t.bn_momentum;
        Ok(cfg)
    }

    pub fn score_kind(&self) -> CliResult<ScoreKind> {
        match self.locate.score.as_str() {
            "logit" => Ok(ScoreKind::Logit),
            "prob" => Ok(ScoreKind::Prob),
            other => Err(usage(format!("locate.score must be \"logit\" or \"prob\", got {other:?}"))),
        }
    }

    pub fn locate_config(&self) -> CliResult<LocateConfig> {
        let l = &self.locate;
        let cfg = LocateConfig {
            window_len: l.window_len,
            stride: l.stride,
            threshold: l.threshold,
            median_len: l.median_len,
            score: self.score_kind()?,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Alignment row length: configured, or the profile mean length.
    pub fn seg_len(&self) -> CliResult<usize> {
        match self.locate.seg_len {
            Some(v) => Ok(v),
            None => Ok(self.profile()?.mean_len_samples),
        }
    }

    /// Aggregation width: configured, or one instruction (A = E).
    pub fn agg_width(&self) -> usize {
        self.attack.agg_width.unwrap_or(self.synth.samples_per_instr)
    }

    /// Hits tolerance: configured, or two strides.
    pub fn tol(&self) -> u64 {
        self.eval.tol.unwrap_or(2 * self.locate.stride as u64)
    }

    /// Cross-section validation of the merged config.
    pub fn validate(&self) -> CliResult<()> {
        self.synth_config()?;
        self.dataset_config()?;
        self.locate_config()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(usage("train.epochs must be at least 1"));
        }
        if t.batch_size < 2 {
            return Err(usage("train.batch_size must be at least 2"));
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(usage(format!("train.lr must be positive, got {}", t.lr)));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(usage(format!(
                "train.bn_momentum must lie in [0, 1], got {}",
                t.bn_momentum
            )));
        }
        if let Some(a) = t.min_test_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(usage(format!(
                    "train.min_test_accuracy must lie in [0, 1], got {a}"
                )));
            }
        }
        if self.seg_len()? == 0 {
            return Err(usage("locate.seg_len must be at least 1"));
        }
        if self.agg_width() == 0 {
            return Err(usage("attack.agg_width must be at least 1"));
        }
        if self.agg_width() > self.seg_len()? {
            return Err(usage(format!(
                "attack.agg_width {} exceeds the {}-sample alignment rows",
                self.agg_width(),
                self.seg_len()?
            )));
        }
        if self.attack.schedule.is_empty() {
            return Err(usage("attack.schedule must list at least one CO count"));
        }
        if self.attack.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(usage("attack.schedule must be strictly ascending"));
        }
        if self.attack.schedule[0] < 2 {
            return Err(usage("attack.schedule entries must be at least 2"));
        }
        if let Some(p) = self.eval.min_hits_percent {
            if !(0.0..=100.0).contains(&p) {
                return Err(usage(format!(
                    "eval.min_hits_percent must lie in [0, 100], got {p}"
                )));
            }
        }
        Ok(())
    }
}
