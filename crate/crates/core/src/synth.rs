//! Deterministic simulation of a CPU executing cryptographic operations.
//!
//! The power model is per-instruction Hamming weight: an instruction carrying
//! `data_byte` emits `samples_per_instr` samples of
//! `beta + alpha * hw(data_byte) + N(0, sigma)`. A cryptographic operation
//! (CO) is a fixed pseudo-random body of cipher instructions, identical from
//! one execution to the next except for sixteen leak positions that carry the
//! first-round S-box output `sbox(pt[b] ^ key[b])`. The random-delay
//! countermeasure inserts a uniform number of dummy instructions between
//! consecutive body instructions.
//!
//! All draws come from per-purpose ChaCha8 substreams of the config seed, so
//! generation is reproducible and order-independent (see [`crate::rng`]).

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{domains, substream, GaussSource};
use crate::trace::{GroundTruth, Trace, TraceMeta};

/// AES S-box (forward).
#[rustfmt::skip]
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

/// Hamming weight of a byte.
pub fn hw(b: u8) -> u32 {
    b.count_ones()
}

/// AES S-box lookup.
pub fn aes_sbox(b: u8) -> u8 {
    SBOX[b as usize]
}

/// What a simulated instruction is doing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstrKind {
    /// Idle filler; always carries data byte 0.
    Nop,
    /// Part of a CO body.
    Cipher,
    /// Dummy instruction inserted by the random-delay countermeasure.
    RandomDelay,
    /// Unrelated activity between COs or in noise captures.
    Noise,
}

/// One simulated instruction: the byte on the bus and why it executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InstrEvent {
    pub data_byte: u8,
    pub kind: InstrKind,
}

impl InstrEvent {
    /// A NOP event (data byte fixed to 0).
    pub fn nop() -> Self {
        InstrEvent { data_byte: 0, kind: InstrKind::Nop }
    }
}

/// Instruction offsets within a CO body that carry the sixteen S-box outputs.
///
/// The leaks sit early in the body (as first-round S-box lookups do) with
/// fixed filler on both sides, which keeps them close to the content a window
/// classifier anchors on under random delay.
pub const LEAK_FIRST_INSTR: usize = 8;

fn leak_positions() -> [usize; 16] {
    std::array::from_fn(|b| LEAK_FIRST_INSTR + b)
}

/// Minimum CO body length that fits the leak layout.
pub const MIN_BODY_LEN_INSTR: usize = LEAK_FIRST_INSTR + 16;

const PRESETS: [(&str, usize); 5] = [
    ("aes128", 220_000),
    ("aes128-masked", 50_000),
    ("clefia128", 108_000),
    ("camellia128", 6_000),
    ("simon128", 10_000),
];

/// Shape of one cryptographic operation: how long it runs and where the
/// sixteen key-dependent bytes sit in its body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherProfile {
    pub name: String,
    /// Target CO length in samples (before random delay).
    pub mean_len_samples: usize,
    /// Body length in instructions, derived from the target length.
    pub body_len_instr: usize,
    /// Instruction offsets of the S-box output bytes, strictly increasing.
    pub leak_positions: [usize; 16],
}

impl CipherProfile {
    /// Profile with an explicit target length (already scaled), for
    /// `samples_per_instr` samples per instruction.
    pub fn custom(
        name: impl Into<String>,
        mean_len_samples: usize,
        samples_per_instr: usize,
    ) -> Result<Self> {
        let name = name.into();
        if samples_per_instr == 0 {
            return Err(Error::Config("samples_per_instr must be at least 1".into()));
        }
        if mean_len_samples == 0 {
            return Err(Error::Config(format!("profile {name}: mean length must be positive")));
        }
        let body_len_instr = (2 * mean_len_samples + samples_per_instr) / (2 * samples_per_instr);
        if body_len_instr < MIN_BODY_LEN_INSTR {
            return Err(Error::Config(format!(
                "profile {name}: body of {body_len_instr} instructions cannot hold leak bytes \
                 at offsets {LEAK_FIRST_INSTR}..{} (need at least {MIN_BODY_LEN_INSTR}); \
                 reduce the scale or samples_per_instr",
                MIN_BODY_LEN_INSTR - 1,
            )));
        }
        Ok(CipherProfile {
            name,
            mean_len_samples,
            body_len_instr,
            leak_positions: leak_positions(),
        })
    }

    /// One of the five built-in cipher profiles, with its full-size target
    /// length divided by `scale`.
    pub fn from_preset(name: &str, scale: usize, samples_per_instr: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        let full = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, len)| *len)
            .ok_or_else(|| {
                let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown profile {name:?}; known: {}", known.join(", ")))
            })?;
        Self::custom(name, full / scale, samples_per_instr)
    }

    /// Names of the built-in profiles.
    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    fn validate(&self, samples_per_instr: usize) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("profile name must not be empty".into()));
        }
        if self.body_len_instr < MIN_BODY_LEN_INSTR {
            return Err(Error::Config(format!(
                "profile {}: body too short for the leak layout",
                self.name
            )));
        }
        if !self.leak_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("leak positions must be strictly increasing".into()));
        }
        if self.leak_positions[15] >= self.body_len_instr {
            return Err(Error::Config(format!(
                "profile {}: leak position {} is outside the {}-instruction body",
                self.name, self.leak_positions[15], self.body_len_instr
            )));
        }
        let actual = self.body_len_instr * samples_per_instr;
        if actual.abs_diff(self.mean_len_samples) > samples_per_instr {
            return Err(Error::Config(format!(
                "profile {}: body of {} instructions x {} samples misses the target \
                 length {} by more than one instruction",
                self.name, self.body_len_instr, samples_per_instr, self.mean_len_samples
            )));
        }
        Ok(())
    }
}

/// Everything the generator needs: the profile, the power model, the
/// countermeasure bound, and session composition.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub profile: CipherProfile,
    /// Random-delay bound m; between consecutive body instructions the
    /// countermeasure inserts Uniform{0..=m} dummy instructions. 0 disables it.
    pub rd_max: u32,
    /// Samples emitted per instruction (E).
    pub samples_per_instr: usize,
    /// Power-model gain on the Hamming weight.
    pub alpha: f64,
    /// Power-model baseline.
    pub beta: f64,
    /// Gaussian measurement-noise level.
    pub sigma: f64,
    /// NOP instructions prepended to standalone cipher traces.
    pub nop_preamble_instr: usize,
    pub seed: u64,
    /// COs per session.
    pub num_cos: usize,
    /// Probability of a noise burst between consecutive session COs.
    pub noise_mix: f64,
    /// Burst length bounds in instructions, inclusive.
    pub noise_len_range: (usize, usize),
}

impl SynthConfig {
    /// Defaults for a profile: E=4, alpha 1, beta 0, sigma 0.5, no random
    /// delay, single CO, no bursts, no preamble.
    pub fn defaults(profile: CipherProfile, seed: u64) -> Self {
        SynthConfig {
            profile,
            rd_max: 0,
            samples_per_instr: 4,
            alpha: 1.0,
            beta: 0.0,
            sigma: 0.5,
            nop_preamble_instr: 0,
            seed,
            num_cos: 1,
            noise_mix: 0.0,
            noise_len_range: (10, 100),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate(self.samples_per_instr)?;
        if self.samples_per_instr == 0 {
            return Err(Error::Config("samples_per_instr must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.num_cos == 0 {
            return Err(Error::Config("num_cos must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_mix) {
            return Err(Error::Config(format!(
                "noise_mix must lie in [0, 1], got {}",
                self.noise_mix
            )));
        }
        let (lo, hi) = self.noise_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "noise_len_range must satisfy 1 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

fn emit_into(
    e: InstrEvent,
    cfg: &SynthConfig,
    gauss: &mut GaussSource<impl RngCore>,
    out: &mut Vec<f64>,
) {
    let base = cfg.beta + cfg.alpha * hw(e.data_byte) as f64;
    for _ in 0..cfg.samples_per_instr {
        // The draw happens even at sigma == 0 so that the same seed lines up
        // sample-for-sample across noise levels.
        out.push(base + cfg.sigma * gauss.next_gauss());
    }
}

/// Samples for a single instruction under the config's power model.
pub fn emit_instr(
    e: InstrEvent,
    cfg: &SynthConfig,
    gauss: &mut GaussSource<impl RngCore>,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.samples_per_instr);
    emit_into(e, cfg, gauss, &mut out);
    out
}

/// Instruction body of one CO execution.
///
/// The filler bytes come from `rng` in order, so passing the same stream
/// reproduces the same body template; the sixteen leak positions are then
/// overwritten with `sbox(pt[b] ^ key[b])`.
pub fn build_co_instrs(
    profile: &CipherProfile,
    pt: &[u8; 16],
    key: &[u8; 16],
    rng: &mut impl Rng,
) -> Vec<InstrEvent> {
    let mut body: Vec<InstrEvent> = (0..profile.body_len_instr)
        .map(|_| InstrEvent { data_byte: rng.gen(), kind: InstrKind::Cipher })
        .collect();
    for (b, &pos) in profile.leak_positions.iter().enumerate() {
        body[pos].data_byte = aes_sbox(pt[b] ^ key[b]);
    }
    body
}

/// Inserts Uniform{0..=m} dummy instructions between consecutive pairs.
///
/// Returns the delayed sequence and a map from input index to output index;
/// the input is always a subsequence of the output and the first instruction
/// never moves.
pub fn apply_random_delay(
    instrs: &[InstrEvent],
    m: u32,
    rng: &mut impl Rng,
) -> (Vec<InstrEvent>, Vec<usize>) {
    let mut out = Vec::with_capacity(instrs.len());
    let mut map = Vec::with_capacity(instrs.len());
    for (i, &e) in instrs.iter().enumerate() {
        if i > 0 && m > 0 {
            let dummies = rng.gen_range(0..=m);
            for _ in 0..dummies {
                out.push(InstrEvent { data_byte: rng.gen(), kind: InstrKind::RandomDelay });
            }
        }
        map.push(out.len());
        out.push(e);
    }
    (out, map)
}

fn block(rng: &mut impl RngCore) -> [u8; 16] {
    let mut b = [0u8; 16];
    rng.fill_bytes(&mut b);
    b
}

/// Events of one CO execution: optional NOP preamble, then the delayed body.
fn co_events(cfg: &SynthConfig, co_index: u64, key: &[u8; 16], preamble: usize) -> (Vec<InstrEvent>, [u8; 16]) {
    let pt = block(&mut substream(cfg.seed, domains::PLAINTEXT, co_index));
    let mut body_rng = substream(cfg.seed, domains::CO_BODY, 0);
    let body = build_co_instrs(&cfg.profile, &pt, key, &mut body_rng);
    let mut rd_rng = substream(cfg.seed, domains::RANDOM_DELAY, co_index);
    let (delayed, _) = apply_random_delay(&body, cfg.rd_max, &mut rd_rng);
    let mut events = Vec::with_capacity(preamble + delayed.len());
    events.resize(preamble, InstrEvent::nop());
    events.extend_from_slice(&delayed);
    (events, pt)
}

fn co_samples(cfg: &SynthConfig, co_index: u64, key: &[u8; 16], preamble: usize) -> (Vec<f64>, [u8; 16]) {
    let (events, pt) = co_events(cfg, co_index, key, preamble);
    let mut gauss = GaussSource::new(substream(cfg.seed, domains::CO_GAUSS, co_index));
    let mut out = Vec::with_capacity(events.len() * cfg.samples_per_instr);
    for e in events {
        emit_into(e, cfg, &mut gauss, &mut out);
    }
    (out, pt)
}

fn burst_samples(cfg: &SynthConfig, burst_index: u64) -> Vec<f64> {
    let mut content = substream(cfg.seed, domains::BURST_CONTENT, burst_index);
    let (lo, hi) = cfg.noise_len_range;
    let len = content.gen_range(lo..=hi);
    let mut gauss = GaussSource::new(substream(cfg.seed, domains::BURST_GAUSS, burst_index));
    let mut out = Vec::with_capacity(len * cfg.samples_per_instr);
    for _ in 0..len {
        let e = InstrEvent { data_byte: content.gen(), kind: InstrKind::Noise };
        emit_into(e, cfg, &mut gauss, &mut out);
    }
    out
}

/// One standalone cipher trace holding a single CO: `nop_preamble_instr`
/// NOPs, then the random-delayed body. The preamble belongs to the CO (it is
/// the quiet lead-in the classifier keys on), so ground truth marks the CO
/// start at sample 0. `index` selects the per-trace plaintext and key
/// substreams, so consecutive indices give independent captures with the same
/// body template.
pub fn gen_cipher_trace(cfg: &SynthConfig, index: u64) -> Result<Trace> {
    cfg.validate()?;
    let key = block(&mut substream(cfg.seed, domains::TRACE_KEY, index));
    let (samples, pt) = co_samples(cfg, index, &key, cfg.nop_preamble_instr);
    let meta = TraceMeta {
        profile_name: cfg.profile.name.clone(),
        rd_max: Some(cfg.rd_max),
        seed: Some(cfg.seed),
        truth: Some(GroundTruth {
            starts: vec![0],
            plaintexts: vec![pt],
            key: Some(key),
        }),
    };
    Ok(Trace::new(samples, Some(meta)))
}

#[derive(Clone, Copy)]
enum Segment {
    Co(u64),
    Burst(u64),
}

/// A capture session: `num_cos` CO executions back to back, with a noise
/// burst inserted between consecutive COs with probability `noise_mix`.
///
/// Each CO is an optional NOP preamble (`nop_preamble_instr`, the same quiet
/// lead-in the training captures carry) followed by its random-delayed body.
/// All COs share one session key; plaintexts vary per CO. Ground truth
/// records the sample where each CO's first event begins.
pub fn gen_session(cfg: &SynthConfig) -> Result<Trace> {
    cfg.validate()?;
    let key = block(&mut substream(cfg.seed, domains::SESSION_KEY, 0));

    let mut mix = substream(cfg.seed, domains::BURST_MIX, 0);
    let mut segments = vec![Segment::Co(0)];
    let mut bursts = 0u64;
    for i in 1..cfg.num_cos as u64 {
        if mix.gen_bool(cfg.noise_mix) {
            segments.push(Segment::Burst(bursts));
            bursts += 1;
        }
        segments.push(Segment::Co(i));
    }

    let pieces = parallel::indexed_map(segments.len(), |k| match segments[k] {
        Segment::Co(i) => {
            let (samples, pt) = co_samples(cfg, i, &key, cfg.nop_preamble_instr);
            (samples, Some(pt))
        }
        Segment::Burst(j) => (burst_samples(cfg, j), None),
    });

    let total: usize = pieces.iter().map(|(s, _)| s.len()).sum();
    let mut samples = Vec::with_capacity(total);
    let mut starts = Vec::with_capacity(cfg.num_cos);
    let mut plaintexts = Vec::with_capacity(cfg.num_cos);
    for (piece, pt) in pieces {
        if let Some(pt) = pt {
            starts.push(samples.len() as u64);
            plaintexts.push(pt);
        }
        samples.extend_from_slice(&piece);
    }

    let meta = TraceMeta {
        profile_name: cfg.profile.name.clone(),
        rd_max: Some(cfg.rd_max),
        seed: Some(cfg.seed),
        truth: Some(GroundTruth { starts, plaintexts, key: Some(key) }),
    };
    Ok(Trace::new(samples, Some(meta)))
}

/// Noise-kind events for a pure-noise capture: uniform data bytes, no COs,
/// no random delay.
pub fn gen_noise_events(cfg: &SynthConfig, len_instr: usize) -> Vec<InstrEvent> {
    let mut rng = substream(cfg.seed, domains::NOISE_EVENTS, 0);
    (0..len_instr)
        .map(|_| InstrEvent { data_byte: rng.gen(), kind: InstrKind::Noise })
        .collect()
}

/// A pure-noise trace of exactly `len_instr * samples_per_instr` samples.
pub fn gen_noise_trace(cfg: &SynthConfig, len_instr: usize) -> Result<Trace> {
    cfg.validate()?;
    if len_instr == 0 {
        return Err(Error::Config("noise trace length must be positive".into()));
    }
    let events = gen_noise_events(cfg, len_instr);
    let mut gauss = GaussSource::new(substream(cfg.seed, domains::NOISE_GAUSS, 0));
    let mut samples = Vec::with_capacity(len_instr * cfg.samples_per_instr);
    for e in events {
        emit_into(e, cfg, &mut gauss, &mut samples);
    }
    let meta = TraceMeta {
        profile_name: cfg.profile.name.clone(),
        rd_max: None,
        seed: Some(cfg.seed),
        truth: None,
    };
    Ok(Trace::new(samples, Some(meta)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gmul(mut a: u8, mut b: u8) -> u8 {
        let mut p = 0u8;
        for _ in 0..8 {
            if b & 1 != 0 {
                p ^= a;
            }
            let hi = a & 0x80 != 0;
            a <<= 1;
            if hi {
                a ^= 0x1b;
            }
            b >>= 1;
        }
        p
    }

    fn ginv(a: u8) -> u8 {
        if a == 0 {
            return 0;
        }
        // a^254 in GF(2^8) by square and multiply.
        let mut result = 1u8;
        let mut base = a;
        let mut e = 254u32;
        while e > 0 {
            if e & 1 == 1 {
                result = gmul(result, base);
            }
            base = gmul(base, base);
            e >>= 1;
        }
        result
    }

    fn affine(x: u8) -> u8 {
        x ^ x.rotate_left(1) ^ x.rotate_left(2) ^ x.rotate_left(3) ^ x.rotate_left(4) ^ 0x63
    }

    #[test]
    fn sbox_matches_field_inverse_plus_affine() {
        for b in 0..=255u8 {
            assert_eq!(aes_sbox(b), affine(ginv(b)), "input {b:#04x}");
        }
    }

    #[test]
    fn sbox_is_a_bijection() {
        let mut seen = [false; 256];
        for b in 0..=255u8 {
            seen[aes_sbox(b) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn hw_matches_bit_loop() {
        for b in 0..=255u8 {
            let naive = (0..8).filter(|&i| b >> i & 1 == 1).count() as u32;
            assert_eq!(hw(b), naive);
        }
        assert_eq!(hw(0x00), 0);
        assert_eq!(hw(0xff), 8);
        assert_eq!(hw(0x0f), 4);
    }

    fn tiny_profile(e: usize) -> CipherProfile {
        CipherProfile::custom("tiny", 50 * e, e).unwrap()
    }

    fn tiny_cfg(seed: u64) -> SynthConfig {
        let mut cfg = SynthConfig::defaults(tiny_profile(2), seed);
        cfg.samples_per_instr = 2;
        cfg
    }

    #[test]
    fn preset_profiles_have_expected_lengths() {
        for (name, full) in [
            ("aes128", 220_000),
            ("aes128-masked", 50_000),
            ("clefia128", 108_000),
            ("camellia128", 6_000),
            ("simon128", 10_000),
        ] {
            let p = CipherProfile::from_preset(name, 1, 4).unwrap();
            assert_eq!(p.mean_len_samples, full);
            assert_eq!(p.body_len_instr, full / 4);
            assert_eq!(p.leak_positions[0], 8);
            assert_eq!(p.leak_positions[15], 23);
        }
        assert!(CipherProfile::from_preset("des", 1, 4).is_err());
    }

    #[test]
    fn too_small_bodies_are_rejected() {
        // camellia at scale 100 with E=4 leaves 15 instructions, too short
        // for leaks at offsets 8..=23.
        let err = CipherProfile::from_preset("camellia128", 100, 4).unwrap_err();
        assert!(err.to_string().contains("leak"), "{err}");
        assert!(CipherProfile::from_preset("camellia128", 10, 4).is_ok());
        assert!(CipherProfile::from_preset("simon128", 100, 1).is_ok());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = tiny_cfg(1);
        assert!(ok.validate().is_ok());
        for f in [
            |c: &mut SynthConfig| c.alpha = 0.0,
            |c: &mut SynthConfig| c.alpha = -1.0,
            |c: &mut SynthConfig| c.sigma = -0.1,
            |c: &mut SynthConfig| c.sigma = f64::NAN,
            |c: &mut SynthConfig| c.num_cos = 0,
            |c: &mut SynthConfig| c.noise_mix = 1.5,
            |c: &mut SynthConfig| c.noise_len_range = (0, 5),
            |c: &mut SynthConfig| c.noise_len_range = (9, 5),
            |c: &mut SynthConfig| c.samples_per_instr = 5,
        ] {
            let mut bad = ok.clone();
            f(&mut bad);
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn emit_encodes_hamming_weight_exactly() {
        let mut cfg = tiny_cfg(3);
        cfg.sigma = 0.0;
        cfg.alpha = 1.5;
        cfg.beta = 0.25;
        cfg.samples_per_instr = 3;
        let mut gauss = GaussSource::new(substream(3, domains::CO_GAUSS, 0));
        let s = emit_instr(InstrEvent { data_byte: 0x0f, kind: InstrKind::Cipher }, &cfg, &mut gauss);
        assert_eq!(s, vec![6.25, 6.25, 6.25]);
        let s = emit_instr(InstrEvent::nop(), &cfg, &mut gauss);
        assert_eq!(s, vec![0.25, 0.25, 0.25]);
    }

    #[test]
    fn co_body_has_fixed_template_and_keyed_leaks() {
        let profile = tiny_profile(1);
        let pt1 = [0x11u8; 16];
        let pt2 = [0x77u8; 16];
        let key = [0x42u8; 16];
        let a = build_co_instrs(&profile, &pt1, &key, &mut substream(5, domains::CO_BODY, 0));
        let b = build_co_instrs(&profile, &pt2, &key, &mut substream(5, domains::CO_BODY, 0));
        assert_eq!(a.len(), profile.body_len_instr);
        assert!(a.iter().all(|e| e.kind == InstrKind::Cipher));

        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if profile.leak_positions.contains(&i) {
                let byte_idx = i - LEAK_FIRST_INSTR;
                assert_eq!(x.data_byte, aes_sbox(pt1[byte_idx] ^ key[byte_idx]));
                assert_eq!(y.data_byte, aes_sbox(pt2[byte_idx] ^ key[byte_idx]));
            } else {
                assert_eq!(x, y, "filler at {i} depends on the plaintext");
            }
        }
    }

    #[test]
    fn random_delay_keeps_subsequence_and_bounds() {
        let profile = tiny_profile(1);
        let body = build_co_instrs(&profile, &[1; 16], &[2; 16], &mut substream(0, domains::CO_BODY, 0));
        let mut rng = substream(0, domains::RANDOM_DELAY, 0);
        let m = 3;
        let (out, map) = apply_random_delay(&body, m, &mut rng);

        assert_eq!(map.len(), body.len());
        assert_eq!(map[0], 0, "first instruction moved");
        for (i, &j) in map.iter().enumerate() {
            assert_eq!(out[j], body[i]);
        }
        assert!(out.len() >= body.len());
        assert!(out.len() <= body.len() + (body.len() - 1) * m as usize);
        for w in map.windows(2) {
            assert!(w[1] - w[0] >= 1 && w[1] - w[0] <= 1 + m as usize);
        }
        let inserted = out
            .iter()
            .enumerate()
            .filter(|(j, _)| !map.contains(j))
            .all(|(_, e)| e.kind == InstrKind::RandomDelay);
        assert!(inserted);
    }

    #[test]
    fn random_delay_zero_is_identity() {
        let body = vec![InstrEvent { data_byte: 7, kind: InstrKind::Cipher }; 10];
        let mut rng = substream(0, domains::RANDOM_DELAY, 0);
        let (out, map) = apply_random_delay(&body, 0, &mut rng);
        assert_eq!(out, body);
        assert_eq!(map, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn random_delay_mean_insertion_matches_expectation() {
        let body = vec![InstrEvent { data_byte: 0, kind: InstrKind::Cipher }; 50];
        let m = 4u32;
        let runs = 1000;
        let mut total = 0usize;
        for i in 0..runs {
            let mut rng = substream(11, domains::RANDOM_DELAY, i);
            let (out, _) = apply_random_delay(&body, m, &mut rng);
            total += out.len();
        }
        let mean = total as f64 / runs as f64;
        let expected = 50.0 + 49.0 * (m as f64 / 2.0);
        let tol = 0.02 * expected;
        assert!((mean - expected).abs() < tol, "mean {mean} vs expected {expected}");
    }

    #[test]
    fn noise_event_bytes_are_uniform() {
        let cfg = tiny_cfg(17);
        let events = gen_noise_events(&cfg, 100_000);
        let mut counts = [0usize; 256];
        for e in &events {
            assert_eq!(e.kind, InstrKind::Noise);
            counts[e.data_byte as usize] += 1;
        }
        let expected = events.len() as f64 / 256.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // Chi-square critical value for 255 degrees of freedom at p = 0.001.
        assert!(stat < 330.5, "chi-square statistic {stat}");
    }

    #[test]
    fn noise_trace_has_exact_length_and_no_delays() {
        let cfg = tiny_cfg(9);
        let t = gen_noise_trace(&cfg, 500).unwrap();
        assert_eq!(t.len(), 500 * cfg.samples_per_instr);
        assert!(t.truth().is_none());
        assert_eq!(t.meta.as_ref().unwrap().rd_max, None);
        assert!(gen_noise_trace(&cfg, 0).is_err());
    }

    #[test]
    fn cipher_trace_layout_and_determinism() {
        let mut cfg = tiny_cfg(21);
        cfg.nop_preamble_instr = 12;
        cfg.sigma = 0.0;
        cfg.rd_max = 0;
        let t = gen_cipher_trace(&cfg, 0).unwrap();
        assert_eq!(t.len(), (12 + 50) * cfg.samples_per_instr);
        let truth = t.truth().unwrap();
        // The preamble is the CO's first event, so the CO starts the trace.
        assert_eq!(truth.starts, vec![0]);
        assert_eq!(truth.plaintexts.len(), 1);
        assert!(truth.key.is_some());
        // Preamble emits the baseline only.
        for &x in &t.samples[..12 * cfg.samples_per_instr] {
            assert_eq!(x, cfg.beta);
        }

        let again = gen_cipher_trace(&cfg, 0).unwrap();
        assert_eq!(t, again);
        let other = gen_cipher_trace(&cfg, 1).unwrap();
        assert_ne!(
            t.truth().unwrap().plaintexts,
            other.truth().unwrap().plaintexts
        );
        assert_ne!(t.truth().unwrap().key, other.truth().unwrap().key);
    }

    #[test]
    fn session_reconstructs_leak_values_without_noise() {
        let mut cfg = tiny_cfg(33);
        cfg.sigma = 0.0;
        cfg.rd_max = 0;
        cfg.noise_mix = 0.0;
        cfg.num_cos = 3;
        cfg.alpha = 1.0;
        cfg.beta = 0.25;
        cfg.nop_preamble_instr = 7;
        let e = cfg.samples_per_instr;
        let pre = 7 * e;
        let co_len = pre + 50 * e;
        let t = gen_session(&cfg).unwrap();
        let truth = t.truth().unwrap().clone();
        let key = truth.key.unwrap();

        assert_eq!(t.len(), 3 * co_len);
        assert_eq!(
            truth.starts,
            vec![0, co_len as u64, 2 * co_len as u64]
        );
        for (co, &start) in truth.starts.iter().enumerate() {
            let pt = truth.plaintexts[co];
            // Each CO opens with its quiet preamble.
            for i in 0..pre {
                assert_eq!(t.samples[start as usize + i], cfg.beta, "co {co}");
            }
            for b in 0..16 {
                let expect = cfg.beta + f64::from(hw(aes_sbox(pt[b] ^ key[b])));
                let at = start as usize + pre + (LEAK_FIRST_INSTR + b) * e;
                for k in 0..e {
                    assert_eq!(t.samples[at + k], expect, "co {co} byte {b}");
                }
            }
        }
        // Identical template: non-leak body samples agree across COs.
        for i in 0..50 * e {
            let instr = i / e;
            if (LEAK_FIRST_INSTR..LEAK_FIRST_INSTR + 16).contains(&instr) {
                continue;
            }
            assert_eq!(t.samples[pre + i], t.samples[co_len + pre + i]);
            assert_eq!(t.samples[pre + i], t.samples[2 * co_len + pre + i]);
        }
    }

    #[test]
    fn session_length_grows_with_delay_and_bursts() {
        let mut cfg = tiny_cfg(41);
        cfg.num_cos = 20;
        cfg.rd_max = 2;
        cfg.noise_mix = 1.0;
        cfg.noise_len_range = (5, 9);
        let t = gen_session(&cfg).unwrap();
        let truth = t.truth().unwrap();
        assert_eq!(truth.starts.len(), 20);
        assert!(truth.starts.windows(2).all(|w| w[0] < w[1]));

        let min_len = 20 * 50 * cfg.samples_per_instr;
        assert!(t.len() >= min_len + 19 * 5 * cfg.samples_per_instr);

        // noise_mix = 1 puts a burst in every gap, so consecutive starts are
        // separated by at least one CO plus the shortest burst.
        for w in truth.starts.windows(2) {
            assert!((w[1] - w[0]) as usize >= (50 + 5) * cfg.samples_per_instr);
        }

        let mut quiet = cfg.clone();
        quiet.noise_mix = 0.0;
        quiet.rd_max = 0;
        let q = gen_session(&quiet).unwrap();
        assert_eq!(q.len(), min_len);
    }

    #[test]
    fn sessions_are_deterministic() {
        let mut cfg = tiny_cfg(55);
        cfg.num_cos = 8;
        cfg.rd_max = 3;
        cfg.noise_mix = 0.4;
        let a = gen_session(&cfg).unwrap();
        let b = gen_session(&cfg).unwrap();
        assert_eq!(a, b);

        cfg.seed = 56;
        let c = gen_session(&cfg).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn nop_events_carry_zero_bytes_everywhere() {
        let mut cfg = tiny_cfg(60);
        cfg.nop_preamble_instr = 5;
        let t = gen_cipher_trace(&cfg, 2).unwrap();
        assert!(t.len() > 0);
        let (events, _) = co_events(&cfg, 2, &[0; 16], cfg.nop_preamble_instr);
        for e in events {
            if e.kind == InstrKind::Nop {
                assert_eq!(e.data_byte, 0);
            }
        }
    }
}
