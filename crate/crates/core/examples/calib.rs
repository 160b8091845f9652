//! Scratch calibration harness for the locator and CPA constants.
//! Not part of the deliverable; run with
//! `cargo run --release --example calib -- hits cpa c3`.

use std::path::PathBuf;
use std::time::Instant;

use colocate_core::cpa;
use colocate_core::dataset::{Dataset, DatasetBuilder, DatasetConfig};
use colocate_core::locator::{self, LocateConfig, ScoreKind};
use colocate_core::model::{Model, ModelConfig, TrainConfig, TrainData};
use colocate_core::synth::{self, CipherProfile, SynthConfig};

const E: usize = 4;
const WINDOW: usize = 200;
const STRIDE: usize = 10;
const PREAMBLE: usize = 97;
const SEED_DATA: u64 = 401;
const SEED_MODEL: u64 = 402;
const SEED_TRAIN: u64 = 403;
const SEED_SESSION: u64 = 404;

fn profile() -> CipherProfile {
    CipherProfile::from_preset("simon128", 10, E).unwrap()
}

fn base_cfg(rd: u32, seed: u64) -> SynthConfig {
    let mut cfg = SynthConfig::defaults(profile(), seed);
    cfg.rd_max = rd;
    cfg.nop_preamble_instr = PREAMBLE;
    cfg
}

fn build_dataset(rd: u32) -> Dataset {
    let ds_cfg = DatasetConfig {
        window_len: WINDOW,
        start_count: 2048,
        rest_count: 2048,
        noise_count: 1024,
        noise_traces: 1,
        seed: SEED_DATA + rd as u64,
    };
    let mut builder = DatasetBuilder::new(ds_cfg).unwrap();
    let cfg = base_cfg(rd, SEED_DATA + 100 + rd as u64);
    for i in 0..2048 {
        let t = synth::gen_cipher_trace(&cfg, i).unwrap();
        builder.add_cipher_trace(&t).unwrap();
    }
    let noise = synth::gen_noise_trace(&cfg, 60_000).unwrap();
    builder.add_noise_trace(&noise).unwrap();
    builder.finish().unwrap()
}

fn model_for(rd: u32) -> Model {
    let path = PathBuf::from(format!("/tmp/calib2-model-rd{rd}.scnn"));
    if path.exists() {
        eprintln!("[model rd{rd}] loading cached {}", path.display());
        return Model::load(&path).unwrap();
    }
    let t0 = Instant::now();
    let ds = build_dataset(rd);
    eprintln!(
        "[model rd{rd}] dataset built in {:.1}s (train {} / val {} / test {})",
        t0.elapsed().as_secs_f64(),
        ds.train.count(),
        ds.val.count(),
        ds.test.count()
    );
    let train_w = ds.train.windows_f64();
    let val_w = ds.val.windows_f64();
    let data = TrainData {
        window_len: WINDOW,
        train_windows: &train_w,
        train_labels: ds.train.labels(),
        val_windows: &val_w,
        val_labels: ds.val.labels(),
        norm: ds.norm,
    };
    let mut model = Model::new(ModelConfig::standard(WINDOW), SEED_MODEL + rd as u64).unwrap();
    let t1 = Instant::now();
    let report = model.train(&data, &TrainConfig::standard(SEED_TRAIN + rd as u64)).unwrap();
    eprintln!(
        "[model rd{rd}] trained in {:.1}s, best epoch {} val_error {:.4}",
        t1.elapsed().as_secs_f64(),
        report.best_epoch,
        report.best_val_error
    );
    let test_w = ds.test.windows_f64();
    let cm = model.confusion(&test_w, ds.test.labels()).unwrap();
    eprintln!(
        "[model rd{rd}] test accuracy {:.4}, confusion {:?}, diag {:.2}% / {:.2}%",
        cm.accuracy(),
        cm.counts,
        cm.percent_of_actual(0, 0),
        cm.percent_of_actual(1, 1)
    );
    model.save(&path).unwrap();
    model
}

fn segment_starts(
    series: &colocate_core::trace::ScoreSeries,
    th: f64,
    median_len: usize,
) -> Vec<u64> {
    let raw = locator::threshold(series, th);
    let wave = locator::median_filter(&raw, median_len).unwrap();
    locator::to_sample_starts(&locator::rising_edges(&wave), series.stride)
}

fn hits_sweep(rd: u32, model: &Model) {
    for noise_mix in [0.0, 0.3] {
        let mut cfg = base_cfg(rd, SEED_SESSION + rd as u64 + (noise_mix * 10.0) as u64);
        cfg.num_cos = 64;
        cfg.noise_mix = noise_mix;
        let session = synth::gen_session(&cfg).unwrap();
        let truth = session.meta.as_ref().unwrap().truth.as_ref().unwrap();
        eprintln!(
            "[sweep rd{rd} mix{noise_mix}] session {} samples, {} COs",
            session.samples.len(),
            truth.starts.len()
        );
        for (kind, th) in [(ScoreKind::Prob, 0.5), (ScoreKind::Logit, 0.0)] {
            let t0 = Instant::now();
            let series =
                locator::classify_series(model, &session.samples, WINDOW, STRIDE, kind).unwrap();
            let sweep_s = t0.elapsed().as_secs_f64();
            for median_len in [1usize, 3, 5, 7] {
                let starts = segment_starts(&series, th, median_len);
                let h = locator::hits(&starts, &truth.starts, 2 * STRIDE as u64);
                eprintln!(
                    "  {kind:?} th={th} k={median_len}: hits {:.1}% ({} matched, {} missed, {} false) [sweep {:.1}s]",
                    h.percent, h.matched, h.missed, h.false_starts, sweep_s
                );
            }
        }
    }
}

fn noise_check(model: &Model) {
    let cfg = base_cfg(2, SEED_SESSION + 50);
    let noise = synth::gen_noise_trace(&cfg, 15_000).unwrap();
    for (kind, th) in [(ScoreKind::Prob, 0.5), (ScoreKind::Logit, 0.0)] {
        let series =
            locator::classify_series(model, &noise.samples, WINDOW, STRIDE, kind).unwrap();
        for median_len in [1usize, 3, 5] {
            let starts = segment_starts(&series, th, median_len);
            eprintln!(
                "[noise] {kind:?} k={median_len}: {} starts found in pure noise ({} samples)",
                starts.len(),
                noise.samples.len()
            );
        }
    }
}

fn cpa_trial(model: &Model, median_len: usize) {
    let mut cfg = base_cfg(2, SEED_SESSION + 7);
    cfg.num_cos = 2000;
    let t0 = Instant::now();
    let session = synth::gen_session(&cfg).unwrap();
    let truth = session.meta.as_ref().unwrap().truth.as_ref().unwrap();
    eprintln!(
        "[cpa] session {} samples, {} COs, built in {:.1}s",
        session.samples.len(),
        truth.starts.len(),
        t0.elapsed().as_secs_f64()
    );

    let lc = LocateConfig {
        window_len: WINDOW,
        stride: STRIDE,
        threshold: 0.5,
        median_len,
        score: ScoreKind::Prob,
    };
    let t1 = Instant::now();
    let res = locator::locate(model, &session.samples, &lc).unwrap();
    let h = locator::hits(&res.starts, &truth.starts, 2 * STRIDE as u64);
    eprintln!(
        "[cpa] locate k={median_len}: hits {:.2}% ({} matched, {} missed, {} false) in {:.1}s",
        h.percent, h.matched, h.missed, h.false_starts,
        t1.elapsed().as_secs_f64()
    );

    // Rows start at the located quiet lead-in; cover preamble plus body.
    let seg_len = PREAMBLE * E + profile().mean_len_samples;
    let (block, dropped) = locator::align(&session.samples, &res.starts, seg_len).unwrap();
    let pts =
        locator::plaintexts_for_starts(&block.starts, truth, 2 * STRIDE as u64 + 4).unwrap();
    let key = truth.key.unwrap();
    eprintln!("[cpa] aligned {} rows (dropped {})", block.rows(), dropped);

    let schedule: Vec<usize> = (1..=8).map(|k| k * 250).filter(|&c| c <= block.rows()).collect();
    let t2 = Instant::now();
    let report = cpa::min_cos_to_rank1(&block, &pts, E, &key, &schedule).unwrap();
    for p in &report.points {
        eprintln!("[cpa] aligned @{} COs: {}/16 bytes rank 1", p.co_count, p.rank1_bytes);
    }
    eprintln!(
        "[cpa] min COs to full rank 1: {:?} (attack sweep {:.1}s)",
        report.min_cos,
        t2.elapsed().as_secs_f64()
    );

    // Contrast: fixed-pitch cutting at the session's average CO spacing.
    let pitch = session.samples.len() as f64 / truth.starts.len() as f64;
    let fixed: Vec<u64> =
        (0..truth.starts.len() as u64).map(|k| (k as f64 * pitch).round() as u64).collect();
    let (fblock, fdropped) = locator::align(&session.samples, &fixed, seg_len).unwrap();
    let n = fblock.rows().min(truth.plaintexts.len());
    let fpts: Vec<[u8; 16]> = truth.plaintexts[..n].to_vec();
    let fb = cpa::attack(&fblock, &fpts, E, Some(&key)).unwrap();
    eprintln!(
        "[cpa] fixed-pitch contrast ({} rows, dropped {}): {}/16 bytes rank 1",
        fblock.rows(),
        fdropped,
        fb.rank1_count().unwrap()
    );
}

/// Dry run of the scaled profiling geometry: window 2200, preamble 600
/// instructions, 8192/8192/4096 windows, two epochs.
fn c3_dry_run() {
    let prof = CipherProfile::from_preset("aes128", 10, E).unwrap();
    let mut cfg = SynthConfig::defaults(prof, 901);
    cfg.rd_max = 4;
    cfg.nop_preamble_instr = 1075;

    let ds_cfg = DatasetConfig {
        window_len: 2200,
        start_count: 8192,
        rest_count: 8192,
        noise_count: 4096,
        noise_traces: 1,
        seed: 902,
    };
    let t0 = Instant::now();
    let mut builder = DatasetBuilder::new(ds_cfg).unwrap();
    for i in 0..8192 {
        let t = synth::gen_cipher_trace(&cfg, i).unwrap();
        builder.add_cipher_trace(&t).unwrap();
    }
    let noise = synth::gen_noise_trace(&cfg, 50_000).unwrap();
    builder.add_noise_trace(&noise).unwrap();
    let ds = builder.finish().unwrap();
    eprintln!(
        "[c3] dataset built in {:.1}s (train {} / val {} / test {})",
        t0.elapsed().as_secs_f64(),
        ds.train.count(),
        ds.val.count(),
        ds.test.count()
    );

    let train_w = ds.train.windows_f64();
    let val_w = ds.val.windows_f64();
    let data = TrainData {
        window_len: 2200,
        train_windows: &train_w,
        train_labels: ds.train.labels(),
        val_windows: &val_w,
        val_labels: ds.val.labels(),
        norm: ds.norm,
    };
    let mut model = Model::new(ModelConfig::standard(2200), 903).unwrap();
    let t1 = Instant::now();
    let report = model.train(&data, &TrainConfig::standard(904)).unwrap();
    let train_s = t1.elapsed().as_secs_f64();
    eprintln!(
        "[c3] trained in {train_s:.1}s, best epoch {} val_error {:.4}",
        report.best_epoch, report.best_val_error
    );
    let test_w = ds.test.windows_f64();
    let cm = model.confusion(&test_w, ds.test.labels()).unwrap();
    eprintln!(
        "[c3] test accuracy {:.4}, confusion {:?}, diag {:.2}% / {:.2}%",
        cm.accuracy(),
        cm.counts,
        cm.percent_of_actual(0, 0),
        cm.percent_of_actual(1, 1)
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let want = |p: &str| args.iter().any(|a| a == p) || args.is_empty();

    if want("hits") {
        for rd in [2u32, 4] {
            let model = model_for(rd);
            hits_sweep(rd, &model);
            if rd == 2 {
                noise_check(&model);
            }
        }
    }
    if want("cpa") {
        let model = model_for(2);
        cpa_trial(&model, 3);
    }
    if want("c3") {
        c3_dry_run();
    }
}
