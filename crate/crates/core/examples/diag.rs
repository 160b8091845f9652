//! One-off probe: where do predicted starts land relative to truth?

use colocate_core::locator::{self, ScoreKind};
use colocate_core::model::Model;
use colocate_core::synth::{self, CipherProfile, SynthConfig};

fn main() {
    let profile = CipherProfile::from_preset("simon128", 10, 4).unwrap();
    let mut cfg = SynthConfig::defaults(profile, 406);
    cfg.rd_max = 2;
    cfg.nop_preamble_instr = 60;
    cfg.num_cos = 8;
    let session = synth::gen_session(&cfg).unwrap();
    let truth = session.meta.as_ref().unwrap().truth.as_ref().unwrap();
    println!("truth starts: {:?}", truth.starts);

    let model = Model::load(std::path::Path::new("/tmp/calib2-model-rd2.scnn")).unwrap();
    let series =
        locator::classify_series(&model, &session.samples, 200, 10, ScoreKind::Prob).unwrap();
    let raw = locator::threshold(&series, 0.5);
    let wave = locator::median_filter(&raw, 1).unwrap();
    let starts = locator::to_sample_starts(&locator::rising_edges(&wave), 10);
    println!("predicted:    {:?}", starts);

    // Scores around each truth start, one line per stride position.
    for (c, &t) in truth.starts.iter().enumerate().take(3) {
        let w0 = (t as usize) / 10;
        println!("-- CO {c} at {t} (wave index {w0})");
        for i in w0.saturating_sub(4)..(w0 + 8).min(series.scores.len()) {
            println!(
                "   idx {i} origin {} score {:+.4} wave {:+}",
                series.origin(i),
                series.scores[i],
                wave.values[i]
            );
        }
    }
}
