//! Runs the single-epoch versus multi-epoch study and prints the JSON report.
//!
//! Usage: desk_study [patients] [minutes] [passes] [seed]
//! Environment overrides: S4_LR (both arms), S4_MICRO (single arm), S4_MULTI_MICRO, S4_PRED_LAYERS, S4_ONLY (train one arm with that many input epochs).

use s4ecg::study::{build_dataset, run_arm, run_study, StudyConfig};

fn main() {
    let arg = |i: usize| std::env::args().nth(i).and_then(|s| s.parse::<f64>().ok());
    let env = |k: &str| std::env::var(k).ok().and_then(|s| s.parse::<f64>().ok());
    let seed = arg(4).map_or(0, |v| v as u64);
    let mut cfg = StudyConfig::desk(seed);
    if let Some(p) = arg(1) {
        cfg.synth.n_patients = p as usize;
    }
    if let Some(m) = arg(2) {
        cfg.synth.record_minutes = m;
    }
    for t in [&mut cfg.single_train, &mut cfg.multi_train] {
        if let Some(e) = arg(3) {
            t.max_epochs = e as usize;
        }
        if let Some(v) = env("S4_LR") {
            t.lr = v;
        }
    }
    if let Some(v) = env("S4_PRED_LAYERS") {
        cfg.model.predictor_layers = v as usize;
    }
    if let Some(v) = env("S4_MICRO") {
        cfg.single_train.micro_batch = v as usize;
    }
    if let Some(v) = env("S4_MULTI_MICRO") {
        cfg.multi_train.micro_batch = v as usize;
    }
    let dir = tempfile::tempdir().expect("temporary directory");
    if let Some(n) = env("S4_ONLY") {
        let ds = build_dataset(&cfg, dir.path()).expect("corpus");
        let t = if n as usize == 1 { cfg.single_train.clone() } else { cfg.multi_train.clone() };
        let (report, _, _) = run_arm(&cfg, &ds, n as usize, &t, &mut |m| eprintln!("{m}")).expect("arm");
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
        return;
    }
    let report = run_study(&cfg, dir.path(), &mut |m| eprintln!("{m}")).expect("study");
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
