#![allow(dead_code)]

use std::path::{Path, PathBuf};

use degs_core::field::{EncoderConfig, FieldConfig};
use degs_core::synth::{synth_sequence, JawSchedule, SynthConfig, SyntheticDataset};
use degs_core::train::{run_stage, Stage, TrainConfig, TrainState};

pub fn small_synth(frames: usize, seed: u64) -> SyntheticDataset {
    let config = SynthConfig {
        width: 32,
        height: 32,
        frames,
        face_splats: 200,
        mouth_splats: 60,
        jaw: JawSchedule::Cycle,
        ..SynthConfig::default()
    };
    synth_sequence(&config, seed).unwrap()
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        face_splats: 40,
        mouth_splats: 20,
        field: FieldConfig {
            encoder: EncoderConfig { table_size: 1 << 8, max_resolution: 32, ..EncoderConfig::default() },
            hidden: vec![16, 16],
        },
        densify_static: false,
        metrics_interval: 2,
        ..TrainConfig::default()
    }
}

/// A state with non-trivial optimizer moments in both branches.
pub fn trained_state() -> TrainState {
    let data = small_synth(2, 5);
    let config = small_config();
    let mut state = TrainState::init(&config, &data.sequence, data.bounds, 5).unwrap();
    run_stage(&mut state, &config, Stage::Static, &data.sequence, 3, None, &mut |_| {}).unwrap();
    run_stage(&mut state, &config, Stage::Motion, &data.sequence, 2, None, &mut |_| {}).unwrap();
    state
}

/// Runs the CLI in-process and returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["degs".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = degs::run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn join(p: &Path, s: &str) -> PathBuf {
    p.join(s)
}
