use std::path::Path;
use std::process::Command;

use m2former::experiments::{
    evaluate, evaluate_model, learning_rate, loss_csv, synth_utterances, train_model, Checkpoint, EvalReport,
    ExperimentConfig, MAGIC, VERSION,
};
use m2former::tensor::Tensor;

fn tiny(steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        steps,
        train_utts: 6,
        test_utts: 3,
        warmup_steps: 4,
        ..ExperimentConfig::micro()
    }
}

fn u64_at(b: &[u8], at: &mut usize) -> u64 {
    let v = u64::from_le_bytes(b[*at..*at + 8].try_into().unwrap());
    *at += 8;
    v
}

/// Reads a checkpoint by following the documented byte layout.
fn parse_layout(bytes: &[u8]) -> (ExperimentConfig, u64, Vec<(String, Tensor)>) {
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    let mut at = 12;
    let len = u64_at(bytes, &mut at) as usize;
    let cfg = ExperimentConfig::from_toml(std::str::from_utf8(&bytes[at..at + len]).unwrap()).unwrap();
    at += len;
    let step = u64_at(bytes, &mut at);
    at += 32 + 8 + 16;
    let count = u64_at(bytes, &mut at);
    let mut params = Vec::new();
    for _ in 0..count {
        let n = u64_at(bytes, &mut at) as usize;
        let name = String::from_utf8(bytes[at..at + n].to_vec()).unwrap();
        at += n;
        let rank = u64_at(bytes, &mut at);
        let shape: Vec<usize> = (0..rank).map(|_| u64_at(bytes, &mut at) as usize).collect();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| f64::from_bits(u64_at(bytes, &mut at))).collect();
        params.push((name, Tensor::new(shape, data).unwrap()));
    }
    assert_eq!(at, bytes.len(), "trailing bytes");
    (cfg, step, params)
}

#[test]
fn checkpoint_file_follows_the_documented_layout() {
    let cfg = tiny(3);
    let data = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts).unwrap();
    let out = train_model(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let (parsed_cfg, step, params) = parse_layout(&std::fs::read(&path).unwrap());
    assert_eq!(parsed_cfg, cfg);
    assert_eq!(step, 3);
    assert_eq!(params.len(), out.store.len());
    for ((name, t), (_, p)) in params.iter().zip(out.store.iter()) {
        assert_eq!(name, &p.name);
        assert_eq!(t, &p.value);
    }
}

#[test]
fn restored_checkpoint_decodes_identically() {
    let cfg = tiny(4);
    let data = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts).unwrap();
    let test = synth_utterances(&cfg, cfg.test_seed_base(), cfg.test_utts).unwrap();
    let out = train_model(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let (model, store) = loaded.restore().unwrap();
    for u in &test {
        let a = out.model.transcribe(&out.store, &u.feats, None, 8).unwrap();
        let b = model.transcribe(&store, &u.feats, None, 8).unwrap();
        assert_eq!(a, b);
        let t1 = m2former::tensor::Tape::new();
        let t2 = m2former::tensor::Tape::new();
        let e1 = out.model.encode(&t1, &out.store, &u.feats, Some(2)).unwrap();
        let e2 = model.encode(&t2, &store, &u.feats, Some(2)).unwrap();
        for (s1, s2) in e1.streams.iter().zip(&e2.streams) {
            let (v1, v2) = (s1.value().clone(), s2.value().clone());
            assert!(v1.data().iter().zip(v2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
    // Corruption is detected rather than misread.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn same_config_same_bytes() {
    let mut cfg = tiny(6);
    cfg.dropout = 0.1;
    let data = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts).unwrap();
    let test = synth_utterances(&cfg, cfg.test_seed_base(), cfg.test_utts).unwrap();
    let run = || {
        let out = train_model(&cfg, &data).unwrap();
        let report = evaluate_model(&out.model, &out.store, &cfg, &test, false).unwrap();
        (out.checkpoint.to_bytes().unwrap(), loss_csv(&out.log), serde_json::to_string(&report).unwrap())
    };
    assert_eq!(run(), run());
    let other = ExperimentConfig { seed: 2, ..cfg.clone() };
    let out = train_model(&other, &data).unwrap();
    assert_ne!(out.checkpoint.to_bytes().unwrap(), run().0);
}

#[test]
fn loss_log_has_one_row_per_step() {
    let cfg = tiny(5);
    let data = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts).unwrap();
    let out = train_model(&cfg, &data).unwrap();
    let csv = loss_csv(&out.log);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,ctc,att");
    assert_eq!(lines.len(), 6);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[0] as usize, i + 1);
        let lambda = cfg.ctc_weight;
        assert!((cols[1] - (lambda * cols[2] + (1.0 - lambda) * cols[3])).abs() < 1e-9 * cols[1].abs().max(1.0));
    }
}

#[test]
fn warmup_then_inverse_square_root() {
    let cfg = ExperimentConfig {
        learning_rate: 1e-3,
        warmup_steps: 100,
        ..ExperimentConfig::micro()
    };
    assert!((learning_rate(&cfg, 50) - 5e-4).abs() < 1e-15);
    assert!((learning_rate(&cfg, 100) - 1e-3).abs() < 1e-15);
    assert!((learning_rate(&cfg, 400) - 5e-4).abs() < 1e-15);
}

#[test]
fn training_reduces_the_loss() {
    let cfg = ExperimentConfig {
        steps: 500,
        train_utts: 50,
        ..ExperimentConfig::micro()
    };
    let data = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts).unwrap();
    let out = train_model(&cfg, &data).unwrap();
    let mean = |r: std::ops::Range<usize>| out.log[r.clone()].iter().map(|l| l.loss).sum::<f64>() / r.len() as f64;
    let (early, late) = (mean(0..10), mean(490..500));
    assert!(late < 0.7 * early, "early {early:.3}, late {late:.3}");
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_m2former")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn command_line_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (train_dir, test_dir, run_dir) = (dir.path().join("train"), dir.path().join("test"), dir.path().join("run"));
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, "steps = 3\ntrain_utts = 4\ntest_utts = 2\nwarmup_steps = 2\n").unwrap();

    ok(&["gen-data", "--utts", "4", "--snr-db", "10", "--seed", "1000000", "--out", path(&train_dir)]);
    ok(&["gen-data", "--utts", "2", "--snr-db", "10", "--seed", "1500000", "--split", "test", "--out", path(&test_dir)]);
    assert!(train_dir.join("manifest.json").exists());
    assert!(test_dir.join("utt00001_ch3.f64").exists());

    ok(&["train", "--config", path(&cfg_path), "--data", path(&train_dir), "--out", path(&run_dir)]);
    let csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let ckpt = run_dir.join("model.ckpt");

    // The files written by gen-data are the in-memory splits of the same config.
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let data = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts).unwrap();
    let in_memory = train_model(&cfg, &data).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), in_memory.checkpoint.to_bytes().unwrap());

    let known_dir = dir.path().join("known");
    ok(&["eval", "--ckpt", path(&ckpt), "--data", path(&test_dir), "--out", path(&known_dir)]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(known_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, evaluate(&ckpt, &test_dir, true).unwrap());
    assert!(report.known_count && report.speaker_count_accuracy.is_none());
    assert_eq!(report.per_utterance.len(), 2);

    let unknown_dir = dir.path().join("unknown");
    let stdout = ok(&["eval", "--ckpt", path(&ckpt), "--data", path(&test_dir), "--unknown-count", "--out", path(&unknown_dir)]);
    assert!(stdout.contains("speaker-count accuracy"));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(unknown_dir.join("report.json")).unwrap()).unwrap();
    assert!(report.speaker_count_accuracy.is_some());

    let ablate_dir = dir.path().join("ablate");
    ok(&["ablate", "--config", path(&cfg_path), "--axes", "ifsd,mct", "--out", path(&ablate_dir)]);
    let csv = std::fs::read_to_string(ablate_dir.join("ablation.csv")).unwrap();
    let cells: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(cells, vec!["complete", "-ifsd", "-mct"]);
}

#[test]
fn command_line_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "stepz = 3\n").unwrap();
    let out = cli(&["train", "--config", path(&bad), "--data", path(dir.path()), "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    let out = cli(&["eval", "--ckpt", path(&dir.path().join("missing.ckpt")), "--data", path(dir.path())]);
    assert!(!out.status.success());
    let out = cli(&["ablate", "--axes", "nonsense"]);
    assert!(!out.status.success());
}
