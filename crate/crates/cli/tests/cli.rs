mod common;

use std::fs;

use bqn_core::network::presets::Preset;
use bqn_core::network::Shape3;
use bqn_core::verifier::parse_lp;
use common::*;

const SMALL_RUN: &str = r#"
seed = 5
[env]
name = "catch"
height = 6
width = 6
[training]
max_steps = 400
prefill = 64
batch_size = 4
buffer_capacity = 256
sync_every = 50
[epsilon]
decay_steps = 200
[output]
wall_clock = false
"#;

#[test]
fn train_missing_config_exits_1() {
    let o = bqn(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot read config"));
}

#[test]
fn train_bad_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 1\n[training]\nbatch_size = 4\nlearning_rate = 0.1\n").unwrap();
    let o = bqn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run.toml:4:"), "{}", stderr(&o));
}

#[test]
fn seeded_training_is_reproducible_and_seed_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_bqn"));
        cmd.args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        match seed {
            Some(s) => cmd.env("BQN_SEED", s),
            None => cmd.env_remove("BQN_SEED"),
        };
        let o = cmd.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("model.bqn")).unwrap(), out)
    };
    let (m1, w1, out1) = run("a", None);
    let (m2, w2, _) = run("b", None);
    assert_eq!(m1, m2);
    assert_eq!(w1, w2);
    let (m3, _, out3) = run("c", Some("6"));
    assert_ne!(m1, m3);
    assert!(fs::read_to_string(out1.join("config.toml")).unwrap().contains("seed = 5"));
    assert!(fs::read_to_string(out3.join("config.toml")).unwrap().contains("seed = 6"));
}

#[test]
fn bad_seed_override_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_bqn"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("BQN_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

fn random_catch_model(dir: &std::path::Path) -> std::path::PathBuf {
    use rand::SeedableRng;
    let input = Shape3::new(10, 10, 4);
    let specs = Preset::BqnSmall.layers(input, 3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let net = bqn_core::BinarizedNetwork::random(input, &specs, Default::default(), &mut rng).unwrap();
    let path = dir.join("random.bqn");
    write_model(&net, &path);
    path
}

#[test]
fn evaluate_single_greedy_episode_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_catch_model(dir.path());
    let csv = dir.path().join("returns.csv");
    let o = bqn(&["evaluate", "--model", model.to_str().unwrap(), "--env", "catch", "--episodes", "1", "--epsilon", "0", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("± 0.0000"), "{}", stdout(&o));
    assert_eq!(csv_column(&fs::read_to_string(csv).unwrap(), "return").len(), 1);
}

#[test]
fn evaluate_uniform_policy_matches_random_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_catch_model(dir.path());
    let csv = dir.path().join("returns.csv");
    let o = bqn(&["evaluate", "--model", model.to_str().unwrap(), "--env", "catch", "--episodes", "4000", "--epsilon", "1", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let returns = csv_column(&fs::read_to_string(csv).unwrap(), "return");
    let rate = returns.iter().filter(|r| r.parse::<f64>().unwrap() > 0.0).count() as f64 / returns.len() as f64;
    // 3/W with W = 10; five standard errors of a 4000-episode binomial.
    assert!((rate - 0.3).abs() < 5.0 * (0.21f64 / 4000.0).sqrt(), "catch rate {rate}");
}

#[test]
fn evaluate_records_states() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_catch_model(dir.path());
    let rec = dir.path().join("frames.bqnx");
    let o = bqn(&["evaluate", "--model", model.to_str().unwrap(), "--env", "catch", "--episodes", "3", "--record", rec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let states = bqn_core::tensorfile::read_tensors(&rec).unwrap();
    assert_eq!(states.len(), 27);
    assert!(states.iter().all(|(s, _)| *s == Shape3::new(10, 10, 4)));
}

#[test]
fn corrupt_models_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_catch_model(dir.path());
    let mut bytes = fs::read(&model).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    let bad = dir.path().join("bad.bqn");
    fs::write(&bad, bytes).unwrap();
    for args in [
        vec!["evaluate", "--model", bad.to_str().unwrap(), "--env", "catch"],
        vec!["inspect", "--model", bad.to_str().unwrap()],
    ] {
        let o = bqn(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
    }
}

fn verify_fixture(dir: &std::path::Path, batch: &str) -> (std::process::Output, String) {
    write_model(&difference_net(), &dir.join("diff.bqn"));
    let states = vec![vec![0.75, 0.25], vec![0.9, 0.1], vec![0.2, 0.6], vec![0.55, 0.5]];
    write_states(Shape3::new(1, 1, 2), &states, &dir.join("states.bqnx"));
    fs::write(dir.join("batch.toml"), batch).unwrap();
    let out = dir.join("out");
    let o = bqn(&["verify", "--batch", dir.join("batch.toml").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("verdicts.csv")).unwrap_or_default();
    (o, csv)
}

#[test]
fn zero_radius_batch_is_all_verified() {
    let dir = tempfile::tempdir().unwrap();
    let batch = "model = \"diff.bqn\"\nstates = \"states.bqnx\"\nsample = 4\nepsilon = 0.0\ntimeout_s = 10\n";
    let (o, csv) = verify_fixture(dir.path(), batch);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(csv.starts_with("property_id,verdict,epsilon,norm,nodes,lp_calls,wall_ms,counterexample_path\n"));
    assert_eq!(csv_column(&csv, "verdict"), vec!["verified"; 4]);
    let table = stdout(&o);
    assert!(table.contains("Verified") && table.contains("Unverified (counterexample)") && table.contains("Unverified (timeout)"));
}

#[test]
fn one_boundary_property_yields_one_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    // State 0 has margin 0.5: ℓ∞ radius 0.3 crosses the boundary (0.5 − 2·0.3 < 0),
    // the others hold at their radii.
    let batch = r#"
model = "diff.bqn"
states = "states.bqnx"
norm = "linf"
[[property]]
id = "falsifiable"
state = 0
epsilon = 0.3
[[property]]
id = "wide"
state = 1
epsilon = 0.3
[[property]]
id = "other_action"
state = 2
epsilon = 0.1
"#;
    let (o, csv) = verify_fixture(dir.path(), batch);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(csv_column(&csv, "verdict"), vec!["counterexample", "verified", "verified"]);
    let path = &csv_column(&csv, "counterexample_path")[0];
    let cex = bqn_core::tensorfile::read_tensors(std::path::Path::new(path)).unwrap();
    let x = &cex[0].1;
    assert!(x[0] - x[1] <= 1e-6, "{x:?}");
}

#[test]
fn premise_mismatch_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let batch = r#"
model = "diff.bqn"
states = "states.bqnx"
[[property]]
state = 0
target = 1
[[property]]
state = 1
"#;
    let (o, csv) = verify_fixture(dir.path(), batch);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv_column(&csv, "verdict"), vec!["skipped", "verified"]);
    assert!(stderr(&o).contains("p000: skipped"));
}

#[test]
fn parallel_workers_give_the_same_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let batch = "model = \"diff.bqn\"\nstates = \"states.bqnx\"\nsample = 4\nepsilon = 0.4\n";
    let (_, serial) = verify_fixture(dir.path(), batch);
    let out = dir.path().join("par");
    let o = bqn(&["verify", "--batch", dir.path().join("batch.toml").to_str().unwrap(), "--workers", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let parallel = fs::read_to_string(out.join("verdicts.csv")).unwrap();
    assert_eq!(csv_column(&serial, "verdict"), csv_column(&parallel, "verdict"));
    assert_eq!(csv_column(&serial, "nodes"), csv_column(&parallel, "nodes"));
}

#[test]
fn bad_batches_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = verify_fixture(dir.path(), "model = \"diff.bqn\"\ntimeout_s = -1\n");
    assert_eq!(o.status.code(), Some(1));
    let (o, _) = verify_fixture(dir.path(), "model = \"diff.bqn\"\nstates = \"states.bqnx\"\nsample = 9\n");
    assert_eq!(o.status.code(), Some(1));
    let (o, _) = verify_fixture(dir.path(), "model = \"diff.bqn\"\n\nbogus = 1\n");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch.toml:3:"), "{}", stderr(&o));
}

fn export_toy(dir: &std::path::Path, out: &std::path::Path) -> std::process::Output {
    write_model(&toy_net(), &dir.join("toy.bqn"));
    write_states(Shape3::flat(3), &[vec![0.25, 0.5, 1.0]], &dir.join("toy.bqnx"));
    let spec = format!("states={},index=0,epsilon=0.25,norm=l1", dir.join("toy.bqnx").display());
    bqn(&["export-lp", "--model", dir.join("toy.bqn").to_str().unwrap(), "--property", &spec, "--out", out.to_str().unwrap()])
}

#[test]
fn export_lp_round_trips_through_the_audit_parser() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.lp");
    let o = export_toy(dir.path(), &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let parsed = parse_lp(&text).unwrap();
    let reported: Vec<usize> = stdout(&o).split_whitespace().filter_map(|w| w.trim_start_matches('(').parse().ok()).collect();
    assert_eq!(reported[0], parsed.bounds.len());
    assert_eq!(reported[1], parsed.binaries.len());
    assert_eq!(reported[2], parsed.constraints.len());
}

#[test]
fn export_lp_matches_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.lp");
    assert_eq!(export_toy(dir.path(), &out).status.code(), Some(0));
    let golden = include_bytes!("golden/toy.lp");
    assert_eq!(fs::read(&out).unwrap(), golden.to_vec());
}

#[test]
fn export_lp_to_unwritable_path_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = export_toy(dir.path(), std::path::Path::new("/nonexistent/dir/toy.lp"));
    assert_eq!(o.status.code(), Some(1));
}

fn inspect_ratio(preset: &str) -> f64 {
    let o = bqn(&["inspect", "--preset", preset]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("ratio")).unwrap();
    line.split_whitespace().last().unwrap().parse().unwrap()
}

#[test]
fn inspect_reports_memory_ratios() {
    let bqn_ratio = inspect_ratio("bqn");
    assert!(bqn_ratio >= 30.0, "{bqn_ratio}");
    assert!(inspect_ratio("bqn-l") < bqn_ratio);
    let dir = tempfile::tempdir().unwrap();
    let model = random_catch_model(dir.path());
    let o = bqn(&["inspect", "--model", model.to_str().unwrap()]);
    assert!(stdout(&o).contains("input 10x10x4"), "{}", stdout(&o));
}

#[test]
fn commands_do_not_modify_models() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_catch_model(dir.path());
    let before = fs::read(&model).unwrap();
    bqn(&["evaluate", "--model", model.to_str().unwrap(), "--env", "catch", "--episodes", "2"]);
    bqn(&["inspect", "--model", model.to_str().unwrap()]);
    assert_eq!(fs::read(&model).unwrap(), before);
}

#[test]
fn model_serialization_matches_the_golden_file() {
    let golden = include_bytes!("golden/toy.bqn");
    assert_eq!(bqn_core::network::serialize(&toy_net()), golden.to_vec());
    let back = bqn_core::network::deserialize(golden).unwrap();
    assert_eq!(back, toy_net());
}

#[test]
fn diverging_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{SMALL_RUN}[optimizer]\nlearning_rate = 1e300\n")).unwrap();
    let out = dir.path().join("o");
    let o = bqn(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(out.join("diverged.bqn").exists());
}
