//! Exercises the installed binary end to end: artifact round trips, report
//! schema and determinism, config-file precedence, and the exit-code
//! contract (2 input, 3 validation, 4 runtime).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lordba::adapter::{LoraFactors, LordbaAdapter, ScaleEnvelope, SignMatrix};
use lordba::format::{load_adapter, save_factors};
use lordba::kernel::bandwidth_ratio;
use lordba::tensor::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lordba"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary must spawn")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout must be JSON")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn without_wall_time(mut v: serde_json::Value) -> serde_json::Value {
    v.as_object_mut().unwrap().remove("wall_time_s").expect("wall_time_s present");
    v
}

fn hadamard_entry(i: usize, j: usize) -> bool {
    (i & j).count_ones() % 2 == 0
}

/// Planted adapter on orthogonal sign carriers; its delta is exactly
/// representable, so the compressor must drive the error to numerical zero.
fn planted_adapter(n: usize, m: usize, r: usize, seed: u64) -> LordbaAdapter {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let b1 = SignMatrix::from_fn(n, r, |i, k| hadamard_entry(i, k + 1));
    let b2 = SignMatrix::from_fn(r, m, |k, j| hadamard_entry(j, k + 1));
    let env = ScaleEnvelope {
        alpha: (0..n).map(|_| rng.random_range(0.7..1.3)).collect(),
        beta: (0..r).map(|k| 1e-3 * 0.8f64.powi(k as i32)).collect(),
        gamma: (0..m).map(|_| rng.random_range(0.7..1.3)).collect(),
    };
    LordbaAdapter::new(b1, b2, vec![env], r).unwrap()
}

/// LRF1 file whose factors multiply out to a representable delta exactly,
/// even through the container's binary32 storage: A = diag(α)·B₁·diag(β) and
/// B = diag(γ)·B₂ᵀ with dyadic scales, so every factor entry is f32-exact.
fn planted_lrf1(dir: &Path, n: usize, m: usize, r: usize, seed: u64) -> (PathBuf, DenseMatrix) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dyadic = [0.75f64, 1.0, 1.25];
    let b1 = SignMatrix::from_fn(n, r, |i, k| hadamard_entry(i, k + 1)).to_dense();
    let b2 = SignMatrix::from_fn(r, m, |k, j| hadamard_entry(j, k + 1)).to_dense();
    let alpha: Vec<f64> = (0..n).map(|_| dyadic[rng.random_range(0..3)]).collect();
    let beta: Vec<f64> = (0..r).map(|k| 2.0f64.powi(-10 - k as i32)).collect();
    let gamma: Vec<f64> = (0..m).map(|_| dyadic[rng.random_range(0..3)]).collect();
    let a = b1.scale_rows(&alpha).scale_cols(&beta);
    let b = b2.scale_cols(&gamma).transpose();
    let factors = LoraFactors::new(a, b).unwrap();
    let delta = factors.delta();
    let path = dir.join("factors.lrf1");
    save_factors(&path, &factors).unwrap();
    (path, delta)
}

#[test]
fn compress_recovers_a_representable_delta() {
    let dir = TempDir::new().unwrap();
    let (input, delta) = planted_lrf1(dir.path(), 32, 32, 4, 9);
    let out = dir.path().join("adapter.lba1");
    let report_path = dir.path().join("report.json");
    let output = run(bin()
        .arg("compress")
        .arg(&input)
        .args(["-R", "4", "-o"])
        .arg(&out)
        .arg("--report")
        .arg(&report_path));
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));

    let report = read_json(&report_path);
    let rel = report["result"]["relative_error"].as_f64().unwrap();
    assert!(rel <= 1e-8, "relative error {rel:e}");
    assert_eq!(report["result"]["input_rank"], 4);
    assert_eq!(report["format_version"], 1);

    // The written adapter reproduces the input delta up to the container's
    // half-precision scale storage: three roundings at 2^-12 relative each.
    let adapter = load_adapter(&out).unwrap();
    let recon = adapter.reconstruct();
    let disk_rel = recon.sub(&delta).frob_norm() / delta.frob_norm();
    assert!(disk_rel <= 3e-3, "on-disk relative error {disk_rel:e}");
    assert_eq!(adapter.r0_ref, 4);
}

#[test]
fn reports_are_deterministic_and_fingerprint_inputs() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 10);
    let out = dir.path().join("a.lba1");
    let mut reports = Vec::new();
    for name in ["r1.json", "r2.json"] {
        let rp = dir.path().join(name);
        let output = run(bin()
            .arg("compress")
            .arg(&input)
            .args(["-R", "2", "-o"])
            .arg(&out)
            .arg("--report")
            .arg(&rp));
        assert!(output.status.success());
        reports.push(read_json(&rp));
    }
    let a = without_wall_time(reports.remove(0));
    let b = without_wall_time(reports.remove(0));
    assert_eq!(a, b, "same config and seed must give identical reports");

    let expected_crc = {
        let bytes = std::fs::read(&input).unwrap();
        format!("{:#010x}", lordba::format::crc32(&bytes))
    };
    assert_eq!(a["inputs"][0]["crc32"].as_str().unwrap(), expected_crc);
    for key in ["rank", "envelopes", "sweeps", "tau", "mu", "seed"] {
        assert!(a["config"].get(key).is_some(), "config must record {key}");
    }
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 11);
    let mut files = Vec::new();
    for name in ["a.lba1", "b.lba1"] {
        let out = dir.path().join(name);
        assert!(run(bin().arg("compress").arg(&input).args(["-R", "2", "-o"]).arg(&out))
            .status
            .success());
        files.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 12);
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "rank = 1  # overridden by the flag below\nsweeps = 40\n").unwrap();
    let out = dir.path().join("a.lba1");
    let output = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("compress")
        .arg(&input)
        .args(["-R", "2", "-o"])
        .arg(&out));
    let report = stdout_json(&output);
    assert_eq!(report["config"]["rank"], 2, "flag must override the file");
    assert_eq!(report["config"]["sweeps"], 40, "file must override the default");
    assert_eq!(report["config"]["envelopes"], 1, "default must fill the rest");
}

#[test]
fn corrupt_input_exits_with_input_code() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 13);
    let mut bytes = std::fs::read(&input).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&input, bytes).unwrap();
    let out = dir.path().join("a.lba1");
    let output = run(bin().arg("compress").arg(&input).args(["-R", "2", "-o"]).arg(&out));
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("CRC"), "stderr: {err}");
}

#[test]
fn missing_file_exits_with_input_code() {
    let output = run(bin().arg("diagnose").arg("/nonexistent/x.lrf1"));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn impossible_rank_exits_with_validation_code() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 14);
    let out = dir.path().join("a.lba1");
    let output = run(bin().arg("compress").arg(&input).args(["-R", "64", "-o"]).arg(&out));
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn unwritable_output_exits_with_runtime_code() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 15);
    let out = dir.path().join("no_such_dir").join("a.lba1");
    let output = run(bin().arg("compress").arg(&input).args(["-R", "2", "-o"]).arg(&out));
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn train_toy_improves_a_cold_init_and_logs_history() {
    let dir = TempDir::new().unwrap();
    // A compressed adapter for an unrelated delta is a shape-compatible but
    // cold warm start for the planted task.
    let (input, _) = planted_lrf1(dir.path(), 32, 32, 4, 16);
    let init = dir.path().join("init.lba1");
    assert!(run(bin().arg("compress").arg(&input).args(["-R", "4", "-o"]).arg(&init))
        .status
        .success());

    let trained = dir.path().join("trained.lba1");
    let output = run(bin()
        .arg("train-toy")
        .args(["--mode", "full", "--steps", "500", "--n", "32", "--m", "32", "-R", "4"])
        .args(["--samples", "128", "--seed", "5"])
        .arg("--init")
        .arg(&init)
        .arg("-o")
        .arg(&trained));
    let report = stdout_json(&output);
    let init_loss = report["result"]["init_loss"].as_f64().unwrap();
    let final_loss = report["result"]["final_loss"].as_f64().unwrap();
    assert!(final_loss < init_loss, "{final_loss} vs {init_loss}");
    assert_eq!(report["result"]["loss_history"].as_array().unwrap().len(), 501);
    assert_eq!(report["inputs"][0]["path"], init.display().to_string());

    let adapter = load_adapter(&trained).unwrap();
    assert_eq!((adapter.n(), adapter.m()), (32, 32));
}

#[test]
fn train_toy_rejects_mismatched_init_shape() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 17);
    let init = dir.path().join("init.lba1");
    assert!(run(bin().arg("compress").arg(&input).args(["-R", "2", "-o"]).arg(&init))
        .status
        .success());
    let output = run(bin()
        .arg("train-toy")
        .args(["--n", "32", "--m", "32", "--steps", "10"])
        .arg("--init")
        .arg(&init)
        .arg("-o")
        .arg(dir.path().join("t.lba1")));
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn reconstruct_matches_library_reconstruction() {
    let dir = TempDir::new().unwrap();
    let adapter = planted_adapter(16, 16, 2, 18);
    let path = dir.path().join("a.lba1");
    lordba::format::save_adapter(&path, &adapter).unwrap();
    let output = run(bin().arg("reconstruct").arg(&path));
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    // The container stores scales at half precision, so the reference is the
    // adapter as it exists on disk, not the pre-save in-memory one.
    let delta = lordba::format::load_adapter(&path).unwrap().reconstruct();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 16);
    for (i, row) in rows.iter().enumerate() {
        for (j, cell) in row.split(',').enumerate() {
            let v: f64 = cell.parse().unwrap();
            assert!((v - delta.get(i, j)).abs() <= 1e-16 * delta.get(i, j).abs().max(1.0));
        }
    }
}

#[test]
fn diagnose_reports_zero_ratio_for_pure_sign_factors() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(19);
    let a = SignMatrix::from_fn(24, 3, |_, _| rng.random()).to_dense();
    let b = SignMatrix::from_fn(20, 3, |_, _| rng.random()).to_dense();
    let path = dir.path().join("signs.lrf1");
    save_factors(&path, &LoraFactors::new(a, b).unwrap()).unwrap();
    let report = stdout_json(&run(bin().arg("diagnose").arg(&path)));
    assert_eq!(report["result"]["ratio"].as_f64().unwrap(), 0.0);
    assert_eq!(report["result"]["zeta"].as_f64().unwrap(), 0.0);
    assert_eq!(report["result"]["rank"], 3);
}

#[test]
fn mc_validate_emits_check_reports() {
    let out = run(bin()
        .arg("mc-validate")
        .arg("signcons")
        .args(["--n", "16", "--m", "16", "-R", "4"])
        .args(["--noise", "gaussian", "--noise-scale", "0.1", "--trials", "2000"]));
    let report = stdout_json(&out);
    assert_eq!(report["result"]["passed"], true);
    assert_eq!(report["result"]["violation_rate"].as_f64().unwrap(), 0.0);
    assert_eq!(report["config"]["check"], "signcons");

    let out = run(bin()
        .arg("mc-validate")
        .arg("theorem1")
        .args(["--n", "16", "--m", "16", "-R", "2", "--trials", "100", "--delta", "0.1"]));
    let report = stdout_json(&out);
    assert!(report["result"]["slope"].is_number());
    assert!(report["result"]["grid"].as_array().unwrap().len() == 7);

    let out = run(bin()
        .arg("mc-validate")
        .arg("tail")
        .args(["--n", "8", "--m", "8", "-R", "2", "--trials", "500", "--t-grid", "0.2,0.4,0.8"]));
    let report = stdout_json(&out);
    assert_eq!(report["result"]["empirical"].as_array().unwrap().len(), 3);
}

#[test]
fn mc_validate_rejects_out_of_regime_models() {
    let out = run(bin()
        .arg("mc-validate")
        .arg("theorem1")
        .args(["--n", "16", "--m", "16", "-R", "2", "--trials", "50"])
        .args(["--noise-scale", "5.0"])); // zeta far above mu
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_kernel_csv_tracks_the_storage_model() {
    let out = run(bin()
        .arg("bench-kernel")
        .args(["--shapes", "4x512x16x512x1,4x512x64x512x1", "--trials", "3"]));
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("T,N,R,M,l,"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let r0: usize = row[2].parse().unwrap();
        let ratio: f64 = row[7].parse().unwrap();
        let ideal = bandwidth_ratio(512, 512, r0, 1);
        // Container header/CRC and word padding cost a little over the ideal.
        assert!((ratio - ideal).abs() / ideal < 0.02, "ratio {ratio} vs ideal {ideal}");
        let dev: f64 = row[10].parse().unwrap();
        assert!(dev <= 1e-9);
    }
}

#[test]
fn thread_env_var_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let (input, _) = planted_lrf1(dir.path(), 16, 16, 2, 20);
    let out = dir.path().join("a.lba1");
    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let output = run(bin()
            .env("LORDBA_THREADS", threads)
            .arg("compress")
            .arg(&input)
            .args(["-R", "2", "-o"])
            .arg(&out));
        reports.push(without_wall_time(stdout_json(&output)));
    }
    assert_eq!(reports[0], reports[1]);

    let bad = run(bin().env("LORDBA_THREADS", "zero").arg("mc-validate").arg("signal"));
    assert_eq!(bad.status.code(), Some(3));
}
