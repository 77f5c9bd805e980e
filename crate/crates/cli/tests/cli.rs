use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const WHITE: &str = r#"{
  "schema": 1,
  "kernel": {"kind": "white", "d0": 1.0},
  "boundary": "natural",
  "grid": {"t_start": 0.0, "t_end": 5.0, "n_points": 101},
  "control": {"kind": "free", "g": 1.0},
  "curve": {"points": 10},
  "sampler": {"M": 20000, "seed": 3}
}"#;

const OU: &str = r#"{
  "schema": 1,
  "kernel": {"kind": "ornstein_uhlenbeck", "d0": 1.0, "d1": 1.0},
  "boundary": "dirichlet_at_quench",
  "grid": {"t_start": 0.0, "t_end": 20.0, "n_points": 401},
  "control": {"kind": "cpmg", "pulses": 4, "t0": 1.0, "duration": 8.0},
  "sampler": {"M": 5000, "seed": 11, "dump_paths": 3},
  "spectroscopy": {"probes": {"kind": "eigen", "count": 10}, "sigma": 0.01, "reps": 50, "seed": 1},
  "optimizer": {"P": 4, "starts": 8},
  "markov": {"t0": 0.0, "tf": 4.0, "dt": 0.05, "initial": [1.0]}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn noisepath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisepath")).args(args).output().unwrap()
}

fn run(config: &Path, out: &Path, extra: &[&str], cmd: &str) -> Output {
    let mut args = vec![
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    args.push(cmd);
    noisepath(&args)
}

/// Data rows of a CSV, skipping the metadata block and header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn white_noise_free_decay_ends_at_exp_minus_half_t() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "white.json", WHITE);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &["--no-header-timestamp"], "dephase");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("decay.csv"));
    assert_eq!(r.len(), 10);
    let last = r.last().unwrap();
    assert!((num(&last[0]) - 5.0).abs() < 1e-12);
    assert!((num(&last[1]) - 2.5).abs() < 1e-12);
    assert!((num(&last[2]) - (-2.5f64).exp()).abs() < 1e-12);
}

#[test]
fn malformed_json_exits_2_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"schema": 1, "kernel": {"#);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[], "dephase");
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_rejected_by_path() {
    let tmp = TempDir::new().unwrap();
    let text = WHITE.replace(r#""points": 10"#, r#""points": 10, "colour": "red""#);
    let cfg = write_config(tmp.path(), "c.json", &text);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[], "dephase");
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("curve.colour"), "{err}");
    assert!(!out.exists());
}

#[test]
fn wrong_schema_and_missing_parameters_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let v2 = write_config(tmp.path(), "v2.json", &WHITE.replace(r#""schema": 1"#, r#""schema": 2"#));
    let o = run(&v2, &out, &[], "dephase");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
    let cpmg = write_config(tmp.path(), "cpmg.json", &WHITE.replace(r#""kind": "free""#, r#""kind": "cpmg""#));
    let o = run(&cpmg, &out, &[], "dephase");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("control.pulses"));
    let o = noisepath(&["--out", out.to_str().unwrap(), "modes"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn indefinite_kernel_exits_3_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let text = r#"{"schema": 1, "kernel": {"kind": "stationary", "coefficients": [-1.0, 1.0]},
        "grid": {"t_start": 0.0, "t_end": 5.0, "n_points": 101}, "control": {"kind": "free"}}"#;
    let cfg = write_config(tmp.path(), "neg.json", text);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[], "dephase");
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn sample_reports_agreement_and_exit_4_on_failure() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "white.json", WHITE);
    let out = tmp.path().join("ok");
    let o = run(&cfg, &out, &[], "sample");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("sample.csv"));
    assert_eq!(r[0][9], "true");
    assert!((num(&r[0][3]) - (-2.5f64).exp()).abs() < 4.0 * num(&r[0][5]));

    // A threshold no finite sample can meet forces the failure branch.
    let strict = write_config(
        tmp.path(),
        "strict.json",
        &WHITE.replace(r#""seed": 3"#, r#""seed": 3, "sigmas": 0.0"#),
    );
    let out = tmp.path().join("strict");
    let o = run(&strict, &out, &[], "sample");
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(rows(&out.join("sample.csv"))[0][9], "false");
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_are_deterministic_across_runs_and_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ou.json", OU);
    for cmd in ["sample", "reconstruct", "optimize"] {
        let a = tmp.path().join(format!("{cmd}_a"));
        let b = tmp.path().join(format!("{cmd}_b"));
        assert!(run(&cfg, &a, &["--no-header-timestamp"], cmd).status.success());
        assert!(run(&cfg, &b, &["--no-header-timestamp", "--threads", "1"], cmd).status.success());
        assert_eq!(read_all(&a), read_all(&b), "{cmd}");
    }
}

#[test]
fn seed_flag_overrides_config_and_timestamp_is_one_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ou.json", OU);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&cfg, &a, &[], "sample").status.success());
    assert!(run(&cfg, &b, &["--seed", "12"], "sample").status.success());
    let ta = std::fs::read_to_string(a.join("sample.csv")).unwrap();
    let tb = std::fs::read_to_string(b.join("sample.csv")).unwrap();
    assert!(ta.contains("# seed: 11") && tb.contains("# seed: 12"));
    assert!(ta.lines().any(|l| l.starts_with("# timestamp: ")));
    assert_ne!(rows(&a.join("sample.csv")), rows(&b.join("sample.csv")));

    let c = tmp.path().join("c");
    assert!(run(&cfg, &c, &["--seed", "11"], "sample").status.success());
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("# timestamp")).collect::<Vec<_>>().join("\n");
    let tc = std::fs::read_to_string(c.join("sample.csv")).unwrap();
    assert_eq!(strip(&ta), strip(&tc));
}

#[test]
fn every_output_carries_metadata() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ou.json", OU);
    let digest = noisepath_cli::output::sha256_hex(OU.as_bytes());
    for cmd in ["correlate", "modes", "dephase", "sample", "reconstruct", "optimize", "propagate"] {
        let out = tmp.path().join(cmd);
        let o = run(&cfg, &out, &[], cmd);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for (name, bytes) in read_all(&out) {
            let text = String::from_utf8(bytes).unwrap();
            if name.ends_with(".csv") {
                assert!(text.starts_with("# generator: noisepath"), "{name}");
                assert!(text.contains(&format!("# config_sha256: {digest}")), "{name}");
                assert!(text.contains("# grid: "), "{name}");
                assert!(text.contains("# tolerances: "), "{name}");
            } else {
                let v: serde_json::Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["metadata"]["config_sha256"], digest.as_str(), "{name}");
                assert!(v["result"].is_object(), "{name}");
            }
        }
    }
}

#[test]
fn reproduce_fig4_plateaus_match_discrete_spectrum() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("fig4");
    let o = noisepath(&["--out", out.to_str().unwrap(), "reproduce", "fig4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d0 = 0.5;
    let r = rows(&out.join("fig4_plateaus.csv"));
    assert_eq!(r.len(), 5);
    for (n, row) in r.iter().enumerate() {
        // Levels Ω_n = ω₀(2n + 1) with ω₀ = √(α/D1) = 1.
        let omega_n = (2 * n + 1) as f64;
        assert!((num(&row[1]) - omega_n).abs() < 1e-12);
        let expected = (-1.0 / (omega_n + d0)).exp();
        assert!((num(&row[2]) - expected).abs() / expected < 1e-3, "n = {n}: {}", row[2]);
    }
    let curves = rows(&out.join("fig4_saturation.csv"));
    assert_eq!(curves[0].len(), 6);
    // Saturated: the last tenth of the curve is flat.
    let tail = &curves[curves.len() - 8..];
    for c in 1..6 {
        let last = num(&tail[7][c]);
        assert!(tail.iter().all(|row| (num(&row[c]) - last).abs() < 1e-4 * last));
    }
}

#[test]
fn reproduce_fig2b_and_fig3() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("figs");
    for s in ["fig2b", "fig3"] {
        assert!(noisepath(&["--out", out.to_str().unwrap(), "reproduce", s]).status.success());
    }
    for row in rows(&out.join("fig2b_spectra.csv")) {
        let w = num(&row[0]);
        let w2 = w * w;
        assert!((num(&row[1]) - 1.0 / (1.0 + w2)).abs() < 1e-12);
        assert!((num(&row[2]) - 1.0 / (1.0 + w2 * w2)).abs() < 1e-12);
    }
    let map = rows(&out.join("fig3a_bispectrum.csv"));
    assert_eq!(map.len(), 101 * 101);
    for row in map.iter().step_by(97) {
        let (w1, w2) = (num(&row[0]), num(&row[1]));
        // |regular part| = 1/(4π|1 − iω₁||1 + iω₂|) for D0 = D1 = 1.
        let abs = num(&row[2]).hypot(num(&row[3]));
        let expected = 1.0 / (4.0 * std::f64::consts::PI * (1.0 + w1 * w1).sqrt() * (1.0 + w2 * w2).sqrt());
        assert!((abs - expected).abs() < 1e-12);
    }
    let eig = rows(&out.join("fig3b_eigenspectrum.csv"));
    assert!(eig.len() > 20);
    for row in eig.iter().filter(|r| num(&r[1]) < 5.0) {
        let (s, form) = (num(&row[2]), num(&row[3]));
        assert!((s - form).abs() / form < 0.02, "{row:?}");
    }
}

#[test]
fn propagate_reproduces_ou_decay() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ou.json", OU);
    let out = tmp.path().join("p");
    assert!(run(&cfg, &out, &[], "propagate").status.success());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("propagator.json")).unwrap()).unwrap();
    let mean = doc["result"]["mean"][0].as_f64().unwrap();
    assert!((mean - (-4.0f64).exp()).abs() < 1e-3, "{mean}");
    let ck = rows(&out.join("ck.csv"));
    assert!(num(&ck[0][4]) < 1e-6 && num(&ck[0][5]) < 1e-6);
}

#[test]
fn optimize_beats_baselines() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ou.json", OU);
    let out = tmp.path().join("o");
    assert!(run(&cfg, &out, &[], "optimize").status.success());
    let r = rows(&out.join("report.csv"));
    let chi = |label: &str| num(&r.iter().find(|row| row[0] == label).unwrap()[1]);
    assert!(chi("optimized") <= chi("cpmg") + 1e-12);
    assert!(chi("optimized") <= chi("uhrig") + 1e-12);
    assert!(chi("optimized") <= chi("free") + 1e-12);
}

#[test]
fn reconstruct_recovers_leading_modes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ou.json", OU);
    let out = tmp.path().join("r");
    assert!(run(&cfg, &out, &[], "reconstruct").status.success());
    let r = rows(&out.join("comparison.csv"));
    assert_eq!(r.len(), 10);
    for row in &r {
        assert!(num(&row[4]).abs() < 0.05, "{row:?}");
    }
}
