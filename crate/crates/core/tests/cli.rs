use std::path::Path;
use std::process::{Command, Output};

const CONSTANT: &str = r#"
d = 1
m = [0]
rho0 = [1.0]
quantities = ["nu_star", "nu"]

[field]
name = "constant"
c = 2.0

[mc]
h = 0.25
n_outer = 2
seed = 9
"#;

fn bulkdiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bulkdiff"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn constant_field_estimate_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", CONSTANT);
    let out = bulkdiff(&["--config", &cfg, "--out", "res", "estimate"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("res/results.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let value: f64 = rec[4].parse().unwrap();
        match &rec[3] {
            "nu_star" => assert!((value - 0.25).abs() < 1e-3, "{value}"),
            "nu" => assert!((value - 1.0).abs() < 1e-3, "{value}"),
            other => panic!("unexpected quantity {other}"),
        }
        seen += 1;
    }
    assert_eq!(seen, 2);
    assert!(dir.path().join("res/results.json").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &CONSTANT.replace("name = \"constant\"\nc = 2.0", "name = \"crowding\""));
    let a = bulkdiff(&["--config", &cfg, "--out", "a", "--threads", "1", "estimate"], dir.path());
    let b = bulkdiff(&["--config", &cfg, "--out", "b", "--threads", "2", "estimate"], dir.path());
    assert!(a.status.success() && b.status.success());
    for f in ["results.csv", "results.json"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
}

#[test]
fn set_overrides_and_seed_flag_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", CONSTANT);
    let out = bulkdiff(&["--config", &cfg, "--seed", "42", "--out", "o", "estimate", "--set", "mc.h=0.125"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/results.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.contains(",0.125,42,"), "{row}");
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "bogus = 1\n");
    assert_eq!(bulkdiff(&["--config", &cfg, "estimate"], dir.path()).status.code(), Some(1));
    assert_eq!(bulkdiff(&["estimate"], dir.path()).status.code(), Some(1));
    assert_eq!(bulkdiff(&["no-such-command"], dir.path()).status.code(), Some(1));
    let cfg = write(dir.path(), "neg.toml", &CONSTANT.replace("rho0 = [1.0]", "rho0 = [-1.0]"));
    assert_eq!(bulkdiff(&["--config", &cfg, "estimate"], dir.path()).status.code(), Some(1));
}

#[test]
fn verify_fails_on_tampered_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/oracle.json");
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixtures).unwrap()).unwrap();
    for f in json["fixtures"].as_array_mut().unwrap() {
        let v = &mut f["result"]["value"];
        *v = serde_json::json!(v.as_f64().unwrap() * 1.1);
    }
    let tampered = write(dir.path(), "tampered.json", &json.to_string());
    let out = bulkdiff(&["verify", "--fixtures", &tampered, "--only", "4"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1), "{stdout}");
    assert!(stdout.contains("criterion  4 FAIL"), "{stdout}");
    assert!(stdout.contains("failed: 4 (oracle agreement)"), "{stdout}");
}

#[test]
fn verify_without_fixtures_explains_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = bulkdiff(&["verify"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bulkdiff oracle"));
}

#[test]
fn cache_dir_persists_between_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", CONSTANT);
    for _ in 0..2 {
        let out = bulkdiff(&["--config", &cfg, "--cache-dir", "cache", "--out", "o", "estimate"], dir.path());
        assert!(out.status.success());
    }
    let out = bulkdiff(&["--cache-dir", "cache", "cache-stats"], dir.path());
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(stats["entries"].as_u64().unwrap() > 0, "{stats}");
}
