use std::path::Path;
use std::process::Command;

fn kalpert(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kalpert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn basis_writes_tables_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("basis.cfg");
    std::fs::write(&cfg, "# moments only\nbasis_kappas = 1,2\neta = 0.02\n").unwrap();
    let out = dir.path().join("out");
    let o = kalpert(&[
        "basis",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(
        read(&out, "moments.csv").starts_with("kappa,atom,beta1,beta2,smooth_moment,raw_moment\n")
    );
    let report = read(&out, "report.txt");
    let hash = report
        .lines()
        .find_map(|l| l.strip_prefix("config_hash: "))
        .unwrap();
    assert_eq!(hash.len(), 64);
    assert!(report.contains("seed = 9"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS moments_vanish"));
}

#[test]
fn exit_code_follows_gates() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let fail = kalpert(&["scales", "--out-dir", a.to_str().unwrap()]);
    assert_eq!(fail.status.code(), Some(1));
    let b = dir.path().join("b");
    let pass = kalpert(&[
        "scales",
        "--set",
        "scales_multiplier=6.283185307179586",
        "--out-dir",
        b.to_str().unwrap(),
    ]);
    assert_eq!(pass.status.code(), Some(0));
    assert!(read(&b, "scales_profile.csv").starts_with("multiplier,level,mass_fraction\n"));
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = kalpert(&[
        "basis",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    let o = kalpert(&[
        "condition-a",
        "--set",
        "q=3",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "kakeya",
        "--set",
        "kakeya_deltas=0.25,0.125",
        "--set",
        "check_delta=0.125",
        "--seed",
        "3",
    ];
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let mut a: Vec<&str> = args.to_vec();
        a.extend(["--out-dir", out.to_str().unwrap()]);
        let o = kalpert(&a);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stdout)
        );
        outs.push(out);
    }
    for name in ["tube_norms.csv", "trilinear_norms.csv", "kakeya_fit.csv"] {
        assert_eq!(read(&outs[0], name), read(&outs[1], name));
    }
}
