use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
steps = 4
st_resolution = 8
slat_resolution = 8
slat_channels = 4
toy_layers = 2
toy_dim = 16
toy_heads = 2
st_token_side = 4
";

fn voxflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxflow"))
        .current_dir(dir)
        .env_remove("VOXFLOW_SEED")
        .args(args)
        .output()
        .expect("spawn voxflow")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = voxflow(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("no {key} in\n{stdout}"))
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn checksums(path: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert!(v.get("timestamp").is_some());
    v["checksums"].clone()
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen", "--out", "a", "--config", "small.cfg"]);
    for out in ["b1", "b2"] {
        ok(d, &["edit", "--in", "a", "--mask", "a/mask.vxg", "--out", out, "--config", "small.cfg"]);
    }
    let (m1, m2) = (checksums(&d.join("b1/manifest.json")), checksums(&d.join("b2/manifest.json")));
    assert_eq!(m1, m2);
    for f in ["st.vxg", "slat.vxs", "meta.txt", "report.txt"] {
        assert_eq!(fs::read(d.join("b1").join(f)).unwrap(), fs::read(d.join("b2").join(f)).unwrap(), "{f}");
    }
    assert_eq!(m1.as_object().unwrap().len(), 4);
}

#[test]
fn empty_mask_chain_reports_perfect_metrics() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen", "--out", "a", "--config", "small.cfg", "--region", "none"]);
    let edit = ok(d, &["edit", "--in", "a", "--mask", "a/mask.vxg", "--out", "b", "--config", "small.cfg"]);
    assert_eq!(value(&edit, "preserved_match"), "true");
    let m = ok(d, &["metrics", "--in", "b", "--ref", "a", "--mask", "a/mask.vxg", "--config", "small.cfg"]);
    assert_eq!(value(&m, "chamfer"), "0");
    assert_eq!(value(&m, "masked_psnr"), "99");
    assert_eq!(fs::read(d.join("a/slat.vxs")).unwrap(), fs::read(d.join("b/slat.vxs")).unwrap());
}

#[test]
fn reused_inversion_and_schedule_mismatch() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen", "--out", "a", "--config", "small.cfg"]);
    let inv = ok(d, &["invert", "--in", "a", "--out", "inv", "--config", "small.cfg"]);
    // 13 captured evaluations (guidance doubles those at t >= 0.5), 2 layers each
    assert_eq!(value(&inv, "kv_st_entries"), "26");
    assert!(d.join("inv/kv_st").is_dir() && d.join("inv/st").is_dir());
    let args = ["edit", "--in", "a", "--mask", "a/mask.vxg", "--out", "b", "--config", "small.cfg", "--inversion", "inv"];
    let edit = ok(d, &args);
    assert_eq!(value(&edit, "preserved_match"), "true");
    assert_eq!(value(&edit, "st_inversion_evaluations"), "0");

    let mut mismatched = args.to_vec();
    mismatched.extend(["--steps", "5"]);
    let out = voxflow(d, &mismatched);
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("KVKey{stage=st"), "{err}");
}

#[test]
fn exit_codes() {
    let w = workspace();
    let d = w.path();
    for args in [&["edit", "--bogus"][..], &["frobnicate"], &["gen"], &["gen", "--out", "x", "--set", "steps=zero"]] {
        assert_eq!(voxflow(d, args).status.code(), Some(2), "{args:?}");
    }
    let missing = voxflow(d, &["edit", "--in", "nope", "--mask", "m.vxg", "--out", "o"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
    assert!(!d.join("o").exists());
    assert_eq!(voxflow(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn bench_order_prints_slopes() {
    let w = workspace();
    let out = ok(w.path(), &["bench-order", "--out", "bench"]);
    let taylor: f64 = value(&out, "taylor_slope").parse().unwrap();
    let euler: f64 = value(&out, "euler_slope").parse().unwrap();
    assert!((1.8..=2.2).contains(&taylor), "{taylor}");
    assert!((0.8..=1.2).contains(&euler), "{euler}");
    assert!(w.path().join("bench/manifest.json").is_file());
}

#[test]
fn reconstruct_reports_both_stages() {
    let w = workspace();
    let d = w.path();
    ok(d, &["gen", "--out", "a", "--config", "small.cfg"]);
    let full = ok(d, &["reconstruct", "--in", "a", "--out", "r", "--config", "small.cfg"]);
    let st_only = ok(d, &["reconstruct", "--in", "a", "--out", "r2", "--config", "small.cfg", "--st-only"]);
    let f: f64 = value(&full, "slat_rel_l2").parse().unwrap();
    let s: f64 = value(&st_only, "slat_rel_l2").parse().unwrap();
    assert!(s > f, "st-only {s} vs full {f}");
    assert_eq!(value(&full, "st_rel_l2"), value(&st_only, "st_rel_l2"));
}
