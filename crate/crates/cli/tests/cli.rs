use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use defield_core::io::{read_field, write_mask, write_volume};
use defield_core::{GridGeometry, Mask, Volume};
use serde_json::Value;

fn defield(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defield"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("DEFIELD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn error_record(o: &Output) -> Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr);
    let v: Value = serde_json::from_str(line.trim()).expect("stderr is one JSON record");
    assert_eq!(
        v["error"]["exit_code"].as_i64().unwrap(),
        o.status.code().unwrap() as i64
    );
    v
}

fn blobs(g: GridGeometry) -> Volume {
    Volume::from_fn(g, |[x, y, z]| {
        let b = |cx: f64, cy: f64, cz: f64, s: f64| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2);
            (-d2 / (2.0 * s * s)).exp()
        };
        b(8.0, 9.0, 8.0, 2.5) + 0.6 * b(12.0, 6.0, 11.0, 2.0) + 0.4 * b(5.0, 12.0, 6.0, 2.0)
    })
    .unwrap()
}

#[test]
fn reproduce_paper_prints_fisher_results() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&defield(
        dir.path(),
        &["reproduce-paper", "--report", "rep"],
    ));
    let f = &v["full"]["fisher"];
    let t = &v["three_week"]["fisher"];
    assert!((f["odds_ratio"].as_f64().unwrap() - 4.33).abs() < 0.01);
    assert!((f["p"].as_f64().unwrap() - 0.051).abs() < 0.005);
    assert!((t["odds_ratio"].as_f64().unwrap() - 5.13).abs() < 0.01);
    assert!((t["p"].as_f64().unwrap() - 0.043).abs() < 0.005);
    let csv = fs::read_to_string(dir.path().join("rep_tables.csv")).unwrap();
    assert!(csv.contains("full,12,4,9,13,4.33,0.052"));
    assert!(csv.contains("three_week,11,3,10,14,5.13,0.043"));
}

#[test]
fn register_identical_pair_gives_near_zero_field() {
    let dir = tempfile::tempdir().unwrap();
    let g = GridGeometry::cube(16).unwrap();
    write_volume(dir.path().join("a.vol"), &blobs(g)).unwrap();
    let v = stdout_json(&defield(
        dir.path(),
        &[
            "--pyramid_levels",
            "2",
            "register",
            "--source",
            "a.vol",
            "--target",
            "a.vol",
            "--transform",
            "t",
        ],
    ));
    assert!(v["forward_max_norm"].as_f64().unwrap() < 0.05);
    let f = read_field(dir.path().join("t/forward.vol")).unwrap();
    assert!(f.mean_norm() < 0.05);
}

#[test]
fn classify_with_empty_masks_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let g = GridGeometry::cube(12).unwrap();
    let mut manifest = String::from("patient_id,week,volume_path,mask_path,recist\n");
    for p in ["a", "b"] {
        for w in 0..2 {
            let vp = format!("{p}_{w}.vol");
            let mp = format!("{p}_{w}_mask.vol");
            write_volume(dir.path().join(&vp), &blobs(g)).unwrap();
            write_mask(dir.path().join(&mp), &Mask::empty(g)).unwrap();
            manifest.push_str(&format!("{p},{w},{vp},{mp},PR\n"));
        }
    }
    fs::write(dir.path().join("m.csv"), manifest).unwrap();
    let o = defield(
        dir.path(),
        &[
            "--pyramid_levels",
            "1",
            "--iterations_per_level",
            "3",
            "classify",
            "--manifest",
            "m.csv",
            "--report",
            "cl",
        ],
    );
    let v = stdout_json(&o);
    assert!(v["warnings"].as_u64().unwrap() > 0);
    assert_eq!(v["pr_full"].as_u64(), Some(0));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("insufficient region"));
    let patients = fs::read_to_string(dir.path().join("cl_patients.csv")).unwrap();
    assert!(patients.contains("insufficient region"));
}

#[test]
fn errors_carry_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = error_record(&defield(
        dir.path(),
        &["jacobian", "--field", "nope.vol", "--output", "j.vol"],
    ));
    assert_eq!(missing["error"]["code"], "missing_file");
    assert!(missing["error"]["message"]
        .as_str()
        .unwrap()
        .contains("nope.vol"));

    let bad = error_record(&defield(dir.path(), &["--lcc_sigma", "-1", "config"]));
    assert_eq!(bad["error"]["code"], "invalid_parameter");

    fs::write(dir.path().join("junk.csv"), "label,wrong\nR,1\n").unwrap();
    let malformed = error_record(&defield(
        dir.path(),
        &["stats", "--samples", "junk.csv", "--report", "s"],
    ));
    assert_eq!(malformed["error"]["code"], "malformed_file");

    let codes: Vec<i64> = [&missing, &bad, &malformed]
        .iter()
        .map(|v| v["error"]["exit_code"].as_i64().unwrap())
        .collect();
    assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "lcc_sigma = 2.5\nweek_limit = all\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_defield"))
        .arg("--config")
        .arg(&cfg)
        .args(["--week_limit", "4", "config"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("lcc_sigma = 2.5\n"));
    assert!(text.contains("week_limit = 4\n"));
    // The printed config is itself a valid config file.
    fs::write(&cfg, text.as_bytes()).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_defield"))
        .arg("--config")
        .arg(&cfg)
        .arg("config")
        .output()
        .unwrap();
    assert_eq!(again.stdout, o.stdout);
}

/// Phantom, registration, Jacobian, regions and stats: every artifact is
/// re-readable, and a second run writes identical bytes.
#[test]
fn pipeline_artifacts_are_readable_and_idempotent() {
    let run = |dir: &Path| {
        let steps: [&[&str]; 5] = [
            &[
                "phantom",
                "--dir",
                "c",
                "--patients",
                "1",
                "--size",
                "24",
                "--radius",
                "5",
                "--weeks",
                "2",
            ],
            &[
                "register",
                "--source",
                "c/p001/week0.vol",
                "--target",
                "c/p001/week1.vol",
                "--transform",
                "t",
            ],
            &["jacobian", "--transform", "t", "--output", "j.vol"],
            &[
                "regions",
                "--mask-prev",
                "c/p001/week0_mask.vol",
                "--mask-next",
                "c/p001/week1_mask.vol",
                "--transform",
                "t",
                "--partition",
                "part.vol",
                "--samples",
                "s.csv",
            ],
            &[
                "--bootstrap_resamples",
                "200",
                "stats",
                "--samples",
                "s.csv",
                "--report",
                "st",
            ],
        ];
        for s in steps {
            stdout_json(&defield(
                dir,
                &["--pyramid_levels", "2"]
                    .iter()
                    .chain(s)
                    .copied()
                    .collect::<Vec<_>>(),
            ));
        }
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    let files = [
        "c/manifest.csv",
        "c/p001/week0.vol",
        "c/p001/week1_mask.vol",
        "c/p001/truth_0_1.vol",
        "t/velocity.vol",
        "t/forward.vol",
        "t/backward.vol",
        "t/transform.json",
        "j.vol",
        "part.vol",
        "s.csv",
        "st.json",
        "st.csv",
        "st_boxplot.csv",
    ];
    for f in files {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    // The binary reads back what it wrote.
    stdout_json(&defield(
        a.path(),
        &[
            "jacobian",
            "--field",
            "c/p001/truth_0_1.vol",
            "--output",
            "jt.vol",
        ],
    ));
    stdout_json(&defield(
        a.path(),
        &["stats", "--samples", "s.csv", "s.csv", "--report", "st2"],
    ));
}
