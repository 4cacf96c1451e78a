//! End-to-end CLI checks: exit codes, serialization fidelity, and the
//! fixture pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hazcal() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hazcal"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn hazcal")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn malformed_header_exits_2_naming_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "start,stop,status,z\n0,1,1,0.5\n").unwrap();
    let out = run(hazcal()
        .arg("fit")
        .args(["--cohort", bad.to_str().unwrap()])
        .args(["--out", dir.path().join("m.json").to_str().unwrap()]));
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("entry_age"), "stderr: {stderr}");
}

#[test]
fn fit_output_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let out = run(hazcal()
        .arg("fit")
        .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
        .args(["--out", model.to_str().unwrap()]));
    assert_code(&out, 0);

    // Reload through serde and re-serialize: every numeric field must
    // round-trip exactly (serde_json emits shortest-round-trip floats).
    let text = std::fs::read_to_string(&model).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let fit1: hazcal_core::CoxFit = serde_json::from_str(&text).unwrap();
    let again = serde_json::to_value(&fit1).unwrap();
    for field in ["beta", "sigma_beta", "baseline", "log_partial_likelihood"] {
        assert_eq!(value[field], again[field], "field {field} changed in round trip");
    }
}

#[test]
fn weighted_mode_without_constraints_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    assert_code(
        &run(hazcal()
            .arg("fit")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--out", model.to_str().unwrap()])),
        0,
    );

    // Strip the constraints from the fixture summary.
    let mut summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("summary.json")).unwrap())
            .unwrap();
    summary.as_object_mut().unwrap().remove("constraints");
    let bare = dir.path().join("summary.json");
    std::fs::write(&bare, serde_json::to_string(&summary).unwrap()).unwrap();

    let out = run(hazcal()
        .arg("recalibrate")
        .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
        .args(["--model", model.to_str().unwrap()])
        .args(["--summary", bare.to_str().unwrap()])
        .args(["--mode", "weighted"])
        .args(["--out", dir.path().join("r").to_str().unwrap()]));
    assert_code(&out, 3);
}

#[test]
fn infeasible_constraints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    assert_code(
        &run(hazcal()
            .arg("fit")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--out", model.to_str().unwrap()])),
        0,
    );
    // Prevalence target 1.5 can never be matched by a binary covariate.
    let constraints = dir.path().join("constraints.json");
    std::fs::write(
        &constraints,
        r#"{"items":[{"type":"raw_moment","j":1}],"targets":[1.5],"target_variances":[0.0001],"m":1000}"#,
    )
    .unwrap();
    let out = run(hazcal()
        .arg("recalibrate")
        .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
        .args(["--model", model.to_str().unwrap()])
        .args(["--summary", fixtures().join("summary.json").to_str().unwrap()])
        .args(["--constraints", constraints.to_str().unwrap()])
        .args(["--mode", "weighted"])
        .args(["--out", dir.path().join("r").to_str().unwrap()]));
    assert_code(&out, 3);
}

#[test]
fn fixture_pipeline_recalibrates_within_frozen_tolerances() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    assert_code(
        &run(hazcal()
            .arg("fit")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--out", model.to_str().unwrap()])),
        0,
    );
    let out = run(hazcal()
        .arg("recalibrate")
        .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
        .args(["--model", model.to_str().unwrap()])
        .args(["--summary", fixtures().join("summary.json").to_str().unwrap()])
        .args(["--out", dir.path().join("recal").to_str().unwrap()]));
    assert_code(&out, 0);

    let text = std::fs::read_to_string(dir.path().join("recal.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let results = value["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);

    // Frozen from the fixture generation run (seed 99); the pipeline is
    // deterministic so these hold to floating-point noise.
    let unweighted60 = results[0]["lambda0"][4].as_f64().unwrap();
    let weighted60 = results[1]["lambda0"][4].as_f64().unwrap();
    assert!((unweighted60 - 0.295019).abs() < 1e-4, "unweighted {unweighted60}");
    assert!((weighted60 - 0.219609).abs() < 1e-4, "weighted {weighted60}");
    for res in results {
        let lam = res["lambda0"].as_array().unwrap();
        let lo = res["ci_lower"].as_array().unwrap();
        let hi = res["ci_upper"].as_array().unwrap();
        for k in 0..lam.len() {
            let (l, a, b) = (
                lam[k].as_f64().unwrap(),
                lo[k].as_f64().unwrap(),
                hi[k].as_f64().unwrap(),
            );
            assert!(a <= l && l <= b);
        }
    }
}

#[test]
fn narrower_ci_level_uses_the_smaller_quantile() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    assert_code(
        &run(hazcal()
            .arg("fit")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--out", model.to_str().unwrap()])),
        0,
    );
    let mut widths = Vec::new();
    for (label, level) in [("d95", "0.95"), ("d90", "0.90")] {
        let out = run(hazcal()
            .arg("recalibrate")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--model", model.to_str().unwrap()])
            .args(["--summary", fixtures().join("summary.json").to_str().unwrap()])
            .args(["--mode", "unweighted"])
            .args(["--ci-level", level])
            .args(["--out", dir.path().join(label).to_str().unwrap()]));
        assert_code(&out, 0);
        let value: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(format!("{label}.json"))).unwrap(),
        )
        .unwrap();
        let res = &value["results"][0];
        let w = res["ci_upper"][0].as_f64().unwrap() - res["lambda0"][0].as_f64().unwrap();
        let se = res["se"][0].as_f64().unwrap();
        widths.push(w / se);
    }
    assert!((widths[0] - 1.959963984540054).abs() < 1e-9);
    assert!((widths[1] - 1.6448536269514722).abs() < 1e-6);
}

#[test]
fn predict_is_deterministic_and_honours_zero_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    assert_code(
        &run(hazcal()
            .arg("fit")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--out", model.to_str().unwrap()])),
        0,
    );
    assert_code(
        &run(hazcal()
            .arg("recalibrate")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--model", model.to_str().unwrap()])
            .args(["--summary", fixtures().join("summary.json").to_str().unwrap()])
            .args(["--out", dir.path().join("recal").to_str().unwrap()])),
        0,
    );
    let risks = dir.path().join("risks.csv");
    let out = run(hazcal()
        .arg("predict")
        .args(["--model", model.to_str().unwrap()])
        .args(["--baseline", dir.path().join("recal.json").to_str().unwrap()])
        .args(["--competing", fixtures().join("competing.json").to_str().unwrap()])
        .args(["--subjects", fixtures().join("subjects.csv").to_str().unwrap()])
        .args(["--out", risks.to_str().unwrap()]));
    assert_code(&out, 0);

    let text = std::fs::read_to_string(&risks).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6); // header + 5 subjects
    // Rows 1 and 5 are duplicated subjects: identical output bytes.
    assert_eq!(lines[1], lines[5]);

    // Subject 1 has all-zero covariates: the risk equals the baseline-only
    // discrete sum over the recalibrated (weighted) hazard with this
    // competing hazard.
    let value: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("recal.json")).unwrap(),
    )
    .unwrap();
    let res = &value["results"][1];
    let times: Vec<f64> = res["times"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let lam: Vec<f64> = res["lambda0"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let lam_c = |t: f64| (0.008 * t.floor()).powf(1.5); // fixture competing hazard at integer knots
    let (t0, t1) = (40.0, 55.0);
    let mut a_prev = lam[times.iter().position(|&t| t == 40.0).unwrap()];
    let a0 = a_prev;
    let c0 = lam_c(t0);
    let mut c_prev = c0;
    let mut expect = 0.0;
    for (k, &t) in times.iter().enumerate() {
        if t <= t0 || t > t1 {
            continue;
        }
        expect += (lam[k] - a_prev) * (-(a_prev - a0) - (c_prev - c0)).exp();
        a_prev = lam[k];
        c_prev = lam_c(t);
    }
    let risk0: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
    assert!(
        (risk0 - expect).abs() < 1e-12,
        "zero-covariate risk {risk0} vs hand sum {expect}"
    );
}

#[test]
fn covariate_name_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    assert_code(
        &run(hazcal()
            .arg("fit")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--out", model.to_str().unwrap()])),
        0,
    );
    assert_code(
        &run(hazcal()
            .arg("recalibrate")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--model", model.to_str().unwrap()])
            .args(["--summary", fixtures().join("summary.json").to_str().unwrap()])
            .args(["--out", dir.path().join("recal").to_str().unwrap()])),
        0,
    );
    let bad_subjects = dir.path().join("subjects.csv");
    std::fs::write(&bad_subjects, "t0,t1,age,smoker\n40,55,0,0\n").unwrap();
    let out = run(hazcal()
        .arg("predict")
        .args(["--model", model.to_str().unwrap()])
        .args(["--baseline", dir.path().join("recal.json").to_str().unwrap()])
        .args(["--competing", fixtures().join("competing.json").to_str().unwrap()])
        .args(["--subjects", bad_subjects.to_str().unwrap()])
        .args(["--out", dir.path().join("risks.csv").to_str().unwrap()]));
    assert_code(&out, 2);
}

#[test]
fn predict_ten_thousand_subjects_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    assert_code(
        &run(hazcal()
            .arg("fit")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--out", model.to_str().unwrap()])),
        0,
    );
    assert_code(
        &run(hazcal()
            .arg("recalibrate")
            .args(["--cohort", fixtures().join("source.csv").to_str().unwrap()])
            .args(["--model", model.to_str().unwrap()])
            .args(["--summary", fixtures().join("summary.json").to_str().unwrap()])
            .args(["--out", dir.path().join("recal").to_str().unwrap()])),
        0,
    );
    let mut subjects = String::from("t0,t1,z1,z2\n");
    for i in 0..10_000 {
        subjects.push_str(&format!("40,55,{},{}\n", i % 2, (i % 7) as f64 / 7.0 - 0.5));
    }
    let path = dir.path().join("many.csv");
    std::fs::write(&path, subjects).unwrap();

    let start = std::time::Instant::now();
    let out = run(hazcal()
        .arg("predict")
        .args(["--model", model.to_str().unwrap()])
        .args(["--baseline", dir.path().join("recal.json").to_str().unwrap()])
        .args(["--competing", fixtures().join("competing.json").to_str().unwrap()])
        .args(["--subjects", path.to_str().unwrap()])
        .args(["--out", dir.path().join("risks.csv").to_str().unwrap()]));
    assert_code(&out, 0);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "batch predict took {elapsed:?}");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("risks.csv")).unwrap().lines().count(),
        10_001
    );
}
