//! Command-line behaviour: exit codes, determinism and the file layout of every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eddycorr::cli::Metrics;
use eddycorr::dataset::GradientTable;
use eddycorr::io::{read_nifti, write_bvals_bvecs, write_nifti};
use eddycorr::pipeline::{PipelineConfig, TranslatorChoice};
use eddycorr::registration::RegistrationConfig;
use eddycorr::simulator::{PhantomSpec, SimulationConfig};
use eddycorr::volume::{Geometry, Volume3};

fn eddycorr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eddycorr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn small_simulation() -> SimulationConfig {
    let mut c = SimulationConfig::default();
    c.phantom = PhantomSpec::scaled_down();
    c.acquisition.n_b0 = 2;
    c.acquisition.shells = vec![(1000.0, 3), (2000.0, 4)];
    c
}

fn small_registration() -> RegistrationConfig {
    let mut r = RegistrationConfig::default();
    r.levels = 2;
    r.max_iters = 30;
    r
}

fn write_config<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

/// Every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn simulate_is_reproducible_and_thread_invariant() {
    let work = tempfile::tempdir().unwrap();
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg = write_config(cfg_dir.path(), "sim.json", &small_simulation());
    let cfg = cfg.to_str().unwrap();
    for (out, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let o = eddycorr(work.path(), &["simulate", "--seed", "7", "--threads", threads, "--config", cfg, "--output-dir", out]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    }
    let a = tree(&work.path().join("a"));
    assert_eq!(a, tree(&work.path().join("b")));
    assert_eq!(a, tree(&work.path().join("c")));
    for f in ["dwi.nii.gz", "clean.nii.gz", "bvals", "bvecs", "powder_b0.nii.gz", "powder_b2000.nii.gz", "brain_mask.nii.gz", "simulation.json"] {
        assert!(a.contains_key(Path::new(f)), "missing {f}");
    }
    assert_eq!(a.keys().filter(|k| k.starts_with("transforms")).count(), 9);
    // Nothing but the output directories appeared in the working directory.
    let mut names: Vec<String> = fs::read_dir(work.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["a", "b", "c"]);

    let o = eddycorr(work.path(), &["simulate", "--seed", "8", "--config", cfg, "--output-dir", "d"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(a[Path::new("dwi.nii.gz")], tree(&work.path().join("d"))[Path::new("dwi.nii.gz")]);
}

#[test]
fn simulate_correct_evaluate_register_translate() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    write_config(w, "sim.json", &small_simulation());
    write_config(w, "reg.json", &small_registration());
    let ok = |args: &[&str]| {
        let o = eddycorr(w, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o.stderr));
        o
    };
    ok(&["simulate", "--seed", "3", "--config", "sim.json", "--output-dir", "sim"]);
    let data = ["--input", "sim/dwi.nii.gz", "--bvals", "sim/bvals", "--bvecs", "sim/bvecs"];

    let mut args = vec!["correct", "--config", "reg.json", "--output-dir", "corr"];
    args.extend(data);
    ok(&args);
    assert_eq!(read_nifti(&w.join("corr/corrected.nii.gz")).unwrap().len(), 9);
    let trace: serde_json::Value = serde_json::from_slice(&fs::read(w.join("corr/trace.json")).unwrap()).unwrap();
    assert_eq!(trace.as_array().unwrap().len(), 9);

    ok(&[
        "evaluate", "--input", "sim/dwi.nii.gz", "--corrected", "corr/corrected.nii.gz", "--bvals", "sim/bvals",
        "--bvecs", "sim/bvecs", "--mask", "sim/brain_mask.nii.gz", "--transforms", "corr/transforms", "--truth",
        "sim/transforms", "--mae-target", "sim/powder_b2000.nii.gz", "--std-maps", "--output-dir", "eval",
    ]);
    let m: Metrics = serde_json::from_slice(&fs::read(w.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(m.per_shell.keys().cloned().collect::<Vec<_>>(), ["0", "1000", "2000"]);
    assert!(m.per_shell.values().all(|s| s.corrected.is_some()));
    assert_eq!(m.mae.unwrap().per_volume.len(), 9);
    assert_eq!(m.displacement_rmse.unwrap().per_volume.len(), 9);
    assert!(w.join("eval/std_corrected_b2000.nii.gz").exists());

    ok(&[
        "register", "--moving", "sim/dwi.nii.gz", "--moving-index", "1", "--reference", "sim/dwi.nii.gz",
        "--config", "reg.json", "--output-dir", "reg",
    ]);
    for f in ["registered.nii.gz", "transform.json", "trace.json"] {
        assert!(w.join("reg").join(f).exists(), "{f}");
    }

    let mut args = vec!["translate", "--output-dir", "tr"];
    args.extend(data);
    ok(&args);
    assert_eq!(read_nifti(&w.join("tr/translated.nii.gz")).unwrap().len(), 9);
}

#[test]
fn correct_without_b0_is_a_data_error() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let g = Geometry::isotropic([8, 8, 6], 2.0).unwrap();
    let vols: Vec<Volume3> = (0..3).map(|s| Volume3::from_fn(g, 1, |[i, j, k]| ((i + 2 * j + 3 * k + s) % 7) as f64).unwrap()).collect();
    write_nifti(&w.join("dwi.nii"), &vols).unwrap();
    let table = GradientTable::new(vec![1000.0; 3], vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    write_bvals_bvecs(&table, &w.join("bvals"), &w.join("bvecs")).unwrap();
    let o = eddycorr(w, &["correct", "--input", "dwi.nii", "--bvals", "bvals", "--bvecs", "bvecs", "--translator", "identity", "--output-dir", "out"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("b=0"), "{}", text(&o.stderr));
}

#[test]
fn usage_and_validation_errors() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let code = |args: &[&str]| eddycorr(w, args).status.code();
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["simulate", "--no-such-flag"]), Some(1));
    assert_eq!(code(&["simulate", "--ped-axis", "5"]), Some(1));
    assert_eq!(code(&["evaluate", "--config", "x.json", "--input", "a", "--bvals", "b", "--bvecs", "c"]), Some(1));

    let help = eddycorr(w, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let h = text(&help.stdout);
    for sub in ["simulate", "translate", "register", "correct", "evaluate", "gradcheck", "pipeline", "--seed", "--threads", "--output-dir"] {
        assert!(h.contains(sub), "help lacks {sub}");
    }

    fs::write(w.join("bad.json"), r#"{"acquisition": {"n_b0": 1, "shells": [], "ped_axis": 1, "echo_time": 3}}"#).unwrap();
    let o = eddycorr(w, &["simulate", "--config", "bad.json", "--output-dir", "out"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("echo_time"), "{}", text(&o.stderr));
    assert_eq!(code(&["correct", "--input", "missing.nii", "--bvals", "b", "--bvecs", "c"]), Some(2));
}

#[test]
fn gradcheck_reports_and_sets_the_exit_code() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let o = eddycorr(w, &["gradcheck", "--seed", "1", "--configs", "3", "--size", "12", "--step", "1e-7"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stdout));
    assert!(text(&o.stdout).contains("max relative gradient error"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(w.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    // A coarse step cannot meet the tolerance.
    let o = eddycorr(w, &["gradcheck", "--seed", "1", "--configs", "2", "--size", "12", "--step", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_report_is_thread_invariant() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let mut c = PipelineConfig::default();
    c.simulation = small_simulation();
    c.registration = small_registration();
    c.translator = TranslatorChoice::Oracle;
    write_config(w, "p.json", &c);
    for (out, threads) in [("p1", "1"), ("p4", "4")] {
        let o = eddycorr(w, &["pipeline", "--seed", "2", "--threads", threads, "--config", "p.json", "--write-data", "--output-dir", out]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    }
    let (mut a, mut b) = (tree(&w.join("p1")), tree(&w.join("p4")));
    assert!(a.remove(Path::new("timing.json")).is_some());
    b.remove(Path::new("timing.json"));
    assert_eq!(a, b);
    assert!(a.contains_key(Path::new("report.json")) && a.contains_key(Path::new("corrected.nii.gz")));
}
