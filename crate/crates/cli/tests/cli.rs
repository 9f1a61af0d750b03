use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plabel_cli::RunManifest;
use plabel_core::eval::EvalReport;
use plabel_core::model::io::{read_frame, read_labels, write_scores, ScoreMatrix};
use plabel_core::model::PipelineConfig;

fn plabel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plabel"))
        .args(args)
        .env_remove("ALISE_WORKERS")
        .output()
        .expect("spawn plabel")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(root: &Path, seed: u64) -> PathBuf {
    let data = root.join("data");
    let o = plabel(&["synth", "--seed", &seed.to_string(), "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

fn upg(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let (frames, dets) = (data.join("frames"), data.join("detections"));
    let mut args = vec!["upg", "--frames", p(&frames), "--detections", p(&dets), "--out", p(out)];
    args.extend_from_slice(extra);
    plabel(&args)
}

fn eval_report(pred: &Path, gt: &Path, out: &Path) -> EvalReport {
    let o = plabel(&["eval", "--pred", p(pred), "--gt", p(gt), "--out", p(out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect()
}

fn write_config(path: &Path, edit: impl FnOnce(&mut PipelineConfig)) {
    let mut cfg = PipelineConfig::default();
    edit(&mut cfg);
    fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn zero_noise_upg_matches_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let o = upg(&data, &dir.path().join("upg"), &["--workers", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = eval_report(&dir.path().join("upg/labels"), &data.join("gt"), &dir.path().join("eval"));
    assert_eq!(r.ap.map, 1.0);
    assert_eq!(r.miou * 100.0, 100.0);
    assert_eq!(r.label_accuracy, 1.0);
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("upg/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "upg");
    assert_eq!(manifest.outputs.len(), 5);
    assert!(manifest.timings_ms.contains_key("generate"));
}

#[test]
fn empty_detections_give_background() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1);
    fs::remove_dir_all(data.join("detections")).unwrap();
    fs::create_dir(data.join("detections")).unwrap();
    let out = dir.path().join("upg");
    let o = upg(&data, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (name, _) in files(&out.join("labels")) {
        let l = read_labels(&out.join("labels").join(name)).unwrap();
        assert_eq!(l.labeled_count(), 0);
    }
    let r = eval_report(&out.join("labels"), &data.join("gt"), &dir.path().join("eval"));
    assert_eq!(r.ap.map, 0.0);
}

#[test]
fn corrupt_frame_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1);
    let bad = data.join("frames/frame_0002.alf");
    fs::write(&bad, b"ALF1 garbage").unwrap();
    let o = upg(&data, &dir.path().join("upg"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("frame_0002.alf"), "{}", stderr(&o));
}

#[test]
fn refine_without_neighbors_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2);
    let upg_out = dir.path().join("upg");
    assert!(upg(&data, &upg_out, &[]).status.success());
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, |c| c.ofr_frames = 0);
    let out = dir.path().join("refined");
    let o = plabel(&[
        "refine",
        "--config",
        p(&cfg),
        "--labels",
        p(&upg_out.join("labels")),
        "--frames",
        p(&data.join("frames")),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files(&out.join("labels")), files(&upg_out.join("labels")));
}

#[test]
fn online_refine_with_uniform_scores_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4);
    let upg_out = dir.path().join("upg");
    assert!(upg(&data, &upg_out, &[]).status.success());
    let scores = dir.path().join("scores");
    fs::create_dir(&scores).unwrap();
    for (name, _) in files(&data.join("frames")) {
        let frame = read_frame(&data.join("frames").join(&name)).unwrap();
        let n = frame.points.len();
        let m = ScoreMatrix::new(n, 3, vec![1.0 / 3.0; n * 3]).unwrap();
        write_scores(&scores.join(format!("{}.als", frame.frame_id)), &m).unwrap();
    }
    let out = dir.path().join("online");
    let (labels, frames) = (upg_out.join("labels"), data.join("frames"));
    let args = [
        "refine",
        "--mode",
        "online",
        "--labels",
        p(&labels),
        "--frames",
        p(&frames),
        "--out",
        p(&out),
    ];
    let missing = plabel(&args);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("--scores"));

    let mut with_scores = args.to_vec();
    with_scores.extend(["--scores", p(&scores)]);
    let o = plabel(&with_scores);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files(&out.join("labels")), files(&upg_out.join("labels")));
}

#[test]
fn eval_rejects_mismatched_frame_sets() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let pred = dir.path().join("pred");
    fs::create_dir(&pred).unwrap();
    fs::copy(data.join("gt/frame_0000.all"), pred.join("frame_0000.all")).unwrap();
    let o = plabel(&["eval", "--pred", p(&pred), "--gt", p(&data.join("gt"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("frame_0001"));
}

#[test]
fn eval_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let o = plabel(&["eval", "--pred", p(&data.join("gt")), "--gt", p(&data.join("gt"))]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().nth(1).unwrap().contains("100.00"));
    assert!(table.contains("cyclist"));
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (synth(a.path(), 7), synth(b.path(), 7));
    for sub in ["frames", "detections", "gt"] {
        let fa = files(&da.join(sub));
        assert_eq!(fa.len(), 5);
        assert_eq!(fa, files(&db.join(sub)), "{sub}");
    }
    let manifest = |d: &Path| -> RunManifest { serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap() };
    assert_eq!(manifest(&da).config_hash, manifest(&db).config_hash);
}

#[test]
fn synth_with_zero_frames_writes_empty_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"num_frames": 0}"#).unwrap();
    let out = dir.path().join("data");
    let o = plabel(&["synth", "--spec", p(&spec), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for sub in ["frames", "detections", "gt"] {
        assert!(files(&out.join(sub)).is_empty());
    }
}

#[test]
fn malformed_spec_fails() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"num_frames": "five"}"#).unwrap();
    let o = plabel(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("spec.json"));
}

#[test]
fn losses_check_reports_every_kernel() {
    let o = plabel(&["losses-check", "--trials", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["kernels"].as_array().unwrap().len(), 7);
    assert_eq!(report["passed"], true);

    let one = plabel(&["losses-check", "--trials", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&one.stdout).unwrap();
    assert!(report["kernels"].as_array().unwrap().iter().all(|k| k["trials"] == 1));
    assert_eq!(plabel(&["losses-check", "--trials", "0"]).status.code(), Some(1));
}

#[test]
fn injected_sign_flip_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = plabel(&[
        "losses-check",
        "--trials",
        "3",
        "--inject-sign-flip",
        "cross_modal_distill",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cross_modal_distill"));
    assert!(dir.path().join("gradients.json").exists());
}

#[test]
fn config_hash_tracks_content() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 8);
    let run = |name: &str, edit: fn(&mut PipelineConfig)| {
        let cfg = dir.path().join(format!("{name}.json"));
        write_config(&cfg, edit);
        let out = dir.path().join(name);
        assert!(upg(&data, &out, &["--config", p(&cfg)]).status.success());
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m.config_hash
    };
    let a = run("a", |_| {});
    let b = run("b", |_| {});
    let c = run("c", |c| c.voxel_size = 0.25);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = Command::new(env!("CARGO_BIN_EXE_plabel"))
        .args(["synth"])
        .env("ALISE_OUT", &out)
        .env("ALISE_SEED", "11")
        .env("ALISE_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files(&out.join("frames")).len(), 5);
}

#[test]
fn invalid_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 9);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"voxel_size": -1}"#).unwrap();
    let o = upg(&data, &dir.path().join("u"), &["--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}
