use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use localsdf::field::{domain_downsample, BasisField};
use localsdf::fit::{self, FitConfig};
use localsdf::geom::{sample_training_set, SceneNode, SceneSpec};
use localsdf::io::{parse_obj, samples_from_json};
use localsdf::metrics::{evaluate, EvalProtocol};
use localsdf::objective::center_latent_mask;
use serde_json::{json, Value};
use tempfile::TempDir;

fn localsdf(args: &[&str]) -> Output {
    localsdf_env(args, &[])
}

fn localsdf_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_localsdf"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("LOCALSDF_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("sphere.json"), SceneSpec::sphere(0.4).unwrap().to_json()).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn fit_config(&self) -> FitConfig {
        serde_json::from_value(json!({
            "n_bases": 4,
            "n_init": 8,
            "steps": 40,
            "phase2_steps": 20,
            "batch_size": 256,
            "seed": 3,
            "decoder": {"latent_dim": 4, "hidden": [8, 8]},
            "sampling": {"n_near": 1000, "n_uniform": 200, "n_surface": 512}
        }))
        .unwrap()
    }

    fn write_run(&self, name: &str, fit: &FitConfig, checkpoint: &str) -> PathBuf {
        let run = json!({
            "version": 1,
            "scene": "sphere.json",
            "fit": fit,
            "checkpoint": checkpoint,
            "report": format!("{checkpoint}.report.json"),
            "kept": format!("{checkpoint}.kept.json"),
        });
        let p = self.path(name);
        std::fs::write(&p, run.to_string()).unwrap();
        p
    }

    fn fitted(&self, checkpoint: &str) -> PathBuf {
        let run = self.write_run("run.json", &self.fit_config(), checkpoint);
        let out = localsdf(&["fit", "--config", s(&run)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        self.path(checkpoint)
    }
}

fn load_field(p: &Path) -> BasisField {
    BasisField::from_checkpoint_json(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn sample_writes_requested_counts_reproducibly() {
    let f = Fixture::new();
    let scene = f.path("sphere.json");
    let (a, b) = (f.path("a.json"), f.path("b.json"));
    for out in [&a, &b] {
        let r = localsdf(&["sample", "--scene", s(&scene), "--near", "300", "--uniform", "50", "--seed", "9", "--out", s(out)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        assert_eq!(stdout_json(&r)["version"], 1);
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let set = samples_from_json(&text).unwrap();
    assert_eq!(set.len(), 350);
    let lib = sample_training_set(&SceneSpec::sphere(0.4).unwrap(), 300, 50, [0.01, 0.003], 9).unwrap();
    assert_eq!(set, lib);
}

#[test]
fn missing_input_exits_1_naming_the_path() {
    let f = Fixture::new();
    let missing = f.path("no_such_scene.json");
    let r = localsdf(&["sample", "--scene", s(&missing), "--out", s(&f.path("x.json"))]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("no_such_scene.json"), "{}", stderr(&r));
    let r = localsdf(&["fit", "--config", s(&f.path("no_such_run.json"))]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("no_such_run.json"));
}

#[test]
fn bad_scene_exits_1() {
    let f = Fixture::new();
    let scene = f.path("bad.json");
    std::fs::write(&scene, r#"{"version":1,"root":{"type":"sphere","radius":-1}}"#).unwrap();
    let r = localsdf(&["sample", "--scene", s(&scene), "--out", s(&f.path("x.json"))]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("bad.json"));
}

#[test]
fn fit_matches_library_and_is_reproducible() {
    let f = Fixture::new();
    let ck = f.fitted("a.ckpt.json");
    let first = std::fs::read(&ck).unwrap();
    let report = std::fs::read(f.path("a.ckpt.json.report.json")).unwrap();
    f.fitted("a.ckpt.json");
    assert_eq!(first, std::fs::read(&ck).unwrap());
    assert_eq!(report, std::fs::read(f.path("a.ckpt.json.report.json")).unwrap());

    let (field, kept, lib_report) = fit::compact_fit(&SceneSpec::sphere(0.4).unwrap(), &f.fit_config()).unwrap();
    assert_eq!(String::from_utf8(first).unwrap(), field.to_checkpoint_json());
    assert_eq!(String::from_utf8(report).unwrap(), lib_report.to_json());
    let kept_doc: Value = serde_json::from_str(&std::fs::read_to_string(f.path("a.ckpt.json.kept.json")).unwrap()).unwrap();
    assert_eq!(kept_doc["version"], 1);
    assert_eq!(kept_doc["n_before"], 8);
    assert_eq!(kept_doc["kept"], json!(kept));
}

#[test]
fn fit_without_compaction_matches_library() {
    let f = Fixture::new();
    let mut config = f.fit_config();
    config.n_init = None;
    let run = f.write_run("plain.json", &config, "plain.ckpt.json");
    let r = localsdf(&["fit", "--config", s(&run)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(stdout_json(&r)["kept"], Value::Null);
    let (field, _) = fit::fit_scene(&SceneSpec::sphere(0.4).unwrap(), &config).unwrap();
    assert_eq!(std::fs::read_to_string(f.path("plain.ckpt.json")).unwrap(), field.to_checkpoint_json());
}

#[test]
fn fit_output_does_not_depend_on_thread_count() {
    let f = Fixture::new();
    let run = f.write_run("run.json", &f.fit_config(), "t.json");
    let mut outputs = vec![];
    for threads in ["1", "3"] {
        let r = localsdf_env(&["fit", "--config", s(&run)], &[("LOCALSDF_THREADS", threads)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        outputs.push(std::fs::read(f.path("t.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let r = localsdf_env(&["fit", "--config", s(&run)], &[("LOCALSDF_THREADS", "zero")]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("LOCALSDF_THREADS"));
}

#[test]
fn fit_non_finite_exits_2_with_step() {
    let f = Fixture::new();
    let mut config = f.fit_config();
    config.learning_rate = 1e200;
    let run = f.write_run("bad.json", &config, "bad.ckpt.json");
    let r = localsdf(&["fit", "--config", s(&run)]);
    assert_eq!(code(&r), 2, "{}", stderr(&r));
    assert!(stderr(&r).contains("at step"), "{}", stderr(&r));
    assert!(!f.path("bad.ckpt.json").exists());
}

#[test]
fn fit_invalid_config_exits_1() {
    let f = Fixture::new();
    let mut config = f.fit_config();
    config.steps = 0;
    let run = f.write_run("zero.json", &config, "z.json");
    assert_eq!(code(&localsdf(&["fit", "--config", s(&run)])), 1);

    let run = f.path("v.json");
    std::fs::write(&run, r#"{"version":5,"scene":"sphere.json","checkpoint":"c.json"}"#).unwrap();
    let r = localsdf(&["fit", "--config", s(&run)]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("version 5"));
}

#[test]
fn downsample_wraps_library() {
    let f = Fixture::new();
    let ck = f.fitted("c.json");
    let field = load_field(&ck);
    let out = f.path("d.json");
    let kept_out = f.path("k.json");
    let r = localsdf(&["downsample", "--checkpoint", s(&ck), "--keep", "2", "--out", s(&out), "--kept-out", s(&kept_out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let kept = domain_downsample(&field, 2).unwrap();
    assert_eq!(stdout_json(&r)["kept"], json!(kept));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&kept_out).unwrap()).unwrap();
    assert_eq!(doc["kept"], json!(kept));
    assert_eq!(load_field(&out), field.select(&kept).unwrap());

    let r = localsdf(&["downsample", "--checkpoint", s(&ck), "--keep", "4", "--out", s(&out)]);
    assert_eq!(code(&r), 0);
    assert_eq!(load_field(&out).bases(), field.bases());

    for keep in ["0", "5"] {
        let r = localsdf(&["downsample", "--checkpoint", s(&ck), "--keep", keep, "--out", s(&out)]);
        assert_eq!(code(&r), 1, "keep {keep}");
    }
}

#[test]
fn refine_moves_only_centers_and_latents() {
    let f = Fixture::new();
    let ck = f.fitted("c.json");
    let config = f.path("refine.json");
    std::fs::write(
        &config,
        json!({
            "version": 1,
            "refine": {"iterations": 60, "batch_size": null, "adjacency_per_basis": 32},
            "n_surface": 512,
            "n_positive": 512
        })
        .to_string(),
    )
    .unwrap();
    let out = f.path("r.json");
    let report = f.path("rr.json");
    let r = localsdf(&[
        "refine", "--checkpoint", s(&ck), "--scene", s(&f.path("sphere.json")), "--config", s(&config), "--out", s(&out),
        "--report", s(&report),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let before = load_field(&ck);
    let after = load_field(&out);
    let mask = center_latent_mask(&before);
    let (pb, pa) = (before.param_values(), after.param_values());
    for i in 0..pb.len() {
        if !mask[i] {
            assert_eq!(pb[i].to_bits(), pa[i].to_bits(), "frozen coordinate {i} changed");
        }
    }
    assert!((0..pb.len()).any(|i| mask[i] && pb[i] != pa[i]));
    let summary = stdout_json(&r);
    let (initial, last) = (summary["initial_loss"].as_f64().unwrap(), summary["final_loss"].as_f64().unwrap());
    assert!(last <= initial, "{last} > {initial}");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["trace"]["total"].as_array().unwrap().len(), 60);
}

#[test]
fn refine_defaults_need_no_flags() {
    let f = Fixture::new();
    let ck = f.fitted("c.json");
    let out = f.path("r.json");
    let r = localsdf(&["refine", "--checkpoint", s(&ck), "--scene", s(&f.path("sphere.json")), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(stdout_json(&r)["iterations"], 1000);
    assert_eq!(load_field(&out).len(), 4);
}

#[test]
fn mesh_round_trips_and_rejects_coarse_grids() {
    let f = Fixture::new();
    let scene = f.path("sphere.json");
    let obj = f.path("m.obj");
    let r = localsdf(&["mesh", "--scene", s(&scene), "--resolution", "32", "--out", s(&obj)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let mesh = parse_obj(&std::fs::read_to_string(&obj).unwrap()).unwrap();
    assert!(mesh.is_closed());
    assert_eq!(mesh.euler_characteristic(), 2);
    assert_eq!(stdout_json(&r)["triangles"], mesh.triangles.len());

    let ply = f.path("m.ply");
    let r = localsdf(&["mesh", "--scene", s(&scene), "--resolution", "16", "--out", s(&ply)]);
    assert_eq!(code(&r), 0);
    assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply\nformat ascii 1.0\n"));

    let r = localsdf(&["mesh", "--scene", s(&scene), "--resolution", "7", "--out", s(&obj)]);
    assert_eq!(code(&r), 1);

    let ck = f.fitted("c.json");
    let r = localsdf(&["mesh", "--checkpoint", s(&ck), "--resolution", "16", "--out", s(&obj)]);
    assert_eq!(code(&r), 0);
}

#[test]
fn mesh_of_empty_field_is_empty_with_warning() {
    let f = Fixture::new();
    // smaller than a grid cell and away from every grid corner
    let tiny = SceneSpec::new(SceneNode::sphere(0.01).at([0.05, 0.05, 0.05])).unwrap();
    let scene = f.path("tiny.json");
    std::fs::write(&scene, tiny.to_json()).unwrap();
    let obj = f.path("e.obj");
    let r = localsdf_env(&["mesh", "--scene", s(&scene), "--resolution", "8", "--out", s(&obj)], &[("RUST_LOG", "warn")]);
    assert_eq!(code(&r), 0);
    assert_eq!(std::fs::read_to_string(&obj).unwrap(), "");
    assert!(stderr(&r).contains("empty mesh"), "{}", stderr(&r));
}

fn small_protocol(f: &Fixture) -> PathBuf {
    let p = f.path("protocol.json");
    std::fs::write(
        &p,
        json!({"version": 1, "n_iou": 20000, "n_surface": 50000, "resolution": 48, "seed": 4}).to_string(),
    )
    .unwrap();
    p
}

#[test]
fn eval_self_consistency_and_report_fields() {
    let f = Fixture::new();
    let scene = f.path("sphere.json");
    let protocol = small_protocol(&f);
    let out = f.path("metrics.json");
    let r = localsdf(&[
        "eval", "--candidate-scene", s(&scene), "--scene", s(&scene), "--protocol", s(&protocol), "--out", s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let v = stdout_json(&r);
    assert!(v["iou"].as_f64().unwrap() >= 0.999);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v, file);
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["chamfer_l2", "f_score", "iou", "n_iou", "n_surface", "resolution", "seed", "tau", "version"]
    );
    assert_eq!(v["version"], 1);
    assert_eq!(v["seed"], 4);
}

#[test]
fn eval_matches_library() {
    let f = Fixture::new();
    let ck = f.fitted("c.json");
    let protocol = small_protocol(&f);
    let r = localsdf(&["eval", "--checkpoint", s(&ck), "--scene", s(&f.path("sphere.json")), "--protocol", s(&protocol)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let p = EvalProtocol {
        n_iou: 20000,
        n_surface: 50000,
        resolution: 48,
        seed: 4,
        ..Default::default()
    };
    let lib = evaluate(&load_field(&ck), &SceneSpec::sphere(0.4).unwrap(), &p).unwrap();
    assert_eq!(stdout_json(&r), serde_json::to_value(&lib).unwrap());
}

#[test]
fn eval_rejects_unknown_checkpoint_version() {
    let f = Fixture::new();
    let ck = f.fitted("c.json");
    let text = std::fs::read_to_string(&ck).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["version"], 1);
    let mut bumped = v.clone();
    bumped["version"] = json!(42);
    let bad = f.path("bad.json");
    std::fs::write(&bad, bumped.to_string()).unwrap();
    let r = localsdf(&["eval", "--checkpoint", s(&bad), "--scene", s(&f.path("sphere.json"))]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("version 42"), "{}", stderr(&r));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let run = || localsdf(&["gradcheck", "--fixtures", "6", "--seed", "2"]);
    let a = run();
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let v = stdout_json(&a);
    assert_eq!(v["passed"], true);
    assert_eq!(v["losses"].as_array().unwrap().len(), localsdf::gradcheck::LOSSES.len());
    assert_eq!(a.stdout, run().stdout);
}

#[test]
fn gradcheck_corrupted_gradient_exits_3() {
    let f = Fixture::new();
    let out = f.path("gc.json");
    let r = localsdf(&["gradcheck", "--fixtures", "4", "--corrupt", "pos", "--out", s(&out)]);
    assert_eq!(code(&r), 3, "{}", stderr(&r));
    assert!(stderr(&r).contains("pos"));
    let v = stdout_json(&r);
    assert_eq!(v["passed"], false);
    let failed: Vec<&str> = v["losses"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| l["passed"] == false)
        .map(|l| l["loss"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["pos"]);
    assert!(out.exists());

    let r = localsdf(&["gradcheck", "--fixtures", "2", "--corrupt", "nonsense"]);
    assert_eq!(code(&r), 1);
}
