use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::Value;

use hairmap::pipeline::{self, EditInputs, Model};
use hairmap_core::config::Config;
use hairmap_core::latent::LatentCode;

fn hairmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hairmap"))
        .args(args)
        .env_remove("HAIRMAP_OUTPUT_DIR")
        .env_remove("HAIRMAP_PORT")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    checkpoint: PathBuf,
}

fn write_config(dir: &Path, iterations: u64) -> PathBuf {
    let path = dir.join("config.json");
    let doc = serde_json::json!({
        "seed": 3,
        "output_dir": dir.join("run"),
        "train": { "iterations": iterations, "checkpoint_every": 10 }
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    path
}

fn face(dir: &Path, name: &str, scale: f64) -> PathBuf {
    let config = Config::default();
    let b = config.backends().unwrap();
    let (l, d) = b.latent_shape();
    let w = LatentCode::new(l, d, (0..l * d).map(|i| scale * ((i as f64) * 0.37).sin()).collect()).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, hairmap::png::encode(&b.generator.generate(&w).unwrap()).unwrap()).unwrap();
    path
}

fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 20);
    let out = hairmap(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = PathBuf::from(String::from_utf8(out.stdout).unwrap().lines().last().unwrap());
    assert!(checkpoint.exists());
    Fixture { dir, checkpoint }
}

#[test]
fn train_and_resume() {
    let f = trained();
    let run = f.dir.path().join("run");
    let log = |p: &Path| std::fs::read_to_string(p.join("train_log.jsonl")).unwrap().lines().count();
    assert_eq!(log(&run), 20);
    let config = write_config(f.dir.path(), 30);
    let out = hairmap(&["train", "--config", s(&config), "--resume"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(log(&run), 30);
    assert!(String::from_utf8(out.stdout).unwrap().contains("iterations 21..30"));
}

#[test]
fn train_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hairmap(&["train", "--config", s(&dir.path().join("missing.json"))])), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&hairmap(&["train", "--config", s(&bad)])), 2);
    std::fs::write(&bad, r#"{"train": {"task_probs": [1, 1, 1]}}"#).unwrap();
    assert_eq!(code(&hairmap(&["train", "--config", s(&bad)])), 2);
    assert_eq!(code(&hairmap(&["train"])), 2);
    assert_eq!(code(&hairmap(&["no-such-command"])), 2);
}

#[test]
fn edit_writes_image_and_sidecar() {
    let f = trained();
    let d = f.dir.path();
    let img = face(d, "face.png", 0.8);
    let reference = face(d, "ref.png", -1.1);
    let out = d.join("edits/bobcut.png");
    let res = hairmap(&[
        "edit",
        s(&img),
        "--style-text",
        "bobcut hairstyle",
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let png = std::fs::read(&out).unwrap();
    assert!(png.starts_with(b"\x89PNG"));
    let sidecar: Value = serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["style"], "text:bobcut hairstyle");
    assert_eq!(sidecar["color"], "none");
    assert_eq!(sidecar["untrained"], false);
    assert!(sidecar["breakdown"]["total"].as_f64().unwrap().is_finite());
    assert!(sidecar["metrics"]["ids"].as_f64().is_some());

    // Cross-modal: text hairstyle with a reference color.
    let mixed = d.join("mixed.png");
    let res = hairmap(&[
        "edit",
        s(&img),
        "--style-text",
        "afro hairstyle",
        "--color-ref",
        s(&reference),
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&mixed),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let sidecar: Value = serde_json::from_slice(&std::fs::read(mixed.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["color"], "image:color_ref");
    assert_eq!(sidecar["breakdown"]["color_image"]["active"], true);

    // The library pipeline gives the same bytes and id as the CLI.
    let model = Model::load(&f.checkpoint).unwrap();
    let direct = pipeline::run_edit(
        &model,
        &EditInputs {
            image: std::fs::read(&img).unwrap(),
            style_text: Some("bobcut hairstyle".into()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(direct.png, png);
    let sidecar: Value = serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["edit_id"], direct.edit_id);
}

#[test]
fn edit_usage_errors() {
    let f = trained();
    let d = f.dir.path();
    let img = face(d, "face.png", 0.5);
    let out = d.join("o.png");
    let none = hairmap(&["edit", s(&img), "--checkpoint", s(&f.checkpoint), "--out", s(&out)]);
    assert_eq!(code(&none), 2);
    assert!(!out.exists());
    let missing = hairmap(&[
        "edit",
        s(&d.join("nope.png")),
        "--color-text",
        "red hair",
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&missing), 2);
    let no_ckpt = hairmap(&[
        "edit",
        s(&img),
        "--color-text",
        "red hair",
        "--checkpoint",
        s(&d.join("none.hmck")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&no_ckpt), 2);
    let both = hairmap(&[
        "edit",
        s(&img),
        "--color-text",
        "red hair",
        "--color-ref",
        s(&img),
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&both), 2);
    std::fs::write(d.join("junk.png"), b"not a png").unwrap();
    let junk = hairmap(&[
        "edit",
        s(&d.join("junk.png")),
        "--color-text",
        "red hair",
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&junk), 2);
}

#[test]
fn interpolate_between_sidecars() {
    let f = trained();
    let d = f.dir.path();
    let img = face(d, "face.png", 0.7);
    for (name, flag, text) in [("a.png", "--style-text", "mohawk hairstyle"), ("b.png", "--color-text", "blue hair")] {
        let res = hairmap(&[
            "edit",
            s(&img),
            flag,
            text,
            "--checkpoint",
            s(&f.checkpoint),
            "--out",
            s(&d.join(name)),
        ]);
        assert_eq!(code(&res), 0);
    }
    let frames = d.join("frames");
    let res = hairmap(&[
        "interpolate",
        "--from",
        s(&d.join("a.json")),
        "--to",
        s(&d.join("b.json")),
        "--steps",
        "4",
        "--checkpoint",
        s(&f.checkpoint),
        "--out-dir",
        s(&frames),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(std::fs::read(frames.join("frame-000.png")).unwrap(), std::fs::read(d.join("a.png")).unwrap());
    assert_eq!(std::fs::read(frames.join("frame-003.png")).unwrap(), std::fs::read(d.join("b.png")).unwrap());
    assert!(frames.join("frame-001.png").exists());
    let res = hairmap(&[
        "interpolate",
        "--from",
        s(&d.join("a.json")),
        "--to",
        s(&d.join("b.json")),
        "--steps",
        "1",
        "--checkpoint",
        s(&f.checkpoint),
        "--out-dir",
        s(&frames),
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn eval_reports_metrics() {
    let f = trained();
    let d = f.dir.path();
    face(d, "x.png", 0.9);
    face(d, "y.png", -0.4);
    let manifest = d.join("manifest.json");
    std::fs::write(
        &manifest,
        r#"[{"id": "same", "before": "x.png", "after": "x.png"}, {"before": "x.png", "after": "y.png"}]"#,
    )
    .unwrap();
    let report = d.join("report.json");
    let res = hairmap(&["eval", s(&manifest), "--checkpoint", s(&f.checkpoint), "--out", s(&report)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!((v["items"][0]["ids"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(v["items"][0]["psnr"], 99.0);
    assert_eq!(v["items"][0]["ssim"], 1.0);
    assert_eq!(v["items"][0]["acd"], 0.0);
    let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    let header: Vec<_> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header, ["id", "ids", "psnr", "ssim", "acd"]);
    assert_eq!(csv.lines().count(), 4);
    assert!(String::from_utf8(res.stdout).unwrap().contains("IDS"));

    std::fs::write(&manifest, r#"{"before": "x.png"}"#).unwrap();
    assert_eq!(code(&hairmap(&["eval", s(&manifest), "--checkpoint", s(&f.checkpoint), "--out", s(&report)])), 2);
    std::fs::write(&manifest, r#"[{"before": "x.png", "after": "missing.png"}]"#).unwrap();
    assert_eq!(code(&hairmap(&["eval", s(&manifest), "--checkpoint", s(&f.checkpoint), "--out", s(&report)])), 2);
}

#[test]
fn augment_fills_a_reference_directory() {
    let f = trained();
    let out = f.dir.path().join("pool");
    let res = hairmap(&["augment", "--checkpoint", s(&f.checkpoint), "--out-dir", s(&out), "--count", "3"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(hairmap::png::list_dir(&out).unwrap().len(), 3);

    // The pool can feed a training run.
    let cfg = f.dir.path().join("pool.json");
    let doc = serde_json::json!({
        "output_dir": f.dir.path().join("pool-run"),
        "train": { "iterations": 3, "reference_dir": out }
    });
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let res = hairmap(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn service_and_cli_agree() {
    let f = trained();
    let d = f.dir.path();
    let img = face(d, "face.png", 0.3);
    let out = d.join("cli.png");
    let res = hairmap(&[
        "edit",
        s(&img),
        "--color-text",
        "pink hair",
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0);
    let state = hairmap::service::AppState::with_model(Model::load(&f.checkpoint).unwrap());
    let app = hairmap::service::router(state, None);
    let body = serde_json::json!({ "image": B64.encode(std::fs::read(&img).unwrap()), "color_text": "pink hair" });
    let rt = tokio::runtime::Runtime::new().unwrap();
    let v: Value = rt.block_on(async {
        use http_body_util::BodyExt;
        use tower::ServiceExt;
        let req = axum::http::Request::post("/edit")
            .body(axum::body::Body::from(body.to_string()))
            .unwrap();
        let res = app.oneshot(req).await.unwrap();
        assert_eq!(res.status(), 200);
        serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap()
    });
    assert_eq!(B64.decode(v["image"].as_str().unwrap()).unwrap(), std::fs::read(&out).unwrap());
    let sidecar: Value = serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["edit_id"], v["edit_id"]);
}

#[test]
fn example_config_spells_out_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let c = Config::load(&path).unwrap();
    let mut d = Config::default();
    d.train.task_probs = c.train.task_probs;
    assert_eq!(c, d);
}
