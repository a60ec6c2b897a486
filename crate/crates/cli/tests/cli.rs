use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn textcolor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textcolor"))
        .args(args)
        .env_remove("TEXTCOLOR_MANIFEST")
        .env_remove("TEXTCOLOR_RUN_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[scaled]
image_size = 16
base_filters = 4
growth_channels = 4
text_hidden = 8

[train]
batch_size = 4
iterations = 4
checkpoint_every = 2
"#;

/// Synthesises a 16px corpus with a test split and trains a few iterations on it.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let out = textcolor(&["synth", "--n", "8", "--test-n", "4", "--seed", "1", "--size", "16", "--out", s(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    let out = textcolor(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&data.join("manifest.toml")),
        "--run-dir",
        s(&run),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    (data, run)
}

fn final_checkpoint(run: &Path) -> PathBuf {
    let mut cks: Vec<PathBuf> = std::fs::read_dir(run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("ckpt-"))
        .collect();
    cks.sort();
    cks.pop().unwrap()
}

#[test]
fn synth_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = textcolor(&["synth", "--n", "100", "--seed", "3", "--size", "32", "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let pngs = |d: &Path| {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(pngs(&a).len(), 100);
    let records = std::fs::read_to_string(a.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 100);
    assert!(records.lines().all(|l| l.contains("\"text\":\"a ")));
    for (x, y) in pngs(&a).iter().zip(pngs(&b)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert_eq!(records, std::fs::read_to_string(b.join("records.jsonl")).unwrap());
}

#[test]
fn train_colorize_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path());
    let ck = final_checkpoint(&run);
    assert!(ck.ends_with("ckpt-00000004.safetensors"), "{}", ck.display());
    assert!(run.join("metrics.tsv").is_file());
    assert!(run.join("config.toml").is_file());

    // Without --resume an existing run directory is refused.
    let cfg = dir.path().join("run.toml");
    let manifest = data.join("manifest.toml");
    let again = textcolor(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--run-dir", s(&run)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--resume"));
    let resumed = textcolor(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest), "--run-dir", s(&run), "--resume", "--iterations", "6",
    ]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    let ck = final_checkpoint(&run);
    assert!(ck.ends_with("ckpt-00000006.safetensors"));

    let image = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .unwrap();
    let (o1, o2) = (dir.path().join("o1.png"), dir.path().join("out/o2.png"));
    for o in [&o1, &o2] {
        let out = textcolor(&["colorize", "--image", s(&image), "--text", "a red circle", "--checkpoint", s(&ck), "--out", s(o)]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());

    let missing = textcolor(&[
        "colorize", "--image", s(&image), "--text", "red", "--checkpoint", s(&dir.path().join("nope.safetensors")), "--out",
        s(&o1),
    ]);
    assert_eq!(missing.status.code(), Some(3));

    let report = dir.path().join("report");
    let out = textcolor(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = std::fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(table.contains("(stub)"), "{table}");
    assert!(table.contains("samples: 4"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    for key in ["ssim", "psnr"] {
        assert!(!json["mean"][key].is_null(), "{json}");
    }
    assert!(!json["mean"]["perceptual"]["identity-stub"].is_null(), "{json}");

    // A corpus without a test split has nothing to score.
    let empty = dir.path().join("empty");
    let o = textcolor(&["synth", "--n", "2", "--size", "16", "--out", s(&empty)]);
    assert!(o.status.success());
    let out = textcolor(&["eval", "--checkpoint", s(&ck), "--manifest", s(&empty.join("manifest.toml")), "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn ablate_text_flag_reaches_the_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(textcolor(&["synth", "--n", "4", "--size", "16", "--out", s(&data)]).status.success());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY.replace("iterations = 4", "iterations = 2")).unwrap();
    let run = dir.path().join("run");
    let out = textcolor(&[
        "train", "--config", s(&cfg), "--manifest", s(&data.join("manifest.toml")), "--run-dir", s(&run), "--ablate-text",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let recorded = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(recorded.contains("ablate_text = true"), "{recorded}");
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = textcolor(&["train", "--config", s(&cfg), "--manifest", "m.toml", "--run-dir", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = textcolor(&["train", "--iterations", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("manifest"));

    assert_eq!(textcolor(&["colorize"]).status.code(), Some(2));
    assert_eq!(textcolor(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        (
            "train",
            &[
                "--config", "--manifest", "--run-dir", "--iterations", "--batch-size", "--lr", "--seed", "--data-seed",
                "--checkpoint-every", "--ablate-text", "--resume",
            ],
        ),
        ("colorize", &["--image", "--text", "--checkpoint", "--out"]),
        (
            "eval",
            &["--checkpoint", "--manifest", "--report", "--split", "--provider", "--lpips-weights", "--lexicon", "--classes", "--ablate-text"],
        ),
        ("synth", &["--n", "--seed", "--out", "--size", "--palette", "--test-n"]),
        ("serve", &["--config", "--host", "--port", "--checkpoint-dir"]),
    ];
    for (cmd, flags) in cases {
        let out = textcolor(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let help = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}:\n{help}");
        }
    }
}

#[test]
fn serve_binds_the_configured_port() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("service.toml");
    std::fs::write(&cfg, "host = \"127.0.0.1\"\nport = 1\n").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_textcolor"))
        .args(["serve", "--config", s(&cfg), "--port", &port.to_string()])
        .env_remove("TEXTCOLOR_PORT")
        .env_remove("TEXTCOLOR_HOST")
        .env_remove("TEXTCOLOR_CHECKPOINT_DIR")
        .spawn()
        .unwrap();
    let mut ok = false;
    for _ in 0..200 {
        if std::net::TcpStream::connect(("127.0.0.1", port)).is_ok() {
            ok = true;
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(25));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(ok, "serve did not bind {port}");
}
