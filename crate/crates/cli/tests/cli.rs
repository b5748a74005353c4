use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_uthp");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8(out.stderr.clone()).unwrap();
    let last = line.lines().last().expect("stderr has an error line");
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

/// Set `UPDATE_GOLDEN=1` to rewrite the stored help texts.
#[test]
fn help_text_matches_golden() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in [
        "",
        "generate",
        "train",
        "evaluate",
        "predict",
        "count-params",
        "grad-check",
    ] {
        let mut args: Vec<&str> = Vec::new();
        if !sub.is_empty() {
            args.push(sub);
        }
        args.push("--help");
        let out = run(&args);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let name = if sub.is_empty() { "uthp" } else { sub };
        let path = dir.join(format!("{name}.help.txt"));
        if update {
            std::fs::write(&path, &text).unwrap();
        } else {
            let want = std::fs::read_to_string(&path)
                .unwrap_or_else(|_| panic!("missing {}", path.display()));
            assert_eq!(text, want, "help for `{name}` changed");
        }
    }
}

#[test]
fn missing_file_is_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "evaluate",
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--data",
        dir.path().join("nope.jsonl").to_str().unwrap(),
        "--out-metrics",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(error_kind(&out), "io");
}

#[test]
fn bad_config_is_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "d_model = 8\nno_such_key = 1\n").unwrap();
    let out = run(&["count-params", "--config", cfg.to_str().unwrap()]);
    let kind = error_kind(&out);
    assert!(kind == "parse" || kind == "config", "{kind}");
    let msg = String::from_utf8(out.stderr).unwrap();
    assert!(msg.contains("no_such_key"));
}

#[test]
fn shared_layer_has_fewer_params_than_stacked() {
    let total = |extra: &[&str]| -> u64 {
        let mut args = vec!["count-params", "--num-types", "5"];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert!(out.status.success());
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["total"].as_u64().unwrap()
    };
    assert!(
        total(&["--no-act", "--iters", "2"])
            < total(&["--no-act", "--iters", "2", "--stacked-layers"])
    );
}
