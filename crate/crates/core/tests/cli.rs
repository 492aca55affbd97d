use std::path::Path;
use std::process::{Command, Output};

fn subgc(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_subgc"));
    cmd.args(args).current_dir(dir).env_remove("SUBGC_SEED");
    if let Some(s) = seed_env {
        cmd.env("SUBGC_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn fixtures(dir: &Path) {
    let o = subgc(dir, &["gen-fixtures", "-o", "fx", "--images", "4"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_and_version_succeed() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&subgc(d.path(), &["--help"], None)), 0);
    assert_eq!(code(&subgc(d.path(), &["--version"], None)), 0);
    assert_eq!(code(&subgc(d.path(), &["caption", "--help"], None)), 0);
}

#[test]
fn usage_errors_exit_64() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&subgc(d.path(), &[], None)), 64);
    assert_eq!(code(&subgc(d.path(), &["frobnicate"], None)), 64);
    assert_eq!(code(&subgc(d.path(), &["sample"], None)), 64);
    assert_eq!(
        code(&subgc(
            d.path(),
            &["sample", "--graph", "g.json", "--num", "many"],
            None
        )),
        64
    );
    assert_eq!(
        code(&subgc(
            d.path(),
            &["caption", "--ckpt", "c.json", "--graph", "g.json", "--beam", "2", "--topk", "3"],
            None
        )),
        64
    );
}

#[test]
fn invalid_inputs_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let looped = r#"{"image_id": "x", "nodes": [{"id": 0, "label": "man", "visual": [0.0]}],
        "edges": [{"id": 0, "src": 0, "dst": 0, "predicate": "near"}]}"#;
    std::fs::write(dir.join("loop.json"), looped).unwrap();
    let o = subgc(dir, &["sample", "--graph", "loop.json"], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("self-loop at edge 0"));

    assert_eq!(
        code(&subgc(dir, &["sample", "--graph", "missing.json"], None)),
        1
    );
    fixtures(dir);
    let g = "fx/graphs/img000.json";
    assert_eq!(
        code(&subgc(dir, &["sample", "--graph", g], Some("not-a-number"))),
        1
    );
    assert_eq!(
        code(&subgc(
            dir,
            &["caption", "--graph", g, "--ckpt", "nope.json"],
            None
        )),
        1
    );
    assert_eq!(
        code(&subgc(
            dir,
            &[
                "eval",
                "--pred",
                g,
                "--refs",
                "fx/captions.json",
                "--metrics",
                "cider"
            ],
            None
        )),
        1
    );
}

#[test]
fn gradcheck_failure_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let ok = subgc(d.path(), &["gradcheck", "--seed", "1"], None);
    assert_eq!(code(&ok), 0);
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["passed"], true);
    let strict = subgc(d.path(), &["gradcheck", "--seed", "1", "--tol", "0"], None);
    assert_eq!(code(&strict), 2);
}

#[test]
fn seed_falls_back_to_environment() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    fixtures(dir);
    let g = "fx/graphs/img001.json";
    let flag = subgc(
        dir,
        &["sample", "--graph", g, "--num", "30", "--seed", "42"],
        None,
    );
    let env = subgc(dir, &["sample", "--graph", g, "--num", "30"], Some("42"));
    let other = subgc(
        dir,
        &["sample", "--graph", g, "--num", "30", "--seed", "43"],
        Some("42"),
    );
    assert_eq!(flag.stdout, env.stdout);
    assert_ne!(flag.stdout, other.stdout);
}

#[test]
fn train_decoder_rejects_mismatched_config() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    fixtures(dir);
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"sampling": {"num": 50}, "train": {"sgpn_steps": 2}}"#,
    )
    .unwrap();
    std::fs::write(dir.join("wide.json"), r#"{"dims": {"d_f": 12}}"#).unwrap();
    let base = ["--graphs", "fx/graphs", "--captions", "fx/captions.json"];
    let mut args = vec!["train-sgpn"];
    args.extend(base);
    args.extend(["--config", "cfg.json", "-o", "s.json"]);
    assert_eq!(code(&subgc(dir, &args, None)), 0);

    let mut args = vec!["train-decoder"];
    args.extend(base);
    args.extend(["--ckpt", "s.json", "--config", "wide.json", "-o", "d.json"]);
    let o = subgc(dir, &args, None);
    assert_eq!(code(&o), 1);
    assert!(!dir.join("d.json").exists());

    // no decoder yet, so captioning is a checkpoint mismatch rather than a crash
    let o = subgc(
        dir,
        &[
            "caption",
            "--graph",
            "fx/graphs/img000.json",
            "--ckpt",
            "s.json",
        ],
        None,
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn match_reports_reference_subgraph() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    fixtures(dir);
    let caps: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("fx/captions.json")).unwrap())
            .unwrap();
    let caption = caps[0]["captions"][0].as_str().unwrap();
    let o = subgc(
        dir,
        &[
            "match",
            "--graph",
            "fx/graphs/img000.json",
            "--lexicon",
            "fx/lexicon.json",
            "--sim",
            "fx/sim.json",
            "--caption",
            caption,
        ],
        None,
    );
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["nouns"].as_array().unwrap().len(), 2);
    assert_eq!(v["matched"].as_array().unwrap().len(), 2);
    assert_eq!(v["reference"]["edges"].as_array().unwrap().len(), 1);
}
