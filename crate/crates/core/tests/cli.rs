use std::path::Path;
use std::process::{Command, Output};

use prism::{save_projection, ProjectionMatrix};

fn prism(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PRISM_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = prism(args, cwd);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", "bundle"], dir);
}

#[test]
fn synth_classify_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    ok(
        &[
            "classify",
            "--images",
            "bundle/images.embf",
            "--prompts",
            "bundle/class_prompts.embf",
            "--out",
            "v.csv",
        ],
        d,
    );
    let out = ok(&["eval", "--preds", "v.csv", "--out", "v.json"], d);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(
        table.contains("WG     36.0%") && table.contains("Acc    93.6%"),
        "{table}"
    );

    ok(
        &[
            "ortho",
            "--attributes",
            "bundle/attributes.embf",
            "--out",
            "mini.prismp",
        ],
        d,
    );
    ok(
        &[
            "train",
            "--descriptions",
            "bundle/descriptions.embf",
            "--out",
            "p.prismp",
            "--history",
            "h.csv",
        ],
        d,
    );
    let history = std::fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("step,intra_class,inter_class,total"));
    for proj in ["mini.prismp", "p.prismp"] {
        ok(
            &[
                "classify",
                "--images",
                "bundle/images.embf",
                "--prompts",
                "bundle/class_prompts.embf",
                "--projection",
                proj,
                "--out",
                "t.csv",
            ],
            d,
        );
        ok(
            &[
                "eval",
                "--preds",
                "t.csv",
                "--baseline",
                "v.json",
                "--out",
                "t.json",
            ],
            d,
        );
        let metrics: serde_json::Value =
            serde_json::from_slice(&std::fs::read(d.join("t.json")).unwrap()).unwrap();
        for key in ["worst_group", "accuracy", "gap", "delta_wg", "delta_acc"] {
            assert!(metrics[key].is_number(), "{proj}: {key} missing in {metrics}");
        }
        assert!(metrics["delta_wg"].as_f64().unwrap() > 0.10);
    }
}

#[test]
fn identity_projection_gives_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    save_projection(&ProjectionMatrix::identity(32), d.join("id.prismp")).unwrap();
    let base = [
        "classify",
        "--images",
        "bundle/images.embf",
        "--prompts",
        "bundle/class_prompts.embf",
    ];
    ok(&[&base[..], &["--out", "a.csv"]].concat(), d);
    ok(
        &[&base[..], &["--projection", "id.prismp", "--out", "b.csv"]].concat(),
        d,
    );
    assert_eq!(
        std::fs::read(d.join("a.csv")).unwrap(),
        std::fs::read(d.join("b.csv")).unwrap()
    );
}

#[test]
fn validate_accepts_kit_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    ok(
        &[
            "ortho",
            "--attributes",
            "bundle/attributes.embf",
            "--out",
            "mini.prismp",
        ],
        d,
    );
    ok(
        &[
            "classify",
            "--images",
            "bundle/images.embf",
            "--prompts",
            "bundle/class_prompts.embf",
            "--out",
            "v.csv",
        ],
        d,
    );
    ok(&["eval", "--preds", "v.csv", "--out", "v.json"], d);
    for file in [
        "bundle/images.embf",
        "bundle/class_prompts.embf",
        "bundle/descriptions.embf",
        "bundle/attributes.embf",
        "mini.prismp",
        "v.csv",
        "v.json",
    ] {
        ok(&["validate", "--set", file], d);
    }
    std::fs::write(
        d.join("fixture.csv"),
        "id,class,attribute,template,v0,v1\nx,cat,,,0.6,0.8\n",
    )
    .unwrap();
    ok(&["validate", "--set", "fixture.csv", "--kind", "class_prompt"], d);
}

#[test]
fn config_file_overlay_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    std::fs::write(
        d.join("c.json"),
        r#"{"margin": 0.3, "epochs": 2, "descriptions": "bundle/descriptions.embf"}"#,
    )
    .unwrap();
    let out = ok(
        &[
            "train", "--config", "c.json", "--epochs", "4", "--out", "p.prismp",
        ],
        d,
    );
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("\"margin\":0.3") && err.contains("\"epochs\":4"),
        "{err}"
    );

    std::fs::write(d.join("bad.json"), r#"{"margin": 0.3, "marginn": 1}"#).unwrap();
    let out = prism(&["train", "--config", "bad.json", "--out", "p.prismp"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    assert_eq!(prism(&["--help"], d).status.code(), Some(0));
    assert_eq!(prism(&["train", "--unknown-flag"], d).status.code(), Some(1));
    assert_eq!(prism(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(
        prism(&["train", "--descriptions", "bundle/descriptions.embf"], d)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        prism(
            &[
                "train",
                "--descriptions",
                "bundle/descriptions.embf",
                "--margin",
                "1.5",
                "--out",
                "p"
            ],
            d
        )
        .status
        .code(),
        Some(1)
    );

    let missing = prism(&["validate", "--set", "nope.embf"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.embf"));

    let wrong_kind = prism(
        &["ortho", "--attributes", "bundle/images.embf", "--out", "x.prismp"],
        d,
    );
    assert_eq!(wrong_kind.status.code(), Some(2));

    std::fs::write(
        d.join("nan.csv"),
        "id,class,attribute,template,v0,v1\nr0,c,,,1,0\nr1,d,,,NaN,1\n",
    )
    .unwrap();
    let nan = prism(&["validate", "--set", "nan.csv", "--kind", "class_prompt"], d);
    assert_eq!(nan.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&nan.stderr).contains("r1"));

    let diverged = prism(
        &[
            "train",
            "--descriptions",
            "bundle/descriptions.embf",
            "--lr",
            "1e308",
            "--epochs",
            "3",
            "--out",
            "z",
        ],
        d,
    );
    assert_eq!(
        diverged.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&diverged.stderr)
    );
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    ok(
        &[
            "sweep",
            "--param",
            "margin",
            "--values",
            "0.2,0.4,0.6,0.8",
            "--bundle",
            "bundle",
            "--out",
            "m.csv",
        ],
        d,
    );
    let csv = std::fs::read_to_string(d.join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("param,value,worst_group,accuracy,gap"));
    assert!(lines[1].starts_with("margin,0.2,"));

    ok(
        &[
            "sweep",
            "--param",
            "n_descriptions",
            "--values",
            "1:10:3",
            "--bundle",
            "bundle",
            "--out",
            "n.csv",
        ],
        d,
    );
    let csv = std::fs::read_to_string(d.join("n.csv")).unwrap();
    let values: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(values, ["1.0", "4.0", "7.0", "10.0"]);

    // identical inputs, identical bytes, regardless of thread count
    let out = Command::new(env!("CARGO_BIN_EXE_prism"))
        .args([
            "sweep",
            "--param",
            "margin",
            "--values",
            "0.2,0.4,0.6,0.8",
            "--bundle",
            "bundle",
            "--out",
            "m2.csv",
        ])
        .current_dir(d)
        .env("PRISM_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(d.join("m.csv")).unwrap(),
        std::fs::read(d.join("m2.csv")).unwrap()
    );
}
