use std::path::Path;
use std::process::{Command, Output};

fn ddsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddsm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ddsm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn gen(dir: &Path, name: &str, samples: &str, first: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    ok(&["gen-data", "--out", p(&out), "--grid", "16", "--samples", samples, "--pairs", "2", "--seed", "11", "--first-index", first]);
    out
}

#[test]
fn data_train_predict_eval_render_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let train = gen(d, "train", "3", "0");
    let test = gen(d, "test", "2", "3");
    assert!(train.join("config.toml").exists() && train.join("manifest.toml").exists());

    let fnn = d.join("fnn");
    let cfg = d.join("fnn.toml");
    std::fs::write(&cfg, "width = 8\nblocks = 2\nbatch_samples = 2\nbatch_points = 32\n").unwrap();
    ok(&["train-fnn", "--data", p(&train), "--config", p(&cfg), "--out", p(&fnn), "--pairs", "2", "--iterations", "6", "--seed", "3", "--log-every", "3"]);
    let resolved = std::fs::read_to_string(fnn.join("config.toml")).unwrap();
    assert!(resolved.contains("width = 8") && resolved.contains("iterations = 6"), "{resolved}");
    assert_eq!(std::fs::read_to_string(fnn.join("losses.csv")).unwrap().lines().count(), 7);

    let cnn = d.join("cnn");
    ok(&["train-cnn", "--data", p(&train), "--out", p(&cnn), "--pairs", "1", "--iterations", "2", "--channels", "2,4", "--batch-samples", "2"]);

    for (model, name) in [(&fnn, "pf"), (&cnn, "pc")] {
        let pred = d.join(name);
        ok(&["predict", "--model", p(model), "--data", p(&test), "--out", p(&pred), "--noise", "0.1"]);
        assert!(pred.join("pred_000003.eiti").exists() && pred.join("pred_000004.eiti").exists());
        let report = d.join(format!("{name}.toml"));
        let line = ok(&["eval", "--predictions", p(&pred), "--data", p(&test), "--out", p(&report)]);
        assert!(line.contains("IoU"));
        assert!(std::fs::read_to_string(&report).unwrap().contains("[[rows]]"));
    }

    let classic = d.join("classic");
    ok(&["dsm", "--data", p(&test), "--out", p(&classic), "--omega", "2"]);
    ok(&["eval", "--predictions", p(&classic), "--data", p(&test), "--out", p(&d.join("classic.toml"))]);
    // predictions do not belong to the training set
    assert_eq!(ddsm(&["eval", "--predictions", p(&classic), "--data", p(&train), "--out", p(&d.join("x.toml"))]).status.code(), Some(2));

    let png = d.join("f.png");
    ok(&["render", "--field", p(&classic.join("pred_000003.eiti")), "--out", p(&png), "--scale", "2"]);
    assert_eq!(&read(&png)[1..4], b"PNG");
    ok(&["render", "--data", p(&test), "--sample", "1", "--out", p(&d.join("t.png"))]);
}

#[test]
fn commands_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let a = gen(d, "a", "2", "0");
    let b = gen(d, "b", "2", "0");
    for f in ["manifest.toml", "config.toml", "record_000001.eitd"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let args = |out: &Path| {
        vec!["train-fnn".to_string(), "--data".into(), p(&a).into(), "--out".into(), p(out).into(), "--width".into(), "8".into(), "--blocks".into(), "2".into(), "--iterations".into(), "4".into(), "--batch-samples".into(), "2".into(), "--batch-points".into(), "16".into(), "--pairs".into(), "2".into()]
    };
    let (m1, m2) = (d.join("m1"), d.join("m2"));
    for m in [&m1, &m2] {
        let v = args(m);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(read(&m1.join("model.eitp")), read(&m2.join("model.eitp")));
    let (p1, p2) = (d.join("p1"), d.join("p2"));
    ok(&["predict", "--model", p(&m1), "--data", p(&b), "--out", p(&p1)]);
    ok(&["predict", "--model", p(&m2), "--data", p(&b), "--out", p(&p2)]);
    assert_eq!(read(&p1.join("predictions.toml")), read(&p2.join("predictions.toml")));
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // unknown key in a config file
    let bad = d.join("bad.toml");
    std::fs::write(&bad, "widht = 3\n").unwrap();
    let data = gen(d, "data", "1", "0");
    let out = ddsm(&["train-fnn", "--data", p(&data), "--config", p(&bad), "--out", p(&d.join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    // invalid value
    assert_eq!(ddsm(&["gen-data", "--out", p(&d.join("x")), "--scenario", "9"]).status.code(), Some(2));
    // usage error
    assert_eq!(ddsm(&["gen-data"]).status.code(), Some(2));
    // missing input directory
    assert_eq!(ddsm(&["predict", "--model", p(&d.join("none")), "--data", p(&data), "--out", p(&d.join("y"))]).status.code(), Some(4));
    // corrupted record
    std::fs::write(data.join("record_000000.eitd"), b"EITD junk").unwrap();
    assert_eq!(ddsm(&["dsm", "--data", p(&data), "--out", p(&d.join("z"))]).status.code(), Some(4));
}

#[test]
fn gradcheck_reports_every_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("g.toml");
    let text = ok(&["gradcheck", "--out", p(&report)]);
    for name in ["layer dense/weight", "layer batchnorm", "fnn radial", "cnn"] {
        assert!(text.contains(name), "{text}");
    }
    assert!(!text.contains("FAIL"));
    assert!(std::fs::read_to_string(&report).unwrap().contains("max_relative_error"));
}

#[test]
fn sensitivity_study_writes_rows_and_images() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = gen(d, "data", "2", "0");
    let m = d.join("m");
    ok(&["train-fnn", "--data", p(&data), "--out", p(&m), "--width", "8", "--blocks", "2", "--iterations", "2", "--pairs", "2", "--batch-samples", "1", "--batch-points", "8"]);
    let out = d.join("study");
    let text = ok(&["sensitivity-study", "--out", p(&out), "--grid", "16", "--patterns", "3", "--model", p(&m)]);
    assert_eq!(text.lines().filter(|l| l.starts_with("omega")).count(), 3);
    let study = std::fs::read_to_string(out.join("study.toml")).unwrap();
    assert_eq!(study.matches("relative_difference").count(), 3);
    assert!(out.join("model0_fnn_with_center.png").exists() && out.join("truth_without_center.png").exists());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        let cfg = ddsm::experiment::ExperimentConfig::from_toml(&std::fs::read_to_string(&path).unwrap());
        assert!(cfg.and_then(|c| c.validate()).is_ok(), "{}", path.display());
    }
}
