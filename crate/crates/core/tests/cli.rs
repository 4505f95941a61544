use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in a second
image_size = 32
backbone_channels = 4, 4, 8, 8
d = 16
heads = 2
max_views = 2
n_views = 2
batch_size = 2
epochs = 2
lr = 1e-3
";

fn mvmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvmesh")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ck) = (dir.path().join("tiny.cfg"), dir.path().join("d.mmtd"), dir.path().join("m.mmtc"));
    std::fs::write(&cfg, TINY).unwrap();

    ok(&mvmesh(&["gen-data", "--n", "5", "--seed", "4", "--views", "2", "--image-size", "32", "--out", p(&data)]));
    let head = std::fs::read(&data).unwrap();
    assert_eq!(&head[..4], b"MMTD");

    let log = ok(&mvmesh(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck)]));
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 2);
    assert_eq!(&std::fs::read(&ck).unwrap()[..4], b"MMTC");

    // Same config and data give the same log.
    let again = ok(&mvmesh(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("b.mmtc"))]));
    assert_eq!(log, again);

    let eval = ok(&mvmesh(&["eval", "--ckpt", p(&ck), "--data", p(&data)]));
    assert!(eval.starts_with("# n_views=2 samples=5"), "{eval}");
    assert!(eval.lines().last().unwrap().starts_with("mean\t"));
    let one = ok(&mvmesh(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--views", "1", "--all-views"]));
    assert!(one.starts_with("# n_views=1 samples=5 scope=all views"), "{one}");

    let out = dir.path().join("obj");
    let paths = ok(&mvmesh(&["export-obj", "--ckpt", p(&ck), "--data", p(&data), "--index", "3", "--out", p(&out)]));
    assert_eq!(paths.lines().count(), 2);
    for name in ["pred_3.obj", "gt_3.obj"] {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 400);
    }
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = (dir.path().join("tiny.cfg"), dir.path().join("d.mmtd"));
    std::fs::write(&cfg, TINY).unwrap();
    ok(&mvmesh(&["gen-data", "--n", "4", "--views", "2", "--image-size", "32", "--out", p(&data)]));
    let full = dir.path().join("full.mmtc");
    let log = ok(&mvmesh(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&full)]));

    let half_cfg = dir.path().join("half.cfg");
    std::fs::write(&half_cfg, TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    let part = dir.path().join("part.mmtc");
    let first = ok(&mvmesh(&["train", "--config", p(&half_cfg), "--data", p(&data), "--out", p(&part)]));
    let rest = ok(&mvmesh(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&part), "--resume", p(&part)]));
    assert_eq!(format!("{first}{rest}"), log);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&part).unwrap());
}

#[test]
fn ablate_and_gradcheck_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = (dir.path().join("tiny.cfg"), dir.path().join("d.mmtd"));
    std::fs::write(&cfg, TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    ok(&mvmesh(&["gen-data", "--n", "5", "--views", "2", "--image-size", "32", "--out", p(&data)]));
    let table = ok(&mvmesh(&["ablate", "--axis", "smooth", "--config", p(&cfg), "--data", p(&data)]));
    assert!(table.lines().any(|l| l.starts_with("smooth_loss=off")), "{table}");
    assert!(table.lines().any(|l| l.starts_with("smooth_loss=on")), "{table}");

    let report = ok(&mvmesh(&["gradcheck", "--config", p(&cfg), "--points", "3"]));
    for term in ["L_J", "L_V", "L_Align", "L_Smooth", "end_to_end"] {
        assert!(report.contains(term), "{report}");
    }
}

#[test]
fn errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "heads = 3\n").unwrap();
    let out = mvmesh(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"]["kind"], "config");
    assert!(line["error"]["message"].as_str().unwrap().contains("heads"));

    let out = mvmesh(&["eval", "--ckpt", p(&dir.path().join("missing")), "--data", p(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"]["kind"], "io");

    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    let out = mvmesh(&["gradcheck", "--config", p(&cfg)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
