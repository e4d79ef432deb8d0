use std::process::{Command, Output};

fn agrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agrnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failure_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    err.lines()
        .find(|l| l.starts_with("agrnet-failure\tkind="))
        .unwrap_or_else(|| panic!("no failure line in:\n{err}"))
        .to_string()
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let d = data.to_str().unwrap();
    ok(&agrnet(&["dataset", "generate", "--out", d, "--train", "3", "--val", "2", "--seed", "4", "--size", "48"]));
    assert!(data.join("images/0004.png").exists());
    assert!(data.join("labels/0000.png").exists());
    assert_eq!(std::fs::read_to_string(data.join("manifest.tsv")).unwrap().lines().count(), 6);

    let cfg = root.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny run\nmodel.image_size = 48\nmodel.backbone_channels = 4,4,8,8\ngraph.channels = 8\ngraph.k = 2\n\
             train.batch = 2\ntrain.steps = 2\ndata.dir = {d}\n"
        ),
    )
    .unwrap();
    let run = root.join("run");
    let stdout = ok(&agrnet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "optim.lr=0.01",
        "--out",
        run.to_str().unwrap(),
    ]));
    assert!(stdout.contains("mean_f1"));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("loss_trace.tsv").exists());
    let c = ckpt.to_str().unwrap();

    let report = ok(&agrnet(&["eval", "--ckpt", c, "--data", d]));
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count(), agrnet::metrics::report_row_count(11) + 1);

    let image = data.join("images/0000.png");
    let out = root.join("infer");
    ok(&agrnet(&["infer", "--ckpt", c, "--image", image.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(out.join("parsing.png").exists());

    let vis = root.join("vis");
    ok(&agrnet(&["dump-visuals", "--ckpt", c, "--image", image.to_str().unwrap(), "--out", vis.to_str().unwrap()]));
    assert!(vis.join("adjacency.txt").exists());
    assert!(vis.join("vertices.png").exists());
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&agrnet(&[
        "train",
        "--no-graph",
        "--no-edge",
        "--set",
        "model.image_size=48",
        "--set",
        "model.backbone_channels=4,4,8,8",
        "--set",
        "graph.channels=8",
        "--set",
        "train.steps=1",
        "--set",
        "data.train=2",
        "--set",
        "data.val=1",
        "--out",
        run.to_str().unwrap(),
    ]));
    let ck = agrnet::checkpoint::Checkpoint::load(&run.join("final.ckpt")).unwrap();
    assert!(ck.config.model.ablation.no_graph && ck.config.model.ablation.no_edge);
    assert!(!ck.config.model.ablation.spatial_pool);
    assert!(ck.metric("mean_f1").is_some());
}

#[test]
fn failures_are_machine_readable() {
    let line = failure_line(&agrnet(&["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent"]));
    assert!(line.contains("kind=io"), "{line}");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "model.image_size = 50\n").unwrap();
    let line = failure_line(&agrnet(&["train", "--config", cfg.to_str().unwrap()]));
    assert!(line.contains("kind=config"), "{line}");

    let line = failure_line(&agrnet(&["train", "--set", "no.such.key=1"]));
    assert!(line.contains("kind=config"), "{line}");
}

#[test]
fn gradcheck_command_passes() {
    let out = agrnet(&["gradcheck", "--instances", "1"]);
    let text = ok(&out);
    assert!(text.contains("loss_dis"));
    assert!(!text.contains("FAIL"));
}
