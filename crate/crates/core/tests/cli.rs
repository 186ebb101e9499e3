use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pointdisc::data::dataset_read;
use pointdisc::eval::read_probe_ply;
use pointdisc::train::Checkpoint;

const TINY: &str = "\
# small architecture for fast runs
data.n_points = 64
encoder.l1.centroids = 16
encoder.l1.radius = 0.4
encoder.l1.max_neighbors = 8
encoder.l1.mlp = 8,8
encoder.l2.centroids = 8
encoder.l2.radius = 0.8
encoder.l2.max_neighbors = 8
encoder.l2.mlp = 8,16
encoder.l3.centroids = 4
encoder.l3.radius = 1.2
encoder.l3.max_neighbors = 4
encoder.l3.mlp = 16,16
encoder.global.mlp = 16,16
encoder.adapt.hidden = 16
encoder.adapt.dim = 16
consistency.hidden = 16
loss.groups_per_cloud = 8
train.batch_size = 4
train.epochs = 2
eval.max_iters = 300
eval.probe_samples = 400
eval.probe_top_k = 20
eval.probes = 3
";

fn pointdisc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointdisc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointdisc(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointdisc(dir.path(), &["pretrain", "--config", "missing.cfg", "--data", "d.pdsc", "--out", "c.pdck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.cfg"), "{}", stderr(&o));
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "loss.T = 5\nloss.tau = abc\n").unwrap();
    let o = pointdisc(dir.path(), &["gen-data", "--config", "bad.cfg", "--out", "x.pdsc"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("loss.tau"), "{err}");

    let o = pointdisc(dir.path(), &["gen-data", "--set", "loss.bogus=1", "--out", "x.pdsc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.bogus"));

    let o = pointdisc(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x.pdsc").exists());
}

#[test]
fn gradcheck_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = pointdisc(dir.path(), &["gradcheck", "--out", "grad.txt"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("grad.txt")).unwrap();
    for block in ["linear", "cbn", "adaptation_mlp", "consistency_net", "batch_loss"] {
        assert!(table.lines().any(|l| l.starts_with(block) && l.ends_with("ok")), "{table}");
    }
}

#[test]
fn convert_off_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("meshes");
    for class in ["box", "wedge"] {
        fs::create_dir_all(root.join(class)).unwrap();
        fs::write(
            root.join(class).join("a.off"),
            "OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 0 1\n3 0 1 2\n3 0 2 3\n",
        )
        .unwrap();
    }
    let o = pointdisc(
        dir.path(),
        &["convert-off", "--input", "meshes", "--set", "data.n_points=32", "--out", "m.pdsc"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ds = dataset_read(&dir.path().join("m.pdsc")).unwrap();
    assert_eq!(ds.class_names, vec!["box", "wedge"]);
    assert_eq!(ds.clouds.len(), 2);
    assert_eq!(ds.n_points(), 32);

    let o = pointdisc(dir.path(), &["convert-off", "--input", "nowhere", "--out", "m.pdsc"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let run = |args: &[&str]| {
        let o = pointdisc(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        assert!(o.stdout.is_empty(), "{args:?} wrote to stdout");
        o
    };
    let cfg = ["--config", "tiny.cfg"];
    for (name, n, split, seed) in [("train", "16", "train", "1"), ("val", "8", "val", "2"), ("test", "8", "test", "3")] {
        let file = format!("{name}.pdsc");
        let clouds = format!("data.clouds={n}");
        let split = format!("data.split={split}");
        run(&[&["gen-data"][..], &cfg, &["--set", &clouds, "--set", &split, "--seed", seed, "--out", &file]].concat());
    }
    let ds = dataset_read(&d.join("val.pdsc")).unwrap();
    assert_eq!(ds.clouds.len(), 8);
    assert_eq!(ds.n_points(), 64);

    run(&[&["pretrain"][..], &cfg, &["--data", "train.pdsc", "--seed", "5", "--out", "ck.pdck"]].concat());
    let metrics = fs::read_to_string(d.join("ck.csv")).unwrap();
    assert!(metrics.contains("# train.seed = 5"));
    let rows: Vec<&str> = metrics.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "epoch,mean_loss,lr,wall_seconds");
    assert_eq!(rows.len(), 3);
    let ck = Checkpoint::load(&d.join("ck.pdck")).unwrap();
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.resolved_config().unwrap().get("train.seed"), "5");

    // resuming may only extend the run
    let o = pointdisc(d, &["pretrain", "--data", "train.pdsc", "--resume", "ck.pdck", "--set", "loss.T=3", "--out", "ck2.pdck"]);
    assert_eq!(o.status.code(), Some(2));
    fs::copy(d.join("ck.csv"), d.join("ck2.csv")).unwrap();
    run(&["pretrain", "--data", "train.pdsc", "--resume", "ck.pdck", "--set", "train.epochs=3", "--out", "ck2.pdck"]);
    let rows = fs::read_to_string(d.join("ck2.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert_eq!(Checkpoint::load(&d.join("ck2.pdck")).unwrap().epoch, 3);

    let probe = ["--train", "train.pdsc", "--val", "val.pdsc", "--test", "test.pdsc"];
    run(&[&["linear-eval", "--checkpoint", "ck.pdck"][..], &probe, &["--out", "probe.csv"]].concat());
    let report = fs::read_to_string(d.join("probe.csv")).unwrap();
    let acc: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("test_accuracy,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    run(&[&["linear-eval", "--fresh"][..], &cfg, &probe, &["--out", "fresh.csv"]].concat());

    run(&["shape-probe", "--checkpoint", "ck.pdck", "--data", "test.pdsc", "--ply-dir", "ply", "--out", "shape.csv"]);
    let shape = fs::read_to_string(d.join("shape.csv")).unwrap();
    let rows: Vec<&str> = shape.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "probe_id,layer,top_k_dist,control_dist");
    assert_eq!(rows.len(), 4);
    let ply = read_probe_ply(&fs::read_to_string(d.join("ply/probe_000.ply")).unwrap()).unwrap();
    assert!(ply.len() > 64 + 20);

    run(&[
        &["ablate"][..],
        &cfg,
        &probe,
        &["--set", "ablate.axis=cbn_vs_bn", "--set", "ablate.repeats=1", "--set", "train.epochs=1", "--out", "abl.csv"],
    ]
    .concat());
    let abl = fs::read_to_string(d.join("abl.csv")).unwrap();
    let rows: Vec<&str> = abl.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 2 + 2);
    assert!(rows[1].starts_with("cbn,0,") && rows[2].starts_with("bn,0,"));
}
