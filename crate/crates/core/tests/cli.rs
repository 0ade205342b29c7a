use std::path::Path;
use std::process::{Command, Output};

fn distiller(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distiller"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = distiller(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = distiller(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr).to_string() + &String::from_utf8_lossy(&out.stdout);
    for verb in [
        "gen-data",
        "train-teacher",
        "distill",
        "mi-bench",
        "search",
        "fanova",
        "meta-train",
        "recommend",
    ] {
        assert!(text.contains(verb), "usage lacks {verb}");
    }
}

#[test]
fn config_errors_exit_2_and_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.cfg", "inter_loss.kind = MI_alpha\ninter_loss.alpha = 1.5\n");
    let out = distiller(&["distill", "--config", "bad.cfg", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    write(dir.path(), "typo.cfg", "data.directory = x\n");
    let out = distiller(&["gen-data", "--config", "typo.cfg", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = distiller(&["mi-bench", "--rho", "1.0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    write(dir.path(), "missing.cfg", "data.dir = nowhere\nteacher.path = nowhere.json\n");
    let out = distiller(&["distill", "--config", "missing.cfg", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mi_bench_reports_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "mi.cfg", "mi.steps = 5\nmi.batch = 16\n");
    let stdout = ok(
        &["mi-bench", "--config", "mi.cfg", "--rho", "0.8", "--alpha", "0.9", "--out", "mb"],
        dir.path(),
    );
    let row = stdout.lines().nth(1).unwrap();
    assert!(row.contains("0.510826"), "{row}");
    assert!(dir.path().join("mb/mi_bench.csv").exists());
    assert!(dir.path().join("mb/manifest.json").exists());
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "gen.cfg", "data.n_train = 120\ndata.n_test = 60\ndata.id = tiny\n");
    ok(&["gen-data", "--config", "gen.cfg", "--out", "data", "--seed", "3"], d);
    write(d, "teacher.cfg", "data.dir = data\nteacher.epochs = 2\n");
    ok(&["train-teacher", "--config", "teacher.cfg", "--out", "teacher"], d);
    write(
        d,
        "run.cfg",
        "data.dir = data\nteacher.path = teacher/teacher.json\ntrain.epochs = 1\nstudent.layers = 1\nstudent.width = 8\n",
    );
    for out in ["d1", "d2"] {
        ok(&["distill", "--config", "run.cfg", "--out", out, "--seed", "5"], d);
    }
    for f in ["record.jsonl", "student.json", "epoch_losses.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(d.join("d1").join(f)).unwrap(),
            std::fs::read(d.join("d2").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let record = std::fs::read_to_string(d.join("d1/record.jsonl")).unwrap();
    assert!(!record.contains("wall_time"));

    ok(&["search", "--config", "run.cfg", "--out", "s", "--budget", "20"], d);
    write(d, "fanova.cfg", "fanova.records = s/records.jsonl\nfanova.trees = 8\n");
    let csv = ok(&["fanova", "--config", "fanova.cfg", "--out", "f"], d);
    assert!(csv.starts_with("kind,axis_a,axis_b,fraction"));

    write(d, "meta.cfg", "meta.records = s/records.jsonl\nmeta.data = data\nmeta.rounds = 20\n");
    ok(&["meta-train", "--config", "meta.cfg", "--out", "m"], d);
    write(
        d,
        "rec.cfg",
        "meta.model = m/meta_model.json\ndata.dir = data\nteacher.path = teacher/teacher.json\n",
    );
    ok(&["recommend", "--config", "rec.cfg", "--out", "r", "--top-n", "3"], d);
    let recs = std::fs::read_to_string(d.join("r/recommendations.jsonl")).unwrap();
    assert_eq!(recs.lines().count(), 3);
}
