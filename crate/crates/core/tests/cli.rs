use std::fs;
use std::path::Path;

use olvae::cli::run_with;
use olvae::data;
use olvae::trainer::{Checkpoint, LOG_HEADER};

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(args.iter().copied(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_requested_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.olvd");
    let (code, _, err) = run(&["gen-data", "--seed", "1", "--n", "6000", "--k", "6", "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    let ds = data::load(&out).unwrap();
    assert_eq!((ds.len(), ds.k, ds.data_dim), (6000, 6, 256));
    assert!(ds.label_histogram().iter().all(|&c| c == 1000));
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    let (code, _, err) = run(&["train"]);
    assert_eq!(code, 1);
    assert!(err.contains("--data"), "{err}");

    let (code, _, err) = run(&["gen-data", "--seed", "x", "--n", "10", "--out", "o"]);
    assert_eq!(code, 1);
    assert!(err.contains("--seed"), "{err}");

    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("selftest"));
}

#[test]
fn bad_config_is_a_usage_error_and_runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.olvd");
    assert_eq!(run(&["gen-data", "--seed", "1", "--n", "60", "--out", p(&data)]).0, 0);

    let config = dir.path().join("bad.cfg");
    fs::write(&config, "epochs = 1\nlearning_rate = fast\n").unwrap();
    let (code, _, err) = run(&["train", "--data", p(&data), "--config", p(&config), "--out", p(dir.path())]);
    assert_eq!(code, 1);
    assert!(err.contains("learning_rate"), "{err}");

    let (code, _, err) = run(&["train", "--data", p(&data), "--batch-size", "3", "--out", p(dir.path())]);
    assert_eq!(code, 1, "{err}");

    let missing = dir.path().join("missing.olvd");
    let (code, _, err) = run(&["train", "--data", p(&missing)]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.olvd"), "{err}");

    fs::write(&missing, b"OLVD1 truncated").unwrap();
    let (code, _, err) = run(&["train", "--data", p(&missing)]);
    assert_eq!(code, 2);
    assert!(err.contains("offset"), "{err}");
}

#[test]
fn train_eval_swap_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (train, test) = (d.join("train.olvd"), d.join("test.olvd"));
    assert_eq!(run(&["gen-data", "--seed", "1", "--n", "240", "--out", p(&train)]).0, 0);
    assert_eq!(run(&["gen-data", "--seed", "2", "--n", "120", "--out", p(&test)]).0, 0);

    let config = d.join("run.cfg");
    fs::write(&config, "# small run\nepochs = 2\nbatch_size = 60\nd_c = 3\nd_s = 3\n").unwrap();
    for run_dir in ["a", "b"] {
        let out = d.join(run_dir);
        let (code, stdout, err) = run(&["train", "--data", p(&train), "--config", p(&config), "--seed", "5", "--out", p(&out)]);
        assert_eq!(code, 0, "{err}");
        assert_eq!(stdout.lines().count(), 3);
        let (code, metrics, err) = run(&[
            "eval", "--checkpoint", p(&out.join("model.ckpt")), "--data", p(&train), "--test", p(&test),
            "--m", "1,5", "--out", p(&out.join("eval")),
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(metrics.starts_with("metric,latent,M,value\n"));
        let swap = out.join("swap.pgm");
        let (code, _, err) = run(&["swap", "--checkpoint", p(&out.join("model.ckpt")), "--data", p(&test), "--m", "5", "--rows", "3", "--out", p(&swap)]);
        assert_eq!(code, 0, "{err}");
        let grid = olvae::image::parse_pgm(&fs::read(&swap).unwrap()).unwrap();
        assert_eq!((grid.width, grid.height), (16 * 7, 16 * 4));
    }

    let ckpt = Checkpoint::load(d.join("a/model.ckpt")).unwrap();
    assert_eq!((ckpt.epochs_done, ckpt.config.content_dim, ckpt.config.seed), (2, 3, 5));
    assert_eq!(fs::read(d.join("a/model.ckpt")).unwrap(), fs::read(d.join("b/model.ckpt")).unwrap());
    let log = fs::read_to_string(d.join("a/train_log.csv")).unwrap();
    assert!(log.starts_with(LOG_HEADER));
    for f in ["metrics.csv", "distmap.csv", "distmap.pgm", "distmap_ideal.pgm"] {
        assert_eq!(fs::read(d.join("a/eval").join(f)).unwrap(), fs::read(d.join("b/eval").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(d.join("a/swap.pgm")).unwrap(), fs::read(d.join("b/swap.pgm")).unwrap());
}

#[test]
fn sample_prior_reports_moments() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("samples.csv");
    let (code, stdout, err) = run(&["sample-prior", "--d", "2", "--k", "4", "--count", "20000", "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("max mean error"));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + 2 * 20000);
    let report = fs::read_to_string(dir.path().join("samples.moments.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * (4 + 16));
    for line in report.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(4).map(|v| v.parse().unwrap()).collect();
        assert!((f[0] - f[1]).abs() < 0.05, "{line}");
    }
    assert_eq!(run(&["sample-prior", "--count", "10", "--out", p(&out)]).0, 1);
}

#[test]
fn selftest_passes() {
    let (code, out, _) = run(&["selftest"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().count(), 8);
}
