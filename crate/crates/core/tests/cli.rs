use std::fs;
use std::path::Path;

use lipfuse::cli::run;

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn synth(dir: &Path) {
    let code = run([
        "lipfuse",
        "synth",
        "--classes",
        "3",
        "--per-class",
        "5",
        "--seed",
        "7",
        "--coupling",
        "complementary",
        "--frames",
        "8",
        "--frame-size",
        "40",
        "--out",
        &s(dir),
    ]);
    assert_eq!(code, 0);
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("cfg.txt");
    fs::write(
        &path,
        "# tiny run\npreset=desk\nepochs=2\nbatch_size=4\nsubset=20\ngat_channels=4,8\nheads=2\n",
    )
    .unwrap();
    s(&path)
}

#[test]
fn pipeline_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    assert!(data.join("manifest.tsv").exists() || data.join("classes.txt").exists());
    assert_eq!(run(["lipfuse", "stats", "--data", &s(&data), "--preset", "desk"]), 0);
    assert!(data.join("stats.txt").exists());

    let cfg = write_config(root.path());
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for out in [&a, &b] {
        let code = run(["lipfuse", "train", "--config", &cfg, "--data", &s(&data), "--out", &s(out), "--seed", "3"]);
        assert_eq!(code, 0);
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let echoed = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(echoed.contains("seed=3") && echoed.contains("heads=2") && echoed.contains("epochs=2"));

    let ckpt = s(&a.join("best.ckpt"));
    assert_eq!(run(["lipfuse", "eval", "--data", &s(&data), "--checkpoint", &ckpt, "--split", "val"]), 0);
    let sample = data.join("samples/c001_0002");
    assert_eq!(
        run(["lipfuse", "infer", "--checkpoint", &ckpt, "--sample", &s(&sample), "--data", &s(&data)]),
        0
    );

    let other = root.path().join("other");
    let code = run([
        "lipfuse", "synth", "--classes", "4", "--per-class", "3", "--frames", "6", "--frame-size", "32", "--out",
        &s(&other),
    ]);
    assert_eq!(code, 0);
    assert_eq!(run(["lipfuse", "eval", "--data", &s(&other), "--checkpoint", &ckpt]), 1);
}

#[test]
fn flags_override_the_config_file() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    let cfg = write_config(root.path());
    let out = root.path().join("run");
    let code = run([
        "lipfuse", "train", "--config", &cfg, "--data", &s(&data), "--out", &s(&out), "--epochs", "1", "--modality",
        "lo", "--compute-stats",
    ]);
    assert_eq!(code, 0);
    let echoed = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echoed.contains("epochs=1") && echoed.contains("modality=lo"));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    let out = s(&root.path().join("out"));

    assert_eq!(run(["lipfuse", "train", "--data", &s(&data), "--out", &out, "--fusion", "sum"]), 2);
    assert_eq!(run(["lipfuse", "train", "--data", "/no/such/dir", "--out", &out]), 2);
    assert_eq!(run(["lipfuse", "train", "--data", &s(&data), "--out", &out, "--preset", "desk"]), 2);

    let bad = root.path().join("bad.txt");
    fs::write(&bad, "preset=desk\nlearning_rate=1\n").unwrap();
    let code = run(["lipfuse", "train", "--config", &s(&bad), "--data", &s(&data), "--out", &out, "--compute-stats"]);
    assert_eq!(code, 2);
    fs::write(&bad, "preset=desk\nthis line has no equals sign\n").unwrap();
    let code = run(["lipfuse", "train", "--config", &s(&bad), "--data", &s(&data), "--out", &out, "--compute-stats"]);
    assert_eq!(code, 2);
    fs::write(&bad, "preset=desk\nheads=3\n").unwrap();
    let code = run(["lipfuse", "train", "--config", &s(&bad), "--data", &s(&data), "--out", &out, "--compute-stats"]);
    assert_eq!(code, 2);
    assert_eq!(run(["lipfuse", "frobnicate"]), 2);
}

#[test]
fn help_is_available_for_every_subcommand() {
    for sub in ["synth", "stats", "train", "eval", "infer", "gradcheck", "ablate"] {
        assert_eq!(run(["lipfuse", sub, "--help"]), 0, "{sub}");
    }
}

#[test]
fn gradcheck_command_reports_per_module() {
    assert_eq!(run(["lipfuse", "gradcheck", "--dtype", "f64", "--module", "classifier_head"]), 0);
    assert_eq!(run(["lipfuse", "gradcheck", "--module", "nonexistent"]), 2);
}

#[test]
fn head_grid_runs_five_cells() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    let cfg = root.path().join("cfg.txt");
    fs::write(&cfg, "preset=desk\nepochs=1\nbatch_size=8\nsubset=20\ngat_channels=4,8\n").unwrap();
    let out = root.path().join("grid");
    let code = run([
        "lipfuse", "ablate", "--grid", "heads", "--seeds", "0", "--config", &s(&cfg), "--data", &s(&data), "--out",
        &s(&out), "--compute-stats",
    ]);
    assert_eq!(code, 0);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 6, "{table}");
    assert!(!table.contains("failed"));
}
