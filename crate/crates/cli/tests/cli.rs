use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_classkit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn classkit")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, count: &str, size: &str) {
    let o = run(&["gen-data", "--count", count, "--size", size, "--out", s(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY: [&str; 10] = [
    "--set", "base_channels=4",
    "--set", "input_height=32",
    "--set", "input_width=32",
    "--set", "epochs=1",
    "--set", "scales=1",
];

fn train_tiny(data: &Path, out: &Path) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(&TINY);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_images_masks_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "20", "32");
    let count = |sub: &str, ext: &str| {
        fs::read_dir(dir.path().join(sub))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
            .count()
    };
    assert_eq!(count("images", "ppm"), 20);
    assert_eq!(count("masks", "pgm"), 20);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("classkit-manifest v1"));
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 21);
}

#[test]
fn gen_data_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "3", "16");
    gen(b.path(), "3", "16");
    for f in ["manifest.txt", "images/00001.ppm", "masks/00002.pgm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "2", "16");
    let o = run(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("r")), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
    let o = run(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("r")), "--set", "epochs=many"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_configuration_key() {
    for args in [&["--help"][..], &["train", "--help"], &["ablate", "--help"]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        for key in classkit::config::KEYS {
            assert!(text.contains(key.key), "{args:?} help lacks {}", key.key);
        }
    }
}

#[test]
fn config_file_is_applied_and_overridden() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "4", "32");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "base_channels = 4\ninput_height = 32\ninput_width = 32\nepochs = 3\nscales = 1\n").unwrap();
    let out = dir.path().join("r");
    let o = run(&["train", "--data", s(dir.path()), "--out", s(&out), "--config", s(&cfg), "--set", "epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recorded = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(recorded.lines().any(|l| l.replace(' ', "") == "epochs=1"), "{recorded}");
    assert!(recorded.lines().any(|l| l.replace(' ', "") == "base_channels=4"), "{recorded}");
}

#[test]
fn eval_shape_mismatch_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2", "32");
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    fs::copy(data.join("masks/00000.pgm"), pred.join("00000.pgm")).unwrap();
    let small = dir.path().join("small");
    gen(&small, "1", "16");
    fs::copy(small.join("masks/00000.pgm"), pred.join("00001.pgm")).unwrap();
    let o = run(&["eval", "--data", s(&data), "--pred", s(&pred), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("00001"), "{}", stderr(&o));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "3", "32");
    let out = dir.path().join("e");
    let o = run(&["eval", "--data", s(dir.path()), "--pred", s(&dir.path().join("masks")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mean: Vec<f64> = metrics.lines().last().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(mean[3], 0.0);
    assert!(mean[0] > 0.999 && mean[4] > 0.99, "{metrics}");
    assert_eq!(fs::read_to_string(out.join("pr_curve.csv")).unwrap().lines().count(), 257);
}

#[test]
fn train_infer_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "8", "32");
    let out = dir.path().join("run");
    train_tiny(&data, &out);
    for f in ["checkpoint.bin", "checkpoints/epoch_000.bin", "steps.csv", "epochs.csv", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("checkpoint.bin");

    let pred = dir.path().join("pred");
    let o = run(&["infer", "--checkpoint", s(&ckpt), "--images", s(&data.join("images")), "--out", s(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&pred).unwrap().count(), 8);
    let map = classkit::netpbm::read_pgm(&pred.join("00003.pgm")).unwrap();
    assert_eq!(map.numel(), 32 * 32);

    let scored = dir.path().join("scored");
    let by_pred = run(&["eval", "--data", s(&data), "--pred", s(&pred), "--out", s(&scored)]);
    assert!(by_pred.status.success());
    let by_ckpt = run(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&scored)]);
    assert!(by_ckpt.status.success(), "{}", stderr(&by_ckpt));

    let attn = dir.path().join("attn");
    let o = run(&["attn-dump", "--checkpoint", s(&ckpt), "--image", s(&data.join("images/00000.ppm")), "--out", s(&attn)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(attn.join("scales.csv").exists() && attn.join("level2_position.pgm").exists());
}

#[test]
fn resume_requires_the_recorded_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "4", "32");
    let out = dir.path().join("run");
    train_tiny(&data, &out);
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out), "--resume"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(&["--set", "momentum=0.5"]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_inputs_fail_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = run(&["train", "--data", s(&missing), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["infer", "--checkpoint", s(&missing), "--images", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_filter_runs_one_case() {
    let o = run(&["gradcheck", "--instances", "2", "--filter", "matmul"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1 of 1 cases pass"), "{}", stdout(&o));
}
