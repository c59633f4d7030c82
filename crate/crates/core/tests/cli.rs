use std::path::Path;
use std::process::{Command, Output};

fn gdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdnet")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, count: &str, size: &str) {
    let o = gdnet(&["gen", "--out", p(dir), "--count", count, "--size", size, size, "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&gdnet(&["--help"])), 0);
    let o = gdnet(&["eval", "--pred", "a", "--gt", "b", "--report", "r", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));
    assert_eq!(code(&gdnet(&["frobnicate"])), 1);
    assert_eq!(code(&gdnet(&[])), 1);
}

#[test]
fn gen_writes_dataset_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let o = gdnet(&["gen", "--out", p(&data), "--count", "3", "--size", "32", "48"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("[gen]\n"), "{out}");
    assert!(out.contains("count = 3"));
    let ids = std::fs::read_to_string(data.join("ids.txt")).unwrap();
    assert_eq!(ids.lines().count(), 3);
    for id in ids.lines() {
        assert!(data.join("images").join(format!("{id}.ppm")).exists());
        assert!(data.join("masks").join(format!("{id}.pgm")).exists());
    }
    let again = dir.path().join("e");
    gdnet(&["gen", "--out", p(&again), "--count", "3", "--size", "32", "48"]);
    for id in ids.lines() {
        let f = format!("masks/{id}.pgm");
        assert_eq!(std::fs::read(data.join(&f)).unwrap(), std::fs::read(again.join(&f)).unwrap());
    }
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "3", "32");
    let report = dir.path().join("r").join("report.txt");
    let o = gdnet(&["eval", "--pred", p(&data.join("masks")), "--gt", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    assert_eq!(
        csv,
        "metric,value\niou,1.000000\npa,1.000000\nf_beta_max,1.000000\nmae,0.000000\nber,0.000000\nimages,3\nber_images,3\n"
    );
    let curve = std::fs::read_to_string(dir.path().join("r").join("report_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 257);
    assert!(std::fs::read_to_string(&report).unwrap().contains("IoU"));
    // byte-stable across runs
    let second = dir.path().join("r2.txt");
    gdnet(&["eval", "--pred", p(&data.join("masks")), "--gt", p(&data), "--report", p(&second)]);
    assert_eq!(std::fs::read(second.with_extension("csv")).unwrap(), csv.as_bytes());
}

#[test]
fn eval_error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    std::fs::write(a.join("x.pgm"), b"P5\n1 1\n255\n\0").unwrap();
    std::fs::write(b.join("y.pgm"), b"P5\n1 1\n255\n\0").unwrap();
    let report = dir.path().join("r.txt");
    let o = gdnet(&["eval", "--pred", p(&a), "--gt", p(&b), "--report", p(&report)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.starts_with("error[usage]") && err.lines().count() == 1, "{err}");

    let o = gdnet(&["eval", "--pred", p(&dir.path().join("missing")), "--gt", p(&b), "--report", p(&report)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error[io]"));

    std::fs::write(b.join("x.pgm"), b"P5\n1 1\n255\n\x80").unwrap();
    let o = gdnet(&["eval", "--pred", p(&a), "--gt", p(&b), "--report", p(&report)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("byte 11"), "{}", stderr(&o));

    std::fs::write(b.join("x.pgm"), b"P5\n2 1\n255\n\0\0").unwrap();
    let o = gdnet(&["eval", "--pred", p(&a), "--gt", p(&b), "--report", p(&report)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error[input]"));
}

#[test]
fn stats_writes_map_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "4", "32");
    let out = dir.path().join("s");
    let o = gdnet(&["stats", "--masks", p(&data), "--out", p(&out), "--size", "16", "16", "--bins", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("area_histogram.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let counts: usize = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 4);
    let map = std::fs::read(out.join("location_probability.pgm")).unwrap();
    assert!(map.starts_with(b"P5\n16 16\n255\n"));
}

#[test]
fn train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "2", "32");
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "encoder_channels = 4,4,4,4,4\nlcfi_channels = 4\nattention_reduction = 4\ninput_size = 32,32\nepochs = 5\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = gdnet(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt), "--epochs", "2", "--set", "hflip=false"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("[train]\n"), "{out}");
    assert!(out.contains("epochs = 2") && out.contains("hflip = false"), "{out}");
    let log = std::fs::read_to_string(ckpt.with_extension("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let pred = dir.path().join("pred");
    let o = gdnet(&["infer", "--ckpt", p(&ckpt), "--images", p(&data), "--out", p(&pred)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&pred).unwrap().count(), 2);
    let all = dir.path().join("all");
    let o = gdnet(&["infer", "--ckpt", p(&ckpt), "--images", p(&data), "--out", p(&all), "--maps", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for m in ["high", "low", "boundary_high", "boundary_low"] {
        assert_eq!(std::fs::read_dir(all.join(m)).unwrap().count(), 2, "{m}");
    }
    let report = dir.path().join("eval.txt");
    let o = gdnet(&["eval", "--pred", p(&pred), "--gt", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = gdnet(&["train", "--data", p(&data), "--out", p(&ckpt), "--set", "no_such_key=1"]);
    assert_eq!(code(&o), 1);
    let o = gdnet(&["train", "--data", p(&data), "--out", p(&ckpt), "--set", "input_size=40,40"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
    let o = gdnet(&["infer", "--ckpt", p(&data.join("ids.txt")), "--images", p(&data), "--out", p(&pred)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verification_commands_pass() {
    let o = gdnet(&["selftest"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = gdnet(&["gradcheck", "--seed", "3", "--size", "16", "16"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("gdnet composite loss"));
}
