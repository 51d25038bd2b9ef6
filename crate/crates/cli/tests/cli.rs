use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn klonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klonet")).args(args).env("KLON_THREADS", "1").output().expect("spawn klonet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_reports_reference_numbers() {
    let o = klonet(&["count", "--variant", "klonet"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("7681316") || text.contains("7,681,316"), "{text}");
    assert!(text.contains("29.30"), "{text}");

    let o = klonet(&["count", "--variant", "vanilla-unet"]);
    assert!(stdout(&o).contains("65.85"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(klonet(&["count", "--variant", "nope"]).status.code(), Some(1));
    assert_eq!(klonet(&["count", "--variant", "csp", "--resolution", "64"]).status.code(), Some(1));
    assert_eq!(klonet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(klonet(&["--help"]).status.code(), Some(0));
}

#[test]
fn unaligned_resolution_is_a_runtime_error() {
    let o = klonet(&["count", "--variant", "klonet", "--resolution", "100x100"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pad"));
}

#[test]
fn gen_data_writes_manifest_and_fails_on_unwritable_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = klonet(&["gen-data", "--out", out.to_str().unwrap(), "--patients", "5", "--slices", "3", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 5 * 3);

    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = klonet(&["gen-data", "--out", blocker.join("sub").to_str().unwrap(), "--patients", "2"]);
    assert!(!o.status.success());
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "learning_rate=0.1\n").unwrap();
    let o = klonet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_config(path: &Path, data: &Path, out: &Path) {
    let text = format!(
        "variant=klonet\nchannels=4,8,16,32,64\ncsp_depth=1\nheads=2\nk_min=2\nk_max=8\nepochs=1\nbatch_size=4\nlr=0.001\ndata_dir={}\nout_dir={}\n",
        data.display(),
        out.display()
    );
    fs::write(path, text).unwrap();
}

#[test]
fn train_then_eval_with_tau_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = klonet(&["gen-data", "--out", data.to_str().unwrap(), "--patients", "4", "--slices", "4", "--size", "32"]);
    assert!(o.status.success());
    let cfg = dir.path().join("cfg.txt");
    write_config(&cfg, &data, &run);

    let o = klonet(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "train_log.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("best.ckpt");
    let o = klonet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test", "--dump-tau"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(run.join("metrics_test.csv")).unwrap();
    assert!(metrics.starts_with("volume_id,slice_idx,region,dsc,iou,hd95"));
    assert!(run.join("regional_test.csv").exists());
    let tau = fs::read_to_string(run.join("tau_test.csv")).unwrap();
    let header = tau.lines().next().unwrap();
    assert_eq!(header, "volume_id,slice_idx,stage,position,row,col,tau,k");
    for line in tau.lines().skip(1).take(50) {
        let cols: Vec<&str> = line.split(',').collect();
        let k: usize = cols[7].parse().unwrap();
        assert!((2..=8).contains(&k), "{line}");
    }
}

#[test]
fn sequential_flag_gives_identical_counts() {
    let a = klonet(&["count", "--variant", "attn"]);
    let b = klonet(&["--sequential", "count", "--variant", "attn"]);
    assert_eq!(stdout(&a), stdout(&b));
}
