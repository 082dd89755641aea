use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
[data]
n_per_class = 3
points = 64
[model]
width = 16
depth = 1
heads = 2
n_groups = 8
group_size = 8
[foundation]
steps = 2
[dvae]
prompt_count = 2
vocab = 16
grid = 2
decoder_hidden = 16
steps = 2
batch = 4
eval_every = 2
eval_samples = 4
[mpm]
width = 16
depth = 1
heads = 2
decoder_depth = 1
steps = 2
batch = 4
[probe]
epochs = 1
";

fn act(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_act"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    dir
}

#[test]
fn stages_run_in_sequence() {
    let dir = setup();
    let d = dir.path();
    for stage in ["gen-data", "train-dvae", "train-mpm", "eval-recon", "export-features"] {
        let o = act(&[stage, "--config", "run.cfg", "--seed", "4"], d);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = act(&["probe", "--config", "run.cfg", "--out", "probe-random"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("protocol,seed,accuracy"));
    for f in ["dvae.ckpt", "student.ckpt", "dvae_metrics.csv", "mpm_metrics.csv", "recon.csv", "features.csv"] {
        assert!(d.join("runs").join(f).is_file(), "{f}");
    }
    assert!(d.join("probe-random/probe.csv").is_file());
    let ck = std::fs::read(d.join("runs/dvae.ckpt")).unwrap();
    assert_eq!(&ck[..8], b"ACTCKPT1");
}

#[test]
fn invalid_config_exits_2() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.cfg"), "[model]\nwidht = 3\n").unwrap();
    let o = act(&["gen-data", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widht"));
    let o = act(&["gen-data"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_exit_3() {
    let dir = setup();
    let o = act(&["gen-data", "--config", "nope.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let o = act(&["train-mpm", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gen_data_out_moves_the_dataset() {
    let dir = setup();
    let o = act(&["gen-data", "--config", "run.cfg", "--out", "elsewhere"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("elsewhere/train.txt").is_file());
    assert!(!dir.path().join("data").exists());
}
