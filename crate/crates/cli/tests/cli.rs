use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = "\
scenario.M = 4
scenario.U = 3
scenario.tau_p = 3
scenario.seed = 11
dataset.samples = 12
model.hidden = 16
model.T = 4
train.batch_size = 4
train.max_epochs = 1
sweep.variable = snr
sweep.grid = 0, 10
sweep.trials = 3
";

fn cddm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cddm"))
        .args(args)
        .output()
        .expect("spawn cddm")
}

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_twice_gives_identical_files() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cddm(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["dataset.manifest", "dataset.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let meta = std::fs::read_to_string(a.join("generate.run")).unwrap();
    assert!(meta.contains("run.seed = 7"), "{meta}");
    assert!(meta.contains("run.config_sha256 = "));
    let c = dir.path().join("c");
    let o = cddm(&["generate", "--config", s(&cfg), "--seed", "8", "--out", s(&c)]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(a.join("dataset.bin")).unwrap(), std::fs::read(c.join("dataset.bin")).unwrap());
}

#[test]
fn eval_on_missing_checkpoint_exits_one_naming_the_path() {
    let (dir, cfg) = setup();
    let missing = dir.path().join("nope.ckpt");
    let out = dir.path().join("out");
    let o = cddm(&["eval", "--config", s(&cfg), "--checkpoint", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    let (dir, cfg) = setup();
    assert_eq!(cddm(&["generate", "--config", s(&cfg), "--bogus"]).status.code(), Some(2));
    assert_eq!(cddm(&["generate"]).status.code(), Some(2));
    let absent = dir.path().join("absent.cfg");
    let o = cddm(&["generate", "--config", s(&absent)]);
    assert_eq!(o.status.code(), Some(2));
    let typo = dir.path().join("typo.cfg");
    std::fs::write(&typo, "scenario.MM = 4\n").unwrap();
    assert_eq!(cddm(&["generate", "--config", s(&typo)]).status.code(), Some(2));
}

#[test]
fn baseline_sweep_emits_csv_header_and_reproduces() {
    let (dir, cfg) = setup();
    let out = dir.path().join("sweep");
    let run = || {
        let o = cddm(&["sweep", "--config", s(&cfg), "--baseline-only", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let first = run();
    let mut lines = first.lines();
    assert_eq!(lines.next(), Some("grid,method,nmse_db,nmse_std_db,trials"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0,LS,") && rows[3].starts_with("10,MMSE,"), "{rows:?}");
    assert_eq!(first, run());
}

fn digest(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    files.sort();
    files
}

#[test]
fn train_then_eval_and_sweep_leave_inputs_untouched() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    assert!(cddm(&["generate", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let with_data = dir.path().join("with_data.cfg");
    std::fs::write(&with_data, format!("{CONFIG}data.dir = {}\n", data.display())).unwrap();
    let models = dir.path().join("models");
    let o = cddm(&["train", "--config", s(&with_data), "--seed", "3", "--out", s(&models)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["cddm.ckpt", "tddm.ckpt", "cddm_log.csv", "tddm_log.csv", "train.run"] {
        assert!(models.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(models.join("cddm_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,lr\n1,"));

    let before = (digest(&data), digest(&models));
    let eval_out = dir.path().join("eval");
    let (c, t) = (models.join("cddm.ckpt"), models.join("tddm.ckpt"));
    let o = cddm(&[
        "eval", "--config", s(&with_data), "--checkpoint", s(&c), "--checkpoint", s(&t),
        "--start-step", "matched", "--out", s(&eval_out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(eval_out.join("eval.csv")).unwrap();
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["LS", "MMSE", "TDDM", "CDDM"]);

    let sweep_out = dir.path().join("sweep");
    let o = cddm(&[
        "sweep", "--config", s(&cfg), "--checkpoint", s(&c), "--checkpoint", s(&t), "--out", s(&sweep_out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(sweep_out.join("sweep.csv")).unwrap().lines().count(), 9);
    assert_eq!(before, (digest(&data), digest(&models)));
}

#[test]
fn sweep_with_mismatched_checkpoint_names_both_dims() {
    let (dir, cfg) = setup();
    let models = dir.path().join("models");
    assert!(cddm(&["train", "--config", s(&cfg), "--out", s(&models)]).status.success());
    let wide = dir.path().join("wide.cfg");
    std::fs::write(&wide, CONFIG.replace("scenario.M = 4", "scenario.M = 8")).unwrap();
    let o = cddm(&[
        "sweep", "--config", s(&wide), "--checkpoint", s(&models.join("tddm.ckpt")),
        "--out", s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("[3, 2, 4]") && err.contains("[3, 2, 8]"), "{err}");
}
