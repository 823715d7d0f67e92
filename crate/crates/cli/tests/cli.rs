use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

struct Env {
    tmp: TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            tmp: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_defectgen"))
            .args(args)
            .env("DEFECTGEN_RUNS_ROOT", self.path("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Vec<String> {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap().lines().map(str::to_string).collect()
    }

    fn write(&self, name: &str, text: &str) -> String {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    }
}

fn value<'a>(lines: &'a [String], key: &str) -> &'a str {
    lines
        .iter()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in {lines:?}"))
}

fn tiny_config(data: &Path, large: Option<&str>, small: Option<&str>) -> String {
    let ckpt = |c: Option<&str>| c.map_or(String::new(), |p| format!("checkpoint = {p:?}\n"));
    format!(
        "seed = 1\n\
         [dataset]\nroot = {:?}\n\
         [dataset.toy]\ntrain_count = 4\nval_count = 4\nresolution = 32\n\
         [schedule]\nsteps = 10\n\
         [model_large]\npreset = \"large\"\nbase_channels = 4\n{}\
         [model_small]\npreset = \"small\"\nbase_channels = 4\n{}\
         [train]\niterations = 3\n\
         [sampler]\ncount = 2\n\
         [augment]\nseeds = [0, 1]\n\
         [seg]\nepochs = 1\nwidth = 4\n",
        data.to_string_lossy(),
        ckpt(large),
        ckpt(small)
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn config_errors_exit_two() {
    let env = Env::new();
    let missing = env.run(&["gen-toy", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    let unknown = env.write("bad.toml", "seed = 1\nmystery = 3\n");
    assert_eq!(env.run(&["gen-toy", "--config", &unknown]).status.code(), Some(2));
    let no_seed = env.write("noseed.toml", "[schedule]\nsteps = 10\n");
    assert_eq!(env.run(&["gen-toy", "--config", &no_seed]).status.code(), Some(2));
    let bad_u = env.write("badu.toml", "seed = 1\n[schedule]\nsteps = 10\n[sampler]\nswitch = 11\n");
    assert_eq!(env.run(&["gen-toy", "--config", &bad_u]).status.code(), Some(2));
    assert!(!env.path("runs").exists());
}

#[test]
fn validate_dataset_reports_violations() {
    let env = Env::new();
    let data = env.path("data");
    let cfg = env.write("cfg.toml", &tiny_config(&data, None, None));
    let lines = env.ok(&["gen-toy", "--config", &cfg]);
    let root = value(&lines, "dataset").to_string();
    assert!(Path::new(&lines[0]).join("meta/config.toml").exists());
    env.ok(&["validate-dataset", &root, "--split", "train"]);
    env.ok(&["validate-dataset", &root, "--split", "val", "--pool-factor", "32"]);
    assert_eq!(env.run(&["validate-dataset", &root, "--split", "nope"]).status.code(), Some(2));

    let misfit = env.run(&["validate-dataset", &root, "--split", "val", "--pool-factor", "64"]);
    assert_eq!(misfit.status.code(), Some(1));
    assert!(!misfit.stderr.is_empty());

    let masks = Path::new(&root).join("train/masks");
    let first = fs::read_dir(&masks).unwrap().next().unwrap().unwrap().path();
    fs::write(&first, b"not a png").unwrap();
    let broken = env.run(&["validate-dataset", &root, "--split", "train"]);
    assert_eq!(broken.status.code(), Some(2));
}

#[test]
fn full_pipeline() {
    let env = Env::new();
    let cfg0 = env.write("cfg0.toml", &tiny_config(&env.path("unused"), None, None));
    let root = PathBuf::from(value(&env.ok(&["gen-toy", "--config", &cfg0]), "dataset"));
    let cfg1 = env.write("cfg1.toml", &tiny_config(&root, None, None));

    let large = value(&env.ok(&["train", "--config", &cfg1, "--model", "large"]), "checkpoint").to_string();
    let small_run = env.ok(&["train", "--config", &cfg1, "--model", "small"]);
    let small = value(&small_run, "checkpoint").to_string();
    assert!(Path::new(&small_run[0]).join("outputs/losses.csv").exists());
    assert_eq!(env.run(&["train", "--config", &cfg1, "--model", "huge"]).status.code(), Some(2));

    let cfg = env.write("cfg.toml", &tiny_config(&root, Some(&large), Some(&small)));

    // u = T runs the large model alone.
    let two = env.ok(&["sample", "--config", &cfg, "--u", "10"]);
    let single = env.ok(&["sample-single", "--config", &cfg, "--model", "large"]);
    assert_eq!(value(&two, "samples_sha256"), value(&single, "samples_sha256"));
    let zero = env.ok(&["sample", "--config", &cfg, "--u", "0"]);
    let small_only = env.ok(&["sample-single", "--config", &cfg, "--model", "small"]);
    assert_eq!(value(&zero, "samples_sha256"), value(&small_only, "samples_sha256"));
    let hash_file = fs::read_to_string(Path::new(&two[0]).join("outputs/samples.sha256")).unwrap();
    assert_eq!(hash_file.trim(), value(&two, "samples_sha256"));
    assert_eq!(env.run(&["sample", "--config", &cfg, "--u", "11"]).status.code(), Some(2));

    let sweep = |jobs: &str| {
        let lines = env.ok(&[
            "sweep", "--config", &cfg, "--u-list", "0,3,6,10", "--rf-list", "small", "--jobs", jobs,
        ]);
        fs::read_to_string(Path::new(&lines[0]).join("outputs/sweep.csv")).unwrap()
    };
    let serial = sweep("1");
    assert_eq!(serial.lines().count(), 5);
    assert_eq!(serial, sweep("2"));

    let identity = env.ok(&["augment", "--config", &cfg, "--ratio", "0"]);
    let aug_root = PathBuf::from(value(&identity, "dataset"));
    for sub in ["images", "masks"] {
        assert_eq!(dir_bytes(&aug_root.join("train").join(sub)), dir_bytes(&root.join("train").join(sub)));
    }
    let doubled = env.ok(&["augment", "--config", &cfg, "--ratio", "1"]);
    assert!(doubled.contains(&"real=4 synthetic=4".to_string()), "{doubled:?}");

    let seg = env.ok(&["seg-train", "--config", &cfg]);
    let model = value(&seg, "model").to_string();
    let eval = env.ok(&["seg-eval", "--config", &cfg, "--model", &model]);
    let pred = value(&eval, "pred_masks").to_string();
    assert!(Path::new(&eval[0]).join("outputs/miou.json").exists());

    let classmap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("classmap.json")).unwrap()).unwrap();
    let defect = classmap["1"].as_str().expect("a defect class");
    let rules = env.write("toy.txt", &format!("{} forbidden\n", defect));
    let gt = root.join("val/masks").to_string_lossy().into_owned();
    let qc = env.ok(&["qc-sim", "--rules", &rules, "--pred-masks", &gt, "--gt-masks", &gt]);
    assert!(qc.contains(&"fp=0".to_string()) && qc.contains(&"fn=0".to_string()), "{qc:?}");
    assert!(qc.contains(&"recall=1".to_string()), "{qc:?}");
    assert!(qc.contains(&"fpr=0".to_string()) || qc.contains(&"fpr=absent".to_string()), "{qc:?}");
    let cross = env.ok(&["qc-sim", "--rules", &rules, "--pred-masks", &pred, "--gt-masks", &gt]);
    assert!(cross.iter().any(|l| l.starts_with("recall=")));
    let bad_rules = env.write("bad.txt", "nonexistent forbidden\n");
    assert_eq!(
        env.run(&["qc-sim", "--rules", &bad_rules, "--pred-masks", &gt, "--gt-masks", &gt]).status.code(),
        Some(2)
    );
}
