use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[run]
seed = 5
[schedule]
num_steps = 8
[network]
channels = [2, 4]
[training]
batch_size = 3
num_iters = 8
[data]
count = 8
heldout = 2
size = 8
[oracle]
trajectories = 400
num_steps = 60
"#;

fn jpddm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jpddm"))
        .args(args)
        .env("JPDDM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn malformed_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[training]\nlearning_rat = 0.1\n");
    let out = jpddm(&["generate-data", "--config", &cfg, "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_jpddm"))
        .args(["oracle-check"])
        .env("JPDDM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn generate_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    for d in ["a", "b"] {
        let out = jpddm(&["generate-data", "--config", &cfg, "--out", s(&dir.path().join(d))]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert_eq!(a.len(), 8 * 2 + 3);
    assert_eq!(a, b);
    let other = jpddm(&["generate-data", "--config", &cfg, "--seed", "6", "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&other), 0);
    assert_ne!(files(&dir.path().join("c")), a);
}

#[test]
fn train_without_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let out = jpddm(&[
        "train",
        "--config",
        &cfg,
        "--data",
        s(&dir.path().join("nothing")),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn divergence_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("[training]\n", "[training]\ndivergence_threshold = 1e-9\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let data = dir.path().join("d");
    assert_eq!(code(&jpddm(&["generate-data", "--config", &cfg, "--out", s(&data)])), 0);
    let out = jpddm(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full = write_config(dir.path(), "full.toml", TINY);
    let half = write_config(dir.path(), "half.toml", &TINY.replace("num_iters = 8", "num_iters = 4"));
    let data = dir.path().join("d");
    assert_eq!(code(&jpddm(&["generate-data", "--config", &full, "--out", s(&data)])), 0);

    let straight = dir.path().join("straight");
    let out = jpddm(&["train", "--config", &full, "--data", s(&data), "--out", s(&straight)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let resumed = dir.path().join("resumed");
    assert_eq!(code(&jpddm(&["train", "--config", &half, "--data", s(&data), "--out", s(&resumed)])), 0);
    let out = jpddm(&["train", "--config", &full, "--data", s(&data), "--out", s(&resumed), "--resume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    for f in ["model.ckpt", "model.adam", "metrics.csv"] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(resumed.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write_config(dir.path(), "z.toml", &TINY.replace("num_iters = 8", "num_iters = 0"));
    let data = dir.path().join("d");
    assert_eq!(code(&jpddm(&["generate-data", "--config", &zero, "--out", s(&data)])), 0);
    let run = dir.path().join("r");
    assert_eq!(code(&jpddm(&["train", "--config", &zero, "--data", s(&data), "--out", s(&run)])), 0);
    let ck = jpddm::checkpoint::load_checkpoint(&run.join("model.ckpt")).unwrap();
    let cfg = jpddm::config::RunConfig::parse(&fs::read_to_string(&zero).unwrap()).unwrap();
    let init = jpddm::network::ScoreNetwork::init(
        cfg.arch_spec().unwrap(),
        &mut jpddm::seeding::rng(cfg.seed_for("init")),
    )
    .unwrap();
    assert_eq!(ck.net, init);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "iter,loss,sigma_lo,sigma_hi,bucket_loss\n");
}

#[test]
fn sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let data = dir.path().join("d");
    let run = dir.path().join("r");
    assert_eq!(code(&jpddm(&["generate-data", "--config", &cfg, "--out", s(&data)])), 0);
    assert_eq!(code(&jpddm(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run)])), 0);
    let ckpt = run.join("model.ckpt");

    let smp = dir.path().join("s");
    let out = jpddm(&["sample", "--config", &cfg, "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&smp)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("max guide deviation 0e0"), "{}", stdout(&out));
    let names: Vec<String> = fs::read_to_string(smp.join("samples.txt"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(' ').next().unwrap().to_string())
        .collect();
    assert_eq!(names, ["00006", "00007"]);
    for sub in ["samples/00006.jpim", "samples/00006.pgm", "guides/00007.jpim", "targets/00007.jpim"] {
        assert!(smp.join(sub).is_file(), "{sub}");
    }

    // Explicit guide files, two of them, give two samples with distinct seeds.
    let by_file = dir.path().join("f");
    let g = data.join("pairs/00000_guide.jpim");
    let h = data.join("pairs/00001_guide.jpim");
    let out = jpddm(&[
        "sample", "--config", &cfg, "--checkpoint", s(&ckpt), "--guide", s(&g), "--guide", s(&h), "--out", s(&by_file),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let seeds: Vec<String> = fs::read_to_string(by_file.join("samples.txt"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(' ').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(seeds.len(), 2);
    assert_ne!(seeds[0], seeds[1]);

    let same = jpddm(&["eval", "--reference", s(&smp.join("targets")), "--candidate", s(&smp.join("targets"))]);
    assert_eq!(code(&same), 0);
    let text = stdout(&same);
    assert!(text.contains("00006,99,0,true"), "{text}");
    assert!(text.contains("mean,99,0,true"), "{text}");

    let baseline = jpddm(&[
        "eval",
        "--reference",
        s(&smp.join("targets")),
        "--candidate",
        s(&smp.join("guides")),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(code(&baseline), 0);
    let csv = fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert!(csv.starts_with("pair,psnr_db,mse,exact\n00006,"), "{csv}");

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = jpddm(&["eval", "--reference", s(&empty), "--candidate", s(&empty)]);
    assert_ne!(code(&out), 0);
    assert!(stdout(&out).is_empty());

    fs::remove_file(smp.join("guides/00006.jpim")).unwrap();
    let out = jpddm(&["eval", "--reference", s(&smp.join("targets")), "--candidate", s(&smp.join("guides"))]);
    assert_eq!(code(&out), 6);
    assert!(stderr(&out).contains("00006"), "{}", stderr(&out));
}

#[test]
fn sample_rejects_mismatches_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let data = dir.path().join("d");
    let run = dir.path().join("r");
    assert_eq!(code(&jpddm(&["generate-data", "--config", &cfg, "--out", s(&data)])), 0);
    assert_eq!(code(&jpddm(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run)])), 0);
    let ckpt = run.join("model.ckpt");

    let wrong = dir.path().join("wrong.jpim");
    jpddm::data_io::write_image(&wrong, &jpddm::Grid::zeros(16, 16)).unwrap();
    let out_dir = dir.path().join("s1");
    let out = jpddm(&["sample", "--config", &cfg, "--checkpoint", s(&ckpt), "--guide", s(&wrong), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 6);
    assert!(stderr(&out).contains("16x16"), "{}", stderr(&out));
    assert!(!out_dir.exists());

    let other = write_config(dir.path(), "o.toml", &TINY.replace("num_steps = 8", "num_steps = 8\nsigma_max = 20.0"));
    let out_dir = dir.path().join("s2");
    let out = jpddm(&["sample", "--config", &other, "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn oracle_check_reports_sweep_and_sign_errors() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = write_config(
        dir.path(),
        "sweep.toml",
        &TINY.replace("num_steps = 60", "num_steps = 60\ncorrector_sweep = [0, 1]"),
    );
    let out = jpddm(&["oracle-check", "--config", &sweep]);
    let text = stdout(&out);
    for m in ["M=0", "M=1"] {
        assert!(text.contains(&format!("mixture_ks         {m}")), "{text}");
        assert!(text.contains(&format!("guide_invariance   {m}")), "{text}");
    }

    let negated = write_config(
        dir.path(),
        "neg.toml",
        &TINY.replace("num_steps = 60", "num_steps = 60\nnegate_score = true"),
    );
    let out = jpddm(&["oracle-check", "--config", &negated, "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 7, "{}", stdout(&out));
    assert!(stderr(&out).contains("mixture_ks (M=1)"), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("o/oracle.csv")).unwrap();
    assert!(csv.contains("mixture_ks,1,"), "{csv}");
}
