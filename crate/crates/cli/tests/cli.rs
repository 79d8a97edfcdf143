use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kbpn::checkpoint::{latest_step_dir, PARAMS_FILE};
use kbpn::config::{self, Override};
use kbpn::degradation::{degrade, gaussian_kernel, load_kernel, DownMode, GaussianSpec};
use kbpn::imaging::{load_image, save_image, BitDepth};
use kbpn::synthetic::synthetic_image;
use kbpn::training::{load_pools, train, TrainConfig, Trainer};

fn kbpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbpn")).args(args).env_remove("KBPN_DATA_ROOT").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 14] = [
    "--set", "network.base_channels=8",
    "--set", "network.stages=2",
    "--set", "lr_patch_size=16",
    "--set", "batch_size=1",
    "--set", "synthetic.train_images=1",
    "--set", "synthetic.val_images=1",
    "--set", "synthetic.size=64",
];

fn tiny_overrides(dir: &Path) -> Vec<Override> {
    let mut v: Vec<Override> = TINY.chunks(2).map(|c| Override::parse(c[1]).unwrap()).collect();
    v.push(Override::parse("val_samples=1").unwrap());
    v.push(Override::parse(&format!("checkpoint_dir=\"{}\"", dir.display())).unwrap());
    v
}

fn train_tiny(dir: &Path, seed: &str) -> Output {
    let ckpt = dir.display().to_string();
    let mut args = vec!["train", "--seed", seed, "--steps", "2", "--set", "val_samples=1", "--checkpoint-dir", &ckpt];
    args.extend(TINY);
    kbpn(&args)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&kbpn(&["--help"])), 0);
    assert_eq!(code(&kbpn(&["--version"])), 0);
    assert_eq!(code(&kbpn(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&kbpn(&[])), 1);
    assert_eq!(code(&kbpn(&["no-such-command"])), 1);
    assert_eq!(code(&kbpn(&["selfcheck", "--no-such-flag"])), 1);
    assert_eq!(code(&kbpn(&["synth-kernel", "--sigma-x", "2", "--out", "/dev/null", "--set", "bogus=1"])), 1);
    assert_eq!(code(&kbpn(&["synth-kernel", "--sigma-x", "-1", "--out", "/dev/null"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lr.png");
    let o = kbpn(&["degrade", "--hr", "/no/such/file.png", "--kernel", "/no/such/k.bin", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("error"));
    assert_eq!(code(&kbpn(&["eval", "--ckpt", p(&dir.path().join("missing")), "--synthetic", "1"])), 2);
}

#[test]
fn synth_kernel_matches_library_and_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("K.bin");
    let o = kbpn(&["synth-kernel", "--sigma-x", "2.6", "--sigma-y", "4.0", "--theta", "0", "--k", "21", "--out", p(&out), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (k, meta) = load_kernel(&out).unwrap();
    let expected = gaussian_kernel(&GaussianSpec { sigma_x: 2.6, sigma_y: 4.0, theta: 0.0 }, 21).unwrap();
    assert_eq!(k, expected);
    let meta = meta.expect("sidecar written");
    assert_eq!((meta.k, meta.sigma_x, meta.sigma_y), (21, Some(2.6), Some(4.0)));
}

#[test]
fn random_kernel_depends_only_on_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.bin"), dir.path().join("b.bin"), dir.path().join("c.bin"));
    for (path, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert_eq!(code(&kbpn(&["synth-kernel", "--out", p(path), "--seed", seed])), 0);
    }
    let read = |x: &PathBuf| std::fs::read(x).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn degrade_is_byte_identical_to_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let hr_path = dir.path().join("hr.png");
    save_image(&synthetic_image(48, 64, 3), &hr_path, BitDepth::Eight).unwrap();
    let k_path = dir.path().join("K.bin");
    assert_eq!(code(&kbpn(&["synth-kernel", "--sigma-x", "1.3", "--k", "21", "--out", p(&k_path)])), 0);
    let cli_out = dir.path().join("lr-cli.png");
    let o = kbpn(&["degrade", "--hr", p(&hr_path), "--kernel", p(&k_path), "--scale", "4", "--mode", "area", "--out", p(&cli_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let lib_out = dir.path().join("lr-lib.png");
    let (k, _) = load_kernel(&k_path).unwrap();
    let lr = degrade(&load_image(&hr_path).unwrap(), &k, 4, DownMode::Area).unwrap();
    save_image(&lr, &lib_out, BitDepth::Eight).unwrap();
    assert_eq!(std::fs::read(&cli_out).unwrap(), std::fs::read(&lib_out).unwrap());
    assert_eq!((lr.height(), lr.width()), (12, 16));
}

#[test]
fn degrade_rejects_indivisible_sizes_unless_cropping() {
    let dir = tempfile::tempdir().unwrap();
    let hr_path = dir.path().join("hr.png");
    save_image(&synthetic_image(50, 64, 3), &hr_path, BitDepth::Eight).unwrap();
    let k_path = dir.path().join("K.bin");
    assert_eq!(code(&kbpn(&["synth-kernel", "--sigma-x", "1.3", "--out", p(&k_path)])), 0);
    let out = dir.path().join("lr.png");
    let args = ["degrade", "--hr", p(&hr_path), "--kernel", p(&k_path), "--out", p(&out)];
    assert_eq!(code(&kbpn(&args)), 1);
    let mut cropped = args.to_vec();
    cropped.push("--crop");
    assert_eq!(code(&kbpn(&cropped)), 0);
    assert_eq!(load_image(&out).unwrap().height(), 12);
}

#[test]
fn every_run_logs_seed_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("K.bin");
    let o = kbpn(&["synth-kernel", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let err = stderr(&o);
    assert!(err.contains("random seed"), "{err}");
    assert!(err.contains("resolved config"), "{err}");
    assert!(err.contains("[network]"), "{err}");
}

#[test]
fn config_file_then_flags_then_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 17\nbatch_size = 3\n[network]\nstages = 2\n").unwrap();
    let out = dir.path().join("K.bin");
    let o = kbpn(&["synth-kernel", "--out", p(&out), "--config", p(&cfg), "--set", "network.stages=5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("seed 17"), "{err}");
    assert!(err.contains("batch_size = 3"), "{err}");
    assert!(err.contains("stages = 5"), "{err}");
    assert!(!err.contains("random seed"), "{err}");
    let o = kbpn(&["synth-kernel", "--out", p(&out), "--config", p(&cfg), "--seed", "4"]);
    assert!(stderr(&o).contains("seed 4"));
}

#[test]
fn data_root_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("K.bin");
    let o = Command::new(env!("CARGO_BIN_EXE_kbpn"))
        .args(["synth-kernel", "--sigma-x", "1", "--out", p(&out), "--set", "data_root=\"elsewhere\""])
        .env("KBPN_DATA_ROOT", "/srv/images")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    // The flag layer sits above the environment layer.
    assert!(stderr(&o).contains("data_root = \"elsewhere\""), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_kbpn"))
        .args(["synth-kernel", "--sigma-x", "1", "--out", p(&out)])
        .env("KBPN_DATA_ROOT", "/srv/images")
        .output()
        .unwrap();
    assert!(stderr(&o).contains("data_root = \"/srv/images\""), "{}", stderr(&o));
}

#[test]
fn train_matches_library_and_feeds_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_tiny(&run, "9");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (step, ckpt) = latest_step_dir(&run).unwrap().expect("checkpoint written");
    assert_eq!(step, 2);

    // Same resolved config through the library.
    let lib_run = dir.path().join("lib");
    let mut cfg: TrainConfig = config::resolve(None, &tiny_overrides(&lib_run)).unwrap();
    cfg.seed = 9;
    cfg.total_steps = 2;
    train(cfg, |_| {}).unwrap();
    let (_, lib_ckpt) = latest_step_dir(&lib_run).unwrap().unwrap();
    assert!(std::fs::read(ckpt.join(PARAMS_FILE)).unwrap() == std::fs::read(lib_ckpt.join(PARAMS_FILE)).unwrap(), "CLI and library parameters differ");
    for f in ["metrics.csv", "eval.csv"] {
        let lines = std::fs::read_to_string(run.join(f)).unwrap().lines().count();
        assert!(lines >= 2, "{f} has {lines} lines");
    }

    // Infer with traces: 2 feature + 2 residual renders + final residual + summary.
    let lr_path = dir.path().join("lr.png");
    save_image(&synthetic_image(16, 16, 4), &lr_path, BitDepth::Eight).unwrap();
    let sr_path = dir.path().join("sr.png");
    let traces = dir.path().join("traces");
    let o = kbpn(&["infer", "--ckpt", p(&run), "--lr", p(&lr_path), "--out", p(&sr_path), "--dump-traces", p(&traces)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sr = load_image(&sr_path).unwrap();
    assert_eq!((sr.channels(), sr.height(), sr.width()), (3, 64, 64));
    assert!(sr_path.with_extension("kernel.bin").is_file());
    let mut names: Vec<String> = std::fs::read_dir(&traces).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["feature-t1.png", "feature-t2.png", "residual-final.png", "residual-t1.png", "residual-t2.png", "traces.json"]);

    let csv = dir.path().join("bench.csv");
    let o = kbpn(&["eval", "--ckpt", p(&run), "--synthetic", "1", "--sigma", "1.3", "--sigma", "2.6", "--aniso", "1.3,2.6,0.5", "--out", p(&csv), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PSNR"));
}

#[test]
fn resumed_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train_tiny(&a, "3")), 0);

    // Interrupt a 2-step run after its first step.
    let mut cfg: TrainConfig = config::resolve(None, &tiny_overrides(&b)).unwrap();
    cfg.seed = 3;
    cfg.total_steps = 2;
    let (pool, val) = load_pools(&cfg).unwrap();
    let mut trainer = Trainer::new(cfg, pool, &val).unwrap();
    trainer.train_step().unwrap();
    trainer.save_checkpoint().unwrap();

    let o = train_tiny(&b, "3");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("resuming at step 1"));
    let read = |d: &Path| std::fs::read(latest_step_dir(d).unwrap().unwrap().1.join(PARAMS_FILE)).unwrap();
    assert!(read(&a) == read(&b), "resumed parameters differ");
    let last_row = |d: &Path| std::fs::read_to_string(d.join("metrics.csv")).unwrap().lines().last().unwrap().to_string();
    assert_eq!(last_row(&a), last_row(&b));
    assert!(last_row(&a).starts_with("1,"));
}

#[test]
fn viz_kernel_and_plot_params_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let k_path = dir.path().join("K.bin");
    assert_eq!(code(&kbpn(&["synth-kernel", "--sigma-x", "2.6", "--out", p(&k_path)])), 0);
    let out = dir.path().join("viz").join("k.png");
    let o = kbpn(&["viz-kernel", "--kernel", p(&k_path), "--gt-sigma", "2.6", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.is_file());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["l1"].as_f64(), Some(0.0));

    let plots = dir.path().join("plots");
    let o = kbpn(&["plot-params", "--stages", "1,2,3", "--psnr", "25.1,-,26.0", "--out", p(&plots), "--set", "network.base_channels=8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(plots.join("params_vs_stages.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(plots.join("params_vs_stages.svg").is_file());
    assert_eq!(code(&kbpn(&["plot-params", "--stages", "1,2", "--psnr", "25", "--out", p(&plots)])), 1);
}

#[test]
fn selfcheck_prints_pass_lines() {
    let o = kbpn(&["selfcheck", "--cases", "5", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("PASS degrade-oracle"), "{out}");
    assert!(out.contains("PASS grad up-projection"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}
