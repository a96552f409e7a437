use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motion_ood::model::{load_checkpoint, Branch, LoadOptions};

const SMALL: &[&str] = &[
    "--hidden",
    "16",
    "--blocks",
    "2",
    "--epochs",
    "2",
    "--set",
    "model.latent=2",
    "--set",
    "model.encoder_blocks=1",
    "--set",
    "model.decoder_blocks=1",
    "--set",
    "data.synthetic_classes=2",
    "--set",
    "train.stride=5",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motion-ood")).args(args).output().expect("spawn motion-ood")
}

fn run_small(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "-o", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

#[track_caller]
fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gcn_params(ckpt: &Path) -> Vec<(String, Vec<u64>)> {
    let m = load_checkpoint(ckpt, LoadOptions::default()).unwrap();
    m.params()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.branch == Branch::Gcn)
        .map(|(i, e)| (e.name.clone(), m.params().get(i).data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn train_writes_a_loadable_checkpoint_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small("train", dir.path(), &["--seed", "5"]);
    ok(&o);
    let m = load_checkpoint(&dir.path().join("best.ckpt"), LoadOptions::default()).unwrap();
    assert!(m.has_vae());
    assert!(dir.path().join("loss_log.csv").is_file());
    let ini = fs::read_to_string(dir.path().join("config.ini")).unwrap();
    assert!(ini.contains("seed = 5") && ini.contains("hidden = 16"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small("train", dir.path(), &["--lambda", "-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lambda"));

    let missing = dir.path().join("no_such_root");
    let o = run_small("benchmark", &dir.path().join("b"), &["--data", missing.to_str().unwrap(), "--preset", "h36m-walking"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));

    let o = run_small("train", dir.path(), &["--set", "model.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn lambda_zero_matches_the_plain_network() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("hybrid"), dir.path().join("plain"));
    ok(&run_small("train", &a, &["--lambda", "0", "--seed", "2"]));
    ok(&run_small("train", &b, &["--no-vae", "--seed", "2"]));
    let (pa, pb) = (gcn_params(&a.join("best.ckpt")), gcn_params(&b.join("best.ckpt")));
    assert!(!pa.is_empty());
    assert_eq!(pa, pb);
}

#[test]
fn benchmark_covers_every_cell_per_seed_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run_small("benchmark", &a, &["--seeds", "3"]));
    let per_seed = fs::read_to_string(a.join("per_seed.csv")).unwrap();
    // 2 variants × (2 actions + OoD average) × 6 horizons, once per seed
    assert_eq!(per_seed.lines().count() - 1, 3 * 2 * 3 * 6);
    for seed in 0..3 {
        assert_eq!(per_seed.lines().filter(|l| l.split(',').nth(3) == Some(&seed.to_string())).count(), 36);
    }
    assert!(a.join("results.csv").is_file() && a.join("results.txt").is_file());

    ok(&run_small("benchmark", &b, &["--seeds", "3"]));
    assert_eq!(per_seed, fs::read_to_string(b.join("per_seed.csv")).unwrap());
    assert_eq!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn classify_writes_a_square_confusion_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "classify",
        "-o",
        dir.path().to_str().unwrap(),
        "--set",
        "data.synthetic_classes=2",
        "--set",
        "classifier.epochs=30",
        "--set",
        "classifier.learning_rate=1e-3",
        "--set",
        "classifier.stride=5",
    ]);
    ok(&o);
    let csv = fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 3);
        let counts: Vec<u64> = r[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(counts[i] > counts[1 - i], "row {i}: {counts:?}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("scores.csv")).unwrap().lines().count(), 3);
}

#[test]
fn latents_need_a_vae_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (hyb, plain) = (dir.path().join("hybrid"), dir.path().join("plain"));
    ok(&run_small("train", &hyb, &[]));
    ok(&run_small("train", &plain, &["--no-vae"]));

    let ckpt = hyb.join("best.ckpt");
    let (l1, l2) = (dir.path().join("l1"), dir.path().join("l2"));
    for out in [&l1, &l2] {
        ok(&run_small("latents", out, &["--checkpoint", ckpt.to_str().unwrap()]));
    }
    let latents = fs::read_to_string(l1.join("latents.csv")).unwrap();
    // id, label, then 8 joints × latent 2
    assert!(latents.lines().all(|l| l.split(',').count() == 2 + 16));
    assert!(latents.lines().count() > 1);
    let proj = fs::read_to_string(l1.join("projection.csv")).unwrap();
    assert!(proj.lines().all(|l| l.split(',').count() == 4));
    assert_eq!(proj.lines().count(), latents.lines().count());
    assert_eq!(latents, fs::read_to_string(l2.join("latents.csv")).unwrap());
    assert_eq!(proj, fs::read_to_string(l2.join("projection.csv")).unwrap());

    let o = run_small("latents", &dir.path().join("l3"), &["--checkpoint", plain.join("best.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no VAE branch"), "{}", stderr(&o));

    let o = run_small("latents", &dir.path().join("l4"), &["--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn written_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run_small("train", &a, &["--seed", "9", "--lambda", "0.01"]));
    let config = a.join("config.ini");
    ok(&run(&["train", "--config", config.to_str().unwrap(), "-o", b.to_str().unwrap()]));
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("loss_log.csv")).unwrap(), fs::read(b.join("loss_log.csv")).unwrap());
}

#[test]
fn grad_check_reports_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "grad-check",
        "-o",
        dir.path().to_str().unwrap(),
        "--set",
        "gradcheck.joints=3",
        "--set",
        "gradcheck.hidden=4",
        "--set",
        "gradcheck.blocks=1",
        "--set",
        "gradcheck.latent=2",
        "--set",
        "gradcheck.tolerance=1e-3",
        "--set",
        "gradcheck.lambdas=0,0.5",
    ]);
    ok(&o);
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows.is_empty() && rows.len() % 2 == 0);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}
