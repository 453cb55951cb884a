use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use linmix_cli::batching::Batcher;
use linmix_cli::config::{parse_config, RunConfig};
use linmix_cli::features::{synth_features, SynthSpec};
use linmix_cli::pretrain::open_session;
use linmix_core::bench::parse_csv;
use linmix_core::bestrq::{compute_targets, Codebook, RandomProjection, STACK};
use linmix_core::mixers::MixerKind;
use linmix_core::Tensor;

fn linmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linmix")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 16] = [
    "--set",
    "d_model=16",
    "--set",
    "n_layers=1",
    "--set",
    "d_ffn=16",
    "--set",
    "d_feat=8",
    "--set",
    "vocab=8",
    "--set",
    "conv_kernel=3",
    "--set",
    "n_heads=2",
    "--set",
    "d_code=4",
];

fn tiny_pretrain(out: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "pretrain",
        "--mixer",
        "summarymixing",
        "--steps",
        steps,
        "--synthetic",
        "n=8,len=40..80,d=8",
    ];
    args.extend(TINY);
    args.extend([
        "--set",
        "mask_prob=0.1",
        "--set",
        "mask_span=2",
        "--frame-cap",
        "160",
        "--out",
        out.to_str().unwrap(),
    ]);
    args.extend(extra);
    linmix(&args)
}

#[test]
fn help_exits_zero() {
    for args in [
        &["--help"][..],
        &["bench", "--help"],
        &["pretrain", "--help"],
        &["verify", "--help"],
    ] {
        let o = linmix(args);
        assert_eq!(code(&o), 0, "{args:?}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&linmix(&["bench", "--no-such-flag"])), 2);
    assert_eq!(code(&linmix(&[])), 2);
    assert_eq!(code(&linmix(&["verify", "--only", "no-such-tag"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = linmix(&["pretrain", "--synthetic", "n=4,len=400..400", "--out", out]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn malformed_config_line_is_cited() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# model\nseed = 1\nd_model = abc\n").unwrap();
    let o = linmix(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.cfg:3"), "{}", stderr(&o));
}

#[test]
fn flags_override_file_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 7\nsteps = 12\n").unwrap();
    let c = parse_config(Some(&cfg), &[("seed".into(), "9".into())]).unwrap();
    assert_eq!(c.seed(), 9);
    assert_eq!(c.steps, 12);
    assert_eq!(c.repeats, RunConfig::default().repeats);
    fs::write(&cfg, "").unwrap();
    assert_eq!(parse_config(Some(&cfg), &[]).unwrap(), RunConfig::default());
}

#[test]
fn bench_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec![
        "bench",
        "--kinds",
        "mhsa,summarymixing",
        "--lengths",
        "32,64,128",
        "--repeats",
        "3",
        "--warmup",
        "0",
        "--batch-size",
        "1",
        "--budget",
        "none",
        "--out",
        out,
    ];
    args.extend(TINY);
    let o = linmix(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let parsed = parse_csv(&fs::read_to_string(dir.path().join("bench.csv")).unwrap()).unwrap();
    assert_eq!(parsed.rows.len(), 6);
    let summary = fs::read_to_string(dir.path().join("bench_summary.txt")).unwrap();
    assert!(summary.contains("summarymixing") && summary.contains("relative to mhsa"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("time_exp"));
}

#[test]
fn pretrain_logs_every_step_and_reruns_from_echo() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = tiny_pretrain(&a, "20", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(a.join("loss.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "step,loss");
    assert_eq!(rows.len(), 21);
    assert!(rows[20].starts_with("20,"));
    assert!(a.join("checkpoint.bin").exists());

    // the echoed config alone reproduces the run
    let b = dir.path().join("b");
    let echo = a.join("config.txt");
    let o = linmix(&[
        "pretrain",
        "--config",
        echo.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(b.join("loss.csv")).unwrap(), log);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert_eq!(code(&tiny_pretrain(&full, "10", &[])), 0);
    assert_eq!(code(&tiny_pretrain(&split, "5", &[])), 0);
    let ckpt = split.join("checkpoint.bin");
    let o = tiny_pretrain(&split, "10", &["--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(split.join("loss.csv")).unwrap(),
        fs::read_to_string(full.join("loss.csv")).unwrap()
    );
}

#[test]
fn resume_with_different_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert_eq!(code(&tiny_pretrain(&a, "2", &[])), 0);
    let ckpt = a.join("checkpoint.bin");
    let o = tiny_pretrain(&a, "4", &["--resume", ckpt.to_str().unwrap(), "--set", "lr=0.5"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn diverging_loss_aborts_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_pretrain(
        &dir.path().join("a"),
        "50",
        &["--set", "lr=1e200", "--set", "clip_norm=none"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("step "), "{}", stderr(&o));
}

#[test]
fn unreadable_feature_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("missing.bin");
    let o = linmix(&["pretrain", "--features", missing.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.bin"));
}

#[test]
fn pretrain_reads_feature_container() {
    use linmix_core::tensorcore::container::{write_container, Record};
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("feats.bin");
    let seqs = synth_features(&"n=6,len=40..60".parse().unwrap(), 8, 3).unwrap();
    let records: Vec<Record> = seqs.iter().map(|s| Record::from_tensor(None, s)).collect();
    write_container(&feats, &records).unwrap();
    let out = dir.path().join("run");
    let mut args = vec![
        "pretrain",
        "--mixer",
        "fastformer",
        "--steps",
        "3",
        "--features",
        feats.to_str().unwrap(),
    ];
    args.extend(TINY);
    args.extend([
        "--set",
        "mask_prob=0.2",
        "--frame-cap",
        "120",
        "--out",
        out.to_str().unwrap(),
    ]);
    let o = linmix(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn batches_stay_under_frame_cap() {
    let seqs = synth_features(&"n=64,len=400..800".parse().unwrap(), 80, 1).unwrap();
    for cap in [500, 1000, 3200] {
        let b = Batcher::new(seqs.clone(), cap, 2).unwrap();
        for step in 0..3 * b.len() as u64 {
            let (n, t) = b.shape_at(step);
            assert!(n * t <= cap, "cap {cap} step {step}: {n} x {t}");
        }
    }
}

#[test]
fn synthetic_stream_is_deterministic_and_diverse() {
    let spec: SynthSpec = "n=64,len=400..800,d=80".parse().unwrap();
    let first = |seed| {
        Batcher::new(synth_features(&spec, 80, seed).unwrap(), 3200, seed)
            .unwrap()
            .batch(0)
            .unwrap()
    };
    let (a, b) = (first(5), first(5));
    assert_eq!(a.shape(), b.shape());
    assert_eq!(a.data(), b.data());
    assert_eq!(a.dim(2), 80);
    assert_ne!(first(6).data(), a.data());

    let many: SynthSpec = "n=128,len=400..800,d=80".parse().unwrap();
    let proj = RandomProjection::new(0, STACK * 80, 16).unwrap();
    let book = Codebook::new(0, 512, 16).unwrap();
    let (mut codes, mut frames) = (HashSet::new(), 0);
    for s in synth_features(&many, 80, 5).unwrap() {
        let x = Tensor::new(s.data().to_vec(), &[1, s.dim(0), 80]).unwrap();
        let t = compute_targets(&x, &proj, &book).unwrap();
        frames += t.len();
        codes.extend(t);
        if frames >= 10_000 {
            break;
        }
    }
    assert!(frames >= 10_000);
    assert!(codes.len() >= 50, "{} distinct codes", codes.len());
}

#[test]
fn verify_filters_by_tag() {
    let o = linmix(&["verify", "--only", "mamba"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains(" pass ")).collect();
    assert!(!rows.is_empty());
    assert!(
        rows.iter().all(|r| r.contains("mamba") || r.starts_with("scan")),
        "{stdout}"
    );
    assert!(!stdout.contains("grad.mhsa"));
}

#[test]
fn injected_gradient_fault_fails_verify() {
    let o = linmix(&["verify", "--only", "grad.mhsa", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert!(stderr(&o).contains("grad.mhsa"));
}

#[test]
fn tiny_model_learns_synthetic_targets() {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("mixer", "summarymixing"),
        ("n_layers", "2"),
        ("d_model", "64"),
        ("vocab", "64"),
        ("frame_cap", "800"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    let mut s = open_session(&cfg, None).unwrap();
    let mut losses = Vec::new();
    s.run_to(1000, |_, l| {
        losses.push(l);
        Ok(())
    })
    .unwrap();
    let tail = &losses[899..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 64f64.ln() - 0.5, "mean loss over steps 900-1000: {mean}");
    assert_eq!(MixerKind::SummaryMixing, cfg.encoder().kind());
}
