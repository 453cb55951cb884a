use linmix_core::bench::{
    bootstrap_ci, build_report, fit_exponent, mean, parse_csv, run_scaling_sweep, to_csv, SweepSpec,
};
use linmix_core::encoder::EncoderConfig;
use linmix_core::mixers::{Mixer, MixerConfig, MixerKind};
use linmix_core::tensorcore::testutil::rand_tensor;
use linmix_core::tensorcore::{count_macs, no_grad};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn tiny(kind: MixerKind) -> linmix_core::Result<EncoderConfig> {
    let mut c = EncoderConfig::new(kind, 8, 1);
    c.mixer = c.mixer.with_heads(2);
    c.d_feat = 4;
    c.vocab = 6;
    c.d_ffn = 8;
    c.conv_kernel = 3;
    Ok(c)
}

#[test]
fn bootstrap_interval_covers_true_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dist = Normal::new(10.0, 1.0).unwrap();
    let covered = (0..100)
        .filter(|_| {
            let xs: Vec<f64> = (0..100).map(|_| dist.sample(&mut rng)).collect();
            let (lo, _, hi) = bootstrap_ci(&xs, 0.95, 2000, &mut rng).unwrap();
            lo <= 10.0 && 10.0 <= hi
        })
        .count();
    assert!(covered >= 93, "{covered} of 100 intervals cover the mean");
}

#[test]
fn exponent_of_noisy_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.05).unwrap();
    for trial in 0..100 {
        let pts: Vec<(f64, f64)> = [250.0, 500.0, 1000.0, 2000.0]
            .iter()
            .map(|&l: &f64| (l, 3e-7 * l * l * (1.0 + noise.sample(&mut rng))))
            .collect();
        let q = fit_exponent(&pts).unwrap();
        assert!((1.9..=2.1).contains(&q), "trial {trial}: {q}");
    }
}

#[test]
fn attention_macs_grow_quadratically_at_long_lengths() {
    let cfg = MixerConfig::new(MixerKind::Mhsa, 16).with_heads(2);
    let mixer = Mixer::new(&cfg).unwrap();
    let macs = |t: usize| {
        let x = rand_tensor(&[1, t, 16], t as u64);
        count_macs(|| no_grad(|| mixer.forward(&x))).1 as f64
    };
    let mut prev = macs(256);
    for t in [512, 1024] {
        let cur = macs(t);
        assert!(cur / prev >= 3.5, "T={t}: ratio {}", cur / prev);
        prev = cur;
    }
}

#[test]
fn wider_sample_mean_stays_inside_earlier_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let dist = Normal::new(1.0, 0.2).unwrap();
    let inside = (0..100)
        .filter(|_| {
            let mut xs: Vec<f64> = (0..10).map(|_| dist.sample(&mut rng)).collect();
            let (lo, _, hi) = bootstrap_ci(&xs, 0.95, 2000, &mut rng).unwrap();
            xs.extend((0..10).map(|_| dist.sample(&mut rng)));
            let m = mean(&xs);
            lo <= m && m <= hi
        })
        .count();
    assert!(inside >= 90, "{inside} of 100");
}

#[test]
fn peaks_and_macs_are_deterministic() {
    let spec = SweepSpec {
        lengths: vec![32, 64, 128],
        repeats: 3,
        warmup: 1,
        batch_size: 2,
        kinds: vec![MixerKind::Mhsa, MixerKind::SummaryMixing],
        ..SweepSpec::default()
    };
    let a = run_scaling_sweep(&spec, tiny, |_| {}).unwrap();
    let b = run_scaling_sweep(&spec, tiny, |_| {}).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.peak_bytes, y.peak_bytes);
        assert_eq!(x.mac_count, y.mac_count);
        assert!(x.peak_bytes.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn sweep_report_survives_csv() {
    let spec = SweepSpec {
        lengths: vec![32, 64, 128],
        repeats: 3,
        warmup: 0,
        batch_size: 1,
        kinds: vec![MixerKind::Mhsa, MixerKind::Fastformer],
        ..SweepSpec::default()
    };
    let recs = run_scaling_sweep(&spec, tiny, |_| {}).unwrap();
    let report = build_report(&recs, 0).unwrap();
    let parsed = parse_csv(&to_csv(&report)).unwrap();
    assert_eq!(parsed.rows.len(), 6);
    for (row, cell) in parsed.rows.iter().zip(&report.cells) {
        assert_eq!((row.kind, row.length_frames), (cell.kind, cell.length_frames));
        assert_eq!(row.mean_time, cell.mean_time);
        assert_eq!(row.peak_bytes, cell.peak_bytes);
    }
    let fast = report.delta(MixerKind::Fastformer, 128).unwrap();
    assert!(fast.memory.is_finite() && fast.time.is_finite());
}
