//! Property suite behind `linmix verify`: gradient checks, scan against the
//! sequential recurrence, quantizer invariances, permutation equivariance
//! and parameter matching.

use linmix_core::bestrq::{quantize, Codebook, RandomProjection};
use linmix_core::encoder::{build_matched_configs, Encoder, EncoderConfig, ParamBudget};
use linmix_core::mixers::{
    discretize, mamba_recurrence_oracle, selective_scan, BiMamba, Mixer, MixerConfig, MixerKind, ScanMode,
};
use linmix_core::tensorcore::nn::num_params;
use linmix_core::tensorcore::testutil::rand_tensor;
use linmix_core::tensorcore::{no_grad, GradCheck, GradCheckReport, Stencil};
use linmix_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const GRAD_STEP: f64 = 1.5e-3;
pub const GRAD_TOL: f64 = 1e-5;
/// Denominator floor for the full-encoder check.
pub const ENCODER_FLOOR: f64 = 1e-6;
pub const SCAN_TOL: f64 = 1e-10;
pub const SCAN_SEEDS: u64 = 100;
pub const SCAN_LENGTHS: [usize; 5] = [1, 2, 7, 64, 250];
pub const QUANTIZER_TRIALS: u64 = 1000;
pub const SCALES: [f64; 3] = [1e-3, 1.0, 1e3];
pub const PERMUTATIONS: u64 = 20;
pub const EQUIVARIANCE_TOL: f64 = 1e-10;
pub const PARAM_TARGET: usize = 3_000_000;
pub const PARAM_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Skews every analytic gradient before comparison, so the gradient
    /// checks must fail; exercises the failure path of the suite.
    pub inject_fault: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub tags: Vec<String>,
    pub pass: bool,
    pub detail: String,
}

type Runner = Box<dyn Fn(&VerifyOptions) -> Result<(bool, String)>>;

struct Check {
    name: String,
    tags: Vec<String>,
    run: Runner,
}

fn check(name: String, tags: &[&str], run: impl Fn(&VerifyOptions) -> Result<(bool, String)> + 'static) -> Check {
    let mut tags: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
    tags.push(name.clone());
    Check {
        name,
        tags,
        run: Box::new(run),
    }
}

/// Width-8 mixer with small inner sizes, as used by the gradient and
/// permutation checks.
pub fn small_mixer(kind: MixerKind, seed: u64) -> MixerConfig {
    let mut c = MixerConfig::new(kind, 8).with_heads(2).with_seed(seed);
    c.d_summary = 6;
    c.d_tmmlp = 5;
    c.d_state = 4;
    c.d_inner = 12;
    c
}

pub fn small_encoder(kind: MixerKind, layers: usize) -> EncoderConfig {
    let mut c = EncoderConfig::new(kind, 8, layers).with_seed(11);
    c.mixer = small_mixer(kind, 11);
    c.d_ffn = 12;
    c.conv_kernel = 3;
    c.vocab = 7;
    c.d_feat = 5;
    c
}

fn grad_checker(opts: &VerifyOptions) -> Result<GradCheck> {
    let g = GradCheck::new(GRAD_STEP, GRAD_TOL)?.with_stencil(Stencil::FivePoint);
    Ok(if opts.inject_fault {
        g.with_analytic_hook(|g| g.iter_mut().for_each(|v| *v = *v * 1.01 + 1e-4))
    } else {
        g
    })
}

fn grad_detail(reports: &[(&str, GradCheckReport)]) -> (bool, String) {
    let pass = reports.iter().all(|(_, r)| r.pass);
    let detail = reports
        .iter()
        .map(|(what, r)| {
            let worst = r.worst.as_ref().map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
            format!("{what} max rel {:.2e}{worst} over {}", r.max_rel_error, r.checked)
        })
        .collect::<Vec<_>>()
        .join("; ");
    (pass, detail)
}

/// Parameter and input gradients of `sum(mix(x))` at B=1, T=6, d=8.
pub fn mixer_gradients(kind: MixerKind, opts: &VerifyOptions) -> Result<(bool, String)> {
    let g = grad_checker(opts)?;
    let x = rand_tensor(&[1, 6, 8], 2);
    let mut m = Mixer::new(&small_mixer(kind, 1))?;
    let params = g.check_module_sum(&mut m, |m| m.forward(&x))?;
    let m = Mixer::new(&small_mixer(kind, 1))?;
    let input = g.check_sum(|t| m.forward(t), &x)?;
    Ok(grad_detail(&[("params", params), ("input", input)]))
}

/// Every parameter of a 2-block encoder, 24 raw frames (6 steps).
pub fn encoder_gradients(kind: MixerKind, opts: &VerifyOptions) -> Result<(bool, String)> {
    let g = grad_checker(opts)?.with_floor(ENCODER_FLOOR);
    let mut e = Encoder::new(&small_encoder(kind, 2))?;
    let x = rand_tensor(&[1, 24, 5], 9);
    let r = g.check_module_sum(&mut e, |m| m.encode(&x))?;
    Ok(grad_detail(&[("params", r)]))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Blocked scan against the step-by-step recurrence on real Mamba terms.
pub fn scan_matches_recurrence() -> Result<(bool, String)> {
    let mut worst = (0.0f64, 0u64, 0usize);
    for seed in 0..SCAN_SEEDS {
        let m = BiMamba::new(&small_mixer(MixerKind::Mamba, seed))?;
        for t in SCAN_LENGTHS {
            let x = rand_tensor(&[1, t, 8], seed * 31 + t as u64);
            let terms = no_grad(|| m.forward_dir.selective_terms(&x))?;
            let y = no_grad(|| {
                selective_scan(
                    &terms.u,
                    &terms.delta_raw,
                    &terms.a,
                    &terms.b,
                    &terms.c,
                    ScanMode::Parallel,
                )
            })?;
            let (abar, bbar) = discretize(&terms)?;
            let o = mamba_recurrence_oracle(&terms.u, &abar, &bbar, &terms.c)?;
            let d = max_abs_diff(&y, &o);
            if d > worst.0 {
                worst = (d, seed, t);
            }
        }
    }
    Ok((
        worst.0 < SCAN_TOL,
        format!(
            "max abs {:.2e} (seed {}, T={}) over {} seeds x T in {SCAN_LENGTHS:?}",
            worst.0, worst.1, worst.2, SCAN_SEEDS
        ),
    ))
}

fn quantizer_instance(trial: u64) -> Result<(RandomProjection, Codebook, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial ^ 0x7175_616e);
    let m = (0..12).map(|_| rng.sample(StandardNormal)).collect();
    Ok((RandomProjection::new(trial, 12, 8)?, Codebook::new(trial, 16, 8)?, m))
}

pub fn quantizer_scale_invariance() -> Result<(bool, String)> {
    let mut failures = 0;
    for trial in 0..QUANTIZER_TRIALS {
        let (proj, book, m) = quantizer_instance(trial)?;
        let base = quantize(&m, &proj, &book)?;
        for lambda in SCALES {
            let scaled: Vec<f64> = m.iter().map(|v| v * lambda).collect();
            failures += usize::from(quantize(&scaled, &proj, &book)? != base);
        }
    }
    Ok((
        failures == 0,
        format!("{failures} mismatches over {QUANTIZER_TRIALS} instances x lambda in {SCALES:?}"),
    ))
}

/// Exhaustive nearest-neighbour loop written independently of `quantize`.
fn brute_force_index(m: &[f64], proj: &RandomProjection, book: &Codebook) -> usize {
    let (a, dc) = (proj.matrix().data(), proj.d_code());
    let mut z = vec![0.0; dc];
    for (i, mi) in m.iter().enumerate() {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj += mi * a[i * dc + j];
        }
    }
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = (0, f64::MAX);
    for (i, row) in book.rows().data().chunks(dc).enumerate() {
        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d: f64 = row.iter().zip(&z).map(|(r, v)| (r / rn - v / zn).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn quantizer_brute_force() -> Result<(bool, String)> {
    let mut failures = 0;
    for trial in 0..QUANTIZER_TRIALS {
        let (proj, book, m) = quantizer_instance(trial)?;
        failures += usize::from(quantize(&m, &proj, &book)? != brute_force_index(&m, &proj, &book));
    }
    Ok((
        failures == 0,
        format!("{failures} disagreements over {QUANTIZER_TRIALS} instances"),
    ))
}

pub fn permute_time(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for &p in perm {
            out.extend_from_slice(&x.data()[(bi * t + p) * d..(bi * t + p + 1) * d]);
        }
    }
    Tensor::new(out, &[b, t, d])
}

/// Largest `|mix(P·x) − P·mix(x)|` for each of the random permutations.
fn equivariance_gaps(kind: MixerKind) -> Result<Vec<f64>> {
    let m = Mixer::new(&small_mixer(kind, 4))?;
    let x = rand_tensor(&[2, 9, 8], 5);
    let base = no_grad(|| m.forward(&x))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7065_726d ^ kind as u64);
    (0..PERMUTATIONS)
        .map(|_| {
            let mut perm: Vec<usize> = (0..x.dim(1)).collect();
            perm.shuffle(&mut rng);
            let lhs = no_grad(|| m.forward(&permute_time(&x, &perm)?))?;
            Ok(max_abs_diff(&lhs, &permute_time(&base, &perm)?))
        })
        .collect()
}

pub fn permutation_equivariance(kind: MixerKind) -> Result<(bool, String)> {
    let worst = equivariance_gaps(kind)?.into_iter().fold(0.0, f64::max);
    Ok((
        worst < EQUIVARIANCE_TOL,
        format!("max abs {worst:.2e} over {PERMUTATIONS} permutations"),
    ))
}

/// Mamba must change under at least one of the permutations.
pub fn mamba_order_sensitivity() -> Result<(bool, String)> {
    let gaps = equivariance_gaps(MixerKind::Mamba)?;
    let violated = gaps.iter().filter(|&&g| g > 1e-6).count();
    Ok((
        violated > 0,
        format!("{violated} of {PERMUTATIONS} permutations change the output"),
    ))
}

/// Matched desk config for `kind`, recounted on a built encoder.
pub fn parameter_matching(kind: MixerKind) -> Result<(bool, String)> {
    let budget = ParamBudget::new(PARAM_TARGET, PARAM_TOLERANCE)?;
    let configs = build_matched_configs(budget, &EncoderConfig::desk(MixerKind::Mhsa))?;
    let cfg = configs.iter().find(|c| c.kind() == kind).expect("one config per kind");
    let counted = num_params(&Encoder::new(cfg)?);
    let rel = counted as f64 / PARAM_TARGET as f64 - 1.0;
    Ok((
        counted == cfg.param_count() && budget.admits(counted),
        format!(
            "{counted} params ({:+.3}% of {PARAM_TARGET}), formula {}",
            100.0 * rel,
            cfg.param_count()
        ),
    ))
}

fn all_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    for kind in MixerKind::ALL {
        checks.push(check(format!("grad.{kind}"), &["grad", kind.name()], move |o| {
            mixer_gradients(kind, o)
        }));
    }
    for kind in MixerKind::ALL {
        checks.push(check(
            format!("encoder_grad.{kind}"),
            &["grad", "encoder", kind.name()],
            move |o| encoder_gradients(kind, o),
        ));
    }
    checks.push(check("scan".into(), &["mamba"], |_| scan_matches_recurrence()));
    checks.push(check("quantizer.scale".into(), &["quantizer"], |_| {
        quantizer_scale_invariance()
    }));
    checks.push(check("quantizer.brute_force".into(), &["quantizer"], |_| {
        quantizer_brute_force()
    }));
    for kind in MixerKind::ALL.into_iter().filter(|k| k.permutation_equivariant()) {
        checks.push(check(
            format!("permutation.{kind}"),
            &["permutation", kind.name()],
            move |_| permutation_equivariance(kind),
        ));
    }
    checks.push(check(
        "permutation.mamba_order".into(),
        &["permutation", "mamba"],
        |_| mamba_order_sensitivity(),
    ));
    for kind in MixerKind::ALL {
        checks.push(check(format!("params.{kind}"), &["params", kind.name()], move |_| {
            parameter_matching(kind)
        }));
    }
    checks
}

/// Names of every check with their tags, in run order.
pub fn list_checks() -> Vec<(String, Vec<String>)> {
    all_checks().into_iter().map(|c| (c.name, c.tags)).collect()
}

/// Runs the checks carrying tag `only` (every check when `None`). An error
/// inside a check counts as a failure with the error as detail.
pub fn run_checks(
    only: Option<&str>,
    opts: &VerifyOptions,
    mut on_result: impl FnMut(&CheckResult),
) -> Vec<CheckResult> {
    all_checks()
        .into_iter()
        .filter(|c| only.is_none_or(|t| c.tags.iter().any(|x| x == t)))
        .map(|c| {
            let (pass, detail) = (c.run)(opts).unwrap_or_else(|e| (false, format!("error: {e}")));
            let r = CheckResult {
                name: c.name,
                tags: c.tags,
                pass,
                detail,
            };
            on_result(&r);
            r
        })
        .collect()
}

pub fn format_row(r: &CheckResult) -> String {
    format!(
        "{:<28} {:<4}  {}",
        r.name,
        if r.pass { "pass" } else { "FAIL" },
        r.detail
    )
}
