//! Linear recurrences `h_t = a_t·h_{t-1} + b_t` evaluated by associative
//! composition of affine maps, and the selective state-space kernel built on
//! them.

use crate::error::{Error, Result};
use crate::tensorcore::{add_macs, BackwardCtx, FnBackward, Tensor};

/// The affine map `h ↦ a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    /// `later ∘ self`: apply `self` first. Associative, not commutative.
    #[inline]
    pub fn then(self, later: Affine) -> Affine {
        Affine {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

/// Elements per block of the two-level scan.
const BLOCK: usize = 64;

/// In-place inclusive scan: afterwards `maps[t]` is `maps[t] ∘ … ∘ maps[0]`,
/// so `maps[t].b` is `h_t` for `h_{-1} = 0`.
///
/// Blocks are scanned independently, block totals are scanned, and each block
/// is then offset by the composed prefix of the blocks before it.
pub fn inclusive_scan(maps: &mut [Affine]) {
    let n = maps.len();
    if n <= BLOCK {
        local_scan(maps);
        return;
    }
    let blocks = n.div_ceil(BLOCK);
    let mut totals = Vec::with_capacity(blocks);
    for chunk in maps.chunks_mut(BLOCK) {
        local_scan(chunk);
        totals.push(*chunk.last().unwrap());
    }
    inclusive_scan(&mut totals);
    for (i, chunk) in maps.chunks_mut(BLOCK).enumerate().skip(1) {
        let carry = totals[i - 1];
        for m in chunk.iter_mut() {
            *m = carry.then(*m);
        }
    }
}

fn local_scan(maps: &mut [Affine]) {
    for i in 1..maps.len() {
        maps[i] = maps[i - 1].then(maps[i]);
    }
}

/// Reference evaluation by direct iteration.
pub fn sequential_scan(maps: &mut [Affine]) {
    let mut h = 0.0;
    let mut a = 1.0;
    for m in maps.iter_mut() {
        h = m.a * h + m.b;
        a *= m.a;
        *m = Affine { a, b: h };
    }
}

/// [`inclusive_scan`] over `width` independent sequences stored row-major as
/// `[len, width]`, with coefficients in `a` and offsets in `b`.
pub fn inclusive_scan_rows(a: &mut [f64], b: &mut [f64], width: usize) {
    scan_rows(ScanMode::Parallel, a, b, width);
}

/// [`sequential_scan`] over `[len, width]` rows.
pub fn sequential_scan_rows(a: &mut [f64], b: &mut [f64], width: usize) {
    scan_rows(ScanMode::Sequential, a, b, width);
}

#[inline(always)]
fn scan_rows(mode: ScanMode, a: &mut [f64], b: &mut [f64], width: usize) {
    let mut carry = RowCarry::new(width);
    for (ca, cb) in a.chunks_mut(BLOCK * width).zip(b.chunks_mut(BLOCK * width)) {
        carry.scan_chunk(mode, ca, cb);
    }
}

/// Composed prefix of every row before the current chunk, one map per
/// sequence. Chunks are scanned locally and then offset by it, so a run over
/// consecutive chunks performs exactly the two-level blocked scan.
struct RowCarry {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl RowCarry {
    fn new(width: usize) -> Self {
        RowCarry {
            a: vec![1.0; width],
            b: vec![0.0; width],
        }
    }

    #[inline(always)]
    fn scan_chunk(&mut self, mode: ScanMode, a: &mut [f64], b: &mut [f64]) {
        let width = self.a.len();
        match mode {
            ScanMode::Parallel => {
                for r in 1..a.len() / width {
                    let (pa, ra) = a[(r - 1) * width..(r + 1) * width].split_at_mut(width);
                    let (pb, rb) = b[(r - 1) * width..(r + 1) * width].split_at_mut(width);
                    for n in 0..width {
                        rb[n] += ra[n] * pb[n];
                        ra[n] *= pa[n];
                    }
                }
                for (ra, rb) in a.chunks_exact_mut(width).zip(b.chunks_exact_mut(width)) {
                    for n in 0..width {
                        rb[n] += ra[n] * self.b[n];
                        ra[n] *= self.a[n];
                    }
                }
            }
            ScanMode::Sequential => {
                for (ra, rb) in a.chunks_exact_mut(width).zip(b.chunks_exact_mut(width)) {
                    for n in 0..width {
                        rb[n] += ra[n] * self.b[n];
                        ra[n] *= self.a[n];
                        self.a[n] = ra[n];
                        self.b[n] = rb[n];
                    }
                }
                return;
            }
        }
        let last = a.len() - width;
        self.a.copy_from_slice(&a[last..]);
        self.b.copy_from_slice(&b[last..]);
    }
}

/// How the selective kernel evaluates its recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    /// Associative blocked scan.
    #[default]
    Parallel,
    /// Step-by-step loop.
    Sequential,
}

impl ScanMode {
    #[inline(always)]
    fn run_rows(self, a: &mut [f64], b: &mut [f64], width: usize) {
        scan_rows(self, a, b, width);
    }
}

/// Literal loop over `h_t = Ā_t ⊙ h_{t-1} + B̄_t·x_t`, `y_t = C_t·h_t` for
/// per-channel diagonal state.
///
/// `x: [B, T, H]`, `a_bar` and `b_bar: [B, T, H, N]`, `c: [B, T, N]`;
/// returns `[B, T, H]`. No graph is recorded.
pub fn mamba_recurrence_oracle(x: &Tensor, a_bar: &Tensor, b_bar: &Tensor, c: &Tensor) -> Result<Tensor> {
    let &[bs, t_len, h] = x.shape() else {
        return Err(Error::shape("mamba_recurrence_oracle", "x must be [B, T, H]"));
    };
    let n = *a_bar.shape().last().unwrap_or(&0);
    if a_bar.shape() != [bs, t_len, h, n] || b_bar.shape() != a_bar.shape() || c.shape() != [bs, t_len, n] {
        return Err(Error::shape(
            "mamba_recurrence_oracle",
            format!(
                "x {:?}, a_bar {:?}, b_bar {:?}, c {:?}",
                x.shape(),
                a_bar.shape(),
                b_bar.shape(),
                c.shape()
            ),
        ));
    }
    let (xs, av, bv, cv) = (x.data(), a_bar.data(), b_bar.data(), c.data());
    let mut y = vec![0.0; xs.len()];
    for b in 0..bs {
        let mut state = vec![0.0; h * n];
        for t in 0..t_len {
            for ch in 0..h {
                let xi = xs[(b * t_len + t) * h + ch];
                let mut acc = 0.0;
                for s in 0..n {
                    let idx = ((b * t_len + t) * h + ch) * n + s;
                    state[ch * n + s] = av[idx] * state[ch * n + s] + bv[idx] * xi;
                    acc += cv[(b * t_len + t) * n + s] * state[ch * n + s];
                }
                y[(b * t_len + t) * h + ch] = acc;
            }
        }
    }
    Tensor::new(y, x.shape())
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
}

/// Batch row `b` of a `[B, T, W]` buffer as `[W, T]`.
#[inline(always)]
fn time_major(src: &[f64], b: usize, len: usize, width: usize) -> Vec<f64> {
    let row = &src[b * len * width..(b + 1) * len * width];
    let mut out = vec![0.0; len * width];
    for (t, frame) in row.chunks_exact(width).enumerate() {
        for (w, &v) in frame.iter().enumerate() {
            out[w * len + t] = v;
        }
    }
    out
}

/// `exp(x)` for `x ≤ 0` within a few ulp, branch-free so the fill loop
/// vectorizes. Arguments below the normal range give 0.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let xc = x.max(-708.0);
    let k = xc * std::f64::consts::LOG2_E + SHIFTER;
    let n = k - SHIFTER;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // the low mantissa bits of `k` hold `n` in two's complement
    let scale = f64::from_bits(k.to_bits().wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

/// Affine maps `(exp(Δ_t·A_n), Δ_t·B_tn·u_t)` of one channel as `[T, N]` rows.
#[inline(always)]
fn fill_maps(ma: &mut [f64], mb: &mut [f64], d_c: &[f64], u_c: &[f64], a_c: &[f64], b_rows: &[f64]) {
    let state = a_c.len();
    for (t, ((ra, rb), br)) in ma
        .chunks_exact_mut(state)
        .zip(mb.chunks_exact_mut(state))
        .zip(b_rows.chunks_exact(state))
        .enumerate()
    {
        let (d, du) = (d_c[t], d_c[t] * u_c[t]);
        for n in 0..state {
            ra[n] = exp_nonpositive(d * a_c[n]);
            rb[n] = du * br[n];
        }
    }
}

/// Inverse of [`time_major`], accumulating into `dst`.
#[inline(always)]
fn scatter_add(dst: &mut [f64], src: &[f64], b: usize, len: usize, width: usize) {
    let row = &mut dst[b * len * width..(b + 1) * len * width];
    for (t, frame) in row.chunks_exact_mut(width).enumerate() {
        for (w, v) in frame.iter_mut().enumerate() {
            *v += src[w * len + t];
        }
    }
}

/// Selective state-space kernel with input-dependent step sizes.
///
/// `u, delta_raw: [B, T, H]`, `a: [H, N]` (negative reals), `b_sel, c_sel:
/// [B, T, N]`. With `Δ = softplus(delta_raw)` each channel `c` and state `n`
/// evolves as `h_t = exp(Δ_t·A_cn)·h_{t-1} + Δ_t·B_tn·u_tc` and the output is
/// `y_tc = Σ_n C_tn·h_t`. Only O(T) scratch per (channel, state) sequence is
/// used; the state tensor is never materialized.
pub fn selective_scan(
    u: &Tensor,
    delta_raw: &Tensor,
    a: &Tensor,
    b_sel: &Tensor,
    c_sel: &Tensor,
    mode: ScanMode,
) -> Result<Tensor> {
    let &[batch, len, channels] = u.shape() else {
        return Err(Error::shape(
            "selective_scan",
            format!("u must be [B, T, H], got {:?}", u.shape()),
        ));
    };
    let state = a.shape().get(1).copied().unwrap_or(0);
    if delta_raw.shape() != u.shape()
        || a.shape() != [channels, state]
        || b_sel.shape() != [batch, len, state]
        || c_sel.shape() != [batch, len, state]
    {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
                u.shape(),
                delta_raw.shape(),
                a.shape(),
                b_sel.shape(),
                c_sel.shape()
            ),
        ));
    }
    let dims = Dims {
        batch,
        len,
        channels,
        state,
    };
    let delta: Vec<f64> = delta_raw.data().iter().map(|&v| softplus(v)).collect();
    let worst: Vec<f64> = (0..channels)
        .map(|c| {
            a.data()[c * state..(c + 1) * state]
                .iter()
                .fold(0.0f64, |m, &v| m.min(v))
        })
        .collect();
    for (i, (&d, &raw)) in delta.iter().zip(delta_raw.data()).enumerate() {
        let c = i % channels;
        if !d.is_finite() || !(d * worst[c]).is_finite() {
            let t = (i / channels) % len;
            return Err(Error::Numeric {
                op: "selective_scan",
                detail: format!("step size overflow at time step {t} (channel {c}, raw {raw})"),
            });
        }
    }
    let (us, av, bv, cv) = (u.data(), a.data(), b_sel.data(), c_sel.data());
    let y = forward_dispatch(&delta, us, av, bv, cv, dims, mode);
    add_macs(2 * (batch * len * channels * state) as u64);
    Tensor::from_op(
        "selective_scan",
        y,
        u.shape(),
        &[u, delta_raw, a, b_sel, c_sel],
        FnBackward::new("selective_scan", move |ctx, g| {
            selective_scan_backward(ctx, g, dims, mode)
        }),
    )
}

#[inline(always)]
fn forward_kernel(
    delta: &[f64],
    us: &[f64],
    av: &[f64],
    bv: &[f64],
    cv: &[f64],
    dims: Dims,
    mode: ScanMode,
) -> Vec<f64> {
    let Dims {
        batch,
        len,
        channels,
        state,
    } = dims;
    let mut y = vec![0.0; us.len()];
    let (mut sa, mut sb) = (vec![0.0; BLOCK * state], vec![0.0; BLOCK * state]);
    let mut yt = vec![0.0; channels * len];
    for b in 0..batch {
        let dt = time_major(delta, b, len, channels);
        let ut = time_major(us, b, len, channels);
        let (b_b, c_b) = (
            &bv[b * len * state..(b + 1) * len * state],
            &cv[b * len * state..(b + 1) * len * state],
        );
        for c in 0..channels {
            let a_c = &av[c * state..(c + 1) * state];
            let mut carry = RowCarry::new(state);
            for t0 in (0..len).step_by(BLOCK) {
                let rows = BLOCK.min(len - t0);
                let (ca, cb) = (&mut sa[..rows * state], &mut sb[..rows * state]);
                let span = c * len + t0..c * len + t0 + rows;
                let rows_n = t0 * state..(t0 + rows) * state;
                fill_maps(ca, cb, &dt[span.clone()], &ut[span.clone()], a_c, &b_b[rows_n.clone()]);
                carry.scan_chunk(mode, ca, cb);
                for (out, (h, cr)) in yt[span]
                    .iter_mut()
                    .zip(cb.chunks_exact(state).zip(c_b[rows_n].chunks_exact(state)))
                {
                    *out = h.iter().zip(cr).map(|(h, c)| h * c).sum();
                }
            }
        }
        scatter_add(&mut y, &yt, b, len, channels);
    }
    y
}

fn selective_scan_backward(ctx: &BackwardCtx<'_>, g: &[f64], dims: Dims, mode: ScanMode) -> Vec<Option<Vec<f64>>> {
    let us = ctx.inputs[0].data();
    let raw = ctx.inputs[1].data();
    let av = ctx.inputs[2].data();
    let bv = ctx.inputs[3].data();
    let cv = ctx.inputs[4].data();
    let delta: Vec<f64> = raw.iter().map(|&v| softplus(v)).collect();

    let (gu, mut gdelta, ga, gb, gc) = backward_dispatch(&delta, us, av, bv, cv, g, dims, mode);
    for (gd, &r) in gdelta.iter_mut().zip(raw) {
        *gd *= sigmoid(r);
    }
    let want = |i: usize| ctx.inputs[i].requires_grad();
    vec![
        want(0).then_some(gu),
        want(1).then_some(gdelta),
        want(2).then_some(ga),
        want(3).then_some(gb),
        want(4).then_some(gc),
    ]
}

type ScanGrads = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_kernel(
    delta: &[f64],
    us: &[f64],
    av: &[f64],
    bv: &[f64],
    cv: &[f64],
    g: &[f64],
    dims: Dims,
    mode: ScanMode,
) -> ScanGrads {
    let Dims {
        batch,
        len,
        channels,
        state,
    } = dims;
    let mut gu = vec![0.0; us.len()];
    let mut gdelta = vec![0.0; us.len()];
    let mut ga = vec![0.0; av.len()];
    let mut gb = vec![0.0; bv.len()];
    let mut gc = vec![0.0; cv.len()];

    let (mut fa, mut fb) = (vec![0.0; len * state], vec![0.0; len * state]);
    let (mut ra, mut rb) = (vec![0.0; len * state], vec![0.0; len * state]);
    let mut decay = vec![0.0; len * state];
    let (mut gut, mut gdt) = (vec![0.0; channels * len], vec![0.0; channels * len]);
    for b in 0..batch {
        let dt = time_major(delta, b, len, channels);
        let ut = time_major(us, b, len, channels);
        let gt = time_major(g, b, len, channels);
        let rows = b * len * state..(b + 1) * len * state;
        let (b_b, c_b) = (&bv[rows.clone()], &cv[rows.clone()]);
        let (gb_b, gc_b) = (&mut gb[rows.clone()], &mut gc[rows]);
        for c in 0..channels {
            let span = c * len..(c + 1) * len;
            let (d_c, u_c, g_c) = (&dt[span.clone()], &ut[span.clone()], &gt[span.clone()]);
            let a_c = &av[c * state..(c + 1) * state];
            fill_maps(&mut fa, &mut fb, d_c, u_c, a_c, b_b);
            decay.copy_from_slice(&fa);
            mode.run_rows(&mut fa, &mut fb, state);
            // adjoint recurrence G_t = gh_t + a_{t+1}·G_{t+1}, run backwards in time
            for t in 0..len {
                let r = (len - 1 - t) * state;
                for n in 0..state {
                    ra[r + n] = if t + 1 < len { decay[(t + 1) * state + n] } else { 0.0 };
                    rb[r + n] = g_c[t] * c_b[t * state + n];
                }
            }
            mode.run_rows(&mut ra, &mut rb, state);
            let ga_c = &mut ga[c * state..(c + 1) * state];
            for t in 0..len {
                let (d, u, gy) = (d_c[t], u_c[t], g_c[t]);
                let adj = &rb[(len - 1 - t) * state..(len - t) * state];
                let row = t * state..(t + 1) * state;
                let (bt, dec, h) = (&b_b[row.clone()], &decay[row.clone()], &fb[row.clone()]);
                let (mut g_d, mut g_u) = (0.0, 0.0);
                for n in 0..state {
                    let h_prev = if t > 0 { fb[(t - 1) * state + n] } else { 0.0 };
                    let g_decay = adj[n] * h_prev * dec[n];
                    gc_b[t * state + n] += gy * h[n];
                    g_d += g_decay * a_c[n] + adj[n] * bt[n] * u;
                    ga_c[n] += g_decay * d;
                    gb_b[t * state + n] += adj[n] * d * u;
                    g_u += adj[n] * d * bt[n];
                }
                gdt[c * len + t] = g_d;
                gut[c * len + t] = g_u;
            }
        }
        scatter_add(&mut gu, &gut, b, len, channels);
        scatter_add(&mut gdelta, &gdt, b, len, channels);
    }
    (gu, gdelta, ga, gb, gc)
}

// The kernels are compiled a second time for AVX2 and picked at run time. No
// fused multiply-add is enabled, so both builds give bit-identical results.
macro_rules! dispatch {
    ($name:ident, $kernel:ident, $wide:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        #[allow(clippy::too_many_arguments)]
        fn $wide($($arg: $ty),*) -> $ret {
            $kernel($($arg),*)
        }

        #[allow(clippy::too_many_arguments)]
        fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at run time
                return unsafe { $wide($($arg),*) };
            }
            $kernel($($arg),*)
        }
    };
}

dispatch!(forward_dispatch, forward_kernel, forward_kernel_avx2,
    (delta: &[f64], us: &[f64], av: &[f64], bv: &[f64], cv: &[f64], dims: Dims, mode: ScanMode) -> Vec<f64>);
dispatch!(backward_dispatch, backward_kernel, backward_kernel_avx2,
    (delta: &[f64], us: &[f64], av: &[f64], bv: &[f64], cv: &[f64], g: &[f64], dims: Dims, mode: ScanMode) -> ScanGrads);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::testutil::rand_tensor;

    #[test]
    fn scan_equals_sequential_for_all_lengths() {
        for len in [1usize, 2, 7, 63, 64, 65, 200, 4097] {
            let maps: Vec<Affine> = (0..len)
                .map(|i| Affine {
                    a: 0.5 + 0.4 * ((i as f64) * 0.37).sin(),
                    b: ((i as f64) * 1.3).cos(),
                })
                .collect();
            let mut p = maps.clone();
            let mut s = maps.clone();
            inclusive_scan(&mut p);
            sequential_scan(&mut s);
            for (x, y) in p.iter().zip(&s) {
                assert!((x.b - y.b).abs() < 1e-12, "len {len}");
                assert!((x.a - y.a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_exp_matches_std() {
        let mut worst = 0.0f64;
        for i in 0..200_000 {
            let x = -(i as f64) * 3.6e-3 - ((i as f64) * 0.618).fract() * 1e-3;
            let (got, want) = (exp_nonpositive(x), x.exp());
            if x > -700.0 {
                worst = worst.max((got - want).abs() / want);
            } else {
                assert!((got - want).abs() < 1e-300);
            }
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-1e4), 0.0);
        assert_eq!(exp_nonpositive(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn row_scans_match_scalar_scan() {
        let width = 3;
        for len in [1usize, 5, 64, 65, 300] {
            let a: Vec<f64> = (0..len * width).map(|i| 0.9 * ((i as f64) * 0.71).cos()).collect();
            let b: Vec<f64> = (0..len * width).map(|i| ((i as f64) * 0.23).sin()).collect();
            let (mut pa, mut pb) = (a.clone(), b.clone());
            inclusive_scan_rows(&mut pa, &mut pb, width);
            let (mut sa, mut sb) = (a.clone(), b.clone());
            sequential_scan_rows(&mut sa, &mut sb, width);
            for n in 0..width {
                let mut maps: Vec<Affine> = (0..len)
                    .map(|t| Affine {
                        a: a[t * width + n],
                        b: b[t * width + n],
                    })
                    .collect();
                sequential_scan(&mut maps);
                for (t, m) in maps.iter().enumerate() {
                    let i = t * width + n;
                    assert!((pb[i] - m.b).abs() < 1e-12 && (pa[i] - m.a).abs() < 1e-12, "len {len}");
                    assert!((sb[i] - m.b).abs() < 1e-12 && (sa[i] - m.a).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_recurrence_is_running_sum() {
        let mut maps = vec![Affine { a: 1.0, b: 1.0 }; 3];
        inclusive_scan(&mut maps);
        let h: Vec<f64> = maps.iter().map(|m| m.b).collect();
        assert_eq!(h, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn oracle_is_memoryless_without_decay() {
        let x = rand_tensor(&[1, 4, 2], 1);
        let a_bar = Tensor::zeros(&[1, 4, 2, 3]).unwrap();
        let b_bar = rand_tensor(&[1, 4, 2, 3], 2);
        let c = rand_tensor(&[1, 4, 3], 3);
        let y = mamba_recurrence_oracle(&x, &a_bar, &b_bar, &c).unwrap();
        for t in 0..4 {
            for ch in 0..2 {
                let expect: f64 = (0..3)
                    .map(|n| c.data()[t * 3 + n] * b_bar.data()[(t * 2 + ch) * 3 + n] * x.data()[t * 2 + ch])
                    .sum();
                assert!((y.data()[t * 2 + ch] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn overflowing_step_names_the_time_step() {
        let u = rand_tensor(&[1, 3, 1], 1);
        let mut raw = vec![0.0, 0.0, 0.0];
        raw[2] = 1e308;
        let delta = Tensor::new(raw, &[1, 3, 1]).unwrap();
        let a = Tensor::new(vec![-2.0], &[1, 1]).unwrap();
        let bc = rand_tensor(&[1, 3, 1], 2);
        let err = selective_scan(&u, &delta, &a, &bc, &bc, ScanMode::Parallel).unwrap_err();
        assert!(err.to_string().contains("time step 2"), "{err}");
    }
}
