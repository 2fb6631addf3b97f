//! Hand-derived backward passes for every lambda layer variant, and a
//! central-difference gradient checker.
//!
//! With `g = ∂L/∂Y` split per head as `g[b, n, h, v]`, the apply step gives
//!
//! ```text
//! ∂q   = g·λcᵀ + g·λpᵀ          ∂λc = Σ_{n,h} q gᵀ        ∂λp_n = Σ_h q_n g_nᵀ
//! ∂K̄   = V ∂λcᵀ                 ∂V  = K̄ ∂λc + Σ_n E_n ∂λp_n
//! ∂E_n = V ∂λp_nᵀ  (scattered back into the embedding table by bucket)
//! ```
//!
//! then the key normalization, the optional batch-norm hook and the three
//! linear projections are differentiated in turn.

use serde::Serialize;

use crate::conv;
use crate::error::{shape_err, Result};
use crate::layer::{forward_parts, mutation, Implementation, IntraNorm, KeyNorm, LambdaConfig, LambdaParams};
use crate::relpos::RelIndexMap;
use crate::rng::{Stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{contract, Tensor};
use crate::variants::{self, masked_key_weights, masked_parts, multihead_parts, MaskSpec, Variant};

/// Names of the gradient tensors, in [`GradBundle::tensors`] order.
pub const GRAD_NAMES: [&str; 10] = ["x", "c", "w_q", "w_k", "w_v", "r", "q_scale", "q_shift", "v_scale", "v_shift"];

/// Gradients of a scalar loss with respect to the layer inputs and every
/// parameter. Hook gradients are zero when the hook is off.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle<T = f64> {
    pub x: Tensor<T>,
    pub c: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub r: Tensor<T>,
    pub q_scale: Tensor<T>,
    pub q_shift: Tensor<T>,
    pub v_scale: Tensor<T>,
    pub v_shift: Tensor<T>,
}

impl<T: Scalar> GradBundle<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 10] {
        [
            &self.x,
            &self.c,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.r,
            &self.q_scale,
            &self.q_shift,
            &self.v_scale,
            &self.v_shift,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Gradient of `Σ upstream ⊙ forward(variant, x, c, params, config)`.
pub fn backward<T: Scalar>(
    variant: &Variant,
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    match variant {
        Variant::Standard => standard_backward(x, c, params, config, upstream, false),
        Variant::IntraDepth => standard_backward(x, c, params, config, upstream, true),
        Variant::Masked(mask) => masked_backward(x, c, params, config, mask, upstream),
        Variant::MultiHead => multihead_backward(x, c, params, config, upstream),
    }
}

/// Upstream gradient `[b, n, h·v]` as `[b, n, h, v]`.
fn split_heads<T: Scalar>(upstream: &Tensor<T>, expected: &[usize], h: usize) -> Result<Tensor<T>> {
    if upstream.shape() != expected {
        return shape_err(format!("upstream gradient {:?} does not match output {:?}", upstream.shape(), expected));
    }
    let (b, n, dv) = (expected[0], expected[1], expected[2]);
    upstream.reshape(&[b, n, h, dv / h])
}

fn add_opt<T: Scalar>(acc: Option<Tensor<T>>, part: Tensor<T>) -> Result<Option<Tensor<T>>> {
    Ok(Some(match acc {
        Some(a) => a.add(&part)?,
        None => part,
    }))
}

/// Backward of the key normalization along one axis. `perm` moves the
/// normalized axes to the end, where they span `group` contiguous elements;
/// `inv` undoes it.
fn norm_backward<T: Scalar>(
    raw: &Tensor<T>,
    normalized: &Tensor<T>,
    grad: &Tensor<T>,
    mode: KeyNorm,
    perm: &[usize],
    inv: &[usize],
    group: usize,
) -> Result<Tensor<T>> {
    if mode == KeyNorm::None {
        return Ok(grad.clone());
    }
    let x = raw.permute(perm)?;
    let y = normalized.permute(perm)?;
    let mut g = grad.permute(perm)?;
    let chunks = x.data().chunks(group).zip(y.data().chunks(group));
    for ((xs, ys), gs) in chunks.zip(g.data_mut().chunks_mut(group)) {
        norm_backward_slice(xs, ys, gs, mode);
    }
    g.permute(inv)
}

/// In-place backward of one normalized slice: `gs` holds `∂L/∂y` on entry
/// and `∂L/∂x` on exit.
pub(crate) fn norm_backward_slice<T: Scalar>(xs: &[T], ys: &[T], gs: &mut [T], mode: KeyNorm) {
    match mode {
        KeyNorm::Softmax => {
            let dot = ys.iter().zip(gs.iter()).fold(T::zero(), |a, (&y, &g)| a + y * g);
            for (g, &y) in gs.iter_mut().zip(ys) {
                *g = y * (*g - dot);
            }
        }
        KeyNorm::L2 => {
            let sq = xs.iter().fold(T::zero(), |a, &x| a + x * x);
            if sq == T::zero() {
                gs.iter_mut().for_each(|g| *g = T::zero());
                return;
            }
            let norm = sq.sqrt();
            let dot = ys.iter().zip(gs.iter()).fold(T::zero(), |a, (&y, &g)| a + y * g);
            for (g, &y) in gs.iter_mut().zip(ys) {
                *g = (*g - y * dot) / norm;
            }
        }
        KeyNorm::None => {}
    }
}

/// Backward of `h = raw * scale + shift` over the last axis.
fn hook_backward<T: Scalar>(raw: &Tensor<T>, dh: &Tensor<T>, scale: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let ch = scale.len();
    let mut dscale = vec![T::zero(); ch];
    let mut dshift = vec![T::zero(); ch];
    for (rs, gs) in raw.data().chunks(ch).zip(dh.data().chunks(ch)) {
        for i in 0..ch {
            dscale[i] = dscale[i] + gs[i] * rs[i];
            dshift[i] = dshift[i] + gs[i];
        }
    }
    Ok((dh.mul(scale)?, Tensor::new(vec![ch], dscale)?, Tensor::new(vec![ch], dshift)?))
}

struct HookGrads<T> {
    raw: Tensor<T>,
    scale: Tensor<T>,
    shift: Tensor<T>,
}

fn hook_or_identity<T: Scalar>(enabled: bool, raw: &Tensor<T>, dh: Tensor<T>, scale: &Tensor<T>) -> Result<HookGrads<T>> {
    if enabled {
        let (raw, scale, shift) = hook_backward(raw, &dh, scale)?;
        Ok(HookGrads { raw, scale, shift })
    } else {
        let ch = scale.len();
        Ok(HookGrads { raw: dh, scale: Tensor::zeros(&[ch]), shift: Tensor::zeros(&[ch]) })
    }
}

/// Scatter-adds dense embedding gradients `[n, m, row]` into the table rows
/// selected by the bucket map; out-of-scope pairs contribute nothing.
fn scatter_embeddings<T: Scalar>(map: &RelIndexMap, de: &Tensor<T>, table_shape: &[usize]) -> Result<Tensor<T>> {
    let row: usize = table_shape[1..].iter().product();
    let (n, m) = (map.n(), map.m());
    if de.len() != n * m * row {
        return shape_err(format!("embedding gradient {:?} does not match [{n}, {m}, {row}]", de.shape()));
    }
    let mut dr = Tensor::zeros(table_shape);
    let (src, dst) = (de.data(), dr.data_mut());
    for ni in 0..n {
        for mi in 0..m {
            if let Some(bk) = map.bucket(ni, mi) {
                let s = (ni * m + mi) * row;
                for j in 0..row {
                    dst[bk * row + j] = dst[bk * row + j] + src[s + j];
                }
            }
        }
    }
    Ok(dr)
}

/// Linear projection backward for `out = input · W`: returns `(∂W, ∂input)`.
fn linear_backward<T: Scalar>(input: &Tensor<T>, w: &Tensor<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((contract("bnd,bne->de", &[input, dout])?, contract("bne,de->bnd", &[dout, w])?))
}

/// Shared tail: hooks and projections, from gradients of the hooked
/// queries `[b, n, h·k]`, raw keys `[b, m, ·]` and hooked values `[b, m, ·]`.
#[allow(clippy::too_many_arguments)]
fn projection_backward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    q_raw: &Tensor<T>,
    v_raw: &Tensor<T>,
    dq_hooked: Tensor<T>,
    dk: Tensor<T>,
    dv_hooked: Tensor<T>,
    dr: Tensor<T>,
) -> Result<GradBundle<T>> {
    let qh = hook_or_identity(config.hook, q_raw, dq_hooked, &params.q_scale)?;
    let vh = hook_or_identity(config.hook, v_raw, dv_hooked, &params.v_scale)?;
    let (w_q, dx) = linear_backward(x, &params.w_q, &qh.raw)?;
    let (w_k, dc_k) = linear_backward(c, &params.w_k, &dk)?;
    let (w_v, dc_v) = linear_backward(c, &params.w_v, &vh.raw)?;
    Ok(GradBundle {
        x: dx,
        c: dc_k.add(&dc_v)?,
        w_q,
        w_k,
        w_v,
        r: dr,
        q_scale: qh.scale,
        q_shift: qh.shift,
        v_scale: vh.scale,
        v_shift: vh.shift,
    })
}

/// Queries gradient `[b, h, n, k]` as hooked-query gradient `[b, n, h·k]`.
fn merge_query_grad<T: Scalar>(dq: Tensor<T>) -> Result<Tensor<T>> {
    let s = dq.shape().to_vec();
    dq.permute(&[0, 2, 1, 3])?.into_reshape(&[s[0], s[2], s[1] * s[3]])
}

fn standard_backward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    upstream: &Tensor<T>,
    intra: bool,
) -> Result<GradBundle<T>> {
    let fwd = forward_parts(x, c, params, config, intra)?;
    let g = split_heads(upstream, fwd.output.shape(), config.h)?;
    let q = &fwd.proj.q;
    let (b, m) = (c.shape()[0], c.shape()[1]);
    let (k, v) = (config.k, config.v());
    let u = if intra { config.u } else { 1 };

    // everything below works on [.., u] tensors; u = 1 for the default layer
    let keys = fwd.proj.k.reshape(&[b, m, k, u])?;
    let kbar = fwd.keys_normalized.reshape(&[b, m, k, u])?;
    let vals = fwd.proj.v.reshape(&[b, m, v, u])?;

    let mut dq: Option<Tensor<T>> = None;
    let mut dvals: Option<Tensor<T>> = None;
    let mut dkeys = Tensor::zeros(&[b, m, k, u]);
    let mut dr = Tensor::zeros(params.r.tensor().shape());

    if let Some(lc) = &fwd.content {
        dq = add_opt(dq, contract("bnhv,bkv->bhnk", &[&g, lc])?)?;
        let mut dlc = contract("bhnk,bnhv->bkv", &[q, &g])?;
        if mutation::active() == mutation::Mutation::ContentSignFlip {
            dlc = dlc.scale(-T::one());
        }
        let dkbar = contract("bkv,bmvu->bmku", &[&dlc, &vals])?;
        dvals = add_opt(dvals, contract("bmku,bkv->bmvu", &[&kbar, &dlc])?)?;
        dkeys = match config.intra_norm {
            IntraNorm::Joint => {
                norm_backward(&keys, &kbar, &dkbar, config.key_norm, &[0, 2, 1, 3], &[0, 2, 1, 3], m * u)?
            }
            IntraNorm::PerU => norm_backward(&keys, &kbar, &dkbar, config.key_norm, &[0, 2, 3, 1], &[0, 3, 1, 2], m)?,
        };
    }
    if let Some(lp) = &fwd.position {
        dq = add_opt(dq, contract("bnhv,bnkv->bhnk", &[&g, lp])?)?;
        let dlp = contract("bhnk,bnhv->bnkv", &[q, &g])?;
        match config.implementation {
            Implementation::Einsum => {
                let e = fwd.embeddings.as_ref().expect("einsum path keeps embeddings");
                let e = e.reshape(&[e.shape()[0], e.shape()[1], k, u])?;
                dvals = add_opt(dvals, contract("nmku,bnkv->bmvu", &[&e, &dlp])?)?;
                let de = contract("bnkv,bmvu->nmku", &[&dlp, &vals])?;
                dr = scatter_embeddings(&config.rel_index_map()?, &de, params.r.tensor().shape())?;
            }
            Implementation::Conv | Implementation::Depthwise => {
                let (r_grad, dv) = conv::position_lambdas_conv_backward(
                    params.r.tensor(),
                    &vals,
                    &dlp,
                    &config.geometry,
                    &config.kernel_extents(),
                )?;
                dvals = add_opt(dvals, dv)?;
                dr = r_grad;
            }
        }
    }
    let dq = dq.expect("at least one lambda term");
    let dvals = dvals.expect("at least one lambda term");
    projection_backward(
        x,
        c,
        params,
        config,
        &fwd.proj.q_raw,
        &fwd.proj.v_raw,
        merge_query_grad(dq)?,
        dkeys.into_reshape(&[b, m, k * u])?,
        dvals.into_reshape(&[b, m, v * u])?,
        dr,
    )
}

fn masked_backward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    mask: &MaskSpec,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let fwd = masked_parts(x, c, params, config, mask)?;
    let g = split_heads(upstream, fwd.output.shape(), config.h)?;
    let (b, m) = (c.shape()[0], c.shape()[1]);
    let n = mask.n();
    let (k, v) = (config.k, config.v());

    let mut dq: Option<Tensor<T>> = None;
    let mut dvals = Tensor::zeros(&[b, m, v]);
    let mut dkeys = Tensor::zeros(&[b, m, k]);
    let mut dr = Tensor::zeros(params.r.tensor().shape());

    if let Some(lc) = &fwd.content {
        dq = add_opt(dq, contract("bnhv,bnkv->bhnk", &[&g, lc])?)?;
        let dlc = contract("bhnk,bnhv->bnkv", &[&fwd.q, &g])?;
        // per query: recompute its key weights, push the gradient through them
        let (kd, vd, gd) = (fwd.k.data(), fwd.v.data(), dlc.data());
        let mut w = vec![T::zero(); m * k];
        let mut dw = vec![T::zero(); m * k];
        let mut col_x = vec![T::zero(); m];
        let mut col_y = vec![T::zero(); m];
        let mut col_g = vec![T::zero(); m];
        let dv = dvals.data_mut();
        let mut dk_acc = vec![T::zero(); b * m * k];
        for bi in 0..b {
            let kb = &kd[bi * m * k..(bi + 1) * m * k];
            for ni in 0..n {
                masked_key_weights(kb, m, k, |mi| mask.allows(ni, mi), config.key_norm, &mut w);
                let gq = &gd[(bi * n + ni) * k * v..(bi * n + ni + 1) * k * v];
                for mi in 0..m {
                    let vrow = &vd[(bi * m + mi) * v..(bi * m + mi + 1) * v];
                    let dvrow = &mut dv[(bi * m + mi) * v..(bi * m + mi + 1) * v];
                    for ki in 0..k {
                        let grow = &gq[ki * v..(ki + 1) * v];
                        let wk = w[mi * k + ki];
                        let mut acc = T::zero();
                        for vi in 0..v {
                            acc = acc + grow[vi] * vrow[vi];
                            dvrow[vi] = dvrow[vi] + wk * grow[vi];
                        }
                        dw[mi * k + ki] = acc;
                    }
                }
                // normalization backward over the visible positions only
                let visible: Vec<usize> = (0..m).filter(|&mi| mask.allows(ni, mi)).collect();
                let len = visible.len();
                for ki in 0..k {
                    for (j, &mi) in visible.iter().enumerate() {
                        col_x[j] = kb[mi * k + ki];
                        col_y[j] = w[mi * k + ki];
                        col_g[j] = dw[mi * k + ki];
                    }
                    norm_backward_slice(&col_x[..len], &col_y[..len], &mut col_g[..len], config.key_norm);
                    for (j, &mi) in visible.iter().enumerate() {
                        let i = (bi * m + mi) * k + ki;
                        dk_acc[i] = dk_acc[i] + col_g[j];
                    }
                }
            }
        }
        dkeys = Tensor::new(vec![b, m, k], dk_acc)?;
    }
    if let Some(lp) = &fwd.position {
        dq = add_opt(dq, contract("bnhv,bnkv->bhnk", &[&g, lp])?)?;
        let dlp = contract("bhnk,bnhv->bnkv", &[&fwd.q, &g])?;
        let em = fwd.embeddings.as_ref().expect("position term keeps embeddings");
        dvals.add_assign(&contract("knm,bnkv->bmv", &[em, &dlp])?)?;
        let dem = contract("bnkv,bmv->knm", &[&dlp, &fwd.v])?;
        let de = variants::masked_embeddings(&dem.permute(&[1, 2, 0])?, mask)?.permute(&[1, 2, 0])?;
        dr = scatter_embeddings(&config.rel_index_map()?, &de, params.r.tensor().shape())?;
    }
    projection_backward(
        x,
        c,
        params,
        config,
        &fwd.q_raw,
        &fwd.v_raw,
        merge_query_grad(dq.expect("at least one lambda term"))?,
        dkeys,
        dvals,
        dr,
    )
}

fn multihead_backward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let fwd = multihead_parts(x, c, params, config)?;
    let g = split_heads(upstream, fwd.output.shape(), config.h)?;
    let (b, m) = (c.shape()[0], c.shape()[1]);
    let n = config.n();
    let (h, k, v) = (config.h, config.k, config.v());

    let mut dq: Option<Tensor<T>> = None;
    let mut dvals: Option<Tensor<T>> = None;
    let mut dkeys = Tensor::zeros(&[b, h, m, k]);
    let mut dr = Tensor::zeros(params.r.tensor().shape());

    if let Some(lc) = &fwd.content {
        dq = add_opt(dq, contract("bnhv,bhkv->bhnk", &[&g, lc])?)?;
        let dlc = contract("bhnk,bnhv->bhkv", &[&fwd.q, &g])?;
        let dkbar = contract("bhkv,bhmv->bhmk", &[&dlc, &fwd.v])?;
        dvals = add_opt(dvals, contract("bhmk,bhkv->bhmv", &[&fwd.k_bar, &dlc])?)?;
        dkeys = norm_backward(&fwd.k, &fwd.k_bar, &dkbar, config.key_norm, &[0, 1, 3, 2], &[0, 1, 3, 2], m)?;
    }
    if let Some(lp) = &fwd.position {
        dq = add_opt(dq, contract("bnhv,bnhkv->bhnk", &[&g, lp])?)?;
        let dlp = contract("bhnk,bnhv->bnhkv", &[&fwd.q, &g])?;
        let e = fwd.embeddings.as_ref().expect("position term keeps embeddings");
        dvals = add_opt(dvals, contract("hnmk,bnhkv->bhmv", &[e, &dlp])?)?;
        let de = contract("bnhkv,bhmv->nmhk", &[&dlp, &fwd.v])?.into_reshape(&[n, m, h * k])?;
        dr = scatter_embeddings(&config.rel_index_map()?, &de, params.r.tensor().shape())?;
    }
    let dvals = dvals.expect("at least one lambda term");
    projection_backward(
        x,
        c,
        params,
        config,
        &fwd.q_raw,
        &fwd.v_raw,
        merge_query_grad(dq.expect("at least one lambda term"))?,
        dkeys.permute(&[0, 2, 1, 3])?.into_reshape(&[b, m, h * k])?,
        dvals.permute(&[0, 2, 1, 3])?.into_reshape(&[b, m, h * v])?,
        dr,
    )
}

/// Scalar test functional `L = Σ w ⊙ Y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Functional {
    Sum,
    /// Standard normal weights drawn from the given seed.
    Random(u64),
}

impl Functional {
    pub fn weights<T: Scalar>(&self, shape: &[usize]) -> Tensor<T> {
        match *self {
            Functional::Sum => Tensor::full(shape, T::one()),
            Functional::Random(seed) => StreamRng::new(seed, Stream::Functional, 0).normal_tensor(shape, 1.0),
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Compares [`backward`] against central differences with the given step on
/// every coordinate of the inputs and parameters. Parameters whose gradient
/// is structurally zero (hooks when disabled) are still checked.
pub fn finite_diff_check(
    variant: &Variant,
    x: &Tensor<f64>,
    c: &Tensor<f64>,
    params: &LambdaParams<f64>,
    config: &LambdaConfig,
    functional: Functional,
    step: f64,
) -> Result<GradCheckReport> {
    let y = variants::forward(variant, x, c, params, config)?;
    let w = functional.weights::<f64>(y.shape());
    let grads = backward(variant, x, c, params, config, &w)?;

    let loss_diff = |xp: &Tensor<f64>, cp: &Tensor<f64>, pp: &LambdaParams<f64>, xm: &Tensor<f64>, cm: &Tensor<f64>, pm: &LambdaParams<f64>| -> Result<f64> {
        let yp = variants::forward(variant, xp, cp, pp, config)?;
        let ym = variants::forward(variant, xm, cm, pm, config)?;
        let diff = yp.sub(&ym)?;
        Ok(diff.data().iter().zip(w.data()).map(|(d, w)| d * w).sum::<f64>() / (2.0 * step))
    };

    let mut entries = Vec::with_capacity(GRAD_NAMES.len());
    for (slot, (&name, grad)) in GRAD_NAMES.iter().zip(grads.tensors()).enumerate() {
        let mut entry = GradCheckEntry {
            name: name.to_string(),
            checked: grad.len(),
            max_rel_err: 0.0,
            worst_index: vec![],
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..grad.len() {
            let (mut xp, mut cp, mut pp) = (x.clone(), c.clone(), params.clone());
            let (mut xm, mut cm, mut pm) = (x.clone(), c.clone(), params.clone());
            {
                let target = |xs: &mut Tensor<f64>, cs: &mut Tensor<f64>, ps: &mut LambdaParams<f64>, delta: f64| match slot {
                    0 => xs.data_mut()[i] += delta,
                    1 => cs.data_mut()[i] += delta,
                    s => ps.tensors_mut()[s - 2].data_mut()[i] += delta,
                };
                target(&mut xp, &mut cp, &mut pp, step);
                target(&mut xm, &mut cm, &mut pm, -step);
            }
            let numeric = loss_diff(&xp, &cp, &pp, &xm, &cm, &pm)?;
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric);
            if err > entry.max_rel_err || entry.worst_index.is_empty() {
                entry.max_rel_err = err;
                entry.worst_index = unravel(i, grad.shape());
                entry.analytic = analytic;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { step, entries, max_rel_err })
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (a, &e) in shape.iter().enumerate().rev() {
        idx[a] = i % e;
        i /= e;
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{init_multihead_params, init_params, Interactions};
    use crate::relpos::{Boundary, Geometry};

    fn data(b: usize, n: usize, d: usize, seed: u64) -> Tensor<f64> {
        StreamRng::new(seed, Stream::Data, 0).normal_tensor(&[b, n, d], 1.0)
    }

    fn check(variant: Variant, config: LambdaConfig, multihead: bool) -> GradCheckReport {
        let params = if multihead { init_multihead_params(&config, 3) } else { init_params(&config, 3) }.unwrap();
        let n = config.n();
        let x = data(2, n, config.d_in, 4);
        let c = data(2, n, config.d_in, 5);
        finite_diff_check(&variant, &x, &c, &params, &config, Functional::Random(6), 1e-5).unwrap()
    }

    fn assert_close(report: &GradCheckReport) {
        for e in &report.entries {
            assert!(e.max_rel_err < 1e-6, "{}: {} at {:?} ({} vs {})", e.name, e.max_rel_err, e.worst_index, e.analytic, e.numeric);
        }
    }

    #[test]
    fn standard_einsum_with_hook() {
        let config = LambdaConfig::new(3, 4, 2, 2, Geometry::Seq(4)).with_hook(true);
        assert_close(&check(Variant::Standard, config, false));
    }

    #[test]
    fn l2_and_unnormalized_keys() {
        for norm in [KeyNorm::L2, KeyNorm::None] {
            let config = LambdaConfig::new(3, 2, 2, 1, Geometry::Seq(3)).with_key_norm(norm);
            assert_close(&check(Variant::Standard, config, false));
        }
    }

    #[test]
    fn conv_paths() {
        for imp in [Implementation::Conv, Implementation::Depthwise] {
            let config = LambdaConfig::new(2, 2, 2, 1, Geometry::Grid(2, 3)).with_scope(&[3, 3]).with_implementation(imp);
            assert_close(&check(Variant::Standard, config, false));
        }
    }

    #[test]
    fn circular_scope_and_interaction_modes() {
        let config = LambdaConfig::new(2, 2, 2, 1, Geometry::Seq(5)).with_boundary(Boundary::Circular).with_scope(&[3]);
        assert_close(&check(Variant::Standard, config.clone(), false));
        for mode in [Interactions::ContentOnly, Interactions::PositionOnly] {
            assert_close(&check(Variant::Standard, config.clone().with_interactions(mode), false));
        }
    }

    #[test]
    fn masked_multihead_intra() {
        let config = LambdaConfig::new(3, 4, 2, 2, Geometry::Seq(4)).with_hook(true);
        assert_close(&check(Variant::Masked(MaskSpec::causal(4).unwrap()), config.clone(), false));
        assert_close(&check(Variant::MultiHead, config, true));
        let config = LambdaConfig::new(3, 2, 2, 1, Geometry::Seq(3)).with_u(2);
        assert_close(&check(Variant::IntraDepth, config.clone(), false));
        let config = config.with_intra_norm(IntraNorm::PerU).with_implementation(Implementation::Conv);
        assert_close(&check(Variant::IntraDepth, config, false));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
