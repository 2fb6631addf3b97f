//! The multi-query lambda layer.
//!
//! A lambda layer summarizes the context `C` into one linear map per query
//! position, `λ_n = K̄ᵀV + E_nᵀV` (a content part shared by all queries plus a
//! position part built from relative embeddings), and applies it to each of
//! the `h` queries at that position: `y_n = concat_h(λ_nᵀ q_n^h)`. No
//! `[n, m]` attention map is ever formed.
//!
//! Shapes follow the usual labels: `b` batch, `n` queries, `m` context
//! positions, `k` query/key depth, `v` value depth (`d_out / h`), `h`
//! queries per position, `u` intra-depth.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{config_err, shape_err, LambdaError, Result};
use crate::relpos::{axis_bucket_counts, build_rel_index_map, expand_embeddings, Boundary, EmbeddingTable, Geometry, RelIndexMap};
use crate::rng::{Stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{contract, Tensor};

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(concat!("unknown ", stringify!($name), " '{}'"), other)),
                }
            }
        }
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text,)+ })
            }
        }
    };
}

/// Normalization applied to the keys across context positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyNorm {
    /// Softmax over `m`, independently per `(b, k)`.
    #[default]
    Softmax,
    L2,
    None,
}
str_enum!(KeyNorm { Softmax => "softmax", L2 => "l2", None => "none" });

/// How the position lambdas are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Implementation {
    /// Dense `E[n, m, k]` contracted with the values (scope applied by zeroing).
    #[default]
    Einsum,
    /// (n+1)-d convolution treating the value depth as an extra spatial axis.
    Conv,
    /// n-d depthwise convolution with channel multiplier `k`.
    Depthwise,
}
str_enum!(Implementation { Einsum => "einsum", Conv => "conv", Depthwise => "depthwise" });

/// Which lambda terms contribute to the output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interactions {
    #[default]
    Full,
    ContentOnly,
    PositionOnly,
}
str_enum!(Interactions { Full => "full", ContentOnly => "content-only", PositionOnly => "position-only" });

/// Softmax axes for intra-depth keys `[b, m, k, u]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntraNorm {
    /// Normalize jointly over `(m, u)`: total mass per `(b, k)` is one.
    #[default]
    Joint,
    /// Normalize over `m` separately for every `u`.
    PerU,
}
str_enum!(IntraNorm { Joint => "joint", PerU => "per-u" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub k: usize,
    pub h: usize,
    pub u: usize,
    pub geometry: Geometry,
    pub boundary: Boundary,
    pub scope: Option<Vec<usize>>,
    pub key_norm: KeyNorm,
    pub intra_norm: IntraNorm,
    pub hook: bool,
    pub implementation: Implementation,
    pub interactions: Interactions,
}

impl LambdaConfig {
    pub fn new(d_in: usize, d_out: usize, k: usize, h: usize, geometry: Geometry) -> Self {
        Self {
            d_in,
            d_out,
            k,
            h,
            u: 1,
            geometry,
            boundary: Boundary::Clamped,
            scope: None,
            key_norm: KeyNorm::Softmax,
            intra_norm: IntraNorm::Joint,
            hook: false,
            implementation: Implementation::Einsum,
            interactions: Interactions::Full,
        }
    }

    pub fn with_scope(mut self, scope: &[usize]) -> Self {
        self.scope = Some(scope.to_vec());
        self
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_u(mut self, u: usize) -> Self {
        self.u = u;
        self
    }

    pub fn with_key_norm(mut self, key_norm: KeyNorm) -> Self {
        self.key_norm = key_norm;
        self
    }

    pub fn with_intra_norm(mut self, intra_norm: IntraNorm) -> Self {
        self.intra_norm = intra_norm;
        self
    }

    pub fn with_hook(mut self, hook: bool) -> Self {
        self.hook = hook;
        self
    }

    pub fn with_implementation(mut self, implementation: Implementation) -> Self {
        self.implementation = implementation;
        self
    }

    pub fn with_interactions(mut self, interactions: Interactions) -> Self {
        self.interactions = interactions;
        self
    }

    /// Value depth `d_out / h`.
    pub fn v(&self) -> usize {
        self.d_out / self.h
    }

    /// Number of positions in the (self-)context geometry.
    pub fn n(&self) -> usize {
        self.geometry.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, val) in [("d_in", self.d_in), ("d_out", self.d_out), ("k", self.k), ("h", self.h)] {
            if val == 0 {
                return config_err(format!("{name} must be >= 1"));
            }
        }
        if self.u == 0 {
            return config_err("intra-depth u must be >= 1");
        }
        if !self.d_out.is_multiple_of(self.h) {
            return config_err(format!("d_out = {} is not divisible by h = {}", self.d_out, self.h));
        }
        if self.geometry.extents().contains(&0) {
            return config_err("geometry must have at least one position");
        }
        if self.implementation != Implementation::Einsum && self.boundary == Boundary::Circular {
            return config_err("convolution paths zero-pad; circular boundaries need the einsum path");
        }
        if self.implementation == Implementation::Depthwise && self.u > 1 {
            return config_err("depthwise lambda convolution supports u = 1 only; use conv");
        }
        self.axis_buckets().map(|_| ())
    }

    fn axis_buckets(&self) -> Result<Vec<usize>> {
        axis_bucket_counts(&self.geometry, self.boundary, self.scope.as_deref())
    }

    pub fn rel_index_map(&self) -> Result<RelIndexMap> {
        build_rel_index_map(&self.geometry, &self.geometry, self.boundary, self.scope.as_deref())
    }

    /// Convolution kernel extent per spatial axis: the scope, or the full
    /// `2N - 1` window when no scope is set.
    pub fn kernel_extents(&self) -> Vec<usize> {
        match &self.scope {
            Some(s) => s.clone(),
            None => self.geometry.extents().iter().map(|&e| 2 * e - 1).collect(),
        }
    }

    pub fn num_buckets(&self) -> Result<usize> {
        Ok(self.axis_buckets()?.iter().product())
    }
}

/// Learned parameters of one lambda layer.
///
/// Multi-query shapes: `w_q [d_in, h*k]`, `w_k [d_in, k*u]`, `w_v [d_in, v*u]`,
/// `r [|r|, k]` (or `[|r|, k, u]`), hook vectors `[h*k]` and `[v*u]`.
/// Multi-head parameters (see [`init_multihead_params`]) reuse the struct
/// with per-head column blocks: `w_k [d_in, h*k]`, `w_v [d_in, h*v]`,
/// `r [|r|, h*k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaParams<T = f64> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub r: EmbeddingTable<T>,
    pub q_scale: Tensor<T>,
    pub q_shift: Tensor<T>,
    pub v_scale: Tensor<T>,
    pub v_shift: Tensor<T>,
}

pub const PARAM_NAMES: [&str; 8] = ["w_q", "w_k", "w_v", "r", "q_scale", "q_shift", "v_scale", "v_shift"];

impl<T: Scalar> LambdaParams<T> {
    pub fn cast<U: Scalar>(&self) -> LambdaParams<U> {
        LambdaParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            r: EmbeddingTable::new(self.r.tensor().cast()).expect("cast keeps table shape"),
            q_scale: self.q_scale.cast(),
            q_shift: self.q_shift.cast(),
            v_scale: self.v_scale.cast(),
            v_shift: self.v_shift.cast(),
        }
    }

    /// Parameter tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [&self.w_q, &self.w_k, &self.w_v, self.r.tensor(), &self.q_scale, &self.q_shift, &self.v_scale, &self.v_shift]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            self.r.tensor_mut(),
            &mut self.q_scale,
            &mut self.q_shift,
            &mut self.v_scale,
            &mut self.v_shift,
        ]
    }

    /// Learnable scalars excluding the normalization hook.
    pub fn param_count(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.r.tensor().len()
    }

    fn check_shapes(&self, expect: [Vec<usize>; 8]) -> Result<()> {
        for ((name, t), want) in PARAM_NAMES.iter().zip(self.tensors()).zip(expect) {
            if t.shape() != want.as_slice() {
                return shape_err(format!("parameter {name} has shape {:?}, expected {want:?}", t.shape()));
            }
        }
        Ok(())
    }

    /// Checks every shape against a multi-query configuration.
    pub fn check(&self, config: &LambdaConfig) -> Result<()> {
        let (d, k, h, u, v) = (config.d_in, config.k, config.h, config.u, config.v());
        let r = config.num_buckets()?;
        let r_shape = if u == 1 { vec![r, k] } else { vec![r, k, u] };
        self.check_shapes([
            vec![d, h * k],
            vec![d, k * u],
            vec![d, v * u],
            r_shape,
            vec![h * k],
            vec![h * k],
            vec![v * u],
            vec![v * u],
        ])
    }

    /// Checks every shape against a multi-head configuration.
    pub fn check_multihead(&self, config: &LambdaConfig) -> Result<()> {
        let (d, k, h, v) = (config.d_in, config.k, config.h, config.v());
        let r = config.num_buckets()?;
        self.check_shapes([
            vec![d, h * k],
            vec![d, h * k],
            vec![d, h * v],
            vec![r, h * k],
            vec![h * k],
            vec![h * k],
            vec![h * v],
            vec![h * v],
        ])
    }
}

fn hook_vectors<T: Scalar>(len: usize) -> (Tensor<T>, Tensor<T>) {
    (Tensor::full(&[len], T::one()), Tensor::zeros(&[len]))
}

/// Fan-in initialization: `W_Q ~ N(0, (k d)^-1/2)`, `W_K, W_V ~ N(0, d^-1/2)`
/// (second argument is the standard deviation), `R ~ N(0, 1)`. Hook scale
/// starts at one and shift at zero. Draws are taken in the order
/// `W_Q, W_K, W_V, R` from the params stream of `seed`.
pub fn init_params(config: &LambdaConfig, seed: u64) -> Result<LambdaParams<f64>> {
    config.validate()?;
    let (d, k, h, u, v) = (config.d_in, config.k, config.h, config.u, config.v());
    let mut rng = StreamRng::new(seed, Stream::Params, 0);
    let w_q = rng.normal_tensor(&[d, h * k], 1.0 / ((k * d) as f64).sqrt());
    let w_k = rng.normal_tensor(&[d, k * u], 1.0 / (d as f64).sqrt());
    let w_v = rng.normal_tensor(&[d, v * u], 1.0 / (d as f64).sqrt());
    let r = EmbeddingTable::random(config.num_buckets()?, k, u, &mut rng);
    let (q_scale, q_shift) = hook_vectors(h * k);
    let (v_scale, v_shift) = hook_vectors(v * u);
    Ok(LambdaParams { w_q, w_k, w_v, r, q_scale, q_shift, v_scale, v_shift })
}

/// Multi-head parameters: every head owns its keys, values and embeddings.
pub fn init_multihead_params(config: &LambdaConfig, seed: u64) -> Result<LambdaParams<f64>> {
    config.validate()?;
    if config.u != 1 {
        return config_err("multi-head lambdas support u = 1 only");
    }
    let (d, k, h, v) = (config.d_in, config.k, config.h, config.v());
    let mut rng = StreamRng::new(seed, Stream::Params, 1);
    let w_q = rng.normal_tensor(&[d, h * k], 1.0 / ((k * d) as f64).sqrt());
    let w_k = rng.normal_tensor(&[d, h * k], 1.0 / (d as f64).sqrt());
    let w_v = rng.normal_tensor(&[d, h * v], 1.0 / (d as f64).sqrt());
    let r = EmbeddingTable::random(config.num_buckets()?, h * k, 1, &mut rng);
    let (q_scale, q_shift) = hook_vectors(h * k);
    let (v_scale, v_shift) = hook_vectors(h * v);
    Ok(LambdaParams { w_q, w_k, w_v, r, q_scale, q_shift, v_scale, v_shift })
}

/// Test-only fault injection used by the mutation mode of the verification
/// suites. The flag is thread-local.
pub mod mutation {
    use super::*;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Mutation {
        None,
        /// Negate the content lambda.
        ContentSignFlip,
    }

    thread_local! {
        static ACTIVE: Cell<Mutation> = const { Cell::new(Mutation::None) };
    }

    pub fn active() -> Mutation {
        ACTIVE.with(|a| a.get())
    }

    /// Runs `f` with `m` injected on this thread.
    pub fn with<R>(m: Mutation, f: impl FnOnce() -> R) -> R {
        let prev = ACTIVE.with(|a| a.replace(m));
        let out = f();
        ACTIVE.with(|a| a.set(prev));
        out
    }
}

/// Queries, keys and values for one forward pass.
#[derive(Clone, Debug)]
pub struct Projections<T> {
    /// `[b, h, n, k]`
    pub q: Tensor<T>,
    /// `[b, m, k]`, or `[b, m, k, u]` when `u > 1` or requested.
    pub k: Tensor<T>,
    /// `[b, m, v]`, or `[b, m, v, u]`.
    pub v: Tensor<T>,
    /// Queries `[b, n, h*k]` before the hook.
    pub q_raw: Tensor<T>,
    /// Values `[b, m, v*u]` before the hook.
    pub v_raw: Tensor<T>,
}

/// Per-channel `x * scale + shift` over the last axis.
pub(crate) fn apply_hook<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    x.mul(scale)?.add(shift)
}

pub(crate) fn check_input<T: Scalar>(name: &str, t: &Tensor<T>, positions: usize, d: usize) -> Result<()> {
    if t.rank() != 3 || t.shape()[1] != positions || t.shape()[2] != d {
        return shape_err(format!("{name} has shape {:?}, expected [b, {positions}, {d}]", t.shape()));
    }
    Ok(())
}

/// Projects inputs and context. `key_depth` and `value_depth` are the
/// per-position column counts of `W_K` and `W_V`; with `intra = Some(u)` the
/// keys and values keep a trailing `u` axis.
pub(crate) fn project<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    intra: Option<usize>,
) -> Result<Projections<T>> {
    let d = config.d_in;
    if x.rank() != 3 || x.shape()[2] != d {
        return shape_err(format!("inputs have shape {:?}, expected [b, n, {d}]", x.shape()));
    }
    if c.rank() != 3 || c.shape()[2] != d || c.shape()[0] != x.shape()[0] {
        return shape_err(format!("context has shape {:?}, expected [{}, m, {d}]", c.shape(), x.shape()[0]));
    }
    if params.w_q.shape()[0] != d || params.w_k.shape()[0] != d || params.w_v.shape()[0] != d {
        return shape_err(format!("projection fan-in does not match d_in = {d}"));
    }
    let (b, n, m) = (x.shape()[0], x.shape()[1], c.shape()[1]);
    let (h, k) = (config.h, config.k);

    let q_raw = contract("bnd,de->bne", &[x, &params.w_q])?;
    let q = if config.hook { apply_hook(&q_raw, &params.q_scale, &params.q_shift)? } else { q_raw.clone() };
    let q = q.into_reshape(&[b, n, h, k])?.permute(&[0, 2, 1, 3])?;

    let keys = contract("bnd,de->bne", &[c, &params.w_k])?;
    let v_raw = contract("bnd,de->bne", &[c, &params.w_v])?;
    let values = if config.hook { apply_hook(&v_raw, &params.v_scale, &params.v_shift)? } else { v_raw.clone() };
    let (keys, values) = match intra {
        None => (keys, values),
        Some(u) => {
            let kd = keys.shape()[2] / u;
            let vd = values.shape()[2] / u;
            (keys.into_reshape(&[b, m, kd, u])?, values.into_reshape(&[b, m, vd, u])?)
        }
    };
    Ok(Projections { q, k: keys, v: values, q_raw, v_raw })
}

/// Queries `[b, h, n, k]`, keys `[b, m, k]` and values `[b, m, v]`.
pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    config.validate()?;
    let intra = (config.u > 1).then_some(config.u);
    let p = project(x, c, params, config, intra)?;
    Ok((p.q, p.k, p.v))
}

/// Normalizes keys `[b, m, k]` (or `[b, m, k, u]`, jointly over `(m, u)`)
/// across context positions.
pub fn normalize_keys<T: Scalar>(keys: &Tensor<T>, mode: KeyNorm) -> Result<Tensor<T>> {
    normalize_keys_with(keys, mode, IntraNorm::Joint)
}

pub fn normalize_keys_with<T: Scalar>(keys: &Tensor<T>, mode: KeyNorm, intra: IntraNorm) -> Result<Tensor<T>> {
    let norm = |t: &Tensor<T>, axis: usize| match mode {
        KeyNorm::Softmax => t.softmax(axis),
        KeyNorm::L2 => t.l2_normalize(axis),
        KeyNorm::None => Ok(t.clone()),
    };
    match (keys.rank(), intra) {
        (3, _) => norm(keys, 1),
        (4, IntraNorm::PerU) => norm(keys, 1),
        (4, IntraNorm::Joint) => {
            let s = keys.shape();
            let (b, m, k, u) = (s[0], s[1], s[2], s[3]);
            let flat = keys.permute(&[0, 2, 1, 3])?.into_reshape(&[b, k, m * u])?;
            norm(&flat, 2)?.into_reshape(&[b, k, m, u])?.permute(&[0, 2, 1, 3])
        }
        _ => shape_err(format!("keys must be [b,m,k] or [b,m,k,u], got {:?}", keys.shape())),
    }
}

/// `λc = Σ_m k̄_m v_mᵀ`, shape `[b, k, v]`. Intra-depth keys and values also
/// sum over `u`.
pub fn content_lambda<T: Scalar>(keys: &Tensor<T>, values: &Tensor<T>) -> Result<Tensor<T>> {
    let lam = match keys.rank() {
        3 => contract("bmk,bmv->bkv", &[keys, values])?,
        _ => contract("bmku,bmvu->bkv", &[keys, values])?,
    };
    Ok(match mutation::active() {
        mutation::Mutation::ContentSignFlip => lam.scale(-T::one()),
        mutation::Mutation::None => lam,
    })
}

/// `λp_n = E_nᵀ V`, shape `[b, n, k, v]`, from dense embeddings `[n, m, k]`
/// (or `[n, m, k, u]`).
pub fn position_lambdas_einsum<T: Scalar>(embeddings: &Tensor<T>, values: &Tensor<T>) -> Result<Tensor<T>> {
    match (embeddings.rank(), values.rank()) {
        (3, 3) => contract("nmk,bmv->bnkv", &[embeddings, values]),
        (3, 4) => {
            let s = embeddings.shape();
            let e = embeddings.reshape(&[s[0], s[1], s[2], 1])?;
            position_lambdas_einsum(&e, values)
        }
        (4, _) => {
            let e = embeddings.permute(&[2, 0, 1, 3])?;
            contract("knmu,bmvu->bnkv", &[&e, values])
        }
        _ => shape_err(format!("embeddings must be [n,m,k] or [n,m,k,u], got {:?}", embeddings.shape())),
    }
}

/// `y_n^h = (λc + λp_n)ᵀ q_n^h` with heads concatenated in order along the
/// channel axis. The content lambda may be shared (`[b, k, v]`) or per query
/// (`[b, n, k, v]`); either term may be absent.
pub fn apply_lambdas<T: Scalar>(
    queries: &Tensor<T>,
    content: Option<&Tensor<T>>,
    position: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, h, n) = (queries.shape()[0], queries.shape()[1], queries.shape()[2]);
    let mut out: Option<Tensor<T>> = None;
    for lam in [content, position].into_iter().flatten() {
        let part = match lam.rank() {
            3 => contract("bhnk,bkv->bnhv", &[queries, lam])?,
            4 => contract("bhnk,bnkv->bnhv", &[queries, lam])?,
            _ => return shape_err(format!("lambda has shape {:?}", lam.shape())),
        };
        out = Some(match out {
            None => part,
            Some(acc) => acc.add(&part)?,
        });
    }
    let out = out.ok_or_else(|| LambdaError::Config("no lambda terms to apply".into()))?;
    let v = out.shape()[3];
    out.into_reshape(&[b, n, h * v])
}

/// Every intermediate of a multi-query forward pass.
#[derive(Clone, Debug)]
pub struct ForwardParts<T> {
    pub proj: Projections<T>,
    pub keys_normalized: Tensor<T>,
    pub content: Option<Tensor<T>>,
    pub position: Option<Tensor<T>>,
    /// Dense embeddings when the einsum path ran.
    pub embeddings: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

pub(crate) fn position_lambdas_for<T: Scalar>(
    config: &LambdaConfig,
    params: &LambdaParams<T>,
    values: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let kernel = config.kernel_extents();
    match config.implementation {
        Implementation::Einsum => {
            let e = expand_embeddings(&config.rel_index_map()?, &params.r)?;
            Ok((position_lambdas_einsum(&e, values)?, Some(e)))
        }
        Implementation::Conv => {
            Ok((conv::position_lambdas_conv(params.r.tensor(), values, &config.geometry, &kernel)?, None))
        }
        Implementation::Depthwise => {
            Ok((conv::position_lambdas_depthwise(params.r.tensor(), values, &config.geometry, &kernel)?, None))
        }
    }
}

/// Forward pass keeping every intermediate. `intra` selects the intra-depth
/// formulation (keys/values with a trailing `u` axis) even when `u == 1`.
pub fn forward_parts<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    intra: bool,
) -> Result<ForwardParts<T>> {
    config.validate()?;
    params.check(config)?;
    let n = config.n();
    check_input("inputs", x, n, config.d_in)?;
    check_input("context", c, n, config.d_in)?;
    if !intra && config.u != 1 {
        return config_err("u > 1 requires the intra-depth forward");
    }
    let proj = project(x, c, params, config, intra.then_some(config.u))?;
    let keys_normalized = normalize_keys_with(&proj.k, config.key_norm, config.intra_norm)?;
    let content = match config.interactions {
        Interactions::PositionOnly => None,
        _ => Some(content_lambda(&keys_normalized, &proj.v)?),
    };
    let (position, embeddings) = match config.interactions {
        Interactions::ContentOnly => (None, None),
        _ => {
            let (p, e) = position_lambdas_for(config, params, &proj.v)?;
            (Some(p), e)
        }
    };
    let output = apply_lambdas(&proj.q, content.as_ref(), position.as_ref())?;
    Ok(ForwardParts { proj, keys_normalized, content, position, embeddings, output })
}

/// Multi-query lambda layer `Y [b, n, d_out]` for inputs `X [b, n, d_in]` and
/// context `C [b, m, d_in]`. Requires `u == 1`.
pub fn lambda_layer_forward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
) -> Result<Tensor<T>> {
    Ok(forward_parts(x, c, params, config, false)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (LambdaConfig, LambdaParams<f64>, Tensor<f64>) {
        let config = LambdaConfig::new(4, 4, 2, 2, Geometry::Seq(3));
        let params = init_params(&config, 11).unwrap();
        let mut rng = StreamRng::new(11, Stream::Data, 0);
        let x = rng.normal_tensor(&[2, 3, 4], 1.0);
        (config, params, x)
    }

    #[test]
    fn config_validation() {
        let g = Geometry::Seq(4);
        assert!(LambdaConfig::new(4, 6, 2, 4, g.clone()).validate().is_err());
        assert!(LambdaConfig::new(4, 8, 0, 4, g.clone()).validate().is_err());
        assert!(LambdaConfig::new(4, 8, 2, 4, g.clone()).with_u(0).validate().is_err());
        assert!(LambdaConfig::new(4, 8, 2, 4, g.clone()).with_implementation(Implementation::Conv).with_boundary(Boundary::Circular).validate().is_err());
        assert!(LambdaConfig::new(4, 8, 2, 4, g).with_scope(&[3]).validate().is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let config = LambdaConfig::new(4, 8, 2, 2, Geometry::Grid(2, 3));
        assert_eq!(init_params(&config, 3).unwrap(), init_params(&config, 3).unwrap());
        assert_ne!(init_params(&config, 3).unwrap().w_q, init_params(&config, 4).unwrap().w_q);
    }

    #[test]
    fn zero_queries_give_zero_output() {
        let (config, mut params, x) = small();
        params.w_q = Tensor::zeros(params.w_q.shape());
        let y = lambda_layer_forward(&x, &x, &params, &config).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_hook_matches_hook_off() {
        let (config, params, x) = small();
        let off = lambda_layer_forward(&x, &x, &params, &config).unwrap();
        let on = lambda_layer_forward(&x, &x, &params, &config.clone().with_hook(true)).unwrap();
        assert_eq!(off, on);
    }

    #[test]
    fn normalize_keys_modes() {
        let k = Tensor::<f64>::full(&[1, 4, 2], 0.3);
        let s = normalize_keys(&k, KeyNorm::Softmax).unwrap();
        assert!(s.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(normalize_keys(&k, KeyNorm::None).unwrap(), k);
    }

    #[test]
    fn content_lambda_symmetric_average() {
        let k = Tensor::new(vec![1, 2, 1], vec![0.5, 0.5]).unwrap();
        let v = Tensor::new(vec![1, 2, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(content_lambda(&k, &v).unwrap().data(), &[3.0]);
        let zero = Tensor::zeros(&[1, 2, 1]);
        assert_eq!(content_lambda(&k, &zero).unwrap().data(), &[0.0]);
    }

    #[test]
    fn apply_identity_lambda() {
        let q = Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
        let eye = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = apply_lambdas(&q, Some(&eye), None).unwrap();
        assert_eq!(y.data(), &[0.3, 0.7]);
        let q2 = q.scale(2.0);
        assert_eq!(apply_lambdas(&q2, Some(&eye), None).unwrap(), y.scale(2.0));
    }

    #[test]
    fn shape_errors_propagate() {
        let (config, params, x) = small();
        let bad = Tensor::<f64>::zeros(&[2, 3, 5]);
        assert!(matches!(lambda_layer_forward(&bad, &x, &params, &config), Err(LambdaError::Shape(_))));
        let wrong_n = Tensor::<f64>::zeros(&[2, 4, 4]);
        assert!(lambda_layer_forward(&wrong_n, &wrong_n, &params, &config).is_err());
    }
}
