//! Lambda layer variants: masked contexts, multi-head lambdas, intra-depth
//! lambdas and the content-only (linear attention) mode.

use crate::error::{config_err, shape_err, LambdaError, Result};
use crate::layer::{
    apply_hook, apply_lambdas, check_input, forward_parts, project, Implementation, Interactions, KeyNorm,
    LambdaConfig, LambdaParams,
};
use crate::relpos::{build_causal_mask, expand_embeddings};
use crate::scalar::Scalar;
use crate::tensor::{contract, counter, Tensor};

/// Binary `[n, m]` mask shared across the batch; `mask[n][m] = 1` lets query
/// `n` see context position `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    mask: Tensor<f64>,
}

impl MaskSpec {
    pub fn new(mask: Tensor<f64>) -> Result<Self> {
        if mask.rank() != 2 {
            return shape_err(format!("mask must be [n, m], got {:?}", mask.shape()));
        }
        if mask.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            return config_err("mask entries must be 0 or 1");
        }
        let m = mask.shape()[1];
        for (row, chunk) in mask.data().chunks(m).enumerate() {
            if chunk.iter().all(|&x| x == 0.0) {
                return config_err(format!("mask row {row} is empty; every query needs context"));
            }
        }
        Ok(Self { mask })
    }

    pub fn causal(n: usize) -> Result<Self> {
        Self::new(build_causal_mask(n)?)
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.mask
    }

    pub fn n(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.mask.shape()[1]
    }

    #[inline]
    pub fn allows(&self, n: usize, m: usize) -> bool {
        self.mask.data()[n * self.m() + m] != 0.0
    }
}

/// Layer variant selector shared by the forward and backward dispatchers.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    /// Multi-query layer; position lambdas by the configured implementation.
    Standard,
    Masked(MaskSpec),
    MultiHead,
    IntraDepth,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Masked(_) => "masked",
            Variant::MultiHead => "multihead",
            Variant::IntraDepth => "intra-depth",
        }
    }
}

pub fn forward<T: Scalar>(
    variant: &Variant,
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
) -> Result<Tensor<T>> {
    match variant {
        Variant::Standard => Ok(forward_parts(x, c, params, config, false)?.output),
        Variant::Masked(mask) => masked_lambda_forward(x, c, params, config, mask),
        Variant::MultiHead => multihead_lambda_forward(x, c, params, config),
        Variant::IntraDepth => intra_depth_forward(x, c, params, config),
    }
}

/// Per-query normalized key weights over the visible context of one query.
/// `keys` is one batch element `[m, k]`; the result is `[m, k]` with zeros at
/// masked positions. Softmax and L2 only look at visible positions, in
/// ascending order.
pub(crate) fn masked_key_weights<T: Scalar>(
    keys: &[T],
    m: usize,
    k: usize,
    visible: impl Fn(usize) -> bool,
    mode: KeyNorm,
    out: &mut [T],
) {
    for ki in 0..k {
        let col = |mi: usize| keys[mi * k + ki];
        match mode {
            KeyNorm::Softmax => {
                let max = (0..m).filter(|&mi| visible(mi)).fold(T::neg_infinity(), |a, mi| a.max(col(mi)));
                let mut sum = T::zero();
                for mi in 0..m {
                    let e = if visible(mi) { (col(mi) - max).exp() } else { T::zero() };
                    out[mi * k + ki] = e;
                    sum = sum + e;
                }
                for mi in 0..m {
                    out[mi * k + ki] = out[mi * k + ki] / sum;
                }
            }
            KeyNorm::L2 => {
                let sq = (0..m).filter(|&mi| visible(mi)).fold(T::zero(), |a, mi| a + col(mi) * col(mi));
                let norm = if sq == T::zero() { T::one() } else { sq.sqrt() };
                for mi in 0..m {
                    out[mi * k + ki] = if visible(mi) { col(mi) / norm } else { T::zero() };
                }
            }
            KeyNorm::None => {
                for mi in 0..m {
                    out[mi * k + ki] = if visible(mi) { col(mi) } else { T::zero() };
                }
            }
        }
    }
}

/// Per-query content lambdas `[b, n, k, v]` from raw keys `[b, m, k]`: each
/// query normalizes the keys over its own visible context and aggregates the
/// values with those weights. Works one query at a time with `O(m k)` scratch.
pub fn masked_content_lambdas<T: Scalar>(
    keys: &Tensor<T>,
    values: &Tensor<T>,
    mask: &MaskSpec,
    mode: KeyNorm,
) -> Result<Tensor<T>> {
    let (b, m, k) = (keys.shape()[0], keys.shape()[1], keys.shape()[2]);
    let v = values.shape()[2];
    if mask.m() != m || values.shape()[1] != m {
        return shape_err(format!("mask {:?} does not match context length {m}", mask.tensor().shape()));
    }
    let n = mask.n();
    let (kd, vd) = (keys.data(), values.data());
    let mut weights = vec![T::zero(); m * k];
    let mut out = vec![T::zero(); b * n * k * v];
    for bi in 0..b {
        let kb = &kd[bi * m * k..(bi + 1) * m * k];
        for ni in 0..n {
            masked_key_weights(kb, m, k, |mi| mask.allows(ni, mi), mode, &mut weights);
            let o = &mut out[(bi * n + ni) * k * v..(bi * n + ni + 1) * k * v];
            for mi in 0..m {
                let vrow = &vd[(bi * m + mi) * v..(bi * m + mi + 1) * v];
                for ki in 0..k {
                    let w = weights[mi * k + ki];
                    for (acc, &vv) in o[ki * v..(ki + 1) * v].iter_mut().zip(vrow) {
                        *acc = *acc + w * vv;
                    }
                }
            }
        }
    }
    counter::add((b * n * m * k * v) as u64);
    Tensor::new(vec![b, n, k, v], out)
}

/// Embeddings `[n, m, k]` masked and laid out `[k, n, m]`.
pub(crate) fn masked_embeddings<T: Scalar>(e: &Tensor<T>, mask: &MaskSpec) -> Result<Tensor<T>> {
    let e = e.permute(&[2, 0, 1])?;
    contract("knm,nm->knm", &[&e, &mask.tensor().cast()])
}

/// Masked multi-query lambda layer. Query `n` only interacts with context
/// positions its mask row allows: keys are renormalized over that sub-context
/// (so every query has its own content lambda) and embeddings are masked
/// before the position contraction. No `[b, n, m]` array is materialized.
pub fn masked_lambda_forward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    mask: &MaskSpec,
) -> Result<Tensor<T>> {
    Ok(masked_parts(x, c, params, config, mask)?.output)
}

pub(crate) struct MaskedParts<T> {
    pub q: Tensor<T>,
    pub q_raw: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub v_raw: Tensor<T>,
    pub content: Option<Tensor<T>>,
    pub position: Option<Tensor<T>>,
    /// Masked embeddings `[k, n, m]`.
    pub embeddings: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

pub(crate) fn masked_parts<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
    mask: &MaskSpec,
) -> Result<MaskedParts<T>> {
    config.validate()?;
    params.check(config)?;
    if config.u != 1 {
        return config_err("masked lambdas support u = 1 only");
    }
    if config.implementation != Implementation::Einsum {
        return config_err("masked lambdas mask the dense embeddings; use the einsum implementation");
    }
    let n = config.n();
    check_input("inputs", x, n, config.d_in)?;
    check_input("context", c, n, config.d_in)?;
    if mask.n() != n || mask.m() != n {
        return shape_err(format!("mask {:?} does not match {n} positions", mask.tensor().shape()));
    }
    let proj = project(x, c, params, config, None)?;
    let content = match config.interactions {
        Interactions::PositionOnly => None,
        _ => Some(masked_content_lambdas(&proj.k, &proj.v, mask, config.key_norm)?),
    };
    let (position, embeddings) = match config.interactions {
        Interactions::ContentOnly => (None, None),
        _ => {
            let e = expand_embeddings(&config.rel_index_map()?, &params.r)?;
            let em = masked_embeddings(&e, mask)?;
            (Some(contract("knm,bmv->bnkv", &[&em, &proj.v])?), Some(em))
        }
    };
    let output = apply_lambdas(&proj.q, content.as_ref(), position.as_ref())?;
    Ok(MaskedParts {
        q: proj.q,
        q_raw: proj.q_raw,
        k: proj.k,
        v: proj.v,
        v_raw: proj.v_raw,
        content,
        position,
        embeddings,
        output,
    })
}

pub(crate) struct MultiHeadParts<T> {
    /// `[b, h, n, k]`
    pub q: Tensor<T>,
    pub q_raw: Tensor<T>,
    /// Raw keys `[b, h, m, k]`.
    pub k: Tensor<T>,
    pub k_bar: Tensor<T>,
    /// `[b, h, m, v]`
    pub v: Tensor<T>,
    pub v_raw: Tensor<T>,
    /// `[h, n, m, k]`
    pub embeddings: Option<Tensor<T>>,
    /// `[b, h, k, v]`
    pub content: Option<Tensor<T>>,
    /// `[b, n, h, k, v]`
    pub position: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

pub(crate) fn multihead_parts<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
) -> Result<MultiHeadParts<T>> {
    config.validate()?;
    params.check_multihead(config)?;
    if config.implementation != Implementation::Einsum {
        return config_err("multi-head lambdas have no convolution form; use the einsum implementation");
    }
    let n = config.n();
    check_input("inputs", x, n, config.d_in)?;
    check_input("context", c, n, config.d_in)?;
    let (b, h, k, v) = (x.shape()[0], config.h, config.k, config.v());

    let q_raw = contract("bnd,de->bne", &[x, &params.w_q])?;
    let q = if config.hook { apply_hook(&q_raw, &params.q_scale, &params.q_shift)? } else { q_raw.clone() };
    let q = q.into_reshape(&[b, n, h, k])?.permute(&[0, 2, 1, 3])?;
    let keys = contract("bnd,de->bne", &[c, &params.w_k])?.into_reshape(&[b, n, h, k])?.permute(&[0, 2, 1, 3])?;
    let k_bar = match config.key_norm {
        KeyNorm::Softmax => keys.softmax(2)?,
        KeyNorm::L2 => keys.l2_normalize(2)?,
        KeyNorm::None => keys.clone(),
    };
    let v_raw = contract("bnd,de->bne", &[c, &params.w_v])?;
    let values = if config.hook { apply_hook(&v_raw, &params.v_scale, &params.v_shift)? } else { v_raw.clone() };
    let values = values.into_reshape(&[b, n, h, v])?.permute(&[0, 2, 1, 3])?;

    let content = match config.interactions {
        Interactions::PositionOnly => None,
        _ => Some(contract("bhmk,bhmv->bhkv", &[&k_bar, &values])?),
    };
    let (position, embeddings) = match config.interactions {
        Interactions::ContentOnly => (None, None),
        _ => {
            let e = expand_embeddings(&config.rel_index_map()?, &params.r)?
                .into_reshape(&[n, n, h, k])?
                .permute(&[2, 0, 1, 3])?;
            (Some(contract("hnmk,bhmv->bnhkv", &[&e, &values])?), Some(e))
        }
    };
    let mut output: Option<Tensor<T>> = None;
    if let Some(lc) = &content {
        output = Some(contract("bhnk,bhkv->bnhv", &[&q, lc])?);
    }
    if let Some(lp) = &position {
        let part = contract("bhnk,bnhkv->bnhv", &[&q, lp])?;
        output = Some(match output {
            Some(acc) => acc.add(&part)?,
            None => part,
        });
    }
    let output = output
        .ok_or_else(|| LambdaError::Config("no lambda terms to apply".into()))?
        .into_reshape(&[b, n, h * v])?;
    Ok(MultiHeadParts { q, q_raw, k: keys, k_bar, v: values, v_raw, embeddings, content, position, output })
}

/// Multi-head lambda layer: each head has its own keys, values and
/// embeddings (parameters from [`init_multihead_params`](crate::layer::init_multihead_params)).
/// Generating the lambdas costs `h` times the multi-query layer.
pub fn multihead_lambda_forward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
) -> Result<Tensor<T>> {
    Ok(multihead_parts(x, c, params, config)?.output)
}

/// Lambda layer with intra-depth `u`: keys `[b, m, k, u]`, values
/// `[b, m, v, u]` and embeddings `[n, m, k, u]`; lambdas reduce over context
/// positions and `u`, so applying them costs the same as for `u = 1`.
pub fn intra_depth_forward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
) -> Result<Tensor<T>> {
    Ok(forward_parts(x, c, params, config, true)?.output)
}

/// Content-only lambda layer (position lambdas forced to zero), which is
/// linear attention with softmax-normalized keys:
/// `y_n = (softmax_m(K)ᵀ V)ᵀ q_n`.
pub fn content_only_forward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &LambdaParams<T>,
    config: &LambdaConfig,
) -> Result<Tensor<T>> {
    let config = config.clone().with_interactions(Interactions::ContentOnly);
    Ok(forward_parts(x, c, params, &config, false)?.output)
}

/// Closed-form learnable parameter count `d (h k + k u + v u) + |r| k u`.
pub fn intra_depth_param_count(config: &LambdaConfig) -> Result<usize> {
    let (d, h, k, u, v) = (config.d_in, config.h, config.k, config.u, config.v());
    Ok(d * (h * k + k * u + v * u) + config.num_buckets()? * k * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{init_multihead_params, init_params, lambda_layer_forward};
    use crate::relpos::Geometry;
    use crate::rng::{Stream, StreamRng};

    fn input(b: usize, n: usize, d: usize, seed: u64) -> Tensor<f64> {
        StreamRng::new(seed, Stream::Data, 0).normal_tensor(&[b, n, d], 1.0)
    }

    #[test]
    fn mask_validation() {
        let bad = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(MaskSpec::new(bad), Err(LambdaError::Config(_))));
        let nonbinary = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        assert!(MaskSpec::new(nonbinary).is_err());
        assert!(MaskSpec::causal(4).is_ok());
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let config = LambdaConfig::new(3, 4, 2, 2, Geometry::Seq(4));
        let params = init_params(&config, 1).unwrap();
        let x = input(2, 4, 3, 2);
        let mask = MaskSpec::new(Tensor::full(&[4, 4], 1.0)).unwrap();
        let a = masked_lambda_forward(&x, &x, &params, &config, &mask).unwrap();
        let b = lambda_layer_forward(&x, &x, &params, &config).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn multihead_single_head_matches_multi_query() {
        let config = LambdaConfig::new(3, 2, 2, 1, Geometry::Seq(3));
        let params = init_multihead_params(&config, 4).unwrap();
        let x = input(2, 3, 3, 5);
        let a = multihead_lambda_forward(&x, &x, &params, &config).unwrap();
        let b = lambda_layer_forward(&x, &x, &params, &config).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn intra_depth_u1_is_bitwise_default() {
        let config = LambdaConfig::new(3, 4, 2, 2, Geometry::Grid(2, 2));
        let params = init_params(&config, 8).unwrap();
        let x = input(2, 4, 3, 9);
        assert_eq!(
            intra_depth_forward(&x, &x, &params, &config).unwrap(),
            lambda_layer_forward(&x, &x, &params, &config).unwrap()
        );
    }

    #[test]
    fn content_only_ignores_identical_queries_position() {
        let config = LambdaConfig::new(2, 2, 2, 1, Geometry::Seq(4));
        let params = init_params(&config, 3).unwrap();
        let x = input(1, 4, 2, 4);
        // identical rows of X give identical queries
        let same = Tensor::from_fn(&[1, 4, 2], |i| x.get(&[0, 0, i[2]]));
        let y = content_only_forward(&same, &x, &params, &config).unwrap();
        for n in 1..4 {
            for ch in 0..2 {
                assert_eq!(y.get(&[0, n, ch]), y.get(&[0, 0, ch]));
            }
        }
    }

    #[test]
    fn param_count_closed_form() {
        let config = LambdaConfig::new(5, 6, 3, 2, Geometry::Seq(4)).with_u(3);
        let params = init_params(&config, 1).unwrap();
        assert_eq!(params.param_count(), intra_depth_param_count(&config).unwrap());
    }
}
