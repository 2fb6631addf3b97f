//! Naive per-query loop implementations used as reference oracles.
//!
//! Nothing here goes through the contraction engine or the relative index
//! tables: every query builds its own lambda
//! `λ_n = Σ_m (k̄_m + e_nm) v_mᵀ` from explicit loops, with relative buckets
//! recomputed from coordinates, and applies it as `y_n = λ_nᵀ q_n` per head.

use crate::error::{shape_err, Result};
use crate::layer::{IntraNorm, KeyNorm, LambdaConfig, LambdaParams};
use crate::relpos::{Boundary, Geometry};
use crate::tensor::Tensor;

fn coords(g: &Geometry, p: usize) -> Vec<usize> {
    match *g {
        Geometry::Seq(_) => vec![p],
        Geometry::Grid(_, w) => vec![p / w, p % w],
    }
}

/// Bucket of the relative offset from query `n` to context `m`, or `None`
/// outside the scope.
pub fn bucket(config: &LambdaConfig, n: usize, m: usize) -> Option<usize> {
    let ext = config.geometry.extents();
    let (cn, cm) = (coords(&config.geometry, n), coords(&config.geometry, m));
    let mut index = 0usize;
    for a in 0..ext.len() {
        let e = ext[a] as i64;
        let off = cm[a] as i64 - cn[a] as i64;
        let scope = config.scope.as_ref().map(|s| s[a] as i64);
        let (i, count) = match (config.boundary, scope) {
            (Boundary::Clamped, None) => (off + e - 1, 2 * e - 1),
            (Boundary::Circular, None) => (off.rem_euclid(e), e),
            (boundary, Some(s)) => {
                let mut o = off;
                if boundary == Boundary::Circular {
                    o = off.rem_euclid(e);
                    if o > e / 2 {
                        o -= e;
                    }
                }
                if o.abs() > s / 2 {
                    return None;
                }
                (o + s / 2, s)
            }
        };
        index = index * count as usize + i as usize;
    }
    Some(index)
}

fn matvec_row(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (d, e) = (w.shape()[0], w.shape()[1]);
    (0..e).map(|j| (0..d).map(|i| x[i] * w.data()[i * e + j]).sum()).collect()
}

fn normalize(xs: &[f64], mode: KeyNorm) -> Vec<f64> {
    match mode {
        KeyNorm::None => xs.to_vec(),
        KeyNorm::Softmax => {
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        }
        KeyNorm::L2 => {
            let n = xs.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n = if n == 0.0 { 1.0 } else { n };
            xs.iter().map(|x| x / n).collect()
        }
    }
}

/// Output `[h·v]` of query `n` of batch element `bi` whose context is the
/// listed positions of `C`. Works for any intra-depth `u`.
pub fn query_output(
    x: &Tensor<f64>,
    c: &Tensor<f64>,
    params: &LambdaParams<f64>,
    config: &LambdaConfig,
    bi: usize,
    n: usize,
    context: &[usize],
) -> Vec<f64> {
    let (d, k, h, u, v) = (config.d_in, config.k, config.h, config.u, config.v());
    let row = |t: &Tensor<f64>, p: usize| t.data()[(bi * t.shape()[1] + p) * d..(bi * t.shape()[1] + p + 1) * d].to_vec();
    let hook = |vals: Vec<f64>, scale: &Tensor<f64>, shift: &Tensor<f64>| -> Vec<f64> {
        if !config.hook {
            return vals;
        }
        vals.iter().enumerate().map(|(i, x)| x * scale.data()[i] + shift.data()[i]).collect()
    };
    let q = hook(matvec_row(&row(x, n), &params.w_q), &params.q_scale, &params.q_shift);
    let keys: Vec<Vec<f64>> = context.iter().map(|&m| matvec_row(&row(c, m), &params.w_k)).collect();
    let vals: Vec<Vec<f64>> =
        context.iter().map(|&m| hook(matvec_row(&row(c, m), &params.w_v), &params.v_scale, &params.v_shift)).collect();
    let cm = context.len();

    // k̄[j][ki*u + ui], normalized over context (and u when joint)
    let mut kbar = vec![vec![0.0; k * u]; cm];
    for ki in 0..k {
        match config.intra_norm {
            IntraNorm::Joint => {
                let col: Vec<f64> = (0..cm).flat_map(|j| (0..u).map(move |ui| (j, ui))).map(|(j, ui)| keys[j][ki * u + ui]).collect();
                let nrm = normalize(&col, config.key_norm);
                for j in 0..cm {
                    for ui in 0..u {
                        kbar[j][ki * u + ui] = nrm[j * u + ui];
                    }
                }
            }
            IntraNorm::PerU => {
                for ui in 0..u {
                    let col: Vec<f64> = (0..cm).map(|j| keys[j][ki * u + ui]).collect();
                    let nrm = normalize(&col, config.key_norm);
                    for j in 0..cm {
                        kbar[j][ki * u + ui] = nrm[j];
                    }
                }
            }
        }
    }
    let use_content = config.interactions != crate::layer::Interactions::PositionOnly;
    let use_position = config.interactions != crate::layer::Interactions::ContentOnly;
    let table = params.r.tensor().data();

    let mut lambda = vec![0.0; k * v];
    for (j, &m) in context.iter().enumerate() {
        let e = bucket(config, n, m);
        for ki in 0..k {
            for vi in 0..v {
                let mut acc = 0.0;
                for ui in 0..u {
                    let mut w = 0.0;
                    if use_content {
                        w += kbar[j][ki * u + ui];
                    }
                    if let (true, Some(bk)) = (use_position, e) {
                        w += table[bk * k * u + ki * u + ui];
                    }
                    acc += w * vals[j][vi * u + ui];
                }
                lambda[ki * v + vi] += acc;
            }
        }
    }
    let mut y = vec![0.0; h * v];
    for hi in 0..h {
        for vi in 0..v {
            y[hi * v + vi] = (0..k).map(|ki| lambda[ki * v + vi] * q[hi * k + ki]).sum();
        }
    }
    y
}

fn check(x: &Tensor<f64>, c: &Tensor<f64>, config: &LambdaConfig) -> Result<(usize, usize)> {
    let n = config.n();
    if x.shape() != [x.shape()[0], n, config.d_in] || c.shape() != x.shape() {
        return shape_err(format!("oracle expects [b, {n}, {}] inputs", config.d_in));
    }
    Ok((x.shape()[0], n))
}

/// Lambda layer output `[b, n, h·v]` with every query seeing the whole
/// context.
pub fn lambda_layer(x: &Tensor<f64>, c: &Tensor<f64>, params: &LambdaParams<f64>, config: &LambdaConfig) -> Result<Tensor<f64>> {
    let (b, n) = check(x, c, config)?;
    let all: Vec<usize> = (0..n).collect();
    collect(b, n, config, |bi, ni| query_output(x, c, params, config, bi, ni, &all))
}

/// Causal lambda layer: query `n` is evaluated as an unmasked layer whose
/// context is truncated to positions `0..=n`.
pub fn prefix_truncated(x: &Tensor<f64>, c: &Tensor<f64>, params: &LambdaParams<f64>, config: &LambdaConfig) -> Result<Tensor<f64>> {
    let (b, n) = check(x, c, config)?;
    collect(b, n, config, |bi, ni| {
        let prefix: Vec<usize> = (0..=ni).collect();
        query_output(x, c, params, config, bi, ni, &prefix)
    })
}

/// Masked lambda layer with an arbitrary `[n, m]` mask.
pub fn masked(x: &Tensor<f64>, c: &Tensor<f64>, params: &LambdaParams<f64>, config: &LambdaConfig, mask: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (b, n) = check(x, c, config)?;
    collect(b, n, config, |bi, ni| {
        let visible: Vec<usize> = (0..n).filter(|&m| mask.get(&[ni, m]) != 0.0).collect();
        query_output(x, c, params, config, bi, ni, &visible)
    })
}

/// Multi-head lambda layer: head `i` uses key columns `i·k..`, value columns
/// `i·v..` and embedding columns `i·k..` of the multi-head parameters.
pub fn multihead(x: &Tensor<f64>, c: &Tensor<f64>, params: &LambdaParams<f64>, config: &LambdaConfig) -> Result<Tensor<f64>> {
    let (b, n) = check(x, c, config)?;
    let (h, v) = (config.h, config.v());
    let mut out = Vec::with_capacity(b * n * h * v);
    for bi in 0..b {
        for ni in 0..n {
            for hi in 0..h {
                let head = head_params(params, config, hi);
                let cfg = head_config(config);
                let y = query_output(x, c, &head, &cfg, bi, ni, &(0..n).collect::<Vec<_>>());
                out.extend(y);
            }
        }
    }
    Tensor::new(vec![b, n, h * v], out)
}

fn head_config(config: &LambdaConfig) -> LambdaConfig {
    let mut cfg = config.clone();
    cfg.h = 1;
    cfg.d_out = config.v();
    cfg
}

fn columns(t: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    t.narrow(t.rank() - 1, start, len).expect("column range within tensor")
}

fn head_params(params: &LambdaParams<f64>, config: &LambdaConfig, hi: usize) -> LambdaParams<f64> {
    let (k, v) = (config.k, config.v());
    let mut p = params.clone();
    p.w_q = columns(&params.w_q, hi * k, k);
    p.w_k = columns(&params.w_k, hi * k, k);
    p.w_v = columns(&params.w_v, hi * v, v);
    p.q_scale = columns(&params.q_scale, hi * k, k);
    p.q_shift = columns(&params.q_shift, hi * k, k);
    p.v_scale = columns(&params.v_scale, hi * v, v);
    p.v_shift = columns(&params.v_shift, hi * v, v);
    p.r = crate::relpos::EmbeddingTable::new(columns(params.r.tensor(), hi * k, k)).expect("finite table");
    p
}

fn collect(b: usize, n: usize, config: &LambdaConfig, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Tensor<f64>> {
    let width = config.d_out;
    let mut out = Vec::with_capacity(b * n * width);
    for bi in 0..b {
        for ni in 0..n {
            out.extend(f(bi, ni));
        }
    }
    Tensor::new(vec![b, n, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{init_multihead_params, init_params, lambda_layer_forward};
    use crate::rng::{Stream, StreamRng};
    use crate::variants::multihead_lambda_forward;

    #[test]
    fn oracle_matches_forward_on_spec_shape() {
        let config = LambdaConfig::new(4, 4, 2, 2, Geometry::Seq(3));
        let params = init_params(&config, 21).unwrap();
        let x = StreamRng::new(21, Stream::Data, 0).normal_tensor(&[2, 3, 4], 1.0);
        let a = lambda_layer(&x, &x, &params, &config).unwrap();
        let b = lambda_layer_forward(&x, &x, &params, &config).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn multihead_oracle_matches() {
        let config = LambdaConfig::new(3, 4, 2, 2, Geometry::Grid(2, 2)).with_hook(true);
        let params = init_multihead_params(&config, 5).unwrap();
        let x = StreamRng::new(5, Stream::Data, 0).normal_tensor(&[2, 4, 3], 1.0);
        let a = multihead(&x, &x, &params, &config).unwrap();
        let b = multihead_lambda_forward(&x, &x, &params, &config).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn buckets_match_index_map() {
        for (geom, boundary, scope) in [
            (Geometry::Seq(5), Boundary::Clamped, None),
            (Geometry::Seq(4), Boundary::Circular, Some(vec![3])),
            (Geometry::Grid(3, 4), Boundary::Circular, None),
            (Geometry::Grid(3, 3), Boundary::Clamped, Some(vec![3, 5])),
        ] {
            let mut config = LambdaConfig::new(1, 1, 1, 1, geom.clone()).with_boundary(boundary);
            config.scope = scope;
            let map = config.rel_index_map().unwrap();
            for n in 0..geom.len() {
                for m in 0..geom.len() {
                    assert_eq!(bucket(&config, n, m), map.bucket(n, m));
                }
            }
        }
    }
}
