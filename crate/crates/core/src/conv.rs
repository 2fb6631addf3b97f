//! Lambda convolution: local position lambdas computed as a convolution of
//! the values with the relative embeddings.
//!
//! For a kernel of extent `s` per axis (odd), with `δ` ranging over
//! `-(s-1)/2 ..= (s-1)/2` per axis,
//!
//! ```text
//! λp[b, n, k, v] = Σ_δ Σ_u R[bucket(δ), k, u] · V[b, n + δ, v, u]
//! ```
//!
//! where out-of-range `n + δ` reads zero (SAME zero padding). Zero padding
//! of the values and zeroed out-of-scope embeddings in the einsum path both
//! zero the same products, so the two paths compute the same lambdas.
//!
//! Two realizations are provided: an (n+1)-d convolution that treats the
//! value depth as an extra spatial axis with kernel extent 1, and an n-d
//! depthwise convolution over the `v` channels with channel multiplier `k`.
//! Both visit taps in row-major order and agree bit-for-bit.

use crate::error::{config_err, shape_err, Result};
use crate::relpos::Geometry;
use crate::scalar::Scalar;
use crate::tensor::{counter, row_major_strides, Tensor};

/// Zero-padded copy of `values [b, n, c]` laid out on the padded grid, with
/// per-tap offsets into the padded spatial layout.
pub(crate) struct Padded<T> {
    pub data: Vec<T>,
    /// Flat padded-spatial offset of each output position.
    pub base: Vec<usize>,
    /// Flat padded-spatial offset of each tap, row-major over the kernel.
    pub taps: Vec<usize>,
    pub padded_len: usize,
    pub channels: usize,
    /// Flat padded-spatial offset of the kernel centre relative to `base`.
    pub centre: usize,
}

pub(crate) fn check_kernel(geometry: &Geometry, kernel: &[usize]) -> Result<()> {
    if kernel.len() != geometry.spatial_rank() {
        return config_err(format!("kernel {kernel:?} does not match geometry {geometry}"));
    }
    if let Some(&s) = kernel.iter().find(|&&s| s % 2 == 0) {
        return config_err(format!("scope extent {s} must be odd"));
    }
    Ok(())
}

pub(crate) fn layout(geometry: &Geometry, kernel: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let ext = geometry.extents();
    let padded: Vec<usize> = ext.iter().zip(kernel).map(|(&e, &s)| e + s - 1).collect();
    let pstride = row_major_strides(&padded);
    let base = (0..geometry.len())
        .map(|p| geometry.coords(p).iter().zip(&pstride).map(|(c, s)| c * s).sum())
        .collect();
    let tap_geom = match kernel {
        [s] => Geometry::Seq(*s),
        [a, b] => Geometry::Grid(*a, *b),
        _ => unreachable!("kernel rank checked by caller"),
    };
    let taps = (0..tap_geom.len())
        .map(|t| tap_geom.coords(t).iter().zip(&pstride).map(|(c, s)| c * s).sum())
        .collect();
    (base, taps, padded.iter().product())
}

pub(crate) fn pad<T: Scalar>(values: &Tensor<T>, geometry: &Geometry, kernel: &[usize]) -> Padded<T> {
    let (b, n) = (values.shape()[0], values.shape()[1]);
    let channels: usize = values.shape()[2..].iter().product();
    let (base, taps, padded_len) = layout(geometry, kernel);
    let half: Vec<usize> = kernel.iter().map(|s| s / 2).collect();
    let centre: usize = {
        let ext = geometry.extents();
        let padded: Vec<usize> = ext.iter().zip(kernel).map(|(&e, &s)| e + s - 1).collect();
        half.iter().zip(row_major_strides(&padded)).map(|(h, s)| h * s).sum()
    };
    let mut data = vec![T::zero(); b * padded_len * channels];
    let src = values.data();
    for bi in 0..b {
        for (p, &bp) in base.iter().enumerate().take(n) {
            let dst = (bi * padded_len + bp + centre) * channels;
            let s = (bi * n + p) * channels;
            data[dst..dst + channels].copy_from_slice(&src[s..s + channels]);
        }
    }
    Padded { data, base, taps, padded_len, channels, centre }
}

/// Splits `values` into `(b, n, v, u)` and the embedding table into `(r, k, u)`.
fn dims<T: Scalar>(r: &Tensor<T>, values: &Tensor<T>, geometry: &Geometry, kernel: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    check_kernel(geometry, kernel)?;
    let taps: usize = kernel.iter().product();
    let (rk, ru) = match r.shape() {
        &[rr, k] if rr == taps => (k, 1),
        &[rr, k, u] if rr == taps => (k, u),
        other => return shape_err(format!("embedding table {other:?} does not have {taps} rows of [k] or [k,u]")),
    };
    let (b, n, v, u) = match values.shape() {
        &[b, n, v] => (b, n, v, 1),
        &[b, n, v, u] => (b, n, v, u),
        other => return shape_err(format!("values must be [b,n,v] or [b,n,v,u], got {other:?}")),
    };
    if n != geometry.len() {
        return shape_err(format!("values cover {n} positions but geometry {geometry} has {}", geometry.len()));
    }
    if u != ru {
        return shape_err(format!("values have u = {u} but embeddings have u = {ru}"));
    }
    Ok((b, n, v, u, rk, taps))
}

/// Position lambdas by an (n+1)-d convolution: the values, reshaped to
/// `[b, *spatial, v, u]`, are convolved with the kernel `R` reshaped to
/// `[*scope, 1, u, k]` (extent 1 along the value axis, `u` input channels,
/// `k` output channels). The `[b, n, v, k]` result is transposed to
/// `[b, n, k, v]`.
pub fn position_lambdas_conv<T: Scalar>(
    r: &Tensor<T>,
    values: &Tensor<T>,
    geometry: &Geometry,
    kernel: &[usize],
) -> Result<Tensor<T>> {
    let (b, n, v, u, k, ntaps) = dims(r, values, geometry, kernel)?;
    let padded = pad(values, geometry, kernel);
    // kernel laid out [tap, u, k]
    let w = if r.rank() == 2 { r.clone() } else { r.permute(&[0, 2, 1])? };
    let w = w.into_data();
    let x = &padded.data;
    let mut out = vec![T::zero(); b * n * v * k];
    for bi in 0..b {
        for p in 0..n {
            let origin = bi * padded.padded_len + padded.base[p];
            for vi in 0..v {
                for ki in 0..k {
                    let mut acc = T::zero();
                    for (t, &toff) in padded.taps.iter().enumerate() {
                        let xrow = (origin + toff) * padded.channels + vi * u;
                        for ui in 0..u {
                            acc = acc + x[xrow + ui] * w[(t * u + ui) * k + ki];
                        }
                    }
                    out[((bi * n + p) * v + vi) * k + ki] = acc;
                }
            }
        }
    }
    counter::add((b * n * v * k * ntaps * u) as u64);
    Tensor::new(vec![b, n, v, k], out)?.permute(&[0, 1, 3, 2])
}

/// Position lambdas by an n-d depthwise convolution with channel multiplier
/// `k`: the embeddings `[r, k]` are tiled to a filter `[r, v, k]`, every
/// value channel `c` produces output channels `c*k .. c*k + k`, and the
/// `[b, n, v*k]` result is reshaped to `[b, n, v, k]` and transposed.
pub fn position_lambdas_depthwise<T: Scalar>(
    r: &Tensor<T>,
    values: &Tensor<T>,
    geometry: &Geometry,
    kernel: &[usize],
) -> Result<Tensor<T>> {
    let (b, n, v, u, k, ntaps) = dims(r, values, geometry, kernel)?;
    if u != 1 {
        return config_err("depthwise lambda convolution supports u = 1 only");
    }
    let filter = tile_filter(r, v);
    let out = depthwise_conv(values, &filter, geometry, kernel, k);
    counter::add((b * n * v * k * ntaps) as u64);
    Tensor::new(vec![b, n, v, k], out)?.permute(&[0, 1, 3, 2])
}

/// Gradients of [`position_lambdas_conv`] with respect to the embedding table
/// and the values, given the upstream gradient `dlp [b, n, k, v]`. The value
/// gradient is the transposed convolution, accumulated on the padded grid
/// and cropped.
pub fn position_lambdas_conv_backward<T: Scalar>(
    r: &Tensor<T>,
    values: &Tensor<T>,
    dlp: &Tensor<T>,
    geometry: &Geometry,
    kernel: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, n, v, u, k, _) = dims(r, values, geometry, kernel)?;
    if dlp.shape() != [b, n, k, v] {
        return shape_err(format!("upstream gradient {:?} is not [{b}, {n}, {k}, {v}]", dlp.shape()));
    }
    let padded = pad(values, geometry, kernel);
    let (x, w, g) = (&padded.data, r.data(), dlp.data());
    let ch = padded.channels;
    let mut dr = vec![T::zero(); r.len()];
    let mut dpad = vec![T::zero(); x.len()];
    for bi in 0..b {
        for p in 0..n {
            let origin = bi * padded.padded_len + padded.base[p];
            for (t, &toff) in padded.taps.iter().enumerate() {
                let row = (origin + toff) * ch;
                for ki in 0..k {
                    for vi in 0..v {
                        let gv = g[((bi * n + p) * k + ki) * v + vi];
                        for ui in 0..u {
                            let wi = (t * k + ki) * u + ui;
                            let xi = row + vi * u + ui;
                            dr[wi] = dr[wi] + gv * x[xi];
                            dpad[xi] = dpad[xi] + gv * w[wi];
                        }
                    }
                }
            }
        }
    }
    let mut dv = vec![T::zero(); values.len()];
    for bi in 0..b {
        for p in 0..n {
            let src = (bi * padded.padded_len + padded.base[p] + padded.centre) * ch;
            dv[(bi * n + p) * ch..(bi * n + p + 1) * ch].copy_from_slice(&dpad[src..src + ch]);
        }
    }
    Ok((Tensor::new(r.shape().to_vec(), dr)?, Tensor::new(values.shape().to_vec(), dv)?))
}

/// Tiles `R [r, k]` across `v` channels into a depthwise filter `[r, v, k]`.
pub(crate) fn tile_filter<T: Scalar>(r: &Tensor<T>, v: usize) -> Tensor<T> {
    let (taps, k) = (r.shape()[0], r.shape()[1]);
    Tensor::from_fn(&[taps, v, k], |i| r.get(&[i[0], i[2]]))
}

/// SAME depthwise convolution of `input [b, n, c]` with `filter [r, c, mult]`,
/// returning the flat `[b, n, c * mult]` buffer.
pub(crate) fn depthwise_conv<T: Scalar>(
    input: &Tensor<T>,
    filter: &Tensor<T>,
    geometry: &Geometry,
    kernel: &[usize],
    mult: usize,
) -> Vec<T> {
    let (b, n, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let padded = pad(input, geometry, kernel);
    let (x, f) = (&padded.data, filter.data());
    let mut out = vec![T::zero(); b * n * c * mult];
    for bi in 0..b {
        for p in 0..n {
            let origin = bi * padded.padded_len + padded.base[p];
            for ci in 0..c {
                for j in 0..mult {
                    let mut acc = T::zero();
                    for (t, &toff) in padded.taps.iter().enumerate() {
                        acc = acc + x[(origin + toff) * c + ci] * f[(t * c + ci) * mult + j];
                    }
                    out[((bi * n + p) * c + ci) * mult + j] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamRng};

    #[test]
    fn single_tap_is_outer_product() {
        let g = Geometry::Seq(4);
        let mut rng = StreamRng::new(5, Stream::Data, 0);
        let r: Tensor<f64> = rng.normal_tensor(&[1, 3], 1.0);
        let v: Tensor<f64> = rng.normal_tensor(&[2, 4, 2], 1.0);
        let lp = position_lambdas_conv(&r, &v, &g, &[1]).unwrap();
        for b in 0..2 {
            for n in 0..4 {
                for k in 0..3 {
                    for vi in 0..2 {
                        assert_eq!(lp.get(&[b, n, k, vi]), r.get(&[0, k]) * v.get(&[b, n, vi]));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_table_gives_zero() {
        let g = Geometry::Grid(3, 3);
        let r = Tensor::<f64>::zeros(&[9, 2]);
        let v = Tensor::<f64>::full(&[1, 9, 2], 1.5);
        let lp = position_lambdas_depthwise(&r, &v, &g, &[3, 3]).unwrap();
        assert!(lp.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn even_scope_rejected() {
        let g = Geometry::Seq(4);
        let r = Tensor::<f64>::zeros(&[2, 1]);
        let v = Tensor::<f64>::zeros(&[1, 4, 1]);
        assert!(position_lambdas_conv(&r, &v, &g, &[2]).is_err());
        assert!(position_lambdas_depthwise(&r, &v, &g, &[2]).is_err());
    }

    #[test]
    fn conv_and_depthwise_bitwise_equal() {
        let g = Geometry::Grid(3, 4);
        let mut rng = StreamRng::new(9, Stream::Data, 1);
        let r: Tensor<f64> = rng.normal_tensor(&[15, 3], 1.0);
        let v: Tensor<f64> = rng.normal_tensor(&[2, 12, 2], 1.0);
        let a = position_lambdas_conv(&r, &v, &g, &[3, 5]).unwrap();
        let b = position_lambdas_depthwise(&r, &v, &g, &[3, 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multiply_count_is_bnrkv() {
        let g = Geometry::Seq(5);
        let r = Tensor::<f64>::zeros(&[3, 2]);
        let v = Tensor::<f64>::zeros(&[2, 5, 4]);
        let (_, c) = counter::measure(|| position_lambdas_conv(&r, &v, &g, &[3]).unwrap());
        assert_eq!(c, 2 * 5 * 3 * 2 * 4);
        let (_, c) = counter::measure(|| position_lambdas_depthwise(&r, &v, &g, &[3]).unwrap());
        assert_eq!(c, 2 * 5 * 3 * 2 * 4);
    }
}
