//! Attention baselines used for cost comparisons. All take per-head
//! queries `[b, h, n, k]`, keys `[b, h, m, k]` and values `[b, h, m, v]` and
//! return `[b, h, n, v]`.

use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{contract, Tensor};

fn dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if q.rank() != 4 || k.rank() != 4 || v.rank() != 4 {
        return shape_err("attention operands must be rank 4");
    }
    let (b, h, n, kd) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let (m, vd) = (k.shape()[2], v.shape()[3]);
    if k.shape() != [b, h, m, kd] || v.shape()[..3] != [b, h, m] {
        return shape_err(format!("attention shapes disagree: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()));
    }
    Ok((b, h, n, m, kd, vd))
}

/// Softmax attention `softmax_m(q kᵀ) v`; materializes `[b, h, n, m]`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    dims(q, k, v)?;
    let logits = contract("bhnk,bhmk->bhnm", &[q, k])?;
    contract("bhnm,bhmv->bhnv", &[&logits.softmax(3)?, v])
}

/// Attention with relative position logits `q_n · e_nm` from embeddings
/// `[n, m, k]` shared across heads.
pub fn relative_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, n, m, kd, _) = dims(q, k, v)?;
    if e.shape() != [n, m, kd] {
        return shape_err(format!("relative embeddings {:?} are not [{n}, {m}, {kd}]", e.shape()));
    }
    let logits = contract("bhnk,bhmk->bhnm", &[q, k])?.add(&contract("bhnk,nmk->bhnm", &[q, e])?)?;
    contract("bhnm,bhmv->bhnv", &[&logits.softmax(3)?, v])
}

/// Linear attention `(φ(K)ᵀ V)ᵀ q` with `φ` a softmax over context positions.
pub fn linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    dims(q, k, v)?;
    let kv = contract("bhmk,bhmv->bhkv", &[&k.softmax(2)?, v])?;
    contract("bhnk,bhkv->bhnv", &[q, &kv])
}

/// Axial self-attention over an `rows x cols` grid: the sum of attention
/// along each row and along each column.
pub fn axial_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let (b, h, n, m, kd, vd) = dims(q, k, v)?;
    if n != m || n != rows * cols {
        return config_err(format!("axial attention needs self-context on a {rows}x{cols} grid, got n = {n}, m = {m}"));
    }
    // `order` brings the attended axis next to the channels; `inv` undoes it
    let along = |order: [usize; 5], inv: [usize; 5], outer: usize, len: usize| -> Result<Tensor<T>> {
        let fold = |t: &Tensor<T>, c: usize| -> Result<Tensor<T>> {
            t.reshape(&[b, h, rows, cols, c])?.permute(&order)?.into_reshape(&[b * outer, h, len, c])
        };
        let y = attention(&fold(q, kd)?, &fold(k, kd)?, &fold(v, vd)?)?;
        let mut shape = [b, 0, h, len, vd];
        shape[1] = outer;
        y.into_reshape(&shape)?.permute(&inv)?.into_reshape(&[b, h, n, vd])
    };
    let by_row = along([0, 2, 1, 3, 4], [0, 2, 1, 3, 4], rows, cols)?;
    let by_col = along([0, 3, 1, 2, 4], [0, 2, 3, 1, 4], cols, rows)?;
    by_row.add(&by_col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamRng};
    use crate::tensor::counter;

    fn qkv(b: usize, h: usize, n: usize, k: usize, v: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = StreamRng::new(3, Stream::Data, 0);
        (rng.normal_tensor(&[b, h, n, k], 1.0), rng.normal_tensor(&[b, h, n, k], 1.0), rng.normal_tensor(&[b, h, n, v], 1.0))
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let (q, k, _) = qkv(1, 1, 3, 2, 1);
        let ones = Tensor::full(&[1, 1, 3, 1], 1.0);
        let y = attention(&q, &k, &ones).unwrap();
        assert!(y.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn axial_on_single_row_is_full_attention_plus_identity_columns() {
        let (q, k, v) = qkv(2, 2, 4, 2, 3);
        let y = axial_attention(&q, &k, &v, 1, 4).unwrap();
        // each column holds one position, so column attention returns v itself
        let expect = attention(&q, &k, &v).unwrap().add(&v).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn axial_counts_rows_plus_cols() {
        let (q, k, v) = qkv(2, 3, 6, 2, 4);
        let (_, c) = counter::measure(|| axial_attention(&q, &k, &v, 2, 3).unwrap());
        assert_eq!(c, (2 * 3 * 6 * (2 + 3) * (2 + 4)) as u64);
    }

    #[test]
    fn relative_with_zero_embeddings_is_attention() {
        let (q, k, v) = qkv(1, 2, 3, 2, 2);
        let e = Tensor::zeros(&[3, 3, 2]);
        let a = relative_attention(&q, &k, &v, &e).unwrap();
        assert!(a.max_abs_diff(&attention(&q, &k, &v).unwrap()).unwrap() < 1e-15);
    }
}
