//! Relative position embeddings.
//!
//! A [`RelIndexMap`] assigns every (query, context) pair a bucket that depends
//! only on their displacement, which is what makes position interactions
//! translation equivariant. Buckets index rows of a compact
//! [`EmbeddingTable`] `R`; [`expand_embeddings`] materializes the dense
//! `E[n, m, k]` tensor from it.
//!
//! Bucket layout per spatial axis of extent `N`, for offset `o = m - n`:
//!
//! | boundary | scope | buckets | index |
//! |----------|-------|---------|-------|
//! | clamped  | none  | `2N-1`  | `o + N - 1` |
//! | circular | none  | `N`     | `o mod N` |
//! | clamped  | `s`   | `s`     | `o + (s-1)/2`, out of scope if `|o| > (s-1)/2` |
//! | circular | `s`   | `s`     | as above on the wrapped offset in `(-N/2, N/2]` |
//!
//! Multi-axis buckets combine per-axis indices in row-major order, so a 2-d
//! bucket is the pair `(Δrow, Δcol)` with rows outermost.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, LambdaError, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Marker for pairs outside the local scope.
pub const OUT_OF_SCOPE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Seq(usize),
    Grid(usize, usize),
}

impl Geometry {
    pub fn extents(&self) -> Vec<usize> {
        match *self {
            Geometry::Seq(n) => vec![n],
            Geometry::Grid(h, w) => vec![h, w],
        }
    }

    /// Number of positions.
    pub fn len(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_rank(&self) -> usize {
        self.extents().len()
    }

    /// Row-major coordinates of position `p`.
    pub fn coords(&self, p: usize) -> Vec<usize> {
        let ext = self.extents();
        let mut out = vec![0; ext.len()];
        let mut rem = p;
        for ax in (0..ext.len()).rev() {
            out[ax] = rem % ext[ax];
            rem /= ext[ax];
        }
        out
    }

    pub fn position(&self, coords: &[usize]) -> usize {
        coords.iter().zip(self.extents()).fold(0, |acc, (&c, e)| acc * e + c)
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Geometry::Seq(n) => write!(f, "seq:{n}"),
            Geometry::Grid(h, w) => write!(f, "grid:{h}x{w}"),
        }
    }
}

fn parse_dims(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent '{p}': {e}")))
        .collect()
}

impl FromStr for Geometry {
    type Err = String;

    /// Parses `seq:N` or `grid:HxW`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (kind, dims) = s.split_once(':').ok_or_else(|| format!("expected seq:N or grid:HxW, got '{s}'"))?;
        let dims = parse_dims(dims)?;
        let g = match (kind, dims.as_slice()) {
            ("seq", &[n]) => Geometry::Seq(n),
            ("grid", &[h, w]) => Geometry::Grid(h, w),
            _ => return Err(format!("expected seq:N or grid:HxW, got '{s}'")),
        };
        if g.extents().contains(&0) {
            return Err(format!("geometry '{s}' has a zero extent"));
        }
        Ok(g)
    }
}

/// Parses a scope flag: `S` (every axis) or `SxS`.
pub fn parse_scope(s: &str, geometry: &Geometry) -> std::result::Result<Vec<usize>, String> {
    let dims = parse_dims(s)?;
    match (dims.len(), geometry.spatial_rank()) {
        (a, b) if a == b => Ok(dims),
        (1, r) => Ok(vec![dims[0]; r]),
        _ => Err(format!("scope '{s}' does not match geometry {geometry}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Clamped,
    Circular,
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundary::Clamped => "clamped",
            Boundary::Circular => "circular",
        })
    }
}

impl FromStr for Boundary {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "clamped" => Ok(Boundary::Clamped),
            "circular" => Ok(Boundary::Circular),
            other => Err(format!("unknown boundary '{other}' (expected clamped or circular)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelIndexMap {
    geometry: Geometry,
    boundary: Boundary,
    scope: Option<Vec<usize>>,
    axis_buckets: Vec<usize>,
    table: Vec<usize>,
}

/// Bucket count per spatial axis, validating the scope against the
/// geometry without building the table.
pub fn axis_bucket_counts(geometry: &Geometry, boundary: Boundary, scope: Option<&[usize]>) -> Result<Vec<usize>> {
    let ext = geometry.extents();
    if ext.contains(&0) {
        return config_err("geometry has a zero extent");
    }
    if let Some(s) = scope {
        if s.len() != ext.len() {
            return config_err(format!("scope {s:?} has wrong rank for {geometry}"));
        }
        for (&sa, &ea) in s.iter().zip(&ext) {
            if sa % 2 == 0 {
                return config_err(format!("scope extent {sa} must be odd"));
            }
            if boundary == Boundary::Circular && sa > ea {
                return config_err(format!("scope extent {sa} exceeds circular extent {ea}"));
            }
        }
    }
    Ok(match (scope, boundary) {
        (Some(s), _) => s.to_vec(),
        (None, Boundary::Clamped) => ext.iter().map(|&e| 2 * e - 1).collect(),
        (None, Boundary::Circular) => ext,
    })
}

/// Builds the `(n, m) -> bucket` table. The context geometry must equal the
/// input geometry.
pub fn build_rel_index_map(
    geometry: &Geometry,
    context: &Geometry,
    boundary: Boundary,
    scope: Option<&[usize]>,
) -> Result<RelIndexMap> {
    if geometry != context {
        return config_err(format!("context geometry {context} differs from input geometry {geometry}"));
    }
    let axis_buckets = axis_bucket_counts(geometry, boundary, scope)?;
    let ext = geometry.extents();

    let axis_index = |ax: usize, qn: usize, cm: usize| -> Option<usize> {
        let e = ext[ax] as i64;
        let mut off = cm as i64 - qn as i64;
        if boundary == Boundary::Circular {
            off = off.rem_euclid(e);
            if scope.is_none() {
                return Some(off as usize);
            }
            if off > e / 2 {
                off -= e;
            }
        }
        match scope {
            None => Some((off + e - 1) as usize),
            Some(s) => {
                let half = (s[ax] / 2) as i64;
                (off.abs() <= half).then_some((off + half) as usize)
            }
        }
    };

    let n = geometry.len();
    let mut table = Vec::with_capacity(n * n);
    for qn in 0..n {
        let qc = geometry.coords(qn);
        for cm in 0..n {
            let cc = geometry.coords(cm);
            let mut bucket = Some(0usize);
            for ax in 0..ext.len() {
                bucket = match (bucket, axis_index(ax, qc[ax], cc[ax])) {
                    (Some(b), Some(i)) => Some(b * axis_buckets[ax] + i),
                    _ => None,
                };
            }
            table.push(bucket.unwrap_or(OUT_OF_SCOPE));
        }
    }
    Ok(RelIndexMap { geometry: geometry.clone(), boundary, scope: scope.map(<[usize]>::to_vec), axis_buckets, table })
}

impl RelIndexMap {
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn scope(&self) -> Option<&[usize]> {
        self.scope.as_deref()
    }

    /// `|r|`, the number of rows the embedding table needs.
    pub fn num_buckets(&self) -> usize {
        self.axis_buckets.iter().product()
    }

    /// Bucket count per spatial axis.
    pub fn axis_buckets(&self) -> &[usize] {
        &self.axis_buckets
    }

    pub fn n(&self) -> usize {
        self.geometry.len()
    }

    pub fn m(&self) -> usize {
        self.geometry.len()
    }

    /// Raw bucket for `(n, m)`; [`OUT_OF_SCOPE`] outside the scope.
    pub fn raw(&self, n: usize, m: usize) -> usize {
        self.table[n * self.m() + m]
    }

    pub fn bucket(&self, n: usize, m: usize) -> Option<usize> {
        match self.raw(n, m) {
            OUT_OF_SCOPE => None,
            b => Some(b),
        }
    }

    pub fn table(&self) -> &[usize] {
        &self.table
    }

    /// `[n, m]` tensor of bucket indices, `-1` for out-of-scope pairs.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let m = self.m();
        Tensor::from_fn(&[self.n(), m], |i| match self.table[i[0] * m + i[1]] {
            OUT_OF_SCOPE => -1.0,
            b => b as f64,
        })
    }

    /// `[n, m]` 0/1 tensor marking in-scope pairs.
    pub fn scope_mask(&self) -> Tensor<f64> {
        let m = self.m();
        Tensor::from_fn(&[self.n(), m], |i| if self.table[i[0] * m + i[1]] == OUT_OF_SCOPE { 0.0 } else { 1.0 })
    }
}

/// Compact relative embedding table `R`, shaped `[r, k]` or `[r, k, u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T = f64> {
    r: Tensor<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(r: Tensor<T>) -> Result<Self> {
        if !(2..=3).contains(&r.rank()) {
            return Err(LambdaError::Shape(format!("embedding table must be [r,k] or [r,k,u], got {:?}", r.shape())));
        }
        if !r.is_finite() {
            return Err(LambdaError::NonFinite("embedding table has non-finite entries".into()));
        }
        Ok(Self { r })
    }

    /// Unit-normal table with `buckets` rows.
    pub fn random(buckets: usize, k: usize, u: usize, rng: &mut StreamRng) -> Self {
        let shape: Vec<usize> = if u == 1 { vec![buckets, k] } else { vec![buckets, k, u] };
        Self { r: rng.normal_tensor(&shape, 1.0) }
    }

    pub fn zeros(buckets: usize, k: usize, u: usize) -> Self {
        let shape: Vec<usize> = if u == 1 { vec![buckets, k] } else { vec![buckets, k, u] };
        Self { r: Tensor::zeros(&shape) }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.r
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.r
    }

    pub fn buckets(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.r.shape()[1]
    }

    pub fn u(&self) -> usize {
        self.r.shape().get(2).copied().unwrap_or(1)
    }

    /// Floats per bucket (`k * u`).
    pub fn row_len(&self) -> usize {
        self.k() * self.u()
    }
}

/// `E[n, m] = R[bucket(n, m)]`, zero for out-of-scope pairs. The result is
/// `[n, m, k]`, or `[n, m, k, u]` for an intra-depth table.
pub fn expand_embeddings<T: Scalar>(map: &RelIndexMap, table: &EmbeddingTable<T>) -> Result<Tensor<T>> {
    if table.buckets() < map.num_buckets() {
        return Err(LambdaError::Shape(format!(
            "embedding table has {} rows but the index map uses {}",
            table.buckets(),
            map.num_buckets()
        )));
    }
    let (n, m, row) = (map.n(), map.m(), table.row_len());
    let rd = table.tensor().data();
    let mut data = vec![T::zero(); n * m * row];
    for (pair, &b) in map.table().iter().enumerate() {
        if b != OUT_OF_SCOPE {
            data[pair * row..(pair + 1) * row].copy_from_slice(&rd[b * row..(b + 1) * row]);
        }
    }
    let mut shape = vec![n, m];
    shape.extend_from_slice(&table.tensor().shape()[1..]);
    Tensor::new(shape, data)
}

/// `mask[n][m] = 1` iff `m <= n`.
pub fn build_causal_mask(n: usize) -> Result<Tensor<f64>> {
    if n == 0 {
        return config_err("causal mask needs n >= 1");
    }
    Ok(Tensor::from_fn(&[n, n], |i| if i[1] <= i[0] { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_map(n: usize, boundary: Boundary, scope: Option<usize>) -> RelIndexMap {
        let g = Geometry::Seq(n);
        let s = scope.map(|s| vec![s]);
        build_rel_index_map(&g, &g, boundary, s.as_deref()).unwrap()
    }

    #[test]
    fn seq3_clamped_offsets() {
        let map = seq_map(3, Boundary::Clamped, None);
        assert_eq!(map.num_buckets(), 5);
        assert_eq!(map.bucket(0, 1), map.bucket(1, 2));
        for n in 0..3 {
            for m in 0..3 {
                assert_eq!(map.bucket(n, m), Some(m + 2 - n));
            }
        }
    }

    #[test]
    fn seq5_scope3_window() {
        let map = seq_map(5, Boundary::Clamped, Some(3));
        assert_eq!(map.num_buckets(), 3);
        for n in 0..5usize {
            for m in 0..5usize {
                assert_eq!(map.bucket(n, m).is_some(), n.abs_diff(m) <= 1, "({n},{m})");
            }
        }
    }

    #[test]
    fn config_errors() {
        let g = Geometry::Seq(4);
        assert!(matches!(build_rel_index_map(&g, &g, Boundary::Clamped, Some(&[2])), Err(LambdaError::Config(_))));
        assert!(matches!(build_rel_index_map(&g, &g, Boundary::Circular, Some(&[5])), Err(LambdaError::Config(_))));
        assert!(build_rel_index_map(&g, &g, Boundary::Clamped, Some(&[7])).is_ok());
        let other = Geometry::Seq(5);
        assert!(matches!(build_rel_index_map(&g, &other, Boundary::Clamped, None), Err(LambdaError::Config(_))));
    }

    #[test]
    fn expand_seq2_direct_indexing() {
        let map = seq_map(2, Boundary::Clamped, None);
        // rows r_-1, r_0, r_+1
        let r = Tensor::new(vec![3, 2], vec![-1.0, -1.5, 0.0, 0.5, 1.0, 1.5]).unwrap();
        let e = expand_embeddings(&map, &EmbeddingTable::new(r).unwrap()).unwrap();
        assert_eq!(e.data(), &[0.0, 0.5, 1.0, 1.5, -1.0, -1.5, 0.0, 0.5]);
    }

    #[test]
    fn expand_scoped_zeroes_outside_window() {
        let map = seq_map(5, Boundary::Clamped, Some(3));
        let r = Tensor::from_fn(&[3, 2], |i| 1.0 + (i[0] * 2 + i[1]) as f64);
        let e = expand_embeddings(&map, &EmbeddingTable::new(r.clone()).unwrap()).unwrap();
        assert_eq!(e.get(&[0, 3, 0]), 0.0);
        assert_eq!(e.get(&[0, 3, 1]), 0.0);
        // offset +1 sits in bucket 2 of a width-3 window
        assert_eq!(e.get(&[2, 3, 0]), r.get(&[2, 0]));
        assert_eq!(e.get(&[2, 3, 1]), r.get(&[2, 1]));
    }

    #[test]
    fn expand_rejects_short_table() {
        let map = seq_map(4, Boundary::Clamped, None);
        let table = EmbeddingTable::<f64>::zeros(3, 2, 1);
        assert!(expand_embeddings(&map, &table).is_err());
    }

    #[test]
    fn causal_mask_rows() {
        assert_eq!(build_causal_mask(1).unwrap().data(), &[1.0]);
        let m = build_causal_mask(3).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let m = build_causal_mask(6).unwrap();
        for n in 0..6 {
            let s: f64 = (0..6).map(|j| m.get(&[n, j])).sum();
            assert_eq!(s, (n + 1) as f64);
        }
        assert!(build_causal_mask(0).is_err());
    }

    #[test]
    fn parse_flags() {
        assert_eq!("seq:7".parse::<Geometry>().unwrap(), Geometry::Seq(7));
        assert_eq!("grid:4x5".parse::<Geometry>().unwrap(), Geometry::Grid(4, 5));
        assert!("grid:4".parse::<Geometry>().is_err());
        assert!("seq:0".parse::<Geometry>().is_err());
        let g = Geometry::Grid(6, 6);
        assert_eq!(parse_scope("3", &g).unwrap(), vec![3, 3]);
        assert_eq!(parse_scope("3x5", &g).unwrap(), vec![3, 5]);
    }
}
