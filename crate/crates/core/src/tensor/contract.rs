//! Labeled tensor contraction (einsum semantics).
//!
//! `contract("bmk,bmv->bkv", &[&k, &v])` broadcasts the operands over the
//! union of their labels, multiplies elementwise and sums every label that
//! is absent from the output.
//!
//! Reduction order is fixed: for each output element (visited in row-major
//! order) the summed labels are enumerated as a row-major multi-index, in
//! the order in which the labels first appear in the spec, last label
//! innermost. Each term is accumulated into a zero-initialised accumulator in
//! that order. All three execution paths below (reference odometer,
//! transpose-transpose-gemm, hand-written kernels) follow this order, so
//! they agree bit-for-bit.

use std::collections::HashMap;

use super::{counter, row_major_strides, Tensor};
use crate::error::{LambdaError, Result};
use crate::scalar::Scalar;

/// Parsed contraction spec such as `"nmk,bmv->bnkv"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionSpec {
    pub inputs: Vec<Vec<char>>,
    pub output: Vec<char>,
}

impl ContractionSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, rhs) = compact
            .split_once("->")
            .ok_or_else(|| LambdaError::Spec(format!("'{spec}' has no '->' output section")))?;
        if rhs.contains("->") {
            return Err(LambdaError::Spec(format!("'{spec}' has more than one '->'")));
        }
        let inputs: Vec<Vec<char>> = lhs.split(',').map(|t| t.chars().collect()).collect();
        let output: Vec<char> = rhs.chars().collect();
        for term in inputs.iter().chain(std::iter::once(&output)) {
            for (i, &c) in term.iter().enumerate() {
                if !c.is_ascii_alphabetic() {
                    return Err(LambdaError::Spec(format!("invalid label '{c}' in '{spec}'")));
                }
                if term[..i].contains(&c) {
                    return Err(LambdaError::Spec(format!(
                        "label '{c}' repeated within one term of '{spec}'"
                    )));
                }
            }
        }
        for &c in &output {
            if !inputs.iter().any(|t| t.contains(&c)) {
                return Err(LambdaError::Spec(format!(
                    "output label '{c}' does not appear in any input of '{spec}'"
                )));
            }
        }
        Ok(Self { inputs, output })
    }

    /// Labels absent from the output, in order of first appearance.
    pub fn summed_labels(&self) -> Vec<char> {
        let mut out = Vec::new();
        for term in &self.inputs {
            for &c in term {
                if !self.output.contains(&c) && !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    fn extents<T: Scalar>(&self, operands: &[&Tensor<T>]) -> Result<HashMap<char, usize>> {
        if operands.len() != self.inputs.len() {
            return Err(LambdaError::Spec(format!(
                "spec names {} operands but {} were given",
                self.inputs.len(),
                operands.len()
            )));
        }
        let mut ext = HashMap::new();
        for (i, (term, t)) in self.inputs.iter().zip(operands).enumerate() {
            if term.len() != t.rank() {
                return Err(LambdaError::Shape(format!(
                    "operand {i} has rank {} but its term '{}' names {} axes",
                    t.rank(),
                    term.iter().collect::<String>(),
                    term.len()
                )));
            }
            for (&c, &e) in term.iter().zip(t.shape()) {
                match ext.insert(c, e) {
                    Some(prev) if prev != e => {
                        return Err(LambdaError::Shape(format!(
                            "label '{c}' has extent {prev} and {e} in different operands"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(ext)
    }

    fn text(&self) -> String {
        let ins: Vec<String> = self.inputs.iter().map(|t| t.iter().collect()).collect();
        format!("{}->{}", ins.join(","), self.output.iter().collect::<String>())
    }
}

/// Contracts `operands` according to `spec`, picking the fastest available
/// path. Results are identical to [`contract_reference`].
pub fn contract<T: Scalar>(spec: &str, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let parsed = ContractionSpec::parse(spec)?;
    let ext = parsed.extents(operands)?;
    if let Some(out) = kernels::dispatch(&parsed.text(), operands) {
        return Ok(out);
    }
    if operands.len() == 2 {
        if let Some(out) = binary_gemm(&parsed, &ext, operands[0], operands[1]) {
            return Ok(out);
        }
    }
    Ok(odometer(&parsed, &ext, operands))
}

/// Generic nested-loop contraction over the full label space.
pub fn contract_reference<T: Scalar>(spec: &str, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let parsed = ContractionSpec::parse(spec)?;
    let ext = parsed.extents(operands)?;
    Ok(odometer(&parsed, &ext, operands))
}

fn label_strides(term: &[char], shape: &[usize], labels: &[char]) -> Vec<usize> {
    let st = row_major_strides(shape);
    labels
        .iter()
        .map(|l| term.iter().position(|c| c == l).map_or(0, |p| st[p]))
        .collect()
}

fn odometer<T: Scalar>(
    spec: &ContractionSpec,
    ext: &HashMap<char, usize>,
    operands: &[&Tensor<T>],
) -> Tensor<T> {
    let summed = spec.summed_labels();
    let out_shape: Vec<usize> = spec.output.iter().map(|c| ext[c]).collect();
    let sum_shape: Vec<usize> = summed.iter().map(|c| ext[c]).collect();
    let out_strides: Vec<Vec<usize>> = spec
        .inputs
        .iter()
        .zip(operands)
        .map(|(term, t)| label_strides(term, t.shape(), &spec.output))
        .collect();
    let sum_strides: Vec<Vec<usize>> = spec
        .inputs
        .iter()
        .zip(operands)
        .map(|(term, t)| label_strides(term, t.shape(), &summed))
        .collect();
    let sum_len: usize = sum_shape.iter().product();
    let mults_per_term = operands.len().saturating_sub(1) as u64;
    let mut multiplies = 0u64;
    let mut sidx = vec![0usize; summed.len()];

    let out = Tensor::from_fn(&out_shape, |oidx| {
        let base: Vec<usize> = out_strides
            .iter()
            .map(|s| oidx.iter().zip(s).map(|(i, s)| i * s).sum())
            .collect();
        let mut acc = T::zero();
        sidx.iter_mut().for_each(|x| *x = 0);
        for _ in 0..sum_len {
            let mut term = T::one();
            for (op, (t, st)) in operands.iter().zip(&sum_strides).enumerate() {
                let off = base[op] + sidx.iter().zip(st).map(|(i, s)| i * s).sum::<usize>();
                term = if op == 0 { t.data()[off] } else { term * t.data()[off] };
            }
            multiplies += mults_per_term;
            acc = acc + term;
            for ax in (0..sidx.len()).rev() {
                sidx[ax] += 1;
                if sidx[ax] < sum_shape[ax] {
                    break;
                }
                sidx[ax] = 0;
            }
        }
        acc
    });
    counter::add(multiplies);
    out
}

/// Two-operand contraction by permuting into `[batch, free_a, contracted]`
/// and `[batch, contracted, free_b]`, running a batched GEMM, and permuting
/// the result into output order. Returns `None` when a label is summed out
/// of a single operand, which this path does not handle.
fn binary_gemm<T: Scalar>(
    spec: &ContractionSpec,
    ext: &HashMap<char, usize>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Option<Tensor<T>> {
    let (ta, tb, to) = (&spec.inputs[0], &spec.inputs[1], &spec.output);
    let batch: Vec<char> = to.iter().copied().filter(|c| ta.contains(c) && tb.contains(c)).collect();
    let free_a: Vec<char> = to.iter().copied().filter(|c| ta.contains(c) && !tb.contains(c)).collect();
    let free_b: Vec<char> = to.iter().copied().filter(|c| tb.contains(c) && !ta.contains(c)).collect();
    let contracted: Vec<char> = ta.iter().copied().filter(|c| tb.contains(c) && !to.contains(c)).collect();
    let lone_summed = ta.iter().chain(tb).any(|c| !to.contains(c) && !(ta.contains(c) && tb.contains(c)));
    if lone_summed {
        return None;
    }
    let perm_for = |term: &[char], order: &[&[char]]| -> Vec<usize> {
        order
            .iter()
            .flat_map(|grp| grp.iter())
            .map(|l| term.iter().position(|c| c == l).unwrap())
            .collect()
    };
    let pa = a.permute(&perm_for(ta, &[&batch, &free_a, &contracted])).ok()?;
    let pb = b.permute(&perm_for(tb, &[&batch, &contracted, &free_b])).ok()?;
    let size = |ls: &[char]| ls.iter().map(|c| ext[c]).product::<usize>();
    let (nb, ni, ns, nj) = (size(&batch), size(&free_a), size(&contracted), size(&free_b));

    let mut out = vec![T::zero(); nb * ni * nj];
    let (da, db) = (pa.data(), pb.data());
    for bt in 0..nb {
        for i in 0..ni {
            let row = &mut out[(bt * ni + i) * nj..(bt * ni + i + 1) * nj];
            let arow = &da[(bt * ni + i) * ns..(bt * ni + i + 1) * ns];
            for (s, &av) in arow.iter().enumerate() {
                let brow = &db[(bt * ns + s) * nj..(bt * ns + s + 1) * nj];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    counter::add((nb * ni * ns * nj) as u64);

    let inter_labels: Vec<char> = batch.iter().chain(&free_a).chain(&free_b).copied().collect();
    let inter_shape: Vec<usize> = inter_labels.iter().map(|c| ext[c]).collect();
    let inter = Tensor::new(inter_shape, out).ok()?;
    let back: Vec<usize> = to
        .iter()
        .map(|l| inter_labels.iter().position(|c| c == l).unwrap())
        .collect();
    inter.permute(&back).ok()
}

/// Hand-written loops for the contractions on the forward hot path.
mod kernels {
    use super::*;

    pub(super) fn dispatch<T: Scalar>(spec: &str, ops: &[&Tensor<T>]) -> Option<Tensor<T>> {
        match spec {
            "bmk,bmv->bkv" => Some(content_lambda(ops[0], ops[1])),
            "nmk,bmv->bnkv" => Some(position_lambdas(ops[0], ops[1])),
            "bhnk,bkv->bnhv" => Some(apply_shared(ops[0], ops[1])),
            "bhnk,bnkv->bnhv" => Some(apply_per_query(ops[0], ops[1])),
            "bnd,de->bne" => Some(project(ops[0], ops[1])),
            _ => None,
        }
    }

    fn content_lambda<T: Scalar>(keys: &Tensor<T>, values: &Tensor<T>) -> Tensor<T> {
        let (b, m, k) = (keys.shape()[0], keys.shape()[1], keys.shape()[2]);
        let v = values.shape()[2];
        let (kd, vd) = (keys.data(), values.data());
        let mut out = vec![T::zero(); b * k * v];
        for bi in 0..b {
            let o = &mut out[bi * k * v..(bi + 1) * k * v];
            for mi in 0..m {
                let krow = &kd[(bi * m + mi) * k..(bi * m + mi + 1) * k];
                let vrow = &vd[(bi * m + mi) * v..(bi * m + mi + 1) * v];
                for (ki, &kv) in krow.iter().enumerate() {
                    for (acc, &vv) in o[ki * v..(ki + 1) * v].iter_mut().zip(vrow) {
                        *acc = *acc + kv * vv;
                    }
                }
            }
        }
        counter::add((b * m * k * v) as u64);
        Tensor::new(vec![b, k, v], out).unwrap()
    }

    fn position_lambdas<T: Scalar>(emb: &Tensor<T>, values: &Tensor<T>) -> Tensor<T> {
        let (n, m, k) = (emb.shape()[0], emb.shape()[1], emb.shape()[2]);
        let (b, v) = (values.shape()[0], values.shape()[2]);
        let (ed, vd) = (emb.data(), values.data());
        let mut out = vec![T::zero(); b * n * k * v];
        for bi in 0..b {
            for ni in 0..n {
                let o = &mut out[(bi * n + ni) * k * v..(bi * n + ni + 1) * k * v];
                for mi in 0..m {
                    let erow = &ed[(ni * m + mi) * k..(ni * m + mi + 1) * k];
                    let vrow = &vd[(bi * m + mi) * v..(bi * m + mi + 1) * v];
                    for (ki, &ev) in erow.iter().enumerate() {
                        for (acc, &vv) in o[ki * v..(ki + 1) * v].iter_mut().zip(vrow) {
                            *acc = *acc + ev * vv;
                        }
                    }
                }
            }
        }
        counter::add((b * n * m * k * v) as u64);
        Tensor::new(vec![b, n, k, v], out).unwrap()
    }

    fn apply_shared<T: Scalar>(q: &Tensor<T>, lam: &Tensor<T>) -> Tensor<T> {
        let (b, h, n, k) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let v = lam.shape()[2];
        let (qd, ld) = (q.data(), lam.data());
        let mut out = vec![T::zero(); b * n * h * v];
        for bi in 0..b {
            for hi in 0..h {
                for ni in 0..n {
                    let o = &mut out[((bi * n + ni) * h + hi) * v..((bi * n + ni) * h + hi + 1) * v];
                    let qrow = &qd[((bi * h + hi) * n + ni) * k..((bi * h + hi) * n + ni + 1) * k];
                    for (ki, &qv) in qrow.iter().enumerate() {
                        let lrow = &ld[(bi * k + ki) * v..(bi * k + ki + 1) * v];
                        for (acc, &lv) in o.iter_mut().zip(lrow) {
                            *acc = *acc + qv * lv;
                        }
                    }
                }
            }
        }
        counter::add((b * h * n * k * v) as u64);
        Tensor::new(vec![b, n, h, v], out).unwrap()
    }

    fn apply_per_query<T: Scalar>(q: &Tensor<T>, lam: &Tensor<T>) -> Tensor<T> {
        let (b, h, n, k) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let v = lam.shape()[3];
        let (qd, ld) = (q.data(), lam.data());
        let mut out = vec![T::zero(); b * n * h * v];
        for bi in 0..b {
            for hi in 0..h {
                for ni in 0..n {
                    let o = &mut out[((bi * n + ni) * h + hi) * v..((bi * n + ni) * h + hi + 1) * v];
                    let qrow = &qd[((bi * h + hi) * n + ni) * k..((bi * h + hi) * n + ni + 1) * k];
                    for (ki, &qv) in qrow.iter().enumerate() {
                        let base = ((bi * n + ni) * k + ki) * v;
                        for (acc, &lv) in o.iter_mut().zip(&ld[base..base + v]) {
                            *acc = *acc + qv * lv;
                        }
                    }
                }
            }
        }
        counter::add((b * h * n * k * v) as u64);
        Tensor::new(vec![b, n, h, v], out).unwrap()
    }

    fn project<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let e = w.shape()[1];
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![T::zero(); b * n * e];
        for row in 0..b * n {
            let o = &mut out[row * e..(row + 1) * e];
            for (di, &xv) in xd[row * d..(row + 1) * d].iter().enumerate() {
                for (acc, &wv) in o.iter_mut().zip(&wd[di * e..(di + 1) * e]) {
                    *acc = *acc + xv * wv;
                }
            }
        }
        counter::add((b * n * d * e) as u64);
        Tensor::new(vec![b, n, e], out).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize], salt: f64) -> Tensor<f64> {
        let mut state = salt;
        Tensor::from_fn(shape, |_| {
            state = (state * 1.618_033 + 0.414_213).fract();
            state * 2.0 - 1.0
        })
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(ContractionSpec::parse("ij,jk"), Err(LambdaError::Spec(_))));
        assert!(matches!(ContractionSpec::parse("ij,jk->iz"), Err(LambdaError::Spec(_))));
        assert!(matches!(ContractionSpec::parse("ii->i"), Err(LambdaError::Spec(_))));
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(contract("ij,jk->ik", &[&a, &b]), Err(LambdaError::Shape(_))));
        assert!(matches!(contract("ijk,jk->ik", &[&a, &b]), Err(LambdaError::Shape(_))));
    }

    #[test]
    fn identity_contraction() {
        let eye = Tensor::from_fn(&[2, 2], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let b = seq(&[2, 2], 0.3);
        assert_eq!(contract("ij,jk->ik", &[&eye, &b]).unwrap(), b);
    }

    #[test]
    fn all_paths_agree_bitwise() {
        let cases: &[(&str, &[&[usize]])] = &[
            ("bmk,bmv->bkv", &[&[2, 3, 4], &[2, 3, 5]]),
            ("nmk,bmv->bnkv", &[&[3, 4, 2], &[2, 4, 3]]),
            ("bhnk,bkv->bnhv", &[&[2, 3, 4, 2], &[2, 2, 3]]),
            ("bhnk,bnkv->bnhv", &[&[2, 2, 3, 4], &[2, 3, 4, 2]]),
            ("bnd,de->bne", &[&[2, 3, 4], &[4, 5]]),
            ("bnkv,bmv->nmk", &[&[2, 3, 2, 4], &[2, 5, 4]]),
            ("hnmk,bhmv->bnhkv", &[&[2, 3, 3, 2], &[2, 2, 3, 2]]),
        ];
        for (i, (spec, shapes)) in cases.iter().enumerate() {
            let ops: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(j, s)| seq(s, 0.1 + 0.2 * (i + j) as f64)).collect();
            let refs: Vec<&Tensor<f64>> = ops.iter().collect();
            let fast = contract(spec, &refs).unwrap();
            let slow = contract_reference(spec, &refs).unwrap();
            assert_eq!(fast, slow, "{spec}");
            let parsed = ContractionSpec::parse(spec).unwrap();
            let ext = parsed.extents(&refs).unwrap();
            if let Some(g) = binary_gemm(&parsed, &ext, refs[0], refs[1]) {
                assert_eq!(g, slow, "{spec} gemm path");
            }
        }
    }

    #[test]
    fn lone_summed_label_falls_back() {
        let a = seq(&[2, 3], 0.2);
        let b = seq(&[3, 4], 0.7);
        let out = contract("ij,jk->k", &[&a, &b]).unwrap();
        let slow = contract_reference("ij,jk->k", &[&a, &b]).unwrap();
        assert_eq!(out, slow);
    }

    #[test]
    fn counts_one_multiply_per_term() {
        let a = seq(&[2, 3, 4], 0.2);
        let b = seq(&[2, 3, 5], 0.5);
        let (_, n) = counter::measure(|| contract("bmk,bmv->bkv", &[&a, &b]).unwrap());
        assert_eq!(n, 2 * 3 * 4 * 5);
        let (_, n) = counter::measure(|| contract_reference("bmk,bmv->bkv", &[&a, &b]).unwrap());
        assert_eq!(n, 2 * 3 * 4 * 5);
    }
}
