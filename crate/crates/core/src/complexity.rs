//! Closed-form multiply and memory models for lambda layers and attention
//! baselines, plus the per-stage memory report for a convolutional
//! backbone.
//!
//! Time is counted in scalar multiplies (one per summed product, the unit
//! the kernels' counter uses); [`ComplexityReport::flops`] doubles it.
//! Space is counted in elements times bytes per element.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::baselines;
use crate::conv::position_lambdas_conv;
use crate::error::{config_err, LambdaError, Result};
use crate::layer::{apply_lambdas, content_lambda, position_lambdas_einsum, KeyNorm};
use crate::relpos::Geometry;
use crate::rng::{Stream, StreamRng};
use crate::tensor::{contract, counter, Tensor};
use crate::variants::{masked_content_lambdas, masked_embeddings, MaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Attention,
    RelativeAttention,
    LinearAttention,
    AxialAttention,
    LambdaLayer,
    /// Lambda layer whose embeddings are shared by every layer of equal extent.
    LambdaShared,
    LambdaConv,
    LambdaMasked,
    LambdaMultihead,
    LambdaContentOnly,
    LambdaPositionOnly,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Attention,
        OpKind::RelativeAttention,
        OpKind::LinearAttention,
        OpKind::AxialAttention,
        OpKind::LambdaLayer,
        OpKind::LambdaShared,
        OpKind::LambdaConv,
        OpKind::LambdaMasked,
        OpKind::LambdaMultihead,
        OpKind::LambdaContentOnly,
        OpKind::LambdaPositionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Attention => "attention",
            OpKind::RelativeAttention => "relative-attention",
            OpKind::LinearAttention => "linear-attention",
            OpKind::AxialAttention => "axial-attention",
            OpKind::LambdaLayer => "lambda-layer",
            OpKind::LambdaShared => "lambda-shared",
            OpKind::LambdaConv => "lambda-conv",
            OpKind::LambdaMasked => "lambda-masked",
            OpKind::LambdaMultihead => "lambda-multihead",
            OpKind::LambdaContentOnly => "lambda-content-only",
            OpKind::LambdaPositionOnly => "lambda-position-only",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OpKind::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| format!("unknown op kind '{s}'"))
    }
}

/// Problem dimensions. `d = h·v`; `r` (local scope size) is only needed by
/// the lambda convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DimSet {
    pub b: usize,
    pub n: usize,
    pub m: usize,
    pub r: Option<usize>,
    pub k: usize,
    pub v: usize,
    pub h: usize,
    pub u: usize,
    pub layers: usize,
    pub bytes_per_element: usize,
}

impl DimSet {
    pub fn new(b: usize, n: usize, m: usize, k: usize, v: usize, h: usize) -> Self {
        Self { b, n, m, r: None, k, v, h, u: 1, layers: 1, bytes_per_element: 4 }
    }

    pub fn with_r(mut self, r: usize) -> Self {
        self.r = Some(r);
        self
    }

    pub fn with_u(mut self, u: usize) -> Self {
        self.u = u;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_bytes(mut self, bytes: usize) -> Self {
        self.bytes_per_element = bytes;
        self
    }

    pub fn d(&self) -> usize {
        self.h * self.v
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("b", self.b),
            ("n", self.n),
            ("m", self.m),
            ("k", self.k),
            ("v", self.v),
            ("h", self.h),
            ("u", self.u),
            ("layers", self.layers),
            ("bytes", self.bytes_per_element),
        ];
        match named.iter().find(|(_, x)| *x == 0) {
            Some((name, _)) => config_err(format!("dimension {name} must be >= 1")),
            None => Ok(()),
        }
    }

    fn r(&self) -> Result<usize> {
        match self.r {
            Some(0) => config_err("dimension r must be >= 1"),
            Some(r) => Ok(r),
            None => config_err("lambda convolution needs the scope size r"),
        }
    }

    fn axial_sides(&self) -> Result<(usize, usize)> {
        let side = (self.n as f64).sqrt().round() as usize;
        if side * side != self.n || self.n != self.m {
            return config_err(format!("axial attention needs a square self-context grid, got n = {}, m = {}", self.n, self.m));
        }
        Ok((side, side))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostTerm {
    pub name: &'static str,
    pub value: u64,
}

/// Costs of one op with named breakdown terms; totals are the sums of their
/// terms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub op: OpKind,
    pub dims: DimSet,
    pub multiplies: u64,
    pub bytes: u64,
    pub time_terms: Vec<CostTerm>,
    pub space_terms: Vec<CostTerm>,
}

impl ComplexityReport {
    pub fn flops(&self) -> u64 {
        2 * self.multiplies
    }
}

fn terms(list: &[(&'static str, usize)]) -> Vec<CostTerm> {
    list.iter().filter(|(_, v)| *v > 0).map(|&(name, v)| CostTerm { name, value: v as u64 }).collect()
}

/// Multiply breakdown of one forward pass, excluding the linear projections.
pub fn time_terms(op: OpKind, d: &DimSet) -> Result<Vec<CostTerm>> {
    d.validate()?;
    let (b, n, m, k, v, h, u) = (d.b, d.n, d.m, d.k, d.v, d.h, d.u);
    let apply = b * h * n * k * v;
    Ok(match op {
        OpKind::Attention => terms(&[("logits", b * h * n * m * k), ("weighted_values", b * h * n * m * v)]),
        OpKind::RelativeAttention => terms(&[
            ("content_logits", b * h * n * m * k),
            ("position_logits", b * h * n * m * k),
            ("weighted_values", b * h * n * m * v),
        ]),
        OpKind::LinearAttention => terms(&[("summary", b * h * m * k * v), ("apply", b * h * n * k * v)]),
        OpKind::AxialAttention => {
            let (rows, cols) = d.axial_sides()?;
            let span = rows + cols;
            terms(&[("logits", b * h * n * span * k), ("weighted_values", b * h * n * span * v)])
        }
        OpKind::LambdaLayer | OpKind::LambdaShared => terms(&[
            ("content_lambda", b * m * k * v * u),
            ("position_lambdas", b * n * m * k * v * u),
            ("apply_content", apply),
            ("apply_position", apply),
        ]),
        OpKind::LambdaConv => terms(&[
            ("content_lambda", b * m * k * v * u),
            ("position_lambdas", b * n * d.r()? * k * v * u),
            ("apply_content", apply),
            ("apply_position", apply),
        ]),
        OpKind::LambdaMasked => {
            if u != 1 {
                return config_err("masked lambdas have u = 1");
            }
            terms(&[
                ("content_lambdas", b * n * m * k * v),
                ("mask_embeddings", k * n * m),
                ("position_lambdas", b * n * m * k * v),
                ("apply_content", apply),
                ("apply_position", apply),
            ])
        }
        OpKind::LambdaMultihead => terms(&[
            ("content_lambda", b * h * m * k * v),
            ("position_lambdas", b * h * n * m * k * v),
            ("apply_content", apply),
            ("apply_position", apply),
        ]),
        OpKind::LambdaContentOnly => terms(&[("content_lambda", b * m * k * v * u), ("apply_content", apply)]),
        OpKind::LambdaPositionOnly => terms(&[("position_lambdas", b * n * m * k * v * u), ("apply_position", apply)]),
    })
}

/// Multiplies of the lambda-generation terms only.
pub fn generate_cost(op: OpKind, d: &DimSet) -> Result<u64> {
    Ok(time_terms(op, d)?.iter().filter(|t| !t.name.starts_with("apply")).map(|t| t.value).sum())
}

pub fn time_cost(op: OpKind, d: &DimSet) -> Result<u64> {
    Ok(time_terms(op, d)?.iter().map(|t| t.value).sum())
}

/// Element-count breakdown of the memory an op keeps per forward pass over
/// `layers` layers: attention maps or position embeddings, plus (when
/// `include_activations`) the lambdas themselves.
pub fn space_terms(op: OpKind, d: &DimSet, include_activations: bool) -> Result<Vec<CostTerm>> {
    d.validate()?;
    let (b, n, m, k, v, h, u, l) = (d.b, d.n, d.m, d.k, d.v, d.h, d.u, d.layers);
    let act = |x: usize| if include_activations { x } else { 0 };
    let lambdas = act(b * n * k * v * l);
    Ok(match op {
        OpKind::Attention | OpKind::RelativeAttention => terms(&[("attention_maps", b * h * n * m * l)]),
        OpKind::AxialAttention => {
            let (rows, cols) = d.axial_sides()?;
            terms(&[("attention_maps", b * h * n * (rows + cols) * l)])
        }
        OpKind::LinearAttention => terms(&[("summaries", b * h * k * v * l)]),
        OpKind::LambdaLayer | OpKind::LambdaPositionOnly => {
            terms(&[("embeddings", k * n * m * u * l), ("lambdas", lambdas)])
        }
        OpKind::LambdaShared => terms(&[("embeddings", k * n * m * u), ("lambdas", lambdas)]),
        OpKind::LambdaConv => terms(&[("embeddings", k * d.r()? * u * l), ("lambdas", lambdas)]),
        OpKind::LambdaMasked => terms(&[("embeddings", k * n * m * l), ("lambdas", 2 * lambdas)]),
        OpKind::LambdaMultihead => terms(&[("embeddings", h * k * n * m * l), ("lambdas", h * lambdas)]),
        OpKind::LambdaContentOnly => terms(&[("lambdas", act(b * k * v * l))]),
    })
}

pub fn space_cost(op: OpKind, d: &DimSet, include_activations: bool) -> Result<u64> {
    Ok(space_terms(op, d, include_activations)?.iter().map(|t| t.value).sum::<u64>() * d.bytes_per_element as u64)
}

pub fn report(op: OpKind, d: &DimSet, include_activations: bool) -> Result<ComplexityReport> {
    let time_terms = time_terms(op, d)?;
    let bpe = d.bytes_per_element as u64;
    let space_terms: Vec<CostTerm> = space_terms(op, d, include_activations)?
        .into_iter()
        .map(|t| CostTerm { name: t.name, value: t.value * bpe })
        .collect();
    Ok(ComplexityReport {
        op,
        dims: d.clone(),
        multiplies: time_terms.iter().map(|t| t.value).sum(),
        bytes: space_terms.iter().map(|t| t.value).sum(),
        time_terms,
        space_terms,
    })
}

pub const GIB: f64 = (1u64 << 30) as f64;
pub const GB: f64 = 1e9;

/// Lambda-bearing stages of a backbone: `(layer count, spatial extent)`
/// pairs, each stage operating on an `extent x extent` map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageSpec {
    pub stages: Vec<(usize, usize)>,
}

impl StageSpec {
    pub fn new(stages: Vec<(usize, usize)>) -> Result<Self> {
        if stages.is_empty() {
            return config_err("stage list is empty");
        }
        if let Some(&(l, e)) = stages.iter().find(|&&(l, e)| l == 0 || e == 0) {
            return config_err(format!("stage {l}x{e} needs a layer count and extent >= 1"));
        }
        Ok(Self { stages })
    }

    /// ResNet-50 stage layout: 3, 4, 6 and 3 blocks at 56², 28², 14² and 7².
    pub fn resnet50() -> Self {
        Self { stages: vec![(3, 56), (4, 28), (6, 14), (3, 7)] }
    }
}

impl FromStr for StageSpec {
    type Err = LambdaError;
    fn from_str(s: &str) -> Result<Self> {
        let stages = s
            .split(',')
            .map(|part| {
                let (l, e) = part
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| LambdaError::Config(format!("stage '{part}' is not LAYERSxEXTENT")))?;
                let parse = |t: &str| t.parse::<usize>().map_err(|_| LambdaError::Config(format!("bad stage '{part}'")));
                Ok((parse(l)?, parse(e)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages.iter().map(|(l, e)| format!("{l}x{e}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// One op in a memory report, with its own query depth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryRowSpec {
    pub label: String,
    pub op: OpKind,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub layers: usize,
    pub extent: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryRow {
    pub label: String,
    pub op: OpKind,
    pub k: usize,
    pub bytes: u64,
    pub gib: f64,
    pub gb: f64,
    pub per_stage: Vec<StageCost>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub stages: String,
    pub b: usize,
    pub h: usize,
    pub bytes_per_element: usize,
    pub rows: Vec<MemoryRow>,
}

/// Memory kept by each op across the backbone stages (activations
/// excluded). Shared embeddings are counted once per distinct extent.
pub fn memory_report(stages: &StageSpec, b: usize, h: usize, bytes: usize, rows: &[MemoryRowSpec]) -> Result<MemoryReport> {
    let mut out = Vec::with_capacity(rows.len());
    for spec in rows {
        let mut seen = Vec::new();
        let mut per_stage = Vec::with_capacity(stages.stages.len());
        for &(layers, extent) in &stages.stages {
            let n = extent * extent;
            let dims = DimSet::new(b, n, n, spec.k, 1, h).with_layers(layers).with_bytes(bytes);
            let cost = if spec.op == OpKind::LambdaShared && seen.contains(&extent) {
                0
            } else {
                space_cost(spec.op, &dims, false)?
            };
            seen.push(extent);
            per_stage.push(StageCost { layers, extent, bytes: cost });
        }
        let total: u64 = per_stage.iter().map(|s| s.bytes).sum();
        out.push(MemoryRow {
            label: spec.label.clone(),
            op: spec.op,
            k: spec.k,
            bytes: total,
            gib: total as f64 / GIB,
            gb: total as f64 / GB,
            per_stage,
        });
    }
    Ok(MemoryReport { stages: stages.to_string(), b, h, bytes_per_element: bytes, rows: out })
}

/// Default memory comparison rows for query depth `k`: global and axial
/// attention, the lambda layer at `k` and `k/2`, and shared embeddings.
pub fn default_memory_rows(k: usize) -> Vec<MemoryRowSpec> {
    let half = (k / 2).max(1);
    vec![
        MemoryRowSpec { label: "global self-attention".into(), op: OpKind::Attention, k },
        MemoryRowSpec { label: "axial self-attention".into(), op: OpKind::AxialAttention, k },
        MemoryRowSpec { label: format!("lambda layer (k={k})"), op: OpKind::LambdaLayer, k },
        MemoryRowSpec { label: format!("lambda layer (k={half})"), op: OpKind::LambdaLayer, k: half },
        MemoryRowSpec { label: format!("lambda layer, shared embeddings (k={k})"), op: OpKind::LambdaShared, k },
    ]
}

/// Multiplies counted by running this crate's kernels for `op` on random
/// inputs of the given dimensions (projections excluded, matching
/// [`time_cost`]).
pub fn instrumented_count(op: OpKind, d: &DimSet, seed: u64) -> Result<u64> {
    d.validate()?;
    let (b, n, m, k, v, h, u) = (d.b, d.n, d.m, d.k, d.v, d.h, d.u);
    let mut rng = StreamRng::new(seed, Stream::Suite, 7);
    let mut t = |shape: &[usize]| -> Tensor<f64> { rng.normal_tensor(shape, 1.0) };
    let q = t(&[b, h, n, k]);
    let (count_result, count) = match op {
        OpKind::Attention | OpKind::RelativeAttention | OpKind::LinearAttention | OpKind::AxialAttention => {
            let (kk, vv) = (t(&[b, h, m, k]), t(&[b, h, m, v]));
            let e = t(&[n, m, k]);
            let sides = if op == OpKind::AxialAttention { Some(d.axial_sides()?) } else { None };
            counter::measure(|| match op {
                OpKind::Attention => baselines::attention(&q, &kk, &vv).map(|_| ()),
                OpKind::RelativeAttention => baselines::relative_attention(&q, &kk, &vv, &e).map(|_| ()),
                OpKind::LinearAttention => baselines::linear_attention(&q, &kk, &vv).map(|_| ()),
                _ => {
                    let (rows, cols) = sides.expect("axial sides");
                    baselines::axial_attention(&q, &kk, &vv, rows, cols).map(|_| ())
                }
            })
        }
        OpKind::LambdaLayer | OpKind::LambdaShared | OpKind::LambdaContentOnly | OpKind::LambdaPositionOnly => {
            let (kb, vv, e) = (t(&[b, m, k, u]), t(&[b, m, v, u]), t(&[n, m, k, u]));
            counter::measure(|| -> Result<()> {
                let lc = (op != OpKind::LambdaPositionOnly).then(|| content_lambda(&kb, &vv)).transpose()?;
                let lp = (op != OpKind::LambdaContentOnly).then(|| position_lambdas_einsum(&e, &vv)).transpose()?;
                apply_lambdas(&q, lc.as_ref(), lp.as_ref()).map(|_| ())
            })
        }
        OpKind::LambdaConv => {
            let r = d.r()?;
            if n != m {
                return config_err("lambda convolution uses self-context, n must equal m");
            }
            let (kb, vv) = (t(&[b, m, k, u]), t(&[b, m, v, u]));
            let table = if u == 1 { t(&[r, k]) } else { t(&[r, k, u]) };
            counter::measure(|| -> Result<()> {
                let lc = content_lambda(&kb, &vv)?;
                let lp = position_lambdas_conv(&table, &vv, &Geometry::Seq(n), &[r])?;
                apply_lambdas(&q, Some(&lc), Some(&lp)).map(|_| ())
            })
        }
        OpKind::LambdaMasked => {
            if u != 1 {
                return config_err("masked lambdas have u = 1");
            }
            let (kb, vv, e) = (t(&[b, m, k]), t(&[b, m, v]), t(&[n, m, k]));
            let mask = MaskSpec::new(Tensor::full(&[n, m], 1.0))?;
            counter::measure(|| -> Result<()> {
                let lc = masked_content_lambdas(&kb, &vv, &mask, KeyNorm::Softmax)?;
                let em = masked_embeddings(&e, &mask)?;
                let lp = contract("knm,bmv->bnkv", &[&em, &vv])?;
                apply_lambdas(&q, Some(&lc), Some(&lp)).map(|_| ())
            })
        }
        OpKind::LambdaMultihead => {
            let (kb, vv, e) = (t(&[b, h, m, k]), t(&[b, h, m, v]), t(&[h, n, m, k]));
            counter::measure(|| -> Result<()> {
                let lc = contract("bhmk,bhmv->bhkv", &[&kb, &vv])?;
                let lp = contract("hnmk,bhmv->bnhkv", &[&e, &vv])?;
                contract("bhnk,bhkv->bnhv", &[&q, &lc])?;
                contract("bhnk,bnhkv->bnhv", &[&q, &lp]).map(|_| ())
            })
        }
    };
    count_result?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_term_example() {
        let d = DimSet::new(1, 4, 4, 2, 3, 1);
        let t = time_terms(OpKind::LambdaLayer, &d).unwrap();
        assert_eq!(t.iter().find(|t| t.name == "position_lambdas").unwrap().value, 96);
    }

    #[test]
    fn unit_dims() {
        let d = DimSet::new(1, 1, 1, 1, 1, 1);
        let t = time_terms(OpKind::LambdaLayer, &d).unwrap();
        assert_eq!(t[0].value, 1);
        assert_eq!(t[1].value, 1);
    }

    #[test]
    fn zero_dim_and_missing_scope_rejected() {
        assert!(time_cost(OpKind::LambdaLayer, &DimSet::new(0, 1, 1, 1, 1, 1)).is_err());
        assert!(time_cost(OpKind::LambdaConv, &DimSet::new(1, 1, 1, 1, 1, 1)).is_err());
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("3x56,4x28,6x14,3x7".parse::<StageSpec>().unwrap(), StageSpec::resnet50());
        assert!("0x56".parse::<StageSpec>().is_err());
        assert!("".parse::<StageSpec>().is_err());
        assert!("3x".parse::<StageSpec>().is_err());
    }

    #[test]
    fn footnote_attention_is_64_gib() {
        let d = DimSet::new(128, 64 * 64, 64 * 64, 16, 1, 8);
        assert_eq!(space_cost(OpKind::Attention, &d, false).unwrap(), 64 << 30);
    }

    #[test]
    fn report_totals_are_term_sums() {
        let d = DimSet::new(2, 9, 9, 4, 3, 2).with_r(3).with_u(2);
        for op in OpKind::ALL {
            let d = if op == OpKind::LambdaMasked { d.clone().with_u(1) } else { d.clone() };
            let rep = report(op, &d, true).unwrap();
            assert_eq!(rep.multiplies, rep.time_terms.iter().map(|t| t.value).sum::<u64>());
            assert_eq!(rep.bytes, rep.space_terms.iter().map(|t| t.value).sum::<u64>());
        }
    }

    #[test]
    fn doubling_batch() {
        let rows = default_memory_rows(16);
        let s = StageSpec::resnet50();
        let a = memory_report(&s, 64, 8, 4, &rows).unwrap();
        let b = memory_report(&s, 128, 8, 4, &rows).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            match ra.op {
                OpKind::Attention | OpKind::AxialAttention => assert_eq!(2 * ra.bytes, rb.bytes),
                _ => assert_eq!(ra.bytes, rb.bytes),
            }
        }
    }

    #[test]
    fn counters_match_for_small_dims() {
        let d = DimSet::new(2, 4, 4, 3, 2, 2).with_r(3);
        for op in OpKind::ALL {
            assert_eq!(instrumented_count(op, &d, 1).unwrap(), time_cost(op, &d).unwrap(), "{op}");
        }
    }
}
