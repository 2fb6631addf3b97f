use anyhow::Result;
use lambdakit::bench::{self, BenchCase, BenchPoint, BenchSettings};
use lambdakit::complexity::{self, DimSet, MemoryRowSpec, MemoryReport, OpKind, StageSpec, GIB};
use lambdakit::grad::{finite_diff_check, Functional, GradCheckReport};
use lambdakit::layer::{init_multihead_params, init_params, Interactions, LambdaConfig};
use lambdakit::relpos::{parse_scope, Geometry};
use lambdakit::rng::{Stream, StreamRng};
use lambdakit::suites::{run_suite, Suite, SuiteOptions, SuiteReport};
use lambdakit::tensor::io;
use lambdakit::toy::{self, ToyReport, ToyTaskSpec};
use lambdakit::variants::{MaskSpec, Variant};
use lambdakit::{Dtype, LambdaError};
use serde::Serialize;

use crate::output::{emit, Report};
use crate::{BenchArgs, Command, Common, FunctionalKind, GradcheckArgs, LayerArgs, MemmodelArgs, TrainToyArgs, VariantKind, VerifyArgs};

/// Invalid flag values or combinations; exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub fn error_status(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<LambdaError>() {
        Some(LambdaError::NonFinite(_)) | None => 1,
        Some(_) => 2,
    }
}

pub fn run(cmd: &Command) -> Result<u8> {
    match cmd {
        Command::Verify(a) => verify(cmd, a),
        Command::Bench(a) => bench(cmd, a),
        Command::Gradcheck(a) => gradcheck(cmd, a),
        Command::Memmodel(a) => memmodel(cmd, a),
        Command::TrainToy(a) => train_toy(cmd, a),
    }
}

fn reference_only(common: &Common, what: &str) -> Result<()> {
    match common.precision {
        Some(Dtype::F32) => usage(format!("{what} runs in reference precision (f64) only")),
        _ => Ok(()),
    }
}

fn status(passed: bool) -> u8 {
    if passed {
        0
    } else {
        1
    }
}

#[derive(Serialize)]
struct VerifyRow<'a> {
    suite: Suite,
    property: &'a str,
    cases: usize,
    worst_error: f64,
    tolerance: f64,
    passed: bool,
    worst_case: &'a str,
}

fn verify(cmd: &Command, a: &VerifyArgs) -> Result<u8> {
    reference_only(&a.common, "verify")?;
    if a.cases == 0 {
        return usage("--cases must be at least 1");
    }
    let mut suites = Vec::new();
    for name in &a.suite {
        if name == "all" {
            suites.extend(Suite::ALL);
        } else {
            match name.parse::<Suite>() {
                Ok(s) => suites.push(s),
                Err(e) => return usage(e),
            }
        }
    }
    suites.dedup();
    let opts = SuiteOptions { seed: a.common.seed, implementation: a.implementation, cases: a.cases, mutate: a.mutate };
    let reports: Vec<SuiteReport> = suites.iter().map(|&s| run_suite(s, &opts)).collect::<Result<_, _>>()?;
    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        for p in r.properties.iter().filter(|p| !p.passed) {
            eprintln!(
                "FAIL {}/{}: worst error {:e} exceeds tolerance {:e} ({})",
                r.suite, p.name, p.worst_error, p.tolerance, p.worst_case
            );
        }
    }
    let rows: Vec<VerifyRow> = reports
        .iter()
        .flat_map(|r| {
            r.properties.iter().map(|p| VerifyRow {
                suite: r.suite,
                property: &p.name,
                cases: p.cases,
                worst_error: p.worst_error,
                tolerance: p.tolerance,
                passed: p.passed,
                worst_case: &p.worst_case,
            })
        })
        .collect();
    let report = Report { schema: crate::output::SCHEMA, run: cmd, passed, nondeterministic_fields: &[], result: &reports };
    emit(&a.common, &report, &rows)?;
    Ok(status(passed))
}

struct Defaults {
    geom: Geometry,
    k: usize,
    h: usize,
    v: usize,
    b: usize,
    d_in: usize,
}

/// Resolves layer flags into a variant, a validated configuration and the batch size.
fn build_case(layer: &LayerArgs, d: Defaults) -> Result<(Variant, LambdaConfig, usize)> {
    let geometry = layer.geom.clone().unwrap_or(d.geom);
    let (k, h, v) = (layer.k.unwrap_or(d.k), layer.h.unwrap_or(d.h), layer.v.unwrap_or(d.v));
    let u = layer.u.unwrap_or(if layer.variant == VariantKind::IntraDepth { 2 } else { 1 });
    for (name, val) in [("k", k), ("h", h), ("v", v), ("u", u), ("b", layer.b.unwrap_or(d.b)), ("d-in", layer.d_in.unwrap_or(d.d_in))] {
        if val == 0 {
            return usage(format!("--{name} must be at least 1"));
        }
    }
    let mut config = LambdaConfig::new(layer.d_in.unwrap_or(d.d_in), h * v, k, h, geometry.clone())
        .with_boundary(layer.boundary)
        .with_u(u)
        .with_key_norm(layer.key_norm)
        .with_intra_norm(layer.intra_norm)
        .with_hook(layer.hook)
        .with_implementation(layer.implementation);
    if let Some(s) = &layer.scope {
        match parse_scope(s, &geometry) {
            Ok(scope) => config.scope = Some(scope),
            Err(e) => return usage(e),
        }
    }
    if layer.mask.is_some() && layer.variant != VariantKind::Masked {
        return usage("--mask needs --variant masked");
    }
    let variant = match layer.variant {
        VariantKind::Masked => Variant::Masked(match layer.mask.as_deref() {
            None | Some("causal") => MaskSpec::causal(geometry.len())?,
            Some(path) => MaskSpec::new(io::load(path)?.to_f64())?,
        }),
        VariantKind::Multihead => Variant::MultiHead,
        VariantKind::IntraDepth => Variant::IntraDepth,
        other => {
            config.interactions = match other {
                VariantKind::ContentOnly => Interactions::ContentOnly,
                VariantKind::PositionOnly => Interactions::PositionOnly,
                _ => Interactions::Full,
            };
            if u > 1 {
                Variant::IntraDepth
            } else {
                Variant::Standard
            }
        }
    };
    if let Variant::Masked(m) = &variant {
        if m.n() != geometry.len() {
            return usage(format!("mask is {}x{} but the geometry has {} positions", m.n(), m.m(), geometry.len()));
        }
    }
    config.validate()?;
    Ok((variant, config, layer.b.unwrap_or(d.b)))
}

#[derive(Serialize)]
struct BenchRow<'a> {
    variant: &'a str,
    implementation: String,
    geometry: String,
    scope: String,
    b: usize,
    k: usize,
    h: usize,
    v: usize,
    u: usize,
    n: usize,
    multiplies: u64,
    median_ns: f64,
    p10_ns: f64,
    p90_ns: f64,
    ns_per_multiply: f64,
}

impl<'a> From<&'a BenchPoint> for BenchRow<'a> {
    fn from(p: &'a BenchPoint) -> Self {
        let c = &p.case.config;
        BenchRow {
            variant: &p.case.variant,
            implementation: c.implementation.to_string(),
            geometry: c.geometry.to_string(),
            scope: c.scope.as_ref().map(|s| s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")).unwrap_or_default(),
            b: p.case.b,
            k: c.k,
            h: c.h,
            v: c.v(),
            u: c.u,
            n: p.n,
            multiplies: p.multiplies,
            median_ns: p.median_ns,
            p10_ns: p.p10_ns,
            p90_ns: p.p90_ns,
            ns_per_multiply: p.ns_per_multiply,
        }
    }
}

const TIMING_FIELDS: [&str; 4] = ["median_ns", "p10_ns", "p90_ns", "ns_per_multiply"];
const SWEEP_FIELDS: [&str; 8] =
    ["median_ns", "p10_ns", "p90_ns", "ns_per_multiply", "conv_fit", "global_fit", "conv_linear", "global_quadratic"];

fn bench(cmd: &Command, a: &BenchArgs) -> Result<u8> {
    let settings = BenchSettings { warmup: a.warmup, iterations: a.iters, precision: a.common.precision.unwrap_or(Dtype::F32) };
    if let Err(e) = settings.validate() {
        return usage(e.to_string());
    }
    if a.sweep {
        let r = bench::scaling_sweep(&settings, a.common.seed)?;
        let passed = r.passed();
        if !passed {
            eprintln!(
                "FAIL scaling: conv R^2 {:.4} (needs > {}), global log-log slope {:.3} (needs {}..{})",
                r.conv_fit.r_squared,
                bench::LINEAR_R2_MIN,
                r.global_fit.slope,
                bench::QUADRATIC_SLOPE.0,
                bench::QUADRATIC_SLOPE.1
            );
        }
        let rows: Vec<BenchRow> = r.conv.iter().chain(&r.global).map(BenchRow::from).collect();
        let report = Report { schema: crate::output::SCHEMA, run: cmd, passed, nondeterministic_fields: &SWEEP_FIELDS, result: &r };
        emit(&a.common, &report, &rows)?;
        return Ok(status(passed));
    }
    let defaults = Defaults { geom: Geometry::Seq(256), k: 16, h: 4, v: 4, b: 1, d_in: 4 };
    let (variant, config, b) = build_case(&a.layer, defaults)?;
    let name = match &variant {
        Variant::Masked(_) if a.layer.mask.as_deref().is_some_and(|m| m != "causal") => {
            return usage("bench supports the causal mask only");
        }
        v => v.name(),
    };
    let point = bench::run_case(&BenchCase::new(name, b, config), &settings, a.common.seed)?;
    let rows = [BenchRow::from(&point)];
    let report = Report { schema: crate::output::SCHEMA, run: cmd, passed: true, nondeterministic_fields: &TIMING_FIELDS, result: &point };
    emit(&a.common, &report, &rows)?;
    Ok(0)
}

#[derive(Serialize)]
struct GradResult<'a> {
    variant: &'a str,
    config: &'a LambdaConfig,
    b: usize,
    tolerance: f64,
    #[serde(flatten)]
    check: &'a GradCheckReport,
}

#[derive(Serialize)]
struct GradRow<'a> {
    name: &'a str,
    checked: usize,
    max_rel_err: f64,
    worst_index: String,
    analytic: f64,
    numeric: f64,
}

fn gradcheck(cmd: &Command, a: &GradcheckArgs) -> Result<u8> {
    reference_only(&a.common, "gradcheck")?;
    if [a.step, a.tolerance].iter().any(|x| x.is_nan() || *x <= 0.0) {
        return usage("--step and --tolerance must be positive");
    }
    let defaults = Defaults { geom: Geometry::Seq(4), k: 2, h: 2, v: 2, b: 1, d_in: 4 };
    let (variant, config, b) = build_case(&a.layer, defaults)?;
    let seed = a.common.seed;
    let params = match variant {
        Variant::MultiHead => init_multihead_params(&config, seed)?,
        _ => init_params(&config, seed)?,
    };
    let mut rng = StreamRng::new(seed, Stream::Data, 0);
    let x = rng.normal_tensor(&[b, config.n(), config.d_in], 1.0);
    let c = rng.normal_tensor(&[b, config.n(), config.d_in], 1.0);
    let functional = match a.functional {
        FunctionalKind::Sum => Functional::Sum,
        FunctionalKind::Random => Functional::Random(seed),
    };
    let check = finite_diff_check(&variant, &x, &c, &params, &config, functional, a.step)?;
    let passed = check.passed(a.tolerance);
    if !passed {
        eprintln!("FAIL gradcheck: max relative error {:e} exceeds {:e}", check.max_rel_err, a.tolerance);
    }
    let rows: Vec<GradRow> = check
        .entries
        .iter()
        .map(|e| GradRow {
            name: &e.name,
            checked: e.checked,
            max_rel_err: e.max_rel_err,
            worst_index: e.worst_index.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"),
            analytic: e.analytic,
            numeric: e.numeric,
        })
        .collect();
    let result = GradResult { variant: variant.name(), config: &config, b, tolerance: a.tolerance, check: &check };
    let report = Report { schema: crate::output::SCHEMA, run: cmd, passed, nondeterministic_fields: &[], result };
    emit(&a.common, &report, &rows)?;
    Ok(status(passed))
}

#[derive(Serialize)]
struct MemmodelResult<'a> {
    #[serde(flatten)]
    report: &'a MemoryReport,
    /// One layer of global attention over a 64x64 grid at the same b and h.
    attention_64x64_one_layer_gib: f64,
}

#[derive(Serialize)]
struct MemRow<'a> {
    label: &'a str,
    op: OpKind,
    k: usize,
    bytes: u64,
    gib: f64,
    gb: f64,
}

fn memmodel(cmd: &Command, a: &MemmodelArgs) -> Result<u8> {
    let stages: StageSpec = match a.stages.parse() {
        Ok(s) => s,
        Err(e) => return usage(format!("{e}")),
    };
    if a.b == 0 || a.k == 0 || a.h == 0 {
        return usage("--b, --k and --h must be at least 1");
    }
    let bytes = a.common.precision.unwrap_or(Dtype::F32).size_of();
    let mut rows = complexity::default_memory_rows(a.k);
    rows.extend(a.op.iter().map(|&op| MemoryRowSpec { label: format!("{op} (k={})", a.k), op, k: a.k }));
    let report = complexity::memory_report(&stages, a.b, a.h, bytes, &rows)?;
    let single = DimSet::new(a.b, 64 * 64, 64 * 64, a.k, 1, a.h).with_bytes(bytes);
    let attention = complexity::space_cost(OpKind::Attention, &single, false)? as f64 / GIB;
    let csv_rows: Vec<MemRow> = report
        .rows
        .iter()
        .map(|r| MemRow { label: &r.label, op: r.op, k: r.k, bytes: r.bytes, gib: r.gib, gb: r.gb })
        .collect();
    let result = MemmodelResult { report: &report, attention_64x64_one_layer_gib: attention };
    let out = Report { schema: crate::output::SCHEMA, run: cmd, passed: true, nondeterministic_fields: &[], result };
    emit(&a.common, &out, &csv_rows)?;
    Ok(0)
}

#[derive(Serialize)]
struct Invariance {
    /// Largest pooled-logit difference across marker positions.
    max_spread: f64,
    bitwise_equal: bool,
    argmax_constant: bool,
}

#[derive(Serialize)]
struct ToyResult<'a> {
    #[serde(flatten)]
    report: &'a ToyReport,
    logit_invariance: Invariance,
}

#[derive(Serialize)]
struct ToyRow {
    mode: Interactions,
    step: usize,
    loss: f64,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn train_toy(cmd: &Command, a: &TrainToyArgs) -> Result<u8> {
    reference_only(&a.common, "train-toy")?;
    let mut spec = ToyTaskSpec::default();
    match &a.geom {
        Some(Geometry::Grid(h, w)) => (spec.height, spec.width) = (*h, *w),
        Some(g) => return usage(format!("the toy task needs a grid geometry, got {g}")),
        None => {}
    }
    spec.k = a.k.unwrap_or(spec.k);
    spec.h = a.h.unwrap_or(spec.h);
    spec.steps = a.steps.unwrap_or(spec.steps);
    spec.learning_rate = a.lr.unwrap_or(spec.learning_rate);
    spec.eval_every = a.eval_every.unwrap_or(spec.eval_every);
    spec.stop_at = a.stop_at.or(spec.stop_at);
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    let (model, report) = toy::train(&spec, a.mode, a.common.seed)?;
    let logits = toy::logits_by_marker(&spec, &model)?;
    let classes = toy::CLASSES;
    let first = &logits.data()[..classes];
    let argmax = |row: &[f64]| (0..classes).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
    let rows_iter = || logits.data().chunks(classes);
    let invariance = Invariance {
        max_spread: rows_iter().flat_map(|r| r.iter().zip(first).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max),
        bitwise_equal: rows_iter().all(|r| r.iter().zip(first).all(|(x, y)| x.to_bits() == y.to_bits())),
        argmax_constant: rows_iter().all(|r| argmax(r) == argmax(first)),
    };
    let passed = report.diverged_at.is_none();
    if let Some(step) = report.diverged_at {
        eprintln!("FAIL train-toy: loss became non-finite at step {step}");
    }
    let rows: Vec<ToyRow> = report
        .curve
        .iter()
        .map(|p| ToyRow { mode: a.mode, step: p.step, loss: p.loss, train_accuracy: p.train_accuracy, test_accuracy: p.test_accuracy })
        .collect();
    let result = ToyResult { report: &report, logit_invariance: invariance };
    let out = Report { schema: crate::output::SCHEMA, run: cmd, passed, nondeterministic_fields: &[], result };
    emit(&a.common, &out, &rows)?;
    Ok(status(passed))
}
