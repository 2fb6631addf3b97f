//! CPU microbenchmarks: wall-time percentiles over repeated forward passes,
//! the instrumented multiply count of each case, and the least-squares fits
//! used to check how time scales with sequence length.

use std::time::Instant;

use serde::Serialize;

use crate::error::{config_err, Result};
use crate::layer::{init_multihead_params, init_params, Implementation, LambdaConfig};
use crate::relpos::Geometry;
use crate::rng::{Stream, StreamRng};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{counter, Tensor};
use crate::variants::{self, MaskSpec, Variant};

#[derive(Clone, Debug, Serialize)]
pub struct BenchSettings {
    pub warmup: usize,
    pub iterations: usize,
    pub precision: Dtype,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { warmup: 5, iterations: 30, precision: Dtype::F32 }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 5 || self.iterations < 30 {
            return config_err(format!(
                "benchmarks need at least 5 warmup and 30 timed iterations, got {} and {}",
                self.warmup, self.iterations
            ));
        }
        Ok(())
    }
}

/// One benchmarked configuration.
#[derive(Clone, Debug, Serialize)]
pub struct BenchCase {
    /// standard, masked (causal), multihead or intra-depth.
    pub variant: String,
    pub b: usize,
    pub config: LambdaConfig,
}

impl BenchCase {
    pub fn new(variant: &str, b: usize, config: LambdaConfig) -> Self {
        Self { variant: variant.into(), b, config }
    }

    fn resolve(&self) -> Result<Variant> {
        Ok(match self.variant.as_str() {
            "standard" => Variant::Standard,
            "masked" => Variant::Masked(MaskSpec::causal(self.config.n())?),
            "multihead" => Variant::MultiHead,
            "intra-depth" => Variant::IntraDepth,
            other => return config_err(format!("unknown variant '{other}'")),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchPoint {
    pub case: BenchCase,
    pub n: usize,
    pub multiplies: u64,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
    pub ns_per_multiply: f64,
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

type Runner = Box<dyn FnMut() -> Result<()>>;

/// Builds inputs and parameters for a case; returns its multiply count and
/// a closure running one forward pass.
fn prepare<T: Scalar>(case: &BenchCase, variant: Variant, seed: u64) -> Result<(u64, Runner)> {
    let config = case.config.clone();
    let params = if matches!(variant, Variant::MultiHead) { init_multihead_params(&config, seed)? } else { init_params(&config, seed)? };
    let params = params.cast::<T>();
    let mut rng = StreamRng::new(seed, Stream::Data, 0);
    let x: Tensor<T> = rng.normal_tensor(&[case.b, config.n(), config.d_in], 1.0);
    let (first, multiplies) = counter::measure(|| variants::forward(&variant, &x, &x, &params, &config));
    first?;
    let run = move || -> Result<()> {
        std::hint::black_box(variants::forward(&variant, std::hint::black_box(&x), &x, &params, &config)?);
        Ok(())
    };
    Ok((multiplies, Box::new(run)))
}

fn prepare_case(case: &BenchCase, settings: &BenchSettings, seed: u64) -> Result<(u64, Runner)> {
    case.config.validate()?;
    let variant = case.resolve()?;
    match settings.precision {
        Dtype::F32 => prepare::<f32>(case, variant, seed),
        Dtype::F64 => prepare::<f64>(case, variant, seed),
    }
}

fn summarize(case: &BenchCase, multiplies: u64, mut times: Vec<f64>) -> BenchPoint {
    times.sort_by(f64::total_cmp);
    let median = percentile(&times, 0.5);
    BenchPoint {
        case: case.clone(),
        n: case.config.n(),
        multiplies,
        median_ns: median,
        p10_ns: percentile(&times, 0.1),
        p90_ns: percentile(&times, 0.9),
        ns_per_multiply: median / multiplies.max(1) as f64,
    }
}

/// Times several cases on the calling thread. Timed iterations visit the
/// cases round-robin so slow drift in machine load spreads over all of them.
pub fn run_cases(cases: &[BenchCase], settings: &BenchSettings, seed: u64) -> Result<Vec<BenchPoint>> {
    settings.validate()?;
    let mut prepared = cases.iter().map(|c| prepare_case(c, settings, seed)).collect::<Result<Vec<_>>>()?;
    for (_, run) in prepared.iter_mut() {
        for _ in 0..settings.warmup {
            run()?;
        }
    }
    let mut times = vec![Vec::with_capacity(settings.iterations); cases.len()];
    for _ in 0..settings.iterations {
        for ((_, run), t) in prepared.iter_mut().zip(times.iter_mut()) {
            let start = Instant::now();
            run()?;
            t.push(start.elapsed().as_nanos() as f64);
        }
    }
    Ok(cases.iter().zip(prepared).zip(times).map(|((c, (mults, _)), t)| summarize(c, mults, t)).collect())
}

pub fn run_case(case: &BenchCase, settings: &BenchSettings, seed: u64) -> Result<BenchPoint> {
    Ok(run_cases(std::slice::from_ref(case), settings, seed)?.remove(0))
}

/// Ordinary least squares `y = slope·x + intercept`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Fit {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Fit { slope, intercept: my - slope * mx, r_squared }
}

/// Fit of `ln y` against `ln x`; the slope is the scaling exponent.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Fit {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Sequence lengths for the local-scope sweep.
pub const CONV_SWEEP: [usize; 5] = [64, 128, 256, 512, 1024];
/// Sequence lengths for the global sweep.
pub const GLOBAL_SWEEP: [usize; 4] = [64, 128, 256, 512];
pub const LINEAR_R2_MIN: f64 = 0.98;
pub const QUADRATIC_SLOPE: (f64, f64) = (1.7, 2.3);

/// Layer used by the scaling sweeps: 1-d sequence, k = 16, four heads of
/// width 4, a small input so projections do not mask the lambda terms.
pub fn sweep_config(n: usize, implementation: Implementation) -> LambdaConfig {
    let config = LambdaConfig::new(4, 16, 16, 4, Geometry::Seq(n));
    match implementation {
        Implementation::Einsum => config,
        imp => config.with_scope(&[23]).with_implementation(imp),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub settings: BenchSettings,
    pub conv: Vec<BenchPoint>,
    pub global: Vec<BenchPoint>,
    /// Median time against n for the conv path.
    pub conv_fit: Fit,
    /// ln(median time) against ln n for the global path.
    pub global_fit: Fit,
    pub conv_linear: bool,
    pub global_quadratic: bool,
}

impl ScalingReport {
    pub fn passed(&self) -> bool {
        self.conv_linear && self.global_quadratic
    }
}

pub fn scaling_sweep(settings: &BenchSettings, seed: u64) -> Result<ScalingReport> {
    let run = |ns: &[usize], imp: Implementation| -> Result<Vec<BenchPoint>> {
        let cases: Vec<BenchCase> = ns.iter().map(|&n| BenchCase::new("standard", 1, sweep_config(n, imp))).collect();
        run_cases(&cases, settings, seed)
    };
    let conv = run(&CONV_SWEEP, Implementation::Conv)?;
    let global = run(&GLOBAL_SWEEP, Implementation::Einsum)?;
    let xy = |pts: &[BenchPoint]| -> (Vec<f64>, Vec<f64>) { pts.iter().map(|p| (p.n as f64, p.median_ns)).unzip() };
    let (cx, cy) = xy(&conv);
    let (gx, gy) = xy(&global);
    let conv_fit = linear_fit(&cx, &cy);
    let global_fit = loglog_fit(&gx, &gy);
    Ok(ScalingReport {
        settings: settings.clone(),
        conv_linear: conv_fit.r_squared > LINEAR_R2_MIN,
        global_quadratic: global_fit.slope >= QUADRATIC_SLOPE.0 && global_fit.slope <= QUADRATIC_SLOPE.1,
        conv,
        global,
        conv_fit,
        global_fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_recover_exact_lines() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let f = linear_fit(&xs, &xs.map(|x| 3.0 * x + 1.0));
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let g = loglog_fit(&xs, &xs.map(|x| 5.0 * x * x));
        assert!((g.slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.1), 1.4);
    }

    #[test]
    fn conv_and_depthwise_count_the_same() {
        let s = BenchSettings::default();
        let a = run_case(&BenchCase::new("standard", 1, sweep_config(32, Implementation::Conv)), &s, 1).unwrap();
        let b = run_case(&BenchCase::new("standard", 1, sweep_config(32, Implementation::Depthwise)), &s, 1).unwrap();
        assert_eq!(a.multiplies, b.multiplies);
        assert!(a.p10_ns <= a.median_ns && a.median_ns <= a.p90_ns);
    }

    #[test]
    fn too_few_iterations_rejected() {
        let s = BenchSettings { iterations: 10, ..Default::default() };
        assert!(run_case(&BenchCase::new("standard", 1, sweep_config(8, Implementation::Einsum)), &s, 1).is_err());
    }
}
