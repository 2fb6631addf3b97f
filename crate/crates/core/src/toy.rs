//! Toy marker-quadrant task: an `H x W` grid holds one marker and the label
//! is the quadrant it sits in. The model is one lambda layer, mean pooling
//! over positions and a linear classifier, trained with plain SGD on the
//! cross-entropy loss.
//!
//! Content lambdas and mean pooling are both invariant to permuting the
//! positions, so a content-only model produces the same pooled logits
//! wherever the marker is and cannot beat chance.

use serde::Serialize;

use crate::error::{config_err, Result};
use crate::grad::backward;
use crate::layer::{forward_parts, init_params, Interactions, LambdaConfig, LambdaParams};
use crate::relpos::{Boundary, Geometry};
use crate::rng::{Stream, StreamRng};
use crate::tensor::{contract, Tensor};
use crate::variants::Variant;

pub const CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyTaskSpec {
    pub height: usize,
    pub width: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub k: usize,
    pub h: usize,
    pub d_out: usize,
    /// Evaluate every this many steps.
    pub eval_every: usize,
    /// Stop once test accuracy reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            train_size: 256,
            test_size: 256,
            steps: 2000,
            batch: 16,
            learning_rate: 0.15,
            k: 4,
            h: 2,
            d_out: 8,
            eval_every: 50,
            stop_at: None,
        }
    }
}

impl ToyTaskSpec {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn layer_config(&self, mode: Interactions) -> LambdaConfig {
        LambdaConfig::new(2, self.d_out, self.k, self.h, Geometry::Grid(self.height, self.width))
            .with_boundary(Boundary::Clamped)
            .with_interactions(mode)
    }

    pub fn label(&self, marker: usize) -> usize {
        let (r, c) = (marker / self.width, marker % self.width);
        2 * usize::from(2 * r >= self.height) + usize::from(2 * c >= self.width)
    }

    /// Inputs `[len, positions, 2]`: channel 0 marks the marker, channel 1
    /// is constant.
    pub fn inputs(&self, markers: &[usize]) -> Tensor<f64> {
        let n = self.positions();
        Tensor::from_fn(&[markers.len(), n, 2], |i| if i[2] == 1 || markers[i[0]] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return config_err("toy grid must be at least 2x2");
        }
        if self.train_size == 0 || self.test_size == 0 || self.batch == 0 || self.eval_every == 0 {
            return config_err("toy sizes must be >= 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return config_err("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: LambdaConfig,
    pub layer: LambdaParams<f64>,
    /// `[d_out, classes]`
    pub w_c: Tensor<f64>,
    pub b_c: Tensor<f64>,
}

impl ToyModel {
    pub fn init(spec: &ToyTaskSpec, mode: Interactions, seed: u64) -> Result<Self> {
        let config = spec.layer_config(mode);
        let layer = init_params(&config, seed)?;
        let std = (spec.d_out as f64).powf(-0.5);
        let w_c = StreamRng::new(seed, Stream::Params, 2).normal_tensor(&[spec.d_out, CLASSES], std);
        Ok(Self { config, layer, w_c, b_c: Tensor::zeros(&[CLASSES]) })
    }

    /// Mean over positions of the layer output, `[b, d_out]`.
    pub fn pooled(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let y = forward_parts(x, x, &self.layer, &self.config, false)?.output;
        Ok(mean_pool(&y))
    }

    pub fn logits(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let pooled = self.pooled(x)?;
        contract("bd,dc->bc", &[&pooled, &self.w_c])?.add(&self.b_c)
    }
}

fn mean_pool(y: &Tensor<f64>) -> Tensor<f64> {
    let (b, n, d) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    Tensor::from_fn(&[b, d], |i| {
        let mut s = 0.0;
        for p in 0..n {
            s += y.data()[(i[0] * n + p) * d + i[1]];
        }
        s / n as f64
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyReport {
    pub mode: Interactions,
    pub seed: u64,
    pub spec: ToyTaskSpec,
    pub curve: Vec<EvalPoint>,
    pub final_test_accuracy: f64,
    pub steps_run: usize,
    /// Step at which the loss became non-finite; training stops there.
    pub diverged_at: Option<usize>,
}

fn accuracy(model: &ToyModel, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let logits = model.logits(x)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * CLASSES..(i + 1) * CLASSES];
            let best = (0..CLASSES).fold(0, |a, c| if row[c] > row[a] { c } else { a });
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> (f64, Tensor<f64>) {
    let b = labels.len();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[i * CLASSES..(i + 1) * CLASSES];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[y];
        for (c, v) in row.iter_mut().enumerate() {
            *v = ((*v - max).exp() / z - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// One SGD step on a batch; returns the batch loss.
fn sgd_step(model: &mut ToyModel, x: &Tensor<f64>, labels: &[usize], lr: f64) -> Result<f64> {
    let parts = forward_parts(x, x, &model.layer, &model.config, false)?;
    let pooled = mean_pool(&parts.output);
    let logits = contract("bd,dc->bc", &[&pooled, &model.w_c])?.add(&model.b_c)?;
    let (loss, dlogits) = cross_entropy(&logits, labels);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let dw_c = contract("bd,bc->dc", &[&pooled, &dlogits])?;
    let db_c = Tensor::from_fn(&[CLASSES], |i| (0..labels.len()).map(|b| dlogits.get(&[b, i[0]])).sum());
    let dpooled = contract("bc,dc->bd", &[&dlogits, &model.w_c])?;
    let n = x.shape()[1];
    let (b, d) = (x.shape()[0], model.config.d_out);
    let dy = Tensor::from_fn(&[b, n, d], |i| dpooled.get(&[i[0], i[2]]) / n as f64);
    let grads = backward(&Variant::Standard, x, x, &model.layer, &model.config, &dy)?;

    let step = |p: &mut Tensor<f64>, g: &Tensor<f64>| {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    };
    step(&mut model.w_c, &dw_c);
    step(&mut model.b_c, &db_c);
    step(&mut model.layer.w_q, &grads.w_q);
    step(&mut model.layer.w_k, &grads.w_k);
    step(&mut model.layer.w_v, &grads.w_v);
    step(model.layer.r.tensor_mut(), &grads.r);
    Ok(loss)
}

pub fn sample_markers(spec: &ToyTaskSpec, seed: u64, split: u32, count: usize) -> Vec<usize> {
    let mut rng = StreamRng::new(seed, Stream::Data, 100 + split);
    (0..count).map(|_| rng.below(spec.positions())).collect()
}

/// Trains the toy model and reports the accuracy curve.
pub fn train(spec: &ToyTaskSpec, mode: Interactions, seed: u64) -> Result<(ToyModel, ToyReport)> {
    spec.validate()?;
    let mut model = ToyModel::init(spec, mode, seed)?;
    let train_markers = sample_markers(spec, seed, 0, spec.train_size);
    let test_markers = sample_markers(spec, seed, 1, spec.test_size);
    let label = |ms: &[usize]| ms.iter().map(|&m| spec.label(m)).collect::<Vec<_>>();
    let (train_x, train_y) = (spec.inputs(&train_markers), label(&train_markers));
    let (test_x, test_y) = (spec.inputs(&test_markers), label(&test_markers));

    let mut curve = Vec::new();
    let mut cursor = 0;
    let mut steps_run = 0;
    let mut diverged_at = None;
    for step in 1..=spec.steps {
        let idx: Vec<usize> = (0..spec.batch).map(|i| (cursor + i) % spec.train_size).collect();
        cursor = (cursor + spec.batch) % spec.train_size;
        let batch_markers: Vec<usize> = idx.iter().map(|&i| train_markers[i]).collect();
        let loss = sgd_step(&mut model, &spec.inputs(&batch_markers), &label(&batch_markers), spec.learning_rate)?;
        steps_run = step;
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }
        if step % spec.eval_every == 0 || step == spec.steps {
            let point = EvalPoint {
                step,
                loss,
                train_accuracy: accuracy(&model, &train_x, &train_y)?,
                test_accuracy: accuracy(&model, &test_x, &test_y)?,
            };
            let done = spec.stop_at.is_some_and(|t| point.test_accuracy >= t);
            curve.push(point);
            if done {
                break;
            }
        }
    }
    let final_test_accuracy = match (curve.last(), diverged_at) {
        (_, Some(_)) => f64::NAN,
        (Some(p), None) => p.test_accuracy,
        (None, None) => accuracy(&model, &test_x, &test_y)?,
    };
    let report = ToyReport { mode, seed, spec: spec.clone(), curve, final_test_accuracy, steps_run, diverged_at };
    Ok((model, report))
}

/// Pooled logits `[positions, classes]` for the marker at every position.
pub fn logits_by_marker(spec: &ToyTaskSpec, model: &ToyModel) -> Result<Tensor<f64>> {
    let all: Vec<usize> = (0..spec.positions()).collect();
    model.logits(&spec.inputs(&all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_cover_quadrants() {
        let spec = ToyTaskSpec::default();
        assert_eq!(spec.label(0), 0);
        assert_eq!(spec.label(7), 1);
        assert_eq!(spec.label(56), 2);
        assert_eq!(spec.label(63), 3);
        assert_eq!(spec.label(3 * 8 + 4), 1);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let logits = Tensor::new(vec![2, 4], vec![0.1, 0.2, -0.3, 0.5, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[3, 0]);
        assert!(loss > 0.0);
        for r in 0..2 {
            let s: f64 = (0..4).map(|c| g.get(&[r, c])).sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn short_run_is_deterministic() {
        let spec = ToyTaskSpec { steps: 4, eval_every: 2, train_size: 8, test_size: 8, height: 4, width: 4, ..Default::default() };
        let (_, a) = train(&spec, Interactions::Full, 3).unwrap();
        let (_, b) = train(&spec, Interactions::Full, 3).unwrap();
        assert_eq!(a.final_test_accuracy, b.final_test_accuracy);
        assert_eq!(a.curve.len(), 2);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = ToyTaskSpec { steps: 40, eval_every: 10, learning_rate: 1e6, ..Default::default() };
        let (_, rep) = train(&spec, Interactions::Full, 1).unwrap();
        assert!(rep.diverged_at.is_some());
        assert!(rep.final_test_accuracy.is_nan());
    }
}
