//! Monte Carlo checks of the initialization variances, pooling draws over
//! seeds until every tensor has at least 1e5 samples.

use lambdakit::layer::init_params;
use lambdakit::{Geometry, LambdaConfig};

const DRAWS: usize = 100_000;

fn variance(d: &[f64]) -> f64 {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64
}

#[test]
fn fan_in_variances() {
    let (d, k) = (32usize, 16usize);
    let mut config = LambdaConfig::new(d, 32, k, 4, Geometry::Seq(50));
    config.u = 2;
    let (mut q, mut kk, mut v, mut r) = (vec![], vec![], vec![], vec![]);
    let mut seed = 0u64;
    while [q.len(), kk.len(), v.len(), r.len()].iter().any(|&n| n < DRAWS) {
        let p = init_params(&config, seed).unwrap();
        q.extend_from_slice(p.w_q.data());
        kk.extend_from_slice(p.w_k.data());
        v.extend_from_slice(p.w_v.data());
        r.extend_from_slice(p.r.tensor().data());
        seed += 1;
    }
    for (name, draws, want) in [
        ("w_q", &q, 1.0 / (k * d) as f64),
        ("w_k", &kk, 1.0 / d as f64),
        ("w_v", &v, 1.0 / d as f64),
        ("r", &r, 1.0),
    ] {
        let got = variance(draws);
        assert!((got / want - 1.0).abs() < 0.05, "{name}: variance {got} vs {want} over {} draws", draws.len());
    }
}
