//! Contractions against hand-written nested loops, plus algebraic
//! properties of the engine.

use lambdakit::rng::{Stream, StreamRng};
use lambdakit::tensor::{contract, contract_reference, counter};
use lambdakit::{LambdaError, Tensor};
use proptest::prelude::*;

fn rand(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

/// Draws extents in 1..=5 for the labels `a..` in order.
fn extents(rng: &mut StreamRng, count: usize) -> Vec<usize> {
    (0..count).map(|_| 1 + rng.below(5)).collect()
}

fn check(spec: &str, ops: &[&Tensor<f64>], oracle: Tensor<f64>) {
    let got = contract(spec, ops).unwrap();
    assert_eq!(got.shape(), oracle.shape(), "{spec}");
    let err = got.max_abs_diff(&oracle).unwrap();
    assert!(err < 1e-12, "{spec}: {err}");
}

#[test]
fn downstream_specs_match_loop_oracles() {
    let mut rng = StreamRng::new(2024, Stream::Suite, 99);
    for _ in 0..25 {
        let e = extents(&mut rng, 6);
        let (b, m, k, v, n, h) = (e[0], e[1], e[2], e[3], e[4], e[5]);
        let u = 1 + rng.below(3);

        // bmk,bmv->bkv
        let (kk, vv) = (rand(&mut rng, &[b, m, k]), rand(&mut rng, &[b, m, v]));
        let mut o = Tensor::zeros(&[b, k, v]);
        for bi in 0..b {
            for ki in 0..k {
                for vi in 0..v {
                    let mut s = 0.0;
                    for mi in 0..m {
                        s += kk.get(&[bi, mi, ki]) * vv.get(&[bi, mi, vi]);
                    }
                    o.set(&[bi, ki, vi], s);
                }
            }
        }
        check("bmk,bmv->bkv", &[&kk, &vv], o);

        // nmk,bmv->bnkv
        let ee = rand(&mut rng, &[n, m, k]);
        let mut o = Tensor::zeros(&[b, n, k, v]);
        for bi in 0..b {
            for ni in 0..n {
                for ki in 0..k {
                    for vi in 0..v {
                        let mut s = 0.0;
                        for mi in 0..m {
                            s += ee.get(&[ni, mi, ki]) * vv.get(&[bi, mi, vi]);
                        }
                        o.set(&[bi, ni, ki, vi], s);
                    }
                }
            }
        }
        check("nmk,bmv->bnkv", &[&ee, &vv], o);

        // bhnk,bkv->bnhv
        let q = rand(&mut rng, &[b, h, n, k]);
        let lc = rand(&mut rng, &[b, k, v]);
        let mut o = Tensor::zeros(&[b, n, h, v]);
        for bi in 0..b {
            for ni in 0..n {
                for hi in 0..h {
                    for vi in 0..v {
                        let mut s = 0.0;
                        for ki in 0..k {
                            s += q.get(&[bi, hi, ni, ki]) * lc.get(&[bi, ki, vi]);
                        }
                        o.set(&[bi, ni, hi, vi], s);
                    }
                }
            }
        }
        check("bhnk,bkv->bnhv", &[&q, &lc], o);

        // bhnk,bnkv->bnhv
        let lp = rand(&mut rng, &[b, n, k, v]);
        let mut o = Tensor::zeros(&[b, n, h, v]);
        for bi in 0..b {
            for ni in 0..n {
                for hi in 0..h {
                    for vi in 0..v {
                        let mut s = 0.0;
                        for ki in 0..k {
                            s += q.get(&[bi, hi, ni, ki]) * lp.get(&[bi, ni, ki, vi]);
                        }
                        o.set(&[bi, ni, hi, vi], s);
                    }
                }
            }
        }
        check("bhnk,bnkv->bnhv", &[&q, &lp], o);

        // bmkv,nm->bnkv
        let per_m = rand(&mut rng, &[b, m, k, v]);
        let mask = rand(&mut rng, &[n, m]);
        let mut o = Tensor::zeros(&[b, n, k, v]);
        for bi in 0..b {
            for ni in 0..n {
                for ki in 0..k {
                    for vi in 0..v {
                        let mut s = 0.0;
                        for mi in 0..m {
                            s += per_m.get(&[bi, mi, ki, vi]) * mask.get(&[ni, mi]);
                        }
                        o.set(&[bi, ni, ki, vi], s);
                    }
                }
            }
        }
        check("bmkv,nm->bnkv", &[&per_m, &mask], o);

        // knm,nm->knm
        let knm = rand(&mut rng, &[k, n, m]);
        let o = Tensor::from_fn(&[k, n, m], |i| knm.get(i) * mask.get(&[i[1], i[2]]));
        check("knm,nm->knm", &[&knm, &mask], o);

        // bhmk,bhmv->bhkv
        let hk = rand(&mut rng, &[b, h, m, k]);
        let hv = rand(&mut rng, &[b, h, m, v]);
        let mut o = Tensor::zeros(&[b, h, k, v]);
        for bi in 0..b {
            for hi in 0..h {
                for ki in 0..k {
                    for vi in 0..v {
                        let mut s = 0.0;
                        for mi in 0..m {
                            s += hk.get(&[bi, hi, mi, ki]) * hv.get(&[bi, hi, mi, vi]);
                        }
                        o.set(&[bi, hi, ki, vi], s);
                    }
                }
            }
        }
        check("bhmk,bhmv->bhkv", &[&hk, &hv], o);

        // hnmk,bhmv->bnhkv
        let he = rand(&mut rng, &[h, n, m, k]);
        let mut o = Tensor::zeros(&[b, n, h, k, v]);
        for bi in 0..b {
            for ni in 0..n {
                for hi in 0..h {
                    for ki in 0..k {
                        for vi in 0..v {
                            let mut s = 0.0;
                            for mi in 0..m {
                                s += he.get(&[hi, ni, mi, ki]) * hv.get(&[bi, hi, mi, vi]);
                            }
                            o.set(&[bi, ni, hi, ki, vi], s);
                        }
                    }
                }
            }
        }
        check("hnmk,bhmv->bnhkv", &[&he, &hv], o);

        // bmku,bmvu->bkv
        let ku = rand(&mut rng, &[b, m, k, u]);
        let vu = rand(&mut rng, &[b, m, v, u]);
        let mut o = Tensor::zeros(&[b, k, v]);
        for bi in 0..b {
            for ki in 0..k {
                for vi in 0..v {
                    let mut s = 0.0;
                    for mi in 0..m {
                        for ui in 0..u {
                            s += ku.get(&[bi, mi, ki, ui]) * vu.get(&[bi, mi, vi, ui]);
                        }
                    }
                    o.set(&[bi, ki, vi], s);
                }
            }
        }
        check("bmku,bmvu->bkv", &[&ku, &vu], o);

        // knmu,bmvu->bnkv
        let eu = rand(&mut rng, &[k, n, m, u]);
        let mut o = Tensor::zeros(&[b, n, k, v]);
        for bi in 0..b {
            for ni in 0..n {
                for ki in 0..k {
                    for vi in 0..v {
                        let mut s = 0.0;
                        for mi in 0..m {
                            for ui in 0..u {
                                s += eu.get(&[ki, ni, mi, ui]) * vu.get(&[bi, mi, vi, ui]);
                            }
                        }
                        o.set(&[bi, ni, ki, vi], s);
                    }
                }
            }
        }
        check("knmu,bmvu->bnkv", &[&eu, &vu], o);
    }
}

#[test]
fn identity_and_annihilation() {
    let mut rng = StreamRng::new(5, Stream::Suite, 98);
    let bm = rand(&mut rng, &[2, 2]);
    let eye = Tensor::from_fn(&[2, 2], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
    assert_eq!(contract("ij,jk->ik", &[&eye, &bm]).unwrap(), bm);
    let a = rand(&mut rng, &[3, 4, 2]);
    let z = Tensor::zeros(&[3, 4, 5]);
    let out = contract("bmk,bmv->bkv", &[&a, &z]).unwrap();
    assert_eq!(out.shape(), &[3, 2, 5]);
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn spec_and_shape_errors() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 5]);
    assert!(matches!(contract("ij,jk->ik", &[&a, &b]), Err(LambdaError::Shape(_))));
    assert!(matches!(contract("ij,jk->iz", &[&a, &a.permute(&[1, 0]).unwrap()]), Err(LambdaError::Spec(_))));
    assert!(matches!(contract("ij->i", &[&a, &a]), Err(LambdaError::Spec(_))));
}

#[test]
fn multiply_counter_counts_loop_iterations() {
    let mut rng = StreamRng::new(8, Stream::Suite, 97);
    let e = rand(&mut rng, &[4, 4, 2]);
    let v = rand(&mut rng, &[1, 4, 3]);
    let (_, c) = counter::measure(|| contract("nmk,bmv->bnkv", &[&e, &v]).unwrap());
    assert_eq!(c, 96);
}

fn spec_strategy() -> impl Strategy<Value = (&'static str, Vec<Vec<usize>>)> {
    (1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4).prop_flat_map(|(b, m, k, v)| {
        prop_oneof![
            Just(("bmk,bmv->bkv", vec![vec![b, m, k], vec![b, m, v]])),
            Just(("nmk,bmv->bnkv", vec![vec![v, m, k], vec![b, m, v]])),
            Just(("bhnk,bkv->bnhv", vec![vec![b, m, v, k], vec![b, k, v]])),
            Just(("bmkv,nm->bnkv", vec![vec![b, m, k, v], vec![k, m]])),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contraction_is_linear_in_first_operand((spec, shapes) in spec_strategy(), seed in any::<u64>()) {
        let mut rng = StreamRng::new(seed, Stream::Suite, 96);
        let a = rand(&mut rng, &shapes[0]);
        let a2 = rand(&mut rng, &shapes[0]);
        let b = rand(&mut rng, &shapes[1]);
        let lhs = contract(spec, &[&a.add(&a2).unwrap(), &b]).unwrap();
        let rhs = contract(spec, &[&a, &b]).unwrap().add(&contract(spec, &[&a2, &b]).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn all_paths_agree_bitwise((spec, shapes) in spec_strategy(), seed in any::<u64>()) {
        let mut rng = StreamRng::new(seed, Stream::Suite, 95);
        let a = rand(&mut rng, &shapes[0]);
        let b = rand(&mut rng, &shapes[1]);
        prop_assert_eq!(contract(spec, &[&a, &b]).unwrap(), contract_reference(spec, &[&a, &b]).unwrap());
    }
}
