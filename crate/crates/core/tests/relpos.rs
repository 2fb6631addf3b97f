//! Exhaustive checks of the relative index maps on small geometries.

use lambdakit::relpos::{build_rel_index_map, expand_embeddings, EmbeddingTable, RelIndexMap, OUT_OF_SCOPE};
use lambdakit::rng::{Stream, StreamRng};
use lambdakit::{Boundary, Geometry};

fn map(g: &Geometry, boundary: Boundary, scope: Option<&[usize]>) -> RelIndexMap {
    build_rel_index_map(g, g, boundary, scope).unwrap()
}

fn shifted(g: &Geometry, p: usize, t: &[i64], wrap: bool) -> Option<usize> {
    let ext = g.extents();
    let mut c = Vec::with_capacity(ext.len());
    for ((&x, &d), &e) in g.coords(p).iter().zip(t).zip(&ext) {
        let y = x as i64 + d;
        if wrap {
            c.push(y.rem_euclid(e as i64) as usize);
        } else if (0..e as i64).contains(&y) {
            c.push(y as usize);
        } else {
            return None;
        }
    }
    Some(g.position(&c))
}

fn all_shifts(g: &Geometry) -> Vec<Vec<i64>> {
    let ext = g.extents();
    let mut out = vec![vec![]];
    for &e in &ext {
        let e = e as i64;
        out = out.into_iter().flat_map(|t| (-(e - 1)..e).map(move |d| [t.clone(), vec![d]].concat())).collect();
    }
    out
}

fn geometries() -> Vec<Geometry> {
    let mut gs: Vec<Geometry> = (1..=8).map(Geometry::Seq).collect();
    for h in 1..=4 {
        for w in 1..=4 {
            gs.push(Geometry::Grid(h, w));
        }
    }
    gs
}

fn scopes(g: &Geometry, boundary: Boundary) -> Vec<Option<Vec<usize>>> {
    let ext = g.extents();
    let mut out = vec![None];
    for s in [1usize, 3, 5] {
        if boundary == Boundary::Circular && ext.iter().any(|&e| s > e) {
            continue;
        }
        out.push(Some(vec![s; ext.len()]));
    }
    out
}

#[test]
fn clamped_buckets_are_shift_invariant_inside_the_grid() {
    for g in geometries() {
        for scope in scopes(&g, Boundary::Clamped) {
            let m = map(&g, Boundary::Clamped, scope.as_deref());
            for t in all_shifts(&g) {
                for n in 0..g.len() {
                    for c in 0..g.len() {
                        if let (Some(n2), Some(c2)) = (shifted(&g, n, &t, false), shifted(&g, c, &t, false)) {
                            assert_eq!(m.raw(n, c), m.raw(n2, c2), "{g} {scope:?} t={t:?} ({n},{c})");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn circular_buckets_are_shift_invariant_everywhere() {
    for g in geometries() {
        for scope in scopes(&g, Boundary::Circular) {
            let m = map(&g, Boundary::Circular, scope.as_deref());
            for t in all_shifts(&g) {
                for n in 0..g.len() {
                    for c in 0..g.len() {
                        let (n2, c2) = (shifted(&g, n, &t, true).unwrap(), shifted(&g, c, &t, true).unwrap());
                        assert_eq!(m.raw(n, c), m.raw(n2, c2), "{g} {scope:?} t={t:?} ({n},{c})");
                    }
                }
            }
        }
    }
}

#[test]
fn distinct_offsets_get_distinct_buckets() {
    for g in geometries() {
        let m = map(&g, Boundary::Clamped, None);
        let ext = g.extents();
        assert_eq!(m.num_buckets(), ext.iter().map(|&e| 2 * e - 1).product::<usize>());
        let mut seen = std::collections::HashMap::new();
        for n in 0..g.len() {
            for c in 0..g.len() {
                let off: Vec<i64> = g.coords(c).iter().zip(g.coords(n)).map(|(&a, b)| a as i64 - b as i64).collect();
                let b = m.raw(n, c);
                assert!(b < m.num_buckets());
                assert_eq!(*seen.entry(off.clone()).or_insert(b), b, "{g} offset {off:?}");
            }
        }
        let mut buckets: Vec<_> = seen.values().copied().collect();
        buckets.sort_unstable();
        buckets.dedup();
        assert_eq!(buckets.len(), seen.len(), "{g}: two offsets share a bucket");

        let circ = map(&g, Boundary::Circular, None);
        assert_eq!(circ.num_buckets(), g.len());
    }
}

#[test]
fn scoped_map_equals_unscoped_then_zeroed() {
    let mut rng = StreamRng::new(3, Stream::Suite, 90);
    for g in geometries() {
        for s in [1usize, 3, 5] {
            let scope = vec![s; g.spatial_rank()];
            let scoped = map(&g, Boundary::Clamped, Some(&scope));
            let full = map(&g, Boundary::Clamped, None);
            let rs: EmbeddingTable = EmbeddingTable::random(scoped.num_buckets(), 2, 1, &mut rng);
            // give the unscoped table the same rows for the same offsets
            let mut rf = EmbeddingTable::zeros(full.num_buckets(), 2, 1);
            for n in 0..g.len() {
                for c in 0..g.len() {
                    if let Some(b) = scoped.bucket(n, c) {
                        let dst = full.raw(n, c);
                        for k in 0..2 {
                            let val = rs.tensor().get(&[b, k]);
                            rf.tensor_mut().set(&[dst, k], val);
                        }
                    }
                }
            }
            let es = expand_embeddings(&scoped, &rs).unwrap();
            let ef = expand_embeddings(&full, &rf).unwrap();
            let mask = scoped.scope_mask();
            for n in 0..g.len() {
                for c in 0..g.len() {
                    let half = (s / 2) as i64;
                    let inside = g.coords(n).iter().zip(g.coords(c)).all(|(&a, b)| (a as i64 - b as i64).abs() <= half);
                    assert_eq!(mask.get(&[n, c]) == 1.0, inside);
                    for k in 0..2 {
                        let want = if inside { ef.get(&[n, c, k]) } else { 0.0 };
                        assert_eq!(es.get(&[n, c, k]), want);
                    }
                }
            }
        }
    }
}

#[test]
fn grid_4x4_layout() {
    let g = Geometry::Grid(4, 4);
    let m = map(&g, Boundary::Clamped, None);
    assert_eq!(m.axis_buckets(), &[7, 7]);
    assert_eq!(m.num_buckets(), 49);
    // (0,0) -> (0,0) is offset (0,0): centre bucket 3*7+3
    assert_eq!(m.raw(0, 0), 24);
    // (0,0) -> (3,3): offset (3,3) is the last bucket
    assert_eq!(m.raw(0, 15), 48);
    // (3,3) -> (0,0): offset (-3,-3) is the first
    assert_eq!(m.raw(15, 0), 0);
    // (1,2) -> (2,0): offset (1,-2) -> 4*7+1
    assert_eq!(m.raw(g.position(&[1, 2]), g.position(&[2, 0])), 29);

    let scoped = map(&g, Boundary::Clamped, Some(&[3, 3]));
    assert_eq!(scoped.num_buckets(), 9);
    assert_eq!(scoped.raw(0, 15), OUT_OF_SCOPE);
    assert_eq!(scoped.bucket(0, 5), Some(8));

    let circ = map(&g, Boundary::Circular, None);
    assert_eq!(circ.num_buckets(), 16);
    let at = |r: usize, c: usize| g.position(&[r, c]);
    assert_eq!(circ.raw(at(0, 0), at(1, 2)), circ.raw(at(2, 1), at(3, 3)));
}

#[test]
fn equal_offsets_share_embedding_rows() {
    let g = Geometry::Seq(6);
    let m = map(&g, Boundary::Clamped, None);
    let mut rng = StreamRng::new(11, Stream::Suite, 91);
    let table: EmbeddingTable = EmbeddingTable::random(m.num_buckets(), 3, 1, &mut rng);
    let e = expand_embeddings(&m, &table).unwrap();
    for n in 0..5 {
        for c in 0..5 {
            for k in 0..3 {
                assert_eq!(e.get(&[n, c, k]), e.get(&[n + 1, c + 1, k]));
            }
        }
    }
}

#[test]
fn invalid_scopes_are_rejected() {
    let g = Geometry::Seq(4);
    assert!(build_rel_index_map(&g, &g, Boundary::Clamped, Some(&[2])).is_err());
    assert!(build_rel_index_map(&g, &g, Boundary::Circular, Some(&[5])).is_err());
    assert!(build_rel_index_map(&g, &g, Boundary::Clamped, Some(&[3, 3])).is_err());
    assert!(build_rel_index_map(&g, &Geometry::Seq(5), Boundary::Clamped, None).is_err());
    assert!(build_rel_index_map(&g, &g, Boundary::Clamped, Some(&[7])).is_ok());
}
