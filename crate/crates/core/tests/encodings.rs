//! Exhaustive checks of the window code and the query code against their
//! closed forms, plus grid geometry properties.

use c2d_core::encodings::{
    cell_vector, coord_hier_encoding, encoding_plane, local_coord_grid, window_hier_encoding, QueryCoord, WindowGeometry,
};
use proptest::prelude::*;

/// `⌊(u / w) · 2⌋ mod 2` evaluated with f64 division.
fn window_bit(u: usize, w: usize) -> u8 {
    ((u as f64 / w as f64 * 2.0).floor() as u64 % 2) as u8
}

/// `⌊x · 2^{j+1}⌋ mod 2` with `x = k / n` as an exact rational.
fn query_bit(k: usize, n: usize, j: u32) -> u8 {
    ((k << (j + 1)) / n % 2) as u8
}

#[test]
fn window_code_matches_formula_on_full_64_grid() {
    let mut mismatches = 0;
    for w in 1..=64 {
        for h in [1, 3, 7, 8, 16, 31, 64] {
            let g = WindowGeometry::new(w, h, 64, 64).unwrap();
            let plane = encoding_plane(&g);
            for v in 0..64 {
                for u in 0..64 {
                    let want = (window_bit(u, w), window_bit(v, h));
                    let got = window_hier_encoding(&g, u, v).unwrap();
                    let p = &plane.data()[(v * 64 + u) * 2..(v * 64 + u) * 2 + 2];
                    if got != want || p != [want.0 as f32, want.1 as f32] {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn query_code_matches_formula_on_32_lattice() {
    // lattice points k/32 and the cell centres (k + 0.5)/32
    let mut mismatches = 0;
    for j in [0, 1] {
        for ky in 0..32 {
            for kx in 0..32 {
                let q = QueryCoord {
                    x_local: kx as f32 / 32.0,
                    y_local: ky as f32 / 32.0,
                    level: j,
                };
                if coord_hier_encoding(&q) != (query_bit(kx, 32, j), query_bit(ky, 32, j)) {
                    mismatches += 1;
                }
                let q = QueryCoord {
                    x_local: (kx as f32 + 0.5) / 32.0,
                    y_local: (ky as f32 + 0.5) / 32.0,
                    level: j,
                };
                if coord_hier_encoding(&q) != (query_bit(2 * kx + 1, 64, j), query_bit(2 * ky + 1, 64, j)) {
                    mismatches += 1;
                }
            }
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn query_code_examples() {
    let q = |x, y, level| QueryCoord {
        x_local: x,
        y_local: y,
        level,
    };
    assert_eq!(coord_hier_encoding(&q(0.0, 0.0, 0)), (0, 0));
    assert_eq!(coord_hier_encoding(&q(0.0, 0.0, 1)), (0, 0));
    assert_eq!(coord_hier_encoding(&q(0.3, 0.7, 0)), (0, 1));
    assert_eq!(coord_hier_encoding(&q(0.3, 0.7, 1)), (1, 0));
}

#[test]
fn one_by_one_plane_is_zero() {
    let p = encoding_plane(&WindowGeometry::new(1, 1, 1, 1).unwrap());
    assert_eq!(p.shape(), &[1, 1, 2]);
    assert_eq!(p.data(), &[0.0, 0.0]);
}

#[test]
fn cell_vector_shrinks_with_scale() {
    let c: Vec<[f32; 2]> = [1.0, 2.0, 4.0].iter().map(|&s| cell_vector(s, 48, 40).unwrap().0).collect();
    assert_eq!(c[0], [2.0 / 48.0, 2.0 / 40.0]);
    assert!(c.windows(2).all(|p| p[1][0] < p[0][0] && p[1][1] < p[0][1]));
}

proptest! {
    #[test]
    fn window_code_is_periodic(w in 1usize..20, h in 1usize..20, u in 0usize..40, v in 0usize..40) {
        let g = WindowGeometry::new(w, h, 80, 80).unwrap();
        prop_assert_eq!(window_hier_encoding(&g, u, v).unwrap(), window_hier_encoding(&g, u + w, v + h).unwrap());
    }

    #[test]
    fn even_window_bits_split_in_halves(half in 1usize..16) {
        let w = 2 * half;
        let g = WindowGeometry::new(w, w, w, w).unwrap();
        let ones = (0..w).filter(|&u| window_hier_encoding(&g, u, 0).unwrap().0 == 1).count();
        prop_assert_eq!(ones, half);
        // the ones are the second half
        prop_assert!((half..w).all(|u| window_hier_encoding(&g, u, 0).unwrap().0 == 1));
    }

    #[test]
    fn query_code_frequency(j in 0u32..2) {
        // number of bit flips across a fine sweep of the unit cell
        let n = 1024;
        let bits: Vec<u8> = (0..n).map(|k| coord_hier_encoding(&QueryCoord {
            x_local: (k as f32 + 0.5) / n as f32,
            y_local: 0.0,
            level: j,
        }).0).collect();
        let flips = bits.windows(2).filter(|p| p[0] != p[1]).count();
        prop_assert_eq!(flips, (1 << (j + 1)) - 1);
    }

    #[test]
    fn local_coordinates_stay_in_unit_cell(s in 1.0f64..4.0, h in 1usize..12, w in 1usize..12) {
        let g = local_coord_grid(s, h, w).unwrap();
        prop_assert_eq!(g.coords.len(), g.out_h * g.out_w);
        for (c, &n) in g.coords.iter().zip(&g.nearest) {
            prop_assert!((0.0..1.0).contains(&c[0]) && (0.0..1.0).contains(&c[1]));
            prop_assert!((n as usize) < h * w);
        }
    }
}
