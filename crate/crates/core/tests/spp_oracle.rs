use progressd_core::fusion::{spp, PYRAMID_CELLS, PYRAMID_LEVELS};
use progressd_core::numcore::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nested-loop pyramid pooling: cell (i, j) of an n x n grid covers rows
/// floor(i H / n) .. ceil((i + 1) H / n), likewise for columns.
fn brute_force(x: &[f64], d: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for n in PYRAMID_LEVELS {
        for c in 0..d {
            for i in 0..n {
                for j in 0..n {
                    let (r0, r1) = (i * h / n, ((i + 1) * h).div_ceil(n));
                    let (c0, c1) = (j * w / n, ((j + 1) * w).div_ceil(n));
                    let mut best = f64::NEG_INFINITY;
                    for r in r0..r1 {
                        for col in c0..c1 {
                            best = best.max(x[c * h * w + r * w + col]);
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    out
}

#[test]
fn spp_matches_brute_force_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let (d, h, w) = (
            rng.random_range(1..6),
            rng.random_range(3..13),
            rng.random_range(3..13),
        );
        let x = Tensor::from_fn(vec![d, h, w], |_| rng.random_range(-5.0..5.0));
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone()).unwrap();
        let y = spp(&mut tape, v).unwrap();
        assert_eq!(tape.shape(y), [PYRAMID_CELLS * d]);
        assert_eq!(
            tape.value(y).data(),
            brute_force(x.data(), d, h, w).as_slice(),
            "{d}x{h}x{w}"
        );
    }
}
