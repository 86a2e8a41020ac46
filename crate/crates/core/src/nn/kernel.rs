//! The one dense kernel everything runs through.
//!
//! `gemm_acc` computes `c[p, q] += sum_r a(p, r) * b[r, q]` with the sum
//! taken strictly in ascending `r`, one rounding per multiply and per add.
//! Terms whose `a(p, r)` is zero are skipped: the accumulators start from
//! `+0.0` or a finite sum and never become `-0.0`, so adding `±0.0` is a
//! bitwise no-op. Each entry of `c` therefore depends only on its own row
//! and column, never on the tiling or on how many rows are processed
//! together.

const TILE_Q: usize = 8;

/// `c` is `p_len x q_len` row-major, `b` is `r_len x q_len` row-major and
/// `a(p, r) = a[p * a_p + r * a_r]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    c: &mut [f64],
    p_len: usize,
    q_len: usize,
    r_len: usize,
    a: &[f64],
    a_p: usize,
    a_r: usize,
    b: &[f64],
) {
    debug_assert!(c.len() >= p_len * q_len);
    debug_assert!(b.len() >= r_len * q_len);
    let q_tiles = q_len - q_len % TILE_Q;
    let mut p0 = 0;
    while p0 < p_len {
        let rows = (p_len - p0).min(4);
        for q0 in (0..q_tiles).step_by(TILE_Q) {
            match rows {
                4 => tile::<4>(c, q_len, p0, q0, r_len, a, a_p, a_r, b),
                3 => tile::<3>(c, q_len, p0, q0, r_len, a, a_p, a_r, b),
                2 => tile::<2>(c, q_len, p0, q0, r_len, a, a_p, a_r, b),
                _ => tile::<1>(c, q_len, p0, q0, r_len, a, a_p, a_r, b),
            }
        }
        for p in p0..p0 + rows {
            for q in q_tiles..q_len {
                let mut s = c[p * q_len + q];
                for r in 0..r_len {
                    let av = a[p * a_p + r * a_r];
                    if av != 0.0 {
                        s += av * b[r * q_len + q];
                    }
                }
                c[p * q_len + q] = s;
            }
        }
        p0 += rows;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile<const P: usize>(
    c: &mut [f64],
    q_len: usize,
    p0: usize,
    q0: usize,
    r_len: usize,
    a: &[f64],
    a_p: usize,
    a_r: usize,
    b: &[f64],
) {
    let mut acc = [[0.0f64; TILE_Q]; P];
    for (i, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(p0 + i) * q_len + q0..][..TILE_Q]);
    }
    for r in 0..r_len {
        let mut av = [0.0f64; P];
        let mut any = false;
        for (i, v) in av.iter_mut().enumerate() {
            *v = a[(p0 + i) * a_p + r * a_r];
            any |= *v != 0.0;
        }
        if !any {
            continue;
        }
        let bv: &[f64; TILE_Q] = b[r * q_len + q0..][..TILE_Q].try_into().unwrap();
        for i in 0..P {
            for j in 0..TILE_Q {
                acc[i][j] += av[i] * bv[j];
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        c[(p0 + i) * q_len + q0..][..TILE_Q].copy_from_slice(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[allow(clippy::too_many_arguments)]
    fn naive(c: &mut [f64], p_len: usize, q_len: usize, r_len: usize, a: &[f64], a_p: usize, a_r: usize, b: &[f64]) {
        for p in 0..p_len {
            for q in 0..q_len {
                let mut s = c[p * q_len + q];
                for r in 0..r_len {
                    s += a[p * a_p + r * a_r] * b[r * q_len + q];
                }
                c[p * q_len + q] = s;
            }
        }
    }

    #[test]
    fn matches_sequential_sum_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(p_len, q_len, r_len) in &[(1, 1, 1), (3, 7, 5), (4, 8, 9), (9, 19, 13), (6, 16, 1)] {
            // Half of `a` is exactly zero to exercise the skip path.
            let a: Vec<f64> = (0..p_len * r_len)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        0.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let b: Vec<f64> = (0..r_len * q_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let init: Vec<f64> = (0..p_len * q_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            for (a_p, a_r) in [(r_len, 1), (1, p_len)] {
                let mut got = init.clone();
                let mut want = init.clone();
                gemm_acc(&mut got, p_len, q_len, r_len, &a, a_p, a_r, &b);
                naive(&mut want, p_len, q_len, r_len, &a, a_p, a_r, &b);
                let g: Vec<u64> = got.iter().map(|v| v.to_bits()).collect();
                let w: Vec<u64> = want.iter().map(|v| v.to_bits()).collect();
                assert_eq!(g, w, "{p_len}x{q_len}x{r_len} strides {a_p},{a_r}");
            }
        }
    }

    #[test]
    fn rows_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p_len, q_len, r_len) = (11, 21, 17);
        let a: Vec<f64> = (0..p_len * r_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..r_len * q_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut all = vec![0.0; p_len * q_len];
        gemm_acc(&mut all, p_len, q_len, r_len, &a, r_len, 1, &b);
        for p in 0..p_len {
            let mut one = vec![0.0; q_len];
            gemm_acc(&mut one, 1, q_len, r_len, &a[p * r_len..], r_len, 1, &b);
            assert_eq!(&all[p * q_len..(p + 1) * q_len], one.as_slice());
        }
    }
}
