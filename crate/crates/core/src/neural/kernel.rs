//! `C = A * B` in `f32` for a fixed right-hand matrix packed once.
//!
//! On x86-64 with AVX-512F a 12x32 register-blocked kernel is used; other
//! machines fall back to `ndarray`'s GEMM. Each output row is produced by
//! the same instruction sequence wherever it sits in `A`, so a row's result
//! does not depend on the other rows.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, ShapeBuilder};

const MR: usize = 12;
const NR: usize = 32;
const KC: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct PackedMatrix {
    k: usize,
    n: usize,
    /// Column panels of width `NR`, each `k x NR` row-major, zero padded.
    panels: Vec<f32>,
    plain: Array2<f32>,
    wide: bool,
}

impl PackedMatrix {
    /// Pack `b` (`K x N`).
    pub(crate) fn new(b: ArrayView2<'_, f32>) -> Self {
        let (k, n) = b.dim();
        let count = n.div_ceil(NR);
        let mut panels = vec![0.0f32; count * k * NR];
        for q in 0..count {
            for p in 0..k {
                for j in 0..NR.min(n - q * NR) {
                    panels[(q * k + p) * NR + j] = b[[p, q * NR + j]];
                }
            }
        }
        Self {
            k,
            n,
            panels,
            plain: b.as_standard_layout().into_owned(),
            wide: has_avx512(),
        }
    }

    /// Overwrite the `m x N` matrix at `c` (row stride `ldc`) with `A * B`,
    /// where `A` is `m x K` at `a` with row stride `lda`.
    pub(crate) fn matmul(&self, a: &[f32], lda: usize, m: usize, c: &mut [f32], ldc: usize) {
        if m == 0 {
            return;
        }
        assert!(lda >= self.k && ldc >= self.n, "row strides too small");
        assert!(self.k == 0 || a.len() >= (m - 1) * lda + self.k, "left operand too short");
        assert!(c.len() >= (m - 1) * ldc + self.n, "output too short");
        #[cfg(target_arch = "x86_64")]
        if self.wide {
            // SAFETY: AVX-512F was detected at construction and the bounds
            // above cover every access the kernel makes.
            unsafe { self.matmul_avx512(a, lda, m, c, ldc) };
            return;
        }
        let av = ArrayView2::from_shape((m, self.k).strides((lda, 1)), a).expect("bounds checked");
        let cv = ArrayViewMut2::from_shape((m, self.n).strides((ldc, 1)), c).expect("bounds checked");
        let mut cv = cv;
        general_mat_mul(1.0, &av, &self.plain, 0.0, &mut cv);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn matmul_avx512(&self, a: &[f32], lda: usize, m: usize, c: &mut [f32], ldc: usize) {
        let (k, n) = (self.k, self.n);
        if k == 0 {
            for r in 0..m {
                c[r * ldc..r * ldc + n].fill(0.0);
            }
            return;
        }
        let a = a.as_ptr();
        let c = c.as_mut_ptr();
        let b = self.panels.as_ptr();
        for k0 in (0..k).step_by(KC) {
            let kc = KC.min(k - k0);
            for q in 0..n.div_ceil(NR) {
                let bp = b.add((q * k + k0) * NR);
                let valid = NR.min(n - q * NR);
                for i0 in (0..m).step_by(MR) {
                    avx512::kernel(
                        kc,
                        a.add(i0 * lda + k0),
                        lda,
                        MR.min(m - i0),
                        bp,
                        c.add(i0 * ldc + q * NR),
                        ldc,
                        valid,
                        k0 > 0,
                    );
                }
            }
        }
    }
}

fn has_avx512() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{MR, NR};
    use std::arch::x86_64::*;

    fn lane_mask(valid: usize) -> __mmask16 {
        if valid >= 16 {
            0xffff
        } else {
            ((1u32 << valid) - 1) as __mmask16
        }
    }

    /// `C[0..mr, 0..valid] (+)= A[0..mr, 0..kc] * B_panel[0..kc, 0..NR]`.
    ///
    /// # Safety
    /// Requires AVX-512F; `a` must be readable for `mr` rows of `kc`
    /// values at stride `lda`, `b` for `kc * NR` values, and `c` writable for
    /// `mr` rows of `valid` values at stride `ldc`.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn kernel(
        kc: usize,
        a: *const f32,
        lda: usize,
        mr: usize,
        b: *const f32,
        c: *mut f32,
        ldc: usize,
        valid: usize,
        accumulate: bool,
    ) {
        let mut acc = [[_mm512_setzero_ps(); 2]; MR];
        let mut rows = [a; MR];
        for (r, row) in rows.iter_mut().enumerate().take(mr) {
            *row = a.add(r * lda);
        }
        for p in 0..kc {
            let b0 = _mm512_loadu_ps(b.add(p * NR));
            let b1 = _mm512_loadu_ps(b.add(p * NR + 16));
            for r in 0..MR {
                let av = _mm512_set1_ps(*rows[r].add(p));
                acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
                acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
            }
        }
        let m0 = lane_mask(valid);
        let m1 = lane_mask(valid.saturating_sub(16));
        for (r, v) in acc.iter().enumerate().take(mr) {
            let cp = c.add(r * ldc);
            let (mut v0, mut v1) = (v[0], v[1]);
            if accumulate {
                v0 = _mm512_add_ps(v0, _mm512_maskz_loadu_ps(m0, cp));
                v1 = _mm512_add_ps(v1, _mm512_maskz_loadu_ps(m1, cp.add(16)));
            }
            _mm512_mask_storeu_ps(cp, m0, v0);
            _mm512_mask_storeu_ps(cp.add(16), m1, v1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn matches_reference_product() {
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (13, 300, 33), (257, 415, 1536), (24, 640, 64), (3, 0, 5)] {
            let a = random(m, k, 1);
            let b = random(k, n, 2);
            let packed = PackedMatrix::new(b.view());
            let mut c = Array2::from_elem((m, n), f32::NAN);
            packed.matmul(a.as_slice().unwrap(), k.max(1), m, c.as_slice_mut().unwrap(), n);
            let want = a.dot(&b);
            for (x, y) in c.iter().zip(want.iter()) {
                assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{m}x{k}x{n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn rows_do_not_depend_on_neighbours() {
        let a = random(30, 50, 3);
        let packed = PackedMatrix::new(random(50, 40, 4).view());
        let mut full = vec![0.0; 30 * 40];
        packed.matmul(a.as_slice().unwrap(), 50, 30, &mut full, 40);
        for r in [0, 11, 12, 29] {
            let mut one = vec![0.0; 40];
            packed.matmul(&a.as_slice().unwrap()[r * 50..], 50, 1, &mut one, 40);
            assert_eq!(&full[r * 40..(r + 1) * 40], &one[..]);
        }
    }

    #[test]
    fn honours_strides() {
        let a = random(6, 10, 5);
        let packed = PackedMatrix::new(random(8, 4, 6).view());
        let mut c = vec![7.0f32; 6 * 9];
        packed.matmul(a.as_slice().unwrap(), 10, 6, &mut c, 9);
        let want = a.slice(ndarray::s![.., ..8]).dot(&packed.plain);
        for r in 0..6 {
            for j in 0..4 {
                assert!((c[r * 9 + j] - want[[r, j]]).abs() < 1e-5);
            }
            assert!(c[r * 9 + 4..r * 9 + 9].iter().all(|&v| v == 7.0));
        }
    }
}
