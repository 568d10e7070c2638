//! Fixed (non-learned) linear filters: colour matrices, separable blur, block DCT.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::ops::sample::reflect_index;
use crate::{Real, Tensor, Var};

/// Orthonormal 8-point DCT-II basis, `basis[k][n]`.
pub fn dct8_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Applies `B X B^T` (forward) or `B^T X B` (inverse) to every 8x8 block of every plane.
fn transform_blocks<T: Real>(data: &[T], h: usize, w: usize, inverse: bool) -> Vec<T> {
    let basis = dct8_basis();
    let b = |r: usize, c: usize| if inverse { basis[c][r] } else { basis[r][c] };
    let mut out = vec![T::zero(); data.len()];
    let mut tmp = [[0.0f64; 8]; 8];
    for (src, dst) in data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // rows: tmp = B X
                for (r, trow) in tmp.iter_mut().enumerate() {
                    for (c, t) in trow.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for k in 0..8 {
                            s += b(r, k) * src[(by + k) * w + bx + c].as_f64();
                        }
                        *t = s;
                    }
                }
                // columns: out = tmp B^T
                for (r, trow) in tmp.iter().enumerate() {
                    for c in 0..8 {
                        let mut s = 0.0;
                        for (k, &t) in trow.iter().enumerate() {
                            s += t * b(c, k);
                        }
                        dst[(by + r) * w + bx + c] = T::lit(s);
                    }
                }
            }
        }
    }
    out
}

/// Source taps of a 1D reflect-padded correlation: `out[i] = sum k[t] in[taps[i][t]]`.
fn reflect_taps(len: usize, radius: usize) -> Vec<Vec<usize>> {
    (0..len)
        .map(|i| {
            (0..2 * radius + 1)
                .map(|t| reflect_index(i as isize + t as isize - radius as isize, len))
                .collect()
        })
        .collect()
}

impl<'t, T: Real> Var<'t, T> {
    /// Per-pixel affine colour map: `y[co] = sum_ci m[co][ci] x[ci] + offset[co]`.
    ///
    /// `matrix` is row-major `cout x cin`.
    pub fn channel_mix(self, matrix: &[f64], offset: &[f64]) -> Self {
        let x = self.value();
        let (n, cin, h, w) = x.dims4();
        let cout = offset.len();
        assert_eq!(matrix.len(), cout * cin, "channel_mix matrix is {cout}x{cin}");
        let p = h * w;
        let m: Arc<Vec<T>> = Arc::new(matrix.iter().map(|&v| T::lit(v)).collect());
        let mut out = vec![T::zero(); n * cout * p];
        for b in 0..n {
            for co in 0..cout {
                let dst = &mut out[(b * cout + co) * p..(b * cout + co + 1) * p];
                dst.fill(T::lit(offset[co]));
                for ci in 0..cin {
                    let k = m[co * cin + ci];
                    if k == T::zero() {
                        continue;
                    }
                    let src = &x.data()[(b * cin + ci) * p..(b * cin + ci + 1) * p];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += k * s;
                    }
                }
            }
        }
        self.tape
            .record(Tensor::new(vec![n, cout, h, w], out), &[self], move |g, _| {
                let mut dx = vec![T::zero(); n * cin * p];
                for b in 0..n {
                    for ci in 0..cin {
                        let dst = &mut dx[(b * cin + ci) * p..(b * cin + ci + 1) * p];
                        for co in 0..cout {
                            let k = m[co * cin + ci];
                            if k == T::zero() {
                                continue;
                            }
                            let src = &g.data()[(b * cout + co) * p..(b * cout + co + 1) * p];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += k * s;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, cin, h, w], dx))]
            })
    }

    /// Depthwise separable correlation with the same odd-length `kernel` along
    /// both axes, reflect padding at the borders.
    pub fn blur_separable(self, kernel: &[f64]) -> Self {
        assert!(kernel.len() % 2 == 1, "separable kernel must have odd length");
        self.correlate_axis(kernel, 3).correlate_axis(kernel, 2)
    }

    fn correlate_axis(self, kernel: &[f64], axis: usize) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let radius = kernel.len() / 2;
        let len = if axis == 3 { w } else { h };
        assert!(radius < len, "kernel radius {radius} too large for axis of length {len}");
        let taps = Arc::new(reflect_taps(len, radius));
        let k: Arc<Vec<T>> = Arc::new(kernel.iter().map(|&v| T::lit(v)).collect());
        // offset of element (line, pos) within a plane
        let index = move |line: usize, pos: usize| if axis == 3 { line * w + pos } else { pos * w + line };
        let lines = if axis == 3 { h } else { w };
        let mut out = vec![T::zero(); x.numel()];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            for line in 0..lines {
                for (pos, tap) in taps.iter().enumerate() {
                    let mut s = T::zero();
                    for (&t, &kv) in tap.iter().zip(k.iter()) {
                        s += kv * src[index(line, t)];
                    }
                    dst[index(line, pos)] = s;
                }
            }
        }
        self.tape
            .record(Tensor::new(vec![n, c, h, w], out), &[self], move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (gsrc, dst) in g.data().chunks(h * w).zip(dx.chunks_mut(h * w)) {
                    for line in 0..lines {
                        for (pos, tap) in taps.iter().enumerate() {
                            let gv = gsrc[index(line, pos)];
                            for (&t, &kv) in tap.iter().zip(k.iter()) {
                                dst[index(line, t)] += kv * gv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx))]
            })
    }

    /// Orthonormal DCT-II of every 8x8 block (`inverse` for the DCT-III).
    pub fn block_dct8(self, inverse: bool) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 8 == 0 && w % 8 == 0, "block_dct8 needs dims divisible by 8, got {h}x{w}");
        let y = transform_blocks(x.data(), h, w, inverse);
        self.tape
            .record(Tensor::new(vec![n, c, h, w], y), &[self], move |g, _| {
                // orthonormal: the adjoint is the opposite transform
                vec![Some(Tensor::new(
                    vec![n, c, h, w],
                    transform_blocks(g.data(), h, w, !inverse),
                ))]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn dct_basis_is_orthonormal() {
        let b = dct8_basis();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..8).map(|k| b[i][k] * b[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_dct_round_trip_and_dc() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 8, 16], |i| ((i * 7 % 13) as f64) - 6.0));
        let y = x.block_dct8(false);
        assert!(y.block_dct8(true).value().max_abs_diff(&x.value()) < 1e-10);
        let c = tape.constant(Tensor::full([1, 1, 8, 8], 2.0)).block_dct8(false).value();
        // constant block: all energy in DC = 8 * value
        assert!((c.data()[0] - 16.0).abs() < 1e-12);
        assert!(c.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_constants() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 2, 6, 5], 0.3));
        let k = [0.25, 0.5, 0.25];
        assert!(x.blur_separable(&k).value().max_abs_diff(&x.value()) < 1e-15);
    }

    #[test]
    fn channel_mix_applies_matrix() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 2, 1, 1], vec![1.0, 2.0]));
        let y = x.channel_mix(&[1.0, 1.0, 2.0, -1.0, 0.0, 3.0], &[0.0, 0.5, 1.0]);
        assert_eq!(y.value().data(), &[3.0, 0.5, 7.0]);
    }
}
