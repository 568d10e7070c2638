//! 2D convolution (cross-correlation) with zero padding, via im2col + GEMM.

use crate::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Pointwise convolutions read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input coordinate `o * stride + k - pad` is in `[0, size)`.
    fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        // o * stride + k - pad < size  <=>  o * stride < size + pad - k
        let hi = if size + pad > k {
            ((size + pad - k).div_ceil(stride)).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (x_lo, x_hi) =
                        Self::valid_range(self.wo, self.w, kx, self.stride, self.pad);
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..x_lo].fill(T::zero());
                        line[x_hi..].fill(T::zero());
                        if self.stride == 1 {
                            let ix0 = x_lo + kx - self.pad;
                            line[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for (ox, v) in line.iter_mut().enumerate().take(x_hi).skip(x_lo) {
                                *v = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let (x_lo, x_hi) =
                        Self::valid_range(self.wo, self.w, kx, self.stride, self.pad);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in x_lo..x_hi {
                            dst[ox * self.stride + kx - self.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Convolves an `(n, cin, h, w)` input with `(cout, cin, kh, kw)` weights.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "conv2d stride must be positive");
        let x = self.value();
        let wt = weight.value();
        let (n, cin, h, w) = x.dims4();
        let (cout, wcin, kh, kw) = wt.dims4();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geo = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let (k, p) = (geo.k(), geo.p());
        let bias_value = bias.map(|b| {
            let b = b.value();
            assert_eq!(b.shape(), &[cout], "conv2d bias shape");
            b
        });

        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        for b in 0..n {
            let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
            let src: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[b * cout * p..(b + 1) * cout * p];
            if let Some(bv) = &bias_value {
                for (co, chunk) in ob.chunks_mut(p).enumerate() {
                    chunk.fill(bv.data()[co]);
                }
            }
            let beta = if bias_value.is_some() { T::one() } else { T::zero() };
            T::gemm(cout, k, p, T::one(), (wt.data(), k, 1), (src, p, 1), beta, (ob, p, 1));
        }
        let y = Tensor::new(vec![n, cout, ho, wo], out);

        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.tape.record(y, &inputs, move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![T::zero(); n * cin * h * w]);
            let mut dw = needs[1].then(|| vec![T::zero(); cout * k]);
            let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { k * p }];
            let mut dcols = vec![T::zero(); if dx.is_some() { k * p } else { 0 }];
            for b in 0..n {
                let gb = &gd[b * cout * p..(b + 1) * cout * p];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
                    let src: &[T] = if geo.is_pointwise() {
                        xb
                    } else {
                        geo.im2col(xb, &mut cols);
                        &cols
                    };
                    // dW += dY (cout x p) * cols^T (p x k)
                    T::gemm(cout, p, k, T::one(), (gb, p, 1), (src, 1, p), T::one(), (dw, k, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
                    if geo.is_pointwise() {
                        // dX = W^T (k x cout) * dY (cout x p)
                        T::gemm(k, cout, p, T::one(), (wt.data(), 1, k), (gb, p, 1), T::one(), (dxb, p, 1));
                    } else {
                        T::gemm(k, cout, p, T::one(), (wt.data(), 1, k), (gb, p, 1), T::zero(), (&mut dcols, p, 1));
                        geo.col2im(&dcols, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(vec![n, cin, h, w], d)),
                dw.map(|d| Tensor::new(vec![cout, cin, kh, kw], d)),
            ];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); cout];
                    for b in 0..n {
                        for (co, acc) in db.iter_mut().enumerate() {
                            let base = (b * cout + co) * p;
                            *acc += gd[base..base + p].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(vec![cout], db)
                }));
            }
            grads
        })
    }
}
