//! Spatial resampling: index remaps, pooling and affine grid sampling.

use crate::{Real, Tensor, Var};

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Coefficients of a 2x3 affine map in normalized `[-1, 1]` coordinates,
/// row-major: `x_src = a0 u + a1 v + a2`, `y_src = a3 u + a4 v + a5`.
pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

struct Bilinear {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

/// Rounds coordinates within float noise of a pixel centre onto it, so
/// integer shifts (the identity included) copy pixels exactly.
fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        r
    } else {
        p
    }
}

fn sample_point(theta: &[f64], j: usize, i: usize, h: usize, w: usize) -> (Bilinear, f64, f64) {
    let u = (2.0 * j as f64 + 1.0) / w as f64 - 1.0;
    let v = (2.0 * i as f64 + 1.0) / h as f64 - 1.0;
    let xs = theta[0] * u + theta[1] * v + theta[2];
    let ys = theta[3] * u + theta[4] * v + theta[5];
    let px = snap(((xs + 1.0) * w as f64 - 1.0) / 2.0);
    let py = snap(((ys + 1.0) * h as f64 - 1.0) / 2.0);
    let (x0, y0) = (px.floor(), py.floor());
    (
        Bilinear {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: px - x0,
            fy: py - y0,
        },
        u,
        v,
    )
}

impl<'t, T: Real> Var<'t, T> {
    /// Gathers each output pixel from `index[out]` of the same input plane.
    fn remap_hw(self, out_h: usize, out_w: usize, index: Vec<usize>) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(index.len(), out_h * out_w);
        let (pin, pout) = (h * w, out_h * out_w);
        let mut out = Vec::with_capacity(n * c * pout);
        for plane in x.data().chunks(pin) {
            out.extend(index.iter().map(|&s| plane[s]));
        }
        self.tape
            .record(Tensor::new(vec![n, c, out_h, out_w], out), &[self], move |g, _| {
                let mut dx = vec![T::zero(); n * c * pin];
                for (dplane, gplane) in dx.chunks_mut(pin).zip(g.data().chunks(pout)) {
                    for (&s, &gv) in index.iter().zip(gplane) {
                        dplane[s] += gv;
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx))]
            })
    }

    /// Keeps the top-left sample of every 2x2 cell (ceil-sized output).
    pub fn decimate2(self) -> Self {
        let (_, _, h, w) = self.value().dims4();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let index = (0..oh * ow).map(|o| 2 * (o / ow) * w + 2 * (o % ow)).collect();
        self.remap_hw(oh, ow, index)
    }

    /// 2x "fancy" upsampling as in libjpeg: each output sample weighs its own
    /// input sample 3/4 and the next-nearest one 1/4 along each axis, with the
    /// edge sample repeated.
    pub fn upsample_triangle2(self) -> Self {
        let (_, _, h, w) = self.value().dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let far = |o: usize, n: usize| {
            let i = o / 2;
            if o % 2 == 0 {
                i.saturating_sub(1)
            } else {
                (i + 1).min(n - 1)
            }
        };
        let gather = |fy: bool, fx: bool| -> Vec<usize> {
            (0..oh * ow)
                .map(|o| {
                    let (y, x) = (o / ow, o % ow);
                    let sy = if fy { far(y, h) } else { y / 2 };
                    let sx = if fx { far(x, w) } else { x / 2 };
                    sy * w + sx
                })
                .collect()
        };
        let near = self.remap_hw(oh, ow, gather(false, false)).mul_scalar(9.0 / 16.0);
        let row = self.remap_hw(oh, ow, gather(true, false)).mul_scalar(3.0 / 16.0);
        let col = self.remap_hw(oh, ow, gather(false, true)).mul_scalar(3.0 / 16.0);
        let diag = self.remap_hw(oh, ow, gather(true, true)).mul_scalar(1.0 / 16.0);
        near + row + col + diag
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Self {
        let (_, _, h, w) = self.value().dims4();
        let (oh, ow) = (h * factor, w * factor);
        let index = (0..oh * ow)
            .map(|o| (o / ow / factor) * w + (o % ow) / factor)
            .collect();
        self.remap_hw(oh, ow, index)
    }

    /// Mirror padding (edge sample not repeated), like `numpy.pad(mode="reflect")`.
    pub fn pad_reflect(self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let (_, _, h, w) = self.value().dims4();
        assert!(
            top < h && bottom < h && left < w && right < w,
            "reflect padding must be smaller than the input ({h}x{w})"
        );
        let (oh, ow) = (h + top + bottom, w + left + right);
        let index = (0..oh * ow)
            .map(|o| {
                let y = reflect_index((o / ow) as isize - top as isize, h);
                let x = reflect_index((o % ow) as isize - left as isize, w);
                y * w + x
            })
            .collect();
        self.remap_hw(oh, ow, index)
    }

    /// Crops `[top, top + h) x [left, left + w)`.
    pub fn crop(self, top: usize, left: usize, h: usize, w: usize) -> Self {
        self.narrow(2, top, h).narrow(3, left, w)
    }

    /// 2x2 mean pooling with stride 2; height and width must be even.
    pub fn avg_pool2(self) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for i in 0..oh {
                for j in 0..ow {
                    let a = 2 * i * w + 2 * j;
                    out.push((plane[a] + plane[a + 1] + plane[a + w] + plane[a + w + 1]) * q);
                }
            }
        }
        self.tape
            .record(Tensor::new(vec![n, c, oh, ow], out), &[self], move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gplane[i * ow + j] * q;
                            let a = 2 * i * w + 2 * j;
                            dplane[a] += gv;
                            dplane[a + 1] += gv;
                            dplane[a + w] += gv;
                            dplane[a + w + 1] += gv;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx))]
            })
    }

    /// Resamples `(n, c, h, w)` images through per-sample affine maps `theta: (n, 6)`
    /// (see [`IDENTITY_AFFINE`]) with bilinear interpolation and zero padding.
    ///
    /// Pixel centres sit at normalized coordinates `(2j + 1) / w - 1`, so the
    /// identity map reproduces the input exactly.
    pub fn affine_grid_sample(self, theta: Self) -> Self {
        let x = self.value();
        let th = theta.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(th.shape(), &[n, 6], "theta must be (n, 6)");
        let thetas: Vec<f64> = th.data().iter().map(|v| v.as_f64()).collect();
        let plane = h * w;
        let at = move |img: &[T], yy: isize, xx: isize| -> f64 {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                img[yy as usize * w + xx as usize].as_f64()
            } else {
                0.0
            }
        };
        let mut out = vec![T::zero(); n * c * plane];
        for b in 0..n {
            let t = &thetas[b * 6..b * 6 + 6];
            for i in 0..h {
                for j in 0..w {
                    let (s, _, _) = sample_point(t, j, i, h, w);
                    for ch in 0..c {
                        let img = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        let v = (1.0 - s.fy) * ((1.0 - s.fx) * at(img, s.y0, s.x0) + s.fx * at(img, s.y0, s.x0 + 1))
                            + s.fy * ((1.0 - s.fx) * at(img, s.y0 + 1, s.x0) + s.fx * at(img, s.y0 + 1, s.x0 + 1));
                        out[(b * c + ch) * plane + i * w + j] = T::lit(v);
                    }
                }
            }
        }
        self.tape
            .record(Tensor::new(vec![n, c, h, w], out), &[self, theta], move |g, needs| {
                let gd = g.data();
                let mut dx = needs[0].then(|| vec![T::zero(); n * c * plane]);
                let mut dth = vec![0.0f64; n * 6];
                for b in 0..n {
                    let t = &thetas[b * 6..b * 6 + 6];
                    for i in 0..h {
                        for j in 0..w {
                            let (s, u, v) = sample_point(t, j, i, h, w);
                            let corners = [
                                (s.y0, s.x0, (1.0 - s.fy) * (1.0 - s.fx)),
                                (s.y0, s.x0 + 1, (1.0 - s.fy) * s.fx),
                                (s.y0 + 1, s.x0, s.fy * (1.0 - s.fx)),
                                (s.y0 + 1, s.x0 + 1, s.fy * s.fx),
                            ];
                            let (mut dpx, mut dpy) = (0.0, 0.0);
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                let gv = gd[base + i * w + j].as_f64();
                                if gv == 0.0 {
                                    continue;
                                }
                                if needs[1] {
                                    let img = &x.data()[base..base + plane];
                                    let (v00, v01) = (at(img, s.y0, s.x0), at(img, s.y0, s.x0 + 1));
                                    let (v10, v11) = (at(img, s.y0 + 1, s.x0), at(img, s.y0 + 1, s.x0 + 1));
                                    dpx += gv * ((1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                                    dpy += gv * ((1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                                }
                                if let Some(dx) = dx.as_mut() {
                                    for &(yy, xx, wgt) in &corners {
                                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                            dx[base + yy as usize * w + xx as usize] += T::lit(gv * wgt);
                                        }
                                    }
                                }
                            }
                            if needs[1] {
                                let dxs = dpx * w as f64 / 2.0;
                                let dys = dpy * h as f64 / 2.0;
                                let d = &mut dth[b * 6..b * 6 + 6];
                                d[0] += dxs * u;
                                d[1] += dxs * v;
                                d[2] += dxs;
                                d[3] += dys * u;
                                d[4] += dys * v;
                                d[5] += dys;
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(vec![n, c, h, w], d)),
                    needs[1].then(|| Tensor::new(vec![n, 6], dth.into_iter().map(T::lit).collect())),
                ]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn identity_affine_reproduces_input() {
        let tape = Tape::<f32>::new();
        let x = Tensor::from_fn([2, 3, 9, 7], |i| ((i * 31 % 23) as f32) / 23.0);
        let theta = Tensor::new([2, 6], [IDENTITY_AFFINE, IDENTITY_AFFINE].concat().iter().map(|&v| v as f32).collect());
        let y = tape.constant(x.clone()).affine_grid_sample(tape.constant(theta));
        assert!(y.value().max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn pad_reflect_then_crop_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 5, 6], |i| i as f64));
        let p = x.pad_reflect(2, 1, 3, 0);
        assert_eq!(p.shape(), vec![1, 2, 8, 9]);
        assert_eq!(p.crop(2, 3, 5, 6).value(), x.value());
        // first padded row mirrors input row 2
        assert_eq!(p.value().data()[3..9], x.value().data()[12..18]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 3, 4], |i| i as f64));
        assert_eq!(x.upsample_nearest(2).avg_pool2().value(), x.value());
    }

    #[test]
    fn triangle_upsampling_weights() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 1, 1, 3], vec![0.0, 4.0, 8.0]));
        // one row: vertical weights collapse onto it
        assert_eq!(x.upsample_triangle2().value().data()[..6], [0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
        let y = tape.constant(Tensor::from_fn([1, 1, 4, 5], |i| i as f64));
        assert_eq!(y.decimate2().value().data(), [0.0, 2.0, 4.0, 10.0, 12.0, 14.0]);
        let c = tape.constant(Tensor::full([1, 2, 3, 3], 0.5));
        assert_eq!(c.upsample_triangle2().value(), Tensor::full([1, 2, 6, 6], 0.5));
    }
}
