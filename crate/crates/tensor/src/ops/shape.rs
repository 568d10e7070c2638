use crate::{Real, Tensor, Var};

/// Visits every element of `big_shape` together with the index of the element
/// of `small_shape` it broadcasts from. Both shapes have equal rank; every axis
/// of `small_shape` is either 1 or equal to the matching axis of `big_shape`.
pub(crate) fn for_each_broadcast(
    small_shape: &[usize],
    big_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    assert_eq!(
        small_shape.len(),
        big_shape.len(),
        "broadcast between ranks {} and {}",
        small_shape.len(),
        big_shape.len()
    );
    for (&s, &b) in small_shape.iter().zip(big_shape) {
        assert!(
            s == b || s == 1,
            "cannot broadcast {small_shape:?} to {big_shape:?}"
        );
    }
    let rank = big_shape.len();
    if rank == 0 || big_shape.iter().product::<usize>() == 0 {
        return;
    }
    // effective strides of the small tensor, zero along broadcast axes
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if small_shape[ax] == 1 { 0 } else { acc };
        acc *= small_shape[ax];
    }
    let last = big_shape[rank - 1];
    let last_stride = strides[rank - 1];
    let outer: usize = big_shape[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank.saturating_sub(1)];
    let mut small_base = 0usize;
    let mut big = 0usize;
    for _ in 0..outer {
        for j in 0..last {
            f(big, small_base + j * last_stride);
            big += 1;
        }
        // advance the odometer over the leading axes
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            small_base += strides[ax];
            if counter[ax] < big_shape[ax] {
                break;
            }
            small_base -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

/// Sums `big` down to `small_shape` (the adjoint of broadcasting).
pub(crate) fn reduce_to<T: Real>(big: &Tensor<T>, small_shape: &[usize]) -> Tensor<T> {
    if big.shape() == small_shape {
        return big.clone();
    }
    let mut out = vec![T::zero(); small_shape.iter().product()];
    let data = big.data();
    for_each_broadcast(small_shape, big.shape(), |b, s| out[s] += data[b]);
    Tensor::new(small_shape.to_vec(), out)
}

fn block_sizes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let x = self.value();
        let original = x.shape().to_vec();
        let y = x.reshape(shape);
        self.tape
            .record(y, &[self], move |g, _| vec![Some(g.reshape(original.clone()))])
    }

    /// Broadcasts size-1 axes up to `shape` (same rank).
    pub fn expand(self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let x = self.value();
        if x.shape() == shape.as_slice() {
            return self;
        }
        let mut out = vec![T::zero(); shape.iter().product()];
        let data = x.data();
        for_each_broadcast(x.shape(), &shape, |b, s| out[b] = data[s]);
        let small = x.shape().to_vec();
        self.tape.record(Tensor::new(shape, out), &[self], move |g, _| {
            vec![Some(reduce_to(g, &small))]
        })
    }

    /// Sums over `axes`, keeping them as size-1 axes.
    pub fn sum_axes(self, axes: &[usize]) -> Self {
        let x = self.value();
        let mut small = x.shape().to_vec();
        for &ax in axes {
            small[ax] = 1;
        }
        let y = reduce_to(&x, &small);
        let big = x.shape().to_vec();
        self.tape.record(y, &[self], move |g, _| {
            let mut out = vec![T::zero(); big.iter().product()];
            let gd = g.data();
            for_each_broadcast(g.shape(), &big, |b, s| out[b] = gd[s]);
            vec![Some(Tensor::new(big.clone(), out))]
        })
    }

    /// Mean over `axes`, keeping them as size-1 axes.
    pub fn mean_axes(self, axes: &[usize]) -> Self {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / count as f64)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, size, inner) = block_sizes(&shape, axis);
        assert!(start + len <= size, "narrow {start}+{len} beyond axis size {size}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape
            .record(Tensor::new(out_shape, out), &[self], move |g, _| {
                let mut full = vec![T::zero(); shape.iter().product()];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * size + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), full))]
            })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn cat(parts: &[Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "cat of zero tensors");
        let tape = parts[0].tape;
        let values: Vec<Tensor<T>> = parts.iter().map(|v| v.value()).collect();
        let first = values[0].shape().to_vec();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "cat rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "cat shape mismatch {s:?} vs {first:?}");
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = block_sizes(&first, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.record(Tensor::new(out_shape, out), parts, move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for ((&sz, shape), &need) in sizes.iter().zip(&shapes).zip(needs) {
                if need {
                    let mut part = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[base..base + sz * inner]);
                    }
                    grads.push(Some(Tensor::new(shape.clone(), part)));
                } else {
                    grads.push(None);
                }
                offset += sz;
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn expand_then_reduce_is_adjoint() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([2, 1, 3], vec![1., 2., 3., 4., 5., 6.]));
        let y = x.expand([2, 4, 3]);
        assert_eq!(y.value().data()[3..6], [1., 2., 3.]);
        assert_eq!(y.value().data()[12..15], [4., 5., 6.]);
        let g = tape.backward(y.sum());
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn broadcast_over_leading_axis() {
        let mut seen = Vec::new();
        for_each_broadcast(&[1, 2], &[3, 2], |b, s| seen.push((b, s)));
        assert_eq!(seen, vec![(0, 0), (1, 1), (2, 0), (3, 1), (4, 0), (5, 1)]);
    }

    #[test]
    fn narrow_and_cat_invert_each_other() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([2, 5, 3], |i| i as f64));
        let a = x.narrow(1, 0, 2);
        let b = x.narrow(1, 2, 3);
        let y = Var::cat(&[a, b], 1);
        assert_eq!(y.value(), x.value());
        let w = tape.constant(Tensor::from_fn([2, 5, 3], |i| (i % 7) as f64));
        let g = tape.backward((y * w).sum());
        assert_eq!(g.get(x).unwrap(), &w.value());
    }

    #[test]
    fn mean_axes_keeps_dims() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 2, 2], |i| i as f32));
        let m = x.mean_axes(&[1, 2, 3]);
        assert_eq!(m.shape(), vec![2, 1, 1, 1]);
        assert_eq!(m.value().data(), &[5.5, 17.5]);
    }
}
