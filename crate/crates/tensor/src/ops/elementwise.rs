use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::{Real, Tensor, Var};

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?} (use expand to broadcast)",
        a.shape(),
        b.shape()
    );
}

/// Rounding with a cubic residual: `round(x) + (x - round(x))^3`.
///
/// Forward values stay within 0.125 of true rounding while the derivative
/// `3 (x - round(x))^2` is nonzero away from integers.
pub fn round_cubic<T: Real>(x: T) -> T {
    let r = x.round();
    let d = x - r;
    r + d * d * d
}

/// Derivative of [`round_cubic`].
pub fn round_cubic_grad<T: Real>(x: T) -> T {
    let d = x - x.round();
    T::lit(3.0) * d * d
}

impl<'t, T: Real> Var<'t, T> {
    /// Applies `f` elementwise; `df(x, y)` is the derivative at input `x` with output `y`.
    pub fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Self {
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x, y.clone());
        self.tape.record(y, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xs.data())
                .zip(ys.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn relu(self) -> Self {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = T::lit(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn tanh(self) -> Self {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn square(self) -> Self {
        self.unary(|x| x * x, |x, _| T::lit(2.0) * x)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(self) -> Self {
        self.unary(
            |x| x.max(T::zero()).sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::lit(0.5) / y
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Elementwise [`round_cubic`].
    pub fn round_cubic(self) -> Self {
        self.unary(round_cubic, |x, _| round_cubic_grad(x))
    }

    pub fn add_scalar(self, s: f64) -> Self {
        let s = T::lit(s);
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(self, s: f64) -> Self {
        let s = T::lit(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    fn binary(
        self,
        other: Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Self {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, op);
        let y = a.zip_map(&b, f);
        self.tape.record(y, &[self, other], move |g, needs| {
            let n = g.numel();
            let (mut ga, mut gb) = (
                Vec::with_capacity(if needs[0] { n } else { 0 }),
                Vec::with_capacity(if needs[1] { n } else { 0 }),
            );
            for ((&g, &x), &y) in g.data().iter().zip(a.data()).zip(b.data()) {
                let (da, db) = grads(g, x, y);
                if needs[0] {
                    ga.push(da);
                }
                if needs[1] {
                    gb.push(db);
                }
            }
            vec![
                needs[0].then(|| Tensor::new(g.shape(), ga)),
                needs[1].then(|| Tensor::new(g.shape(), gb)),
            ]
        })
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(self, other: Self) -> Self {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |g, a, b| (g / b, -g * a / (b * b)),
        )
    }
}

impl<'t, T: Real> Add for Var<'t, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl<'t, T: Real> Sub for Var<'t, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl<'t, T: Real> Mul for Var<'t, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

impl<'t, T: Real> Div for Var<'t, T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        Var::div(self, rhs)
    }
}

impl<'t, T: Real> Neg for Var<'t, T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.mul_scalar(-1.0)
    }
}
