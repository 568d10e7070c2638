use crate::{Real, Tensor, Var};

impl<'t, T: Real> Var<'t, T> {
    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let (m, k) = match a.shape() {
            [m, k] => (*m, *k),
            s => panic!("matmul lhs must be rank 2, got {s:?}"),
        };
        let n = match b.shape() {
            [kb, n] if *kb == k => *n,
            s => panic!("matmul rhs shape {s:?} incompatible with lhs ({m}, {k})"),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), (a.data(), k, 1), (b.data(), n, 1), T::zero(), (&mut out, n, 1));
        self.tape
            .record(Tensor::new(vec![m, n], out), &[self, other], move |g, needs| {
                let gd = g.data();
                let da = needs[0].then(|| {
                    // dA = dC (m x n) * B^T (n x k)
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), (gd, n, 1), (b.data(), 1, n), T::zero(), (&mut d, k, 1));
                    Tensor::new(vec![m, k], d)
                });
                let db = needs[1].then(|| {
                    // dB = A^T (k x m) * dC (m x n)
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), (a.data(), 1, k), (gd, n, 1), T::zero(), (&mut d, n, 1));
                    Tensor::new(vec![k, n], d)
                });
                vec![da, db]
            })
    }
}
