use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{join, slice_of, slice_of_mut, uniform_init, Parameters};
use crate::{Error, Result};

/// Affine map `x ↦ W x + b` with `W` stored `(out × in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear { w: uniform_init(output, input, input, rng), b: Array1::zeros(output) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Batched forward over rows of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape("linear input", self.in_dim(), x.ncols()));
        }
        Ok(self.apply(x))
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    pub(crate) fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.out_dim()));
        out += &self.b;
        general_mat_mul(1.0, &x, &self.w.t(), 1.0, &mut out);
        out
    }

    /// Accumulate parameter gradients into `grad` and return `∂/∂x`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.w)
    }

    /// Parameter gradients only.
    pub(crate) fn accumulate(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(join(prefix, "w"), self.w.shape(), slice_of(&self.w));
        f(join(prefix, "b"), self.b.shape(), slice_of(&self.b));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.w));
        f(slice_of_mut(&mut self.b));
    }
}

pub fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

/// Gate `dy` by the rectifier's derivative at pre-activation `a` (0 at 0).
pub fn relu_backward(a: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(&a).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::array;

    #[test]
    fn identity_passes_through() {
        let l = Linear { w: Array2::eye(2), b: Array1::zeros(2) };
        assert_eq!(l.forward_vec(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn bias_only() {
        let l = Linear { w: Array2::zeros((1, 4)), b: array![3.0] };
        assert_eq!(l.forward_vec(&[5.0, -1.0, 2.0, 7.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let l = Linear::zeros(3, 2);
        assert!(matches!(l.forward_vec(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = stream_rng(4, 0);
        let mut l = Linear::init(3, 2, &mut rng);
        l.b = array![0.3, -0.2];
        let x = array![[0.5, -1.0, 2.0]];
        // Scalar probe: s = c · (W x + b).
        let c = array![[0.7, -1.3]];
        let mut grad = Linear::zeros(3, 2);
        let dx = l.backward(x.view(), c.view(), &mut grad);
        let s = |l: &Linear, x: &Array2<f64>| (l.apply(x.view()) * &c).sum();
        let h = 1e-5;
        for j in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[[0, j]] += h;
            xm[[0, j]] -= h;
            let fd = (s(&l, &xp) - s(&l, &xm)) / (2.0 * h);
            assert!((fd - dx[[0, j]]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        for i in 0..2 {
            for j in 0..3 {
                let (mut lp, mut lm) = (l.clone(), l.clone());
                lp.w[[i, j]] += h;
                lm.w[[i, j]] -= h;
                let fd = (s(&lp, &x) - s(&lm, &x)) / (2.0 * h);
                assert!((fd - grad.w[[i, j]]).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
        assert_eq!(grad.b, array![0.7, -1.3]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let a = array![[-1.0, 0.0, 2.0]];
        let d = relu_backward(a.view(), array![[1.0, 1.0, 1.0]].view());
        assert_eq!(d, array![[0.0, 0.0, 1.0]]);
    }
}
