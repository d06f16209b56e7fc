use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{join, slice_of, slice_of_mut, uniform_init, Parameters};
use crate::{Error, Result};

/// Gated recurrent cell.
///
/// Gate weights are stored fused: `w_x` stacks the input-side matrices of the
/// update, reset and candidate gates (`[p; q; r]`, `3N × in`), `w_h` stacks the
/// hidden-side matrices of the update and reset gates (`[p; q]`, `2N × N`),
/// `w_rh` is the candidate's hidden-side matrix, applied to `q ⊙ h`, and `b`
/// holds the three biases in `[p; q; r]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub w_rh: Array2<f64>,
    pub b: Array1<f64>,
}

/// Per-step activations of a cell over a time-major sequence.
#[derive(Clone, Debug, Default)]
pub struct GruTape {
    pub batch: usize,
    pub h_prev: Array2<f64>,
    pub p: Array2<f64>,
    pub q: Array2<f64>,
    pub r: Array2<f64>,
    pub qh: Array2<f64>,
}

struct Step {
    h: Array2<f64>,
    p: Array2<f64>,
    q: Array2<f64>,
    r: Array2<f64>,
    qh: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCell {
            w_x: Array2::zeros((3 * hidden, input)),
            w_h: Array2::zeros((2 * hidden, hidden)),
            w_rh: Array2::zeros((hidden, hidden)),
            b: Array1::zeros(3 * hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruCell {
            w_x: uniform_init(3 * hidden, input, input, rng),
            w_h: uniform_init(2 * hidden, hidden, hidden, rng),
            w_rh: uniform_init(hidden, hidden, hidden, rng),
            b: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_rh.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }

    /// One update for a batch of rows.
    pub fn forward(&self, x: ArrayView2<f64>, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("gru input", self.input_dim(), x.ncols()));
        }
        if h.ncols() != self.hidden() {
            return Err(Error::shape("gru state", self.hidden(), h.ncols()));
        }
        if h.nrows() != x.nrows() {
            return Err(Error::shape("gru batch", x.nrows(), h.nrows()));
        }
        Ok(self.step(self.input_side(x).view(), h).h)
    }

    pub fn forward_vec(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let h = ArrayView2::from_shape((1, h.len()), h).expect("row view");
        Ok(self.forward(x, h)?.into_raw_vec_and_offset().0)
    }

    fn input_side(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut ax = Array2::zeros((x.nrows(), self.w_x.nrows()));
        ax += &self.b;
        general_mat_mul(1.0, &x, &self.w_x.t(), 1.0, &mut ax);
        ax
    }

    fn step(&self, ax: ArrayView2<f64>, h: ArrayView2<f64>) -> Step {
        let n = self.hidden();
        let rows = h.nrows();
        let ah = h.dot(&self.w_h.t());
        let mut p = Array2::zeros((rows, n));
        let mut q = Array2::zeros((rows, n));
        let mut qh = Array2::zeros((rows, n));
        for i in 0..rows {
            for j in 0..n {
                let pv = sigmoid(ax[[i, j]] + ah[[i, j]]);
                let qv = sigmoid(ax[[i, n + j]] + ah[[i, n + j]]);
                p[[i, j]] = pv;
                q[[i, j]] = qv;
                qh[[i, j]] = qv * h[[i, j]];
            }
        }
        let ar = qh.dot(&self.w_rh.t());
        let mut r = Array2::zeros((rows, n));
        let mut hn = Array2::zeros((rows, n));
        for i in 0..rows {
            for j in 0..n {
                let rv = (ax[[i, 2 * n + j]] + ar[[i, j]]).tanh();
                let pv = p[[i, j]];
                r[[i, j]] = rv;
                hn[[i, j]] = (1.0 - pv) * h[[i, j]] + pv * rv;
            }
        }
        Step { h: hn, p, q, r, qh }
    }

    /// Run over a time-major sequence of `T·B` rows starting from `h0` (`B × N`).
    /// Returns the `T·B × N` hidden states; activations are recorded when a
    /// tape is supplied.
    pub(crate) fn sequence(
        &self,
        xs: ArrayView2<f64>,
        h0: ArrayView2<f64>,
        mut tape: Option<&mut GruTape>,
    ) -> Array2<f64> {
        let batch = h0.nrows();
        let n = self.hidden();
        let steps = xs.nrows() / batch;
        let ax = self.input_side(xs);
        let mut out = Array2::zeros((xs.nrows(), n));
        if let Some(tape) = tape.as_deref_mut() {
            tape.batch = batch;
            tape.h_prev = Array2::zeros((xs.nrows(), n));
            tape.p = Array2::zeros((xs.nrows(), n));
            tape.q = Array2::zeros((xs.nrows(), n));
            tape.r = Array2::zeros((xs.nrows(), n));
            tape.qh = Array2::zeros((xs.nrows(), n));
        }
        let mut h = h0.to_owned();
        for t in 0..steps {
            let rows = s![t * batch..(t + 1) * batch, ..];
            let st = self.step(ax.slice(rows), h.view());
            if let Some(tape) = tape.as_deref_mut() {
                tape.h_prev.slice_mut(rows).assign(&h);
                tape.p.slice_mut(rows).assign(&st.p);
                tape.q.slice_mut(rows).assign(&st.q);
                tape.r.slice_mut(rows).assign(&st.r);
                tape.qh.slice_mut(rows).assign(&st.qh);
            }
            out.slice_mut(rows).assign(&st.h);
            h = st.h;
        }
        out
    }

    /// Reverse pass over a recorded sequence. `d_out` is the adjoint of every
    /// hidden state returned by [`GruCell::sequence`]. Returns the input
    /// adjoints (`T·B × in`) and the adjoint of the initial state.
    pub(crate) fn backward_sequence(
        &self,
        xs: ArrayView2<f64>,
        tape: &GruTape,
        d_out: ArrayView2<f64>,
        grad: &mut GruCell,
    ) -> (Array2<f64>, Array2<f64>) {
        let n = self.hidden();
        let batch = tape.batch;
        let total = xs.nrows();
        let steps = total / batch;
        let mut dax = Array2::<f64>::zeros((total, 3 * n));
        let mut carry = Array2::<f64>::zeros((batch, n));
        let mut direct = Array2::<f64>::zeros((batch, n));
        for t in (0..steps).rev() {
            let base = t * batch;
            for i in 0..batch {
                let row = base + i;
                for j in 0..n {
                    let dh = d_out[[row, j]] + carry[[i, j]];
                    let p = tape.p[[row, j]];
                    let r = tape.r[[row, j]];
                    let hp = tape.h_prev[[row, j]];
                    let dp = dh * (r - hp);
                    let dr = dh * p;
                    direct[[i, j]] = dh * (1.0 - p);
                    dax[[row, 2 * n + j]] = dr * (1.0 - r * r);
                    dax[[row, j]] = dp * p * (1.0 - p);
                }
            }
            let rows = s![base..base + batch, 2 * n..3 * n];
            let dqh = dax.slice(rows).dot(&self.w_rh);
            for i in 0..batch {
                let row = base + i;
                for j in 0..n {
                    let q = tape.q[[row, j]];
                    let hp = tape.h_prev[[row, j]];
                    let dq = dqh[[i, j]] * hp;
                    carry[[i, j]] = direct[[i, j]] + dqh[[i, j]] * q;
                    dax[[row, n + j]] = dq * q * (1.0 - q);
                }
            }
            let gates = dax.slice(s![base..base + batch, 0..2 * n]);
            general_mat_mul(1.0, &gates, &self.w_h, 1.0, &mut carry);
        }
        general_mat_mul(1.0, &dax.t(), &xs, 1.0, &mut grad.w_x);
        grad.b += &dax.sum_axis(Axis(0));
        general_mat_mul(1.0, &dax.slice(s![.., 0..2 * n]).t(), &tape.h_prev, 1.0, &mut grad.w_h);
        general_mat_mul(1.0, &dax.slice(s![.., 2 * n..]).t(), &tape.qh, 1.0, &mut grad.w_rh);
        let dxs = dax.dot(&self.w_x);
        (dxs, carry)
    }
}

impl Parameters for GruCell {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(join(prefix, "w_x"), self.w_x.shape(), slice_of(&self.w_x));
        f(join(prefix, "w_h"), self.w_h.shape(), slice_of(&self.w_h));
        f(join(prefix, "w_rh"), self.w_rh.shape(), slice_of(&self.w_rh));
        f(join(prefix, "b"), self.b.shape(), slice_of(&self.b));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.w_x));
        f(slice_of_mut(&mut self.w_h));
        f(slice_of_mut(&mut self.w_rh));
        f(slice_of_mut(&mut self.b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{assign_flat, flatten};
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn zero_cell_halves_state() {
        let cell = GruCell::zeros(3, 1);
        let h = cell.forward_vec(&[0.7, -2.0, 5.0], &[0.4]).unwrap();
        assert_eq!(h, vec![0.2]);
    }

    #[test]
    fn zero_state_is_fixed_point_of_zero_cell() {
        let cell = GruCell::zeros(2, 4);
        assert_eq!(cell.forward_vec(&[1.0, 1.0], &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn mismatched_state_is_shape_error() {
        let cell = GruCell::zeros(2, 4);
        assert!(matches!(cell.forward_vec(&[1.0, 1.0], &[0.0; 3]), Err(Error::Shape { .. })));
    }

    /// Scalar cell written out by hand.
    fn scalar_cell(c: &GruCell, x: f64, h: f64) -> f64 {
        let p = sigmoid(c.w_x[[0, 0]] * x + c.w_h[[0, 0]] * h + c.b[0]);
        let q = sigmoid(c.w_x[[1, 0]] * x + c.w_h[[1, 0]] * h + c.b[1]);
        let r = (c.w_x[[2, 0]] * x + c.w_rh[[0, 0]] * q * h + c.b[2]).tanh();
        (1.0 - p) * h + p * r
    }

    #[test]
    fn single_step_gradient_matches_closed_form() {
        let mut rng = stream_rng(11, 0);
        let mut cell = GruCell::init(1, 1, &mut rng);
        cell.b = ndarray::array![0.1, -0.3, 0.2];
        let (x, h) = (0.8, -0.35);
        let xs = ndarray::array![[x]];
        let h0 = ndarray::array![[h]];
        let mut tape = GruTape::default();
        cell.sequence(xs.view(), h0.view(), Some(&mut tape));
        let mut grad = GruCell::zeros(1, 1);
        let (dx, dh0) = cell.backward_sequence(xs.view(), &tape, ndarray::array![[1.0]].view(), &mut grad);

        // Symbolic derivatives of the scalar cell.
        let (wpx, wqx, wrx) = (cell.w_x[[0, 0]], cell.w_x[[1, 0]], cell.w_x[[2, 0]]);
        let (wph, wqh, wrh) = (cell.w_h[[0, 0]], cell.w_h[[1, 0]], cell.w_rh[[0, 0]]);
        let p = sigmoid(wpx * x + wph * h + cell.b[0]);
        let q = sigmoid(wqx * x + wqh * h + cell.b[1]);
        let r = (wrx * x + wrh * q * h + cell.b[2]).tanh();
        let dap = (r - h) * p * (1.0 - p);
        let dar = p * (1.0 - r * r);
        let daq = dar * wrh * h * q * (1.0 - q);
        let want_dx = dap * wpx + daq * wqx + dar * wrx;
        let want_dh = (1.0 - p) + dap * wph + daq * wqh + dar * wrh * q;
        assert!((dx[[0, 0]] - want_dx).abs() < 1e-10);
        assert!((dh0[[0, 0]] - want_dh).abs() < 1e-10);
        assert!((grad.w_x[[0, 0]] - dap * x).abs() < 1e-10);
        assert!((grad.w_x[[1, 0]] - daq * x).abs() < 1e-10);
        assert!((grad.w_x[[2, 0]] - dar * x).abs() < 1e-10);
        assert!((grad.w_h[[0, 0]] - dap * h).abs() < 1e-10);
        assert!((grad.w_h[[1, 0]] - daq * h).abs() < 1e-10);
        assert!((grad.w_rh[[0, 0]] - dar * q * h).abs() < 1e-10);
        assert!((scalar_cell(&cell, x, h) - tape_out(&cell, x, h)).abs() < 1e-15);
    }

    fn tape_out(c: &GruCell, x: f64, h: f64) -> f64 {
        c.forward_vec(&[x], &[h]).unwrap()[0]
    }

    #[test]
    fn sequence_gradient_matches_finite_differences() {
        let mut rng = stream_rng(12, 0);
        let (input, hidden, batch, steps) = (3, 4, 2, 5);
        let cell = GruCell::init(input, hidden, &mut rng);
        let xs = Array2::from_shape_simple_fn((steps * batch, input), || rng.random_range(-1.0..1.0));
        let h0 = Array2::from_shape_simple_fn((batch, hidden), || rng.random_range(-0.5..0.5));
        let probe = Array2::from_shape_simple_fn((steps * batch, hidden), || rng.random_range(-1.0..1.0));
        let loss = |c: &GruCell, xs: &Array2<f64>| (c.sequence(xs.view(), h0.view(), None) * &probe).sum();

        let mut tape = GruTape::default();
        cell.sequence(xs.view(), h0.view(), Some(&mut tape));
        let mut grad = GruCell::zeros(input, hidden);
        let (dxs, _) = cell.backward_sequence(xs.view(), &tape, probe.view(), &mut grad);

        let theta = flatten(&cell);
        let g = flatten(&grad);
        let eps = 1e-5;
        for k in 0..theta.len() {
            let mut c = cell.clone();
            let mut t = theta.clone();
            t[k] += eps;
            assign_flat(&mut c, &t).unwrap();
            let up = loss(&c, &xs);
            t[k] -= 2.0 * eps;
            assign_flat(&mut c, &t).unwrap();
            let down = loss(&c, &xs);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - g[k]).abs() <= (1e-4 * g[k].abs()).max(1e-8), "param {k}: {fd} vs {}", g[k]);
        }
        for k in 0..xs.len() {
            let (i, j) = (k / input, k % input);
            let mut xp = xs.clone();
            xp[[i, j]] += eps;
            let mut xm = xs.clone();
            xm[[i, j]] -= eps;
            let fd = (loss(&cell, &xp) - loss(&cell, &xm)) / (2.0 * eps);
            assert!((fd - dxs[[i, j]]).abs() <= (1e-4 * fd.abs()).max(1e-8));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn state_stays_in_unit_box(seed in any::<u64>(), scale in 0.1f64..5.0) {
            let mut rng = stream_rng(seed, 0);
            let mut cell = GruCell::init(2, 3, &mut rng);
            cell.w_x *= scale;
            cell.w_h *= scale;
            cell.w_rh *= scale;
            cell.b.mapv_inplace(|_| rng.random_range(-scale..scale));
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-10.0..10.0)).collect();
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let hn = cell.forward_vec(&x, &h).unwrap();
            for v in hn {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
