use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{join, relu, relu_backward, GruCell, GruTape, Linear, Parameters};
use crate::{Error, Result};

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Rectified input layer followed by two stacked gated cells of equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct GruStack {
    pub input: Linear,
    pub cell1: GruCell,
    pub cell2: GruCell,
}

/// Hidden state of both levels for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct StackState {
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
}

impl StackState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        StackState { h1: Array2::zeros((batch, hidden)), h2: Array2::zeros((batch, hidden)) }
    }

    pub fn batch(&self) -> usize {
        self.h1.nrows()
    }

    /// Both levels side by side, `B × 2N`.
    pub fn code(&self) -> Array2<f64> {
        concatenate![Axis(1), self.h1, self.h2]
    }
}

struct StackTrace {
    a_in: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    tapes: Option<(GruTape, GruTape)>,
}

impl GruStack {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruStack {
            input: Linear::zeros(input, hidden),
            cell1: GruCell::zeros(hidden, hidden),
            cell2: GruCell::zeros(hidden, hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruStack {
            input: Linear::init(input, hidden, rng),
            cell1: GruCell::init(hidden, hidden, rng),
            cell2: GruCell::init(hidden, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.cell1.hidden()
    }

    fn check(&self, xs: ArrayView2<f64>, state: &StackState) -> Result<()> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::shape("recurrent input", self.input_dim(), xs.ncols()));
        }
        if state.h1.ncols() != self.hidden() || state.h2.ncols() != self.hidden() {
            return Err(Error::shape("recurrent state", self.hidden(), state.h1.ncols()));
        }
        let batch = state.batch();
        if batch == 0 || xs.nrows() % batch != 0 || state.h2.nrows() != batch {
            return Err(Error::shape(
                "time-major rows",
                format!("a multiple of {batch}"),
                xs.nrows(),
            ));
        }
        Ok(())
    }

    fn trace(&self, xs: ArrayView2<f64>, state: &StackState, record: bool) -> StackTrace {
        let a_in = self.input.apply(xs);
        let psi = relu(&a_in);
        let mut t1 = record.then(GruTape::default);
        let mut t2 = record.then(GruTape::default);
        let h1 = self.cell1.sequence(psi.view(), state.h1.view(), t1.as_mut());
        let h2 = self.cell2.sequence(h1.view(), state.h2.view(), t2.as_mut());
        StackTrace { a_in, h1, h2, tapes: t1.zip(t2) }
    }

    /// Consume a time-major sequence and return the final state.
    pub fn run(&self, xs: ArrayView2<f64>, state: &StackState) -> Result<StackState> {
        self.check(xs, state)?;
        if xs.nrows() == 0 {
            return Ok(state.clone());
        }
        let tr = self.trace(xs, state, false);
        Ok(last_state(&tr, state.batch()))
    }

    /// Advance every row of the batch by one step.
    pub fn step(&self, x: ArrayView2<f64>, state: &mut StackState) -> Result<()> {
        if x.nrows() != state.batch() {
            return Err(Error::shape("step batch", state.batch(), x.nrows()));
        }
        *state = self.run(x, state)?;
        Ok(())
    }
}

fn last_state(tr: &StackTrace, batch: usize) -> StackState {
    let n = tr.h1.nrows();
    StackState {
        h1: tr.h1.slice(s![n - batch.., ..]).to_owned(),
        h2: tr.h2.slice(s![n - batch.., ..]).to_owned(),
    }
}

impl Parameters for GruStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.input.visit(&join(prefix, "input"), f);
        self.cell1.visit(&join(prefix, "gru1"), f);
        self.cell2.visit(&join(prefix, "gru2"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.input.visit_mut(f);
        self.cell1.visit_mut(f);
        self.cell2.visit_mut(f);
    }
}

/// Rectified hidden layer feeding separate mean and log-scale maps.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub hidden: Linear,
    pub mu: Linear,
    pub log_sigma: Linear,
}

impl GaussianHead {
    pub fn zeros(hidden: usize, output: usize) -> Self {
        GaussianHead {
            hidden: Linear::zeros(hidden, hidden),
            mu: Linear::zeros(hidden, output),
            log_sigma: Linear::zeros(hidden, output),
        }
    }

    pub fn init<R: Rng + ?Sized>(hidden: usize, output: usize, rng: &mut R) -> Self {
        GaussianHead {
            hidden: Linear::init(hidden, hidden, rng),
            mu: Linear::init(hidden, output, rng),
            log_sigma: Linear::init(hidden, output, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mu.out_dim()
    }
}

impl Parameters for GaussianHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.mu.visit(&join(prefix, "mu"), f);
        self.log_sigma.visit(&join(prefix, "log_sigma"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.hidden.visit_mut(f);
        self.mu.visit_mut(f);
        self.log_sigma.visit_mut(f);
    }
}

/// Predictive Gaussian per row: mean and clamped log standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
}

impl GaussianPrediction {
    pub fn sigma(&self) -> Array2<f64> {
        self.log_sigma.mapv(f64::exp)
    }
}

/// Predictions for every row of a time-major sequence.
pub type SequenceOutput = GaussianPrediction;

/// Everything the reverse pass needs from a recorded forward pass.
#[derive(Clone, Debug)]
pub struct RnnTape {
    batch: usize,
    xs: Array2<f64>,
    a_in: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    t1: GruTape,
    t2: GruTape,
    a_g: Array2<f64>,
    g: Array2<f64>,
    log_sigma_raw: Array2<f64>,
}

impl RnnTape {
    pub fn steps(&self) -> usize {
        if self.batch == 0 {
            0
        } else {
            self.xs.nrows() / self.batch
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Recurrent Gaussian predictor: stack plus head. Feeding the input at step
/// `t` yields the predictive distribution of the observation at `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianRnn {
    pub stack: GruStack,
    pub head: GaussianHead,
}

fn clamp_log_sigma(raw: &Array2<f64>) -> Array2<f64> {
    raw.mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
}

impl GaussianRnn {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        GaussianRnn { stack: GruStack::zeros(input, hidden), head: GaussianHead::zeros(hidden, output) }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let stack = GruStack::init(input, hidden, rng);
        let head = GaussianHead::init(hidden, output, rng);
        GaussianRnn { stack, head }
    }

    /// Zero parameters with the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        GaussianRnn::zeros(self.input_dim(), self.hidden(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.stack.hidden()
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn initial_state(&self, batch: usize) -> StackState {
        StackState::zeros(batch, self.hidden())
    }

    fn head_forward(&self, h2: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let a_g = self.head.hidden.apply(h2);
        let g = relu(&a_g);
        let mu = self.head.mu.apply(g.view());
        let raw = self.head.log_sigma.apply(g.view());
        (a_g, g, mu, raw)
    }

    /// One step for each row of `x`, updating `state` in place.
    pub fn step(&self, x: ArrayView2<f64>, state: &mut StackState) -> Result<GaussianPrediction> {
        self.stack.step(x, state)?;
        let (_, _, mu, raw) = self.head_forward(state.h2.view());
        Ok(GaussianPrediction { mu, log_sigma: clamp_log_sigma(&raw) })
    }

    /// Predictions for every step of a time-major sequence, without recording.
    pub fn predict_sequence(
        &self,
        xs: ArrayView2<f64>,
        state: &StackState,
    ) -> Result<(SequenceOutput, StackState)> {
        self.stack.check(xs, state)?;
        if xs.nrows() == 0 {
            return Err(Error::Usage("empty input sequence".into()));
        }
        let tr = self.stack.trace(xs, state, false);
        let (_, _, mu, raw) = self.head_forward(tr.h2.view());
        let last = last_state(&tr, state.batch());
        Ok((GaussianPrediction { mu, log_sigma: clamp_log_sigma(&raw) }, last))
    }

    /// Teacher-forced forward pass that records a tape for [`Self::backward`].
    pub fn forward_taped(
        &self,
        xs: ArrayView2<f64>,
        state: &StackState,
    ) -> Result<(SequenceOutput, RnnTape)> {
        self.stack.check(xs, state)?;
        let batch = state.batch();
        let tr = self.stack.trace(xs, state, true);
        let (a_g, g, mu, raw) = self.head_forward(tr.h2.view());
        let (t1, t2) = tr.tapes.expect("recorded");
        let out = GaussianPrediction { mu, log_sigma: clamp_log_sigma(&raw) };
        let tape = RnnTape {
            batch,
            xs: xs.to_owned(),
            a_in: tr.a_in,
            h1: tr.h1,
            h2: tr.h2,
            t1,
            t2,
            a_g,
            g,
            log_sigma_raw: raw,
        };
        Ok((out, tape))
    }

    /// Reverse pass. `d_mu` and `d_log_sigma` are adjoints of the returned
    /// (clamped) outputs at every row; parameter gradients are accumulated into
    /// `grad`. Returns the adjoints of the inputs and of the initial state.
    pub fn backward(
        &self,
        tape: &RnnTape,
        d_mu: ArrayView2<f64>,
        d_log_sigma: ArrayView2<f64>,
        grad: &mut GaussianRnn,
    ) -> Result<(Array2<f64>, StackState)> {
        if tape.steps() == 0 {
            return Err(Error::Usage("reverse pass over an empty tape".into()));
        }
        let want = (tape.xs.nrows(), self.output_dim());
        if d_mu.dim() != want || d_log_sigma.dim() != want {
            return Err(Error::shape("output adjoints", format!("{want:?}"), format!("{:?}", d_mu.dim())));
        }
        let mut d_raw = d_log_sigma.to_owned();
        Zip::from(&mut d_raw).and(&tape.log_sigma_raw).for_each(|d, &v| {
            if !(LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&v) {
                *d = 0.0;
            }
        });
        let mut dg = self.head.mu.backward(tape.g.view(), d_mu, &mut grad.head.mu);
        dg += &self.head.log_sigma.backward(tape.g.view(), d_raw.view(), &mut grad.head.log_sigma);
        let da_g = relu_backward(tape.a_g.view(), dg.view());
        let dh2 = self.head.hidden.backward(tape.h2.view(), da_g.view(), &mut grad.head.hidden);
        let (dh1, dh2_0) =
            self.stack.cell2.backward_sequence(tape.h1.view(), &tape.t2, dh2.view(), &mut grad.stack.cell2);
        let psi = relu(&tape.a_in);
        let (dpsi, dh1_0) =
            self.stack.cell1.backward_sequence(psi.view(), &tape.t1, dh1.view(), &mut grad.stack.cell1);
        let da_in = relu_backward(tape.a_in.view(), dpsi.view());
        let dxs = self.stack.input.backward(tape.xs.view(), da_in.view(), &mut grad.stack.input);
        Ok((dxs, StackState { h1: dh1_0, h2: dh2_0 }))
    }
}

impl Parameters for GaussianRnn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.stack.visit(&join(prefix, "stack"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.stack.visit_mut(f);
        self.head.visit_mut(f);
    }
}
