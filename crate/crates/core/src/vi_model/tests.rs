use super::*;
use crate::dyngen::{generate_dataset, normalize_dataset, GenerateConfig, MgParams, System, SystemParams, Trajectory};
use crate::nn::{assign_flat, flatten, num_params};
use crate::rng::stream_rng;
use ndarray::{Array2, ArrayView2};
use rand_distr::StandardNormal;

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 77);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn normals(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 78);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

struct Tiny {
    model: ViModel,
    ys: Vec<Array2<f64>>,
    us: Vec<Array2<f64>>,
    eps: Array2<f64>,
}

impl Tiny {
    fn new() -> Self {
        let mut rng = stream_rng(21, 0);
        let encoder = GaussianRnn::init(2, 8, 1, &mut rng);
        let mut model = ViModel::init(encoder, 8, 2, 1.0, &mut rng);
        // Push the log-scale head away from the clamp so every path is live.
        model.decoder.head.log_sigma.b.fill(-0.3);
        // Random biases keep rectifier inputs away from the kink at zero, where
        // central differences are meaningless.
        for layer in &mut model.posterior.layers {
            layer.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        model.decoder.stack.input.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        model.decoder.head.hidden.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        let ys = (0..2).map(|k| random(11, 1, 100 + k)).collect();
        let us = (0..2).map(|k| random(11, 1, 200 + k)).collect();
        Tiny { model, ys, us, eps: normals(2 * 4, 2, 5) }
    }

    fn segs(&self) -> Vec<Segment<'_>> {
        self.ys.iter().zip(&self.us).map(|(y, u)| Segment::new(y.view(), u.view()).unwrap()).collect()
    }

    fn loss(&self, m: &ViModel, lambda: f64) -> f64 {
        vi_objective(m, &self.segs(), lambda, self.eps.view(), 4, None).unwrap().loss
    }
}

fn flat_pair(m: &ViModel) -> Vec<f64> {
    let mut v = flatten(&m.posterior);
    v.extend(flatten(&m.decoder));
    v
}

fn assign_pair(m: &mut ViModel, theta: &[f64]) {
    let n = num_params(&m.posterior);
    assign_flat(&mut m.posterior, &theta[..n]).unwrap();
    assign_flat(&mut m.decoder, &theta[n..]).unwrap();
}

#[test]
fn vi_gradient_matches_finite_differences() {
    let tiny = Tiny::new();
    let lambda = 0.7;
    let mut grad = ViGrad::zeros_for(&tiny.model);
    vi_objective(&tiny.model, &tiny.segs(), lambda, tiny.eps.view(), 4, Some(&mut grad)).unwrap();
    let mut g = flatten(&grad.posterior);
    g.extend(flatten(&grad.decoder));
    let code = tiny.model.encode(&tiny.segs(), 11).unwrap();
    let (_, trace) = tiny.model.posterior.trace(code.view()).unwrap();
    assert!(trace.pre.iter().flatten().all(|a| a.abs() > 1e-3));
    let theta = flat_pair(&tiny.model);
    let h = 1e-5;
    let mut m = tiny.model.clone();
    for k in 0..theta.len() {
        let mut t = theta.clone();
        t[k] += h;
        assign_pair(&mut m, &t);
        let up = tiny.loss(&m, lambda);
        t[k] -= 2.0 * h;
        assign_pair(&mut m, &t);
        let down = tiny.loss(&m, lambda);
        let fd = (up - down) / (2.0 * h);
        assert!((fd - g[k]).abs() <= (1e-4 * g[k].abs()).max(1e-8), "coordinate {k}: fd {fd} analytic {}", g[k]);
    }
}

#[test]
fn decoder_gradient_is_mean_of_independent_passes() {
    let tiny = Tiny::new();
    let segs = tiny.segs();
    let mut joint = ViGrad::zeros_for(&tiny.model);
    vi_objective(&tiny.model, &segs, 0.0, tiny.eps.view(), 4, Some(&mut joint)).unwrap();
    let mut sum = vec![0.0; num_params(&tiny.model.decoder)];
    for m in 0..4 {
        let rows: Vec<usize> = (0..2).map(|b| b * 4 + m).collect();
        let eps = tiny.eps.select(ndarray::Axis(0), &rows);
        let mut g = ViGrad::zeros_for(&tiny.model);
        vi_objective(&tiny.model, &segs, 0.0, eps.view(), 1, Some(&mut g)).unwrap();
        for (s, v) in sum.iter_mut().zip(flatten(&g.decoder)) {
            *s += v / 4.0;
        }
    }
    for (a, b) in flatten(&joint.decoder).iter().zip(&sum) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn kl_closed_form_examples() {
    let q = PosteriorGaussian { m_q: vec![0.0, 0.0], sigma_q: vec![1.3, 1.3] };
    assert!(kl_gaussian(&q, 1.3).abs() < 1e-15);
    let q = PosteriorGaussian { m_q: vec![1.0], sigma_q: vec![1.0] };
    assert!((kl_gaussian(&q, 1.0) - 0.5).abs() < 1e-15);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = stream_rng(31, 0);
    let n = 200_000;
    for _ in 0..5 {
        let dim = 3;
        let q = PosteriorGaussian {
            m_q: (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
            sigma_q: (0..dim).map(|_| rng.random_range(0.3..2.0)).collect(),
        };
        let sigma_z = 1.0;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut v = 0.0;
            for i in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                let z = q.m_q[i] + q.sigma_q[i] * e;
                // log q(z) - log p(z), constants cancel.
                v += -0.5 * e * e - q.sigma_q[i].ln() + 0.5 * z * z / (sigma_z * sigma_z) + sigma_z.ln();
            }
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - kl_gaussian(&q, sigma_z)).abs() < 3.0 * se + 1e-12);
    }
}

#[test]
fn reparam_limits() {
    let q = PosteriorGaussian { m_q: vec![0.5, -2.0], sigma_q: vec![0.0, 0.0] };
    let s = reparam_sample(&q, 5, &mut stream_rng(1, 0));
    assert!(s.z.iter().all(|z| z == &q.m_q));

    let q = PosteriorGaussian { m_q: vec![0.5, -2.0], sigma_q: vec![0.7, 1.5] };
    let n = 100_000;
    let s = reparam_sample(&q, n, &mut stream_rng(2, 0));
    for i in 0..2 {
        let mean = s.z.iter().map(|z| z[i]).sum::<f64>() / n as f64;
        assert!((mean - q.m_q[i]).abs() < 4.0 * q.sigma_q[i] / (n as f64).sqrt());
    }
    for (z, e) in s.z.iter().zip(&s.eps) {
        assert_eq!(z[1], q.m_q[1] + q.sigma_q[1] * e[1]);
    }
}

#[test]
fn reconstruction_with_exact_unit_predictions_is_zero() {
    // A decoder whose head is zero predicts N(0, 1); a window of zeros is then
    // reconstructed exactly with unit scale.
    let dec = GaussianRnn::zeros(3, 4, 1);
    let y = Array2::zeros((6, 1));
    let u = Array2::zeros((6, 1));
    let r = reconstruction_loss(&dec, Segment::new(y.view(), u.view()).unwrap(), &[vec![0.3], vec![-1.0]]).unwrap();
    assert_eq!(r.loss, 0.0);
}

#[test]
fn single_sample_reconstruction_is_one_decoder_pass() {
    let tiny = Tiny::new();
    let seg = tiny.segs()[0];
    let z = vec![vec![0.4, -0.2]];
    let r = reconstruction_loss(&tiny.model.decoder, seg, &z).unwrap();
    let per = recon_per_sample(&tiny.model.decoder, &[seg], ArrayView2::from_shape((1, 2), &z[0]).unwrap(), 1).unwrap();
    assert!((r.loss - per[0]).abs() < 1e-12);
}

#[test]
fn kl_only_gradient_vanishes_at_prior() {
    let tiny = Tiny::new();
    let mut m = tiny.model.clone();
    m.posterior.mean.w.fill(0.0);
    m.posterior.mean.b.fill(0.0);
    m.posterior.log_sigma.w.fill(0.0);
    m.posterior.log_sigma.b.fill(0.0);
    let code = m.encode(&tiny.segs(), 11).unwrap();
    let (q, trace) = m.posterior.trace(code.view()).unwrap();
    let mut g = m.posterior.zeros_like();
    let mut dm = Array2::zeros(q.mean.dim());
    let mut dl = Array2::zeros(q.mean.dim());
    for b in 0..2 {
        let (_, a, c) = kl_terms(q.mean.row(b), q.log_sigma.row(b), 1.0);
        dm.row_mut(b).assign(&a);
        dl.row_mut(b).assign(&c);
    }
    m.posterior.backward(&trace, dm.view(), dl.view(), &mut g);
    assert!(flatten(&g).iter().all(|&v| v == 0.0));
}

#[test]
fn reported_loss_decomposes() {
    let tiny = Tiny::new();
    let lambda = 2.5;
    let l = vi_objective(&tiny.model, &tiny.segs(), lambda, tiny.eps.view(), 4, None).unwrap();
    let q = tiny.model.posterior(&tiny.segs()).unwrap();
    let kl = (0..2).map(|b| kl_gaussian(&q.row(b), 1.0)).sum::<f64>() / 2.0;
    let mut z = Array2::zeros((8, 2));
    for r in 0..8 {
        for i in 0..2 {
            z[[r, i]] = q.mean[[r / 4, i]] + q.log_sigma[[r / 4, i]].exp() * tiny.eps[[r, i]];
        }
    }
    let per = recon_per_sample(&tiny.model.decoder, &tiny.segs(), z.view(), 4).unwrap();
    let recon = per.iter().sum::<f64>() / 8.0;
    assert!((l.loss - (lambda * kl + recon)).abs() < 1e-10);
    assert!((l.kl - kl).abs() < 1e-12);
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        latent_dim: 2,
        seq_len: 20,
        batch: 4,
        samples: 3,
        iterations: 60,
        val_every: 20,
        val_windows: 4,
        log_every: 10,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn small_mg() -> crate::dyngen::Dataset {
    let cfg = GenerateConfig { k: 6, t: 60, train_count: 4, seed: 9, ..GenerateConfig::mackey_glass() };
    generate_dataset(&cfg).unwrap()
}

#[test]
fn tiny_runs_are_reproducible_and_freeze_the_encoder() {
    let ds = small_mg();
    let cfg = tiny_config();
    let a = train_rnn(&ds, &cfg).unwrap();
    let b = train_rnn(&ds, &cfg).unwrap();
    assert_eq!(flatten(&a.model), flatten(&b.model));
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.last().unwrap().iter, 60);

    let v1 = train_vi(&ds, &a.model, &cfg).unwrap();
    let v2 = train_vi(&ds, &a.model, &cfg).unwrap();
    assert_eq!(v1.model, v2.model);
    assert_eq!(flatten(&v1.model.encoder), flatten(&a.model));
    let val_rows: Vec<_> = v1.log.iter().filter(|r| r.val_loss.is_some()).collect();
    assert_eq!(val_rows.len(), 3);
    assert!(v1.best_val_loss <= val_rows.iter().map(|r| r.val_loss.unwrap()).fold(f64::INFINITY, f64::min));
}

#[test]
fn zero_lambda_training_completes() {
    let ds = small_mg();
    let cfg = TrainConfig { lambda: 0.0, iterations: 20, ..tiny_config() };
    let enc = train_rnn(&ds, &TrainConfig { iterations: 20, ..tiny_config() }).unwrap();
    let out = train_vi(&ds, &enc.model, &cfg).unwrap();
    assert!(out.best_val_loss.is_finite());
}

#[test]
fn constant_series_is_learned() {
    let c = 0.8;
    let trajs: Vec<Trajectory> = (0..4)
        .map(|k| {
            // Two trajectories at each level so min-max normalisation is defined.
            let level = if k % 2 == 0 { c } else { 1.2 };
            Trajectory {
                y: Array2::from_elem((41, 1), level),
                u: Array2::zeros((41, 0)),
                phi: Array2::from_elem((41, 1), level),
                params: SystemParams::MackeyGlass(MgParams { alpha: 0.3, gamma: 0.1, tau: 17.0 }),
                dt_sample: 1.0,
            }
        })
        .collect();
    let ds = normalize_dataset(System::MackeyGlass, trajs, 4, 1, 0.0, 0.01, 100).unwrap();
    let cfg = TrainConfig {
        hidden: 8,
        seq_len: 20,
        batch: 8,
        iterations: 1500,
        xi_max: 1e-2,
        xi_min: 1e-3,
        val_every: 500,
        val_windows: 4,
        log_every: 500,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train_rnn(&ds, &cfg).unwrap();
    let y = &ds.normalized(0).y;
    let (pred, _) = out
        .model
        .predict_sequence(y.slice(ndarray::s![0..20, ..]), &out.model.initial_state(1))
        .unwrap();
    // Normalised level of the first trajectory is -0.5.
    for t in 5..20 {
        assert!((pred.mu[[t, 0]] + 0.5).abs() < 0.05, "step {t}: {}", pred.mu[[t, 0]]);
    }
    assert!(pred.log_sigma[[19, 0]] < -2.0);
}

#[test]
fn windows_respect_bounds() {
    let mut rng = stream_rng(1, 0);
    let w = sample_windows(&mut rng, &[3, 5], 50, 50, 100).unwrap();
    assert!(w.iter().all(|w| w.start == 0 && (w.traj == 3 || w.traj == 5)));
    assert!(matches!(sample_windows(&mut rng, &[0], 10, 11, 1), Err(Error::Range(_))));
}

