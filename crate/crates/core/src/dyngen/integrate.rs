use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{MgParams, VdpParams};
use crate::{Error, Result};

/// Fine integration grid. `burn_in_steps` are integrated and discarded; the
/// returned window has `n_steps + 1` points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub dt: f64,
    pub n_steps: usize,
    pub burn_in_steps: usize,
}

impl Grid {
    fn total(&self) -> usize {
        self.burn_in_steps + self.n_steps
    }

    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Range(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Third-order Adams-Bashforth combination of the last three derivatives,
/// newest first.
#[inline]
fn ab3(x: f64, dt: f64, f: [f64; 3]) -> f64 {
    x + dt / 12.0 * (23.0 * f[0] - 16.0 * f[1] + 5.0 * f[2])
}

/// Integrate `dφ/dt = α φ(t-τ) / (1 + φ(t-τ)^10) - γ φ(t)` from `history` on
/// `[-τ, 0]`.
///
/// Delayed values inside the integrated range are linearly interpolated
/// between stored grid points. The first two steps use classical RK4 so that
/// the startup error does not spoil third-order convergence; AB3 takes over
/// once three derivatives are available.
pub fn integrate_mackey_glass(
    params: &MgParams,
    grid: &Grid,
    history: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    grid.check()?;
    let dt = grid.dt;
    if params.tau / dt < 1.0 {
        return Err(Error::Range(format!(
            "delay {} shorter than one step {}",
            params.tau, dt
        )));
    }
    let total = grid.total();
    let mut phi = Vec::with_capacity(total + 1);
    phi.push(history(0.0));

    let delayed = |phi: &[f64], s: f64| -> f64 {
        if s <= 0.0 {
            return history(s);
        }
        let pos = s / dt;
        let i = pos.floor() as usize;
        if i + 1 >= phi.len() {
            return phi[phi.len() - 1];
        }
        let frac = pos - i as f64;
        phi[i] * (1.0 - frac) + phi[i + 1] * frac
    };
    let rhs = |x: f64, xd: f64| params.alpha * xd / (1.0 + xd.powi(10)) - params.gamma * x;

    let mut f = [0.0; 3];
    for n in 0..total {
        let t = n as f64 * dt;
        let x = phi[n];
        let f_n = rhs(x, delayed(&phi, t - params.tau));
        f = [f_n, f[0], f[1]];
        let next = if n < 2 {
            let half = t + 0.5 * dt - params.tau;
            let k1 = f_n;
            let k2 = rhs(x + 0.5 * dt * k1, delayed(&phi, half));
            let k3 = rhs(x + 0.5 * dt * k2, delayed(&phi, half));
            let k4 = rhs(x + dt * k3, delayed(&phi, t + dt - params.tau));
            x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        } else {
            ab3(x, dt, f)
        };
        if !next.is_finite() {
            return Err(Error::IntegrationDiverged { step: n + 1 });
        }
        phi.push(next);
    }
    Ok(phi.split_off(grid.burn_in_steps))
}

/// Exact discretisation of `du = -θ u dt + u_ref √(2θ) dW`, started from the
/// stationary law. Returns `n + 1` values.
pub fn ou_path<R: Rng + ?Sized>(theta: f64, u_ref: f64, dt: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let decay = (-theta * dt).exp();
    let kick = u_ref * (1.0 - (-2.0 * theta * dt).exp()).sqrt();
    let mut u = Vec::with_capacity(n + 1);
    let mut x = u_ref * rng.sample::<f64, _>(StandardNormal);
    u.push(x);
    for _ in 0..n {
        let xi: f64 = StandardNormal.sample(rng);
        x = x * decay + kick * xi;
        u.push(x);
    }
    u
}

/// Fine-grid Van der Pol trajectory after burn-in.
#[derive(Clone, Debug)]
pub struct VdpPath {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub forcing: Vec<f64>,
}

/// Integrate `φ'' - γ(1 - φ²)φ' + φ + α u = 0` with OU forcing `u`.
///
/// The forcing is generated exactly and held constant over each fine step;
/// the oscillator itself is advanced by AB3 (two RK4 startup steps).
pub fn integrate_vdp_ou<R: Rng + ?Sized>(
    params: &VdpParams,
    grid: &Grid,
    initial: [f64; 2],
    rng: &mut R,
) -> Result<VdpPath> {
    grid.check()?;
    let dt = grid.dt;
    let total = grid.total();
    let u = ou_path(params.theta, params.u_ref, dt, total, rng);

    let rhs = |s: [f64; 2], uk: f64| -> [f64; 2] {
        let [x, v] = s;
        [v, params.gamma * (1.0 - x * x) * v - x - params.alpha * uk]
    };
    let axpy = |s: [f64; 2], a: f64, k: [f64; 2]| [s[0] + a * k[0], s[1] + a * k[1]];

    let mut pos = Vec::with_capacity(total + 1);
    let mut vel = Vec::with_capacity(total + 1);
    let mut s = initial;
    pos.push(s[0]);
    vel.push(s[1]);
    let mut f = [[0.0; 2]; 3];
    for n in 0..total {
        let f_n = rhs(s, u[n]);
        f = [f_n, f[0], f[1]];
        s = if n < 2 {
            let k1 = f_n;
            let k2 = rhs(axpy(s, 0.5 * dt, k1), u[n]);
            let k3 = rhs(axpy(s, 0.5 * dt, k2), u[n]);
            let k4 = rhs(axpy(s, dt, k3), u[n]);
            [
                s[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                s[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            ]
        } else {
            [
                ab3(s[0], dt, [f[0][0], f[1][0], f[2][0]]),
                ab3(s[1], dt, [f[0][1], f[1][1], f[2][1]]),
            ]
        };
        if !(s[0].is_finite() && s[1].is_finite()) {
            return Err(Error::IntegrationDiverged { step: n + 1 });
        }
        pos.push(s[0]);
        vel.push(s[1]);
    }
    let b = grid.burn_in_steps;
    Ok(VdpPath {
        position: pos.split_off(b),
        velocity: vel.split_off(b),
        forcing: u[b..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn decay_error(dt: f64) -> f64 {
        // α = 0 reduces the delay equation to dφ/dt = -γφ with φ(0) = 1.
        let p = MgParams { alpha: 0.0, gamma: 0.07, tau: 20.0 };
        let n = (10.0 / dt).round() as usize;
        let grid = Grid { dt, n_steps: n, burn_in_steps: 0 };
        let phi = integrate_mackey_glass(&p, &grid, |_| 1.0).unwrap();
        phi.iter()
            .enumerate()
            .map(|(i, v)| (v - (-0.07 * i as f64 * dt).exp()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn pure_decay_matches_exponential() {
        let p = MgParams { alpha: 0.0, gamma: 0.07, tau: 20.0 };
        let grid = Grid { dt: 0.01, n_steps: 1000, burn_in_steps: 0 };
        let phi = integrate_mackey_glass(&p, &grid, |_| 1.0).unwrap();
        assert_eq!(phi.len(), 1001);
        assert!((phi[1000] - 0.496_585_303_791_409_5).abs() < 1e-5);
    }

    #[test]
    fn ab3_is_third_order() {
        let e = [decay_error(0.02), decay_error(0.01), decay_error(0.005)];
        let r1 = e[0] / e[1];
        let r2 = e[1] / e[2];
        assert!((6.0..=10.0).contains(&r2), "ratio {r2}");
        let order = ((r1 * r2).ln() / 2.0) / 2f64.ln();
        assert!(order >= 2.7, "order {order}");
    }

    #[test]
    fn equilibrium_history_stays_put() {
        let p = MgParams { alpha: 0.3, gamma: 0.07, tau: 25.0 };
        let star = (p.alpha / p.gamma - 1.0).powf(0.1);
        let grid = Grid { dt: 0.01, n_steps: 100, burn_in_steps: 0 };
        let phi = integrate_mackey_glass(&p, &grid, |_| star).unwrap();
        for v in phi {
            assert!((v - star).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_short_delay() {
        let p = MgParams { alpha: 0.3, gamma: 0.07, tau: 0.001 };
        let grid = Grid { dt: 0.01, n_steps: 10, burn_in_steps: 0 };
        assert!(matches!(integrate_mackey_glass(&p, &grid, |_| 1.0), Err(Error::Range(_))));
    }

    #[test]
    fn overflow_reports_step() {
        let p = MgParams { alpha: 0.3, gamma: -1e3, tau: 20.0 };
        let grid = Grid { dt: 0.1, n_steps: 100_000, burn_in_steps: 0 };
        match integrate_mackey_glass(&p, &grid, |_| 1.0) {
            Err(Error::IntegrationDiverged { step }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn unforced_undamped_oscillator_conserves_energy() {
        let p = VdpParams { gamma: 0.0, alpha: 0.0, theta: 0.5, u_ref: 1.0 };
        let dt = 0.001;
        let n = (10.0 * 2.0 * std::f64::consts::PI / dt).round() as usize;
        let grid = Grid { dt, n_steps: n, burn_in_steps: 0 };
        let path = integrate_vdp_ou(&p, &grid, [1.0, 0.0], &mut stream_rng(1, 0)).unwrap();
        let drift = path
            .position
            .iter()
            .zip(&path.velocity)
            .map(|(x, v)| (x * x + v * v - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-3, "drift {drift}");
    }

    #[test]
    fn ou_fast_reversion_autocorrelation() {
        let (theta, dt) = (100.0, 0.001);
        let u = ou_path(theta, 1.0, dt, 200_000, &mut stream_rng(2, 0));
        let n = u.len() as f64;
        let mean = u.iter().sum::<f64>() / n;
        let var = u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let cov = u.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0);
        let rho = cov / var;
        assert!((rho - (-theta * dt).exp()).abs() < 0.02, "rho {rho}");
    }

    #[test]
    fn ou_stationary_variance() {
        // Steps of half a relaxation time keep successive values nearly
        // independent, so a million steps pin the variance to well under 2%.
        let u = ou_path(1.0, 1.0, 0.5, 1_000_000, &mut stream_rng(3, 0));
        let n = u.len() as f64;
        let mean = u.iter().sum::<f64>() / n;
        let var = u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }
}
