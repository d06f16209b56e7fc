use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mackey-Glass parameters: gain α, decay rate γ and delay τ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgParams {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
}

/// Forced Van der Pol parameters. `theta` and `u_ref` belong to the
/// Ornstein-Uhlenbeck forcing; `u_ref` is the stationary standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VdpParams {
    pub gamma: f64,
    pub alpha: f64,
    pub theta: f64,
    pub u_ref: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemParams {
    MackeyGlass(MgParams),
    Vdp(VdpParams),
}

impl SystemParams {
    /// Parameters that vary between trajectories and affect the observed
    /// dynamics, in a fixed order. Used for latent/parameter correlations.
    pub fn identifiable(&self) -> Vec<(&'static str, f64)> {
        match self {
            SystemParams::MackeyGlass(p) => {
                vec![("alpha", p.alpha), ("gamma", p.gamma), ("tau", p.tau)]
            }
            SystemParams::Vdp(p) => vec![("alpha", p.alpha), ("gamma", p.gamma)],
        }
    }
}

pub fn sample_mg_params<R: Rng + ?Sized>(rng: &mut R) -> MgParams {
    MgParams {
        alpha: rng.random_range(0.2..0.4),
        gamma: rng.random_range(0.05..0.1),
        tau: rng.random_range(20.0..40.0),
    }
}

pub fn sample_vdp_params<R: Rng + ?Sized>(rng: &mut R) -> VdpParams {
    VdpParams {
        gamma: rng.random_range(1.0..4.0),
        alpha: rng.random_range(0.25..1.0),
        theta: rng.random_range(0.25..1.0),
        u_ref: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn mg_draws_stay_in_range() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..1000 {
            let p = sample_mg_params(&mut rng);
            assert!((0.2..=0.4).contains(&p.alpha));
            assert!((0.05..=0.1).contains(&p.gamma));
            assert!((20.0..=40.0).contains(&p.tau));
        }
    }

    #[test]
    fn mg_alpha_mean_matches_uniform_law() {
        // sd of U(0.2,0.4) is 0.0577; SE at 1e4 draws is 5.8e-4, tolerance 0.005.
        let mut rng = stream_rng(3, 1);
        let n = 10_000;
        let mean = (0..n).map(|_| sample_mg_params(&mut rng).alpha).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn vdp_draws_stay_in_range() {
        let mut rng = stream_rng(5, 0);
        for _ in 0..1000 {
            let p = sample_vdp_params(&mut rng);
            assert!((1.0..=4.0).contains(&p.gamma));
            assert!((0.25..=1.0).contains(&p.alpha));
            assert!((0.25..=1.0).contains(&p.theta));
            assert_eq!(p.u_ref, 1.0);
        }
    }

    #[test]
    fn params_json_round_trip_picks_right_variant() {
        let mg = SystemParams::MackeyGlass(MgParams { alpha: 0.35, gamma: 0.07, tau: 33.72 });
        let vdp = SystemParams::Vdp(VdpParams { gamma: 1.77, alpha: 0.68, theta: 0.42, u_ref: 1.0 });
        for p in [mg, vdp] {
            let s = serde_json::to_string(&p).unwrap();
            let back: SystemParams = serde_json::from_str(&s).unwrap();
            assert_eq!(back, p);
        }
    }
}
