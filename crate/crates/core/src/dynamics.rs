//! Plant models and the disturbance generator.

use std::f64::consts::FRAC_PI_6;

use nalgebra::{DMatrix, Matrix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default coupling gain of the omnidirectional robot.
pub const DEFAULT_COUPLING_GAIN: f64 = 0.1;
/// Default singularity guard of the coupling term.
pub const DEFAULT_COUPLING_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AgentDynamics {
    /// Three-wheeled omnidirectional robot with state `[x, y, θ]`:
    /// `ẋ = −f(x) + A(θ)(Bᵀ)⁻¹ R u + w`.
    Omnirobot {
        wheel_radius: f64,
        body_radius: f64,
        #[serde(default = "default_gain")]
        coupling_gain: f64,
        #[serde(default = "default_eps")]
        coupling_eps: f64,
    },
    /// `ẋ = u + w`.
    SingleIntegrator { dim: usize },
    /// `ẋ = F x + G u + w` with constant matrices (rows listed outer).
    CustomAffine { drift: Vec<Vec<f64>>, input: Vec<Vec<f64>> },
}

fn default_gain() -> f64 {
    DEFAULT_COUPLING_GAIN
}

fn default_eps() -> f64 {
    DEFAULT_COUPLING_EPS
}

/// Wheel geometry matrix `B` for body radius `l`.
pub fn wheel_matrix(l: f64) -> Matrix3<f64> {
    let (c, s) = (FRAC_PI_6.cos(), FRAC_PI_6.sin());
    Matrix3::new(0.0, c, -c, -1.0, s, s, l, l, l)
}

fn rotation(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

impl AgentDynamics {
    pub fn state_dim(&self) -> usize {
        match self {
            AgentDynamics::Omnirobot { .. } => 3,
            AgentDynamics::SingleIntegrator { dim } => *dim,
            AgentDynamics::CustomAffine { drift, .. } => drift.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            AgentDynamics::Omnirobot { .. } => 3,
            AgentDynamics::SingleIntegrator { dim } => *dim,
            AgentDynamics::CustomAffine { input, .. } => input.first().map_or(0, Vec::len),
        }
    }

    /// Parameter checks, including positive definiteness of `g gᵀ`.
    pub fn validate(&self) -> Result<()> {
        match self {
            AgentDynamics::Omnirobot {
                wheel_radius,
                body_radius,
                coupling_gain,
                coupling_eps,
            } => {
                if !(*wheel_radius > 0.0 && *body_radius > 0.0 && *coupling_gain >= 0.0 && *coupling_eps > 0.0) {
                    return Err(Error::InvalidParameter("omnirobot parameters must be positive".into()));
                }
            }
            AgentDynamics::SingleIntegrator { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidParameter("state dimension must be positive".into()));
                }
            }
            AgentDynamics::CustomAffine { drift, input } => {
                let n = drift.len();
                if n == 0 || drift.iter().any(|r| r.len() != n) || input.len() != n {
                    return Err(Error::InvalidParameter("drift must be square and match input rows".into()));
                }
                let m = input[0].len();
                if input.iter().any(|r| r.len() != m) {
                    return Err(Error::InvalidParameter("ragged input matrix".into()));
                }
            }
        }
        let g = self.input_matrix(&vec![0.0; self.state_dim()]);
        let ggt = &g * g.transpose();
        let lmin = ggt.symmetric_eigenvalues().min();
        if !(lmin > 1e-12) {
            return Err(Error::AssumptionViolation(format!(
                "g gᵀ is not positive definite (λ_min = {lmin:e})"
            )));
        }
        Ok(())
    }

    /// `g(x)`.
    pub fn input_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            AgentDynamics::Omnirobot {
                wheel_radius,
                body_radius,
                ..
            } => {
                let bt_inv = wheel_matrix(*body_radius)
                    .transpose()
                    .try_inverse()
                    .unwrap_or_else(Matrix3::zeros);
                let g = rotation(x[2]) * bt_inv * *wheel_radius;
                DMatrix::from_iterator(3, 3, g.iter().copied())
            }
            AgentDynamics::SingleIntegrator { dim } => DMatrix::identity(*dim, *dim),
            AgentDynamics::CustomAffine { input, .. } => {
                DMatrix::from_fn(input.len(), input[0].len(), |r, c| input[r][c])
            }
        }
    }

    /// `ẋ` given the input, the disturbance and the positions of the other agents.
    pub fn derivative(&self, x: &[f64], u: &[f64], w: &[f64], others: &[&[f64]]) -> Vec<f64> {
        let n = self.state_dim();
        let mut dx = vec![0.0; n];
        match self {
            AgentDynamics::Omnirobot {
                coupling_gain,
                coupling_eps,
                ..
            } => {
                for p in others {
                    let (dx0, dx1) = (x[0] - p[0], x[1] - p[1]);
                    let norm = (dx0 * dx0 + dx1 * dx1).sqrt() + coupling_eps;
                    dx[0] -= coupling_gain * dx0 / norm;
                    dx[1] -= coupling_gain * dx1 / norm;
                }
            }
            AgentDynamics::SingleIntegrator { .. } => {}
            AgentDynamics::CustomAffine { drift, .. } => {
                for (r, row) in drift.iter().enumerate() {
                    dx[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let g = self.input_matrix(x);
        for r in 0..n {
            dx[r] += (0..g.ncols()).map(|c| g[(r, c)] * u[c]).sum::<f64>() + w[r];
        }
        dx
    }

    /// Whether the model's drift depends on the other agents.
    pub fn is_coupled(&self) -> bool {
        matches!(self, AgentDynamics::Omnirobot { coupling_gain, .. } if *coupling_gain != 0.0)
    }
}

/// Omnirobot right-hand side; `others` are positions of every other agent.
pub fn omnirobot_derivative(dynamics: &AgentDynamics, x: &[f64], u: &[f64], others: &[&[f64]], w: &[f64]) -> Vec<f64> {
    dynamics.derivative(x, u, w, others)
}

/// One iid uniform draw per component in `[−w_max, w_max]`.
pub fn sample_disturbance<R: Rng + ?Sized>(rng: &mut R, w_max: f64, dim: usize) -> Vec<f64> {
    if w_max <= 0.0 {
        return vec![0.0; dim];
    }
    (0..dim).map(|_| rng.random_range(-w_max..=w_max)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn robot() -> AgentDynamics {
        AgentDynamics::Omnirobot {
            wheel_radius: 1.0,
            body_radius: 0.2,
            coupling_gain: DEFAULT_COUPLING_GAIN,
            coupling_eps: DEFAULT_COUPLING_EPS,
        }
    }

    #[test]
    fn equilibrium_without_input() {
        let d = robot().derivative(&[1.0, 2.0, 0.3], &[0.0; 3], &[0.0; 3], &[]);
        assert_eq!(d, vec![0.0; 3]);
    }

    #[test]
    fn zero_heading_uses_wheel_map_only() {
        let r = robot();
        let u = [0.3, -0.2, 0.5];
        let d = r.derivative(&[0.0, 0.0, 0.0], &u, &[0.0; 3], &[]);
        let bt_inv = wheel_matrix(0.2).transpose().try_inverse().unwrap();
        let v = bt_inv * nalgebra::Vector3::from_row_slice(&u);
        for k in 0..3 {
            assert_abs_diff_eq!(d[k], v[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn coupling_magnitude_and_sign() {
        let d = robot().derivative(&[1.0, 0.0, 0.0], &[0.0; 3], &[0.0; 3], &[&[0.0, 0.0, 0.0]]);
        assert_abs_diff_eq!(d[0], -0.1 / (1.0 + 1e-4), epsilon = 1e-15);
        assert_abs_diff_eq!(d[0], -0.09999, epsilon = 1e-5);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn ggt_positive_definite() {
        robot().validate().unwrap();
        let g = robot().input_matrix(&[0.0, 0.0, 1.0]);
        let ggt = &g * g.transpose();
        // Planar gain is isotropic: (B Bᵀ)⁻¹ = diag(2/3, 2/3, 1/(3L²)).
        assert_abs_diff_eq!(ggt[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ggt[(1, 1)], 2.0 / 3.0, epsilon = 1e-12);
        let bad = AgentDynamics::CustomAffine {
            drift: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            input: vec![vec![1.0], vec![0.0]],
        };
        assert!(matches!(bad.validate(), Err(Error::AssumptionViolation(_))));
    }

    #[test]
    fn disturbance_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_disturbance(&mut rng, 0.0, 3), vec![0.0; 3]);
        for _ in 0..1000 {
            assert!(sample_disturbance(&mut rng, 1.5, 3).iter().all(|w| w.abs() <= 1.5));
        }
        let a: Vec<f64> = sample_disturbance(&mut ChaCha8Rng::seed_from_u64(1), 1.5, 3);
        let b: Vec<f64> = sample_disturbance(&mut ChaCha8Rng::seed_from_u64(1), 1.5, 3);
        assert_eq!(a, b);
    }
}
