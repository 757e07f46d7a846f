//! Vanilla flow-matching baseline: an instantaneous-velocity field trained
//! with mean squared error and sampled by integrating the probability-flow
//! ODE with explicit solvers.
//!
//! This exists to quantify the one-step claim: the mean-velocity planner
//! needs one network evaluation per sample, while this baseline needs
//! `n` (Euler) or `2n` (Heun) evaluations to cover the same unit interval.
//! The baseline shares the decoder architecture minus the `r` input
//! ([`crate::meanflow::DecoderNet`] with `include_r = false`), so the
//! objective is the only difference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{DiffError, Tape, Tensor, Var};
use crate::meanflow::{flow_loss, LossKind};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("solver needs at least one step")]
    BadSteps,
    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Heun,
}

impl std::fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverMethod::Euler => write!(f, "euler"),
            SolverMethod::Heun => write!(f, "heun"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub n_steps: usize,
}

/// Integrate `dz/dt = field(z, t)` from `t = 0` to `t = 1` starting at
/// `x0`. Returns the terminal state and the number of field evaluations
/// actually performed (counted, not assumed: `n` for Euler, `2n` for Heun).
pub fn ode_sample<F>(
    x0: &[f64],
    solver: &SolverConfig,
    mut field: F,
) -> Result<(Vec<f64>, usize), BaselineError>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>, DiffError>,
{
    if solver.n_steps == 0 {
        return Err(BaselineError::BadSteps);
    }
    let n = solver.n_steps;
    let h = 1.0 / n as f64;
    let mut z = x0.to_vec();
    let mut nfe = 0usize;
    for i in 0..n {
        let t = i as f64 * h;
        match solver.method {
            SolverMethod::Euler => {
                let k1 = field(&z, t)?;
                nfe += 1;
                for (zi, ki) in z.iter_mut().zip(&k1) {
                    *zi += h * ki;
                }
            }
            SolverMethod::Heun => {
                let k1 = field(&z, t)?;
                nfe += 1;
                let pred: Vec<f64> = z.iter().zip(&k1).map(|(&zi, &ki)| zi + h * ki).collect();
                let k2 = field(&pred, t + h)?;
                nfe += 1;
                for ((zi, k1i), k2i) in z.iter_mut().zip(&k1).zip(&k2) {
                    *zi += 0.5 * h * (k1i + k2i);
                }
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(BaselineError::NonFiniteState { step: i });
        }
    }
    Ok((z, nfe))
}

/// Mean squared error between predicted instantaneous velocities and the
/// true `v = x1 − x0` targets (standard flow matching).
pub fn vanilla_fm_loss(tape: &mut Tape, pairs: &[(Var, Tensor)]) -> Result<Var, DiffError> {
    flow_loss(tape, pairs, LossKind::L2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        x0: &[f64],
        method: SolverMethod,
        n_steps: usize,
        field: impl FnMut(&[f64], f64) -> Result<Vec<f64>, DiffError>,
    ) -> (Vec<f64>, usize) {
        ode_sample(x0, &SolverConfig { method, n_steps }, field).unwrap()
    }

    #[test]
    fn constant_field_is_integrated_exactly_by_both_solvers() {
        let c = [2.0, -0.5];
        for method in [SolverMethod::Euler, SolverMethod::Heun] {
            for n in [1, 3, 7] {
                let (z, _) = run(&[1.0, 1.0], method, n, |_, _| Ok(c.to_vec()));
                assert!((z[0] - 3.0).abs() < 1e-12 && (z[1] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_on_exponential_field_matches_compound_growth() {
        // dz/dt = z from z(0)=1 → Euler gives (1 + 1/n)^n, exact answer e
        let (z, nfe) = run(&[1.0], SolverMethod::Euler, 1, |z, _| Ok(z.to_vec()));
        assert_eq!(z[0], 2.0, "single Euler step doubles");
        assert_eq!(nfe, 1);
        let e = std::f64::consts::E;
        let mut prev_err = f64::INFINITY;
        for n in [1usize, 2, 4, 8, 16] {
            let (z, nfe) = run(&[1.0], SolverMethod::Euler, n, |z, _| Ok(z.to_vec()));
            let analytic = (1.0 + 1.0 / n as f64).powi(n as i32);
            assert!((z[0] - analytic).abs() < 1e-12, "n={n}: {} vs {analytic}", z[0]);
            assert_eq!(nfe, n);
            let err = (z[0] - e).abs();
            assert!(err < prev_err, "error must shrink: n={n}, {err} vs {prev_err}");
            prev_err = err;
        }
    }

    #[test]
    fn heun_is_exact_on_linear_in_time_fields() {
        // dz/dt = 2t → z(1) = z(0) + 1; trapezoidal quadrature is exact
        for n in [1, 2, 5, 9] {
            let (z, nfe) = run(&[0.25], SolverMethod::Heun, n, |_, t| Ok(vec![2.0 * t]));
            assert!((z[0] - 1.25).abs() < 1e-12, "n={n}: {}", z[0]);
            assert_eq!(nfe, 2 * n);
        }
    }

    #[test]
    fn heun_beats_euler_on_curvature() {
        let e = std::f64::consts::E;
        for n in [2usize, 4, 8] {
            let (ze, _) = run(&[1.0], SolverMethod::Euler, n, |z, _| Ok(z.to_vec()));
            let (zh, _) = run(&[1.0], SolverMethod::Heun, n, |z, _| Ok(z.to_vec()));
            assert!(
                (zh[0] - e).abs() < (ze[0] - e).abs(),
                "n={n}: heun {} euler {}",
                zh[0],
                ze[0]
            );
        }
    }

    #[test]
    fn nfe_accounting_matches_an_external_call_counter() {
        for (method, n, expected) in [
            (SolverMethod::Euler, 5, 5),
            (SolverMethod::Euler, 1, 1),
            (SolverMethod::Heun, 5, 10),
            (SolverMethod::Heun, 1, 2),
        ] {
            let mut calls = 0usize;
            let (_, nfe) = run(&[0.0], method, n, |_, t| {
                calls += 1;
                Ok(vec![t])
            });
            assert_eq!(nfe, expected);
            assert_eq!(calls, nfe, "reported NFE must equal actual calls");
        }
    }

    #[test]
    fn zero_steps_and_nonfinite_states_are_rejected() {
        let cfg = SolverConfig {
            method: SolverMethod::Euler,
            n_steps: 0,
        };
        assert!(matches!(
            ode_sample(&[0.0], &cfg, |_, _| Ok(vec![0.0])),
            Err(BaselineError::BadSteps)
        ));
        let cfg = SolverConfig {
            method: SolverMethod::Euler,
            n_steps: 2,
        };
        let res = ode_sample(&[1.0], &cfg, |_, _| Ok(vec![f64::INFINITY]));
        assert!(matches!(res, Err(BaselineError::NonFiniteState { step: 0 })));
    }

    #[test]
    fn fm_loss_matches_mse_closed_forms() {
        let v = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let exact = tape.leaf(v.clone());
        let l = vanilla_fm_loss(&mut tape, &[(exact, v.clone())]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let zero = tape.leaf(Tensor::zeros(&[2, 2]));
        let l = vanilla_fm_loss(&mut tape, &[(zero, v)]).unwrap();
        // mean of squares: (9 + 16 + 0 + 1)/4
        assert!((tape.value(l).item().unwrap() - 6.5).abs() < 1e-12);
    }
}
