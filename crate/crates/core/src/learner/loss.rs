//! Randomized least-squares value iteration loss.
//!
//! For index pairs `(z_φ, z_ψ)` the loss averages, over the supplied pairs,
//!
//! ```text
//! (1/m) Σ_i (y_i − Q̂(s_i, a_i))² + λ‖Φ̂ − Φ̂₀‖² + (λ/T) Σ_t ‖Ψ̂_t − Ψ̂_t₀‖²
//! y_i = r_i + γ·[!terminal]·max_a' Q̂(s'_i, a') + η_φ,iᵀ z_φ + η_ψ,iᵀ z_ψ,t(i)
//! ```
//!
//! where hatted quantities come from the current parameters and subscript-0
//! quantities from the initial snapshot under the same index. The target
//! `y_i` is held constant when differentiating.

use serde::{Deserialize, Serialize};

use super::Transition;
use crate::error::{Ps2Error, Result};
use crate::hypermodel::{Abstraction, Beliefs, IndexDraw};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    /// Regularization strength λ anchoring parameters to their initial values.
    pub lambda: f64,
    /// Standard deviation of the abstraction-index target perturbation.
    pub sigma_phi: f64,
    /// Standard deviation of the value-index target perturbation.
    pub sigma_psi: f64,
    /// Index pairs drawn per update to approximate the outer expectation.
    pub n_train_indices: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.99,
            lambda: 0.001,
            sigma_phi: 0.5,
            sigma_psi: 0.5,
            n_train_indices: 16,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Ps2Error::config("gamma must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.sigma_phi >= 0.0 && self.sigma_psi >= 0.0) {
            return Err(Ps2Error::config(
                "lambda and perturbation scales must be non-negative",
            ));
        }
        if self.n_train_indices == 0 {
            return Err(Ps2Error::config("n_train_indices must be at least 1"));
        }
        Ok(())
    }
}

pub fn rlsvi_loss(
    params: &Beliefs,
    params_init: &Beliefs,
    minibatch: &[&Transition],
    index_draws: &[IndexDraw],
    config: &LossConfig,
) -> Result<f64> {
    evaluate(params, params_init, minibatch, index_draws, config, None)
}

/// Gradient of [`rlsvi_loss`] in [`Beliefs::flatten`] order.
pub fn rlsvi_gradient(
    params: &Beliefs,
    params_init: &Beliefs,
    minibatch: &[&Transition],
    index_draws: &[IndexDraw],
    config: &LossConfig,
) -> Result<Vec<f64>> {
    rlsvi_loss_and_gradient(params, params_init, minibatch, index_draws, config).map(|(_, g)| g)
}

pub fn rlsvi_loss_and_gradient(
    params: &Beliefs,
    params_init: &Beliefs,
    minibatch: &[&Transition],
    index_draws: &[IndexDraw],
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = params.zeros_like();
    let loss = evaluate(
        params,
        params_init,
        minibatch,
        index_draws,
        config,
        Some(&mut grad),
    )?;
    Ok((loss, grad.flatten()))
}

fn validate(
    params: &Beliefs,
    params_init: &Beliefs,
    minibatch: &[&Transition],
    index_draws: &[IndexDraw],
) -> Result<()> {
    if minibatch.is_empty() {
        return Err(Ps2Error::usage("minibatch is empty"));
    }
    if index_draws.is_empty() {
        return Err(Ps2Error::usage("no index draws supplied"));
    }
    let dims = params.index_config();
    if params_init.index_config() != dims
        || params_init.num_params() != params.num_params()
        || params_init.num_tasks() != params.num_tasks()
    {
        return Err(Ps2Error::usage(
            "initial snapshot does not match parameter structure",
        ));
    }
    let (num_states, num_actions, num_tasks) = (
        params.num_states(),
        params.num_actions(),
        params.num_tasks(),
    );
    for t in minibatch {
        if t.task_id >= num_tasks
            || t.state >= num_states
            || t.next_state >= num_states
            || t.action >= num_actions
        {
            return Err(Ps2Error::usage(format!(
                "transition (task {}, s {}, a {}, s' {}) out of range",
                t.task_id, t.state, t.action, t.next_state
            )));
        }
        if t.eta_phi.len() != dims.dim_phi || t.eta_psi.len() != dims.dim_psi {
            return Err(Ps2Error::usage("transition perturbation has wrong length"));
        }
    }
    for d in index_draws {
        if d.z_phi.len() != dims.dim_phi
            || d.z_psi.len() != num_tasks
            || d.z_psi.iter().any(|z| z.len() != dims.dim_psi)
        {
            return Err(Ps2Error::usage("index draw has wrong shape"));
        }
    }
    Ok(())
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn perturbation(t: &Transition, draw: &IndexDraw) -> f64 {
    let phi_term = if t.eta_phi.is_empty() {
        0.0
    } else {
        dot(&t.eta_phi, &draw.z_phi)
    };
    phi_term + dot(&t.eta_psi, &draw.z_psi[t.task_id])
}

fn evaluate(
    params: &Beliefs,
    params_init: &Beliefs,
    minibatch: &[&Transition],
    index_draws: &[IndexDraw],
    config: &LossConfig,
    mut grad: Option<&mut Beliefs>,
) -> Result<f64> {
    validate(params, params_init, minibatch, index_draws)?;
    let n = index_draws.len() as f64;
    let mut total = 0.0;
    for draw in index_draws {
        total += match params {
            Beliefs::Factored { .. } => factored_term(
                params,
                params_init,
                minibatch,
                draw,
                config,
                n,
                grad.as_deref_mut(),
            )?,
            Beliefs::Direct(_) => direct_term(
                params,
                params_init,
                minibatch,
                draw,
                config,
                n,
                grad.as_deref_mut(),
            )?,
        };
    }
    Ok(total / n)
}

/// Loss contribution of one index draw for factored beliefs, accumulating
/// `1/n` of its gradient into `grad`.
fn factored_term(
    params: &Beliefs,
    params_init: &Beliefs,
    minibatch: &[&Transition],
    draw: &IndexDraw,
    config: &LossConfig,
    n: f64,
    grad: Option<&mut Beliefs>,
) -> Result<f64> {
    let (
        Beliefs::Factored {
            abstraction,
            values,
        },
        Beliefs::Factored {
            values: values_init,
            ..
        },
    ) = (params, params_init)
    else {
        return Err(Ps2Error::usage("belief kinds differ"));
    };
    let learned = matches!(abstraction, Abstraction::Learned(_));
    let lambda = config.lambda;
    let m = minibatch.len() as f64;

    let phi_hat = params.abstraction_sample(&draw.z_phi)?.expect("factored");
    let phi_init = params_init
        .abstraction_sample(&draw.z_phi)?
        .expect("factored");
    let psi_hat = values
        .iter()
        .zip(&draw.z_psi)
        .map(|(v, z)| v.forward(z, &phi_hat))
        .collect::<Result<Vec<Matrix>>>()?;
    let psi_init = values_init
        .iter()
        .zip(&draw.z_psi)
        .map(|(v, z)| v.forward(z, &phi_init))
        .collect::<Result<Vec<Matrix>>>()?;

    // Each task owns 1/T of the data term, so its value anchor is weighted
    // 1/T as well; with one task this is the plain single-task regularizer.
    let task_weight = 1.0 / psi_hat.len() as f64;
    let mut reg = 0.0;
    if learned {
        reg += sq_diff(phi_hat.as_slice(), phi_init.as_slice());
    }
    for (p, p0) in psi_hat.iter().zip(&psi_init) {
        reg += task_weight * sq_diff(p.as_slice(), p0.as_slice());
    }
    reg *= lambda;

    let num_actions = psi_hat[0].rows();
    let predict = |task: usize, s: usize, a: usize| dot(phi_hat.row(s), psi_hat[task].row(a));

    let mut d_phi = grad
        .as_ref()
        .map(|_| Matrix::zeros(phi_hat.rows(), phi_hat.cols()));
    let mut d_psi: Option<Vec<Matrix>> = grad.as_ref().map(|_| {
        psi_hat
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect()
    });

    let mut sq = 0.0;
    for t in minibatch {
        let bootstrap = if t.terminal {
            0.0
        } else {
            config.gamma
                * (0..num_actions)
                    .map(|a| predict(t.task_id, t.next_state, a))
                    .fold(f64::NEG_INFINITY, f64::max)
        };
        let target = t.reward + bootstrap + perturbation(t, draw);
        let err = predict(t.task_id, t.state, t.action) - target;
        sq += err * err;
        if let (Some(d_phi), Some(d_psi)) = (d_phi.as_mut(), d_psi.as_mut()) {
            let g = 2.0 * err / (m * n);
            let psi_row = psi_hat[t.task_id].row(t.action);
            for (d, x) in d_phi.row_mut(t.state).iter_mut().zip(psi_row) {
                *d += g * x;
            }
            let phi_row = phi_hat.row(t.state);
            for (d, x) in d_psi[t.task_id].row_mut(t.action).iter_mut().zip(phi_row) {
                *d += g * x;
            }
        }
    }
    let term = sq / m + reg;

    let (Some(grad), Some(mut d_phi), Some(mut d_psi)) = (grad, d_phi, d_psi) else {
        return Ok(term);
    };
    let reg_scale = 2.0 * lambda / n;
    if learned {
        for ((d, x), x0) in d_phi
            .as_mut_slice()
            .iter_mut()
            .zip(phi_hat.as_slice())
            .zip(phi_init.as_slice())
        {
            *d += reg_scale * (x - x0);
        }
    }
    for ((d, p), p0) in d_psi.iter_mut().zip(&psi_hat).zip(&psi_init) {
        for ((d, x), x0) in d
            .as_mut_slice()
            .iter_mut()
            .zip(p.as_slice())
            .zip(p0.as_slice())
        {
            *d += task_weight * reg_scale * (x - x0);
        }
    }

    let Beliefs::Factored {
        abstraction: g_abstraction,
        values: g_values,
    } = grad
    else {
        return Err(Ps2Error::usage(
            "gradient structure differs from parameters",
        ));
    };
    let phi_vec = phi_hat.as_slice();
    let input_dim = phi_vec.len();
    let d_phi_vec = d_phi.as_mut_slice();
    for (task, d_out) in d_psi.iter().enumerate() {
        let value = &values[task];
        let g_value = &mut g_values[task];
        let z = &draw.z_psi[task];
        for (i, &gi) in d_out.as_slice().iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            let row = i * input_dim..(i + 1) * input_dim;
            for (dw, x) in g_value.w[row.clone()].iter_mut().zip(phi_vec) {
                *dw += gi * x;
            }
            g_value.b[i] += gi;
            g_value.scale[i] += gi * z[i];
            if learned {
                for (dp, w) in d_phi_vec.iter_mut().zip(&value.w[row]) {
                    *dp += gi * w;
                }
            }
        }
    }
    if let Abstraction::Learned(g_h) = g_abstraction {
        for (((dmu, ds), d), z) in g_h
            .mu
            .iter_mut()
            .zip(g_h.scale.iter_mut())
            .zip(d_phi_vec.iter())
            .zip(&draw.z_phi)
        {
            *dmu += d;
            *ds += d * z;
        }
    }
    Ok(term)
}

fn direct_term(
    params: &Beliefs,
    params_init: &Beliefs,
    minibatch: &[&Transition],
    draw: &IndexDraw,
    config: &LossConfig,
    n: f64,
    grad: Option<&mut Beliefs>,
) -> Result<f64> {
    let (Beliefs::Direct(models), Beliefs::Direct(models_init)) = (params, params_init) else {
        return Err(Ps2Error::usage("belief kinds differ"));
    };
    let m = minibatch.len() as f64;
    let q_hat = models
        .iter()
        .zip(&draw.z_psi)
        .map(|(h, z)| h.forward(z))
        .collect::<Result<Vec<Matrix>>>()?;
    let q_init = models_init
        .iter()
        .zip(&draw.z_psi)
        .map(|(h, z)| h.forward(z))
        .collect::<Result<Vec<Matrix>>>()?;
    let task_weight = 1.0 / q_hat.len() as f64;
    let reg: f64 = config.lambda
        * task_weight
        * q_hat
            .iter()
            .zip(&q_init)
            .map(|(q, q0)| sq_diff(q.as_slice(), q0.as_slice()))
            .sum::<f64>();

    let mut d_q: Option<Vec<Matrix>> = grad.as_ref().map(|_| {
        q_hat
            .iter()
            .map(|q| Matrix::zeros(q.rows(), q.cols()))
            .collect()
    });
    let mut sq = 0.0;
    for t in minibatch {
        let q = &q_hat[t.task_id];
        let bootstrap = if t.terminal {
            0.0
        } else {
            config.gamma
                * q.row(t.next_state)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
        };
        let target = t.reward + bootstrap + perturbation(t, draw);
        let err = q.get(t.state, t.action) - target;
        sq += err * err;
        if let Some(d_q) = d_q.as_mut() {
            let cell = d_q[t.task_id].get(t.state, t.action);
            d_q[t.task_id].set(t.state, t.action, cell + 2.0 * err / (m * n));
        }
    }
    let term = sq / m + reg;

    let (Some(grad), Some(d_q)) = (grad, d_q) else {
        return Ok(term);
    };
    let Beliefs::Direct(g_models) = grad else {
        return Err(Ps2Error::usage(
            "gradient structure differs from parameters",
        ));
    };
    let reg_scale = 2.0 * config.lambda * task_weight / n;
    for (task, g_model) in g_models.iter_mut().enumerate() {
        let z = &draw.z_psi[task];
        let iter = d_q[task]
            .as_slice()
            .iter()
            .zip(q_hat[task].as_slice())
            .zip(q_init[task].as_slice())
            .zip(z);
        for (i, (((d, q), q0), z)) in iter.enumerate() {
            let total = d + reg_scale * (q - q0);
            g_model.mu[i] += total;
            g_model.scale[i] += total * z;
        }
    }
    Ok(term)
}
