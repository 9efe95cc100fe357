use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LossConfig;
use crate::error::{Ps2Error, Result};
use crate::hypermodel::IndexConfig;

/// One interaction together with the target perturbations drawn for it.
///
/// The perturbations are drawn once at insertion and reused by every
/// minibatch that contains the transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub task_id: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
    pub eta_phi: Vec<f64>,
    pub eta_psi: Vec<f64>,
}

/// Draws `(η_φ, η_ψ)` with per-coordinate standard deviations
/// `config.sigma_phi` and `config.sigma_psi`.
pub fn make_perturbations<R: Rng + ?Sized>(
    config: &LossConfig,
    dims: IndexConfig,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut draw = |n: usize, sigma: f64| -> Vec<f64> {
        (0..n)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let eta_phi = draw(dims.dim_phi, config.sigma_phi);
    let eta_psi = draw(dims.dim_psi, config.sigma_psi);
    (eta_phi, eta_psi)
}

/// Experience replay with uniform, with-replacement sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    dims: IndexConfig,
    capacity: Option<usize>,
    transitions: VecDeque<Transition>,
}

impl ReplayBuffer {
    /// An unbounded buffer for transitions perturbed at `dims`.
    pub fn new(dims: IndexConfig) -> Self {
        ReplayBuffer {
            dims,
            capacity: None,
            transitions: VecDeque::new(),
        }
    }

    /// A buffer that evicts its oldest transition beyond `capacity`.
    pub fn with_capacity(dims: IndexConfig, capacity: usize) -> Self {
        ReplayBuffer {
            dims,
            capacity: Some(capacity.max(1)),
            transitions: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.transitions.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    pub fn add(&mut self, transition: Transition) -> Result<()> {
        if transition.eta_phi.len() != self.dims.dim_phi
            || transition.eta_psi.len() != self.dims.dim_psi
        {
            return Err(Ps2Error::usage(format!(
                "perturbation lengths ({}, {}) do not match index dims ({}, {})",
                transition.eta_phi.len(),
                transition.eta_psi.len(),
                self.dims.dim_phi,
                self.dims.dim_psi
            )));
        }
        if self.capacity == Some(self.transitions.len()) {
            self.transitions.pop_front();
        }
        self.transitions.push_back(transition);
        Ok(())
    }

    /// `m` positions drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.transitions.is_empty() {
            return Err(Ps2Error::usage("cannot sample from an empty replay buffer"));
        }
        let n = self.transitions.len();
        Ok((0..m).map(|_| rng.random_range(0..n)).collect())
    }

    /// `m` uniform draws, with replacement, from each task's transitions.
    /// Tasks with no transitions contribute nothing. Draws are grouped by
    /// task in ascending task order.
    pub fn sample_indices_per_task<R: Rng + ?Sized>(
        &self,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if self.transitions.is_empty() {
            return Err(Ps2Error::usage("cannot sample from an empty replay buffer"));
        }
        let num_tasks = self
            .transitions
            .iter()
            .map(|t| t.task_id)
            .max()
            .unwrap_or(0)
            + 1;
        let mut by_task: Vec<Vec<usize>> = vec![Vec::new(); num_tasks];
        for (i, t) in self.transitions.iter().enumerate() {
            by_task[t.task_id].push(i);
        }
        let mut out = Vec::with_capacity(m * num_tasks);
        for pool in by_task.iter().filter(|p| !p.is_empty()) {
            out.extend((0..m).map(|_| pool[rng.random_range(0..pool.len())]));
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(m, rng)?
            .into_iter()
            .map(|i| &self.transitions[i])
            .collect())
    }
}
