//! Low-rank contextual-bandit generation.
//!
//! An instance is the factorization `Q* = Φ Ψᵀ` where every row of `Φ`
//! (S×M) is one-hot, selecting one of M abstract states, and `Ψ` (A×M) holds
//! abstract-state values drawn uniformly from `[0, 1]`. Rewards are the
//! entries of `Q*`, so two ground states with the same abstraction share
//! their entire reward row.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Ps2Error, Result};
use crate::matrix::{argmax_first, Matrix};

/// Problem dimensions: S ground states, A actions, latent rank M, and the
/// number of tasks sharing one abstraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub latent_rank: usize,
    pub num_tasks: usize,
}

impl ProblemSpec {
    pub fn new(num_states: usize, num_actions: usize, latent_rank: usize) -> Self {
        ProblemSpec {
            num_states,
            num_actions,
            latent_rank,
            num_tasks: 1,
        }
    }

    pub fn with_tasks(mut self, num_tasks: usize) -> Self {
        self.num_tasks = num_tasks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_states", self.num_states),
            ("num_actions", self.num_actions),
            ("latent_rank", self.latent_rank),
            ("num_tasks", self.num_tasks),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Ps2Error::config(format!("{name} must be at least 1")));
        }
        if self.latent_rank > self.num_states.min(self.num_actions) {
            return Err(Ps2Error::config(format!(
                "latent_rank {} exceeds min(num_states, num_actions) = {}",
                self.latent_rank,
                self.num_states.min(self.num_actions)
            )));
        }
        Ok(())
    }
}

/// Generator switches. Both are off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    /// Guarantee every abstract state owns at least one ground state by
    /// assigning a random permutation of `0..M` to the first M states.
    pub cover_abstract_states: bool,
}

/// Distribution of contexts (ground states) presented to the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextDistribution {
    Uniform,
    Weighted { weights: Vec<f64> },
}

/// One contextual-bandit environment with its ground-truth factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditInstance {
    pub num_states: usize,
    pub num_actions: usize,
    pub latent_rank: usize,
    pub phi: Matrix,
    pub psi: Matrix,
    pub q_star: Matrix,
    pub context_dist: ContextDistribution,
}

/// Tasks sharing one abstraction `Φ` with independent value tables `Ψ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskSuite {
    pub spec: ProblemSpec,
    pub phi: Matrix,
    pub tasks: Vec<BanditInstance>,
}

fn sample_phi(spec: &ProblemSpec, options: &GeneratorOptions, rng: &mut ChaCha8Rng) -> Matrix {
    let (s, m) = (spec.num_states, spec.latent_rank);
    let mut assignment: Vec<usize> = (0..s).map(|_| rng.random_range(0..m)).collect();
    if options.cover_abstract_states {
        let mut perm: Vec<usize> = (0..m).collect();
        // Fisher-Yates
        for i in (1..m).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        assignment[..m].copy_from_slice(&perm);
    }
    let mut phi = Matrix::zeros(s, m);
    for (state, &abstract_state) in assignment.iter().enumerate() {
        phi.set(state, abstract_state, 1.0);
    }
    phi
}

fn sample_psi(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..spec.num_actions * spec.latent_rank)
        .map(|_| rng.random::<f64>())
        .collect();
    Matrix::from_vec(spec.num_actions, spec.latent_rank, data).expect("shape by construction")
}

impl BanditInstance {
    /// Assembles an instance from its factors, computing `Q* = Φ Ψᵀ`.
    pub fn from_factors(phi: Matrix, psi: Matrix) -> Result<Self> {
        if phi.cols() != psi.cols() {
            return Err(Ps2Error::usage("phi and psi must share the latent rank"));
        }
        let q_star = phi.mul_transpose(&psi)?;
        Ok(BanditInstance {
            num_states: phi.rows(),
            num_actions: psi.rows(),
            latent_rank: phi.cols(),
            phi,
            psi,
            q_star,
            context_dist: ContextDistribution::Uniform,
        })
    }

    pub fn spec(&self) -> ProblemSpec {
        ProblemSpec::new(self.num_states, self.num_actions, self.latent_rank)
    }

    fn check_ids(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.num_states || a >= self.num_actions {
            return Err(Ps2Error::usage(format!(
                "(state {s}, action {a}) out of range for {}x{} instance",
                self.num_states, self.num_actions
            )));
        }
        Ok(())
    }

    /// Draws a context from the instance's context distribution.
    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.context_dist {
            ContextDistribution::Uniform => rng.random_range(0..self.num_states),
            ContextDistribution::Weighted { weights } => WeightedIndex::new(weights)
                .expect("context weights validated on construction")
                .sample(rng),
        }
    }

    /// Replaces the context distribution with explicit per-state weights.
    pub fn set_context_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.num_states {
            return Err(Ps2Error::usage("one context weight per state required"));
        }
        WeightedIndex::new(&weights).map_err(|e| Ps2Error::usage(e.to_string()))?;
        self.context_dist = ContextDistribution::Weighted { weights };
        Ok(())
    }

    /// Deterministic reward `Q*(s, a)`.
    pub fn pull(&self, s: usize, a: usize) -> Result<f64> {
        self.check_ids(s, a)?;
        Ok(self.q_star.get(s, a))
    }

    /// `Q*(s, a)` plus zero-mean Gaussian noise with standard deviation `noise_std`.
    pub fn pull_noisy<R: Rng + ?Sized>(
        &self,
        s: usize,
        a: usize,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let mean = self.pull(s, a)?;
        if noise_std == 0.0 {
            return Ok(mean);
        }
        let eps: f64 = StandardNormal.sample(rng);
        Ok(mean + noise_std * eps)
    }

    /// Lowest-id action attaining the row maximum of `Q*`.
    pub fn optimal_action(&self, s: usize) -> Result<usize> {
        self.check_ids(s, 0)?;
        Ok(argmax_first(self.q_star.row(s)))
    }

    /// `max_a* Q*(s, a*) - Q*(s, a)`.
    pub fn instantaneous_regret(&self, s: usize, a: usize) -> Result<f64> {
        self.check_ids(s, a)?;
        let row = self.q_star.row(s);
        let best = row[argmax_first(row)];
        Ok(best - row[a])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let instance: BanditInstance = serde_json::from_str(text)?;
        let expected = instance.phi.mul_transpose(&instance.psi)?;
        if expected != instance.q_star {
            return Err(Ps2Error::Serialization(
                "q_star does not equal phi * psi^T".into(),
            ));
        }
        Ok(instance)
    }
}

impl MultiTaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: usize) -> &BanditInstance {
        &self.tasks[t]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Samples a bandit instance; `spec.num_tasks` is ignored.
pub fn generate_bandit(spec: &ProblemSpec, seed: u64) -> Result<BanditInstance> {
    generate_bandit_with(spec, seed, &GeneratorOptions::default())
}

pub fn generate_bandit_with(
    spec: &ProblemSpec,
    seed: u64,
    options: &GeneratorOptions,
) -> Result<BanditInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = sample_phi(spec, options, &mut rng);
    let psi = sample_psi(spec, &mut rng);
    BanditInstance::from_factors(phi, psi)
}

/// Samples one shared `Φ` followed by `spec.num_tasks` independent `Ψ_t`.
///
/// The draw order matches [`generate_bandit`], so a one-task suite holds the
/// same instance as the single-task generator for the same seed.
pub fn generate_multitask(spec: &ProblemSpec, seed: u64) -> Result<MultiTaskSuite> {
    generate_multitask_with(spec, seed, &GeneratorOptions::default())
}

pub fn generate_multitask_with(
    spec: &ProblemSpec,
    seed: u64,
    options: &GeneratorOptions,
) -> Result<MultiTaskSuite> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = sample_phi(spec, options, &mut rng);
    let tasks = (0..spec.num_tasks)
        .map(|_| BanditInstance::from_factors(phi.clone(), sample_psi(spec, &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiTaskSuite {
        spec: *spec,
        phi,
        tasks,
    })
}
