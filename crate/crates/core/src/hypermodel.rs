//! Gaussian linear hypermodels over abstractions, abstract-state values and
//! (for the no-abstraction baseline) the value matrix itself.
//!
//! A hypermodel maps an index `z ~ N(0, I)` to one sample of its base
//! model's parameters; pushing independent indices through the forward maps
//! yields samples from the agent's approximate posterior.
//!
//! - abstraction: `vec(Φ̂) = mu + scale ⊙ z_φ`, an S×M matrix.
//! - conditional values: `vec(Ψ̂) = W vec(Φ̂) + b + scale ⊙ z_ψ`, an A×M matrix.
//! - direct: `vec(Q̂) = mu + scale ⊙ z`, an S×A matrix.
//!
//! All vectorizations are row-major. A posterior sample of `Q*` composes the
//! first two as `Φ̂ Ψ̂ᵀ`.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Ps2Error, Result};
use crate::matrix::{dot, Matrix};

/// Default standard deviation of every hypermodel's initial scale.
pub const DEFAULT_PRIOR_SCALE: f64 = 0.5;

/// Index dimensions for the abstraction and value hypermodels.
///
/// Dimensions equal the number of entries they perturb; a fixed abstraction
/// takes no index (`dim_phi == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub dim_phi: usize,
    pub dim_psi: usize,
}

/// Draws an i.i.d. standard-normal index of length `dim`.
pub fn sample_index<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Ps2Error::usage("index dimension must be at least 1"));
    }
    Ok(draw_normal(dim, rng))
}

fn draw_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Ps2Error::usage(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

/// Diagonal Gaussian over `vec(Φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionHypermodel {
    pub num_states: usize,
    pub latent_rank: usize,
    pub mu: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AbstractionHypermodel {
    pub fn new(num_states: usize, latent_rank: usize, prior_scale: f64) -> Result<Self> {
        if prior_scale < 0.0 {
            return Err(Ps2Error::config("prior scale must be non-negative"));
        }
        let n = num_states * latent_rank;
        Ok(AbstractionHypermodel {
            num_states,
            latent_rank,
            mu: vec![0.0; n],
            scale: vec![prior_scale; n],
        })
    }

    pub fn index_dim(&self) -> usize {
        self.num_states * self.latent_rank
    }

    pub fn forward(&self, z_phi: &[f64]) -> Result<Matrix> {
        check_len("abstraction index", z_phi.len(), self.index_dim())?;
        let data = self
            .mu
            .iter()
            .zip(&self.scale)
            .zip(z_phi)
            .map(|((m, s), z)| m + s * z)
            .collect();
        Matrix::from_vec(self.num_states, self.latent_rank, data)
    }
}

/// Diagonal Gaussian over `vec(Ψ)` whose mean is affine in a sampled `Φ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHypermodel {
    pub num_states: usize,
    pub num_actions: usize,
    pub latent_rank: usize,
    /// Row-major `(A·M) × (S·M)`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ValueHypermodel {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        latent_rank: usize,
        prior_scale: f64,
    ) -> Result<Self> {
        if prior_scale < 0.0 {
            return Err(Ps2Error::config("prior scale must be non-negative"));
        }
        let out = num_actions * latent_rank;
        let inp = num_states * latent_rank;
        Ok(ValueHypermodel {
            num_states,
            num_actions,
            latent_rank,
            w: vec![0.0; out * inp],
            b: vec![0.0; out],
            scale: vec![prior_scale; out],
        })
    }

    pub fn index_dim(&self) -> usize {
        self.num_actions * self.latent_rank
    }

    pub fn input_dim(&self) -> usize {
        self.num_states * self.latent_rank
    }

    pub fn forward(&self, z_psi: &[f64], phi_hat: &Matrix) -> Result<Matrix> {
        check_len("value index", z_psi.len(), self.index_dim())?;
        if phi_hat.shape() != (self.num_states, self.latent_rank) {
            return Err(Ps2Error::usage(format!(
                "abstraction sample has shape {:?}, expected {:?}",
                phi_hat.shape(),
                (self.num_states, self.latent_rank)
            )));
        }
        let input = phi_hat.as_slice();
        let data = self
            .w
            .chunks_exact(self.input_dim())
            .zip(&self.b)
            .zip(&self.scale)
            .zip(z_psi)
            .map(|(((row, b), s), z)| dot(row, input) + b + s * z)
            .collect();
        Matrix::from_vec(self.num_actions, self.latent_rank, data)
    }
}

/// Diagonal Gaussian over `vec(Q)` with no latent structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectQHypermodel {
    pub num_states: usize,
    pub num_actions: usize,
    pub mu: Vec<f64>,
    pub scale: Vec<f64>,
}

impl DirectQHypermodel {
    pub fn new(num_states: usize, num_actions: usize, prior_scale: f64) -> Result<Self> {
        if prior_scale < 0.0 {
            return Err(Ps2Error::config("prior scale must be non-negative"));
        }
        let n = num_states * num_actions;
        Ok(DirectQHypermodel {
            num_states,
            num_actions,
            mu: vec![0.0; n],
            scale: vec![prior_scale; n],
        })
    }

    pub fn index_dim(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn forward(&self, z: &[f64]) -> Result<Matrix> {
        check_len("direct index", z.len(), self.index_dim())?;
        let data = self
            .mu
            .iter()
            .zip(&self.scale)
            .zip(z)
            .map(|((m, s), z)| m + s * z)
            .collect();
        Matrix::from_vec(self.num_states, self.num_actions, data)
    }
}

/// `Q̂ = Φ̂ Ψ̂ᵀ`.
pub fn compose_q(phi_hat: &Matrix, psi_hat: &Matrix) -> Result<Matrix> {
    phi_hat.mul_transpose(psi_hat)
}

/// Where an agent's abstraction comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Abstraction {
    Learned(AbstractionHypermodel),
    /// Known a priori and never trained.
    Fixed(Matrix),
}

/// The complete set of beliefs one agent maintains.
///
/// `values` / the direct hypermodels hold one entry per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beliefs {
    Factored {
        abstraction: Abstraction,
        values: Vec<ValueHypermodel>,
    },
    Direct(Vec<DirectQHypermodel>),
}

/// One posterior index: a shared abstraction index plus one value index per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexDraw {
    pub z_phi: Vec<f64>,
    pub z_psi: Vec<Vec<f64>>,
}

/// K posterior samples of the S×A value matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QSampleSet {
    samples: Vec<Matrix>,
    indices: Option<Vec<IndexDraw>>,
}

impl QSampleSet {
    pub fn new(samples: Vec<Matrix>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Ps2Error::usage("sample set must hold at least one sample"))?;
        let shape = first.shape();
        if samples.iter().any(|m| m.shape() != shape) {
            return Err(Ps2Error::usage("all samples must share dimensions"));
        }
        Ok(QSampleSet {
            samples,
            indices: None,
        })
    }

    pub fn with_indices(mut self, indices: Vec<IndexDraw>) -> Result<Self> {
        check_len("index list", indices.len(), self.samples.len())?;
        self.indices = Some(indices);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.samples[0].rows()
    }

    pub fn num_actions(&self) -> usize {
        self.samples[0].cols()
    }

    pub fn samples(&self) -> &[Matrix] {
        &self.samples
    }

    pub fn indices(&self) -> Option<&[IndexDraw]> {
        self.indices.as_deref()
    }
}

impl Beliefs {
    /// Learned abstraction and `num_tasks` conditional value hypermodels.
    pub fn factored(
        num_states: usize,
        num_actions: usize,
        latent_rank: usize,
        num_tasks: usize,
        prior_scale: f64,
    ) -> Result<Self> {
        let values = (0..num_tasks)
            .map(|_| ValueHypermodel::new(num_states, num_actions, latent_rank, prior_scale))
            .collect::<Result<_>>()?;
        Ok(Beliefs::Factored {
            abstraction: Abstraction::Learned(AbstractionHypermodel::new(
                num_states,
                latent_rank,
                prior_scale,
            )?),
            values,
        })
    }

    /// Known abstraction; only the value hypermodels are learned.
    pub fn with_fixed_abstraction(
        phi: Matrix,
        num_actions: usize,
        num_tasks: usize,
        prior_scale: f64,
    ) -> Result<Self> {
        let (num_states, latent_rank) = phi.shape();
        let values = (0..num_tasks)
            .map(|_| ValueHypermodel::new(num_states, num_actions, latent_rank, prior_scale))
            .collect::<Result<_>>()?;
        Ok(Beliefs::Factored {
            abstraction: Abstraction::Fixed(phi),
            values,
        })
    }

    pub fn direct(
        num_states: usize,
        num_actions: usize,
        num_tasks: usize,
        prior_scale: f64,
    ) -> Result<Self> {
        let models = (0..num_tasks)
            .map(|_| DirectQHypermodel::new(num_states, num_actions, prior_scale))
            .collect::<Result<_>>()?;
        Ok(Beliefs::Direct(models))
    }

    pub fn num_tasks(&self) -> usize {
        match self {
            Beliefs::Factored { values, .. } => values.len(),
            Beliefs::Direct(models) => models.len(),
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            Beliefs::Factored { values, .. } => values[0].num_states,
            Beliefs::Direct(models) => models[0].num_states,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Beliefs::Factored { values, .. } => values[0].num_actions,
            Beliefs::Direct(models) => models[0].num_actions,
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        match self {
            Beliefs::Factored {
                abstraction,
                values,
            } => IndexConfig {
                dim_phi: match abstraction {
                    Abstraction::Learned(h) => h.index_dim(),
                    Abstraction::Fixed(_) => 0,
                },
                dim_psi: values[0].index_dim(),
            },
            Beliefs::Direct(models) => IndexConfig {
                dim_phi: 0,
                dim_psi: models[0].index_dim(),
            },
        }
    }

    /// Draws a fresh index for the abstraction and for every task.
    pub fn sample_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> IndexDraw {
        let dims = self.index_config();
        let z_phi = draw_normal(dims.dim_phi, rng);
        let z_psi = (0..self.num_tasks())
            .map(|_| draw_normal(dims.dim_psi, rng))
            .collect();
        IndexDraw { z_phi, z_psi }
    }

    /// The abstraction sample `Φ̂` for `z_phi`; `None` for direct beliefs.
    pub fn abstraction_sample(&self, z_phi: &[f64]) -> Result<Option<Cow<'_, Matrix>>> {
        match self {
            Beliefs::Factored {
                abstraction: Abstraction::Learned(h),
                ..
            } => Ok(Some(Cow::Owned(h.forward(z_phi)?))),
            Beliefs::Factored {
                abstraction: Abstraction::Fixed(phi),
                ..
            } => {
                check_len("abstraction index", z_phi.len(), 0)?;
                Ok(Some(Cow::Borrowed(phi)))
            }
            Beliefs::Direct(_) => Ok(None),
        }
    }

    /// The value-matrix sample for `task` given a precomputed abstraction sample.
    pub fn task_q(&self, task: usize, phi_hat: Option<&Matrix>, z_psi: &[f64]) -> Result<Matrix> {
        if task >= self.num_tasks() {
            return Err(Ps2Error::usage(format!("task {task} out of range")));
        }
        match (self, phi_hat) {
            (Beliefs::Factored { values, .. }, Some(phi_hat)) => {
                let psi_hat = values[task].forward(z_psi, phi_hat)?;
                compose_q(phi_hat, &psi_hat)
            }
            (Beliefs::Direct(models), _) => models[task].forward(z_psi),
            (Beliefs::Factored { .. }, None) => Err(Ps2Error::usage(
                "factored beliefs need an abstraction sample",
            )),
        }
    }

    /// One posterior sample of task `task`'s value matrix.
    pub fn q_sample(&self, task: usize, z_phi: &[f64], z_psi: &[f64]) -> Result<Matrix> {
        let phi_hat = self.abstraction_sample(z_phi)?;
        self.task_q(task, phi_hat.as_deref(), z_psi)
    }

    /// K independent posterior samples of task `task`'s value matrix.
    pub fn draw_q_samples<R: Rng + ?Sized>(
        &self,
        task: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<QSampleSet> {
        let dims = self.index_config();
        let mut samples = Vec::with_capacity(k);
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            let z_phi = draw_normal(dims.dim_phi, rng);
            let z_psi = draw_normal(dims.dim_psi, rng);
            samples.push(self.q_sample(task, &z_phi, &z_psi)?);
            indices.push(IndexDraw {
                z_phi,
                z_psi: vec![z_psi],
            });
        }
        QSampleSet::new(samples)?.with_indices(indices)
    }

    /// K samples per task where every task reuses the same K abstraction
    /// indices and draws its own value indices.
    pub fn draw_q_samples_shared<R: Rng + ?Sized>(
        &self,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<QSampleSet>> {
        let num_tasks = self.num_tasks();
        let mut per_task: Vec<Vec<Matrix>> = vec![Vec::with_capacity(k); num_tasks];
        for _ in 0..k {
            let draw = self.sample_draw(rng);
            let phi_hat = self.abstraction_sample(&draw.z_phi)?;
            for (task, z_psi) in draw.z_psi.iter().enumerate() {
                per_task[task].push(self.task_q(task, phi_hat.as_deref(), z_psi)?);
            }
        }
        per_task.into_iter().map(QSampleSet::new).collect()
    }

    /// Trainable parameter blocks in flattening order.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut blocks: Vec<&[f64]> = Vec::new();
        match self {
            Beliefs::Factored {
                abstraction,
                values,
            } => {
                if let Abstraction::Learned(h) = abstraction {
                    blocks.push(&h.mu);
                    blocks.push(&h.scale);
                }
                for v in values {
                    blocks.push(&v.w);
                    blocks.push(&v.b);
                    blocks.push(&v.scale);
                }
            }
            Beliefs::Direct(models) => {
                for h in models {
                    blocks.push(&h.mu);
                    blocks.push(&h.scale);
                }
            }
        }
        blocks
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut blocks: Vec<&mut [f64]> = Vec::new();
        match self {
            Beliefs::Factored {
                abstraction,
                values,
            } => {
                if let Abstraction::Learned(h) = abstraction {
                    blocks.push(&mut h.mu);
                    blocks.push(&mut h.scale);
                }
                for v in values {
                    blocks.push(&mut v.w);
                    blocks.push(&mut v.b);
                    blocks.push(&mut v.scale);
                }
            }
            Beliefs::Direct(models) => {
                for h in models {
                    blocks.push(&mut h.mu);
                    blocks.push(&mut h.scale);
                }
            }
        }
        blocks
    }

    pub fn num_params(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.param_blocks().concat()
    }

    /// Overwrites every trainable parameter from a flat vector.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameter vector", flat.len(), self.num_params())?;
        let mut offset = 0;
        for block in self.param_blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Same structure with every trainable parameter set to zero.
    pub fn zeros_like(&self) -> Beliefs {
        let mut out = self.clone();
        for block in out.param_blocks_mut() {
            block.fill(0.0);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
