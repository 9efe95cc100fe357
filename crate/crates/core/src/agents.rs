//! The evaluated algorithms and their interaction loop.
//!
//! Every learning agent follows the same cycle: draw posterior value samples,
//! pick an action (variance-IDS or Thompson sampling), store the outcome with
//! freshly drawn target perturbations, and take one Adam step on the RLSVI
//! loss over a uniform minibatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envgen::{MultiTaskSuite, ProblemSpec};
use crate::error::{Ps2Error, Result};
use crate::hypermodel::{Beliefs, IndexDraw, DEFAULT_PRIOR_SCALE};
use crate::learner::{
    adam_step, make_perturbations, rlsvi_gradient, AdamState, LossConfig, ReplayBuffer, Transition,
};
use crate::matrix::Matrix;
use crate::policy::{action_stats, ids_distribution, sample_action, thompson_action, IdsMode};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmTag {
    #[serde(rename = "PS2-IDS")]
    Ps2Ids,
    #[serde(rename = "PS2-TS")]
    Ps2Ts,
    NoStateAbstraction,
    TrueStateAbstraction,
    Independent,
    Random,
}

impl AlgorithmTag {
    pub const ALL: [AlgorithmTag; 6] = [
        AlgorithmTag::Ps2Ids,
        AlgorithmTag::Ps2Ts,
        AlgorithmTag::NoStateAbstraction,
        AlgorithmTag::TrueStateAbstraction,
        AlgorithmTag::Independent,
        AlgorithmTag::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmTag::Ps2Ids => "PS2-IDS",
            AlgorithmTag::Ps2Ts => "PS2-TS",
            AlgorithmTag::NoStateAbstraction => "NoStateAbstraction",
            AlgorithmTag::TrueStateAbstraction => "TrueStateAbstraction",
            AlgorithmTag::Independent => "Independent",
            AlgorithmTag::Random => "Random",
        }
    }

    /// Whether the agent must be handed the instance's true abstraction.
    pub fn needs_true_abstraction(self) -> bool {
        self == AlgorithmTag::TrueStateAbstraction
    }
}

impl std::fmt::Display for AlgorithmTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AlgorithmTag {
    type Err = Ps2Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmTag::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Ps2Error::config(format!("unknown algorithm {s:?}")))
    }
}

/// How many gradient steps a shared-belief agent takes after a multi-task
/// round, in units of `steps_per_interaction`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundUpdates {
    /// One batch of steps per round, however many tasks were played.
    PerRound,
    /// One batch of steps per task played, the same update count that
    /// independent per-task learners receive.
    #[default]
    PerTask,
    /// One batch of steps per round, each on a minibatch holding
    /// `batch_size` transitions from every task.
    Stratified,
}

impl std::str::FromStr for RoundUpdates {
    type Err = Ps2Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-round" => Ok(RoundUpdates::PerRound),
            "per-task" => Ok(RoundUpdates::PerTask),
            "stratified" => Ok(RoundUpdates::Stratified),
            other => Err(Ps2Error::config(format!(
                "unknown round update rule {other:?} (expected per-round, per-task or stratified)"
            ))),
        }
    }
}

/// Hyperparameters shared by all learning agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Posterior samples per action selection (K).
    pub num_index_samples: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prior_scale: f64,
    pub ids_mode: IdsMode,
    pub steps_per_interaction: usize,
    pub round_updates: RoundUpdates,
    pub loss: LossConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            num_index_samples: 128,
            batch_size: 1024,
            learning_rate: 0.001,
            prior_scale: DEFAULT_PRIOR_SCALE,
            ids_mode: IdsMode::SquaredExpectation,
            steps_per_interaction: 1,
            round_updates: RoundUpdates::default(),
            loss: LossConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.num_index_samples == 0 || self.batch_size == 0 {
            return Err(Ps2Error::config(
                "num_index_samples and batch_size must be at least 1",
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.prior_scale >= 0.0) {
            return Err(Ps2Error::config(
                "learning_rate must be positive and prior_scale non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentVariant {
    pub tag: AlgorithmTag,
    pub config: AgentConfig,
}

impl AgentVariant {
    pub fn new(tag: AlgorithmTag, config: AgentConfig) -> Self {
        AgentVariant { tag, config }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActionRule {
    Ids(IdsMode),
    Thompson,
}

/// A learning agent: beliefs, the frozen initial snapshot, replay, and Adam.
#[derive(Debug, Clone)]
pub struct LearningAgent {
    beliefs: Beliefs,
    initial: Beliefs,
    buffer: ReplayBuffer,
    optimizer: AdamState,
    rng: ChaCha8Rng,
    config: AgentConfig,
    rule: ActionRule,
}

impl LearningAgent {
    fn new(beliefs: Beliefs, config: AgentConfig, rule: ActionRule, seed: u64) -> Self {
        let optimizer = AdamState::new(beliefs.num_params(), config.learning_rate);
        LearningAgent {
            initial: beliefs.clone(),
            buffer: ReplayBuffer::new(beliefs.index_config()),
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
            rule,
            beliefs,
        }
    }

    pub fn beliefs(&self) -> &Beliefs {
        &self.beliefs
    }

    /// Parameters at construction; anchors the regularizer.
    pub fn initial_beliefs(&self) -> &Beliefs {
        &self.initial
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    /// Overwrites the current beliefs (same structure required).
    pub fn set_beliefs(&mut self, beliefs: Beliefs) -> Result<()> {
        if beliefs.num_params() != self.beliefs.num_params()
            || beliefs.index_config() != self.beliefs.index_config()
        {
            return Err(Ps2Error::usage("replacement beliefs differ in structure"));
        }
        self.beliefs = beliefs;
        Ok(())
    }

    fn choose(&mut self, samples: &crate::hypermodel::QSampleSet, s: usize) -> Result<usize> {
        match self.rule {
            ActionRule::Thompson => Ok(thompson_action(&samples.samples()[0], s)),
            ActionRule::Ids(mode) => {
                let stats = action_stats(samples, s)?;
                let policy = ids_distribution(&stats.delta_hat, &stats.v_hat, mode)?;
                Ok(sample_action(&policy, &mut self.rng))
            }
        }
    }

    fn samples_per_decision(&self) -> usize {
        match self.rule {
            ActionRule::Thompson => 1,
            ActionRule::Ids(_) => self.config.num_index_samples,
        }
    }

    /// Selects an action for context `s` of task `task`.
    pub fn act(&mut self, task: usize, s: usize) -> Result<usize> {
        if s >= self.beliefs.num_states() {
            return Err(Ps2Error::usage(format!("state {s} out of range")));
        }
        let k = self.samples_per_decision();
        let samples = self.beliefs.draw_q_samples(task, k, &mut self.rng)?;
        self.choose(&samples, s)
    }

    /// Selects one action per task, where `states[t]` is task t's context and
    /// all tasks share the same abstraction indices.
    pub fn act_shared(&mut self, states: &[usize]) -> Result<Vec<usize>> {
        if states.len() != self.beliefs.num_tasks() {
            return Err(Ps2Error::usage("one context per task required"));
        }
        let k = self.samples_per_decision();
        let sets = self.beliefs.draw_q_samples_shared(k, &mut self.rng)?;
        sets.iter()
            .zip(states)
            .map(|(set, &s)| self.choose(set, s))
            .collect()
    }

    /// Stores one bandit outcome with fresh perturbations (no update).
    pub fn store(&mut self, task: usize, s: usize, a: usize, r: f64) -> Result<()> {
        let (eta_phi, eta_psi) = make_perturbations(
            &self.config.loss,
            self.beliefs.index_config(),
            &mut self.rng,
        );
        self.buffer.add(Transition {
            task_id: task,
            state: s,
            action: a,
            reward: r,
            next_state: s,
            terminal: true,
            eta_phi,
            eta_psi,
        })
    }

    /// One Adam step on a fresh minibatch and fresh training indices.
    /// A no-op while the buffer is empty.
    pub fn train_step(&mut self) -> Result<()> {
        self.train_step_with(false)
    }

    fn train_step_with(&mut self, per_task: bool) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let picks = if per_task {
            self.buffer
                .sample_indices_per_task(self.config.batch_size, &mut self.rng)?
        } else {
            self.buffer
                .sample_indices(self.config.batch_size, &mut self.rng)?
        };
        let batch: Vec<&Transition> = picks
            .iter()
            .map(|&i| self.buffer.get(i).expect("sampled index in range"))
            .collect();
        let draws: Vec<IndexDraw> = (0..self.config.loss.n_train_indices)
            .map(|_| self.beliefs.sample_draw(&mut self.rng))
            .collect();
        let grad = rlsvi_gradient(
            &self.beliefs,
            &self.initial,
            &batch,
            &draws,
            &self.config.loss,
        )?;
        let mut flat = self.beliefs.flatten();
        adam_step(&mut flat, &grad, &mut self.optimizer)?;
        self.beliefs.assign_flat(&flat)
    }

    /// Store, then run the configured number of gradient steps.
    pub fn observe(&mut self, task: usize, s: usize, a: usize, r: f64) -> Result<()> {
        self.store(task, s, a, r)?;
        for _ in 0..self.config.steps_per_interaction {
            self.train_step()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum AgentKind {
    Random {
        num_actions: usize,
        rng: ChaCha8Rng,
    },
    Learner(Box<LearningAgent>),
    /// One isolated single-task learner per task.
    Independent(Vec<LearningAgent>),
}

/// One of the six evaluated algorithms.
#[derive(Debug, Clone)]
pub struct Agent {
    tag: AlgorithmTag,
    spec: ProblemSpec,
    kind: AgentKind,
}

/// What happened in one task during a multi-task round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    pub task: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub regret: f64,
}

/// Seed of member `task` of an Independent agent built with `seed`.
pub fn independent_member_seed(seed: u64, task: usize) -> u64 {
    derive_seed(seed, 1_000 + task as u64)
}

/// Builds an agent. `phi` must be supplied exactly when the variant needs
/// the true abstraction.
pub fn make_agent(
    variant: &AgentVariant,
    spec: &ProblemSpec,
    phi: Option<&Matrix>,
    seed: u64,
) -> Result<Agent> {
    spec.validate()?;
    variant.config.validate()?;
    let (s, a, m, tasks) = (
        spec.num_states,
        spec.num_actions,
        spec.latent_rank,
        spec.num_tasks,
    );
    match (variant.tag.needs_true_abstraction(), phi) {
        (true, None) => {
            return Err(Ps2Error::usage(
                "TrueStateAbstraction requires the instance's phi",
            ))
        }
        (false, Some(_)) => {
            return Err(Ps2Error::usage(format!(
                "{} must not be given the true abstraction",
                variant.tag
            )))
        }
        _ => {}
    }
    let cfg = variant.config;
    let ids = ActionRule::Ids(cfg.ids_mode);
    let learner = |beliefs: Beliefs, rule| {
        AgentKind::Learner(Box::new(LearningAgent::new(beliefs, cfg, rule, seed)))
    };
    let kind = match variant.tag {
        AlgorithmTag::Random => AgentKind::Random {
            num_actions: a,
            rng: ChaCha8Rng::seed_from_u64(seed),
        },
        AlgorithmTag::Ps2Ids => learner(Beliefs::factored(s, a, m, tasks, cfg.prior_scale)?, ids),
        AlgorithmTag::Ps2Ts => learner(
            Beliefs::factored(s, a, m, tasks, cfg.prior_scale)?,
            ActionRule::Thompson,
        ),
        AlgorithmTag::NoStateAbstraction => {
            learner(Beliefs::direct(s, a, tasks, cfg.prior_scale)?, ids)
        }
        AlgorithmTag::TrueStateAbstraction => {
            let phi = phi.expect("checked above");
            if phi.shape() != (s, m) {
                return Err(Ps2Error::usage("phi shape does not match the problem"));
            }
            learner(
                Beliefs::with_fixed_abstraction(phi.clone(), a, tasks, cfg.prior_scale)?,
                ids,
            )
        }
        AlgorithmTag::Independent => AgentKind::Independent(
            (0..tasks)
                .map(|t| {
                    Ok(LearningAgent::new(
                        Beliefs::factored(s, a, m, 1, cfg.prior_scale)?,
                        cfg,
                        ids,
                        independent_member_seed(seed, t),
                    ))
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(Agent {
        tag: variant.tag,
        spec: *spec,
        kind,
    })
}

impl Agent {
    pub fn tag(&self) -> AlgorithmTag {
        self.tag
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    /// The learner for shared-belief variants; `None` for Random and Independent.
    pub fn learner(&self) -> Option<&LearningAgent> {
        match &self.kind {
            AgentKind::Learner(l) => Some(l),
            _ => None,
        }
    }

    pub fn learner_mut(&mut self) -> Option<&mut LearningAgent> {
        match &mut self.kind {
            AgentKind::Learner(l) => Some(l),
            _ => None,
        }
    }

    /// Members of an Independent agent; empty otherwise.
    pub fn members(&self) -> &[LearningAgent] {
        match &self.kind {
            AgentKind::Independent(members) => members,
            _ => &[],
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.spec.num_tasks {
            return Err(Ps2Error::usage(format!("task {task} out of range")));
        }
        Ok(())
    }

    /// Selects an action in task 0.
    pub fn act(&mut self, s: usize) -> Result<usize> {
        self.act_in_task(0, s)
    }

    pub fn act_in_task(&mut self, task: usize, s: usize) -> Result<usize> {
        self.check_task(task)?;
        if s >= self.spec.num_states {
            return Err(Ps2Error::usage(format!("state {s} out of range")));
        }
        match &mut self.kind {
            AgentKind::Random { num_actions, rng } => Ok(rng.random_range(0..*num_actions)),
            AgentKind::Learner(l) => l.act(task, s),
            AgentKind::Independent(members) => members[task].act(0, s),
        }
    }

    /// Records an outcome in task 0 and updates the beliefs.
    pub fn observe(&mut self, s: usize, a: usize, r: f64) -> Result<()> {
        self.observe_in_task(0, s, a, r)
    }

    pub fn observe_in_task(&mut self, task: usize, s: usize, a: usize, r: f64) -> Result<()> {
        self.check_task(task)?;
        match &mut self.kind {
            AgentKind::Random { .. } => Ok(()),
            AgentKind::Learner(l) => l.observe(task, s, a, r),
            AgentKind::Independent(members) => members[task].observe(0, s, a, r),
        }
    }

    /// Plays every task of `suite` once, in task order.
    ///
    /// Contexts are drawn from `context_rng`, one per task. A shared-belief
    /// agent picks all actions from one set of abstraction indices, stores
    /// every transition, then takes its gradient steps on the combined
    /// buffer. Independent members each act and update on their own task.
    pub fn multitask_round<R: Rng + ?Sized>(
        &mut self,
        suite: &MultiTaskSuite,
        context_rng: &mut R,
    ) -> Result<Vec<RoundOutcome>> {
        // Never sampled: zero noise skips the draw.
        let mut no_noise = ChaCha8Rng::seed_from_u64(0);
        self.multitask_round_noisy(suite, context_rng, 0.0, &mut no_noise)
    }

    /// Like [`Agent::multitask_round`], with rewards perturbed by Gaussian
    /// noise of standard deviation `noise_std` drawn from `noise_rng`.
    /// Regret is always measured against the noiseless `Q*`.
    pub fn multitask_round_noisy<R: Rng + ?Sized, N: Rng + ?Sized>(
        &mut self,
        suite: &MultiTaskSuite,
        context_rng: &mut R,
        noise_std: f64,
        noise_rng: &mut N,
    ) -> Result<Vec<RoundOutcome>> {
        let mut spec = suite.spec;
        spec.num_tasks = suite.num_tasks();
        if spec != self.spec {
            return Err(Ps2Error::usage(format!(
                "agent built for {:?} cannot play suite {:?}",
                self.spec, spec
            )));
        }
        let states: Vec<usize> = suite
            .tasks
            .iter()
            .map(|task| task.sample_context(context_rng))
            .collect();
        let mut outcome = |task: usize, state: usize, action: usize| -> Result<RoundOutcome> {
            let inst = suite.task(task);
            Ok(RoundOutcome {
                task,
                state,
                action,
                reward: inst.pull_noisy(state, action, noise_std, noise_rng)?,
                regret: inst.instantaneous_regret(state, action)?,
            })
        };

        match &mut self.kind {
            AgentKind::Random { num_actions, rng } => states
                .iter()
                .enumerate()
                .map(|(t, &s)| outcome(t, s, rng.random_range(0..*num_actions)))
                .collect(),
            AgentKind::Independent(members) => {
                let mut out = Vec::with_capacity(states.len());
                for (t, (member, &s)) in members.iter_mut().zip(&states).enumerate() {
                    let a = member.act(0, s)?;
                    let o = outcome(t, s, a)?;
                    member.observe(0, s, a, o.reward)?;
                    out.push(o);
                }
                Ok(out)
            }
            AgentKind::Learner(l) => {
                let actions = l.act_shared(&states)?;
                let out = states
                    .iter()
                    .zip(&actions)
                    .enumerate()
                    .map(|(t, (&s, &a))| outcome(t, s, a))
                    .collect::<Result<Vec<_>>>()?;
                for o in &out {
                    l.store(o.task, o.state, o.action, o.reward)?;
                }
                let (rounds, stratified) = match l.config.round_updates {
                    RoundUpdates::PerRound => (1, false),
                    RoundUpdates::PerTask => (out.len(), false),
                    RoundUpdates::Stratified => (1, true),
                };
                for _ in 0..rounds * l.config.steps_per_interaction {
                    l.train_step_with(stratified)?;
                }
                Ok(out)
            }
        }
    }
}
