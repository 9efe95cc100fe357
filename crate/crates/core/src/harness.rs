//! Experiment execution, regret aggregation and artifact emission.
//!
//! An experiment runs every configured algorithm on `num_seeds` generated
//! problems. Seed `i` of every algorithm faces the same instance and the same
//! context stream, so differences in regret come from the agents alone.
//!
//! Outputs written to the output directory:
//!
//! - `traces.csv`: `algorithm,seed,step,inst_regret,cum_regret`, one row per
//!   (algorithm, seed, step), steps starting at 1.
//! - `summary.json`: the configuration, per-step mean cumulative regret with
//!   95% half-widths per algorithm, and a final-step table.
//! - `regret.svg`: mean cumulative regret curves with confidence bands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{make_agent, AgentConfig, AgentVariant, AlgorithmTag, RoundUpdates};
use crate::envgen::{generate_multitask_with, GeneratorOptions, MultiTaskSuite, ProblemSpec};
use crate::error::{Ps2Error, Result};
use crate::learner::LossConfig;
use crate::policy::IdsMode;
use crate::seeding::derive_seed;

/// z-value of a two-sided 95% normal interval.
const Z_95: f64 = 1.96;

const SINGLE_TASK_HORIZON: usize = 2000;
const MULTI_TASK_HORIZON: usize = 1000;

/// Flat experiment configuration; every key is optional in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub latent_rank: usize,
    pub num_tasks: usize,
    /// Steps (single task) or rounds (multi-task). Defaults to 2000 / 1000.
    pub horizon: Option<usize>,
    /// Defaults to every algorithm that applies to the task count.
    pub algorithms: Option<Vec<AlgorithmTag>>,
    pub num_seeds: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_index_samples: usize,
    /// Variance σ² of both target perturbations.
    pub noise_variance: f64,
    pub regularization: f64,
    pub prior_scale: f64,
    pub n_train_indices: usize,
    pub ids_mode: IdsMode,
    pub gamma: f64,
    pub steps_per_interaction: usize,
    /// Gradient steps of a shared-belief agent per multi-task round.
    pub round_updates: RoundUpdates,
    /// Standard deviation of additive reward noise (0 = deterministic rewards).
    pub reward_noise_std: f64,
    pub cover_abstract_states: bool,
    pub jobs: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let agent = AgentConfig::default();
        ExperimentConfig {
            num_states: 10,
            num_actions: 10,
            latent_rank: 5,
            num_tasks: 1,
            horizon: None,
            algorithms: None,
            num_seeds: 5,
            seed: 0,
            learning_rate: agent.learning_rate,
            batch_size: agent.batch_size,
            num_index_samples: agent.num_index_samples,
            noise_variance: agent.loss.sigma_psi * agent.loss.sigma_psi,
            regularization: agent.loss.lambda,
            prior_scale: agent.prior_scale,
            n_train_indices: agent.loss.n_train_indices,
            ids_mode: agent.ids_mode,
            gamma: agent.loss.gamma,
            steps_per_interaction: agent.steps_per_interaction,
            round_updates: agent.round_updates,
            reward_noise_std: 0.0,
            cover_abstract_states: false,
            jobs: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Ps2Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Ps2Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        ProblemSpec::new(self.num_states, self.num_actions, self.latent_rank)
            .with_tasks(self.num_tasks)
    }

    pub fn effective_horizon(&self) -> usize {
        self.horizon.unwrap_or(if self.num_tasks > 1 {
            MULTI_TASK_HORIZON
        } else {
            SINGLE_TASK_HORIZON
        })
    }

    pub fn effective_algorithms(&self) -> Vec<AlgorithmTag> {
        match &self.algorithms {
            Some(list) => list.clone(),
            None => AlgorithmTag::ALL
                .into_iter()
                .filter(|t| self.num_tasks > 1 || *t != AlgorithmTag::Independent)
                .collect(),
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        let sigma = self.noise_variance.max(0.0).sqrt();
        AgentConfig {
            num_index_samples: self.num_index_samples,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            prior_scale: self.prior_scale,
            ids_mode: self.ids_mode,
            steps_per_interaction: self.steps_per_interaction,
            round_updates: self.round_updates,
            loss: LossConfig {
                gamma: self.gamma,
                lambda: self.regularization,
                sigma_phi: sigma,
                sigma_psi: sigma,
                n_train_indices: self.n_train_indices,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.problem_spec().validate()?;
        if self.noise_variance < 0.0 || self.noise_variance.is_nan() {
            return Err(Ps2Error::config("noise_variance must be non-negative"));
        }
        if !(self.reward_noise_std >= 0.0) {
            return Err(Ps2Error::config("reward_noise_std must be non-negative"));
        }
        self.agent_config().validate()?;
        if self.num_seeds == 0 {
            return Err(Ps2Error::config("num_seeds must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Ps2Error::config("jobs must be at least 1"));
        }
        let algorithms = self.effective_algorithms();
        if algorithms.is_empty() {
            return Err(Ps2Error::config("no algorithms selected"));
        }
        let mut seen = algorithms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != algorithms.len() {
            return Err(Ps2Error::config("algorithm list has duplicates"));
        }
        Ok(())
    }
}

/// Regret of one (algorithm, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub algorithm: String,
    pub seed: usize,
    /// Per-step regret, summed over tasks.
    pub instantaneous: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl RegretTrace {
    pub fn from_instantaneous(algorithm: &str, seed: usize, instantaneous: Vec<f64>) -> Self {
        let cumulative = instantaneous
            .iter()
            .scan(0.0, |acc, x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        RegretTrace {
            algorithm: algorithm.to_string(),
            seed,
            instantaneous,
            cumulative,
        }
    }

    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// Environment of seed index `seed_index` under master seed `master`.
pub fn seed_environment(config: &ExperimentConfig, seed_index: usize) -> Result<MultiTaskSuite> {
    let options = GeneratorOptions {
        cover_abstract_states: config.cover_abstract_states,
    };
    generate_multitask_with(
        &config.problem_spec(),
        derive_seed(config.seed, seed_index as u64),
        &options,
    )
}

/// Runs one algorithm on seed index `seed_index`.
pub fn run_single(
    config: &ExperimentConfig,
    tag: AlgorithmTag,
    seed_index: usize,
) -> Result<RegretTrace> {
    let env_seed = derive_seed(config.seed, seed_index as u64);
    let suite = seed_environment(config, seed_index)?;
    let mut contexts = ChaCha8Rng::seed_from_u64(derive_seed(env_seed, 1));
    let mut reward_noise = ChaCha8Rng::seed_from_u64(derive_seed(env_seed, 3));
    let phi = tag.needs_true_abstraction().then_some(&suite.phi);
    let variant = AgentVariant::new(tag, config.agent_config());
    let mut agent = make_agent(
        &variant,
        &config.problem_spec(),
        phi,
        derive_seed(env_seed, 2),
    )?;

    let horizon = config.effective_horizon();
    let mut instantaneous = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let outcomes = agent.multitask_round_noisy(
            &suite,
            &mut contexts,
            config.reward_noise_std,
            &mut reward_noise,
        )?;
        instantaneous.push(outcomes.iter().map(|o| o.regret).sum());
    }
    Ok(RegretTrace::from_instantaneous(
        tag.name(),
        seed_index,
        instantaneous,
    ))
}

/// Runs every (algorithm, seed) pair, up to `config.jobs` at a time.
///
/// Traces come back ordered by the configured algorithm order, then seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RegretTrace>> {
    config.validate()?;
    let algorithms = config.effective_algorithms();
    let runs: Vec<(usize, AlgorithmTag, usize)> = algorithms
        .iter()
        .enumerate()
        .flat_map(|(i, &tag)| (0..config.num_seeds).map(move |s| (i, tag, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Ps2Error::config(format!("thread pool: {e}")))?;
    let mut traces: Vec<(usize, RegretTrace)> = pool.install(|| {
        runs.par_iter()
            .map(|&(i, tag, s)| run_single(config, tag, s).map(|t| (i, t)))
            .collect::<Result<Vec<_>>>()
    })?;
    traces.sort_by_key(|(i, t)| (*i, t.seed));
    Ok(traces.into_iter().map(|(_, t)| t).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub num_seeds: usize,
    /// Set when only one seed is available, so the half-width is reported as 0.
    pub single_seed_warning: bool,
    /// Mean cumulative regret at each step.
    pub mean: Vec<f64>,
    /// 95% confidence half-width at each step.
    pub half_width: Vec<f64>,
}

impl AlgorithmSummary {
    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }

    pub fn final_half_width(&self) -> f64 {
        self.half_width.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub algorithms: Vec<AlgorithmSummary>,
}

impl SummaryStats {
    pub fn get(&self, algorithm: &str) -> Option<&AlgorithmSummary> {
        self.algorithms.iter().find(|a| a.algorithm == algorithm)
    }
}

/// Mean and `1.96 · s / √n` half-width (sample standard deviation).
pub fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z_95 * var.sqrt() / (n as f64).sqrt())
}

/// Per-algorithm, per-step mean cumulative regret with 95% half-widths.
/// Algorithms appear in order of first occurrence.
pub fn summarize(traces: &[RegretTrace]) -> Result<SummaryStats> {
    if traces.is_empty() {
        return Err(Ps2Error::usage("no traces to summarize"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RegretTrace>> = BTreeMap::new();
    for t in traces {
        if !groups.contains_key(t.algorithm.as_str()) {
            order.push(&t.algorithm);
        }
        groups.entry(&t.algorithm).or_default().push(t);
    }
    let algorithms = order
        .into_iter()
        .map(|name| {
            let group = &groups[name];
            let steps = group[0].cumulative.len();
            if group.iter().any(|t| t.cumulative.len() != steps) {
                return Err(Ps2Error::usage(format!(
                    "traces of {name} have different lengths"
                )));
            }
            let (mean, half_width) = (0..steps)
                .map(|i| {
                    let column: Vec<f64> = group.iter().map(|t| t.cumulative[i]).collect();
                    mean_and_half_width(&column)
                })
                .unzip();
            Ok(AlgorithmSummary {
                algorithm: name.to_string(),
                num_seeds: group.len(),
                single_seed_warning: group.len() < 2,
                mean,
                half_width,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SummaryStats { algorithms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub algorithm: String,
    pub num_seeds: usize,
    pub mean: f64,
    pub half_width: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub config: Option<ExperimentConfig>,
    pub algorithms: Vec<AlgorithmSummary>,
    #[serde(rename = "final")]
    pub final_table: Vec<FinalRow>,
}

impl SummaryDocument {
    pub fn new(config: Option<&ExperimentConfig>, summary: &SummaryStats) -> Self {
        SummaryDocument {
            config: config.cloned(),
            algorithms: summary.algorithms.clone(),
            final_table: final_table(summary),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn final_table(summary: &SummaryStats) -> Vec<FinalRow> {
    summary
        .algorithms
        .iter()
        .map(|a| FinalRow {
            algorithm: a.algorithm.clone(),
            num_seeds: a.num_seeds,
            mean: a.final_mean(),
            half_width: a.final_half_width(),
        })
        .collect()
}

/// Paths of the emitted artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFiles {
    pub traces_csv: PathBuf,
    pub summary_json: PathBuf,
    pub regret_svg: PathBuf,
}

pub const TRACES_HEADER: &str = "algorithm,seed,step,inst_regret,cum_regret";

pub fn traces_to_csv(traces: &[RegretTrace]) -> String {
    let mut out =
        String::with_capacity(64 * traces.iter().map(|t| t.cumulative.len()).sum::<usize>());
    out.push_str(TRACES_HEADER);
    out.push('\n');
    for t in traces {
        for (i, (inst, cum)) in t.instantaneous.iter().zip(&t.cumulative).enumerate() {
            // `{}` on f64 prints the shortest string that round-trips exactly.
            let _ = writeln!(out, "{},{},{},{},{}", t.algorithm, t.seed, i + 1, inst, cum);
        }
    }
    out
}

/// Parses `traces.csv` back into traces, validating step order.
pub fn traces_from_csv(text: &str) -> Result<Vec<RegretTrace>> {
    let bad =
        |line: usize, msg: &str| Ps2Error::Serialization(format!("traces.csv line {line}: {msg}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == TRACES_HEADER => {}
        _ => return Err(bad(1, "missing or unexpected header")),
    }
    let mut traces: Vec<RegretTrace> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [algorithm, seed, step, inst, cum] = fields[..] else {
            return Err(bad(line_no, "expected 5 fields"));
        };
        let seed: usize = seed.parse().map_err(|_| bad(line_no, "bad seed"))?;
        let step: usize = step.parse().map_err(|_| bad(line_no, "bad step"))?;
        let inst: f64 = inst.parse().map_err(|_| bad(line_no, "bad inst_regret"))?;
        let cum: f64 = cum.parse().map_err(|_| bad(line_no, "bad cum_regret"))?;
        let continues = traces
            .last()
            .is_some_and(|t| t.algorithm == algorithm && t.seed == seed);
        if !continues {
            traces.push(RegretTrace {
                algorithm: algorithm.to_string(),
                seed,
                instantaneous: Vec::new(),
                cumulative: Vec::new(),
            });
        }
        let trace = traces.last_mut().expect("pushed above");
        if step != trace.instantaneous.len() + 1 {
            return Err(bad(line_no, "steps must be consecutive from 1"));
        }
        trace.instantaneous.push(inst);
        trace.cumulative.push(cum);
    }
    Ok(traces)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Ps2Error::io(path, e))
}

/// Writes `summary.json` and `regret.svg` into `out_dir`.
pub fn emit_summary(
    config: Option<&ExperimentConfig>,
    summary: &SummaryStats,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir).map_err(|e| Ps2Error::io(out_dir, e))?;
    let json_path = out_dir.join("summary.json");
    let doc = SummaryDocument::new(config, summary);
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    write_file(&json_path, &json)?;
    let svg_path = out_dir.join("regret.svg");
    write_file(&svg_path, &render_svg(summary))?;
    Ok((json_path, svg_path))
}

/// Writes all three artifacts into `out_dir`, creating it if needed.
pub fn emit_outputs(
    config: Option<&ExperimentConfig>,
    traces: &[RegretTrace],
    summary: &SummaryStats,
    out_dir: &Path,
) -> Result<OutputFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Ps2Error::io(out_dir, e))?;
    let traces_csv = out_dir.join("traces.csv");
    write_file(&traces_csv, &traces_to_csv(traces))?;
    let (summary_json, regret_svg) = emit_summary(config, summary, out_dir)?;
    Ok(OutputFiles {
        traces_csv,
        summary_json,
        regret_svg,
    })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f", "#8c564b", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Mean cumulative regret curves with shaded 95% bands, one `<path>` per
/// algorithm.
pub fn render_svg(summary: &SummaryStats) -> String {
    const W: f64 = 800.0;
    const H: f64 = 500.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 200.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 50.0;
    const MAX_POINTS: usize = 400;

    let steps = summary
        .algorithms
        .iter()
        .map(|a| a.mean.len())
        .max()
        .unwrap_or(0);
    let y_max = summary
        .algorithms
        .iter()
        .flat_map(|a| a.mean.iter().zip(&a.half_width).map(|(m, h)| m + h))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_of = |step: usize| LEFT + plot_w * step as f64 / steps.max(1) as f64;
    let y_of = |v: f64| TOP + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#,
        y0 = TOP + plot_h,
        x1 = LEFT + plot_w
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{y0}" stroke="black"/>"#,
        y0 = TOP + plot_h
    );
    for frac in [0.0, 0.5, 1.0] {
        let step = (steps as f64 * frac).round() as usize;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="12" text-anchor="middle">{step}</text>"#,
            x = x_of(step),
            y = TOP + plot_h + 18.0
        );
        let v = y_max * frac;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="12" text-anchor="end">{v:.1}</text>"#,
            x = LEFT - 6.0,
            y = y_of(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x:.1}" y="{y:.1}" font-size="13" text-anchor="middle">step</text>"#,
        x = LEFT + plot_w / 2.0,
        y = H - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {y:.1})">cumulative regret</text>"#,
        y = TOP + plot_h / 2.0
    );

    for (k, alg) in summary.algorithms.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let n = alg.mean.len();
        let stride = n.div_ceil(MAX_POINTS).max(1);
        let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
        if n > 0 && idx.last() != Some(&(n - 1)) {
            idx.push(n - 1);
        }
        if !idx.is_empty() {
            let upper = idx.iter().map(|&i| {
                format!(
                    "{:.2},{:.2}",
                    x_of(i + 1),
                    y_of(alg.mean[i] + alg.half_width[i])
                )
            });
            let lower = idx.iter().rev().map(|&i| {
                format!(
                    "{:.2},{:.2}",
                    x_of(i + 1),
                    y_of(alg.mean[i] - alg.half_width[i])
                )
            });
            let points: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon class="ci-band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                points.join(" ")
            );
        }
        let mut d = format!("M {:.2} {:.2}", x_of(0), y_of(0.0));
        for &i in &idx {
            let _ = write!(d, " L {:.2} {:.2}", x_of(i + 1), y_of(alg.mean[i]));
        }
        let _ = writeln!(
            svg,
            r#"<path class="series" data-algorithm="{name}" d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            name = xml_escape(&alg.algorithm)
        );
        let ly = TOP + 20.0 * k as f64 + 10.0;
        let lx = LEFT + plot_w + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{x2}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            x2 = lx + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-size="12">{name}</text>"#,
            x = lx + 26.0,
            y = ly + 4.0,
            name = xml_escape(&alg.algorithm)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
