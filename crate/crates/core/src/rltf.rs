//! Policy-gradient training from executed task reward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchgen::{oracle_best_plan_with, split_train_test, BenchError};
use crate::decoder::{sample_plan, DecodeError, DecoderConfig, SamplingMode};
use crate::evalkit::{evaluate, EvalConfig, EvalError, ReportTable};
use crate::executor::{mean, ExecError, Executor};
use crate::par::{self, Parallelism};
use crate::plan::{PlanGraph, TaskSpec};
use crate::policy::{grad_log_prob, pretrain_supervised, PolicyParams, Table, Uniform};
use crate::registry::ToolRegistry;
use crate::simkit::{Score, SimParams};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training tasks")]
    NoTasks,
    #[error("bad train config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub baseline_momentum: f64,
    pub rollouts_per_task: usize,
    pub seed: u64,
    pub sampling: DecoderConfig,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.1,
            epsilon: 0.2,
            epsilon_decay: 0.9,
            baseline_momentum: 0.9,
            rollouts_per_task: 4,
            seed: 7,
            sampling: DecoderConfig {
                mode: SamplingMode::Stochastic,
                ..DecoderConfig::default()
            },
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(TrainError::BadConfig("epsilon must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return Err(TrainError::BadConfig("baseline_momentum must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay) {
            return Err(TrainError::BadConfig("epsilon_decay must be in [0, 1]".into()));
        }
        if self.rollouts_per_task == 0 {
            return Err(TrainError::BadConfig("rollouts_per_task must be >= 1".into()));
        }
        self.sampling.check()?;
        Ok(())
    }
}

/// Moving average of batch-mean rewards.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineState {
    pub b: f64,
    pub initialized: bool,
}

impl BaselineState {
    /// `b <- rho * b + (1 - rho) * batch_mean`; the first update sets `b = batch_mean`.
    pub fn update(&mut self, batch_mean: f64, rho: f64) {
        if self.initialized {
            self.b = rho * self.b + (1.0 - rho) * batch_mean;
        } else {
            self.b = batch_mean;
            self.initialized = true;
        }
    }
}

/// Mean score of `plan` over the task dataset.
pub fn reward(task: &TaskSpec, plan: &PlanGraph, reg: &ToolRegistry) -> Result<Score, ExecError> {
    reward_with(task, plan, reg, &SimParams::default())
}

pub fn reward_with(task: &TaskSpec, plan: &PlanGraph, reg: &ToolRegistry, sim: &SimParams) -> Result<Score, ExecError> {
    let exec = Executor::new(reg, *sim).with_parallelism(Parallelism::Sequential);
    Ok(Score::new(exec.mean_score(plan, task)?))
}

/// Batch-mean advantage-weighted gradient of the sampled plans' log-probabilities.
pub fn policy_gradient(
    params: &PolicyParams,
    batch: &[(TaskSpec, PlanGraph, f64)],
    b: f64,
    reg: &ToolRegistry,
    max_tools: usize,
) -> Result<Table, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = PolicyParams::new(params.features);
    let n = batch.len() as f64;
    for (task, plan, r) in batch {
        let g = grad_log_prob(params, plan, task, reg, max_tools)?;
        total.add_scaled(&g, (r - b) / n);
    }
    Ok(total.weights)
}

/// One REINFORCE update followed by the baseline update.
pub fn reinforce_step(
    params: &PolicyParams,
    batch: &[(TaskSpec, PlanGraph, f64)],
    baseline: BaselineState,
    lr: f64,
    rho: f64,
    reg: &ToolRegistry,
    max_tools: usize,
) -> Result<(PolicyParams, BaselineState), TrainError> {
    let g = policy_gradient(params, batch, baseline.b, reg, max_tools)?;
    let mut next = params.clone();
    next.add_scaled(&g, lr);
    let mut b = baseline;
    b.update(mean(batch.iter().map(|(_, _, r)| *r)), rho);
    Ok((next, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub epsilon: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_reward,baseline,epsilon\n");
    for h in history {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", h.epoch, h.mean_reward, h.baseline, h.epsilon));
    }
    out
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn rollout_seed(seed: u64, epoch: usize, task: usize, k: usize) -> u64 {
    mix(mix(mix(seed ^ epoch as u64) ^ task as u64) ^ k as u64)
}

/// REINFORCE over the training tasks. Each epoch samples
/// `rollouts_per_task` plans per task with epsilon-mixed constrained
/// sampling, applies one update per task batch and decays epsilon.
pub fn train(
    params: &PolicyParams,
    tasks: &[TaskSpec],
    reg: &ToolRegistry,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, Vec<EpochRecord>), TrainError> {
    train_with(params, tasks, reg, cfg, &SimParams::default())
}

pub fn train_with(
    params: &PolicyParams,
    tasks: &[TaskSpec],
    reg: &ToolRegistry,
    cfg: &TrainConfig,
    sim: &SimParams,
) -> Result<(PolicyParams, Vec<EpochRecord>), TrainError> {
    cfg.check()?;
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let exec = Executor::new(reg, *sim).with_parallelism(Parallelism::Sequential);
    let max_tools = cfg.sampling.max_tools_per_branch;
    let mut p = params.clone();
    let mut baseline = BaselineState::default();
    let mut eps = cfg.epsilon;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rewards = Vec::new();
        for (ti, task) in tasks.iter().enumerate() {
            let policy = &p;
            let rollouts = par::map_range(cfg.parallelism, cfg.rollouts_per_task, |k| {
                let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, epoch, ti, k));
                let d = sample_plan(policy, task, reg, &cfg.sampling, eps, &mut rng)?;
                let r = exec.mean_score(&d.plan, task).unwrap_or(0.0);
                Ok::<_, DecodeError>((task.clone(), d.plan, r))
            });
            let batch = rollouts.into_iter().collect::<Result<Vec<_>, _>>()?;
            rewards.extend(batch.iter().map(|(_, _, r)| *r));
            let (np, nb) = reinforce_step(&p, &batch, baseline, cfg.lr, cfg.baseline_momentum, reg, max_tools)?;
            p = np;
            baseline = nb;
        }
        history.push(EpochRecord {
            epoch,
            mean_reward: mean(rewards),
            baseline: baseline.b,
            epsilon: eps,
        });
        eps *= cfg.epsilon_decay;
    }
    Ok((p, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub split_seed: u64,
    pub oracle_max_depth: Option<usize>,
    pub supervised: SupervisedConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Gold plans for supervision: the oracle plan of each task.
pub fn oracle_labels(
    tasks: &[TaskSpec],
    reg: &ToolRegistry,
    max_depth: usize,
    sim: &SimParams,
    parallelism: Parallelism,
) -> Result<Vec<(TaskSpec, PlanGraph)>, BenchError> {
    par::map(parallelism, tasks, |t| {
        oracle_best_plan_with(t, reg, max_depth, sim, Parallelism::Sequential).map(|r| (t.clone(), r.best_plan))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaComparison {
    pub zero: ReportTable,
    pub supervised: ReportTable,
    pub rltf: ReportTable,
    pub supervised_params: PolicyParams,
    pub rltf_params: PolicyParams,
    pub history: Vec<EpochRecord>,
}

impl SchemaComparison {
    /// Report columns in schema order; few-shot needs a remote model and is N/A.
    pub fn columns(&self) -> Vec<(&'static str, Option<&ReportTable>)> {
        vec![
            ("Zero", Some(&self.zero)),
            ("Few", None),
            ("Supervised", Some(&self.supervised)),
            ("RLTF", Some(&self.rltf)),
        ]
    }
}

/// Evaluates the test split under zero-shot, supervised and RLTF policies.
pub fn run_schema_comparison(catalog: &[TaskSpec], reg: &ToolRegistry, cfg: &ComparisonConfig) -> Result<SchemaComparison, TrainError> {
    let split = split_train_test(catalog, cfg.split_seed)?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let max_tools = cfg.train.sampling.max_tools_per_branch;
    let depth = cfg.oracle_max_depth.unwrap_or(max_tools);
    let labels = oracle_labels(&split.train, reg, depth, &cfg.eval.sim, cfg.train.parallelism)?;
    let init = PolicyParams::default();
    let (sup, _) = pretrain_supervised(&init, &labels, reg, cfg.supervised.epochs, cfg.supervised.lr, max_tools)?;
    let (rl, history) = train_with(&sup, &split.train, reg, &cfg.train, &cfg.eval.sim)?;
    Ok(SchemaComparison {
        zero: evaluate(&Uniform, &split.test, reg, &cfg.eval)?,
        supervised: evaluate(&sup, &split.test, reg, &cfg.eval)?,
        rltf: evaluate(&rl, &split.test, reg, &cfg.eval)?,
        supervised_params: sup,
        rltf_params: rl,
        history,
    })
}
