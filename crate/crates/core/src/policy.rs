//! Scoring of next tokens during decoding.
//!
//! [`PolicyParams`] is a log-linear table policy: the logit of a token is the
//! sum of per-feature weights over a small set of feature templates built
//! from the [`Context`]. With only the Markov template enabled it reduces to
//! a first-order table keyed by category, previous tool and branch modality.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::decoder::{replay, DecodeError, ReplayStep, Token};
use crate::plan::{Category, PlanGraph, TaskSpec};
use crate::registry::{Modality, ToolRegistry};

pub const BOS: &str = "<bos>";
pub const DONE_CUE: &str = "<done>";

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("allowed token set is empty")]
    EmptyAllowedSet,
    #[error("non-finite parameter for feature `{feature}` token `{token}`")]
    NonFinite { feature: String, token: String },
    #[error("remote policy i/o: {0}")]
    Io(String),
    #[error("remote policy protocol: {0}")]
    Protocol(String),
}

/// What the policy sees at one decoding step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub task_category: Category,
    /// `None` at the start of a branch.
    pub prev_tool: Option<String>,
    pub branch_modality: Modality,
    /// Words of the tool name emitted so far at this step; empty at a boundary.
    pub partial: String,
    /// Hint read from the task description for this branch position.
    pub cue: String,
}

/// Per-step view handed to a [`Policy`].
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub task: &'a TaskSpec,
    pub context: &'a Context,
    pub history: &'a [Token],
}

/// Token scorer. Returns log-probabilities aligned with `allowed`.
pub trait Policy: Sync {
    fn log_probs(&self, step: &StepView<'_>, allowed: &[Token]) -> Result<Vec<f64>, PolicyError>;
}

/// Log-softmax of `logits`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Equal mass on every allowed token.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uniform;

impl Policy for Uniform {
    fn log_probs(&self, _: &StepView<'_>, allowed: &[Token]) -> Result<Vec<f64>, PolicyError> {
        if allowed.is_empty() {
            return Err(PolicyError::EmptyAllowedSet);
        }
        Ok(vec![-(allowed.len() as f64).ln(); allowed.len()])
    }
}

/// Which feature templates contribute to a logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSet {
    /// (category, previous tool, branch modality, partial name)
    pub markov: bool,
    /// (description cue, partial name)
    pub cue: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self { markov: true, cue: true }
    }
}

impl FeatureSet {
    pub fn first_order() -> Self {
        Self { markov: true, cue: false }
    }

    pub fn keys(&self, ctx: &Context) -> Vec<String> {
        let mut out = Vec::with_capacity(2);
        if self.markov {
            out.push(format!(
                "m|{}|{}|{}|{}",
                ctx.task_category,
                ctx.prev_tool.as_deref().unwrap_or(BOS),
                ctx.branch_modality,
                ctx.partial
            ));
        }
        if self.cue {
            out.push(format!("c|{}|{}", ctx.cue, ctx.partial));
        }
        out
    }
}

/// Sparse feature → token → value table; used for both weights and gradients.
pub type Table = BTreeMap<String, BTreeMap<String, f64>>;

/// Learnable log-linear policy. Missing entries are 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub features: FeatureSet,
    pub weights: Table,
}

impl PolicyParams {
    pub fn new(features: FeatureSet) -> Self {
        Self {
            features,
            weights: Table::new(),
        }
    }

    pub fn get(&self, feature: &str, token: &str) -> f64 {
        self.weights.get(feature).and_then(|m| m.get(token)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, feature: &str, token: &str, v: f64) {
        self.weights.entry(feature.to_string()).or_default().insert(token.to_string(), v);
    }

    pub fn logits(&self, ctx: &Context, allowed: &[Token]) -> Vec<f64> {
        let keys = self.features.keys(ctx);
        allowed.iter().map(|t| keys.iter().map(|k| self.get(k, t.as_str())).sum()).collect()
    }

    /// `self += scale * grad`.
    pub fn add_scaled(&mut self, grad: &Table, scale: f64) {
        if scale == 0.0 {
            return;
        }
        for (f, row) in grad {
            let dst = self.weights.entry(f.clone()).or_default();
            for (t, g) in row {
                *dst.entry(t.clone()).or_insert(0.0) += scale * g;
            }
        }
    }

    pub fn check(&self) -> Result<(), PolicyError> {
        for (f, row) in &self.weights {
            for (t, v) in row {
                if !v.is_finite() {
                    return Err(PolicyError::NonFinite {
                        feature: f.clone(),
                        token: t.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(doc: &str) -> Result<Self, PolicyError> {
        let p: PolicyParams = serde_json::from_str(doc).map_err(|e| PolicyError::Protocol(e.to_string()))?;
        p.check()?;
        Ok(p)
    }
}

impl Policy for PolicyParams {
    fn log_probs(&self, step: &StepView<'_>, allowed: &[Token]) -> Result<Vec<f64>, PolicyError> {
        if allowed.is_empty() {
            return Err(PolicyError::EmptyAllowedSet);
        }
        Ok(log_softmax(&self.logits(step.context, allowed)))
    }
}

/// Log-probabilities of the allowed tokens under `params`, keyed by token.
pub fn score_tokens(params: &PolicyParams, ctx: &Context, allowed: &[Token]) -> Result<BTreeMap<Token, f64>, PolicyError> {
    if allowed.is_empty() {
        return Err(PolicyError::EmptyAllowedSet);
    }
    let lp = log_softmax(&params.logits(ctx, allowed));
    Ok(allowed.iter().cloned().zip(lp).collect())
}

fn replay_steps(plan: &PlanGraph, task: &TaskSpec, reg: &ToolRegistry, max_tools: usize) -> Result<Vec<ReplayStep>, DecodeError> {
    let report = plan.validate(task, reg);
    if !report.is_ok() {
        return Err(DecodeError::NotDecodable(format!("{} violation(s)", report.violations.len())));
    }
    replay(plan, task, reg, max_tools)
}

/// Log-probability of `plan` under `params`, replayed in decoding order.
pub fn log_prob(
    params: &PolicyParams,
    plan: &PlanGraph,
    task: &TaskSpec,
    reg: &ToolRegistry,
    max_tools: usize,
) -> Result<f64, DecodeError> {
    let steps = replay_steps(plan, task, reg, max_tools)?;
    Ok(steps.iter().map(|s| step_log_prob(params, s)).sum())
}

fn step_log_prob(params: &PolicyParams, s: &ReplayStep) -> f64 {
    let lp = log_softmax(&params.logits(&s.context, &s.allowed));
    let i = s.allowed.iter().position(|t| *t == s.chosen).expect("chosen token is allowed");
    lp[i]
}

fn step_grad(params: &PolicyParams, s: &ReplayStep, into: &mut Table) {
    let probs: Vec<f64> = log_softmax(&params.logits(&s.context, &s.allowed))
        .into_iter()
        .map(f64::exp)
        .collect();
    for key in params.features.keys(&s.context) {
        let row = into.entry(key).or_default();
        for (t, p) in s.allowed.iter().zip(&probs) {
            let hit = if *t == s.chosen { 1.0 } else { 0.0 };
            *row.entry(t.as_str().to_string()).or_insert(0.0) += hit - p;
        }
    }
}

/// Per-step softmax gradients of the log-probability of `plan`, one table
/// per decoding step.
pub fn step_gradients(
    params: &PolicyParams,
    plan: &PlanGraph,
    task: &TaskSpec,
    reg: &ToolRegistry,
    max_tools: usize,
) -> Result<Vec<(Vec<Token>, Table)>, DecodeError> {
    let steps = replay_steps(plan, task, reg, max_tools)?;
    Ok(steps
        .iter()
        .map(|s| {
            let mut t = Table::new();
            step_grad(params, s, &mut t);
            (s.allowed.clone(), t)
        })
        .collect())
}

/// Gradient of [`log_prob`] with respect to every touched weight.
pub fn grad_log_prob(
    params: &PolicyParams,
    plan: &PlanGraph,
    task: &TaskSpec,
    reg: &ToolRegistry,
    max_tools: usize,
) -> Result<Table, DecodeError> {
    let steps = replay_steps(plan, task, reg, max_tools)?;
    let mut g = Table::new();
    for s in &steps {
        step_grad(params, s, &mut g);
    }
    Ok(g)
}

/// Gradient ascent on the summed log-likelihood of gold plans. Returns the
/// updated parameters and the mean negative log-likelihood before each epoch.
pub fn pretrain_supervised(
    params: &PolicyParams,
    labeled: &[(TaskSpec, PlanGraph)],
    reg: &ToolRegistry,
    epochs: usize,
    lr: f64,
    max_tools: usize,
) -> Result<(PolicyParams, Vec<f64>), DecodeError> {
    let mut p = params.clone();
    let mut losses = Vec::with_capacity(epochs);
    let replays: Vec<Vec<ReplayStep>> = labeled
        .iter()
        .map(|(task, plan)| replay_steps(plan, task, reg, max_tools))
        .collect::<Result<_, _>>()?;
    if labeled.is_empty() {
        return Ok((p, losses));
    }
    for _ in 0..epochs {
        let mut grad = Table::new();
        let mut nll = 0.0;
        for steps in &replays {
            for s in steps {
                nll -= step_log_prob(&p, s);
                step_grad(&p, s, &mut grad);
            }
        }
        losses.push(nll / labeled.len() as f64);
        p.add_scaled(&grad, lr / labeled.len() as f64);
    }
    Ok((p, losses))
}

/// Description-derived hints for each branch position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskCues {
    /// Per input, corruption cue words in restoration order.
    pub adjectives: Vec<Vec<String>>,
    /// Goal cue words in execution order.
    pub goals: Vec<String>,
}

const ADJECTIVES: [&str; 6] = ["low-resolutioned", "noisy", "blurry", "grayscale", "clozed", "German"];

fn goal_cue(phrase: &str) -> Option<&'static str> {
    let p = phrase.to_ascii_lowercase();
    let table = [
        ("translate", "translate"),
        ("class label", "label"),
        ("object", "objects"),
        ("caption", "caption"),
        ("summarize", "summarize"),
        ("sentiment", "sentiment"),
        ("generate", "generate"),
        ("answer", "answer"),
    ];
    table.iter().find(|(k, _)| p.contains(k)).map(|(_, v)| *v)
}

impl TaskCues {
    /// Parses descriptions of the form
    /// `Given <phrase> and <phrase>, how to <goal> and then <goal> step by step?`.
    /// Anything else yields no cues.
    pub fn parse(description: &str) -> Self {
        let body = description.trim().strip_prefix("Given ").unwrap_or("");
        let Some((nouns, goals)) = body.split_once(", how to ") else {
            return Self::default();
        };
        let adjectives = nouns
            .split(" and ")
            .map(|np| {
                np.split_whitespace()
                    .filter(|w| ADJECTIVES.contains(w))
                    .map(str::to_string)
                    .collect()
            })
            .collect();
        let goals = goals
            .trim_end_matches('?')
            .trim_end_matches(" step by step")
            .split(" and then ")
            .filter_map(goal_cue)
            .map(str::to_string)
            .collect();
        Self { adjectives, goals }
    }

    pub fn from_task(task: &TaskSpec) -> Self {
        Self::parse(&task.description)
    }

    /// Cue for a branch that has emitted `step` tools. Single-input tasks
    /// read adjectives then goals; multi-input branches read their own
    /// adjectives before the join and the goals after it.
    pub fn cue(&self, branch: usize, merged: bool, step: usize) -> &str {
        let adj = self.adjectives.get(branch).map(Vec::as_slice).unwrap_or(&[]);
        let found = if self.adjectives.len() <= 1 {
            adj.iter().chain(self.goals.iter()).nth(step)
        } else if merged {
            self.goals.get(step)
        } else {
            adj.get(step)
        };
        found.map_or(DONE_CUE, String::as_str)
    }
}

/// Puts all mass on a fixed token trace per task; off-trace steps are uniform.
#[derive(Debug, Clone, Default)]
pub struct OraclePolicy {
    traces: HashMap<String, Vec<Token>>,
    penalty: f64,
}

impl OraclePolicy {
    pub fn new() -> Self {
        Self {
            traces: HashMap::new(),
            penalty: 50.0,
        }
    }

    /// Registers the gold plan of a task.
    pub fn insert(&mut self, task: &TaskSpec, plan: &PlanGraph, reg: &ToolRegistry, max_tools: usize) -> Result<(), DecodeError> {
        let steps = replay(plan, task, reg, max_tools)?;
        self.traces.insert(task.id.clone(), steps.into_iter().map(|s| s.chosen).collect());
        Ok(())
    }
}

impl Policy for OraclePolicy {
    fn log_probs(&self, step: &StepView<'_>, allowed: &[Token]) -> Result<Vec<f64>, PolicyError> {
        if allowed.is_empty() {
            return Err(PolicyError::EmptyAllowedSet);
        }
        let gold = self
            .traces
            .get(&step.task.id)
            .filter(|t| t.len() > step.history.len() && t[..step.history.len()] == *step.history)
            .map(|t| &t[step.history.len()]);
        let logits: Vec<f64> = allowed
            .iter()
            .map(|a| match gold {
                Some(g) if g == a => 0.0,
                Some(_) => -self.penalty,
                None => 0.0,
            })
            .collect();
        Ok(log_softmax(&logits))
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    context: &'a Context,
    allowed: Vec<&'a str>,
}

#[derive(Deserialize)]
struct RemoteResponse {
    scores: BTreeMap<String, f64>,
}

/// Newline-delimited JSON scorer over a TCP stream. Scores are logits and
/// are renormalized over the allowed set.
pub struct RemotePolicy {
    conn: Mutex<(BufReader<TcpStream>, TcpStream)>,
}

impl RemotePolicy {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, PolicyError> {
        let io = |e: std::io::Error| PolicyError::Io(e.to_string());
        let stream = TcpStream::connect(addr).map_err(io)?;
        stream.set_read_timeout(Some(timeout)).map_err(io)?;
        stream.set_write_timeout(Some(timeout)).map_err(io)?;
        let reader = BufReader::new(stream.try_clone().map_err(io)?);
        Ok(Self {
            conn: Mutex::new((reader, stream)),
        })
    }
}

impl Policy for RemotePolicy {
    fn log_probs(&self, step: &StepView<'_>, allowed: &[Token]) -> Result<Vec<f64>, PolicyError> {
        if allowed.is_empty() {
            return Err(PolicyError::EmptyAllowedSet);
        }
        let io = |e: std::io::Error| PolicyError::Io(e.to_string());
        let req = RemoteRequest {
            context: step.context,
            allowed: allowed.iter().map(Token::as_str).collect(),
        };
        let mut line = serde_json::to_string(&req).map_err(|e| PolicyError::Protocol(e.to_string()))?;
        line.push('\n');
        let mut guard = self.conn.lock().map_err(|_| PolicyError::Io("connection poisoned".into()))?;
        let (reader, writer) = &mut *guard;
        writer.write_all(line.as_bytes()).map_err(io)?;
        writer.flush().map_err(io)?;
        let mut resp = String::new();
        if reader.read_line(&mut resp).map_err(io)? == 0 {
            return Err(PolicyError::Io("connection closed".into()));
        }
        let parsed: RemoteResponse = serde_json::from_str(&resp).map_err(|e| PolicyError::Protocol(e.to_string()))?;
        let logits = allowed
            .iter()
            .map(|t| {
                parsed
                    .scores
                    .get(t.as_str())
                    .copied()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| PolicyError::Protocol(format!("no finite score for `{t}`")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(log_softmax(&logits))
    }
}
