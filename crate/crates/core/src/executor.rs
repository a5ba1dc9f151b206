//! Stage-by-stage execution of plans over task samples.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::par::{self, Parallelism};
use crate::plan::{NodeId, PlanError, PlanGraph, SourceRef, TaskSpec, ValidationReport};
use crate::registry::ToolRegistry;
use crate::simkit::{apply_tool, similarity, Payload, Score, SimError, SimParams};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ExecError {
    #[error("plan failed validation: {} violation(s)", .0.violations.len())]
    InvalidPlan(ValidationReport),
    #[error("node {node}: {source}")]
    RuntimeModalityMismatch { node: NodeId, source: SimError },
    #[error("node {node}: {source}")]
    Sim { node: NodeId, source: SimError },
    #[error("node {node}: unknown tool `{tool}`")]
    UnknownTool { node: NodeId, tool: String },
    #[error("node {node}: task input {index} not provided")]
    MissingInput { node: NodeId, index: usize },
    #[error("node {node}: upstream node {failed} failed")]
    UpstreamError { node: NodeId, failed: NodeId },
    #[error("plan structure: {0}")]
    Structure(#[from] PlanError),
}

/// Everything produced by running a plan on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub node_outputs: BTreeMap<NodeId, Payload>,
    pub final_output: Option<Payload>,
    pub stage_timings: Vec<Duration>,
    pub error: Option<ExecError>,
}

/// One JSON-lines record of a task run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub task_id: String,
    pub plan_hash: String,
    pub score: f64,
    pub final_payload: Option<Payload>,
}

#[derive(Debug, Clone)]
pub struct Executor<'a> {
    reg: &'a ToolRegistry,
    sim: SimParams,
    parallelism: Parallelism,
}

impl<'a> Executor<'a> {
    pub fn new(reg: &'a ToolRegistry, sim: SimParams) -> Self {
        Self {
            reg,
            sim,
            parallelism: Parallelism::default(),
        }
    }

    pub fn with_parallelism(mut self, parallelism: Parallelism) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn registry(&self) -> &'a ToolRegistry {
        self.reg
    }

    pub fn sim(&self) -> &SimParams {
        &self.sim
    }

    pub fn parallelism(&self) -> Parallelism {
        self.parallelism
    }

    /// Runs `plan` on one sample, evaluating stages in order.
    pub fn execute(&self, plan: &PlanGraph, inputs: &[Payload]) -> ExecutionTrace {
        self.run(plan, inputs, None)
    }

    /// Like [`execute`](Self::execute) but visits the nodes of every stage in
    /// an order drawn from `rng`.
    pub fn execute_shuffled(&self, plan: &PlanGraph, inputs: &[Payload], rng: &mut dyn RngCore) -> ExecutionTrace {
        self.run(plan, inputs, Some(rng))
    }

    fn run(&self, plan: &PlanGraph, inputs: &[Payload], mut rng: Option<&mut dyn RngCore>) -> ExecutionTrace {
        let mut trace = ExecutionTrace {
            node_outputs: BTreeMap::new(),
            final_output: None,
            stage_timings: Vec::new(),
            error: None,
        };
        let stages = match plan.topological_stages() {
            Ok(s) => s,
            Err(e) => {
                trace.error = Some(e.into());
                return trace;
            }
        };
        let index: HashMap<NodeId, usize> = plan.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

        for stage in stages {
            let started = Instant::now();
            let mut order = stage.clone();
            if let Some(r) = rng.as_deref_mut() {
                order.shuffle(r);
            }
            let mut produced = Vec::with_capacity(order.len());
            let mut errors = Vec::new();
            for id in order {
                match self.eval_node(plan, index[&id], inputs, &trace.node_outputs) {
                    Ok(p) => produced.push((id, p)),
                    Err(e) => errors.push((id, e)),
                }
            }
            // outputs of a stage are only visible to later stages
            trace.node_outputs.extend(produced);
            trace.stage_timings.push(started.elapsed());
            if let Some((_, e)) = errors.into_iter().min_by_key(|(id, _)| *id) {
                trace.error = Some(e);
                return trace;
            }
        }
        trace.final_output = trace.node_outputs.get(&plan.output_node).cloned();
        trace
    }

    fn eval_node(&self, plan: &PlanGraph, k: usize, inputs: &[Payload], done: &BTreeMap<NodeId, Payload>) -> Result<Payload, ExecError> {
        let node = &plan.nodes[k];
        let spec = self.reg.lookup(&node.tool).ok_or_else(|| ExecError::UnknownTool {
            node: node.id,
            tool: node.tool.clone(),
        })?;
        let mut args = Vec::with_capacity(node.input_refs.len());
        for r in &node.input_refs {
            let p = match *r {
                SourceRef::Task(i) => inputs.get(i).ok_or(ExecError::MissingInput { node: node.id, index: i })?,
                SourceRef::Node(m) => done.get(&m).ok_or(ExecError::UpstreamError { node: node.id, failed: m })?,
            };
            args.push(p.clone());
        }
        apply_tool(spec.semantic, &args, &self.sim).map_err(|e| match e {
            SimError::ModalityMismatch { .. } | SimError::ArityMismatch { .. } => {
                ExecError::RuntimeModalityMismatch { node: node.id, source: e }
            }
            other => ExecError::Sim {
                node: node.id,
                source: other,
            },
        })
    }

    /// Scores one trace against a reference; failed traces score 0.
    pub fn score(&self, trace: &ExecutionTrace, reference: &Payload) -> Score {
        match (&trace.error, &trace.final_output) {
            (None, Some(out)) => similarity(out, reference, &self.sim),
            _ => Score::ZERO,
        }
    }

    /// Validates `plan` against `task`, then runs and scores every sample in
    /// dataset order.
    pub fn execute_task(&self, plan: &PlanGraph, task: &TaskSpec) -> Result<Vec<(ExecutionTrace, Score)>, ExecError> {
        let report = plan.validate(task, self.reg);
        if !report.is_ok() {
            return Err(ExecError::InvalidPlan(report));
        }
        Ok(par::map(self.parallelism, &task.dataset, |s| {
            let t = self.execute(plan, &s.inputs);
            let sc = self.score(&t, &s.reference);
            (t, sc)
        }))
    }

    /// Mean score of `plan` over the task dataset.
    pub fn mean_score(&self, plan: &PlanGraph, task: &TaskSpec) -> Result<f64, ExecError> {
        let runs = self.execute_task(plan, task)?;
        Ok(mean(runs.iter().map(|(_, s)| s.value())))
    }

    pub fn trace_records(&self, plan: &PlanGraph, task: &TaskSpec) -> Result<Vec<TraceRecord>, ExecError> {
        let hash = plan.plan_hash();
        Ok(self
            .execute_task(plan, task)?
            .into_iter()
            .map(|(t, s)| TraceRecord {
                task_id: task.id.clone(),
                plan_hash: hash.clone(),
                score: s.value(),
                final_payload: t.final_output,
            })
            .collect())
    }
}

/// Running mean in iteration order, so a constant input yields that constant
/// exactly; 0 for an empty input.
pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut m = 0.0;
    for x in xs {
        n += 1;
        m += (x - m) / n as f64;
    }
    m
}

/// Serializes records as JSON lines.
pub fn to_json_lines(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
