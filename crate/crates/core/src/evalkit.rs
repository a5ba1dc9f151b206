//! Metric-slot routing and report aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecoderConfig};
use crate::executor::{mean, Executor};
use crate::par::{self, Parallelism};
use crate::plan::TaskSpec;
use crate::policy::Policy;
use crate::registry::{Modality, ToolRegistry};
use crate::simkit::{similarity, Payload, Score, SemanticId, SimParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricSlot {
    #[serde(rename = "CLIP")]
    Clip,
    #[serde(rename = "BERT")]
    Bert,
    #[serde(rename = "ViT")]
    Vit,
}

impl MetricSlot {
    pub const ALL: [MetricSlot; 3] = [MetricSlot::Clip, MetricSlot::Bert, MetricSlot::Vit];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricSlot::Clip => "CLIP",
            MetricSlot::Bert => "BERT",
            MetricSlot::Vit => "ViT",
        }
    }
}

impl fmt::Display for MetricSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Slot for a task with the given reference semantics and output modality.
pub fn slot_for(reference_builder: &[SemanticId], output: Modality) -> MetricSlot {
    if reference_builder.last() == Some(&SemanticId::Generate) {
        MetricSlot::Clip
    } else if output == Modality::Text {
        MetricSlot::Bert
    } else {
        MetricSlot::Vit
    }
}

pub fn assign_slot(task: &TaskSpec) -> MetricSlot {
    slot_for(&task.reference_builder, task.output_modality)
}

/// Compares an output payload with its reference; must return a value in [0, 1].
pub trait Scorer: Sync {
    fn score(&self, output: &Payload, reference: &Payload) -> Score;
}

/// The simulator's symbolic similarity.
#[derive(Debug, Clone, Copy, Default)]
pub struct SymbolicScorer(pub SimParams);

impl Scorer for SymbolicScorer {
    fn score(&self, output: &Payload, reference: &Payload) -> Score {
        similarity(output, reference, &self.0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no tasks to evaluate")]
    EmptyTaskList,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub decoder: DecoderConfig,
    pub sim: SimParams,
    pub parallelism: Parallelism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub slot: MetricSlot,
    pub score: f64,
    /// Canonical key of the top decoded plan; absent when decoding failed.
    pub plan: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub task_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    #[serde(rename = "CLIP")]
    pub clip: f64,
    #[serde(rename = "BERT")]
    pub bert: f64,
    #[serde(rename = "ViT")]
    pub vit: f64,
    pub overall: f64,
    pub tasks: Vec<TaskResult>,
    pub failures: Vec<Failure>,
}

impl ReportTable {
    /// Aggregates task results; slots without tasks count as 0.
    pub fn from_results(tasks: Vec<TaskResult>, failures: Vec<Failure>) -> Self {
        let slot_mean = |slot| mean(tasks.iter().filter(|t| t.slot == slot).map(|t| t.score));
        let clip = slot_mean(MetricSlot::Clip);
        let bert = slot_mean(MetricSlot::Bert);
        let vit = slot_mean(MetricSlot::Vit);
        Self {
            clip,
            bert,
            vit,
            overall: (clip + bert + vit) / 3.0,
            tasks,
            failures,
        }
    }

    pub fn slot(&self, slot: MetricSlot) -> f64 {
        match slot {
            MetricSlot::Clip => self.clip,
            MetricSlot::Bert => self.bert,
            MetricSlot::Vit => self.vit,
        }
    }

    /// Mean of per-task scores, ignoring slots.
    pub fn task_mean(&self) -> f64 {
        mean(self.tasks.iter().map(|t| t.score))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Decodes the top plan for every task, runs it and aggregates by slot.
pub fn evaluate(policy: &dyn Policy, tasks: &[TaskSpec], reg: &ToolRegistry, cfg: &EvalConfig) -> Result<ReportTable, EvalError> {
    evaluate_with(policy, tasks, reg, cfg, &SymbolicScorer(cfg.sim))
}

pub fn evaluate_with(
    policy: &dyn Policy,
    tasks: &[TaskSpec],
    reg: &ToolRegistry,
    cfg: &EvalConfig,
    scorer: &dyn Scorer,
) -> Result<ReportTable, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyTaskList);
    }
    let exec = Executor::new(reg, cfg.sim).with_parallelism(Parallelism::Sequential);
    let outcomes = par::map(cfg.parallelism, tasks, |task| {
        let slot = assign_slot(task);
        let decoded = decode(policy, task, reg, &cfg.decoder).map_err(|e| e.to_string());
        let top = decoded.and_then(|mut ds| ds.drain(..).next().ok_or_else(|| "no plan".to_string()));
        match top {
            Ok(d) => {
                let report = d.plan.validate(task, reg);
                if !report.is_ok() {
                    return (
                        TaskResult {
                            task_id: task.id.clone(),
                            slot,
                            score: 0.0,
                            plan: Some(d.plan.canonical_key()),
                        },
                        Some(format!("invalid plan: {} violation(s)", report.violations.len())),
                    );
                }
                let score = mean(task.dataset.iter().map(|s| {
                    let trace = exec.execute(&d.plan, &s.inputs);
                    match (&trace.error, &trace.final_output) {
                        (None, Some(out)) => scorer.score(out, &s.reference).value(),
                        _ => 0.0,
                    }
                }));
                (
                    TaskResult {
                        task_id: task.id.clone(),
                        slot,
                        score,
                        plan: Some(d.plan.canonical_key()),
                    },
                    None,
                )
            }
            Err(e) => (
                TaskResult {
                    task_id: task.id.clone(),
                    slot,
                    score: 0.0,
                    plan: None,
                },
                Some(e),
            ),
        }
    });
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (r, err) in outcomes {
        if let Some(error) = err {
            failures.push(Failure {
                task_id: r.task_id.clone(),
                error,
            });
        }
        results.push(r);
    }
    Ok(ReportTable::from_results(results, failures))
}

/// CSV with rows CLIP, BERT, ViT, Overall and one column per schema;
/// schemas without a table are written as `N/A`.
pub fn report_csv(columns: &[(&str, Option<&ReportTable>)]) -> String {
    let mut out = String::from("metric");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    type Column = fn(&ReportTable) -> f64;
    let rows: [(&str, Column); 4] = [
        ("CLIP", |r| r.clip),
        ("BERT", |r| r.bert),
        ("ViT", |r| r.vit),
        ("Overall", |r| r.overall),
    ];
    for (label, get) in rows {
        out.push_str(label);
        for (_, table) in columns {
            out.push(',');
            match table {
                Some(t) => out.push_str(&format!("{:.4}", get(t))),
                None => out.push_str("N/A"),
            }
        }
        out.push('\n');
    }
    out
}
