//! Plan graphs, task specifications, static validation and staged scheduling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evalkit::MetricSlot;
use crate::registry::{Modality, ToolRegistry};
use crate::simkit::{Corruption, Payload, SemanticId};

pub type NodeId = usize;

/// Where a node input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRef {
    Task(usize),
    Node(NodeId),
}

impl fmt::Display for SourceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceRef::Task(i) => write!(f, "${i}"),
            SourceRef::Node(n) => write!(f, "#{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanNode {
    pub id: NodeId,
    pub tool: String,
    #[serde(rename = "inputs")]
    pub input_refs: Vec<SourceRef>,
}

/// A DAG of tool invocations wired to task inputs, with one output node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanGraph {
    pub nodes: Vec<PlanNode>,
    #[serde(rename = "output")]
    pub output_node: NodeId,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("empty tool sequence")]
    Empty,
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("tool `{0}` does not take exactly one input")]
    ArityNotOne(String),
    #[error("modality break at position {0}")]
    ModalityBreak(usize),
    #[error("plan contains a cycle")]
    CycleDetected,
    #[error("node {node} references missing node {missing}")]
    MissingNode { node: NodeId, missing: NodeId },
    #[error("invalid plan document: {0}")]
    Parse(String),
}

/// One rule broken by a plan, tied to the node where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateNodeId {
        node: NodeId,
    },
    UnknownTool {
        node: NodeId,
        tool: String,
    },
    ArityMismatch {
        node: NodeId,
        expected: usize,
        found: usize,
    },
    MissingNode {
        node: NodeId,
        missing: NodeId,
    },
    BadTaskInput {
        node: NodeId,
        index: usize,
    },
    ModalityMismatch {
        node: NodeId,
        slot: usize,
        expected: Modality,
        found: Modality,
    },
    Cycle {
        node: NodeId,
    },
    UnconsumedInput {
        index: usize,
    },
    DuplicateTool {
        tool: String,
        nodes: Vec<NodeId>,
    },
    MissingOutput {
        node: NodeId,
    },
    OutputModality {
        expected: Modality,
        found: Modality,
    },
    OutputHasConsumers {
        node: NodeId,
        consumers: Vec<NodeId>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl PlanGraph {
    /// Chains unary tools: node `i` feeds node `i + 1`; node 0 reads task input 0.
    pub fn from_linear_sequence<S: AsRef<str>>(tools: &[S], reg: &ToolRegistry) -> Result<PlanGraph, PlanError> {
        if tools.is_empty() {
            return Err(PlanError::Empty);
        }
        let mut nodes = Vec::with_capacity(tools.len());
        let mut prev_out: Option<Modality> = None;
        for (i, name) in tools.iter().enumerate() {
            let name = name.as_ref();
            let spec = reg.lookup(name).ok_or_else(|| PlanError::UnknownTool(name.to_string()))?;
            if spec.arity() != 1 {
                return Err(PlanError::ArityNotOne(name.to_string()));
            }
            if let Some(m) = prev_out {
                if spec.inputs[0] != m {
                    return Err(PlanError::ModalityBreak(i));
                }
            }
            prev_out = Some(spec.output);
            let src = if i == 0 { SourceRef::Task(0) } else { SourceRef::Node(i - 1) };
            nodes.push(PlanNode {
                id: i,
                tool: name.to_string(),
                input_refs: vec![src],
            });
        }
        Ok(PlanGraph {
            output_node: nodes.len() - 1,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn tool_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.tool.as_str()).collect()
    }

    /// Consumers of each source, in node order.
    pub fn consumers(&self) -> BTreeMap<SourceRef, Vec<NodeId>> {
        let mut m: BTreeMap<SourceRef, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            for r in &n.input_refs {
                m.entry(*r).or_default().push(n.id);
            }
        }
        m
    }

    /// Statically checks the plan against a task signature.
    pub fn validate(&self, task: &TaskSpec, reg: &ToolRegistry) -> ValidationReport {
        self.validate_signature(&task.input_signature, task.output_modality, reg)
    }

    pub fn validate_signature(&self, inputs: &[Modality], output: Modality, reg: &ToolRegistry) -> ValidationReport {
        let mut v = Vec::new();
        let mut index: HashMap<NodeId, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                v.push(Violation::DuplicateNodeId { node: n.id });
            }
        }

        let mut consumed = vec![false; inputs.len()];
        for n in &self.nodes {
            if let Some(spec) = reg.lookup(&n.tool) {
                if spec.arity() != n.input_refs.len() {
                    v.push(Violation::ArityMismatch {
                        node: n.id,
                        expected: spec.arity(),
                        found: n.input_refs.len(),
                    });
                }
            } else {
                v.push(Violation::UnknownTool {
                    node: n.id,
                    tool: n.tool.clone(),
                });
            }
            for r in &n.input_refs {
                match *r {
                    SourceRef::Task(i) if i >= inputs.len() => v.push(Violation::BadTaskInput { node: n.id, index: i }),
                    SourceRef::Task(i) => consumed[i] = true,
                    SourceRef::Node(m) if !index.contains_key(&m) => v.push(Violation::MissingNode { node: n.id, missing: m }),
                    SourceRef::Node(_) => {}
                }
            }
        }

        let cyclic = self.cyclic_nodes();
        for id in &cyclic {
            v.push(Violation::Cycle { node: *id });
        }

        // modality check along every resolvable edge
        for n in &self.nodes {
            let Some(spec) = reg.lookup(&n.tool) else { continue };
            for (slot, r) in n.input_refs.iter().enumerate() {
                let Some(expected) = spec.inputs.get(slot).copied() else { continue };
                let found = match *r {
                    SourceRef::Task(i) => inputs.get(i).copied(),
                    SourceRef::Node(m) => index.get(&m).and_then(|&k| reg.lookup(&self.nodes[k].tool)).map(|s| s.output),
                };
                if let Some(found) = found {
                    if found != expected {
                        v.push(Violation::ModalityMismatch {
                            node: n.id,
                            slot,
                            expected,
                            found,
                        });
                    }
                }
            }
        }

        for (i, c) in consumed.iter().enumerate() {
            if !c {
                v.push(Violation::UnconsumedInput { index: i });
            }
        }

        let mut by_tool: BTreeMap<&str, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            by_tool.entry(&n.tool).or_default().push(n.id);
        }
        for (tool, nodes) in by_tool {
            if nodes.len() > 1 {
                v.push(Violation::DuplicateTool {
                    tool: tool.to_string(),
                    nodes,
                });
            }
        }

        match index.get(&self.output_node) {
            None => v.push(Violation::MissingOutput { node: self.output_node }),
            Some(&k) => {
                if let Some(spec) = reg.lookup(&self.nodes[k].tool) {
                    if spec.output != output {
                        v.push(Violation::OutputModality {
                            expected: output,
                            found: spec.output,
                        });
                    }
                }
                if let Some(cons) = self.consumers().get(&SourceRef::Node(self.output_node)) {
                    v.push(Violation::OutputHasConsumers {
                        node: self.output_node,
                        consumers: cons.clone(),
                    });
                }
            }
        }

        ValidationReport { violations: v }
    }

    /// Node ids that cannot be placed in a topological order.
    fn cyclic_nodes(&self) -> Vec<NodeId> {
        match self.levels() {
            Ok(_) => Vec::new(),
            Err(rest) => rest,
        }
    }

    /// Longest-path level of each node, or the ids left over when a cycle blocks Kahn's algorithm.
    fn levels(&self) -> Result<BTreeMap<NodeId, usize>, Vec<NodeId>> {
        let ids: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        let mut indeg: BTreeMap<NodeId, usize> = ids.iter().map(|&id| (id, 0)).collect();
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            for r in &n.input_refs {
                if let SourceRef::Node(m) = *r {
                    if ids.contains(&m) {
                        *indeg.get_mut(&n.id).unwrap() += 1;
                        succ.entry(m).or_default().push(n.id);
                    }
                }
            }
        }
        let mut level: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut ready: Vec<NodeId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        for id in &ready {
            level.insert(*id, 0);
        }
        while let Some(id) = ready.pop() {
            let l = level[&id];
            for &s in succ.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                let e = level.entry(s).or_insert(0);
                *e = (*e).max(l + 1);
                let d = indeg.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(s);
                }
            }
        }
        if indeg.values().all(|d| *d == 0) {
            Ok(level)
        } else {
            Err(indeg.into_iter().filter(|(_, d)| *d > 0).map(|(id, _)| id).collect())
        }
    }

    /// Groups nodes by longest path from any source. Nodes within a stage are
    /// independent; stages in order form a topological order.
    pub fn topological_stages(&self) -> Result<Vec<Vec<NodeId>>, PlanError> {
        let ids: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        for n in &self.nodes {
            for r in &n.input_refs {
                if let SourceRef::Node(m) = *r {
                    if !ids.contains(&m) {
                        return Err(PlanError::MissingNode { node: n.id, missing: m });
                    }
                }
            }
        }
        let levels = self.levels().map_err(|_| PlanError::CycleDetected)?;
        let depth = levels.values().copied().max().map_or(0, |d| d + 1);
        let mut stages = vec![Vec::new(); depth];
        for (id, l) in levels {
            stages[l].push(id);
        }
        Ok(stages)
    }

    pub fn is_nonlinear(&self) -> bool {
        if self.nodes.iter().any(|n| n.input_refs.len() == 2) {
            return true;
        }
        match self.topological_stages() {
            Ok(stages) => stages.iter().any(|s| s.len() > 1),
            Err(_) => false,
        }
    }

    /// Structural rendering rooted at the output node; independent of node ids.
    pub fn canonical_key(&self) -> String {
        let index: HashMap<NodeId, &PlanNode> = self.nodes.iter().map(|n| (n.id, n)).collect();
        let mut out = String::new();
        let mut stack = BTreeSet::new();
        render(self.output_node, &index, &mut stack, &mut out);
        out
    }

    /// Short content hash of the plan's compact JSON form.
    pub fn plan_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plan serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(doc: &str) -> Result<PlanGraph, PlanError> {
        serde_json::from_str(doc).map_err(|e| PlanError::Parse(e.to_string()))
    }
}

fn render(id: NodeId, index: &HashMap<NodeId, &PlanNode>, stack: &mut BTreeSet<NodeId>, out: &mut String) {
    let Some(node) = index.get(&id) else {
        out.push_str("<missing>");
        return;
    };
    if !stack.insert(id) {
        out.push_str("<cycle>");
        return;
    }
    out.push_str(&node.tool);
    out.push('(');
    for (k, r) in node.input_refs.iter().enumerate() {
        if k > 0 {
            out.push_str(", ");
        }
        match *r {
            SourceRef::Task(i) => out.push_str(&format!("${i}")),
            SourceRef::Node(m) => render(m, index, stack, out),
        }
    }
    out.push(')');
    stack.remove(&id);
}

/// The six task families, keyed by input and output modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ImageToImage,
    ImageToText,
    TextToImage,
    TextToText,
    ImageTextToText,
    TextTextToText,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::ImageToImage,
        Category::ImageToText,
        Category::TextToImage,
        Category::TextToText,
        Category::ImageTextToText,
        Category::TextTextToText,
    ];

    pub fn inputs(self) -> &'static [Modality] {
        use Modality::{Image, Text};
        match self {
            Category::ImageToImage | Category::ImageToText => &[Image],
            Category::TextToImage | Category::TextToText => &[Text],
            Category::ImageTextToText => &[Image, Text],
            Category::TextTextToText => &[Text, Text],
        }
    }

    pub fn output(self) -> Modality {
        match self {
            Category::ImageToImage | Category::TextToImage => Modality::Image,
            _ => Modality::Text,
        }
    }

    pub fn is_linear(self) -> bool {
        self.inputs().len() == 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::ImageToImage => "image_to_image",
            Category::ImageToText => "image_to_text",
            Category::TextToImage => "text_to_image",
            Category::TextToText => "text_to_text",
            Category::ImageTextToText => "image_text_to_text",
            Category::TextTextToText => "text_text_to_text",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One dataset row: corrupted inputs and the expected output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub inputs: Vec<Payload>,
    pub reference: Payload,
}

/// A benchmark task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub description: String,
    pub category: Category,
    pub input_signature: Vec<Modality>,
    pub output_modality: Modality,
    /// Per input, the corruptions in the order they were applied.
    pub corruption_chains: Vec<Vec<Corruption>>,
    /// Semantics applied to the clean inputs to build the reference; for
    /// multi-input tasks the first one is the join.
    pub reference_builder: Vec<SemanticId>,
    pub dataset: Vec<Sample>,
    pub metric_slot: MetricSlot,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("task {0} has an empty dataset")]
    EmptyDataset(String),
    #[error("task {task}: sample {sample} does not match the input signature")]
    SignatureMismatch { task: String, sample: usize },
}

impl TaskSpec {
    pub fn check(&self) -> Result<(), TaskError> {
        if self.dataset.is_empty() {
            return Err(TaskError::EmptyDataset(self.id.clone()));
        }
        for (i, s) in self.dataset.iter().enumerate() {
            let ok =
                s.inputs.len() == self.input_signature.len() && s.inputs.iter().zip(&self.input_signature).all(|(p, m)| p.modality == *m);
            if !ok {
                return Err(TaskError::SignatureMismatch {
                    task: self.id.clone(),
                    sample: i,
                });
            }
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.input_signature.len() == 1
    }

    /// Final semantic of the reference builder, if any.
    pub fn terminal_semantic(&self) -> Option<SemanticId> {
        self.reference_builder.last().copied()
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::registry::default_registry;
    use crate::simkit::Corruption::*;

    fn node(id: NodeId, tool: &str, refs: &[SourceRef]) -> PlanNode {
        PlanNode {
            id,
            tool: tool.into(),
            input_refs: refs.to_vec(),
        }
    }

    fn vqa_plan() -> PlanGraph {
        use SourceRef::*;
        PlanGraph {
            nodes: vec![
                node(0, "Image Denoising", &[Task(0)]),
                node(1, "Fill Mask", &[Task(1)]),
                node(2, "Image Deblurring", &[Node(0)]),
                node(3, "Visual Question Answering", &[Node(2), Node(1)]),
            ],
            output_node: 3,
        }
    }

    #[test]
    fn linear_chain() {
        let reg = default_registry();
        let p = PlanGraph::from_linear_sequence(&["Image Denoising", "Image Deblurring", "Colorization"], &reg).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.output_node, 2);
        assert_eq!(p.nodes[1].input_refs, vec![SourceRef::Node(0)]);
        assert_eq!(p.topological_stages().unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert!(!p.is_nonlinear());

        let single = PlanGraph::from_linear_sequence(&["Machine Translation"], &reg).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.topological_stages().unwrap(), vec![vec![0]]);
    }

    #[test]
    fn linear_errors() {
        let reg = default_registry();
        assert_eq!(
            PlanGraph::from_linear_sequence(&["Image Captioning", "Image Denoising"], &reg),
            Err(PlanError::ModalityBreak(1))
        );
        assert_eq!(
            PlanGraph::from_linear_sequence(&["Frobnicate"], &reg),
            Err(PlanError::UnknownTool("Frobnicate".into()))
        );
        assert_eq!(
            PlanGraph::from_linear_sequence(&["Question Answering"], &reg),
            Err(PlanError::ArityNotOne("Question Answering".into()))
        );
        assert_eq!(PlanGraph::from_linear_sequence::<&str>(&[], &reg), Err(PlanError::Empty));
    }

    #[test]
    fn validate_restoration_chain() {
        let reg = default_registry();
        let task = restoration_task(&[Gray, Blur, Noise], 2);
        let p = PlanGraph::from_linear_sequence(&["Image Denoising", "Image Deblurring", "Colorization"], &reg).unwrap();
        assert!(p.validate(&task, &reg).is_ok());
    }

    #[test]
    fn validate_flags_unconsumed_input() {
        let reg = default_registry();
        let task = vqa_task(&[Noise]);
        let p = PlanGraph::from_linear_sequence(&["Image Captioning"], &reg).unwrap();
        let r = p.validate(&task, &reg);
        assert_eq!(r.violations, vec![Violation::UnconsumedInput { index: 1 }]);
    }

    #[test]
    fn validate_flags_duplicate_tool() {
        let reg = default_registry();
        let task = restoration_task(&[Noise], 1);
        let p = PlanGraph::from_linear_sequence(&["Image Denoising", "Image Denoising"], &reg).unwrap();
        let r = p.validate(&task, &reg);
        assert!(r.violations.contains(&Violation::DuplicateTool {
            tool: "Image Denoising".into(),
            nodes: vec![0, 1]
        }));
    }

    #[test]
    fn validate_flags_modality_and_output() {
        use SourceRef::*;
        let reg = default_registry();
        let task = restoration_task(&[Noise], 1);
        let p = PlanGraph {
            nodes: vec![node(0, "Image Captioning", &[Task(0)]), node(1, "Image Denoising", &[Node(0)])],
            output_node: 0,
        };
        let r = p.validate(&task, &reg);
        assert!(r.violations.contains(&Violation::ModalityMismatch {
            node: 1,
            slot: 0,
            expected: Modality::Image,
            found: Modality::Text
        }));
        assert!(r.violations.contains(&Violation::OutputModality {
            expected: Modality::Image,
            found: Modality::Text
        }));
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::OutputHasConsumers { node: 0, .. })));
    }

    #[test]
    fn validate_flags_cycle_and_missing() {
        use SourceRef::*;
        let reg = default_registry();
        let task = restoration_task(&[Noise], 1);
        let p = PlanGraph {
            nodes: vec![
                node(0, "Image Denoising", &[Node(1)]),
                node(1, "Image Deblurring", &[Node(0)]),
                node(2, "Colorization", &[Node(7)]),
            ],
            output_node: 2,
        };
        let r = p.validate(&task, &reg);
        assert!(r.violations.contains(&Violation::Cycle { node: 0 }));
        assert!(r.violations.contains(&Violation::MissingNode { node: 2, missing: 7 }));
        assert!(r.violations.contains(&Violation::UnconsumedInput { index: 0 }));
        let cyc = PlanGraph {
            nodes: p.nodes[..2].to_vec(),
            output_node: 1,
        };
        assert_eq!(cyc.topological_stages(), Err(PlanError::CycleDetected));
    }

    #[test]
    fn vqa_stages_and_nonlinearity() {
        let reg = default_registry();
        let p = vqa_plan();
        assert!(p.validate(&vqa_task(&[Blur, Noise]), &reg).is_ok());
        assert_eq!(p.topological_stages().unwrap(), vec![vec![0, 1], vec![2], vec![3]]);
        assert!(p.is_nonlinear());
    }

    #[test]
    fn parallel_branches_without_join_are_nonlinear() {
        use SourceRef::*;
        let p = PlanGraph {
            nodes: vec![node(0, "Image Denoising", &[Task(0)]), node(1, "Fill Mask", &[Task(1)])],
            output_node: 1,
        };
        assert!(p.is_nonlinear());
    }

    #[test]
    fn canonical_key_ignores_ids() {
        let p = vqa_plan();
        let mut q = p.clone();
        for n in &mut q.nodes {
            n.id += 10;
            for r in &mut n.input_refs {
                if let SourceRef::Node(m) = r {
                    *m += 10;
                }
            }
        }
        q.output_node += 10;
        q.nodes.reverse();
        assert_eq!(p.canonical_key(), q.canonical_key());
        assert_eq!(
            p.canonical_key(),
            "Visual Question Answering(Image Deblurring(Image Denoising($0)), Fill Mask($1))"
        );
        assert_ne!(p.plan_hash(), q.plan_hash());
    }

    #[test]
    fn plan_json_shape() {
        let p = vqa_plan();
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["output"], 3);
        assert_eq!(v["nodes"][0]["inputs"], serde_json::json!([{"task": 0}]));
        assert_eq!(v["nodes"][3]["inputs"], serde_json::json!([{"node": 2}, {"node": 1}]));
        assert_eq!(PlanGraph::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn task_json_roundtrip() {
        let t = vqa_task(&[Gray]);
        let doc = serde_json::to_string(&t).unwrap();
        let back: TaskSpec = serde_json::from_str(&doc).unwrap();
        assert_eq!(back, t);
        back.check().unwrap();
    }
}
