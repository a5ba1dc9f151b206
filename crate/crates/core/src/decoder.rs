//! Constrained decoding of tool plans.
//!
//! Tokens are whitespace-split words of tool names plus an end-of-branch
//! marker. At a name boundary the admissible names are the unused tools
//! whose first input matches the branch modality; a prefix trie over those
//! names restricts every following word. Tasks with several inputs open one
//! branch per input. Branches take turns (one tool name per turn) until each
//! emits end-of-branch; once every remaining branch is waiting, a join tool
//! merges the lowest-indexed branches matching its signature and the merged
//! branch continues until end-of-plan. Tokens that cannot lead to any
//! complete plan within the per-branch budget are never offered.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Parallelism};
use crate::plan::{NodeId, PlanGraph, PlanNode, SourceRef, TaskSpec};
use crate::policy::{Context, Policy, PolicyError, StepView, TaskCues};
use crate::registry::{Modality, ToolRegistry, ToolSpec};

pub const END_TOKEN: &str = "<end>";

/// One decoding token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Word(String),
    End,
}

impl Token {
    pub fn word(w: impl Into<String>) -> Self {
        Token::Word(w.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            Token::Word(w) => w,
            Token::End => END_TOKEN,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("cannot build a trie from an empty name set")]
    EmptyNameSet,
    #[error("duplicate name in trie: {0}")]
    DuplicateName(String),
    #[error("`{0}` is a word prefix of another tool name")]
    PrefixName(String),
    #[error("no feasible plan: every beam dead-ended")]
    NoFeasiblePlan,
    #[error("task has {found} inputs; this decoder needs {expected}")]
    WrongInputCount { expected: &'static str, found: usize },
    #[error("token `{0}` is not allowed here")]
    NotAllowed(Token),
    #[error("decoding already finished")]
    Finished,
    #[error("plan is not reachable by the decoder: {0}")]
    NotDecodable(String),
    #[error("bad decoder config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<String, usize>,
    terminal: Option<String>,
}

/// Word-level prefix trie; every name is a root-to-terminal path.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
}

impl PrefixTrie {
    pub const ROOT: usize = 0;

    pub fn children(&self, cursor: usize) -> impl Iterator<Item = &str> {
        self.nodes[cursor].children.keys().map(String::as_str)
    }

    pub fn step(&self, cursor: usize, word: &str) -> Option<usize> {
        self.nodes[cursor].children.get(word).copied()
    }

    pub fn terminal(&self, cursor: usize) -> Option<&str> {
        self.nodes[cursor].terminal.as_deref()
    }

    /// Cursor after following `words` from the root.
    pub fn walk<'w>(&self, words: impl IntoIterator<Item = &'w str>) -> Option<usize> {
        words.into_iter().try_fold(Self::ROOT, |c, w| self.step(c, w))
    }

    /// Every complete name, in lexicographic word order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![Self::ROOT];
        while let Some(c) = stack.pop() {
            if let Some(t) = &self.nodes[c].terminal {
                out.push(t.clone());
            }
            stack.extend(self.nodes[c].children.values().rev());
        }
        out
    }
}

/// Builds the trie over `names`. A name may not be a word prefix of another.
pub fn build_trie<S: AsRef<str>>(names: &[S]) -> Result<PrefixTrie, DecodeError> {
    if names.is_empty() {
        return Err(DecodeError::EmptyNameSet);
    }
    let mut trie = PrefixTrie {
        nodes: vec![TrieNode::default()],
    };
    for name in names {
        let name = name.as_ref();
        let mut cur = PrefixTrie::ROOT;
        let mut words = name.split_whitespace().peekable();
        if words.peek().is_none() {
            return Err(DecodeError::EmptyNameSet);
        }
        for w in words {
            if trie.nodes[cur].terminal.is_some() {
                return Err(DecodeError::PrefixName(trie.nodes[cur].terminal.clone().unwrap()));
            }
            cur = match trie.nodes[cur].children.get(w) {
                Some(&next) => next,
                None => {
                    trie.nodes.push(TrieNode::default());
                    let next = trie.nodes.len() - 1;
                    trie.nodes[cur].children.insert(w.to_string(), next);
                    next
                }
            };
        }
        if trie.nodes[cur].terminal.is_some() {
            return Err(DecodeError::DuplicateName(name.to_string()));
        }
        if !trie.nodes[cur].children.is_empty() {
            return Err(DecodeError::PrefixName(name.to_string()));
        }
        trie.nodes[cur].terminal = Some(name.to_string());
    }
    Ok(trie)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Status {
    Active,
    Waiting,
    Consumed,
}

#[derive(Debug, Clone)]
struct Branch {
    modality: Modality,
    head: SourceRef,
    tools: usize,
    prev_tool: Option<String>,
    status: Status,
    merged: bool,
}

/// Whose move it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Turn {
    Branch(usize),
    Merge,
    Done,
}

/// Incremental decoding state for one hypothesis.
#[derive(Debug, Clone)]
pub struct DecodeState<'a> {
    task: &'a TaskSpec,
    reg: &'a ToolRegistry,
    max_tools: usize,
    cues: Arc<TaskCues>,
    branches: Vec<Branch>,
    nodes: Vec<PlanNode>,
    used: BTreeSet<String>,
    turn: Turn,
    partial: Vec<String>,
    name_trie: Option<(Arc<PrefixTrie>, usize)>,
    history: Vec<Token>,
    log_prob: f64,
    output: Option<NodeId>,
    last_merge: Option<(usize, usize)>,
    /// Completable candidates and end flag at the current boundary.
    moves: OnceLock<(Vec<&'a ToolSpec>, bool)>,
}

/// Everything that decides whether a state can still finish.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct FeasKey {
    turn: Turn,
    branches: Vec<(Modality, usize, Status, bool)>,
    used: BTreeSet<String>,
}

impl<'a> DecodeState<'a> {
    pub fn new(task: &'a TaskSpec, reg: &'a ToolRegistry, max_tools: usize) -> Self {
        Self::with_cues(task, reg, max_tools, Arc::new(TaskCues::from_task(task)))
    }

    pub fn with_cues(task: &'a TaskSpec, reg: &'a ToolRegistry, max_tools: usize, cues: Arc<TaskCues>) -> Self {
        let branches = task
            .input_signature
            .iter()
            .enumerate()
            .map(|(i, m)| Branch {
                modality: *m,
                head: SourceRef::Task(i),
                tools: 0,
                prev_tool: None,
                status: Status::Active,
                merged: false,
            })
            .collect();
        Self {
            task,
            reg,
            max_tools,
            cues,
            branches,
            nodes: Vec::new(),
            used: BTreeSet::new(),
            turn: if task.input_signature.is_empty() {
                Turn::Done
            } else {
                Turn::Branch(0)
            },
            partial: Vec::new(),
            name_trie: None,
            history: Vec::new(),
            log_prob: 0.0,
            output: None,
            last_merge: None,
            moves: OnceLock::new(),
        }
    }

    pub fn turn(&self) -> Turn {
        self.turn
    }

    pub fn is_done(&self) -> bool {
        self.output.is_some()
    }

    pub fn history(&self) -> &[Token] {
        &self.history
    }

    pub fn log_prob(&self) -> f64 {
        self.log_prob
    }

    pub fn used(&self) -> &BTreeSet<String> {
        &self.used
    }

    pub fn at_name_boundary(&self) -> bool {
        self.partial.is_empty()
    }

    fn live_count(&self) -> usize {
        self.branches.iter().filter(|b| b.status != Status::Consumed).count()
    }

    /// Branch indices assigned to a join's inputs: lowest waiting index first.
    fn join_assignment(&self, spec: &ToolSpec) -> Option<Vec<usize>> {
        let mut taken = Vec::with_capacity(spec.inputs.len());
        for m in &spec.inputs {
            let pick = self
                .branches
                .iter()
                .enumerate()
                .find(|(i, b)| b.status == Status::Waiting && b.modality == *m && !taken.contains(i))
                .map(|(i, _)| i)?;
            taken.push(pick);
        }
        Some(taken)
    }

    /// Tools the constraint rules admit at the current boundary, before the
    /// completability filter.
    fn raw_candidates(&self) -> Vec<&'a ToolSpec> {
        match self.turn {
            Turn::Done => Vec::new(),
            Turn::Branch(b) => {
                let br = &self.branches[b];
                if br.tools >= self.max_tools {
                    return Vec::new();
                }
                self.reg
                    .compatible_successors(br.modality, &self.used)
                    .into_iter()
                    .filter(|t| !t.is_join())
                    .collect()
            }
            Turn::Merge => {
                if self.max_tools == 0 {
                    return Vec::new();
                }
                self.reg
                    .iter()
                    .filter(|t| t.is_join() && !self.used.contains(&t.name))
                    .filter(|t| self.join_assignment(t).is_some())
                    .collect()
            }
        }
    }

    fn raw_end_allowed(&self) -> bool {
        let Turn::Branch(b) = self.turn else { return false };
        let br = &self.branches[b];
        if self.live_count() == 1 {
            br.modality == self.task.output_modality && matches!(br.head, SourceRef::Node(_))
        } else {
            self.reg
                .iter()
                .any(|t| t.is_join() && !self.used.contains(&t.name) && t.inputs.contains(&br.modality))
        }
    }

    fn feas_key(&self) -> FeasKey {
        FeasKey {
            turn: self.turn,
            branches: self
                .branches
                .iter()
                .map(|b| (b.modality, b.tools, b.status, matches!(b.head, SourceRef::Node(_))))
                .collect(),
            used: self.used.clone(),
        }
    }

    /// Whether some sequence of moves from this boundary finishes a plan.
    fn completable(&self, memo: &mut HashMap<FeasKey, bool>) -> bool {
        if self.output.is_some() {
            return true;
        }
        if self.turn == Turn::Done {
            return false;
        }
        let key = self.feas_key();
        if let Some(&known) = memo.get(&key) {
            return known;
        }
        let mut ok = false;
        if self.raw_end_allowed() {
            let mut next = self.skeleton();
            next.end_branch();
            ok = next.completable(memo);
        }
        if !ok {
            for t in self.raw_candidates() {
                let mut next = self.skeleton();
                next.complete_tool(&t.name);
                if next.completable(memo) {
                    ok = true;
                    break;
                }
            }
        }
        memo.insert(key, ok);
        ok
    }

    /// Copy carrying only what feasibility depends on.
    fn skeleton(&self) -> Self {
        Self {
            task: self.task,
            reg: self.reg,
            max_tools: self.max_tools,
            cues: self.cues.clone(),
            branches: self.branches.clone(),
            nodes: Vec::new(),
            used: self.used.clone(),
            turn: self.turn,
            partial: Vec::new(),
            name_trie: None,
            history: Vec::new(),
            log_prob: 0.0,
            output: self.output,
            last_merge: None,
            moves: OnceLock::new(),
        }
    }

    fn moves(&self) -> &(Vec<&'a ToolSpec>, bool) {
        self.moves.get_or_init(|| {
            let mut memo = HashMap::new();
            let tools = self
                .raw_candidates()
                .into_iter()
                .filter(|t| {
                    let mut next = self.skeleton();
                    next.complete_tool(&t.name);
                    next.completable(&mut memo)
                })
                .collect();
            let end = self.raw_end_allowed() && {
                let mut next = self.skeleton();
                next.end_branch();
                next.completable(&mut memo)
            };
            (tools, end)
        })
    }

    /// Tools admissible at the current name boundary, in registry order.
    pub fn candidate_tools(&self) -> Vec<&'a ToolSpec> {
        self.moves().0.clone()
    }

    fn end_allowed(&self) -> bool {
        self.moves().1
    }

    /// Tokens admissible at this step, sorted; empty means a dead end.
    pub fn allowed(&self) -> Vec<Token> {
        if self.is_done() {
            return Vec::new();
        }
        if let Some((trie, cursor)) = &self.name_trie {
            return trie.children(*cursor).map(Token::word).collect();
        }
        let mut firsts: BTreeSet<&str> = BTreeSet::new();
        for t in self.candidate_tools() {
            if let Some(w) = t.words().next() {
                firsts.insert(w);
            }
        }
        let mut out: Vec<Token> = firsts.into_iter().map(Token::word).collect();
        if self.end_allowed() {
            out.push(Token::End);
        }
        out
    }

    /// The policy-facing summary of this step.
    pub fn context(&self) -> Context {
        let (branch, merged, step) = match self.turn {
            Turn::Branch(b) => (Some(b), self.branches[b].merged, self.branches[b].tools),
            Turn::Merge => (self.branches.iter().position(|b| b.status == Status::Waiting), true, 0),
            Turn::Done => (None, false, 0),
        };
        let br = branch.map(|b| &self.branches[b]);
        Context {
            task_category: self.task.category,
            prev_tool: br.and_then(|b| b.prev_tool.clone()),
            branch_modality: br.map_or(self.task.output_modality, |b| b.modality),
            partial: self.partial.join(" "),
            cue: self.cues.cue(branch.unwrap_or(0), merged, step).to_string(),
        }
    }

    /// Consumes one token. The token must be in [`allowed`](Self::allowed).
    pub fn advance(&mut self, tok: &Token) -> Result<(), DecodeError> {
        if self.is_done() {
            return Err(DecodeError::Finished);
        }
        let allowed = self.allowed();
        if !allowed.contains(tok) {
            return Err(DecodeError::NotAllowed(tok.clone()));
        }
        let names: Vec<&str> = if self.name_trie.is_none() {
            self.candidate_tools().iter().map(|t| t.name.as_str()).collect()
        } else {
            Vec::new()
        };
        self.moves = OnceLock::new();
        self.history.push(tok.clone());
        match tok {
            Token::End => self.end_branch(),
            Token::Word(w) => {
                let (trie, cursor) = match self.name_trie.take() {
                    Some(x) => x,
                    None => (Arc::new(build_trie(&names)?), PrefixTrie::ROOT),
                };
                let next = trie.step(cursor, w).ok_or_else(|| DecodeError::NotAllowed(tok.clone()))?;
                self.partial.push(w.clone());
                if let Some(name) = trie.terminal(next) {
                    let name = name.to_string();
                    self.partial.clear();
                    self.complete_tool(&name);
                } else {
                    self.name_trie = Some((trie, next));
                }
            }
        }
        Ok(())
    }

    fn end_branch(&mut self) {
        self.moves = OnceLock::new();
        let Turn::Branch(b) = self.turn else { return };
        if self.live_count() == 1 {
            if let SourceRef::Node(n) = self.branches[b].head {
                self.output = Some(n);
            }
            self.turn = Turn::Done;
        } else {
            self.branches[b].status = Status::Waiting;
            self.turn = self.next_turn(b);
        }
    }

    fn complete_tool(&mut self, name: &str) {
        self.moves = OnceLock::new();
        let spec = self.reg.lookup(name).expect("trie names come from the registry");
        let id = self.nodes.len();
        self.used.insert(name.to_string());
        match self.turn {
            Turn::Branch(b) => {
                let br = &mut self.branches[b];
                self.nodes.push(PlanNode {
                    id,
                    tool: name.to_string(),
                    input_refs: vec![br.head],
                });
                br.head = SourceRef::Node(id);
                br.modality = spec.output;
                br.tools += 1;
                br.prev_tool = Some(name.to_string());
                self.turn = self.next_turn(b);
            }
            Turn::Merge => {
                let picks = self.join_assignment(spec).expect("candidate joins have an assignment");
                self.nodes.push(PlanNode {
                    id,
                    tool: name.to_string(),
                    input_refs: picks.iter().map(|&i| self.branches[i].head).collect(),
                });
                let keep = *picks.iter().min().unwrap();
                for &i in &picks {
                    self.branches[i].status = Status::Consumed;
                }
                self.branches[keep] = Branch {
                    modality: spec.output,
                    head: SourceRef::Node(id),
                    tools: 1,
                    prev_tool: Some(name.to_string()),
                    status: Status::Active,
                    merged: true,
                };
                self.last_merge = Some((picks[0], picks[1.min(picks.len() - 1)]));
                self.turn = Turn::Branch(keep);
            }
            Turn::Done => unreachable!("no tokens after done"),
        }
    }

    fn next_turn(&self, from: usize) -> Turn {
        let n = self.branches.len();
        for k in 1..=n {
            let i = (from + k) % n;
            if self.branches[i].status == Status::Active {
                return Turn::Branch(i);
            }
        }
        if self.live_count() > 1 {
            Turn::Merge
        } else {
            Turn::Done
        }
    }

    /// The finished plan; `None` until the final end token.
    pub fn plan(&self) -> Option<PlanGraph> {
        self.output.map(|o| PlanGraph {
            nodes: self.nodes.clone(),
            output_node: o,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Greedy,
    Stochastic,
}

/// Decoder settings; sampling knobs only apply in stochastic mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub beam_size: usize,
    pub max_tools_per_branch: usize,
    pub mode: SamplingMode,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            beam_size: 20,
            max_tools_per_branch: 5,
            mode: SamplingMode::Greedy,
            top_k: 5,
            top_p: 0.5,
            temperature: 0.9,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

impl DecoderConfig {
    pub fn greedy(beam_size: usize) -> Self {
        Self {
            beam_size,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<(), DecodeError> {
        if self.beam_size < 1 {
            return Err(DecodeError::BadConfig("beam_size must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::BadConfig("top_p must be in (0, 1]".into()));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(DecodeError::BadConfig("temperature must be > 0".into()));
        }
        if self.top_k < 1 {
            return Err(DecodeError::BadConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// A decoded plan with its policy log-probability and token trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPlan {
    pub plan: PlanGraph,
    pub log_prob: f64,
    pub tokens: Vec<Token>,
}

/// Indices of `log_probs` kept after temperature, top-k and top-p filtering,
/// with their renormalized probabilities.
pub fn nucleus(log_probs: &[f64], allowed: &[Token], top_k: usize, top_p: f64, temperature: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| {
        log_probs[b]
            .partial_cmp(&log_probs[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| allowed[a].cmp(&allowed[b]))
    });
    let scaled: Vec<f64> = order.iter().map(|&i| log_probs[i] / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for (rank, &i) in order.iter().enumerate().take(top_k.max(1)) {
        let p = w[rank] / z;
        kept.push((i, p));
        cum += p;
        if cum >= top_p {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|(_, p)| p).sum();
    kept.into_iter().map(|(i, p)| (i, p / mass)).collect()
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

struct Expansion<'a> {
    children: Vec<DecodeState<'a>>,
}

fn expand<'a>(policy: &dyn Policy, state: &DecodeState<'a>, cfg: &DecoderConfig) -> Result<Expansion<'a>, DecodeError> {
    let allowed = state.allowed();
    if allowed.is_empty() {
        return Ok(Expansion { children: Vec::new() });
    }
    let ctx = state.context();
    let view = StepView {
        task: state.task,
        context: &ctx,
        history: &state.history,
    };
    let lps = policy.log_probs(&view, &allowed)?;
    let keep: Vec<usize> = match cfg.mode {
        SamplingMode::Greedy => (0..allowed.len()).collect(),
        SamplingMode::Stochastic => nucleus(&lps, &allowed, cfg.top_k, cfg.top_p, cfg.temperature)
            .into_iter()
            .map(|(i, _)| i)
            .collect(),
    };
    let mut children = Vec::with_capacity(keep.len());
    for i in keep {
        let mut next = state.clone();
        next.advance(&allowed[i])?;
        next.log_prob += lps[i];
        children.push(next);
    }
    Ok(Expansion { children })
}

fn rank_states(a: &(f64, &[Token]), b: &(f64, &[Token])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn search(policy: &dyn Policy, task: &TaskSpec, reg: &ToolRegistry, cfg: &DecoderConfig) -> Result<Vec<DecodedPlan>, DecodeError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut live = vec![DecodeState::new(task, reg, cfg.max_tools_per_branch)];
    let mut finished: Vec<DecodeState> = Vec::new();

    while !live.is_empty() {
        let expanded = par::map(cfg.parallelism, &live, |s| expand(policy, s, cfg));
        let mut next = Vec::new();
        for e in expanded {
            for child in e?.children {
                if child.is_done() {
                    finished.push(child);
                } else if !child.allowed().is_empty() {
                    next.push(child);
                }
            }
        }
        // single synchronization point: sort and truncate
        match cfg.mode {
            SamplingMode::Greedy => {
                next.sort_by(|a, b| rank_states(&(a.log_prob, &a.history), &(b.log_prob, &b.history)));
            }
            SamplingMode::Stochastic => {
                let mut keyed: Vec<(f64, DecodeState)> = next.into_iter().map(|s| (s.log_prob + gumbel(&mut rng), s)).collect();
                keyed.sort_by(|a, b| rank_states(&(a.0, &a.1.history), &(b.0, &b.1.history)));
                next = keyed.into_iter().map(|(_, s)| s).collect();
            }
        }
        next.truncate(cfg.beam_size);
        live = next;

        if finished.len() >= cfg.beam_size {
            finished.sort_by(|a, b| rank_states(&(a.log_prob, &a.history), &(b.log_prob, &b.history)));
            finished.truncate(cfg.beam_size);
            let worst = finished.last().map_or(f64::NEG_INFINITY, |s| s.log_prob);
            let best_live = live.iter().map(|s| s.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_live < worst {
                break;
            }
        }
    }

    let mut out: Vec<DecodedPlan> = finished
        .into_iter()
        .filter_map(|s| {
            let plan = s.plan()?;
            Some(DecodedPlan {
                plan,
                log_prob: s.log_prob,
                tokens: s.history,
            })
        })
        .filter(|d| d.plan.validate(task, reg).is_ok())
        .collect();
    out.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.plan.canonical_key().cmp(&b.plan.canonical_key()))
    });
    out.dedup_by(|a, b| a.plan.canonical_key() == b.plan.canonical_key());
    out.truncate(cfg.beam_size);
    if out.is_empty() {
        return Err(DecodeError::NoFeasiblePlan);
    }
    Ok(out)
}

/// Constrained beam search for single-input tasks.
pub fn beam_search(policy: &dyn Policy, task: &TaskSpec, reg: &ToolRegistry, cfg: &DecoderConfig) -> Result<Vec<DecodedPlan>, DecodeError> {
    if task.input_signature.len() != 1 {
        return Err(DecodeError::WrongInputCount {
            expected: "exactly 1",
            found: task.input_signature.len(),
        });
    }
    search(policy, task, reg, cfg)
}

/// Branch-and-join constrained beam search for tasks with two or more inputs.
pub fn decode_nonlinear(
    policy: &dyn Policy,
    task: &TaskSpec,
    reg: &ToolRegistry,
    cfg: &DecoderConfig,
) -> Result<Vec<DecodedPlan>, DecodeError> {
    if task.input_signature.len() < 2 {
        return Err(DecodeError::WrongInputCount {
            expected: "at least 2",
            found: task.input_signature.len(),
        });
    }
    search(policy, task, reg, cfg)
}

/// Dispatches on input count.
pub fn decode(policy: &dyn Policy, task: &TaskSpec, reg: &ToolRegistry, cfg: &DecoderConfig) -> Result<Vec<DecodedPlan>, DecodeError> {
    if task.input_signature.len() == 1 {
        beam_search(policy, task, reg, cfg)
    } else {
        decode_nonlinear(policy, task, reg, cfg)
    }
}

const MAX_SAMPLE_ATTEMPTS: usize = 64;

/// Draws one plan token by token. With probability `epsilon` a step picks
/// uniformly among allowed tokens; otherwise it samples the filtered policy
/// distribution (or takes the argmax in greedy mode). Dead ends restart the
/// draw.
pub fn sample_plan(
    policy: &dyn Policy,
    task: &TaskSpec,
    reg: &ToolRegistry,
    cfg: &DecoderConfig,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<DecodedPlan, DecodeError> {
    cfg.check()?;
    let cues = Arc::new(TaskCues::from_task(task));
    'attempt: for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let mut state = DecodeState::with_cues(task, reg, cfg.max_tools_per_branch, cues.clone());
        while !state.is_done() {
            let allowed = state.allowed();
            if allowed.is_empty() {
                continue 'attempt;
            }
            let ctx = state.context();
            let lps = policy.log_probs(
                &StepView {
                    task,
                    context: &ctx,
                    history: state.history(),
                },
                &allowed,
            )?;
            let pick = if rng.gen::<f64>() < epsilon {
                rng.gen_range(0..allowed.len())
            } else {
                match cfg.mode {
                    SamplingMode::Greedy => nucleus(&lps, &allowed, 1, 1.0, 1.0)[0].0,
                    SamplingMode::Stochastic => {
                        let kept = nucleus(&lps, &allowed, cfg.top_k, cfg.top_p, cfg.temperature);
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut chosen = kept[kept.len() - 1].0;
                        for (i, p) in &kept {
                            acc += p;
                            if u < acc {
                                chosen = *i;
                                break;
                            }
                        }
                        chosen
                    }
                }
            };
            state.advance(&allowed[pick])?;
            state.log_prob += lps[pick];
        }
        let plan = state.plan().expect("done states carry a plan");
        return Ok(DecodedPlan {
            plan,
            log_prob: state.log_prob,
            tokens: state.history,
        });
    }
    Err(DecodeError::NoFeasiblePlan)
}

/// One step of a replayed plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    pub context: Context,
    pub allowed: Vec<Token>,
    pub chosen: Token,
}

/// Reconstructs the decoder's canonical token sequence for `plan`, with the
/// allowed set and context at each step.
pub fn replay(plan: &PlanGraph, task: &TaskSpec, reg: &ToolRegistry, max_tools: usize) -> Result<Vec<ReplayStep>, DecodeError> {
    let consumers = plan.consumers();
    for (src, users) in &consumers {
        if users.len() > 1 {
            return Err(DecodeError::NotDecodable(format!("{src} feeds {} nodes", users.len())));
        }
    }
    let nodes: BTreeMap<NodeId, &PlanNode> = plan.nodes.iter().map(|n| (n.id, n)).collect();
    let mut state = DecodeState::new(task, reg, max_tools);
    let mut heads: Vec<SourceRef> = (0..task.input_signature.len()).map(SourceRef::Task).collect();
    let mut steps = Vec::new();
    let mut emitted = 0usize;

    let push = |state: &mut DecodeState, tok: Token, steps: &mut Vec<ReplayStep>| -> Result<(), DecodeError> {
        let allowed = state.allowed();
        if !allowed.contains(&tok) {
            return Err(DecodeError::NotDecodable(format!("token `{tok}` not allowed")));
        }
        steps.push(ReplayStep {
            context: state.context(),
            allowed,
            chosen: tok.clone(),
        });
        state.advance(&tok)
    };

    while !state.is_done() {
        match state.turn() {
            Turn::Branch(b) => {
                let next = consumers.get(&heads[b]).and_then(|u| u.first()).map(|id| nodes[id]);
                match next {
                    Some(n) if n.input_refs.len() == 1 => {
                        for w in n.tool.split_whitespace() {
                            push(&mut state, Token::word(w), &mut steps)?;
                        }
                        heads[b] = SourceRef::Node(n.id);
                        emitted += 1;
                    }
                    _ => push(&mut state, Token::End, &mut steps)?,
                }
            }
            Turn::Merge => {
                let join = plan
                    .nodes
                    .iter()
                    .find(|n| n.input_refs.len() > 1 && n.input_refs.iter().all(|r| heads.contains(r)))
                    .ok_or_else(|| DecodeError::NotDecodable("no join over waiting branches".into()))?;
                for w in join.tool.split_whitespace() {
                    push(&mut state, Token::word(w), &mut steps)?;
                }
                let (a, b) = state.last_merge.expect("merge recorded");
                if join.input_refs != [heads[a], heads[b]] {
                    return Err(DecodeError::NotDecodable(format!(
                        "join `{}` inputs are not in branch order",
                        join.tool
                    )));
                }
                let keep = a.min(b);
                heads[keep] = SourceRef::Node(join.id);
                emitted += 1;
            }
            Turn::Done => return Err(DecodeError::NotDecodable("decoder stalled".into())),
        }
    }
    let out = state.plan().expect("done");
    let out_id = plan.output_node;
    let reached = heads.contains(&SourceRef::Node(out_id));
    if emitted != plan.nodes.len() || !reached || out.canonical_key() != plan.canonical_key() {
        return Err(DecodeError::NotDecodable("plan has nodes the decoder cannot reach".into()));
    }
    Ok(steps)
}

/// Every plan in the decoder's space with at most `max_tools` tools per
/// branch, found by direct recursion over tool signatures (no trie, no
/// policy). Plans are returned in canonical-key order.
pub fn enumerate_plans(task: &TaskSpec, reg: &ToolRegistry, max_tools: usize) -> Vec<PlanGraph> {
    let space = PlanSpace::new(task, reg, max_tools);
    let mut out: Vec<PlanGraph> = (1..=space.max_size()).flat_map(|s| space.of_size(s)).collect();
    out.sort_by_key(|p| p.canonical_key());
    out
}

/// Chains of distinct unary tools from `start`, each with its end modality.
fn unary_chains<'r>(
    reg: &'r ToolRegistry,
    start: Modality,
    max_len: usize,
    used: &BTreeSet<&'r str>,
) -> Vec<(Vec<&'r ToolSpec>, Modality)> {
    fn go<'r>(
        reg: &'r ToolRegistry,
        m: Modality,
        left: usize,
        path: &mut Vec<&'r ToolSpec>,
        used: &BTreeSet<&'r str>,
        out: &mut Vec<(Vec<&'r ToolSpec>, Modality)>,
    ) {
        out.push((path.clone(), m));
        if left == 0 {
            return;
        }
        for t in reg.iter() {
            if t.is_join() || t.inputs[0] != m || used.contains(t.name.as_str()) || path.iter().any(|p| p.name == t.name) {
                continue;
            }
            path.push(t);
            go(reg, t.output, left - 1, path, used, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    go(reg, start, max_len, &mut Vec::new(), used, &mut out);
    out
}

fn chain_plan(nodes: &mut Vec<PlanNode>, mut head: SourceRef, chain: &[&ToolSpec]) -> SourceRef {
    for t in chain {
        let id = nodes.len();
        nodes.push(PlanNode {
            id,
            tool: t.name.clone(),
            input_refs: vec![head],
        });
        head = SourceRef::Node(id);
    }
    head
}

type Chain<'r> = (Vec<&'r ToolSpec>, Modality);

/// The decoder's plan space for one task, sliced by total tool count.
/// Single-input plans are chains; two-input plans are two branch chains, one
/// join and a tail chain, with every tool used at most once.
pub struct PlanSpace<'r> {
    task: &'r TaskSpec,
    reg: &'r ToolRegistry,
    max_tools: usize,
    /// Branch chains per input, bucketed by length.
    branches: Vec<Vec<Vec<Chain<'r>>>>,
}

impl<'r> PlanSpace<'r> {
    pub fn new(task: &'r TaskSpec, reg: &'r ToolRegistry, max_tools: usize) -> Self {
        let none = BTreeSet::new();
        let branches = task
            .input_signature
            .iter()
            .map(|m| {
                let mut buckets = vec![Vec::new(); max_tools + 1];
                for c in unary_chains(reg, *m, max_tools, &none) {
                    buckets[c.0.len()].push(c);
                }
                buckets
            })
            .collect();
        Self {
            task,
            reg,
            max_tools,
            branches,
        }
    }

    /// Largest total tool count any plan in the space can have.
    pub fn max_size(&self) -> usize {
        match self.task.input_signature.len() {
            1 => self.max_tools,
            2 if self.max_tools > 0 => 3 * self.max_tools,
            _ => 0,
        }
    }

    /// All plans with exactly `size` tools, in a fixed order.
    pub fn of_size(&self, size: usize) -> Vec<PlanGraph> {
        let out_m = self.task.output_modality;
        let mut out = Vec::new();
        match self.task.input_signature.len() {
            1 => {
                if size == 0 || size > self.max_tools {
                    return out;
                }
                for (chain, m) in &self.branches[0][size] {
                    if *m != out_m {
                        continue;
                    }
                    let mut nodes = Vec::new();
                    let SourceRef::Node(o) = chain_plan(&mut nodes, SourceRef::Task(0), chain) else {
                        unreachable!()
                    };
                    out.push(PlanGraph { nodes, output_node: o });
                }
            }
            2 => self.two_input(size, out_m, &mut out),
            _ => {}
        }
        out
    }

    fn two_input(&self, size: usize, out_m: Modality, out: &mut Vec<PlanGraph>) {
        let joins: Vec<&ToolSpec> = self.reg.iter().filter(|t| t.is_join()).collect();
        let joinable = |m: Modality| joins.iter().any(|j| j.inputs.contains(&m));
        for a in 0..=self.max_tools.min(size.saturating_sub(1)) {
            for b in 0..=self.max_tools.min(size - 1 - a) {
                let post_len = size - 1 - a - b;
                if post_len + 1 > self.max_tools {
                    continue;
                }
                for (s0, m0) in &self.branches[0][a] {
                    if !joinable(*m0) {
                        continue;
                    }
                    for (s1, m1) in &self.branches[1][b] {
                        if !joinable(*m1) || s1.iter().any(|t| s0.iter().any(|u| u.name == t.name)) {
                            continue;
                        }
                        for j in &joins {
                            // the decoder assigns each join slot the lowest matching branch
                            let order = if j.inputs[0] == *m0 && j.inputs[1] == *m1 {
                                [0usize, 1]
                            } else if j.inputs[0] == *m1 && j.inputs[1] == *m0 {
                                [1, 0]
                            } else {
                                continue;
                            };
                            let mut used: BTreeSet<&str> = s0.iter().chain(s1.iter()).map(|t| t.name.as_str()).collect();
                            used.insert(j.name.as_str());
                            for (s2, m2) in unary_chains(self.reg, j.output, post_len, &used) {
                                if s2.len() != post_len || m2 != out_m {
                                    continue;
                                }
                                let mut nodes = Vec::new();
                                let h0 = chain_plan(&mut nodes, SourceRef::Task(0), s0);
                                let h1 = chain_plan(&mut nodes, SourceRef::Task(1), s1);
                                let hs = [h0, h1];
                                let jid = nodes.len();
                                nodes.push(PlanNode {
                                    id: jid,
                                    tool: j.name.clone(),
                                    input_refs: vec![hs[order[0]], hs[order[1]]],
                                });
                                let SourceRef::Node(o) = chain_plan(&mut nodes, SourceRef::Node(jid), &s2) else {
                                    unreachable!()
                                };
                                out.push(PlanGraph { nodes, output_node: o });
                            }
                        }
                    }
                }
            }
        }
    }
}
