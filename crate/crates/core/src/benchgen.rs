//! Benchmark catalog generation, brute-force oracle plans and splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::PlanSpace;
use crate::evalkit::slot_for;
use crate::executor::Executor;
use crate::par::{self, Parallelism};
use crate::plan::{Category, PlanGraph, Sample, TaskSpec};
use crate::registry::{Modality, ToolRegistry};
use crate::simkit::{apply_corruption, apply_tool, Corruption, Language, Payload, Score, SemanticId, SimError, SimParams};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BenchError {
    #[error("category {category} has {available} distinct combinations; {requested} requested")]
    InfeasibleCount {
        category: Category,
        requested: usize,
        available: usize,
    },
    #[error("samples_per_task must be >= 1")]
    NoSamples,
    #[error("no feasible plan for task {0}")]
    NoFeasiblePlan(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Tasks requested per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoryCounts {
    pub image_to_image: usize,
    pub image_to_text: usize,
    pub text_to_image: usize,
    pub text_to_text: usize,
    pub image_text_to_text: usize,
    pub text_text_to_text: usize,
}

impl Default for CategoryCounts {
    fn default() -> Self {
        Self {
            image_to_image: 47,
            image_to_text: 24,
            text_to_image: 22,
            text_to_text: 24,
            image_text_to_text: 34,
            text_text_to_text: 34,
        }
    }
}

impl CategoryCounts {
    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::ImageToImage => self.image_to_image,
            Category::ImageToText => self.image_to_text,
            Category::TextToImage => self.text_to_image,
            Category::TextToText => self.text_to_text,
            Category::ImageTextToText => self.image_text_to_text,
            Category::TextTextToText => self.text_text_to_text,
        }
    }

    pub fn total(&self) -> usize {
        Category::ALL.iter().map(|c| self.get(*c)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogConfig {
    pub counts: CategoryCounts,
    pub samples_per_task: usize,
    pub max_chain_length: usize,
    pub seed: u64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            counts: CategoryCounts::default(),
            samples_per_task: 20,
            max_chain_length: 4,
            seed: 7,
        }
    }
}

/// One feasible task shape: a corruption chain per input and the reference semantics.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Combo {
    chains: Vec<Vec<Corruption>>,
    builder: Vec<SemanticId>,
}

impl Combo {
    /// Tools an ideal plan needs, one per corruption and per reference step.
    fn required(&self) -> Vec<SemanticId> {
        self.chains
            .iter()
            .flat_map(|c| c.iter().map(|k| k.inverse()))
            .chain(self.builder.iter().copied())
            .collect()
    }

    fn feasible(&self, max_len: usize) -> bool {
        let req = self.required();
        let mut uniq = req.clone();
        uniq.sort();
        uniq.dedup();
        uniq.len() == req.len() && req.len() >= 2 && req.len() <= max_len + 1 && self.chains.iter().all(|c| c.len() <= max_len)
    }
}

fn image_chains(max_len: usize) -> Vec<Vec<Corruption>> {
    fn go(path: &mut Vec<Corruption>, max_len: usize, out: &mut Vec<Vec<Corruption>>) {
        out.push(path.clone());
        if path.len() == max_len {
            return;
        }
        for c in Corruption::IMAGE {
            if !path.contains(&c) {
                path.push(c);
                go(path, max_len, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), max_len.min(4), &mut out);
    out
}

fn text_chains(max_len: usize) -> Vec<Vec<Corruption>> {
    use Corruption::{Mask, Translate};
    [vec![], vec![Mask], vec![Translate], vec![Mask, Translate], vec![Translate, Mask]]
        .into_iter()
        .filter(|c| c.len() <= max_len)
        .collect()
}

/// Ordered selections of `min..=max` distinct items.
fn arrangements(items: &[SemanticId], min: usize, max: usize) -> Vec<Vec<SemanticId>> {
    fn go(items: &[SemanticId], max: usize, path: &mut Vec<SemanticId>, out: &mut Vec<Vec<SemanticId>>) {
        out.push(path.clone());
        if path.len() == max {
            return;
        }
        for s in items {
            if !path.contains(s) {
                path.push(*s);
                go(items, max, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(items, max, &mut Vec::new(), &mut out);
    out.retain(|a| a.len() >= min);
    out
}

fn combos(category: Category, max_len: usize) -> Vec<Combo> {
    use SemanticId::*;
    let text_ops = [Summarize, Sentiment, TranslateEnDe];
    let mut out = Vec::new();
    match category {
        Category::ImageToImage => {
            for c in image_chains(max_len) {
                out.push(Combo {
                    chains: vec![c],
                    builder: vec![],
                });
            }
        }
        Category::ImageToText => {
            for c in image_chains(max_len) {
                for t in [Classify, Detect, Caption] {
                    out.push(Combo {
                        chains: vec![c.clone()],
                        builder: vec![t],
                    });
                    out.push(Combo {
                        chains: vec![c.clone()],
                        builder: vec![t, TranslateEnDe],
                    });
                }
            }
        }
        Category::TextToImage => {
            for c in text_chains(max_len) {
                for mut pre in arrangements(&text_ops, 0, 2) {
                    pre.push(Generate);
                    out.push(Combo {
                        chains: vec![c.clone()],
                        builder: pre,
                    });
                }
            }
        }
        Category::TextToText => {
            for c in text_chains(max_len) {
                for ops in arrangements(&text_ops, 1, 2) {
                    out.push(Combo {
                        chains: vec![c.clone()],
                        builder: ops,
                    });
                }
            }
        }
        Category::ImageTextToText => {
            for c0 in image_chains(max_len) {
                for c1 in text_chains(max_len) {
                    for b in [vec![Vqa], vec![Vqa, TranslateEnDe]] {
                        out.push(Combo {
                            chains: vec![c0.clone(), c1.clone()],
                            builder: b,
                        });
                    }
                }
            }
        }
        Category::TextTextToText => {
            for c0 in text_chains(max_len) {
                for c1 in text_chains(max_len) {
                    for b in [vec![Qa], vec![Qa, TranslateEnDe], vec![Qa, Summarize], vec![Qa, Sentiment]] {
                        out.push(Combo {
                            chains: vec![c0.clone(), c1.clone()],
                            builder: b,
                        });
                    }
                }
            }
        }
    }
    out.retain(|c| c.feasible(max_len));
    out
}

/// Number of distinct task shapes a category can host.
pub fn available_combinations(category: Category, max_chain_length: usize) -> usize {
    combos(category, max_chain_length).len()
}

fn adjective(c: Corruption) -> &'static str {
    match c {
        Corruption::LowRes => "low-resolutioned",
        Corruption::Noise => "noisy",
        Corruption::Blur => "blurry",
        Corruption::Gray => "grayscale",
        Corruption::Mask => "clozed",
        Corruption::Translate => "German",
    }
}

fn noun_phrase(modality: Modality, chain: &[Corruption], noun: &str) -> String {
    let mut words: Vec<&str> = chain.iter().rev().map(|c| adjective(*c)).collect();
    if modality == Modality::Text && !chain.contains(&Corruption::Translate) {
        words.push("English");
    }
    words.push(noun);
    words.join(" ")
}

fn goal_phrase(s: SemanticId) -> &'static str {
    match s {
        SemanticId::Classify => "return the class label",
        SemanticId::Detect => "return the object names",
        SemanticId::Caption => "return a caption",
        SemanticId::Summarize => "summarize the text",
        SemanticId::Sentiment => "return the sentiment",
        SemanticId::Generate => "generate an image",
        SemanticId::Qa | SemanticId::Vqa => "answer the question",
        SemanticId::TranslateEnDe => "translate the text in German",
        _ => "return the regular image",
    }
}

fn nouns(category: Category) -> &'static [&'static str] {
    match category {
        Category::ImageToImage | Category::ImageToText => &["image"],
        Category::TextToImage | Category::TextToText => &["text"],
        Category::ImageTextToText => &["image", "question"],
        Category::TextTextToText => &["document", "query"],
    }
}

/// Natural-language task statement in the benchmark's template.
pub fn describe(category: Category, chains: &[Vec<Corruption>], builder: &[SemanticId], output_language: Language) -> String {
    let nps: Vec<String> = category
        .inputs()
        .iter()
        .zip(chains)
        .zip(nouns(category))
        .map(|((m, c), n)| noun_phrase(*m, c, n))
        .collect();
    let mut goals: Vec<String> = if builder.is_empty() {
        vec![goal_phrase(SemanticId::RemoveBlur).to_string()]
    } else {
        builder.iter().map(|s| goal_phrase(*s).to_string()).collect()
    };
    if category.output() == Modality::Text {
        let last = goals.last_mut().expect("at least one goal");
        if !last.ends_with(" in German") && !last.ends_with(" in English") {
            last.push_str(if output_language == Language::De {
                " in German"
            } else {
                " in English"
            });
        }
    }
    format!("Given {}, how to {} step by step?", nps.join(" and "), goals.join(" and then "))
}

/// Applies the reference semantics to clean inputs.
pub fn build_reference(clean: &[Payload], builder: &[SemanticId], sim: &SimParams) -> Result<Payload, SimError> {
    let mut steps = builder.iter();
    let mut acc = if clean.len() > 1 {
        let join = steps.next().copied().expect("multi-input tasks start with a join");
        apply_tool(join, clean, sim)?
    } else {
        clean[0].clone()
    };
    for s in steps {
        acc = apply_tool(*s, std::slice::from_ref(&acc), sim)?;
    }
    Ok(acc)
}

fn make_task(id: String, category: Category, combo: &Combo, samples: usize, rng: &mut ChaCha8Rng) -> Result<TaskSpec, BenchError> {
    let sim = SimParams::default();
    let mut dataset = Vec::with_capacity(samples);
    for _ in 0..samples {
        let clean: Vec<Payload> = category
            .inputs()
            .iter()
            .map(|m| {
                let tag: u32 = rng.gen();
                match m {
                    Modality::Image => Payload::image(format!("i{tag:08x}")),
                    Modality::Text => Payload::text(format!("t{tag:08x}")),
                }
            })
            .collect();
        let inputs = clean
            .iter()
            .zip(&combo.chains)
            .map(|(p, chain)| chain.iter().try_fold(p.clone(), |acc, c| apply_corruption(&acc, *c)))
            .collect::<Result<Vec<_>, _>>()?;
        let reference = build_reference(&clean, &combo.builder, &sim)?;
        dataset.push(Sample { inputs, reference });
    }
    let language = dataset[0].reference.language;
    Ok(TaskSpec {
        id,
        description: describe(category, &combo.chains, &combo.builder, language),
        category,
        input_signature: category.inputs().to_vec(),
        output_modality: category.output(),
        corruption_chains: combo.chains.clone(),
        reference_builder: combo.builder.clone(),
        dataset,
        metric_slot: slot_for(&combo.builder, category.output()),
    })
}

/// Draws the catalog: per category, a seeded shuffle of all feasible shapes,
/// truncated to the requested count.
pub fn generate_catalog(cfg: &CatalogConfig) -> Result<Vec<TaskSpec>, BenchError> {
    if cfg.samples_per_task == 0 {
        return Err(BenchError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.counts.total());
    for category in Category::ALL {
        let want = cfg.counts.get(category);
        let mut pool = combos(category, cfg.max_chain_length);
        if pool.len() < want {
            return Err(BenchError::InfeasibleCount {
                category,
                requested: want,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        for combo in pool.into_iter().take(want) {
            let id = format!("t{:03}", out.len());
            out.push(make_task(id, category, &combo, cfg.samples_per_task, &mut rng)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_plan: PlanGraph,
    pub best_reward: Score,
    pub plans_examined: usize,
}

/// Exhaustive search over the decoder's plan space with at most `max_depth`
/// tools per branch. Plans are visited by increasing tool count and the walk
/// stops once a level contains a plan scoring 1.0, since nothing later can
/// beat it under the fewer-tools tie-break. Ties go to fewer tools, then the
/// lexicographically smallest canonical key.
pub fn oracle_best_plan(task: &TaskSpec, reg: &ToolRegistry, max_depth: usize) -> Result<OracleResult, BenchError> {
    oracle_best_plan_with(task, reg, max_depth, &SimParams::default(), Parallelism::default())
}

pub fn oracle_best_plan_with(
    task: &TaskSpec,
    reg: &ToolRegistry,
    max_depth: usize,
    sim: &SimParams,
    parallelism: Parallelism,
) -> Result<OracleResult, BenchError> {
    let exec = Executor::new(reg, *sim).with_parallelism(Parallelism::Sequential);
    let space = PlanSpace::new(task, reg, max_depth);
    let mut best: Option<(f64, String, PlanGraph)> = None;
    let mut examined = 0usize;
    for size in 1..=space.max_size() {
        let plans = space.of_size(size);
        examined += plans.len();
        let scored = par::map(parallelism, &plans, |p| {
            let r = exec.mean_score(p, task).unwrap_or(0.0);
            (r, p.canonical_key())
        });
        for ((r, key), plan) in scored.into_iter().zip(plans) {
            let better = match &best {
                None => true,
                Some((br, bk, bp)) => r > *br || (r == *br && plan.len() == bp.len() && key < *bk),
            };
            if better {
                best = Some((r, key, plan));
            }
        }
        if best.as_ref().is_some_and(|(r, _, _)| *r >= 1.0) {
            break;
        }
    }
    let (r, _, plan) = best.ok_or_else(|| BenchError::NoFeasiblePlan(task.id.clone()))?;
    Ok(OracleResult {
        best_plan: plan,
        best_reward: Score::new(r),
        plans_examined: examined,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
    pub rest: Vec<TaskSpec>,
}

/// Per category, 10% (rounded half up) train and 10% test, disjoint.
pub fn split_train_test(catalog: &[TaskSpec], seed: u64) -> Result<Split, BenchError> {
    if catalog.is_empty() {
        return Err(BenchError::EmptyCatalog);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut role = vec![2u8; catalog.len()];
    for category in Category::ALL {
        let mut idx: Vec<usize> = (0..catalog.len()).filter(|&i| catalog[i].category == category).collect();
        let n = (idx.len() + 5) / 10;
        idx.shuffle(&mut rng);
        for &i in &idx[..n] {
            role[i] = 0;
        }
        for &i in &idx[n..(2 * n).min(idx.len())] {
            role[i] = 1;
        }
    }
    let mut split = Split::default();
    for (t, r) in catalog.iter().zip(role) {
        match r {
            0 => split.train.push(t.clone()),
            1 => split.test.push(t.clone()),
            _ => split.rest.push(t.clone()),
        }
    }
    Ok(split)
}
