use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toolplan::benchgen::{generate_catalog, CatalogConfig};
use toolplan::decoder::{decode, enumerate_plans, sample_plan, DecodeState, DecoderConfig, SamplingMode};
use toolplan::evalkit::MetricSlot;
use toolplan::executor::ExecError;
use toolplan::plan::{PlanError, Sample};
use toolplan::policy::{log_prob, PolicyParams, Uniform};
use toolplan::simkit::SemanticId;
use toolplan::{
    default_registry, Category, Executor, Modality, Payload, PlanGraph, SimParams, SourceRef, TaskSpec, ToolRegistry, ToolSpec,
};

fn catalog() -> Vec<TaskSpec> {
    generate_catalog(&CatalogConfig {
        samples_per_task: 2,
        ..CatalogConfig::default()
    })
    .unwrap()
}

fn one_per_category(tasks: &[TaskSpec]) -> Vec<&TaskSpec> {
    Category::ALL
        .iter()
        .filter_map(|c| tasks.iter().find(|t| t.category == *c))
        .collect()
}

#[test]
fn uniform_beam_matches_enumeration_up_to_three_tools() {
    let reg = default_registry();
    let tasks = catalog();
    for task in one_per_category(&tasks) {
        for l in 1..=3 {
            let expected: BTreeSet<String> = enumerate_plans(task, &reg, l).iter().map(PlanGraph::canonical_key).collect();
            if expected.len() > 3000 {
                continue;
            }
            let cfg = DecoderConfig {
                max_tools_per_branch: l,
                ..DecoderConfig::greedy(expected.len().max(1))
            };
            let got: BTreeSet<String> = decode(&Uniform, task, &reg, &cfg)
                .unwrap()
                .iter()
                .map(|d| d.plan.canonical_key())
                .collect();
            assert_eq!(got, expected, "{} with {l} tools per branch", task.id);
        }
    }
}

#[test]
fn decoded_scores_are_monotone() {
    let reg = default_registry();
    let tasks = catalog();
    for task in one_per_category(&tasks) {
        let ds = decode(&Uniform, task, &reg, &DecoderConfig::default()).unwrap();
        assert!(ds.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
        assert!(ds.iter().all(|d| d.log_prob <= 0.0));
    }
}

fn six_tool_registry() -> ToolRegistry {
    let mut reg = ToolRegistry::new();
    let semantics = [
        SemanticId::RemoveNoise,
        SemanticId::RemoveBlur,
        SemanticId::RemoveGray,
        SemanticId::RemoveLowRes,
    ];
    for (i, name) in ["Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot"].into_iter().enumerate() {
        reg.insert(ToolSpec::new(name, &[Modality::Image], Modality::Image, semantics[i % 4]))
            .unwrap();
    }
    reg
}

fn image_task(output: Modality) -> TaskSpec {
    let p = Payload::image("x0");
    TaskSpec {
        id: "img".into(),
        description: "image".into(),
        category: if output == Modality::Image {
            Category::ImageToImage
        } else {
            Category::ImageToText
        },
        input_signature: vec![Modality::Image],
        output_modality: output,
        corruption_chains: vec![vec![]],
        reference_builder: vec![],
        dataset: vec![Sample {
            inputs: vec![p.clone()],
            reference: p,
        }],
        metric_slot: MetricSlot::Vit,
    }
}

#[test]
fn single_tool_log_prob_counts_allowed_set() {
    let reg = six_tool_registry();
    let task = image_task(Modality::Image);
    let plan = PlanGraph::from_linear_sequence(&["Alpha"], &reg).unwrap();
    // six first tools, then END is the only option once the budget is spent
    let lp = log_prob(&PolicyParams::default(), &plan, &task, &reg, 1).unwrap();
    assert!((lp - (1.0f64 / 6.0).ln()).abs() < 1e-12);

    let with_room = log_prob(&PolicyParams::default(), &plan, &task, &reg, 2).unwrap();
    // second step offers END plus the five unused tools
    assert!((with_room - ((1.0f64 / 6.0).ln() + (1.0f64 / 6.0).ln())).abs() < 1e-12);
}

#[test]
fn higher_logit_choice_orders_log_probs() {
    let reg = six_tool_registry();
    let task = image_task(Modality::Image);
    let a = PlanGraph::from_linear_sequence(&["Alpha"], &reg).unwrap();
    let b = PlanGraph::from_linear_sequence(&["Bravo"], &reg).unwrap();
    let uniform = PolicyParams::default();
    assert_eq!(
        log_prob(&uniform, &a, &task, &reg, 1).unwrap(),
        log_prob(&uniform, &b, &task, &reg, 1).unwrap()
    );
    let ctx = DecodeState::new(&task, &reg, 1).context();
    let mut p = uniform.clone();
    for key in p.features.keys(&ctx) {
        p.set(&key, "Alpha", 1.0);
    }
    assert!(log_prob(&p, &a, &task, &reg, 1).unwrap() > log_prob(&p, &b, &task, &reg, 1).unwrap());
}

fn random_chain(reg: &ToolRegistry, rng: &mut ChaCha8Rng) -> Option<PlanGraph> {
    let names: Vec<&str> = reg.iter().filter(|t| !t.is_join()).map(|t| t.name.as_str()).collect();
    let k = rng.gen_range(1..=5);
    let seq: Vec<&str> = names.choose_multiple(rng, k).copied().collect();
    PlanGraph::from_linear_sequence(&seq, reg).ok()
}

#[test]
fn validated_plans_never_hit_runtime_modality_errors() {
    let reg = default_registry();
    let tasks = catalog();
    let exec = Executor::new(&reg, SimParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let sampler = DecoderConfig {
        mode: SamplingMode::Stochastic,
        top_k: 64,
        top_p: 1.0,
        temperature: 1.0,
        ..DecoderConfig::default()
    };
    let mut checked = 0;
    while checked < 10_000 {
        let (plan, inputs, output) = if rng.gen_bool(0.5) {
            let Some(plan) = random_chain(&reg, &mut rng) else { continue };
            let first = reg.get(&plan.nodes[0].tool).unwrap().inputs[0];
            let last = reg.get(&plan.nodes[plan.output_node].tool).unwrap().output;
            let input = match first {
                Modality::Image => Payload::image("x"),
                Modality::Text => Payload::text("x"),
            };
            (plan, vec![input], last)
        } else {
            let task = &tasks[rng.gen_range(0..tasks.len())];
            let d = sample_plan(&Uniform, task, &reg, &sampler, 0.0, &mut rng).unwrap();
            (d.plan, task.dataset[0].inputs.clone(), task.output_modality)
        };
        let sig: Vec<Modality> = inputs.iter().map(|p| p.modality).collect();
        let report = plan.validate_signature(&sig, output, &reg);
        assert!(report.is_ok(), "{:?}", report.violations);
        let trace = exec.execute(&plan, &inputs);
        assert!(
            !matches!(trace.error, Some(ExecError::RuntimeModalityMismatch { .. })),
            "{}: {:?}",
            plan.canonical_key(),
            trace.error
        );
        if trace.error.is_none() {
            assert_eq!(trace.final_output.as_ref().map(|p| p.modality), Some(output));
        }

        let stages = plan.topological_stages().unwrap();
        let mut flat: Vec<usize> = stages.concat();
        flat.sort_unstable();
        assert_eq!(flat, plan.nodes.iter().map(|n| n.id).collect::<Vec<_>>());
        let stage_of = |id: usize| stages.iter().position(|s| s.contains(&id)).unwrap();
        for n in &plan.nodes {
            for r in &n.input_refs {
                if let SourceRef::Node(m) = r {
                    assert!(stage_of(*m) < stage_of(n.id));
                }
            }
        }
        checked += 1;
    }
}

#[test]
fn distinct_chains_never_report_duplicates() {
    let reg = default_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        if let Some(plan) = random_chain(&reg, &mut rng) {
            let first = reg.get(&plan.nodes[0].tool).unwrap().inputs[0];
            let last = reg.get(&plan.nodes[plan.output_node].tool).unwrap().output;
            assert!(plan.validate_signature(&[first], last, &reg).is_ok());
        }
    }
    let dup = PlanGraph::from_linear_sequence(&["Image Denoising", "Image Denoising"], &reg).unwrap();
    assert!(!dup.validate_signature(&[Modality::Image], Modality::Image, &reg).is_ok());
    assert!(matches!(
        PlanGraph::from_linear_sequence(&["Image Captioning", "Image Denoising"], &reg),
        Err(PlanError::ModalityBreak(1))
    ));
}
