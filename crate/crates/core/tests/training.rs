use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolplan::decoder::{sample_plan, DecoderConfig, SamplingMode};
use toolplan::evalkit::MetricSlot;
use toolplan::plan::Sample;
use toolplan::policy::{log_prob, PolicyParams, Table};
use toolplan::rltf::{policy_gradient, reward, train, BaselineState, TrainConfig};
use toolplan::simkit::{apply_corruption, Corruption};
use toolplan::{Category, Modality, Payload, PlanGraph, SemanticId, TaskSpec, ToolRegistry, ToolSpec};

fn registry(tools: &[(&str, SemanticId)]) -> ToolRegistry {
    let mut reg = ToolRegistry::new();
    for (name, sem) in tools {
        reg.insert(ToolSpec::new(*name, &[Modality::Image], Modality::Image, *sem)).unwrap();
    }
    reg
}

fn denoise_task() -> TaskSpec {
    let dataset = (0..3)
        .map(|k| {
            let clean = Payload::image(format!("x{k}"));
            Sample {
                inputs: vec![apply_corruption(&clean, Corruption::Noise).unwrap()],
                reference: clean,
            }
        })
        .collect();
    TaskSpec {
        id: "bandit".into(),
        description: String::new(),
        category: Category::ImageToImage,
        input_signature: vec![Modality::Image],
        output_modality: Modality::Image,
        corruption_chains: vec![vec![Corruption::Noise]],
        reference_builder: vec![],
        dataset,
        metric_slot: MetricSlot::Vit,
    }
}

fn sampler(max_tools: usize) -> DecoderConfig {
    DecoderConfig {
        mode: SamplingMode::Stochastic,
        max_tools_per_branch: max_tools,
        top_k: 64,
        top_p: 1.0,
        temperature: 1.0,
        ..DecoderConfig::default()
    }
}

#[test]
fn two_arm_bandit_converges_to_the_rewarding_tool() {
    let reg = registry(&[("Alpha", SemanticId::RemoveNoise), ("Bravo", SemanticId::RemoveBlur)]);
    let task = denoise_task();
    let good = PlanGraph::from_linear_sequence(&["Alpha"], &reg).unwrap();
    let bad = PlanGraph::from_linear_sequence(&["Bravo"], &reg).unwrap();
    assert!(reward(&task, &good, &reg).unwrap().value() > reward(&task, &bad, &reg).unwrap().value());

    let cfg = TrainConfig {
        epochs: 100,
        lr: 5.0,
        epsilon: 0.0,
        rollouts_per_task: 4,
        sampling: sampler(1),
        ..TrainConfig::default()
    };
    let (p, history) = train(&PolicyParams::default(), std::slice::from_ref(&task), &reg, &cfg).unwrap();
    assert_eq!(history.len(), 100);
    let prob = log_prob(&p, &good, &task, &reg, 1).unwrap().exp();
    assert!(prob > 0.99, "greedy probability {prob}");
}

#[test]
fn zero_epochs_leave_params_untouched() {
    let reg = registry(&[("Alpha", SemanticId::RemoveNoise), ("Bravo", SemanticId::RemoveBlur)]);
    let task = denoise_task();
    let mut start = PolicyParams::default();
    start.set("x", "Alpha", 0.3);
    let cfg = TrainConfig {
        epochs: 0,
        sampling: sampler(1),
        ..TrainConfig::default()
    };
    let (p, history) = train(&start, &[task], &reg, &cfg).unwrap();
    assert_eq!(p, start);
    assert!(history.is_empty());
}

#[test]
fn full_exploration_ignores_the_policy() {
    let reg = registry(&[("Alpha", SemanticId::RemoveNoise), ("Bravo", SemanticId::RemoveBlur)]);
    let task = denoise_task();
    let mut skewed = PolicyParams::default();
    let ctx = toolplan::decoder::DecodeState::new(&task, &reg, 1).context();
    for key in skewed.features.keys(&ctx) {
        skewed.set(&key, "Alpha", 50.0);
    }
    let mut bravo = 0;
    for seed in 0..400 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sample_plan(&skewed, &task, &reg, &sampler(1), 1.0, &mut rng).unwrap();
        bravo += usize::from(d.plan.nodes[0].tool == "Bravo");
    }
    assert!((150..=250).contains(&bravo), "{bravo} of 400");
}

fn coordinate_variance(grads: &[Table]) -> f64 {
    let mut sums: BTreeMap<(&str, &str), (f64, f64)> = BTreeMap::new();
    for g in grads {
        for (f, row) in g {
            for (t, v) in row {
                let e = sums.entry((f, t)).or_default();
                e.0 += v;
                e.1 += v * v;
            }
        }
    }
    let n = grads.len() as f64;
    let total: f64 = sums.values().map(|(s, q)| q / n - (s / n).powi(2)).sum();
    total / sums.len() as f64
}

#[test]
fn baseline_reduces_gradient_variance() {
    let reg = registry(&[
        ("Alpha", SemanticId::RemoveNoise),
        ("Bravo", SemanticId::RemoveBlur),
        ("Charlie", SemanticId::RemoveGray),
        ("Delta", SemanticId::RemoveLowRes),
    ]);
    let task = denoise_task();
    let warmup = TrainConfig {
        epochs: 3,
        lr: 0.5,
        epsilon: 0.0,
        sampling: sampler(2),
        ..TrainConfig::default()
    };
    let (params, _) = train(&PolicyParams::default(), std::slice::from_ref(&task), &reg, &warmup).unwrap();
    let mut batches = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<(TaskSpec, PlanGraph, f64)> = (0..4)
            .map(|_| {
                let d = sample_plan(&params, &task, &reg, &sampler(2), 0.0, &mut rng).unwrap();
                let r = reward(&task, &d.plan, &reg).unwrap().value();
                (task.clone(), d.plan, r)
            })
            .collect();
        batches.push(batch);
    }
    let mut baseline = BaselineState::default();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for batch in &batches {
        with.push(policy_gradient(&params, batch, baseline.b, &reg, 2).unwrap());
        without.push(policy_gradient(&params, batch, 0.0, &reg, 2).unwrap());
        baseline.update(batch.iter().map(|(_, _, r)| r).sum::<f64>() / batch.len() as f64, 0.9);
    }
    let (with, without) = (coordinate_variance(&with), coordinate_variance(&without));
    assert!(with <= 1.01 * without, "with baseline {with}, without {without}");
}
