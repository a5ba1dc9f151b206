use toolplan::benchgen::{generate_catalog, oracle_best_plan, split_train_test, CatalogConfig};
use toolplan::evalkit::{assign_slot, evaluate, EvalConfig};
use toolplan::policy::Uniform;
use toolplan::simkit::{apply_corruption, similarity, Corruption};
use toolplan::{default_registry, Category, Payload, SimParams, TaskSpec};

fn catalog(samples: usize) -> (CatalogConfig, Vec<TaskSpec>) {
    let cfg = CatalogConfig {
        samples_per_task: samples,
        ..CatalogConfig::default()
    };
    let tasks = generate_catalog(&cfg).unwrap();
    (cfg, tasks)
}

#[test]
fn every_task_is_solvable() {
    let reg = default_registry();
    let (cfg, tasks) = catalog(3);
    for t in &tasks {
        let r = oracle_best_plan(t, &reg, cfg.max_chain_length + 1).unwrap();
        assert!(r.best_reward.value() >= 0.9, "{}: {}", t.id, r.best_reward.value());
        if t.reference_builder.is_empty() {
            assert_eq!(r.best_reward.value(), 1.0, "{}", t.id);
        }
    }
}

#[test]
fn split_is_stratified() {
    let (_, tasks) = catalog(1);
    let split = split_train_test(&tasks, 0).unwrap();
    for c in Category::ALL {
        let total = tasks.iter().filter(|t| t.category == c).count();
        let n = (total as f64 / 10.0).round() as usize;
        let count = |v: &[TaskSpec]| v.iter().filter(|t| t.category == c).count();
        assert_eq!(count(&split.train), n.max(1), "{c:?}");
        assert_eq!(count(&split.test), n.max(1), "{c:?}");
    }
    assert_eq!(split.train.len() + split.test.len() + split.rest.len(), tasks.len());
}

#[test]
fn default_registry_is_idempotent() {
    assert_eq!(default_registry().to_json(), default_registry().to_json());
}

#[test]
fn self_similarity_prices_residuals() {
    let sim = SimParams::default();
    let clean = Payload::image("x");
    assert_eq!(similarity(&clean, &clean, &sim).value(), 1.0);
    let mut p = clean.clone();
    for c in [Corruption::Noise, Corruption::Blur, Corruption::Gray] {
        p = apply_corruption(&p, c).unwrap();
        let want = p.quality * 0.9f64.powi(p.residuals() as i32);
        assert!((similarity(&p, &p, &sim).value() - want).abs() < 1e-12);
    }
}

#[test]
fn evaluation_is_reproducible_and_bounded() {
    let reg = default_registry();
    let (_, tasks) = catalog(2);
    let cfg = EvalConfig::default();
    let a = evaluate(&Uniform, &tasks, &reg, &cfg).unwrap();
    let b = evaluate(&Uniform, &tasks, &reg, &cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    for v in [a.clip, a.bert, a.vit, a.overall] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(a.tasks.len(), tasks.len());
    for (r, t) in a.tasks.iter().zip(&tasks) {
        assert_eq!(r.slot, assign_slot(t));
    }
}
