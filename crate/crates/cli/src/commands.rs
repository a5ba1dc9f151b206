use std::io::Read as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use toolplan::benchgen::{generate_catalog, oracle_best_plan_with, split_train_test};
use toolplan::config::EngineConfig;
use toolplan::decoder::decode;
use toolplan::evalkit::{evaluate, report_csv, ReportTable};
use toolplan::executor::to_json_lines;
use toolplan::par::{self, Parallelism};
use toolplan::parser::extract_sequence;
use toolplan::policy::{pretrain_supervised, Policy, PolicyParams, Uniform};
use toolplan::rltf::{history_csv, oracle_labels, run_schema_comparison, train_with};
use toolplan::{Executor, PlanGraph, TaskSpec, ToolRegistry};

use crate::error::{CliError, Result};
use crate::io::{self, Checkpoint, Manifest};
use crate::{Global, SchemaArg, SplitArg};

struct Env {
    cfg: EngineConfig,
    reg: ToolRegistry,
}

impl Env {
    fn load(g: &Global) -> Result<Self> {
        let mut cfg = io::load_config(g.config.as_deref(), g.seed)?;
        if let Some(d) = g.max_depth {
            cfg.oracle_max_depth = Some(d);
            cfg.validate()?;
        }
        let reg = io::load_registry(&cfg)?;
        Ok(Self { cfg, reg })
    }

    fn out_dir(&self, g: &Global) -> PathBuf {
        g.out
            .clone()
            .or_else(|| self.cfg.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn manifest(&self, command: &str, g: &Global) -> Result<Manifest> {
        let mut m = Manifest::new(command, &self.cfg, &self.reg);
        if let Some(c) = &g.catalog {
            m = m.with_input("catalog", c)?;
        }
        if let Some(c) = &g.checkpoint {
            m = m.with_input("checkpoint", c)?;
        }
        Ok(m)
    }

    fn policy(&self, g: &Global) -> Result<(String, Box<dyn Policy>)> {
        match &g.checkpoint {
            None => Ok(("Zero".into(), Box::new(Uniform))),
            Some(p) => {
                let ck = io::load_checkpoint(p, &self.reg)?;
                Ok((ck.schema, Box::new(ck.params)))
            }
        }
    }
}

fn catalog_path(g: &Global) -> Result<&Path> {
    g.catalog
        .as_deref()
        .ok_or_else(|| CliError::Usage("--catalog is required for this command".into()))
}

fn select(catalog: Vec<TaskSpec>, split: SplitArg, seed: u64) -> Result<Vec<TaskSpec>> {
    if split == SplitArg::All {
        return Ok(catalog);
    }
    let s = split_train_test(&catalog, seed).map_err(CliError::engine)?;
    Ok(if split == SplitArg::Train { s.train } else { s.test })
}

fn find_task<'a>(tasks: &'a [TaskSpec], id: &str) -> Result<&'a TaskSpec> {
    tasks.iter().find(|t| t.id == id).ok_or_else(|| CliError::UnknownTask(id.into()))
}

fn written(paths: &[PathBuf]) -> String {
    io::to_pretty(&json!({ "written": paths }))
}

fn write_sidecar(out: &Path, stem: &str, m: &Manifest) -> Result<PathBuf> {
    let p = out.join(format!("{stem}.manifest.json"));
    io::write(&p, io::to_pretty(m))?;
    Ok(p)
}

pub fn gen(g: &Global) -> Result<String> {
    let env = Env::load(g)?;
    let out = env.out_dir(g);
    let catalog = generate_catalog(&env.cfg.catalog).map_err(CliError::engine)?;
    let mut paths = vec![out.join("catalog.json")];
    io::write(&paths[0], io::to_pretty(&catalog))?;
    for t in &catalog {
        let p = out.join("samples").join(format!("{}.json", t.id));
        io::write(&p, io::to_pretty(&json!({ "task_id": t.id, "samples": t.dataset })))?;
    }
    paths.push(out.join("samples"));
    paths.push(write_sidecar(&out, "catalog", &env.manifest("gen", g)?)?);
    Ok(written(&paths))
}

pub fn oracle(g: &Global) -> Result<String> {
    let env = Env::load(g)?;
    let out = env.out_dir(g);
    let tasks = select(
        io::load_catalog(catalog_path(g)?)?,
        g.split.unwrap_or(SplitArg::All),
        env.cfg.split_seed,
    )?;
    let depth = env.cfg.oracle_depth();
    let results = par::map(env.cfg.parallelism, &tasks, |t| {
        oracle_best_plan_with(t, &env.reg, depth, &env.cfg.sim, Parallelism::Sequential)
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::engine(e);
    w.write_record(["task_id", "category", "reward", "tools", "plans_examined", "plan"])
        .map_err(csv_err)?;
    for (t, r) in tasks.iter().zip(results) {
        let r = r.map_err(CliError::engine)?;
        w.write_record([
            t.id.clone(),
            t.category.as_str().to_string(),
            format!("{:.6}", r.best_reward.value()),
            r.best_plan.len().to_string(),
            r.plans_examined.to_string(),
            r.best_plan.canonical_key(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::engine(e.error()))?;
    let p = out.join("oracle.csv");
    io::write(&p, bytes)?;
    let m = write_sidecar(&out, "oracle", &env.manifest("oracle", g)?)?;
    Ok(written(&[p, m]))
}

pub fn plan(g: &Global, task_id: &str) -> Result<String> {
    let env = Env::load(g)?;
    let tasks = io::load_catalog(catalog_path(g)?)?;
    let task = find_task(&tasks, task_id)?;
    let (_, policy) = env.policy(g)?;
    let decoded = decode(policy.as_ref(), task, &env.reg, &env.cfg.eval_config().decoder).map_err(CliError::engine)?;
    let top = decoded
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Engine(format!("no plan decoded for task {task_id}")))?;
    let doc = format!("{}\n", top.plan.to_json());
    if g.out.is_some() {
        let out = env.out_dir(g);
        let p = out.join("plan.json");
        io::write(&p, &doc)?;
        let m = write_sidecar(&out, "plan", &env.manifest("plan", g)?)?;
        return Ok(written(&[p, m]));
    }
    Ok(doc)
}

pub fn exec(g: &Global, plan_path: &Path, task_id: &str) -> Result<String> {
    let env = Env::load(g)?;
    let tasks = io::load_catalog(catalog_path(g)?)?;
    let task = find_task(&tasks, task_id)?;
    let plan = PlanGraph::from_json(&io::read(plan_path)?).map_err(|e| CliError::Schema {
        path: plan_path.to_path_buf(),
        field: "<root>".into(),
        message: e.to_string(),
    })?;
    let report = plan.validate(task, &env.reg);
    if !report.is_ok() {
        return Err(CliError::InvalidPlan {
            task: task_id.into(),
            violations: report.violations,
        });
    }
    let exec = Executor::new(&env.reg, env.cfg.sim).with_parallelism(env.cfg.parallelism);
    let records = exec.trace_records(&plan, task).map_err(CliError::engine)?;
    let score = toolplan::executor::mean(records.iter().map(|r| r.score));
    if g.out.is_some() {
        let out = env.out_dir(g);
        let p = out.join("trace.jsonl");
        io::write(&p, to_json_lines(&records))?;
        let m = write_sidecar(&out, "trace", &env.manifest("exec", g)?.with_input("plan", plan_path)?)?;
        return Ok(written(&[p, m]));
    }
    Ok(io::to_pretty(&json!({
        "task_id": task.id,
        "plan_hash": plan.plan_hash(),
        "score": score,
        "records": records,
    })))
}

pub fn parse(g: &Global, text: &str) -> Result<String> {
    let env = Env::load(g)?;
    let body = if text == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| CliError::io(Path::new("<stdin>"), e))?;
        s
    } else {
        io::read(Path::new(text))?
    };
    let parsed = extract_sequence(&body, &env.reg);
    let plan = if parsed.tools.is_empty() {
        None
    } else {
        PlanGraph::from_linear_sequence(&parsed.tools, &env.reg).ok()
    };
    let plan_json = plan.map(|p| serde_json::from_str::<serde_json::Value>(&p.to_json()).expect("plan json"));
    Ok(io::to_pretty(&json!({
        "tools": parsed.tools,
        "plan": plan_json,
        "dropped": parsed.dropped,
    })))
}

fn labels_for(env: &Env, tasks: &[TaskSpec]) -> Result<PolicyParams> {
    let labels = oracle_labels(tasks, &env.reg, env.cfg.oracle_depth(), &env.cfg.sim, env.cfg.parallelism).map_err(CliError::engine)?;
    let (p, _) = pretrain_supervised(
        &PolicyParams::default(),
        &labels,
        &env.reg,
        env.cfg.supervised.epochs,
        env.cfg.supervised.lr,
        env.cfg.decoder.max_tools_per_branch,
    )
    .map_err(CliError::engine)?;
    Ok(p)
}

pub fn train(g: &Global, schema: SchemaArg) -> Result<String> {
    let env = Env::load(g)?;
    let out = env.out_dir(g);
    let tasks = select(
        io::load_catalog(catalog_path(g)?)?,
        g.split.unwrap_or(SplitArg::Train),
        env.cfg.split_seed,
    )?;
    if tasks.is_empty() {
        return Err(CliError::Engine("no training tasks".into()));
    }
    let sup = labels_for(&env, &tasks)?;
    let manifest = env.manifest("train", g)?;
    let mut paths = Vec::new();
    let (name, params) = match schema {
        SchemaArg::Supervised => ("Supervised", sup),
        SchemaArg::Rltf => {
            let (rl, history) = train_with(&sup, &tasks, &env.reg, &env.cfg.train_config(), &env.cfg.sim).map_err(CliError::engine)?;
            let p = out.join("history.csv");
            io::write(&p, history_csv(&history))?;
            paths.push(p);
            paths.push(write_sidecar(&out, "history", &manifest)?);
            ("RLTF", rl)
        }
    };
    let ck = Checkpoint {
        manifest,
        schema: name.into(),
        params,
    };
    let p = out.join("checkpoint.json");
    io::write(&p, io::to_pretty(&ck))?;
    paths.insert(0, p);
    Ok(written(&paths))
}

fn write_report(out: &Path, m: &Manifest, columns: &[(&str, Option<&ReportTable>)]) -> Result<Vec<PathBuf>> {
    let csv_path = out.join("report.csv");
    io::write(&csv_path, report_csv(columns))?;
    let schemas: serde_json::Map<String, serde_json::Value> = columns.iter().map(|(n, t)| (n.to_string(), json!(t))).collect();
    let json_path = out.join("report.json");
    io::write(&json_path, io::to_pretty(&json!({ "manifest": m, "schemas": schemas })))?;
    Ok(vec![csv_path, json_path, write_sidecar(out, "report", m)?])
}

pub fn eval(g: &Global) -> Result<String> {
    let env = Env::load(g)?;
    let out = env.out_dir(g);
    let tasks = select(
        io::load_catalog(catalog_path(g)?)?,
        g.split.unwrap_or(SplitArg::Test),
        env.cfg.split_seed,
    )?;
    let (name, policy) = env.policy(g)?;
    let report = evaluate(policy.as_ref(), &tasks, &env.reg, &env.cfg.eval_config()).map_err(CliError::engine)?;
    let paths = write_report(&out, &env.manifest("eval", g)?, &[(name.as_str(), Some(&report))])?;
    Ok(written(&paths))
}

pub fn compare(g: &Global) -> Result<String> {
    let env = Env::load(g)?;
    let out = env.out_dir(g);
    let catalog = io::load_catalog(catalog_path(g)?)?;
    let cmp = run_schema_comparison(&catalog, &env.reg, &env.cfg.comparison()).map_err(CliError::engine)?;
    let manifest = env.manifest("compare", g)?;
    let mut paths = write_report(&out, &manifest, &cmp.columns())?;
    let h = out.join("history.csv");
    io::write(&h, history_csv(&cmp.history))?;
    paths.push(h);
    let ck = Checkpoint {
        manifest,
        schema: "RLTF".into(),
        params: cmp.rltf_params,
    };
    let c = out.join("checkpoint.json");
    io::write(&c, io::to_pretty(&ck))?;
    paths.push(c);
    Ok(written(&paths))
}
