use std::fs;
use std::path::{Path, PathBuf};

use qstitch_core::cvae::{
    density_table, label_tuples, train_cvae, CvaeArch, CvaeModel, CvaeTrainConfig, LabeledTuples,
};
use qstitch_core::datagen::{
    collect, collect_tabular, default_regions, example_dataset, mc_q_labels, relabel_dataset, CollectConfig, Dataset,
    RelabelStrategy,
};
use qstitch_core::envs::{enumerate_mdp, LayoutId, MazeSpec, TabularPolicy};
use qstitch_core::eval::{
    ablation_sweep, eval_pairs, rollout_eval, spearman, trace_episode, write_sweep_csv, EvalMode, EvalReport, SweepBase,
};
use qstitch_core::nn::Checkpoint;
use qstitch_core::oracle::{analytic_occupancy, build_matrices, forward_kl, policy_eval_q_all, theorem1_gap};
use qstitch_core::policy::{
    train, train_return_conditioned, PolicyArch, PolicyConfig, PolicyModel, PolicyRunner, TrainingSet, Variant,
};
use qstitch_core::rng::SeedStream;
use qstitch_core::svg::{bar_chart, line_plot, maze_traces, Bar, Series};
use qstitch_core::{Error, ExpectileParam, Result};

use crate::config::{key, Key, Params};

/// What a command produced, for the manifest.
pub struct Outcome {
    pub outputs: Vec<String>,
    pub summary: String,
    /// Set when a check ran to completion but its tolerance was not met.
    pub check_failed: bool,
}

impl Outcome {
    fn ok(outputs: &[&str], summary: String) -> Self {
        Outcome {
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            summary,
            check_failed: false,
        }
    }
}

pub struct Command {
    pub name: &'static str,
    pub about: &'static str,
    pub schema: &'static [Key],
    pub run: fn(&Params, &Path) -> Result<Outcome>,
}

/// Keys whose values name input files; hashed into the manifest.
pub const INPUT_KEYS: [&str; 4] = ["dataset", "cvae", "labels", "checkpoint"];

pub const COMMANDS: &[Command] = &[
    Command {
        name: "gen-data",
        about: "Collect an offline dataset",
        schema: GEN_DATA,
        run: gen_data,
    },
    Command {
        name: "train-cvae",
        about: "Train the goal-reaching density model",
        schema: TRAIN_CVAE,
        run: train_cvae_cmd,
    },
    Command {
        name: "label",
        about: "Relabel a dataset and attach importance-sampled Q labels",
        schema: LABEL,
        run: label,
    },
    Command {
        name: "train-policy",
        about: "Train an OCBC or Q-conditioned policy",
        schema: TRAIN_POLICY,
        run: train_policy,
    },
    Command {
        name: "eval",
        about: "Roll out a policy checkpoint",
        schema: EVAL,
        run: eval,
    },
    Command {
        name: "oracle-check",
        about: "Compare tabular policy evaluation with the analytic occupancy, and optionally a CVAE",
        schema: ORACLE_CHECK,
        run: oracle_check,
    },
    Command {
        name: "sweep",
        about: "Label, train and evaluate across a grid of m or L",
        schema: SWEEP,
        run: sweep,
    },
    Command {
        name: "report",
        about: "Aggregate evaluation reports and loss traces from run directories",
        schema: REPORT,
        run: report,
    },
];

const GEN_DATA: &[Key] = &[
    key("env", "umaze", "layout: example_mdp, gridworld5, umaze, medium, large"),
    key(
        "behavior",
        "region",
        "region (epsilon-greedy within regions), dirichlet (random tabular policy) or scripted (example MDP)",
    ),
    key("transitions", "10000", "region behavior: total transitions"),
    key("regions", "2", "region behavior: number of overlapping regions"),
    key("epsilon", "0.1", "region behavior: random-action probability"),
    key(
        "horizon",
        "0",
        "region behavior: episode horizon, 0 for the layout default",
    ),
    key("trajectories", "100", "dirichlet behavior: trajectory count"),
    key("length", "100", "dirichlet behavior: trajectory length"),
    key("policy_seed", "0", "dirichlet behavior: seed of the policy table"),
    key("gamma", "0.99", "discount recorded with the dataset"),
    key("seed", "0", "collection seed"),
    key("out", "runs/gen-data", "output directory"),
];

const TRAIN_CVAE: &[Key] = &[
    key("dataset", "", "dataset file"),
    key("steps", "5000", "gradient steps"),
    key("batch_size", "256", "minibatch size"),
    key("lr", "0.001", "Adam learning rate"),
    key("latent_dim", "8", "latent dimension"),
    key("hidden", "128,128", "hidden widths of encoder and decoder"),
    key("sigma_dec", "0.25", "decoder standard deviation in goal units"),
    key("relabel", "geometric", "goal relabeling: geometric or uniform"),
    key("log_every", "100", "loss trace interval"),
    key("seed", "0", "training seed"),
    key("out", "runs/train-cvae", "output directory"),
];

const LABEL: &[Key] = &[
    key("dataset", "", "dataset file"),
    key("cvae", "", "CVAE checkpoint"),
    key("samples", "500", "importance samples L per label"),
    key("copies", "1", "relabeled tuples per stored transition"),
    key("relabel", "geometric", "goal relabeling: geometric or uniform"),
    key("context", "10", "window of labeled steps per tuple"),
    key("seed", "0", "relabeling and estimator seed"),
    key("out", "runs/label", "output directory"),
];

const TRAIN_POLICY: &[Key] = &[
    key("dataset", "", "dataset file"),
    key("labels", "", "labeled tuples; required by gcrsl variants"),
    key("variant", "gcrsl_rvs", "ocbc_rvs, ocbc_dt, gcrsl_rvs or gcrsl_dt"),
    key(
        "conditioning",
        "goal",
        "goal, or return for goal-free training on Monte-Carlo labels",
    ),
    key("m", "0.99", "expectile parameter"),
    key("context", "10", "DT context length K"),
    key("lr", "0.001", "Adam learning rate"),
    key("steps", "50000", "gradient steps"),
    key("batch_size", "256", "minibatch size"),
    key("augment_probability", "0", "goal-swap probability (OCBC only)"),
    key("hidden", "256,256", "RvS hidden widths"),
    key("embed_dim", "64", "DT embedding width"),
    key("layers", "2", "DT layers"),
    key("heads", "4", "DT attention heads"),
    key(
        "copies",
        "1",
        "relabeled tuples per transition when no labels are given",
    ),
    key("relabel", "geometric", "goal relabeling when no labels are given"),
    key("log_every", "500", "loss trace interval"),
    key("seed", "0", "training seed"),
    key("out", "runs/train-policy", "output directory"),
];

const EVAL: &[Key] = &[
    key("checkpoint", "", "policy checkpoint"),
    key(
        "dataset",
        "",
        "dataset the policy was trained on (layout, regions, hash)",
    ),
    key("mode", "stitching", "stitching or in-distribution"),
    key("episodes", "50", "episodes per start/goal pair"),
    key("seeds", "0,1,2,3,4", "evaluation seeds"),
    key("out", "runs/eval", "output directory"),
];

const ORACLE_CHECK: &[Key] = &[
    key("env", "all", "layout name, or all"),
    key("gammas", "0.9,0.95,0.99", "discounts"),
    key("policies", "10", "random policies per layout and discount"),
    key("tolerance", "1e-8", "largest accepted gap"),
    key("cvae", "", "optional CVAE checkpoint for the density comparison"),
    key("dataset", "", "dataset of that CVAE, collected by a dirichlet policy"),
    key("samples", "500", "importance samples for the density comparison"),
    key("seed", "0", "policy and estimator seed"),
    key("out", "runs/oracle-check", "output directory"),
];

const SWEEP: &[Key] = &[
    key("axis", "m", "m or L"),
    key("grid", "0.5,0.7,0.9,0.99", "grid values"),
    key("dataset", "", "dataset file"),
    key("cvae", "", "CVAE checkpoint"),
    key("variant", "gcrsl_rvs", "policy variant"),
    key("m", "0.99", "expectile parameter when sweeping L"),
    key("samples", "500", "importance samples when sweeping m"),
    key("label_seed", "0", "estimator seed"),
    key("copies", "1", "relabeled tuples per transition"),
    key("relabel", "geometric", "goal relabeling"),
    key("context", "10", "DT context length K"),
    key("lr", "0.001", "Adam learning rate"),
    key("steps", "50000", "gradient steps"),
    key("batch_size", "256", "minibatch size"),
    key("hidden", "256,256", "RvS hidden widths"),
    key("embed_dim", "64", "DT embedding width"),
    key("layers", "2", "DT layers"),
    key("heads", "4", "DT attention heads"),
    key("log_every", "500", "loss trace interval"),
    key("mode", "stitching", "stitching or in-distribution"),
    key("episodes", "50", "episodes per pair"),
    key("seeds", "0,1,2,3,4", "training and evaluation seeds"),
    key("out", "runs/sweep", "output directory"),
];

const REPORT: &[Key] = &[
    key("runs", "", "comma-separated run directories"),
    key("out", "runs/report", "output directory"),
];

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn pretty(v: &serde_json::Value) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn load_dataset(p: &Params) -> Result<Dataset> {
    Dataset::load(&p.required_path("dataset")?)
}

fn load_cvae(p: &Params) -> Result<CvaeModel> {
    CvaeModel::from_checkpoint(&Checkpoint::load(&p.required_path("cvae")?)?)
}

fn strategy(p: &Params, gamma: f64) -> Result<RelabelStrategy> {
    match p.str("relabel") {
        "geometric" => Ok(RelabelStrategy::FutureGeometric { gamma }),
        "uniform" => Ok(RelabelStrategy::FutureUniform),
        other => Err(Error::Config(format!(
            "relabel = '{other}': expected geometric or uniform"
        ))),
    }
}

fn policy_config(p: &Params, seed: u64) -> Result<PolicyConfig> {
    let mut c = PolicyConfig::new(p.get::<Variant>("variant")?);
    c.m = ExpectileParam::new(p.get("m")?).map_err(|e| Error::Config(e.to_string()))?;
    c.context = p.get("context")?;
    c.lr = p.get("lr")?;
    c.steps = p.get("steps")?;
    c.batch_size = p.get("batch_size")?;
    c.hidden = p.list("hidden")?;
    c.embed_dim = p.get("embed_dim")?;
    c.layers = p.get("layers")?;
    c.heads = p.get("heads")?;
    c.log_every = p.get("log_every")?;
    c.seed = seed;
    c.validate()?;
    Ok(c)
}

fn parse_mode(p: &Params) -> Result<EvalMode> {
    p.get("mode")
}

fn gen_data(p: &Params, out: &Path) -> Result<Outcome> {
    let layout: LayoutId = p.get("env")?;
    let spec = MazeSpec::builtin(layout)?;
    let gamma: f64 = p.get("gamma")?;
    let seed: u64 = p.get("seed")?;
    let ds = match p.str("behavior") {
        "region" => {
            let regions = default_regions(&spec, p.get("regions")?)?;
            let mut cfg = CollectConfig::new(p.get("transitions")?, seed);
            cfg.epsilon = p.get("epsilon")?;
            cfg.gamma = gamma;
            let horizon: usize = p.get("horizon")?;
            cfg.horizon = (horizon > 0).then_some(horizon);
            collect(&spec, &regions, &cfg)?
        }
        "dirichlet" => {
            let policy_seed: u64 = p.get("policy_seed")?;
            let policy = TabularPolicy::dirichlet(spec.num_states(), spec.actions.len(), policy_seed);
            let mut ds = collect_tabular(&spec, &policy, p.get("trajectories")?, p.get("length")?, gamma, seed)?;
            ds.header.policy = format!("dirichlet(seed={policy_seed})");
            ds
        }
        "scripted" => {
            if layout != LayoutId::ExampleMdp {
                return Err(Error::Config("scripted behavior needs env = example_mdp".into()));
            }
            example_dataset(gamma)?
        }
        other => return Err(Error::Config(format!("unknown behavior '{other}'"))),
    };
    ds.save(&out.join("dataset.jsonl"))?;
    Ok(Outcome::ok(
        &["dataset.jsonl"],
        format!(
            "{} trajectories, {} transitions, hash {}",
            ds.trajectories.len(),
            ds.size(),
            ds.hash()?
        ),
    ))
}

fn train_cvae_cmd(p: &Params, out: &Path) -> Result<Outcome> {
    let ds = load_dataset(p)?;
    let env = ds.env()?;
    let mut arch = CvaeArch::for_env(&env);
    arch.latent_dim = p.get("latent_dim")?;
    arch.hidden = p.list("hidden")?;
    arch.sigma_dec = p.get("sigma_dec")?;
    let mut cfg = CvaeTrainConfig::new(ds.gamma(), p.get("seed")?);
    cfg.steps = p.get("steps")?;
    cfg.batch_size = p.get("batch_size")?;
    cfg.lr = p.get("lr")?;
    cfg.relabel = strategy(p, ds.gamma())?;
    cfg.log_every = p.get("log_every")?;
    let trained = train_cvae(&ds, arch, &cfg)?;
    let ck = trained
        .model
        .to_checkpoint(serde_json::to_value(&cfg)?, &trained.trace)?;
    ck.save(&out.join("cvae.json"))?;
    let mut w = csv::Writer::from_path(out.join("loss_trace.csv"))?;
    w.write_record(["step", "loss"])?;
    for (s, l) in &trained.trace {
        w.write_record([s.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(Outcome::ok(
        &["cvae.json", "loss_trace.csv"],
        format!(
            "final loss {:.6}, model {}",
            trained.trace.last().map_or(f64::NAN, |t| t.1),
            trained.model.hash()
        ),
    ))
}

fn label(p: &Params, out: &Path) -> Result<Outcome> {
    let ds = load_dataset(p)?;
    let cvae = load_cvae(p)?;
    let seed: u64 = p.get("seed")?;
    let tuples = relabel_dataset(&ds, strategy(p, ds.gamma())?, p.get("copies")?, seed)?;
    let path = out.join("labels.json");
    let labeled = label_tuples(
        &ds,
        &cvae,
        &tuples,
        p.get("context")?,
        p.get("samples")?,
        seed,
        Some(&path),
    )?;
    labeled.save(&path)?;
    let mean = (0..labeled.tuples.len()).map(|i| labeled.label(i)).sum::<f64>() / labeled.tuples.len() as f64;
    Ok(Outcome::ok(
        &["labels.json"],
        format!("{} tuples, mean label {mean:.6}", labeled.tuples.len()),
    ))
}

fn train_policy(p: &Params, out: &Path) -> Result<Outcome> {
    let ds = load_dataset(p)?;
    let mut cfg = policy_config(p, p.get("seed")?)?;
    cfg.augment_probability = p.get("augment_probability")?;
    cfg.validate()?;
    let trained = match p.str("conditioning") {
        "return" => train_return_conditioned(&ds, &mc_q_labels(&ds, ds.gamma())?, &cfg)?,
        "goal" => {
            let labeled = p.path("labels").map(|l| LabeledTuples::load(&l)).transpose()?;
            let tuples;
            let set = match &labeled {
                Some(l) if cfg.variant.uses_q() => TrainingSet::from_labels(&ds, l)?,
                Some(l) => TrainingSet::from_tuples(&ds, &l.tuples)?,
                None => {
                    tuples = relabel_dataset(&ds, strategy(p, ds.gamma())?, p.get("copies")?, cfg.seed)?;
                    TrainingSet::from_tuples(&ds, &tuples)?
                }
            };
            train(&set, PolicyArch::for_env(&ds.env()?, true), &cfg)?
        }
        other => {
            return Err(Error::Config(format!(
                "conditioning = '{other}': expected goal or return"
            )))
        }
    };
    trained.to_checkpoint().save(&out.join("policy.json"))?;
    let mut w = csv::Writer::from_path(out.join("loss_trace.csv"))?;
    w.write_record(["step", "action_loss", "q_loss"])?;
    for t in &trained.trace {
        w.write_record([t.step.to_string(), t.action_loss.to_string(), t.q_loss.to_string()])?;
    }
    w.flush()?;
    let last = trained.trace.last();
    Ok(Outcome::ok(
        &["policy.json", "loss_trace.csv"],
        format!(
            "{} final action loss {:.6}, q loss {:.6}, model {}",
            cfg.variant,
            last.map_or(f64::NAN, |t| t.action_loss),
            last.map_or(f64::NAN, |t| t.q_loss),
            trained.model.hash()
        ),
    ))
}

fn eval(p: &Params, out: &Path) -> Result<Outcome> {
    let model = PolicyModel::from_checkpoint(&Checkpoint::load(&p.required_path("checkpoint")?)?)?;
    let ds = load_dataset(p)?;
    let env = ds.env()?;
    let mode = parse_mode(p)?;
    let pairs = eval_pairs(&ds, mode)?;
    let seeds: Vec<u64> = p.list("seeds")?;
    let report = rollout_eval(&model, &env, mode, &pairs, p.get("episodes")?, &seeds, &ds.hash()?)?;
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("report.csv"))?;
    let mut traces = Vec::new();
    for &(s, g) in pairs.iter().take(6) {
        let mut runner = PolicyRunner::new(&model);
        traces.push(trace_episode(&env, s, g, seeds[0], &mut runner)?.0);
    }
    write(out, "traces.svg", maze_traces(&env.spec, &traces))?;
    Ok(Outcome::ok(
        &["report.json", "report.csv", "traces.svg"],
        format!(
            "{mode} success {:.4} (95% CI {:.4}-{:.4}) over {} episodes",
            report.mean, report.ci.lower, report.ci.upper, report.episodes
        ),
    ))
}

/// Seed of a `dirichlet(seed=N)` policy description.
fn dirichlet_seed(policy: &str) -> Result<u64> {
    policy
        .strip_prefix("dirichlet(seed=")
        .and_then(|s| s.strip_suffix(')'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::invalid(format!("dataset policy '{policy}' is not a dirichlet policy")))
}

fn oracle_check(p: &Params, out: &Path) -> Result<Outcome> {
    let layouts: Vec<LayoutId> = match p.str("env") {
        "all" => vec![
            LayoutId::ExampleMdp,
            LayoutId::Gridworld5,
            LayoutId::Umaze,
            LayoutId::Medium,
            LayoutId::Large,
        ],
        _ => p.list("env")?,
    };
    let gammas: Vec<f64> = p.list("gammas")?;
    let n_policies: usize = p.get("policies")?;
    let tolerance: f64 = p.get("tolerance")?;
    let seed: u64 = p.get("seed")?;
    let root = SeedStream::new(seed).child("oracle-check");
    let mut w = csv::Writer::from_path(out.join("theorem1.csv"))?;
    w.write_record(["layout", "gamma", "policy", "gap"])?;
    let mut max_gap = 0.0f64;
    for &layout in &layouts {
        let spec = MazeSpec::builtin(layout)?;
        let mdp = enumerate_mdp(&spec);
        for &gamma in &gammas {
            for k in 0..n_policies {
                let key = root.child(layout.as_str()).index(k as u64).key();
                let pi = TabularPolicy::dirichlet(mdp.n_states, mdp.n_actions, key);
                let occ = analytic_occupancy(&build_matrices(&mdp, &pi)?, gamma)?;
                let gap = theorem1_gap(&policy_eval_q_all(&mdp, &pi, gamma)?, &occ)?;
                max_gap = max_gap.max(gap);
                w.write_record([layout.to_string(), gamma.to_string(), k.to_string(), format!("{gap:e}")])?;
            }
        }
    }
    w.flush()?;
    let mut outputs = vec!["theorem1.csv", "summary.json"];
    let mut summary = serde_json::json!({
        "max_gap": max_gap,
        "tolerance": tolerance,
        "pass": max_gap < tolerance,
    });
    if let Some(cvae_path) = p.path("cvae") {
        let cvae = CvaeModel::from_checkpoint(&Checkpoint::load(&cvae_path)?)?;
        let ds = load_dataset(p)?;
        let spec = ds.spec()?;
        let pi = TabularPolicy::dirichlet(
            spec.num_states(),
            spec.actions.len(),
            dirichlet_seed(&ds.header.policy)?,
        );
        let occ = analytic_occupancy(&build_matrices(&enumerate_mdp(&spec), &pi)?, ds.gamma())?;
        let dens = density_table(&cvae, &spec, p.get("samples")?, seed)?;
        let kl = forward_kl(&occ, &dens)?;
        let labels: Vec<f64> = dens.iter().map(|d| d.clamp(0.0, 1.0)).collect();
        let rho = spearman(&occ.p, &labels)?;
        let mut w = csv::Writer::from_path(out.join("kl.csv"))?;
        w.write_record(["state", "action", "future", "oracle", "estimate"])?;
        let n = occ.n_states;
        for (i, (o, e)) in occ.p.iter().zip(&dens).enumerate() {
            let (s, a, f) = (i / (n * occ.n_actions), (i / n) % occ.n_actions, i % n);
            w.write_record([
                s.to_string(),
                a.to_string(),
                f.to_string(),
                o.to_string(),
                e.to_string(),
            ])?;
        }
        w.flush()?;
        summary["forward_kl"] = kl.into();
        summary["spearman"] = rho.into();
        outputs.push("kl.csv");
    }
    write(out, "summary.json", pretty(&summary)?)?;
    let pass = max_gap < tolerance;
    Ok(Outcome {
        outputs: outputs.into_iter().map(String::from).collect(),
        summary: format!(
            "max |Q - gamma P| = {max_gap:e} over {} layouts (tolerance {tolerance:e}): {}",
            layouts.len(),
            if pass { "PASS" } else { "FAIL" }
        ),
        check_failed: !pass,
    })
}

fn sweep(p: &Params, out: &Path) -> Result<Outcome> {
    let ds = load_dataset(p)?;
    let cvae = load_cvae(p)?;
    let axis = p.get("axis")?;
    let grid: Vec<f64> = p.list("grid")?;
    let policy = policy_config(p, 0)?;
    let label_seed: u64 = p.get("label_seed")?;
    let base = SweepBase {
        dataset: &ds,
        cvae: &cvae,
        tuples: relabel_dataset(&ds, strategy(p, ds.gamma())?, p.get("copies")?, label_seed)?,
        policy,
        samples: p.get("samples")?,
        label_seed,
        mode: parse_mode(p)?,
        episodes: p.get("episodes")?,
        seeds: p.list("seeds")?,
    };
    let rows = ablation_sweep(axis, &grid, &base)?;
    write_sweep_csv(&rows, &out.join("sweep.csv"))?;
    write(out, "sweep.json", pretty(&serde_json::to_value(&rows)?)?)?;
    let mut series = vec![Series {
        name: "success".into(),
        points: rows.iter().map(|r| (r.value, r.report.mean)).collect(),
    }];
    if rows.iter().all(|r| r.mean_value_prediction.is_some()) {
        series.push(Series {
            name: "value head".into(),
            points: rows
                .iter()
                .map(|r| (r.value, r.mean_value_prediction.unwrap()))
                .collect(),
        });
    }
    let axis_name = p.str("axis");
    write(
        out,
        "sweep.svg",
        line_plot(&format!("sweep over {axis_name}"), axis_name, "mean", &series),
    )?;
    Ok(Outcome::ok(
        &["sweep.csv", "sweep.json", "sweep.svg"],
        rows.iter()
            .map(|r| format!("{axis_name}={}: success {:.4}", r.value, r.report.mean))
            .collect::<Vec<_>>()
            .join("; "),
    ))
}

fn read_trace(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut pts = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: "expected numeric step and loss columns".into(),
            })
        };
        pts.push((num(0)?, num(1)?));
    }
    Ok(pts)
}

fn report(p: &Params, out: &Path) -> Result<Outcome> {
    let runs: Vec<PathBuf> = p.list::<String>("runs")?.into_iter().map(PathBuf::from).collect();
    if runs.is_empty() {
        return Err(Error::Config("'runs' is required".into()));
    }
    let mut rows = Vec::new();
    let mut bars = Vec::new();
    let mut traces = Vec::new();
    for dir in &runs {
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.clone()));
        }
        let name = dir.display().to_string();
        let rpath = dir.join("report.json");
        if rpath.exists() {
            let r: EvalReport = serde_json::from_slice(&fs::read(&rpath)?).map_err(|e| Error::Format {
                path: rpath.display().to_string(),
                detail: e.to_string(),
            })?;
            bars.push(Bar {
                label: dir
                    .file_name()
                    .map_or(name.clone(), |f| f.to_string_lossy().into_owned()),
                value: r.mean,
                lower: r.ci.lower,
                upper: r.ci.upper,
            });
            rows.push(serde_json::json!({
                "run": name,
                "mode": r.mode,
                "mean": r.mean,
                "ci_lower": r.ci.lower,
                "ci_upper": r.ci.upper,
                "episodes": r.episodes,
                "fingerprint": r.fingerprint,
            }));
        }
        let tpath = dir.join("loss_trace.csv");
        if tpath.exists() {
            traces.push(Series {
                name: name.clone(),
                points: read_trace(&tpath)?,
            });
        }
    }
    if rows.is_empty() && traces.is_empty() {
        return Err(Error::invalid("no report.json or loss_trace.csv in the given runs"));
    }
    let mut outputs = vec!["aggregate.json", "aggregate.csv"];
    write(out, "aggregate.json", pretty(&serde_json::Value::Array(rows.clone()))?)?;
    let mut w = csv::Writer::from_path(out.join("aggregate.csv"))?;
    w.write_record(["run", "mode", "mean", "ci_lower", "ci_upper", "episodes", "fingerprint"])?;
    for r in &rows {
        let cell = |k: &str| match &r[k] {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        w.write_record(["run", "mode", "mean", "ci_lower", "ci_upper", "episodes", "fingerprint"].map(cell))?;
    }
    w.flush()?;
    if !bars.is_empty() {
        write(out, "success.svg", bar_chart("success rate", "success", &bars))?;
        outputs.push("success.svg");
    }
    if !traces.is_empty() {
        write(out, "loss.svg", line_plot("training loss", "step", "loss", &traces))?;
        outputs.push("loss.svg");
    }
    Ok(Outcome::ok(
        &outputs,
        format!("{} reports, {} loss traces", rows.len(), traces.len()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schemas_have_unique_keys_and_an_output() {
        for c in COMMANDS {
            let mut names: Vec<&str> = c.schema.iter().map(|k| k.name).collect();
            assert!(names.contains(&"out"), "{}", c.name);
            names.sort();
            let n = names.len();
            names.dedup();
            assert_eq!(names.len(), n, "{}", c.name);
        }
    }

    #[test]
    fn dirichlet_descriptions() {
        assert_eq!(dirichlet_seed("dirichlet(seed=17)").unwrap(), 17);
        assert!(dirichlet_seed("scripted").is_err());
    }
}
