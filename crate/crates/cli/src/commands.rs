use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use car_core::bow_model::{
    corpus_from_jsonl, corpus_to_jsonl, sample_bow_corpus, sample_sequence_corpus, word_polarity, PlantedSpec,
    SequenceCorpusConfig, DEFAULT_POLARITY_TOL,
};
use car_core::equilibrium::{
    eligible_words, optimal_factual_index_set, verify_equilibrium, EquilibriumReport, SolutionFile, ELIGIBILITY_TOL,
};
use car_core::metrics::{class_word_mask, curves_to_csv, degeneration_score, export_curves, mean_transitions};
use car_core::objectives::{check_h_conditions, f_from_h, HConditionReport};
use car_core::trainer::{
    bow_selection_policy, infer_rationale, multiclass_train, train, CarParams, TrainConfig, TrainData,
};
use car_core::{prf1, BowModel, Document, HKind, HPair, MetricsReport, Role, SelectionPolicy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{manifest_path_for, Run, RunManifest};
use crate::{
    CheckFailed, CheckHArgs, Cli, Command, CorpusKind, EvalArgs, MakeModelArgs, SampleCorpusArgs, SolveArgs, TrainArgs,
    VerifyArgs,
};

struct Ctx {
    seed: u64,
    dry_run: bool,
    pretty: bool,
    parallel: bool,
}

type Rows = Vec<(String, String)>;

fn row(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

impl Ctx {
    fn print(&self, manifest: &RunManifest, manifest_path: &Path, rows: &Rows) -> Result<()> {
        if !self.pretty {
            println!("{}", serde_json::to_string(manifest)?);
            return Ok(());
        }
        let mut rows = rows.clone();
        if !self.dry_run {
            rows.push(row("manifest", manifest_path.display()));
        }
        rows.push(row("seconds", format!("{:.3}", manifest.duration_secs)));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        println!("{}{}", manifest.command, if self.dry_run { " (dry run)" } else { "" });
        for (k, v) in rows {
            println!("  {k:<width$}  {v}");
        }
        Ok(())
    }

    /// Print what the run would do; `true` means stop here.
    fn dry(&self, run: &Run, manifest_path: &Path) -> Result<bool> {
        if self.dry_run {
            self.print(&run.preview(), manifest_path, &vec![row("status", "config valid")])?;
        }
        Ok(self.dry_run)
    }

    fn complete(&self, run: Run, manifest_path: &Path, rows: &Rows) -> Result<RunManifest> {
        let manifest = run.finish(manifest_path)?;
        self.print(&manifest, manifest_path, rows)?;
        Ok(manifest)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        dry_run: cli.dry_run,
        pretty: cli.pretty,
        parallel: cli.jobs.is_some(),
    };
    match &cli.command {
        Command::MakeModel(a) => make_model(&ctx, a),
        Command::SampleCorpus(a) => sample_corpus(&ctx, a),
        Command::Solve(a) => solve(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
        Command::CheckH(a) => check_h(&ctx, a),
    }
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn load_model(run: &mut Run, path: &Path) -> Result<BowModel> {
    let text = run.input(path)?;
    BowModel::from_json(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn load_corpus(run: &mut Run, path: &Path) -> Result<Vec<Document>> {
    let text = run.input(path)?;
    let docs = corpus_from_jsonl(&text).with_context(|| format!("parsing corpus {}", path.display()))?;
    ensure!(!docs.is_empty(), "corpus {} is empty", path.display());
    Ok(docs)
}

fn fraction_list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn make_model(ctx: &Ctx, a: &MakeModelArgs) -> Result<()> {
    let classes = a.class_words.len();
    ensure!(classes >= 2, "--class-words needs a count for at least two classes");
    let prior = a.prior.clone().unwrap_or_else(|| vec![1.0 / classes as f64; classes]);
    if prior.len() != classes {
        bail!(
            "--prior has {} entries but --class-words describes {classes} classes",
            prior.len()
        );
    }
    let spec = PlantedSpec {
        vocab_size: a.vocab,
        class_words: a.class_words.clone(),
        high: a.high.clone(),
        low: a.low,
        neutral: a.neutral,
        prior,
    };
    let model = BowModel::planted(&spec)?;
    let mut run = Run::new("make-model", json!({ "args": a, "planted": spec }), ctx.seed);
    let manifest_path = manifest_path_for(&a.out);
    if ctx.dry(&run, &manifest_path)? {
        return Ok(());
    }
    run.output(a.out.clone(), to_json_pretty(&model)?);
    let planted: usize = a.class_words.iter().sum();
    let rows = vec![
        row("model", a.out.display()),
        row("vocab", a.vocab),
        row("class words", planted),
        row("neutral words", a.vocab - planted),
        row("prior", fraction_list(model.prior())),
    ];
    ctx.complete(run, &manifest_path, &rows)?;
    Ok(())
}

fn sample_corpus(ctx: &Ctx, a: &SampleCorpusArgs) -> Result<()> {
    let mut run = Run::new("sample-corpus", json!({ "args": a }), ctx.seed);
    let model = load_model(&mut run, &a.model)?;
    ensure!(a.docs_per_class >= 1, "--docs-per-class must be at least 1");
    let manifest_path = manifest_path_for(&a.out);
    if ctx.dry(&run, &manifest_path)? {
        return Ok(());
    }
    let docs = match a.kind {
        CorpusKind::Bow => sample_bow_corpus(&model, a.docs_per_class, ctx.seed)?,
        CorpusKind::Sequence => {
            let mut cfg = SequenceCorpusConfig::new(a.docs_per_class, a.seq_len, a.phrase_len);
            cfg.mixed_background = a.mixed_background;
            sample_sequence_corpus(&model, &cfg, ctx.seed)?
        }
    };
    run.output(a.out.clone(), corpus_to_jsonl(&docs)?);
    let rows = vec![row("corpus", a.out.display()), row("documents", docs.len())];
    ctx.complete(run, &manifest_path, &rows)?;
    Ok(())
}

fn curves_path(a: &SolveArgs) -> PathBuf {
    a.curves.clone().unwrap_or_else(|| a.out.with_extension("curves.csv"))
}

fn solve(ctx: &Ctx, a: &SolveArgs) -> Result<()> {
    let mut run = Run::new("solve", json!({ "args": a }), ctx.seed);
    let model = load_model(&mut run, &a.model)?;
    ensure!(
        a.alpha.is_finite() && a.alpha >= 0.0,
        "--alpha must be a non-negative budget, got {}",
        a.alpha
    );
    ensure!(
        a.class_t < model.class_count(),
        "--class {} out of range for {} classes",
        a.class_t,
        model.class_count()
    );
    let h = HPair::from_kind(a.h)?;
    let manifest_path = manifest_path_for(&a.out);
    if ctx.dry(&run, &manifest_path)? {
        return Ok(());
    }
    let solution = optimal_factual_index_set(&model, a.class_t, a.alpha, &h)
        .context("brute-force search over the eligible words")?;
    let curves = export_curves(
        &model,
        &solution.factual_policy,
        &solution.counterfactual_policy,
        a.class_t,
    )?;
    run.output(a.out.clone(), to_json_pretty(&solution.to_file())?);
    run.output(curves_path(a), curves_to_csv(&curves)?);
    let rows = vec![
        row("solution", a.out.display()),
        row("curves", curves_path(a).display()),
        row("index set", format!("{:?}", solution.index_set)),
        row("objective", solution.objective),
        row("budget used", solution.budget_used),
        row("slack", solution.slack()),
    ];
    ctx.complete(run, &manifest_path, &rows)?;
    Ok(())
}

fn train_config(a: &TrainArgs, class_count: usize) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::new(a.variant);
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr_generator = v;
        cfg.lr_discriminator = v;
    }
    if let Some(v) = a.lr_generator {
        cfg.lr_generator = v;
    }
    if let Some(v) = a.lr_discriminator {
        cfg.lr_discriminator = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lambda1 {
        cfg.reg.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        cfg.reg.lambda2 = v;
    }
    if let Some(v) = a.alpha {
        cfg.reg.alpha = v;
    }
    if let Some(v) = &a.class_alpha {
        cfg.reg.class_alpha = Some(v.clone());
    }
    if let Some(v) = a.h {
        cfg.h_kind = v;
    }
    if let Some(v) = a.embed_dim {
        cfg.embed_dim = v;
    }
    let mut problems = cfg.problems();
    if let Some(v) = &a.class_alpha {
        if v.len() != class_count {
            problems.push(format!(
                "--class-alpha has {} entries for {class_count} classes",
                v.len()
            ));
        }
    }
    if !problems.is_empty() {
        bail!("invalid training config:\n  - {}", problems.join("\n  - "));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct FinalSparsity {
    class_t: usize,
    sparsity: f64,
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut inputs = Run::new("train", json!(null), ctx.seed);
    let (model, docs) = match (&a.model, &a.corpus) {
        (Some(path), None) => (Some(load_model(&mut inputs, path)?), None),
        (None, Some(path)) => (None, Some(load_corpus(&mut inputs, path)?)),
        _ => bail!("pass exactly one of --model and --corpus"),
    };
    let class_count = match (&model, &docs) {
        (Some(m), _) => m.class_count(),
        (None, Some(d)) => {
            let seen = d.iter().map(|doc| doc.label).max().unwrap_or(0) + 1;
            let classes = a.classes.unwrap_or(seen);
            ensure!(
                classes >= seen,
                "--classes {classes} but the corpus has label {}",
                seen - 1
            );
            classes
        }
        _ => unreachable!(),
    };
    let base = train_config(a, class_count)?;
    let data = match (&model, &docs) {
        (Some(m), _) => TrainData::Model(m),
        (None, Some(d)) => TrainData::Corpus { docs: d, class_count },
        _ => unreachable!(),
    };
    let sweep = a.seeds.is_some();
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![ctx.seed]);
    ensure!(!seeds.is_empty(), "--seeds is empty");

    let job = |seed: u64| -> Result<(RunManifest, PathBuf, Rows)> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let dir = if sweep {
            a.out_dir.join(format!("seed-{seed}"))
        } else {
            a.out_dir.clone()
        };
        let config = json!({
            "model": a.model,
            "corpus": a.corpus,
            "class_count": class_count,
            "train": cfg,
        });
        let mut run = inputs.fork(config, seed);
        let manifest_path = dir.join("manifest.json");
        if ctx.dry_run {
            return Ok((run.preview(), manifest_path, vec![row("status", "config valid")]));
        }
        let out = if class_count == 2 {
            train(data, &cfg)?
        } else {
            multiclass_train(data, &cfg)?
        };
        let finals: Vec<FinalSparsity> = (0..class_count)
            .filter_map(|t| {
                out.history
                    .recent_sparsity(t, 100)
                    .map(|sparsity| FinalSparsity { class_t: t, sparsity })
            })
            .collect();
        run.output(dir.join("params.json"), to_json_pretty(&out.params)?);
        run.output(dir.join("history.csv"), out.history.to_csv()?);
        let mut rows = vec![
            row("out dir", dir.display()),
            row("seed", seed),
            row("steps", cfg.steps),
        ];
        for f in &finals {
            rows.push(row(&format!("sparsity[{}]", f.class_t), format!("{:.4}", f.sparsity)));
        }
        let manifest = run.finish(&manifest_path)?;
        Ok((manifest, manifest_path, rows))
    };

    let results: Vec<Result<(RunManifest, PathBuf, Rows)>> = if ctx.parallel && seeds.len() > 1 {
        seeds.par_iter().map(|&s| job(s)).collect()
    } else {
        seeds.iter().map(|&s| job(s)).collect()
    };
    for result in results {
        let (manifest, path, rows) = result?;
        ctx.print(&manifest, &path, &rows)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub documents: usize,
    pub metrics: MetricsReport,
    pub mean_transitions: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degeneration: Option<f64>,
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let mut run = Run::new("eval", json!({ "args": a }), ctx.seed);
    let params_text = run.input(&a.params)?;
    let params =
        CarParams::from_json(&params_text).with_context(|| format!("parsing params {}", a.params.display()))?;
    let docs = load_corpus(&mut run, &a.corpus)?;
    let model = a.model.as_ref().map(|p| load_model(&mut run, p)).transpose()?;
    if let Some(m) = &model {
        ensure!(
            m.vocab_size() == params.vocab_size,
            "model vocabulary {} does not match params vocabulary {}",
            m.vocab_size(),
            params.vocab_size
        );
    }
    if let Some(t) = a.class_t {
        ensure!(
            t < params.class_count,
            "--class {t} out of range for {} classes",
            params.class_count
        );
    }
    let manifest_path = manifest_path_for(&a.out);
    if ctx.dry(&run, &manifest_path)? {
        return Ok(());
    }
    let polarity = model.as_ref().map(|m| word_polarity(m, DEFAULT_POLARITY_TOL));
    let mut masks = Vec::with_capacity(docs.len());
    let mut truths = Vec::with_capacity(docs.len());
    for (k, doc) in docs.iter().enumerate() {
        let t = a.class_t.unwrap_or(doc.label);
        let label = a.with_label.then_some(doc.label);
        masks.push(infer_rationale(&params, doc, t, label).with_context(|| format!("document {k}"))?);
        let truth = match (&doc.truth_mask, &polarity) {
            (Some(mask), _) if t == doc.label => mask.clone(),
            (_, Some(pol)) => class_word_mask(doc, pol, t),
            _ => bail!("document {k} has no truth mask for class {t}; pass --model to score against class words"),
        };
        truths.push(truth);
    }
    let report = EvalReport {
        documents: docs.len(),
        metrics: prf1(&masks, &truths)?,
        mean_transitions: mean_transitions(&masks),
        degeneration: model
            .as_ref()
            .map(|m| degeneration_score(&masks, &docs, m))
            .transpose()?,
    };
    run.output(a.out.clone(), to_json_pretty(&report)?);
    let m = &report.metrics;
    let mut rows = vec![
        row("report", a.out.display()),
        row("documents", report.documents),
        row("precision", format!("{:.4}", m.precision)),
        row("recall", format!("{:.4}", m.recall)),
        row("f1", format!("{:.4}", m.f1)),
        row("sparsity", format!("{:.4}", m.sparsity)),
        row("transitions", format!("{:.4}", report.mean_transitions)),
    ];
    if let Some(d) = report.degeneration {
        rows.push(row("degeneration", format!("{d:.4}")));
    }
    ctx.complete(run, &manifest_path, &rows)?;
    if let Some(min) = a.min_f1 {
        if m.f1 < min {
            return Err(CheckFailed(format!("f1 {} is below --min-f1 {min}", m.f1)).into());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyEntry {
    pub class_t: usize,
    pub budget: f64,
    pub report: EquilibriumReport,
}

fn eligible_budget(model: &BowModel, t: usize) -> Result<f64> {
    let occ = model.occurrence(t);
    Ok(eligible_words(model, t, ELIGIBILITY_TOL)?.iter().map(|&i| occ[i]).sum())
}

fn verify(ctx: &Ctx, a: &VerifyArgs) -> Result<()> {
    let mut run = Run::new("verify", json!({ "args": a }), ctx.seed);
    let model = load_model(&mut run, &a.model)?;
    ensure!(model.class_count() == 2, "verify needs a two-class model");
    ensure!(a.tol.is_finite() && a.tol >= 0.0, "--tol must be non-negative");
    let text = run.input(&a.params)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.params.display()))?;
    let mut checks: Vec<(usize, SelectionPolicy, SelectionPolicy, f64)> = Vec::new();
    if value.get("index_set").is_some() {
        let file: SolutionFile = serde_json::from_value(value).context("parsing solution file")?;
        if let Some(t) = a.class_t {
            ensure!(
                t == file.class_t,
                "--class {t} but the solution is for class {}",
                file.class_t
            );
        }
        let t = file.class_t;
        ensure!(t < 2, "solution class {t} out of range");
        checks.push((
            t,
            SelectionPolicy::new(t, file.factual_select_prob, Role::Factual)?,
            SelectionPolicy::new(t, file.counterfactual_select_prob, Role::Counterfactual)?,
            a.budget.unwrap_or(file.budget),
        ));
    } else {
        let params = CarParams::from_json(&text).with_context(|| format!("parsing params {}", a.params.display()))?;
        ensure!(
            params.vocab_size == model.vocab_size() && params.class_count == 2,
            "params ({} words, {} classes) do not match the model ({} words, 2 classes)",
            params.vocab_size,
            params.class_count,
            model.vocab_size()
        );
        let classes: Vec<usize> = match a.class_t {
            Some(t) => {
                ensure!(t < 2, "--class {t} out of range for 2 classes");
                vec![t]
            }
            None => vec![0, 1],
        };
        for t in classes {
            let budget = match a.budget {
                Some(b) => b,
                None => eligible_budget(&model, t)?,
            };
            checks.push((
                t,
                bow_selection_policy(&params, t, t)?,
                bow_selection_policy(&params, t, 1 - t)?,
                budget,
            ));
        }
    }
    let manifest_path = manifest_path_for(&a.out);
    if ctx.dry(&run, &manifest_path)? {
        return Ok(());
    }
    let mut entries = Vec::new();
    for (t, factual, counterfactual, budget) in checks {
        let report = verify_equilibrium(&factual, &counterfactual, &model, t, budget, a.tol)?;
        entries.push(VerifyEntry {
            class_t: t,
            budget,
            report,
        });
    }
    run.output(a.out.clone(), to_json_pretty(&entries)?);
    let mut rows = vec![row("report", a.out.display())];
    for e in &entries {
        let r = &e.report;
        rows.push(row(
            &format!("class {}", e.class_t),
            format!(
                "{} (counterfactual distance {:.4}, ineligible support {:?}, slack {:.4})",
                if r.passed { "pass" } else { "FAIL" },
                r.counterfactual_distance,
                r.ineligible_support,
                r.budget_slack
            ),
        ));
    }
    ctx.complete(run, &manifest_path, &rows)?;
    let failures: Vec<String> = entries
        .iter()
        .filter(|e| !e.report.passed)
        .map(|e| {
            format!(
                "class {}: counterfactual distance {} (tol {}), ineligible support {:?}, budget slack {}",
                e.class_t, e.report.counterfactual_distance, a.tol, e.report.ineligible_support, e.report.budget_slack
            )
        })
        .collect();
    if !failures.is_empty() {
        return Err(CheckFailed(format!("equilibrium check failed; {}", failures.join("; "))).into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckHReport {
    pub h: HKind,
    pub grid_step: f64,
    pub conditions: HConditionReport,
    pub f_convex: bool,
    pub f_at_one: f64,
    pub passed: bool,
}

fn check_h(ctx: &Ctx, a: &CheckHArgs) -> Result<()> {
    ensure!(
        a.grid_step > 0.0 && a.grid_step <= 0.5,
        "--grid-step must lie in (0, 0.5], got {}",
        a.grid_step
    );
    let h = HPair::from_kind(a.h)?;
    let mut run = Run::new("check-h", json!({ "args": a }), ctx.seed);
    let manifest_path = manifest_path_for(&a.out);
    if ctx.dry(&run, &manifest_path)? {
        return Ok(());
    }
    let conditions = check_h_conditions(&h, a.grid_step);
    let f = f_from_h(&h);
    let report = CheckHReport {
        h: a.h,
        grid_step: a.grid_step,
        passed: conditions.passed && f.convex && f.f_at_one == 0.0,
        conditions,
        f_convex: f.convex,
        f_at_one: f.f_at_one,
    };
    run.output(a.out.clone(), to_json_pretty(&report)?);
    let rows = vec![
        row("report", a.out.display()),
        row("conditions", report.conditions.passed),
        row("f convex", report.f_convex),
        row("f(1)", report.f_at_one),
    ];
    ctx.complete(run, &manifest_path, &rows)?;
    if !report.passed {
        let why = report
            .conditions
            .failure
            .clone()
            .unwrap_or_else(|| "f is not a valid divergence".into());
        return Err(CheckFailed(format!("h pair {} fails: {why}", a.h)).into());
    }
    Ok(())
}
