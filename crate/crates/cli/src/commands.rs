//! Subcommand implementations.

use std::path::Path;
use std::process::ExitCode;

use serde::Serialize;

use disciple_core::critic::{partition_by_landuse, Partition};
use disciple_core::data::{
    load_manifest, save_manifest, split_by_longitude, synth, write_atomic, ObservationSet,
    SplitPart, SplitSpec, DEFAULT_SPLIT_SEED, DEFAULT_TRAIN_RATIO,
};
use disciple_core::dsl::{self, GeneratorConfig};
use disciple_core::evolution::{
    concept_bottleneck_program, random_search_baseline, zero_shot_baseline, BackendConfig,
    Evolution, EvolutionConfig,
};
use disciple_core::explain::{export_dot, node_importance};
use disciple_core::fitness::{
    fit_head, make_candidate, mean_baseline, score_program, Candidate, EvalContext, Metric,
    MetricId, Origin, Provenance,
};
use disciple_core::llm::{HttpBackend, LlmBackend, PromptBundle, ScriptedBackend};
use disciple_core::simplify::simplify as simplify_candidate;
use disciple_core::{FeatureProgram, PrimitiveRegistry};

pub struct CmdError {
    pub kind: &'static str,
    pub code: u8,
    pub message: String,
}

impl CmdError {
    fn config(message: impl Into<String>) -> Self {
        CmdError {
            kind: "config",
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CmdError {
            kind: "data",
            code: 3,
            message: message.into(),
        }
    }

    fn backend(message: impl Into<String>) -> Self {
        CmdError {
            kind: "backend",
            code: 4,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        CmdError {
            kind: "internal",
            code: 5,
            message: message.into(),
        }
    }
}

impl From<disciple_core::data::DataError> for CmdError {
    fn from(e: disciple_core::data::DataError) -> Self {
        CmdError::data(e.to_string())
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::internal(e.to_string())
    }
}

pub fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let payload = serde_json::json!({"error": {"kind": kind, "message": message}});
    eprintln!("{payload}");
    ExitCode::from(code)
}

// ---------------------------------------------------------------------

pub fn gen_data(seed: u64, n: usize, preset: &str, out: &Path) -> Result<(), CmdError> {
    let preset = synth::Preset::parse(preset).ok_or_else(|| {
        CmdError::config(format!(
            "unknown preset {preset:?}; expected density-synthetic, poverty-synthetic, or agb-synthetic"
        ))
    })?;
    let params = preset.params(seed, n);
    let set = synth::generate_synthetic_world(&params)?;
    std::fs::create_dir_all(out)?;
    let manifest = save_manifest(&set, out)?;
    println!(
        "wrote {} observations ({} preset, seed {seed}) to {}",
        set.len(),
        preset.name(),
        manifest.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------

struct Session {
    set: ObservationSet,
    split: SplitSpec,
    registry: PrimitiveRegistry,
}

impl Session {
    fn open(data: &Path) -> Result<Self, CmdError> {
        let set = load_manifest(data)?;
        let split = split_by_longitude(&set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED)?;
        Ok(Session {
            set,
            split,
            registry: PrimitiveRegistry::standard(),
        })
    }

    fn part(&self, part: SplitPart) -> Vec<&disciple_core::data::Observation> {
        self.set.by_ids(self.split.part(part))
    }

    fn load_program(&self, path: &Path) -> Result<FeatureProgram, CmdError> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| CmdError::data(format!("cannot read {}: {e}", path.display())))?;
        dsl::parse_and_check(&source, &self.registry)
            .map_err(|e| CmdError::data(format!("{}: {e}", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<EvolutionConfig, CmdError> {
    let config = match path {
        None => EvolutionConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CmdError::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CmdError::config(format!("{}: {e}", p.display())))?
        }
    };
    config.validate().map_err(CmdError::config)?;
    Ok(config)
}

fn build_backend(
    config: &EvolutionConfig,
    vocabulary: &[String],
) -> Result<Box<dyn LlmBackend>, CmdError> {
    match &config.backend {
        BackendConfig::Scripted => {
            let generator = GeneratorConfig {
                concepts: vocabulary.to_vec(),
                single_feature: !config.feature_set_mode,
                ..GeneratorConfig::default()
            };
            let mut backend = ScriptedBackend::new(generator);
            backend.max_features = config.max_features;
            Ok(Box::new(backend))
        }
        BackendConfig::Http {
            url,
            model,
            timeout_s,
        } => HttpBackend::from_env_with(url.clone(), model.clone(), None, *timeout_s)
            .map(|b| Box::new(b) as Box<dyn LlmBackend>)
            .map_err(|e| CmdError::backend(e.to_string())),
    }
}

#[derive(Serialize)]
struct HeadReport<'a> {
    feature_names: &'a [String],
    weights_standardized: &'a [f64],
    weights: Vec<f64>,
    intercept: f64,
    feature_means: &'a [f64],
    feature_stds: &'a [f64],
    log_target: bool,
    metric: &'static str,
    score_train: f64,
    score_test: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    score_ood: Option<f64>,
}

pub fn discover(data: &Path, config_path: Option<&Path>, out: &Path) -> Result<(), CmdError> {
    let started = std::time::Instant::now();
    let config = load_config(config_path)?;
    let session = Session::open(data)?;
    let metric = Metric::new(config.metric.unwrap_or(session.set.metric_id));
    let descr = config
        .descr
        .clone()
        .unwrap_or_else(|| session.set.target_name.clone());
    let backend = build_backend(&config, &session.set.vocabulary)?;
    let bundle = PromptBundle::new(&descr, &session.registry, &session.set.vocabulary)
        .with_single_feature(&descr, !config.feature_set_mode);
    let cache = disciple_core::primitives::PrimitiveCache::default();
    let ctx = EvalContext {
        registry: &session.registry,
        cache: Some(&cache),
        limits: config.eval_limits,
        max_error_rate: disciple_core::fitness::DEFAULT_MAX_ERROR_RATE,
    };
    let train = session.part(SplitPart::Train);
    let test = session.part(SplitPart::Test);
    let ood = session.part(SplitPart::Ood);
    let partition: Option<Partition> = if session.set.vocabulary.is_empty() {
        None
    } else {
        partition_by_landuse(&train, &session.set.vocabulary).ok()
    };

    let evolution = Evolution::new(
        &config,
        metric,
        &bundle,
        backend.as_ref(),
        ctx,
        train.clone(),
        test,
        ood,
        partition,
    );
    let result = evolution.run().map_err(|e| CmdError::backend(e.to_string()))?;

    std::fs::create_dir_all(out)?;
    let best_text = dsl::pretty_print(&result.best.program);
    write_atomic(&out.join("best.fp"), best_text.as_bytes())?;

    let head = result
        .best
        .head
        .as_ref()
        .ok_or_else(|| CmdError::internal("best candidate lacks a head"))?;
    let (weights, intercept) = head.destandardized();
    let head_report = HeadReport {
        feature_names: &head.feature_names,
        weights_standardized: &head.weights,
        weights,
        intercept,
        feature_means: &head.feature_means,
        feature_stds: &head.feature_stds,
        log_target: head.log_target,
        metric: metric.id.name(),
        score_train: result.best.score_train,
        score_test: result.best.score_test,
        score_ood: result.ood_score,
    };
    write_atomic(
        &out.join("head.json"),
        serde_json::to_string_pretty(&head_report)
            .map_err(|e| CmdError::internal(e.to_string()))?
            .as_bytes(),
    )?;

    let mut run_log = String::new();
    for record in &result.log {
        run_log.push_str(&serde_json::to_string(record).map_err(|e| CmdError::internal(e.to_string()))?);
        run_log.push('\n');
    }
    write_atomic(&out.join("run.jsonl"), run_log.as_bytes())?;

    let mut transcript = String::new();
    for record in &result.transcript {
        transcript
            .push_str(&serde_json::to_string(record).map_err(|e| CmdError::internal(e.to_string()))?);
        transcript.push('\n');
    }
    write_atomic(&out.join("transcript.jsonl"), transcript.as_bytes())?;

    let dag = dsl::ast_to_dag(&result.best.program);
    let reports = node_importance(&result.best, &train, &metric, &ctx);
    let dot = export_dot(&dag, Some(&reports), "best");
    write_atomic(&out.join("best.dot"), dot.as_bytes())?;

    println!("best program ({} features):", result.best.program.features.len());
    print!("{best_text}");
    println!(
        "train {} = {:.6}, test = {:.6}, ood = {}",
        metric.id.name(),
        result.best.score_train,
        result.best.score_test,
        result
            .ood_score
            .map(|s| format!("{s:.6}"))
            .unwrap_or_else(|| "n/a".to_string())
    );
    println!("llm calls: {}", result.llm_calls);
    eprintln!("elapsed: {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------

pub fn eval(program: &Path, data: &Path, split: SplitPart) -> Result<(), CmdError> {
    let session = Session::open(data)?;
    let program = session.load_program(program)?;
    let train = session.part(SplitPart::Train);
    let subset = session.part(split);
    if subset.is_empty() {
        return Err(CmdError::data("requested split is empty"));
    }
    let ctx = EvalContext::new(&session.registry, None);
    let split_name = match split {
        SplitPart::Train => "train",
        SplitPart::Test => "test",
        SplitPart::Ood => "ood",
    };
    println!("split: {split_name} ({} observations)", subset.len());
    println!("{:<8} {:>12}", "metric", "score");
    for id in MetricId::all() {
        let metric = Metric::new(id);
        let head = fit_head(&program, &train, &metric, &ctx)
            .map_err(|e| CmdError::data(format!("fit under {}: {e}", id.name())))?;
        let score = score_program(&program, &head, &subset, &metric, &ctx)
            .map_err(|e| CmdError::data(e.to_string()))?;
        println!("{:<8} {:>12.6}", id.name(), score);
    }
    Ok(())
}

// ---------------------------------------------------------------------

pub fn simplify(program: &Path, data: &Path, out: Option<&Path>) -> Result<(), CmdError> {
    let session = Session::open(data)?;
    let program = session.load_program(program)?;
    let train = session.part(SplitPart::Train);
    let test = session.part(SplitPart::Test);
    let metric = Metric::new(session.set.metric_id);
    let ctx = EvalContext::new(&session.registry, None);
    let before = make_candidate(
        1,
        program,
        Provenance::new(Origin::Init),
        &train,
        &test,
        &metric,
        &ctx,
        disciple_core::fitness::HeadMode::FeatureSet,
    );
    if !before.valid {
        return Err(CmdError::data(format!(
            "program is invalid on this dataset: {}",
            before.note.unwrap_or_default()
        )));
    }
    let bindings_before = before.program.bindings.len();
    let features_before = before.program.features.len();
    let score_before = before.score_train;
    let after = simplify_candidate(
        before,
        disciple_core::simplify::DEFAULT_PRUNE_THRESHOLD,
        disciple_core::simplify::DEFAULT_PRUNE_SLACK,
        &train,
        &test,
        &metric,
        &ctx,
        disciple_core::fitness::HeadMode::FeatureSet,
    );
    let text = dsl::pretty_print(&after.program);
    print!("{text}");
    println!(
        "bindings: {bindings_before} -> {}, features: {features_before} -> {}, train {} : {:.6} -> {:.6}",
        after.program.bindings.len(),
        after.program.features.len(),
        metric.id.name(),
        score_before,
        after.score_train,
    );
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------

pub fn explain(program: &Path, data: &Path, dot: &Path) -> Result<(), CmdError> {
    let session = Session::open(data)?;
    let program = session.load_program(program)?;
    let train = session.part(SplitPart::Train);
    let metric = Metric::new(session.set.metric_id);
    let ctx = EvalContext::new(&session.registry, None);
    let candidate = make_candidate(
        1,
        program,
        Provenance::new(Origin::Init),
        &train,
        &[],
        &metric,
        &ctx,
        disciple_core::fitness::HeadMode::FeatureSet,
    );
    if !candidate.valid {
        return Err(CmdError::data(format!(
            "program is invalid on this dataset: {}",
            candidate.note.unwrap_or_default()
        )));
    }
    let reports = node_importance(&candidate, &train, &metric, &ctx);
    let dag = dsl::ast_to_dag(&candidate.program);
    let text = export_dot(&dag, Some(&reports), "best");
    write_atomic(dot, text.as_bytes())?;
    println!(
        "{}",
        serde_json::to_string_pretty(&reports).map_err(|e| CmdError::internal(e.to_string()))?
    );
    eprintln!("wrote {}", dot.display());
    Ok(())
}

// ---------------------------------------------------------------------

#[derive(Clone, Copy)]
pub enum Baseline {
    Mean,
    ConceptBottleneck,
    RandomSearch,
    ZeroShot,
}

fn print_candidate_table(
    label: &str,
    candidate: &Candidate,
    session: &Session,
    ctx: &EvalContext<'_>,
) -> Result<(), CmdError> {
    let train = session.part(SplitPart::Train);
    let test = session.part(SplitPart::Test);
    let ood = session.part(SplitPart::Ood);
    println!("baseline: {label}");
    println!("{:<8} {:>12} {:>12} {:>12}", "metric", "train", "test", "ood");
    for id in MetricId::all() {
        let metric = Metric::new(id);
        let head = fit_head(&candidate.program, &train, &metric, ctx)
            .map_err(|e| CmdError::data(format!("fit under {}: {e}", id.name())))?;
        let mut row = format!("{:<8}", id.name());
        for subset in [&train, &test, &ood] {
            if subset.is_empty() {
                row.push_str(&format!(" {:>12}", "n/a"));
                continue;
            }
            let score = score_program(&candidate.program, &head, subset, &metric, ctx)
                .map_err(|e| CmdError::data(e.to_string()))?;
            row.push_str(&format!(" {score:>12.6}"));
        }
        println!("{row}");
    }
    Ok(())
}

pub fn baseline(kind: Baseline, data: &Path, config_path: Option<&Path>) -> Result<(), CmdError> {
    let config = load_config(config_path)?;
    let session = Session::open(data)?;
    let metric = Metric::new(config.metric.unwrap_or(session.set.metric_id));
    let ctx = EvalContext::new(&session.registry, None);
    let train = session.part(SplitPart::Train);
    let test = session.part(SplitPart::Test);

    match kind {
        Baseline::Mean => {
            let candidate = mean_baseline(&train, &test, &metric, &ctx);
            print_candidate_table("mean", &candidate, &session, &ctx)?;
        }
        Baseline::ConceptBottleneck => {
            let program = concept_bottleneck_program(&session.set.vocabulary);
            let candidate = make_candidate(
                1,
                program,
                Provenance::new(Origin::Baseline { kind: "cb".into() }),
                &train,
                &test,
                &metric,
                &ctx,
                disciple_core::fitness::HeadMode::FeatureSet,
            );
            if !candidate.valid {
                return Err(CmdError::data(format!(
                    "concept bottleneck invalid: {}",
                    candidate.note.unwrap_or_default()
                )));
            }
            print_candidate_table("concept-bottleneck", &candidate, &session, &ctx)?;
        }
        Baseline::ZeroShot => {
            let descr = config
                .descr
                .clone()
                .unwrap_or_else(|| session.set.target_name.clone());
            let backend = build_backend(&config, &session.set.vocabulary)?;
            let bundle = PromptBundle::new(&descr, &session.registry, &session.set.vocabulary)
                .with_single_feature(&descr, !config.feature_set_mode);
            let (candidates, mean_test) = zero_shot_baseline(
                5,
                &bundle,
                backend.as_ref(),
                &train,
                &test,
                &metric,
                &ctx,
                config.head_mode(),
                config.seed,
                config.llm_attempts,
            );
            println!("baseline: zero-shot ({} programs)", candidates.len());
            for c in &candidates {
                println!(
                    "  program {}: train {}, test {}",
                    c.id,
                    fmt_score(c.score_train),
                    fmt_score(c.score_test)
                );
            }
            match mean_test {
                Some(m) => println!("mean test {} = {m:.6}", metric.id.name()),
                None => println!("mean test {} = n/a (no valid programs)", metric.id.name()),
            }
        }
        Baseline::RandomSearch => {
            let descr = config
                .descr
                .clone()
                .unwrap_or_else(|| session.set.target_name.clone());
            let backend = build_backend(&config, &session.set.vocabulary)?;
            let bundle = PromptBundle::new(&descr, &session.registry, &session.set.vocabulary)
                .with_single_feature(&descr, !config.feature_set_mode);
            let budget = config.nominal_llm_budget();
            let (best, used) = random_search_baseline(
                budget,
                &bundle,
                backend.as_ref(),
                &train,
                &test,
                &metric,
                &ctx,
                config.head_mode(),
                config.seed,
                config.llm_attempts,
            );
            println!("baseline: random-search (budget {budget} calls, used {used})");
            match best {
                Some(c) => {
                    println!(
                        "best: train {} = {}, test = {}",
                        metric.id.name(),
                        fmt_score(c.score_train),
                        fmt_score(c.score_test)
                    );
                    print!("{}", dsl::pretty_print(&c.program));
                }
                None => println!("no valid program found within budget"),
            }
        }
    }
    Ok(())
}

fn fmt_score(score: f64) -> String {
    if score.is_finite() {
        format!("{score:.6}")
    } else {
        "invalid".to_string()
    }
}
