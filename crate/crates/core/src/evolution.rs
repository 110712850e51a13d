//! The learning loop: seeded population initialization from the objective
//! prompt, rank-based parent sampling, LLM crossover/mutation, critic and
//! simplifier passes, and best-program tracking with elitism.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{critique, Partition};
use crate::data::Observation;
use crate::dsl::{parse, pretty_print, EvalLimits};
use crate::fitness::{
    make_candidate, score_program, Candidate, EvalContext, HeadMode, Metric, MetricId, Origin,
    Provenance,
};
use crate::llm::{
    build_crossover_prompt, build_mutation_prompt, build_objective_prompt, request_program,
    Exchange, LlmBackend, PromptBundle, Sampling, DEFAULT_LLM_ATTEMPTS,
};
use crate::simplify::{simplify, DEFAULT_PRUNE_SLACK, DEFAULT_PRUNE_THRESHOLD};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    /// Generations T.
    pub generations: usize,
    /// Population size M.
    pub population: usize,
    /// Mutation probability ρ_m.
    pub mutation_prob: f64,
    /// Target description; defaults to the manifest's target_name.
    pub descr: Option<String>,
    /// Fitness metric; defaults to the manifest's metric_id.
    pub metric: Option<MetricId>,
    pub seed: u64,
    pub backend: BackendConfig,
    pub critic_enabled: bool,
    pub critic_worst_k: usize,
    pub simplify_enabled: bool,
    /// Off = single-feature mode (the program is the predictor).
    pub feature_set_mode: bool,
    pub prune_threshold: f64,
    pub prune_slack: f64,
    pub llm_attempts: u32,
    /// Offspring feature-list cap used by the scripted recombiner.
    pub max_features: usize,
    pub eval_limits: EvalLimits,
    /// Worker cap; None uses all cores.
    pub threads: Option<usize>,
    /// Optional example programs appended to the objective prompt.
    pub few_shot: Vec<String>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            generations: 15,
            population: 100,
            mutation_prob: 0.3,
            descr: None,
            metric: None,
            seed: 0,
            backend: BackendConfig::Scripted,
            critic_enabled: true,
            critic_worst_k: crate::critic::DEFAULT_WORST_K,
            simplify_enabled: true,
            feature_set_mode: true,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            prune_slack: DEFAULT_PRUNE_SLACK,
            llm_attempts: DEFAULT_LLM_ATTEMPTS,
            max_features: 8,
            eval_limits: EvalLimits::default(),
            threads: None,
            few_shot: Vec::new(),
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.generations < 1 {
            return Err("generations must be at least 1".into());
        }
        if self.population < 2 {
            return Err("population must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err("mutation_prob must lie in [0, 1]".into());
        }
        if self.llm_attempts < 1 {
            return Err("llm_attempts must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_mode(&self) -> HeadMode {
        if self.feature_set_mode {
            HeadMode::FeatureSet
        } else {
            HeadMode::SingleFeature
        }
    }

    /// Nominal LLM-call budget of a full run, before retries: the matched
    /// budget handed to the random-search baseline.
    pub fn nominal_llm_budget(&self) -> u64 {
        let critic_rounds = if self.critic_enabled { 1.0 } else { 0.0 };
        let per_gen = self.population as f64 * (1.0 + self.mutation_prob + critic_rounds);
        (self.population as f64 + self.generations as f64 * per_gen).ceil() as u64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Scripted,
    Http {
        url: Option<String>,
        model: Option<String>,
        timeout_s: Option<u64>,
    },
}

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("every candidate in generation {generation} is invalid; last failure: {diagnostic}")]
    AllInvalid {
        generation: usize,
        diagnostic: String,
    },
    #[error("too few valid members to sample parents ({valid} valid)")]
    TooFewValid { valid: usize },
    #[error("configuration: {0}")]
    Config(String),
}

/// One generation's population plus the best candidate ever seen.
#[derive(Debug, Clone)]
pub struct ProgramBank {
    pub generation: usize,
    pub members: Vec<Candidate>,
    pub best_ever: Candidate,
}

impl ProgramBank {
    pub fn valid_members(&self) -> Vec<&Candidate> {
        let mut v: Vec<&Candidate> = self.members.iter().filter(|c| c.valid).collect();
        v.sort_by(|a, b| {
            a.score_train
                .partial_cmp(&b.score_train)
                .expect("valid scores are finite")
                .then(a.id.cmp(&b.id))
        });
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Candidate {
        generation: usize,
        candidate_id: u64,
        provenance: Provenance,
        valid: bool,
        score_train: Option<f64>,
        score_test: Option<f64>,
        strata_scores: BTreeMap<String, f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Generation {
        generation: usize,
        valid_members: usize,
        best_in_generation: Option<f64>,
        best_ever_train: f64,
        llm_calls_total: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub generation: usize,
    pub slot: usize,
    pub stage: String,
    pub attempt: u32,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug)]
pub struct RunResult {
    pub best: Candidate,
    pub final_bank: ProgramBank,
    pub log: Vec<LogRecord>,
    pub transcript: Vec<TranscriptRecord>,
    pub llm_calls: u64,
    pub ood_score: Option<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable per-(generation, slot, stage) seed stream.
fn derive_seed(master: u64, generation: u64, slot: u64, salt: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master ^ salt).wrapping_add(generation)).wrapping_add(slot))
}

const SALT_INIT: u64 = 0x1717;
const SALT_SLOT: u64 = 0x5107;
const SALT_XOVER: u64 = 0xC805;
const SALT_MUT: u64 = 0x3417;
const SALT_CRITIC: u64 = 0xC217;

fn placeholder_program() -> crate::dsl::FeatureProgram {
    parse("def placeholder(loc):\n    return [(\"invalid\", 0.0)]\n").expect("placeholder parses")
}

pub struct Evolution<'a> {
    pub config: &'a EvolutionConfig,
    pub metric: Metric,
    pub bundle: &'a PromptBundle,
    pub backend: &'a dyn LlmBackend,
    pub ctx: EvalContext<'a>,
    pub train: Vec<&'a Observation>,
    pub test: Vec<&'a Observation>,
    pub ood: Vec<&'a Observation>,
    /// Land-use strata for the critic; None disables stratified passes.
    pub partition: Option<Partition>,
    llm_calls: AtomicU64,
}

impl<'a> Evolution<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: &'a EvolutionConfig,
        metric: Metric,
        bundle: &'a PromptBundle,
        backend: &'a dyn LlmBackend,
        ctx: EvalContext<'a>,
        train: Vec<&'a Observation>,
        test: Vec<&'a Observation>,
        ood: Vec<&'a Observation>,
        partition: Option<Partition>,
    ) -> Self {
        Evolution {
            config,
            metric,
            bundle,
            backend,
            ctx,
            train,
            test,
            ood,
            partition,
            llm_calls: AtomicU64::new(0),
        }
    }

    fn candidate_id(&self, generation: usize, slot: usize) -> u64 {
        (generation as u64) * (self.config.population as u64) + slot as u64 + 1
    }

    fn record_exchanges(
        &self,
        generation: usize,
        slot: usize,
        exchanges: Vec<Exchange>,
    ) -> Vec<TranscriptRecord> {
        self.llm_calls
            .fetch_add(exchanges.len() as u64, Ordering::Relaxed);
        exchanges
            .into_iter()
            .map(|e| TranscriptRecord {
                generation,
                slot,
                stage: e.stage,
                attempt: e.attempt,
                prompt: e.prompt,
                response: e.response,
            })
            .collect()
    }

    /// M candidates sampled from the objective prompt alone, fitted and
    /// scored; failed slots become invalid placeholders.
    pub fn init_population(&self) -> Result<(ProgramBank, Vec<TranscriptRecord>), EvoError> {
        let prompt = build_objective_prompt(self.bundle);
        let mode = self.config.head_mode();
        let slots: Vec<(Candidate, Vec<TranscriptRecord>)> = (0..self.config.population)
            .into_par_iter()
            .map(|slot| {
                let mut exchanges = Vec::new();
                let seed = derive_seed(self.config.seed, 0, slot as u64, SALT_INIT);
                let id = self.candidate_id(0, slot);
                let candidate = match request_program(
                    self.backend,
                    "init",
                    &prompt,
                    Sampling::generation(seed),
                    self.ctx.registry,
                    self.config.llm_attempts,
                    &mut exchanges,
                ) {
                    Ok(program) => make_candidate(
                        id,
                        program,
                        Provenance::new(Origin::Init),
                        &self.train,
                        &self.test,
                        &self.metric,
                        &self.ctx,
                        mode,
                    ),
                    Err(e) => Candidate::invalid(
                        id,
                        placeholder_program(),
                        Provenance::new(Origin::Init),
                        e.to_string(),
                    ),
                };
                let records = self.record_exchanges(0, slot, exchanges);
                (candidate, records)
            })
            .collect();

        let mut members = Vec::with_capacity(slots.len());
        let mut transcript = Vec::new();
        for (c, records) in slots {
            members.push(c);
            transcript.extend(records);
        }
        let best = members
            .iter()
            .filter(|c| c.valid)
            .min_by(|a, b| {
                a.score_train
                    .partial_cmp(&b.score_train)
                    .expect("finite")
                    .then(a.id.cmp(&b.id))
            })
            .cloned();
        let Some(best_ever) = best else {
            let diagnostic = members
                .last()
                .and_then(|c| c.note.clone())
                .unwrap_or_default();
            return Err(EvoError::AllInvalid {
                generation: 0,
                diagnostic,
            });
        };
        Ok((
            ProgramBank {
                generation: 0,
                members,
                best_ever,
            },
            transcript,
        ))
    }

    /// Two distinct members drawn with probability ∝ 1/rank over the
    /// valid members (rank 1 = best train score). Invalid members are
    /// never sampled.
    pub fn sample_parents<'b>(
        &self,
        bank: &'b ProgramBank,
        rng: &mut ChaCha8Rng,
    ) -> Result<(&'b Candidate, &'b Candidate), EvoError> {
        let ranked = bank.valid_members();
        if ranked.len() < 2 {
            return Err(EvoError::TooFewValid {
                valid: ranked.len(),
            });
        }
        let weights: Vec<f64> = (1..=ranked.len()).map(|r| 1.0 / r as f64).collect();
        let total: f64 = weights.iter().sum();
        let draw = |rng: &mut ChaCha8Rng| -> usize {
            let mut x = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                x -= w;
                if x <= 0.0 {
                    return i;
                }
            }
            ranked.len() - 1
        };
        let first = draw(rng);
        let mut second = draw(rng);
        let mut guard = 0;
        while second == first {
            second = draw(rng);
            guard += 1;
            if guard > 64 {
                second = (first + 1) % ranked.len();
            }
        }
        Ok((ranked[first], ranked[second]))
    }

    fn offspring_slot(
        &self,
        bank: &ProgramBank,
        generation: usize,
        slot: usize,
    ) -> (Candidate, Vec<TranscriptRecord>) {
        let mode = self.config.head_mode();
        let id = self.candidate_id(generation, slot);
        let mut exchanges: Vec<Exchange> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            generation as u64,
            slot as u64,
            SALT_SLOT,
        ));

        let parents = match self.sample_parents(bank, &mut rng) {
            Ok(p) => p,
            Err(e) => {
                let c = Candidate::invalid(
                    id,
                    placeholder_program(),
                    Provenance::new(Origin::Init),
                    e.to_string(),
                );
                return (c, Vec::new());
            }
        };
        let provenance = Provenance::new(Origin::Crossover {
            parents: [parents.0.id, parents.1.id],
        });

        // crossover
        let xover_prompt = build_crossover_prompt(parents.0, parents.1, self.bundle);
        let xover_seed = derive_seed(self.config.seed, generation as u64, slot as u64, SALT_XOVER);
        let mut candidate = match request_program(
            self.backend,
            "crossover",
            &xover_prompt,
            Sampling::generation(xover_seed),
            self.ctx.registry,
            self.config.llm_attempts,
            &mut exchanges,
        ) {
            Ok(program) => make_candidate(
                id,
                program,
                provenance.clone(),
                &self.train,
                &self.test,
                &self.metric,
                &self.ctx,
                mode,
            ),
            Err(e) => Candidate::invalid(id, placeholder_program(), provenance, e.to_string()),
        };

        // mutation with probability ρ_m; the prompt carries the offspring's
        // current score, so the offspring is fitted first
        if rng.gen::<f64>() < self.config.mutation_prob && candidate.valid {
            let mut_prompt = build_mutation_prompt(&candidate, self.bundle);
            let mut_seed = derive_seed(self.config.seed, generation as u64, slot as u64, SALT_MUT);
            match request_program(
                self.backend,
                "mutation",
                &mut_prompt,
                Sampling::generation(mut_seed),
                self.ctx.registry,
                self.config.llm_attempts,
                &mut exchanges,
            ) {
                Ok(program) => {
                    let mut prov = candidate.provenance.clone();
                    prov.mutated = true;
                    candidate = make_candidate(
                        id,
                        program,
                        prov,
                        &self.train,
                        &self.test,
                        &self.metric,
                        &self.ctx,
                        mode,
                    );
                }
                Err(e) => {
                    candidate.note = Some(format!("mutation failed, kept crossover result: {e}"));
                }
            }
        }

        if self.config.critic_enabled {
            if let Some(partition) = &self.partition {
                let critic_seed =
                    derive_seed(self.config.seed, generation as u64, slot as u64, SALT_CRITIC);
                candidate = critique(
                    candidate,
                    &self.train,
                    &self.test,
                    partition,
                    self.bundle,
                    self.backend,
                    self.config.critic_worst_k,
                    &self.metric,
                    &self.ctx,
                    mode,
                    critic_seed,
                    self.config.llm_attempts,
                    &mut exchanges,
                );
            }
        }

        if self.config.simplify_enabled {
            candidate = simplify(
                candidate,
                self.config.prune_threshold,
                self.config.prune_slack,
                &self.train,
                &self.test,
                &self.metric,
                &self.ctx,
                mode,
            );
        }

        let records = self.record_exchanges(generation, slot, exchanges);
        (candidate, records)
    }

    /// One evolution step: M offspring replace the bank (best_ever is kept
    /// separately, so elitism never loses the reported best).
    pub fn step_generation(
        &self,
        bank: &ProgramBank,
    ) -> Result<(ProgramBank, Vec<TranscriptRecord>), EvoError> {
        let generation = bank.generation + 1;
        let slots: Vec<(Candidate, Vec<TranscriptRecord>)> = (0..self.config.population)
            .into_par_iter()
            .map(|slot| self.offspring_slot(bank, generation, slot))
            .collect();

        let mut members = Vec::with_capacity(slots.len());
        let mut transcript = Vec::new();
        for (c, records) in slots {
            members.push(c);
            transcript.extend(records);
        }
        if members.iter().all(|c| !c.valid) {
            let diagnostic = members
                .last()
                .and_then(|c| c.note.clone())
                .unwrap_or_default();
            return Err(EvoError::AllInvalid {
                generation,
                diagnostic,
            });
        }
        let mut best_ever = bank.best_ever.clone();
        for c in &members {
            if c.valid && c.score_train < best_ever.score_train {
                best_ever = c.clone();
            }
        }
        Ok((
            ProgramBank {
                generation,
                members,
                best_ever,
            },
            transcript,
        ))
    }

    fn log_generation(&self, bank: &ProgramBank, log: &mut Vec<LogRecord>) {
        for c in &bank.members {
            log.push(LogRecord::Candidate {
                generation: bank.generation,
                candidate_id: c.id,
                provenance: c.provenance.clone(),
                valid: c.valid,
                score_train: c.score_train.is_finite().then_some(c.score_train),
                score_test: c.score_test.is_finite().then_some(c.score_test),
                strata_scores: c
                    .strata_scores
                    .iter()
                    .filter(|(_, v)| v.is_finite())
                    .map(|(k, v)| (k.clone(), *v))
                    .collect(),
                note: c.note.clone(),
            });
        }
        let best_in_generation = bank
            .valid_members()
            .first()
            .map(|c| c.score_train)
            .filter(|s| s.is_finite());
        log.push(LogRecord::Generation {
            generation: bank.generation,
            valid_members: bank.members.iter().filter(|c| c.valid).count(),
            best_in_generation,
            best_ever_train: bank.best_ever.score_train,
            llm_calls_total: self.llm_calls.load(Ordering::Relaxed),
        });
    }

    /// Initialization plus T generations. Selection of the returned best
    /// uses the train score only; test and OOD scores ride along.
    pub fn run(&self) -> Result<RunResult, EvoError> {
        self.config
            .validate()
            .map_err(EvoError::Config)?;
        let mut log = Vec::new();
        let mut transcript = Vec::new();
        let (mut bank, records) = self.init_population()?;
        transcript.extend(records);
        self.log_generation(&bank, &mut log);
        for _ in 0..self.config.generations {
            let (next, records) = self.step_generation(&bank)?;
            bank = next;
            transcript.extend(records);
            self.log_generation(&bank, &mut log);
            if let Some(cache) = self.ctx.cache {
                cache.evict_if_over_cap();
            }
        }
        let best = bank.best_ever.clone();
        let ood_score = if self.ood.is_empty() {
            None
        } else {
            best.head.as_ref().and_then(|head| {
                score_program(&best.program, head, &self.ood, &self.metric, &self.ctx).ok()
            })
        };
        Ok(RunResult {
            best,
            final_bank: bank,
            log,
            transcript,
            llm_calls: self.llm_calls.load(Ordering::Relaxed),
            ood_score,
        })
    }
}

// ---------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------

/// Zero-shot: average test score of `n` independent objective-prompt
/// programs (invalid samples are skipped in the average).
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_baseline(
    n: usize,
    bundle: &PromptBundle,
    backend: &dyn LlmBackend,
    train: &[&Observation],
    test: &[&Observation],
    metric: &Metric,
    ctx: &EvalContext<'_>,
    mode: HeadMode,
    seed: u64,
    attempts: u32,
) -> (Vec<Candidate>, Option<f64>) {
    let prompt = build_objective_prompt(bundle);
    let mut candidates = Vec::with_capacity(n);
    for i in 0..n {
        let mut exchanges = Vec::new();
        let s = derive_seed(seed, 0, i as u64, 0x2E20);
        let candidate = match request_program(
            backend,
            "zero-shot",
            &prompt,
            Sampling::generation(s),
            ctx.registry,
            attempts,
            &mut exchanges,
        ) {
            Ok(program) => make_candidate(
                i as u64 + 1,
                program,
                Provenance::new(Origin::Baseline {
                    kind: "zero-shot".into(),
                }),
                train,
                test,
                metric,
                ctx,
                mode,
            ),
            Err(e) => Candidate::invalid(
                i as u64 + 1,
                placeholder_program(),
                Provenance::new(Origin::Baseline {
                    kind: "zero-shot".into(),
                }),
                e.to_string(),
            ),
        };
        candidates.push(candidate);
    }
    let tests: Vec<f64> = candidates
        .iter()
        .filter(|c| c.valid && c.score_test.is_finite())
        .map(|c| c.score_test)
        .collect();
    let mean = (!tests.is_empty()).then(|| tests.iter().sum::<f64>() / tests.len() as f64);
    (candidates, mean)
}

/// Random search: fresh objective-prompt samples under the same LLM-call
/// budget a matched evolution run would spend; the best train scorer wins.
#[allow(clippy::too_many_arguments)]
pub fn random_search_baseline(
    budget_calls: u64,
    bundle: &PromptBundle,
    backend: &dyn LlmBackend,
    train: &[&Observation],
    test: &[&Observation],
    metric: &Metric,
    ctx: &EvalContext<'_>,
    mode: HeadMode,
    seed: u64,
    attempts: u32,
) -> (Option<Candidate>, u64) {
    let prompt = build_objective_prompt(bundle);
    let mut calls_used: u64 = 0;
    let mut best: Option<Candidate> = None;
    let mut i: u64 = 0;
    while calls_used < budget_calls {
        let mut exchanges = Vec::new();
        let s = derive_seed(seed, 1, i, 0x7A2D);
        let outcome = request_program(
            backend,
            "random-search",
            &prompt,
            Sampling::generation(s),
            ctx.registry,
            attempts,
            &mut exchanges,
        );
        calls_used += exchanges.len() as u64;
        if let Ok(program) = outcome {
            let candidate = make_candidate(
                i + 1,
                program,
                Provenance::new(Origin::Baseline {
                    kind: "random-search".into(),
                }),
                train,
                test,
                metric,
                ctx,
                mode,
            );
            if candidate.valid
                && best
                    .as_ref()
                    .map(|b| candidate.score_train < b.score_train)
                    .unwrap_or(true)
            {
                best = Some(candidate);
            }
        }
        i += 1;
    }
    (best, calls_used)
}

/// Concept-bottleneck baseline program: every concept's area fraction
/// plus the four scalar fields, handed to the linear head.
pub fn concept_bottleneck_program(vocabulary: &[String]) -> crate::dsl::FeatureProgram {
    let mut src = String::from("def concept_bottleneck(loc):\n");
    let mut returns = Vec::new();
    for (i, concept) in vocabulary.iter().enumerate() {
        src.push_str(&format!(
            "    c{i} = area_fraction(mask(loc, {}))\n",
            crate::dsl::printer::quote(concept)
        ));
        returns.push(format!("({}, c{i})", crate::dsl::printer::quote(&format!("{concept}_frac"))));
    }
    for field in crate::primitives::SCALAR_FIELDS {
        returns.push(format!("(\"{field}\", scalar_field(loc, \"{field}\"))"));
    }
    src.push_str(&format!("    return [{}]\n", returns.join(", ")));
    let program = parse(&src).expect("concept bottleneck program parses");
    debug_assert!(!pretty_print(&program).is_empty());
    program
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_world, SynthParams};
    use crate::data::{split_by_longitude, ObservationSet, DEFAULT_SPLIT_SEED, DEFAULT_TRAIN_RATIO};
    use crate::dsl::GeneratorConfig;
    use crate::llm::ScriptedBackend;
    use crate::primitives::PrimitiveRegistry;

    fn small_world() -> ObservationSet {
        let hidden = parse(
            "def h(loc): return [(\"t\", 2.0 * area_fraction(mask(loc, \"residential\")) + 0.5 * area_fraction(mask(loc, \"water\")))]",
        )
        .unwrap();
        generate_synthetic_world(&SynthParams::new(3, 60, 16, hidden, 0.02)).unwrap()
    }

    struct Fixture {
        set: ObservationSet,
        registry: PrimitiveRegistry,
        backend: ScriptedBackend,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                set: small_world(),
                registry: PrimitiveRegistry::standard(),
                backend: ScriptedBackend::new(GeneratorConfig::default()),
            }
        }

        fn run_with(&self, config: &EvolutionConfig) -> RunResult {
            let split =
                split_by_longitude(&self.set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
            let train = self.set.by_ids(&split.train_ids);
            let test = self.set.by_ids(&split.test_ids);
            let ood = self.set.by_ids(&split.ood_ids);
            let partition =
                crate::critic::partition_by_landuse(&train, &self.set.vocabulary).ok();
            let bundle = PromptBundle::new(
                &self.set.target_name,
                &self.registry,
                &self.set.vocabulary,
            );
            let ctx = EvalContext::new(&self.registry, None);
            let evo = Evolution::new(
                config,
                Metric::new(MetricId::Rmse),
                &bundle,
                &self.backend,
                ctx,
                train,
                test,
                ood,
                partition,
            );
            evo.run().unwrap()
        }
    }

    fn tiny_config(seed: u64) -> EvolutionConfig {
        EvolutionConfig {
            generations: 2,
            population: 6,
            seed,
            ..EvolutionConfig::default()
        }
    }

    #[test]
    fn run_completes_and_logs_every_generation() {
        let f = Fixture::new();
        let result = f.run_with(&tiny_config(1));
        let generation_records = result
            .log
            .iter()
            .filter(|r| matches!(r, LogRecord::Generation { .. }))
            .count();
        assert_eq!(generation_records, 3); // init + 2 generations
        assert!(result.best.valid);
        assert!(result.ood_score.is_some());
        let candidate_records = result
            .log
            .iter()
            .filter(|r| matches!(r, LogRecord::Candidate { .. }))
            .count();
        assert_eq!(candidate_records, 6 * 3);
    }

    #[test]
    fn best_ever_is_monotone_across_generations() {
        let f = Fixture::new();
        let result = f.run_with(&tiny_config(2));
        let mut last = f64::INFINITY;
        for r in &result.log {
            if let LogRecord::Generation { best_ever_train, .. } = r {
                assert!(*best_ever_train <= last + 1e-15);
                last = *best_ever_train;
            }
        }
    }

    #[test]
    fn llm_budget_bound_holds() {
        let f = Fixture::new();
        let config = tiny_config(3);
        let result = f.run_with(&config);
        let critic_rounds = 1.0;
        let bound = (config.population as f64
            * (1.0
                + config.generations as f64
                    * (1.0 + config.mutation_prob + critic_rounds))
            * config.llm_attempts as f64)
            .ceil() as u64;
        assert!(
            result.llm_calls <= bound,
            "{} calls exceed bound {bound}",
            result.llm_calls
        );
        assert!(result.llm_calls >= config.population as u64);
    }

    #[test]
    fn mutation_probability_zero_and_one() {
        let f = Fixture::new();
        let mut config = tiny_config(4);
        config.mutation_prob = 0.0;
        config.critic_enabled = false;
        let result = f.run_with(&config);
        assert!(
            result
                .transcript
                .iter()
                .all(|t| t.stage != "mutation"),
            "no mutation prompts at rho=0"
        );

        config.mutation_prob = 1.0;
        let result = f.run_with(&config);
        for r in &result.log {
            if let LogRecord::Candidate {
                generation,
                provenance,
                valid,
                ..
            } = r
            {
                if *generation > 0 && *valid {
                    assert!(provenance.mutated, "offspring must carry mutation provenance");
                }
            }
        }
    }

    #[test]
    fn runs_replay_transcript_for_transcript() {
        let f = Fixture::new();
        let config = tiny_config(5);
        let a = f.run_with(&config);
        let b = f.run_with(&config);
        assert_eq!(a.llm_calls, b.llm_calls);
        assert_eq!(a.transcript.len(), b.transcript.len());
        for (x, y) in a.transcript.iter().zip(&b.transcript) {
            assert_eq!(x.prompt, y.prompt);
            assert_eq!(x.response, y.response);
        }
        assert_eq!(
            pretty_print(&a.best.program),
            pretty_print(&b.best.program)
        );
        assert_eq!(a.best.score_train.to_bits(), b.best.score_train.to_bits());
        let la = serde_json::to_string(&a.log).unwrap();
        let lb = serde_json::to_string(&b.log).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn parent_sampling_matches_inverse_rank_distribution() {
        let f = Fixture::new();
        let config = tiny_config(6);
        let split = split_by_longitude(&f.set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
        let train = f.set.by_ids(&split.train_ids);
        let bundle = PromptBundle::new("t", &f.registry, &f.set.vocabulary);
        let ctx = EvalContext::new(&f.registry, None);
        let evo = Evolution::new(
            &config,
            Metric::new(MetricId::Rmse),
            &bundle,
            &f.backend,
            ctx,
            train,
            Vec::new(),
            Vec::new(),
            None,
        );
        let (bank, _) = evo.init_population().unwrap();
        let ranked = bank.valid_members();
        let m = ranked.len();
        assert!(m >= 3, "need a few valid members");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut counts = vec![0usize; m];
        let best_id = ranked[0].id;
        for _ in 0..draws {
            let (a, b) = evo.sample_parents(&bank, &mut rng).unwrap();
            assert_ne!(a.id, b.id, "parents must be distinct");
            for p in [a, b] {
                let rank = ranked.iter().position(|c| c.id == p.id).unwrap();
                counts[rank] += 1;
            }
        }
        // first-draw marginal of rank 1 is (1/1)/H_m; with the distinct
        // redraw the second pick only adds mass, so use a 3-sigma band on
        // the first-draw expectation as a lower bound and sanity-check
        // monotonicity instead of exact equality
        let h: f64 = (1..=m).map(|r| 1.0 / r as f64).sum();
        let p1 = 1.0 / h;
        let expected_min = draws as f64 * p1; // of 2*draws picks
        let sigma = (draws as f64 * p1 * (1.0 - p1)).sqrt();
        assert!(
            counts[0] as f64 >= expected_min - 3.0 * sigma,
            "best member drawn {} times, expected at least {expected_min:.0}±3σ",
            counts[0]
        );
        assert!(counts[0] > counts[m - 1], "rank 1 outdraws last rank");
        let _ = best_id;
    }

    #[test]
    fn invalid_members_never_sampled() {
        let f = Fixture::new();
        let config = tiny_config(7);
        let split = split_by_longitude(&f.set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
        let train = f.set.by_ids(&split.train_ids);
        let bundle = PromptBundle::new("t", &f.registry, &f.set.vocabulary);
        let ctx = EvalContext::new(&f.registry, None);
        let evo = Evolution::new(
            &config,
            Metric::new(MetricId::Rmse),
            &bundle,
            &f.backend,
            ctx,
            train,
            Vec::new(),
            Vec::new(),
            None,
        );
        let (mut bank, _) = evo.init_population().unwrap();
        // poison half the bank
        let invalid_ids: Vec<u64> = bank
            .members
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 0)
            .map(|(_, c)| c.id)
            .collect();
        for c in &mut bank.members {
            if invalid_ids.contains(&c.id) {
                c.valid = false;
                c.score_train = f64::INFINITY;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (a, b) = evo.sample_parents(&bank, &mut rng).unwrap();
            assert!(!invalid_ids.contains(&a.id));
            assert!(!invalid_ids.contains(&b.id));
        }
    }

    #[test]
    fn bank_of_two_always_returns_both() {
        let f = Fixture::new();
        let mut config = tiny_config(8);
        config.population = 2;
        let split = split_by_longitude(&f.set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
        let train = f.set.by_ids(&split.train_ids);
        let bundle = PromptBundle::new("t", &f.registry, &f.set.vocabulary);
        let ctx = EvalContext::new(&f.registry, None);
        let evo = Evolution::new(
            &config,
            Metric::new(MetricId::Rmse),
            &bundle,
            &f.backend,
            ctx,
            train,
            Vec::new(),
            Vec::new(),
            None,
        );
        let (bank, _) = evo.init_population().unwrap();
        let valid = bank.valid_members();
        if valid.len() == 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..50 {
                let (a, b) = evo.sample_parents(&bank, &mut rng).unwrap();
                assert_ne!(a.id, b.id);
            }
        }
    }

    #[test]
    fn budget_matched_random_search_runs() {
        let f = Fixture::new();
        let bundle = PromptBundle::new("t", &f.registry, &f.set.vocabulary);
        let ctx = EvalContext::new(&f.registry, None);
        let train = f.set.all();
        let (best, used) = random_search_baseline(
            10,
            &bundle,
            &f.backend,
            &train,
            &[],
            &Metric::new(MetricId::Rmse),
            &ctx,
            HeadMode::FeatureSet,
            1,
            3,
        );
        assert!(used >= 10);
        assert!(best.is_some());
    }

    #[test]
    fn zero_shot_baseline_averages_five_programs() {
        let f = Fixture::new();
        let bundle = PromptBundle::new("t", &f.registry, &f.set.vocabulary);
        let ctx = EvalContext::new(&f.registry, None);
        let split = split_by_longitude(&f.set, DEFAULT_TRAIN_RATIO, DEFAULT_SPLIT_SEED).unwrap();
        let train = f.set.by_ids(&split.train_ids);
        let test = f.set.by_ids(&split.test_ids);
        let (candidates, mean) = zero_shot_baseline(
            5,
            &bundle,
            &f.backend,
            &train,
            &test,
            &Metric::new(MetricId::Rmse),
            &ctx,
            HeadMode::FeatureSet,
            1,
            3,
        );
        assert_eq!(candidates.len(), 5);
        assert!(mean.is_some());
    }

    #[test]
    fn concept_bottleneck_program_typechecks() {
        let vocab: Vec<String> = crate::data::synth::DEFAULT_VOCABULARY
            .iter()
            .map(|s| s.to_string())
            .collect();
        let program = concept_bottleneck_program(&vocab);
        crate::dsl::typecheck(&program, &PrimitiveRegistry::standard()).unwrap();
        assert_eq!(program.features.len(), vocab.len() + 4);
    }
}
