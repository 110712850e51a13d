//! Language-model plumbing: the backend abstraction, prompt builders,
//! program extraction with corrective retries, and the deterministic
//! scripted backend used for offline runs and tests.

pub mod http;
pub mod prompt;
pub mod scripted;

use serde::{Deserialize, Serialize};

use crate::dsl::{self, FeatureProgram};
use crate::primitives::PrimitiveRegistry;

pub use http::HttpBackend;
pub use prompt::{
    build_critic_prompt, build_crossover_prompt, build_mutation_prompt, build_objective_prompt,
    unresolved_placeholders, worst_strata, PromptBundle,
};
pub use scripted::ScriptedBackend;

/// Total attempts per program request (one initial call plus corrective
/// retries carrying the previous error).
pub const DEFAULT_LLM_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Sampling {
    pub fn generation(seed: u64) -> Self {
        Sampling {
            temperature: 0.8,
            max_tokens: 1024,
            seed,
        }
    }

    /// Critic refinement samples conservatively.
    pub fn refinement(seed: u64) -> Self {
        Sampling {
            temperature: 0.2,
            max_tokens: 1024,
            seed,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum LlmError {
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("backend returned malformed payload: {0}")]
    Malformed(String),
    #[error("prompt matches no scripted class")]
    UnclassifiablePrompt,
    #[error("backend configuration: {0}")]
    Config(String),
}

/// A chat-completion backend. Implementations must be safe to call from
/// several threads at once.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str, sampling: &Sampling) -> Result<String, LlmError>;
    fn name(&self) -> &str;
}

/// One prompt/response pair for the run transcript.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: String,
    pub attempt: u32,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("no usable program after {attempts} attempts: {last_error}")]
pub struct ExtractionFailed {
    pub attempts: u32,
    pub last_error: String,
}

/// The last fenced code block, or the whole text when none is fenced.
pub fn extract_code_block(response: &str) -> &str {
    let mut blocks = Vec::new();
    let mut rest = response;
    let mut offset = 0;
    while let Some(start) = rest.find("```") {
        let after_fence = start + 3;
        // skip an optional language tag on the fence line
        let body_start = match rest[after_fence..].find('\n') {
            Some(nl) => after_fence + nl + 1,
            None => break,
        };
        match rest[body_start..].find("```") {
            Some(end) => {
                blocks.push((offset + body_start, offset + body_start + end));
                let consumed = body_start + end + 3;
                offset += consumed;
                rest = &rest[consumed..];
            }
            None => break,
        }
    }
    match blocks.last() {
        Some(&(start, end)) => &response[start..end],
        None => response,
    }
}

/// Extract, parse, and typecheck a program from a raw response.
pub fn extract_program(
    response: &str,
    registry: &PrimitiveRegistry,
) -> Result<FeatureProgram, dsl::CompileError> {
    dsl::parse_and_check(extract_code_block(response), registry)
}

/// Ask the backend for a program; on extraction failure retry with the
/// error appended so the model can correct itself. Every exchange lands in
/// `transcript`.
pub fn request_program(
    backend: &dyn LlmBackend,
    stage: &str,
    prompt: &str,
    sampling: Sampling,
    registry: &PrimitiveRegistry,
    attempts: u32,
    transcript: &mut Vec<Exchange>,
) -> Result<FeatureProgram, ExtractionFailed> {
    let mut current_prompt = prompt.to_string();
    let mut last_error = String::new();
    for attempt in 1..=attempts.max(1) {
        let sampling = Sampling {
            seed: sampling.seed.wrapping_add(u64::from(attempt - 1)),
            ..sampling
        };
        let response = match backend.complete(&current_prompt, &sampling) {
            Ok(r) => r,
            Err(e) => {
                last_error = e.to_string();
                transcript.push(Exchange {
                    stage: stage.to_string(),
                    attempt,
                    prompt: current_prompt.clone(),
                    response: format!("<error: {last_error}>"),
                });
                continue;
            }
        };
        transcript.push(Exchange {
            stage: stage.to_string(),
            attempt,
            prompt: current_prompt.clone(),
            response: response.clone(),
        });
        match extract_program(&response, registry) {
            Ok(program) => return Ok(program),
            Err(e) => {
                last_error = e.to_string();
                current_prompt = format!(
                    "{prompt}\nYour previous answer failed to compile: {last_error}\nReturn a corrected program in a fenced code block.\n"
                );
            }
        }
    }
    Err(ExtractionFailed {
        attempts: attempts.max(1),
        last_error,
    })
}

/// FNV-1a; the scripted backend derives its determinism from
/// (prompt hash, seed) and must not depend on std's unspecified hasher.
pub fn fnv1a64(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
