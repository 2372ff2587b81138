//! Standardizes trajectories into interleaved token-role sequences and
//! builds the supervision masks: only assistant-generated text, tool-call
//! delimiters, and assistant-emitted vision boundary tokens are supervised;
//! image embeddings and user-provided text never are.
//!
//! The module works on role-annotated token positions, not a tokenizer:
//! every chunk carries a token count supplied by a configurable counter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentic::ANSWER_MARKER;
use crate::templates::{fill, TemplateSet};
use crate::types::{Trajectory, VQAInstance};

#[derive(Debug, Error)]
pub enum TrainsetError {
    #[error("trajectory {0} has no final answer to standardize")]
    NoFinalAnswer(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("chunk {index}: {reason}")]
    BadChunk { index: usize, reason: String },
    #[error("image embedding run at chunk {index} is not bracketed by vision markers")]
    UnbracketedImageRun { index: usize },
    #[error("supervised position {position} appears before the first image")]
    SupervisedBeforeFirstImage { position: usize },
    #[error("corpus has no supervised tokens")]
    NoSupervisedTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    UserText,
    AssistantText,
    VisionStart,
    VisionEnd,
    ImageEmbedding,
    ToolCallOpen,
    ToolCallClose,
}

impl TokenRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            TokenRole::UserText => "user_text",
            TokenRole::AssistantText => "assistant_text",
            TokenRole::VisionStart => "vision_start",
            TokenRole::VisionEnd => "vision_end",
            TokenRole::ImageEmbedding => "image_embedding",
            TokenRole::ToolCallOpen => "tool_call_open",
            TokenRole::ToolCallClose => "tool_call_close",
        }
    }
}

/// Who put the tokens into the sequence. Environment-injected text counts
/// as user-provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChunkPayload {
    Text { text: String },
    Image { image_digest: String },
}

/// A run of same-role tokens with its position width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenChunk {
    pub role: TokenRole,
    pub origin: Origin,
    pub payload: ChunkPayload,
    pub n_tokens: usize,
}

impl TokenChunk {
    pub fn text(role: TokenRole, origin: Origin, text: impl Into<String>, n_tokens: usize) -> Self {
        TokenChunk {
            role,
            origin,
            payload: ChunkPayload::Text { text: text.into() },
            n_tokens,
        }
    }

    pub fn marker(role: TokenRole, origin: Origin) -> Self {
        let text = match role {
            TokenRole::VisionStart => "<vision_start>",
            TokenRole::VisionEnd => "<vision_end>",
            TokenRole::ToolCallOpen => "<tool_call>",
            TokenRole::ToolCallClose => "</tool_call>",
            _ => panic!("marker() is for delimiter roles"),
        };
        TokenChunk::text(role, origin, text, 1)
    }

    pub fn image(origin: Origin, digest: impl Into<String>, n_tokens: usize) -> Self {
        TokenChunk {
            role: TokenRole::ImageEmbedding,
            origin,
            payload: ChunkPayload::Image {
                image_digest: digest.into(),
            },
            n_tokens,
        }
    }
}

/// Which training phase the example feeds. The mask rule is identical; the
/// tag records whether visual context comes from ground-truth encodings or
/// from the embedding editor downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Phase1,
    Phase2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub chunks: Vec<TokenChunk>,
    /// Image digests in appearance order.
    pub image_refs: Vec<String>,
    pub phase: Phase,
    /// Per-position supervision flags.
    pub mask: Vec<bool>,
    /// S_t: supervised positions between image t and image t+1.
    pub segments: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub supervised: usize,
    pub total: usize,
    pub per_role: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct MaskBuild {
    pub mask: Vec<bool>,
    pub segments: Vec<Vec<usize>>,
    pub stats: MaskStats,
}

fn chunk_supervised(chunk: &TokenChunk) -> bool {
    if chunk.origin != Origin::Assistant {
        return false;
    }
    matches!(
        chunk.role,
        TokenRole::AssistantText
            | TokenRole::VisionStart
            | TokenRole::VisionEnd
            | TokenRole::ToolCallOpen
            | TokenRole::ToolCallClose
    )
}

fn validate_chunks(chunks: &[TokenChunk]) -> Result<(), TrainsetError> {
    for (index, chunk) in chunks.iter().enumerate() {
        if chunk.n_tokens == 0 {
            return Err(TrainsetError::BadChunk {
                index,
                reason: "zero-width chunk".into(),
            });
        }
        match (&chunk.role, &chunk.payload) {
            (TokenRole::ImageEmbedding, ChunkPayload::Image { .. }) => {}
            (TokenRole::ImageEmbedding, _) => {
                return Err(TrainsetError::BadChunk {
                    index,
                    reason: "image embedding without an image payload".into(),
                })
            }
            (_, ChunkPayload::Image { .. }) => {
                return Err(TrainsetError::BadChunk {
                    index,
                    reason: "image payload on a text role".into(),
                })
            }
            _ => {}
        }
        match chunk.role {
            TokenRole::UserText if chunk.origin != Origin::User => {
                return Err(TrainsetError::BadChunk {
                    index,
                    reason: "user_text with assistant origin".into(),
                })
            }
            TokenRole::AssistantText if chunk.origin != Origin::Assistant => {
                return Err(TrainsetError::BadChunk {
                    index,
                    reason: "assistant_text with user origin".into(),
                })
            }
            _ => {}
        }
        // Bracketing: every image run sits between vision_start/vision_end.
        if chunk.role == TokenRole::ImageEmbedding {
            let before_ok = index > 0
                && matches!(
                    chunks[index - 1].role,
                    TokenRole::VisionStart | TokenRole::ImageEmbedding
                );
            let after_ok = index + 1 < chunks.len()
                && matches!(
                    chunks[index + 1].role,
                    TokenRole::VisionEnd | TokenRole::ImageEmbedding
                );
            if !before_ok || !after_ok {
                return Err(TrainsetError::UnbracketedImageRun { index });
            }
        }
    }
    Ok(())
}

/// Builds the supervision mask and the S_t segments for a chunk sequence.
/// The rule is the same for both phases.
pub fn build_mask(chunks: &[TokenChunk], _phase: Phase) -> Result<MaskBuild, TrainsetError> {
    validate_chunks(chunks)?;

    let total: usize = chunks.iter().map(|c| c.n_tokens).sum();
    let mut mask = Vec::with_capacity(total);
    let mut per_role: BTreeMap<String, usize> = BTreeMap::new();
    // Image runs as (start, end) position ranges, merged across adjacent
    // embedding chunks.
    let mut image_runs: Vec<(usize, usize)> = Vec::new();
    let mut position = 0usize;
    for chunk in chunks {
        let supervised = chunk_supervised(chunk);
        *per_role.entry(chunk.role.as_str().to_string()).or_insert(0) += chunk.n_tokens;
        if chunk.role == TokenRole::ImageEmbedding {
            match image_runs.last_mut() {
                Some((_, end)) if *end == position => *end += chunk.n_tokens,
                _ => image_runs.push((position, position + chunk.n_tokens)),
            }
        }
        for _ in 0..chunk.n_tokens {
            mask.push(supervised);
        }
        position += chunk.n_tokens;
    }

    // Partition supervised positions into S_t by the surrounding image runs.
    let mut segments: Vec<Vec<usize>> = vec![Vec::new(); image_runs.len()];
    for (p, supervised) in mask.iter().enumerate() {
        if !supervised {
            continue;
        }
        // Index of the nearest image run ending at or before p.
        let t = match image_runs.iter().rposition(|(_, end)| *end <= p) {
            Some(t) => t,
            None => return Err(TrainsetError::SupervisedBeforeFirstImage { position: p }),
        };
        segments[t].push(p);
    }

    let supervised = mask.iter().filter(|m| **m).count();
    Ok(MaskBuild {
        mask,
        segments,
        stats: MaskStats {
            supervised,
            total,
            per_role,
        },
    })
}

/// How text spans map to token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCounter {
    /// Whitespace-separated words, minimum one.
    #[default]
    Words,
    /// Unicode scalar values.
    Chars,
}

impl TokenCounter {
    pub fn count(&self, text: &str) -> usize {
        match self {
            TokenCounter::Words => text.split_whitespace().count().max(1),
            TokenCounter::Chars => text.chars().count().max(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StandardizeOptions {
    pub counter: TokenCounter,
    /// Positions each image embedding run occupies.
    pub image_tokens: usize,
    pub phase: Phase,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        StandardizeOptions {
            counter: TokenCounter::Words,
            image_tokens: 64,
            phase: Phase::Phase1,
        }
    }
}

/// Turns an answered trajectory into one interleaved training example:
/// question, initial image, then per step the reasoning, tool call, and the
/// resulting image (assistant-emitted) or failure notice (user-injected),
/// ending with the final answer line. Masks and segments are built here.
pub fn standardize(
    trajectory: &Trajectory,
    instance: &VQAInstance,
    templates: &TemplateSet,
    options: &StandardizeOptions,
) -> Result<TrainingExample, TrainsetError> {
    trajectory
        .validate()
        .map_err(|e| TrainsetError::InvalidTrajectory(e.to_string()))?;
    let answer = trajectory
        .final_answer
        .as_ref()
        .ok_or_else(|| TrainsetError::NoFinalAnswer(trajectory.id.clone()))?;
    if trajectory.steps.is_empty() {
        return Err(TrainsetError::InvalidTrajectory(format!(
            "trajectory {} has no steps",
            trajectory.id
        )));
    }

    let counter = options.counter;
    let mut chunks = Vec::new();
    let mut image_refs = Vec::new();

    let mut values = BTreeMap::new();
    values.insert("question", instance.question.as_str());
    let question_text = fill(&templates.first_turn, &values);
    chunks.push(TokenChunk::text(
        TokenRole::UserText,
        Origin::User,
        &question_text,
        counter.count(&question_text),
    ));

    let push_image = |chunks: &mut Vec<TokenChunk>,
                      image_refs: &mut Vec<String>,
                      digest: &str,
                      origin: Origin| {
        chunks.push(TokenChunk::marker(TokenRole::VisionStart, origin));
        chunks.push(TokenChunk::image(origin, digest, options.image_tokens));
        chunks.push(TokenChunk::marker(TokenRole::VisionEnd, origin));
        image_refs.push(digest.to_string());
    };

    // Initial image: user-provided context.
    push_image(
        &mut chunks,
        &mut image_refs,
        &trajectory.steps[0].image_hash,
        Origin::User,
    );

    for (i, step) in trajectory.steps.iter().enumerate() {
        if !step.reasoning.is_empty() {
            chunks.push(TokenChunk::text(
                TokenRole::AssistantText,
                Origin::Assistant,
                &step.reasoning,
                counter.count(&step.reasoning),
            ));
        }
        if let Some(action) = &step.action {
            chunks.push(TokenChunk::marker(
                TokenRole::ToolCallOpen,
                Origin::Assistant,
            ));
            chunks.push(TokenChunk::text(
                TokenRole::AssistantText,
                Origin::Assistant,
                &action.instruction,
                counter.count(&action.instruction),
            ));
            chunks.push(TokenChunk::marker(
                TokenRole::ToolCallClose,
                Origin::Assistant,
            ));
            if step.edit_failed {
                let mut values = BTreeMap::new();
                values.insert("failure_notice", "the edit could not be rendered");
                let notice = fill(&templates.failure_notice, &values);
                chunks.push(TokenChunk::text(
                    TokenRole::UserText,
                    Origin::User,
                    &notice,
                    counter.count(&notice),
                ));
            } else if let Some(next) = trajectory.steps.get(i + 1) {
                // The edited image is the model's own visual thought.
                push_image(
                    &mut chunks,
                    &mut image_refs,
                    &next.image_hash,
                    Origin::Assistant,
                );
            }
        }
    }

    let answer_text = format!("{ANSWER_MARKER} {answer}");
    chunks.push(TokenChunk::text(
        TokenRole::AssistantText,
        Origin::Assistant,
        &answer_text,
        counter.count(&answer_text),
    ));

    let build = build_mask(&chunks, options.phase)?;
    Ok(TrainingExample {
        chunks,
        image_refs,
        phase: options.phase,
        mask: build.mask,
        segments: build.segments,
    })
}

impl TrainingExample {
    pub fn stats(&self) -> MaskStats {
        let mut per_role = BTreeMap::new();
        for c in &self.chunks {
            *per_role.entry(c.role.as_str().to_string()).or_insert(0) += c.n_tokens;
        }
        MaskStats {
            supervised: self.mask.iter().filter(|m| **m).count(),
            total: self.mask.len(),
            per_role,
        }
    }

    /// Mask as [start, len] runs of supervised positions.
    pub fn mask_runs(&self) -> Vec<[usize; 2]> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, m) in self.mask.iter().enumerate() {
            match (m, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push([s, i - s]);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push([s, self.mask.len() - s]);
        }
        runs
    }

    /// The `trainset.jsonl` record shape.
    pub fn to_record(&self) -> serde_json::Value {
        let tokens: Vec<serde_json::Value> = self
            .chunks
            .iter()
            .map(|c| match &c.payload {
                ChunkPayload::Text { text } => serde_json::json!({
                    "role": c.role.as_str(),
                    "text": text,
                    "n_tokens": c.n_tokens,
                }),
                ChunkPayload::Image { image_digest } => serde_json::json!({
                    "role": c.role.as_str(),
                    "image_digest": image_digest,
                    "n_tokens": c.n_tokens,
                }),
            })
            .collect();
        serde_json::json!({
            "tokens": tokens,
            "mask_runs": self.mask_runs(),
            "segments": self.segments,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// 1 / total supervised tokens across the corpus.
    pub normalizer: f64,
    pub per_example: Vec<usize>,
    pub total_supervised: usize,
}

/// Corpus normalizer for the language-modeling objective: the loss averages
/// over all supervised text tokens across examples.
pub fn aggregate_loss_weights(examples: &[TrainingExample]) -> Result<LossWeights, TrainsetError> {
    let per_example: Vec<usize> = examples
        .iter()
        .map(|e| e.mask.iter().filter(|m| **m).count())
        .collect();
    let total_supervised: usize = per_example.iter().sum();
    if total_supervised == 0 {
        return Err(TrainsetError::NoSupervisedTokens);
    }
    Ok(LossWeights {
        normalizer: 1.0 / total_supervised as f64,
        per_example,
        total_supervised,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EditRequest, InstanceSource, RenderSpec, Termination, TrajectoryStep};

    fn instance() -> VQAInstance {
        VQAInstance {
            id: "inst".into(),
            code: RenderSpec {
                language_tag: "sh".into(),
                source_text: "x".into(),
                renderer_profile: "shell".into(),
            },
            image_hash: Some("imga".into()),
            question: "what is the slope".into(),
            answer: "2".into(),
            source: InstanceSource::SyntheticCorpus,
            discipline: None,
        }
    }

    fn one_step_trajectory() -> Trajectory {
        Trajectory {
            id: "t1".into(),
            instance_id: "inst".into(),
            steps: vec![TrajectoryStep {
                t: 0,
                image_hash: "imga".into(),
                reasoning: "the slope is visible".into(),
                action: None,
                edit_failed: false,
            }],
            final_answer: Some("2".into()),
            termination: Termination::Answered,
            transcript_ref: None,
        }
    }

    fn two_step_trajectory(edit_failed: bool) -> Trajectory {
        Trajectory {
            id: "t2".into(),
            instance_id: "inst".into(),
            steps: vec![
                TrajectoryStep {
                    t: 0,
                    image_hash: "imga".into(),
                    reasoning: "need a tangent".into(),
                    action: Some(EditRequest::new("draw a tangent line").unwrap()),
                    edit_failed,
                },
                TrajectoryStep {
                    t: 1,
                    image_hash: if edit_failed {
                        "imga".into()
                    } else {
                        "imgb".into()
                    },
                    reasoning: "now it is clear".into(),
                    action: None,
                    edit_failed: false,
                },
            ],
            final_answer: Some("2".into()),
            termination: Termination::Answered,
            transcript_ref: None,
        }
    }

    #[test]
    fn one_step_example_shape() {
        let e = standardize(
            &one_step_trajectory(),
            &instance(),
            &TemplateSet::default(),
            &StandardizeOptions::default(),
        )
        .unwrap();
        assert_eq!(e.image_refs, vec!["imga"]);
        // user question, vs, image, ve, reasoning, answer
        assert_eq!(e.chunks.len(), 6);
        assert_eq!(e.segments.len(), 1);
        let stats = e.stats();
        assert_eq!(stats.supervised, e.segments[0].len());
    }

    // Hand enumeration: positions of every chunk with image_tokens=2 and
    // word counting, for the 2-step trajectory with one successful edit.
    #[test]
    fn two_step_example_positions_enumerated_by_hand() {
        let options = StandardizeOptions {
            counter: TokenCounter::Words,
            image_tokens: 2,
            phase: Phase::Phase1,
        };
        let mut templates = TemplateSet::default();
        templates.first_turn = "{question}".into();
        let e = standardize(
            &two_step_trajectory(false),
            &instance(),
            &templates,
            &options,
        )
        .unwrap();
        assert_eq!(e.image_refs, vec!["imga", "imgb"]);

        // 0..4   user question "what is the slope"      unmasked
        // 4      vision_start (user)                    unmasked
        // 5..7   image imga (2)                         unmasked
        // 7      vision_end (user)                      unmasked
        // 8..11  "need a tangent" (3 words)             masked, S_0
        // 11     tool_call_open                         masked, S_0
        // 12..16 "draw a tangent line" (4 words)        masked, S_0
        // 16     tool_call_close                        masked, S_0
        // 17     vision_start (assistant)               masked, S_0
        // 18..20 image imgb (2)                         unmasked
        // 20     vision_end (assistant)                 masked, S_1
        // 21..25 "now it is clear" (4 words)            masked, S_1
        // 25..28 "FINAL ANSWER: 2" (3 words)            masked, S_1
        assert_eq!(e.mask.len(), 28);
        let expected_s0: Vec<usize> = (8..18).collect();
        let mut expected_s1: Vec<usize> = vec![20];
        expected_s1.extend(21..28);
        assert_eq!(e.segments.len(), 2);
        assert_eq!(e.segments[0], expected_s0);
        assert_eq!(e.segments[1], expected_s1);
        for p in 0..8 {
            assert!(!e.mask[p], "position {p}");
        }
        assert!(!e.mask[18] && !e.mask[19]);
        assert_eq!(e.stats().supervised, 18);
    }

    #[test]
    fn failed_edit_injects_unsupervised_notice_and_no_image() {
        let e = standardize(
            &two_step_trajectory(true),
            &instance(),
            &TemplateSet::default(),
            &StandardizeOptions::default(),
        )
        .unwrap();
        assert_eq!(e.image_refs, vec!["imga"]);
        let notice = e
            .chunks
            .iter()
            .find(|c| c.role == TokenRole::UserText && matches!(&c.payload, ChunkPayload::Text { text } if text.contains("could not be rendered")))
            .expect("failure notice present");
        assert_eq!(notice.origin, Origin::User);
        // All user text must be unsupervised.
        let build = build_mask(&e.chunks, Phase::Phase1).unwrap();
        let mut pos = 0;
        for c in &e.chunks {
            if c.role == TokenRole::UserText {
                for p in pos..pos + c.n_tokens {
                    assert!(!build.mask[p]);
                }
            }
            pos += c.n_tokens;
        }
    }

    #[test]
    fn build_mask_matches_position_enumeration() {
        // [user 4 text, image 5 emb, assistant 3 text]: the 4 question and
        // 5 embedding positions (plus their user-side brackets) are false,
        // the 3 assistant positions are true.
        let chunks = vec![
            TokenChunk::text(TokenRole::UserText, Origin::User, "a b c d", 4),
            TokenChunk::marker(TokenRole::VisionStart, Origin::User),
            TokenChunk::image(Origin::User, "img", 5),
            TokenChunk::marker(TokenRole::VisionEnd, Origin::User),
            TokenChunk::text(TokenRole::AssistantText, Origin::Assistant, "x y z", 3),
        ];
        let build = build_mask(&chunks, Phase::Phase1).unwrap();
        let expect = [vec![false; 4], vec![false; 7], vec![true; 3]].concat();
        assert_eq!(build.mask, expect);
        assert_eq!(build.stats.supervised, 3);
        assert_eq!(build.segments, vec![(11..14).collect::<Vec<_>>()]);
    }

    #[test]
    fn assistant_vision_boundaries_supervised_embeddings_not() {
        let chunks = vec![
            TokenChunk::marker(TokenRole::VisionStart, Origin::User),
            TokenChunk::image(Origin::User, "ctx", 2),
            TokenChunk::marker(TokenRole::VisionEnd, Origin::User),
            TokenChunk::text(TokenRole::AssistantText, Origin::Assistant, "thinking", 1),
            TokenChunk::marker(TokenRole::VisionStart, Origin::Assistant),
            TokenChunk::image(Origin::Assistant, "thought", 5),
            TokenChunk::marker(TokenRole::VisionEnd, Origin::Assistant),
        ];
        let build = build_mask(&chunks, Phase::Phase2).unwrap();
        // positions: 0 vs(u) 1,2 img 3 ve(u) 4 text 5 vs(a) 6..11 img 11 ve(a)
        assert!(!build.mask[0] && !build.mask[3]);
        assert!(build.mask[4]);
        assert!(build.mask[5]);
        for p in 6..11 {
            assert!(!build.mask[p]);
        }
        assert!(build.mask[11]);
        assert_eq!(build.stats.supervised, 3);
    }

    #[test]
    fn empty_assistant_response_gives_all_false_mask() {
        let chunks = vec![
            TokenChunk::text(TokenRole::UserText, Origin::User, "q", 1),
            TokenChunk::marker(TokenRole::VisionStart, Origin::User),
            TokenChunk::image(Origin::User, "img", 3),
            TokenChunk::marker(TokenRole::VisionEnd, Origin::User),
        ];
        let build = build_mask(&chunks, Phase::Phase1).unwrap();
        assert!(build.mask.iter().all(|m| !m));
        assert_eq!(build.stats.supervised, 0);
    }

    #[test]
    fn supervised_positions_before_any_image_are_rejected() {
        let chunks = vec![
            TokenChunk::text(TokenRole::AssistantText, Origin::Assistant, "early", 2),
            TokenChunk::marker(TokenRole::VisionStart, Origin::User),
            TokenChunk::image(Origin::User, "img", 3),
            TokenChunk::marker(TokenRole::VisionEnd, Origin::User),
        ];
        assert!(matches!(
            build_mask(&chunks, Phase::Phase1),
            Err(TrainsetError::SupervisedBeforeFirstImage { position: 0 })
        ));
    }

    #[test]
    fn unbracketed_image_run_is_an_error() {
        let chunks = vec![
            TokenChunk::text(TokenRole::UserText, Origin::User, "q", 1),
            TokenChunk::image(Origin::User, "img", 3),
        ];
        assert!(matches!(
            build_mask(&chunks, Phase::Phase1),
            Err(TrainsetError::UnbracketedImageRun { .. })
        ));
    }

    #[test]
    fn loss_weights_normalizer() {
        let mut a = standardize(
            &one_step_trajectory(),
            &instance(),
            &TemplateSet::default(),
            &StandardizeOptions::default(),
        )
        .unwrap();
        let b = a.clone();
        let weights = aggregate_loss_weights(&[a.clone(), b]).unwrap();
        let per = weights.per_example[0];
        assert_eq!(weights.total_supervised, 2 * per);
        assert!((weights.normalizer - 1.0 / (2.0 * per as f64)).abs() < 1e-15);

        // Example with no supervised tokens is an error.
        a.mask = vec![false; a.mask.len()];
        assert!(matches!(
            aggregate_loss_weights(&[a]),
            Err(TrainsetError::NoSupervisedTokens)
        ));
    }

    #[test]
    fn loss_weights_three_and_five() {
        // Two examples with |S| = 3 and 5 give normalizer 1/8.
        let make = |n: usize| {
            let chunks = vec![
                TokenChunk::marker(TokenRole::VisionStart, Origin::User),
                TokenChunk::image(Origin::User, "i", 1),
                TokenChunk::marker(TokenRole::VisionEnd, Origin::User),
                TokenChunk::text(TokenRole::AssistantText, Origin::Assistant, "t", n),
            ];
            let build = build_mask(&chunks, Phase::Phase1).unwrap();
            TrainingExample {
                chunks,
                image_refs: vec!["i".into()],
                phase: Phase::Phase1,
                mask: build.mask,
                segments: build.segments,
            }
        };
        let weights = aggregate_loss_weights(&[make(3), make(5)]).unwrap();
        assert_eq!(weights.per_example, vec![3, 5]);
        assert!((weights.normalizer - 0.125).abs() < 1e-15);
    }

    #[test]
    fn distinct_trajectories_give_distinct_examples() {
        let t1 = two_step_trajectory(false);
        let mut t2 = t1.clone();
        t2.steps[1].reasoning = "now it is obvious".into();
        let opts = StandardizeOptions::default();
        let e1 = standardize(&t1, &instance(), &TemplateSet::default(), &opts).unwrap();
        let e2 = standardize(&t2, &instance(), &TemplateSet::default(), &opts).unwrap();
        assert_ne!(e1, e2);
    }

    #[test]
    fn record_shape_has_tokens_runs_segments() {
        let e = standardize(
            &one_step_trajectory(),
            &instance(),
            &TemplateSet::default(),
            &StandardizeOptions::default(),
        )
        .unwrap();
        let record = e.to_record();
        let obj = record.as_object().unwrap();
        assert_eq!(obj.len(), 3);
        assert!(obj.contains_key("tokens"));
        assert!(obj.contains_key("mask_runs"));
        assert!(obj.contains_key("segments"));
        let tokens = record["tokens"].as_array().unwrap();
        assert!(tokens.iter().any(|t| t.get("image_digest").is_some()));
    }
}
