//! Prompt templates for the solver and code-editor roles. The texts are
//! operator configuration, not logic; defaults exist so fixtures run out of
//! the box. Placeholders use `{name}` syntax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::ValidationError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSet {
    /// System prompt for the solver role.
    pub solver_system: String,
    /// First user turn; requires `{question}`.
    pub first_turn: String,
    /// User turn delivering a rendered edit; requires `{edit_result}`.
    pub edit_result: String,
    /// User turn delivering a rendered edit with an inspection request;
    /// requires `{edit_result}`.
    pub challenge: String,
    /// User turn after a repair backoff; requires `{failure_notice}`.
    pub failure_notice: String,
    /// User turn after the solver accepts a challenged edit.
    pub resume: String,
    /// Final user turn once the step budget is spent.
    pub forced_answer: String,
    /// Corrective note after unparseable solver output.
    pub corrective: String,
    /// System prompt for the code-editor role.
    pub editor_system: String,
    /// Editor request; requires `{action}` and `{code}`.
    pub edit_request: String,
    /// Editor repair request; requires `{code}` and `{errors}`.
    pub repair_request: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            solver_system: "You are a visual reasoning assistant. Study the image and answer the question. \
When you need a clearer view, request one visual edit at a time by writing the instruction inside \
<tool_call>...</tool_call>. When you know the answer, write it on its own line as: FINAL ANSWER: <answer>."
                .into(),
            first_turn: "Question: {question}\nThe current figure is attached.".into(),
            edit_result: "The figure was updated as requested ({edit_result}). Continue.".into(),
            challenge: "The figure was updated as requested ({edit_result}). Inspect it critically: if it does \
not satisfy your request, issue a revised instruction inside <tool_call>...</tool_call>; otherwise continue."
                .into(),
            failure_notice: "The requested edit could not be rendered: {failure_notice}. The previous figure is \
still in effect. Continue without the edit."
                .into(),
            resume: "Continue your reasoning.".into(),
            forced_answer: "No further edits are possible. Answer now on its own line as: FINAL ANSWER: <answer>."
                .into(),
            corrective: "Your last reply could not be parsed: {problem}. Reply with either one \
<tool_call>...</tool_call> instruction or one FINAL ANSWER: line, never both."
                .into(),
            editor_system: "You are a code editor. You receive a rendering program and an edit instruction. \
Return the complete edited program, never a diff."
                .into(),
            edit_request: "Instruction: {action}\n\nCurrent program:\n{code}".into(),
            repair_request: "The program below failed to render.\n\nErrors:\n{errors}\n\nProgram:\n{code}\n\nReturn the complete fixed program.".into(),
        }
    }
}

impl TemplateSet {
    /// Confirms the placeholders each template depends on are present.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let required = [
            ("first_turn", &self.first_turn, "{question}"),
            ("edit_result", &self.edit_result, "{edit_result}"),
            ("challenge", &self.challenge, "{edit_result}"),
            ("failure_notice", &self.failure_notice, "{failure_notice}"),
            ("edit_request", &self.edit_request, "{action}"),
            ("edit_request", &self.edit_request, "{code}"),
            ("repair_request", &self.repair_request, "{code}"),
            ("repair_request", &self.repair_request, "{errors}"),
        ];
        for (name, template, placeholder) in required {
            if !template.contains(placeholder) {
                return Err(ValidationError::new(format!(
                    "template '{name}' is missing the {placeholder} placeholder"
                )));
            }
        }
        Ok(())
    }
}

/// Substitutes `{key}` occurrences; unknown placeholders are left alone.
pub fn fill(template: &str, values: &BTreeMap<&str, &str>) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
