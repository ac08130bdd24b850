//! Parsers for the tagged output grammars of the three agents.
//!
//! Generation turns use `<think>`, `<sql>` (any ASCII case) and `<solution>` blocks; grounding
//! answers use an `<answer>` block holding `Y`/`N` and a quoted column list; verifier
//! completions start with a bare Yes/No. Every parser here is a pure function of its input.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("completion has no <think> block")]
    MissingThink,
    #[error("unclosed <{0}> block")]
    Unclosed(&'static str),
    #[error("no <sql> or <solution> block follows the <think> block")]
    MissingAction,
    #[error("SQL wrapped in a ``` fence instead of <SQL> tags")]
    FencedSql,
    #[error("empty <think> block")]
    EmptyThought,
    #[error("empty SQL block")]
    EmptySql,
}

/// What one generation completion asks the environment to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentStep {
    /// Execute `sql` and continue.
    Action { thought: String, sql: String },
    /// Stop with `sql` as the final answer.
    Final { thought: String, sql: String },
}

/// Byte offsets of one tag block: content span and the index just past the closing tag.
struct Block {
    content: (usize, usize),
    end: usize,
}

/// Finds the first `<name>...</name>` starting at `from`. `lower` is the ASCII-lowercased copy of
/// the haystack (same byte offsets); it is searched when `any_case` is set.
fn find_block(
    raw: &str,
    lower: &str,
    name: &'static str,
    from: usize,
    any_case: bool,
) -> Result<Option<Block>, ProtocolError> {
    let hay = if any_case { lower } else { raw };
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let Some(rel) = hay[from..].find(&open) else {
        return Ok(None);
    };
    let start = from + rel + open.len();
    let Some(rel_end) = hay[start..].find(&close) else {
        return Err(ProtocolError::Unclosed(name));
    };
    let stop = start + rel_end;
    Ok(Some(Block {
        content: (start, stop),
        end: stop + close.len(),
    }))
}

fn content<'a>(raw: &'a str, block: &Block) -> &'a str {
    raw[block.content.0..block.content.1].trim()
}

/// Parses one generation-agent completion.
///
/// The first `<think>` block must be present. A `<solution>` block after it makes the step
/// terminal (and wins over any `<sql>` block); otherwise the first `<sql>` block after it is the
/// action. Anything past the consumed blocks, including model-written `<observation>` text, is
/// ignored.
pub fn parse_agent_turn(raw: &str) -> Result<AgentStep, ProtocolError> {
    let lower = raw.to_ascii_lowercase();
    let think = match find_block(raw, &lower, "think", 0, false)? {
        Some(b) => b,
        None => {
            if lower.contains("```") {
                return Err(ProtocolError::FencedSql);
            }
            return Err(ProtocolError::MissingThink);
        }
    };
    let thought = content(raw, &think).to_string();
    if thought.is_empty() {
        return Err(ProtocolError::EmptyThought);
    }

    let solution = find_block(raw, &lower, "solution", think.end, false)?;
    if let Some(block) = solution {
        let sql = content(raw, &block);
        if sql.is_empty() {
            return Err(ProtocolError::EmptySql);
        }
        return Ok(AgentStep::Final {
            thought,
            sql: sql.to_string(),
        });
    }

    match find_block(raw, &lower, "sql", think.end, true)? {
        Some(block) => {
            let sql = content(raw, &block);
            if sql.is_empty() {
                return Err(ProtocolError::EmptySql);
            }
            Ok(AgentStep::Action {
                thought,
                sql: sql.to_string(),
            })
        }
        None if lower[think.end..].contains("```") => Err(ProtocolError::FencedSql),
        None => Err(ProtocolError::MissingAction),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Y,
    N,
}

/// Parsed grounding-agent output for one (question, table) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingDecision {
    pub decision: Decision,
    pub columns: Vec<String>,
    pub valid_format: bool,
}

impl GroundingDecision {
    pub fn yes<S: AsRef<str>>(columns: &[S]) -> Self {
        Self {
            decision: Decision::Y,
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            valid_format: true,
        }
    }

    pub fn no() -> Self {
        Self {
            decision: Decision::N,
            columns: Vec::new(),
            valid_format: true,
        }
    }

    pub fn invalid() -> Self {
        Self {
            decision: Decision::N,
            columns: Vec::new(),
            valid_format: false,
        }
    }

    /// Renders the decision in the `<answer>` layout the grounding prompt asks for.
    pub fn render(&self) -> String {
        match self.decision {
            Decision::N => "<answer>\nN\n</answer>".to_string(),
            Decision::Y => {
                let cols: Vec<String> = self
                    .columns
                    .iter()
                    .map(|c| serde_json::to_string(c).unwrap_or_default())
                    .collect();
                format!("<answer>\nY\n[{}]\n</answer>", cols.join(", "))
            }
        }
    }
}

/// Parses a grounding completion. Malformed input yields `valid_format = false`, never an error.
pub fn parse_grounding_answer(raw: &str) -> GroundingDecision {
    let lower = raw.to_ascii_lowercase();
    let block = match find_block(raw, &lower, "answer", 0, false) {
        Ok(Some(b)) => b,
        _ => return GroundingDecision::invalid(),
    };
    let body = content(raw, &block);
    let mut chars = body.chars();
    let decision = match chars.next() {
        Some('Y' | 'y') => Decision::Y,
        Some('N' | 'n') => Decision::N,
        _ => return GroundingDecision::invalid(),
    };
    let rest = chars.as_str();
    // The decision letter must stand alone as a token.
    if rest.chars().next().is_some_and(|c| !c.is_whitespace() && c != '[') {
        return GroundingDecision::invalid();
    }
    match decision {
        Decision::N => {
            let rest = rest.trim();
            if rest.is_empty() || parse_column_list(rest).is_some_and(|c| c.is_empty()) {
                GroundingDecision::no()
            } else {
                GroundingDecision::invalid()
            }
        }
        Decision::Y => {
            let Some(open) = rest.find('[') else {
                return GroundingDecision::invalid();
            };
            match parse_column_list(&rest[open..]) {
                Some(columns) => GroundingDecision {
                    decision: Decision::Y,
                    columns,
                    valid_format: true,
                },
                None => GroundingDecision::invalid(),
            }
        }
    }
}

/// Parses a `[ "a", 'b', ]` literal at the start of `text`. Trailing text after `]` is allowed;
/// nested lists and unquoted items are rejected.
fn parse_column_list(text: &str) -> Option<Vec<String>> {
    let mut it = text.chars().peekable();
    if it.next()? != '[' {
        return None;
    }
    let mut out = Vec::new();
    let skip_ws = |it: &mut std::iter::Peekable<std::str::Chars<'_>>| {
        while it.peek().is_some_and(|c| c.is_whitespace()) {
            it.next();
        }
    };
    loop {
        skip_ws(&mut it);
        match it.next()? {
            ']' => return Some(out),
            q @ ('"' | '\'') => {
                let mut item = String::new();
                loop {
                    match it.next()? {
                        '\\' => item.push(it.next()?),
                        c if c == q => break,
                        c => item.push(c),
                    }
                }
                out.push(item);
                skip_ws(&mut it);
                match it.next()? {
                    ',' => continue,
                    ']' => return Some(out),
                    _ => return None,
                }
            }
            _ => return None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
    Invalid,
}

/// Reads the leading Yes/No of a verifier completion (first alphabetic run, any case).
pub fn parse_verifier_verdict(raw: &str) -> Verdict {
    let word: String = raw
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    match word.to_lowercase().as_str() {
        "yes" => Verdict::Yes,
        "no" => Verdict::No,
        _ => Verdict::Invalid,
    }
}
