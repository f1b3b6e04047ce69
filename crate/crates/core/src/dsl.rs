//! Attention-weight prompt syntax.
//!
//! Grammar:
//!
//! ```text
//! (X)      X weighted by 1.1
//! [X]      X weighted by 1/1.1
//! (X:w)    X weighted by the decimal literal w
//! \( \) \[ \] \\   literal delimiters
//! ```
//!
//! Groups nest and their weights multiply. A `:` only separates a weight
//! when it is inside a `(` group and everything between it and the closing
//! `)` looks like a number; otherwise it is ordinary text.
//!
//! Normalized trees are flat: a sequence of text spans, each either bare
//! (weight 1) or wrapped in a single weighted node. Weights are kept on a
//! grid of 4 fractional digits, the precision of the rendered form, so a
//! normalized tree survives `render` followed by `parse` unchanged.

use std::fmt;

use thiserror::Error;

use crate::model::{fold, Keyword, KeywordSet};

/// Weight applied by a bare `( )` group.
pub const PAREN_WEIGHT: f64 = 1.1;
/// Weight applied by a `[ ]` group; the exact inverse of [`PAREN_WEIGHT`].
pub const BRACKET_WEIGHT: f64 = 1.0 / PAREN_WEIGHT;

const MAX_DEPTH: usize = 256;
const WEIGHT_SCALE: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("UnbalancedDelimiter at byte {position}")]
    UnbalancedDelimiter { position: usize },
    #[error("InvalidWeightLiteral {literal:?} at byte {position}")]
    InvalidWeightLiteral { position: usize, literal: String },
    #[error("NestingTooDeep at byte {position}")]
    NestingTooDeep { position: usize },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::UnbalancedDelimiter { position }
            | ParseError::InvalidWeightLiteral { position, .. }
            | ParseError::NestingTooDeep { position } => *position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightError {
    #[error("keyword {0:?} is not in the set")]
    UnknownKeyword(String),
    #[error("weight {weight} exceeds the cap {cap}")]
    WeightAboveCap { weight: f64, cap: f64 },
    #[error("weight {0} must be finite and positive")]
    InvalidWeight(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Text(String),
    Weighted { inner: Vec<Node>, weight: f64 },
}

impl Node {
    pub fn text(s: impl Into<String>) -> Self {
        Node::Text(s.into())
    }

    pub fn weighted(inner: Vec<Node>, weight: f64) -> Self {
        Node::Weighted { inner, weight }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedPromptAst {
    pub nodes: Vec<Node>,
}

impl WeightedPromptAst {
    pub fn new(nodes: Vec<Node>) -> Self {
        Self { nodes }
    }

    /// Text spans in order, each with the product of its enclosing weights.
    pub fn segments(&self) -> Vec<(String, f64)> {
        fn walk(nodes: &[Node], scale: f64, out: &mut Vec<(String, f64)>) {
            for node in nodes {
                match node {
                    Node::Text(t) => out.push((t.clone(), scale)),
                    Node::Weighted { inner, weight } => walk(inner, scale * weight, out),
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, 1.0, &mut out);
        out
    }

    /// Comma-separated phrases with their effective weights.
    ///
    /// Each weighted span is split on commas independently, so a phrase that
    /// straddles two differently weighted spans comes back as two pieces.
    pub fn phrase_weights(&self) -> Vec<(String, f64)> {
        normalize(self)
            .segments()
            .into_iter()
            .flat_map(|(text, w)| {
                text.split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| (p.to_string(), w))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

impl fmt::Display for WeightedPromptAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn write_nodes(nodes: &[Node], f: &mut fmt::Formatter<'_>) -> fmt::Result {
            for (i, node) in nodes.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                match node {
                    Node::Text(t) => write!(f, "Text({t:?})")?,
                    Node::Weighted { inner, weight } => {
                        f.write_str("Weighted([")?;
                        write_nodes(inner, f)?;
                        write!(f, "], {})", format_weight(*weight))?;
                    }
                }
            }
            Ok(())
        }
        f.write_str("[")?;
        write_nodes(&self.nodes, f)?;
        f.write_str("]")
    }
}

/// Rounds a weight onto the 4-fractional-digit grid used by rendering.
pub fn quantize_weight(weight: f64) -> f64 {
    ((weight * WEIGHT_SCALE).round() / WEIGHT_SCALE).max(1.0 / WEIGHT_SCALE)
}

/// Prints a weight with at most 4 fractional digits, trailing zeros trimmed.
pub fn format_weight(weight: f64) -> String {
    let s = format!("{weight:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if matches!(c, '(' | ')' | '[' | ']' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

pub fn parse(text: &str) -> Result<WeightedPromptAst, ParseError> {
    let mut parser = Parser {
        src: text,
        chars: text.char_indices().collect(),
        pos: 0,
    };
    let (nodes, _) = parser.parse_seq(None, 0)?;
    Ok(WeightedPromptAst { nodes })
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
}

impl Parser<'_> {
    fn peek_at(&self, i: usize) -> Option<(usize, char)> {
        self.chars.get(i).copied()
    }

    fn byte_offset(&self, i: usize) -> usize {
        self.peek_at(i).map_or(self.src.len(), |(b, _)| b)
    }

    fn parse_seq(
        &mut self,
        closer: Option<char>,
        depth: usize,
    ) -> Result<(Vec<Node>, Option<f64>), ParseError> {
        let mut nodes = Vec::new();
        let mut text = String::new();
        let flush = |text: &mut String, nodes: &mut Vec<Node>| {
            if !text.is_empty() {
                nodes.push(Node::Text(std::mem::take(text)));
            }
        };

        loop {
            let Some((offset, c)) = self.peek_at(self.pos) else {
                if closer.is_some() {
                    return Err(ParseError::UnbalancedDelimiter {
                        position: self.src.len(),
                    });
                }
                flush(&mut text, &mut nodes);
                return Ok((nodes, None));
            };
            match c {
                '\\' => match self.peek_at(self.pos + 1) {
                    Some((_, e @ ('(' | ')' | '[' | ']' | '\\'))) => {
                        text.push(e);
                        self.pos += 2;
                    }
                    _ => {
                        text.push('\\');
                        self.pos += 1;
                    }
                },
                '(' | '[' => {
                    if depth >= MAX_DEPTH {
                        return Err(ParseError::NestingTooDeep { position: offset });
                    }
                    flush(&mut text, &mut nodes);
                    self.pos += 1;
                    let (inner, explicit) =
                        self.parse_seq(Some(if c == '(' { ')' } else { ']' }), depth + 1)?;
                    let weight = match (c, explicit) {
                        (_, Some(w)) => w,
                        ('(', None) => PAREN_WEIGHT,
                        _ => BRACKET_WEIGHT,
                    };
                    nodes.push(Node::Weighted { inner, weight });
                }
                ')' | ']' => {
                    if closer != Some(c) {
                        return Err(ParseError::UnbalancedDelimiter { position: offset });
                    }
                    self.pos += 1;
                    flush(&mut text, &mut nodes);
                    return Ok((nodes, None));
                }
                ':' if closer == Some(')') => match self.weight_literal_end() {
                    Some(close_idx) => {
                        flush(&mut text, &mut nodes);
                        let start = self.byte_offset(self.pos + 1);
                        let end = self.byte_offset(close_idx);
                        let literal = &self.src[start..end];
                        let weight = parse_weight_literal(literal).ok_or_else(|| {
                            ParseError::InvalidWeightLiteral {
                                position: start,
                                literal: literal.to_string(),
                            }
                        })?;
                        self.pos = close_idx + 1;
                        return Ok((nodes, Some(weight)));
                    }
                    None => {
                        text.push(':');
                        self.pos += 1;
                    }
                },
                _ => {
                    text.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    /// If the `:` at `self.pos` is followed only by number-like characters up
    /// to a `)`, returns the index of that `)`.
    fn weight_literal_end(&self) -> Option<usize> {
        let mut i = self.pos + 1;
        while let Some((_, c)) = self.peek_at(i) {
            match c {
                ')' => return Some(i),
                '0'..='9' | '.' | '+' | '-' => {}
                c if c.is_whitespace() => {}
                _ => return None,
            }
            i += 1;
        }
        None
    }
}

fn parse_weight_literal(literal: &str) -> Option<f64> {
    let s = literal.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    let digits = |p: &str| p.chars().all(|c| c.is_ascii_digit());
    if !(digits(int) && digits(frac)) || (int.is_empty() && frac.is_empty()) {
        return None;
    }
    let w: f64 = s.parse().ok()?;
    (w.is_finite() && w > 0.0).then_some(w)
}

/// Flattens nesting, quantizes weights, drops weight-1 wrappers and merges
/// neighbouring spans of equal weight.
pub fn normalize(ast: &WeightedPromptAst) -> WeightedPromptAst {
    let mut merged: Vec<(String, f64)> = Vec::new();
    for (text, weight) in ast.segments() {
        if text.is_empty() {
            continue;
        }
        let weight = quantize_weight(weight);
        match merged.last_mut() {
            Some((prev, w)) if *w == weight => prev.push_str(&text),
            _ => merged.push((text, weight)),
        }
    }
    let nodes = merged
        .into_iter()
        .map(|(text, weight)| {
            if weight == 1.0 {
                Node::Text(text)
            } else {
                Node::Weighted {
                    inner: vec![Node::Text(text)],
                    weight,
                }
            }
        })
        .collect();
    WeightedPromptAst { nodes }
}

/// Canonical text form: explicit `(X:w)` weights, bare weight-1 text.
pub fn render(ast: &WeightedPromptAst) -> String {
    let mut out = String::new();
    for node in normalize(ast).nodes {
        match node {
            Node::Text(t) => out.push_str(&escape(&t)),
            Node::Weighted { inner, weight } => {
                out.push('(');
                for n in inner {
                    if let Node::Text(t) = n {
                        out.push_str(&escape(&t));
                    }
                }
                out.push(':');
                out.push_str(&format_weight(weight));
                out.push(')');
            }
        }
    }
    out
}

/// Joins keyword phrases with `", "`, wrapping re-weighted ones as `(phrase:w)`.
pub fn compose_prompt(keywords: &KeywordSet) -> String {
    keywords
        .iter()
        .map(|k| {
            let w = quantize_weight(k.weight);
            if w == 1.0 {
                escape(&k.phrase)
            } else {
                format!("({}:{})", escape(&k.phrase), format_weight(w))
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Returns a copy of `keywords` with the weight of `phrase` replaced.
pub fn set_weight(
    keywords: &KeywordSet,
    phrase: &str,
    weight: f64,
    weight_cap: f64,
) -> Result<KeywordSet, WeightError> {
    if !(weight.is_finite() && weight > 0.0) {
        return Err(WeightError::InvalidWeight(weight));
    }
    if weight > weight_cap {
        return Err(WeightError::WeightAboveCap {
            weight,
            cap: weight_cap,
        });
    }
    let idx = keywords
        .position(phrase)
        .ok_or_else(|| WeightError::UnknownKeyword(phrase.to_string()))?;
    let mut out = keywords.clone();
    let kw = &mut out.keywords_mut()[idx];
    *kw = Keyword {
        phrase: kw.phrase.clone(),
        weight,
    };
    debug_assert_eq!(fold(&kw.phrase), fold(phrase));
    Ok(out)
}
