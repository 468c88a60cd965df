//! The two structured response grammars and their failure taxonomy.
//!
//! * Angles: `{YYY,PPP,RRR}`, three zero-padded integers (yaw, pitch, roll)
//!   with negative angles shifted by 360.
//! * Boxes: `[[x0,y0,x1,y1;x0,y0,x1,y1;...]]`, integer coordinates.
//!
//! Surrounding prose is allowed around a single group. Anything else is
//! invalid and gets exactly one [`InvalidReason`], decided in fixed
//! precedence order:
//!
//! 1. `RecycledOutput`: an unterminated group that reached the value cap or
//!    trails off in an ellipsis.
//! 2. `WrongCount`: a well-formed group of the expected grammar with the
//!    wrong number of values.
//! 3. `MixedOutput`: a group whose opening and closing delimiters belong to
//!    different grammars, or more than one group.
//! 4. `AngleFormatInBBoxTask` / `BBoxFormatInAngleTask`.
//! 5. `Malformed`: any other structural defect.
//! 6. `LogicalError`: right shape, impossible values.
//! 7. `NlpOutput` (prose, no numbers) or `NoNumbers`.
//!
//! This module also carries the output-enforcement strategies used as
//! baselines: a strict parser, a loose first-three-numbers parser, and a
//! static vocabulary mask for logits.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RECYCLE_CAP: usize = 64;
pub const ANGLE_MAX: f64 = 360.0;
pub const BBOX_MAX: i64 = 999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "hpe", alias = "angle")]
    Angle,
    #[serde(rename = "bbox")]
    BBox,
}

/// Yaw, pitch and roll in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerTriple {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerTriple {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    /// Encoded integers in `[0, 359]`.
    pub fn encoded(&self) -> Result<[u16; 3]> {
        if !self.is_finite() {
            return Err(Error::NonFiniteAngle);
        }
        Ok(self.as_array().map(encode_one))
    }
}

fn encode_one(v: f64) -> u16 {
    // v < 0 -> v + 360, round, then wrap so 359.5.. becomes 000.
    let shifted = v.rem_euclid(360.0);
    (shifted.round() as i64).rem_euclid(360) as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn as_array(&self) -> [i64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Coordinates in range and corners ordered.
    pub fn is_logical(&self) -> bool {
        self.as_array().iter().all(|v| (0..=BBOX_MAX).contains(v))
            && self.x1 > self.x0
            && self.y1 > self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InvalidReason {
    RecycledOutput,
    AngleFormatInBBoxTask,
    BBoxFormatInAngleTask,
    NlpOutput,
    MixedOutput,
    LogicalError,
    WrongCount,
    NoNumbers,
    Malformed,
}

impl InvalidReason {
    pub const ALL: [InvalidReason; 9] = [
        InvalidReason::RecycledOutput,
        InvalidReason::AngleFormatInBBoxTask,
        InvalidReason::BBoxFormatInAngleTask,
        InvalidReason::NlpOutput,
        InvalidReason::MixedOutput,
        InvalidReason::LogicalError,
        InvalidReason::WrongCount,
        InvalidReason::NoNumbers,
        InvalidReason::Malformed,
    ];
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Angles(EulerTriple),
    Boxes(Vec<BBox>),
}

/// Outcome of parsing one raw response.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub raw: String,
    pub outcome: std::result::Result<Payload, InvalidReason>,
}

impl ParsedResponse {
    pub fn is_valid(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn reason(&self) -> Option<InvalidReason> {
        self.outcome.as_ref().err().copied()
    }

    pub fn angles(&self) -> Option<EulerTriple> {
        match &self.outcome {
            Ok(Payload::Angles(t)) => Some(*t),
            _ => None,
        }
    }

    pub fn boxes(&self) -> Option<&[BBox]> {
        match &self.outcome {
            Ok(Payload::Boxes(b)) => Some(b),
            _ => None,
        }
    }
}

/// `"{YYY,PPP,RRR}"`.
pub fn encode_angles(t: &EulerTriple) -> Result<String> {
    let [y, p, r] = t.encoded()?;
    Ok(format!("{{{y:03},{p:03},{r:03}}}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Brace,
    Bracket,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num { value: f64, integer: bool },
    Open(Family),
    Close(Family),
    Comma,
    Semi,
    Ellipsis,
    Alpha,
    Other,
}

fn lex(raw: &str) -> Vec<Tok> {
    let chars: Vec<char> = raw.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let digit_at = |j: usize| chars.get(j).is_some_and(|c| c.is_ascii_digit());
        if c.is_ascii_digit() || (c == '-' && digit_at(i + 1)) {
            let start = i;
            i += 1;
            while digit_at(i) {
                i += 1;
            }
            let mut integer = true;
            if chars.get(i) == Some(&'.') && digit_at(i + 1) {
                integer = false;
                i += 1;
                while digit_at(i) {
                    i += 1;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value = text.parse::<f64>().unwrap_or(f64::INFINITY);
            toks.push(Tok::Num { value, integer });
            continue;
        }
        let tok = match c {
            '{' => Tok::Open(Family::Brace),
            '}' => Tok::Close(Family::Brace),
            '[' => Tok::Open(Family::Bracket),
            ']' => Tok::Close(Family::Bracket),
            ',' => Tok::Comma,
            ';' => Tok::Semi,
            '…' => Tok::Ellipsis,
            '.' if chars.get(i + 1) == Some(&'.') && chars.get(i + 2) == Some(&'.') => {
                i += 2;
                Tok::Ellipsis
            }
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            c if c.is_alphabetic() => Tok::Alpha,
            _ => Tok::Other,
        };
        toks.push(tok);
        i += 1;
    }
    toks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    /// `{ ... }`
    Angle,
    /// `[[ ... ]]`
    Boxes,
    /// Opening and closing delimiters from different grammars.
    Mixed,
    /// Same family but unexpected delimiter counts, e.g. `[ ... ]`.
    Odd,
    /// No closing delimiter.
    Open,
}

#[derive(Debug)]
struct Group {
    form: Form,
    /// Numeric values per `;`-separated segment.
    segments: Vec<Vec<(f64, bool)>>,
    values: usize,
    clean: bool,
    ellipsis: bool,
}

impl Group {
    fn integers(&self) -> bool {
        self.segments.iter().flatten().all(|(_, int)| *int)
    }
}

#[derive(Debug, Default)]
struct Scan {
    groups: Vec<Group>,
    outside_numbers: Vec<f64>,
    stray_close: bool,
    alpha: bool,
}

fn form_of(open: &[Family], close: Option<&[Family]>) -> Form {
    let Some(close) = close else {
        return Form::Open;
    };
    let families = |s: &[Family]| (s.contains(&Family::Brace), s.contains(&Family::Bracket));
    if families(open) != families(close) {
        return Form::Mixed;
    }
    match (open, close) {
        ([Family::Brace], [Family::Brace]) => Form::Angle,
        ([Family::Bracket, Family::Bracket], [Family::Bracket, Family::Bracket]) => Form::Boxes,
        _ => Form::Odd,
    }
}

fn build_group(open: Vec<Family>, close: Option<Vec<Family>>, content: &[Tok]) -> Group {
    let mut segments = vec![Vec::new()];
    let mut clean = true;
    let mut ellipsis = false;
    // Expect a number at segment start and after each comma.
    let mut want_num = true;
    for tok in content {
        match *tok {
            Tok::Num { value, integer } => {
                if !want_num {
                    clean = false;
                }
                segments.last_mut().expect("nonempty").push((value, integer));
                want_num = false;
            }
            Tok::Comma | Tok::Semi => {
                if want_num {
                    clean = false;
                }
                if *tok == Tok::Semi {
                    segments.push(Vec::new());
                }
                want_num = true;
            }
            Tok::Ellipsis => {
                ellipsis = true;
                clean = false;
            }
            _ => clean = false,
        }
    }
    if want_num {
        clean = false;
    }
    let values = segments.iter().map(Vec::len).sum();
    Group {
        form: form_of(&open, close.as_deref()),
        segments,
        values,
        clean,
        ellipsis,
    }
}

fn scan(raw: &str) -> Scan {
    let toks = lex(raw);
    let mut out = Scan::default();
    let mut i = 0;
    while i < toks.len() {
        match toks[i] {
            Tok::Open(_) => {
                let mut open = Vec::new();
                while let Some(Tok::Open(f)) = toks.get(i) {
                    open.push(*f);
                    i += 1;
                }
                let start = i;
                while i < toks.len() && !matches!(toks[i], Tok::Open(_) | Tok::Close(_)) {
                    i += 1;
                }
                let content = &toks[start..i];
                let close = if matches!(toks.get(i), Some(Tok::Close(_))) {
                    let mut close = Vec::new();
                    while let Some(Tok::Close(f)) = toks.get(i) {
                        close.push(*f);
                        i += 1;
                    }
                    Some(close)
                } else {
                    None
                };
                if content.contains(&Tok::Alpha) {
                    out.alpha = true;
                }
                out.groups.push(build_group(open, close, content));
            }
            Tok::Close(_) => {
                out.stray_close = true;
                i += 1;
            }
            Tok::Num { value, .. } => {
                out.outside_numbers.push(value);
                i += 1;
            }
            Tok::Alpha => {
                out.alpha = true;
                i += 1;
            }
            _ => i += 1,
        }
    }
    out
}

/// Parser settings shared by the strict parsers and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grammar {
    /// Values in an unterminated group at which it counts as recycled output.
    pub recycle_cap: usize,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            recycle_cap: DEFAULT_RECYCLE_CAP,
        }
    }
}

impl Grammar {
    fn analyze(&self, raw: &str, task: Task) -> std::result::Result<Payload, InvalidReason> {
        use InvalidReason::*;
        let s = scan(raw);
        let (expected, foreign) = match task {
            Task::Angle => (Form::Angle, Form::Boxes),
            Task::BBox => (Form::Boxes, Form::Angle),
        };
        let miscounted = |g: &Group| match task {
            Task::Angle => g.values != 3,
            Task::BBox => g.segments.iter().any(|seg| seg.len() != 4),
        };

        if s.groups
            .iter()
            .any(|g| g.form == Form::Open && (g.ellipsis || g.values >= self.recycle_cap))
        {
            return Err(RecycledOutput);
        }
        if s.groups.iter().any(|g| g.form == expected && miscounted(g)) {
            return Err(WrongCount);
        }
        if s.groups.len() > 1 || s.groups.iter().any(|g| g.form == Form::Mixed) {
            return Err(MixedOutput);
        }
        if s.groups.iter().any(|g| g.form == foreign) {
            return Err(match task {
                Task::Angle => BBoxFormatInAngleTask,
                Task::BBox => AngleFormatInBBoxTask,
            });
        }
        let Some(group) = s.groups.first() else {
            return Err(if !s.outside_numbers.is_empty() || s.stray_close {
                Malformed
            } else if s.alpha {
                NlpOutput
            } else {
                NoNumbers
            });
        };
        if group.form != expected
            || !group.clean
            || !group.integers()
            || s.stray_close
            || !s.outside_numbers.is_empty()
        {
            return Err(Malformed);
        }
        match task {
            Task::Angle => {
                let v: Vec<f64> = group.segments[0].iter().map(|(v, _)| *v).collect();
                if v.iter().any(|x| !(0.0..=ANGLE_MAX).contains(x)) {
                    return Err(LogicalError);
                }
                Ok(Payload::Angles(EulerTriple::new(v[0], v[1], v[2])))
            }
            Task::BBox => {
                let boxes: Vec<BBox> = group
                    .segments
                    .iter()
                    .map(|seg| {
                        let c = |i: usize| seg[i].0.clamp(i64::MIN as f64, i64::MAX as f64) as i64;
                        BBox::new(c(0), c(1), c(2), c(3))
                    })
                    .collect();
                if boxes.iter().any(|b| !b.is_logical()) {
                    return Err(LogicalError);
                }
                Ok(Payload::Boxes(boxes))
            }
        }
    }

    pub fn parse_angles_strict(&self, raw: &str) -> ParsedResponse {
        ParsedResponse {
            raw: raw.to_string(),
            outcome: self.analyze(raw, Task::Angle),
        }
    }

    pub fn parse_bboxes(&self, raw: &str) -> ParsedResponse {
        ParsedResponse {
            raw: raw.to_string(),
            outcome: self.analyze(raw, Task::BBox),
        }
    }

    /// Tag for a response that failed its task's strict parser. A response
    /// that actually parses is outside this function's contract and maps to
    /// `Malformed`.
    pub fn classify_invalid(&self, raw: &str, task: Task) -> InvalidReason {
        self.analyze(raw, task).err().unwrap_or(InvalidReason::Malformed)
    }
}

/// Exactly one `{a,b,c}` group of integers in `[0, 360]`; prose around it
/// is fine, other numbers are not.
pub fn parse_angles_strict(raw: &str) -> ParsedResponse {
    Grammar::default().parse_angles_strict(raw)
}

/// Exactly one `[[...]]` group of logically valid boxes.
pub fn parse_bboxes(raw: &str) -> ParsedResponse {
    Grammar::default().parse_bboxes(raw)
}

pub fn classify_invalid(raw: &str, task: Task) -> InvalidReason {
    Grammar::default().classify_invalid(raw, task)
}

/// First three numeric literals, left to right, whatever surrounds them.
pub fn parse_angles_loose(raw: &str) -> ParsedResponse {
    let nums: Vec<f64> = lex(raw)
        .into_iter()
        .filter_map(|t| match t {
            Tok::Num { value, .. } => Some(value),
            _ => None,
        })
        .take(3)
        .collect();
    let outcome = match nums[..] {
        [y, p, r] => Ok(Payload::Angles(EulerTriple::new(y, p, r))),
        _ => Err(InvalidReason::NoNumbers),
    };
    ParsedResponse {
        raw: raw.to_string(),
        outcome,
    }
}

/// Digits plus the structural characters of both grammars and space.
pub fn default_allowed_chars() -> BTreeSet<char> {
    ('0'..='9').chain("{}[],; ".chars()).collect()
}

/// `true` for tokens that are nonempty and made only of allowed characters.
pub fn build_vocab_mask<S: AsRef<str>>(vocab: &[S], allowed: &BTreeSet<char>) -> Vec<bool> {
    vocab
        .iter()
        .map(|tok| {
            let tok = tok.as_ref();
            !tok.is_empty() && tok.chars().all(|c| allowed.contains(&c))
        })
        .collect()
}

/// Sets masked-out logits to negative infinity.
pub fn apply_mask(logits: &[f32], mask: &[bool]) -> Result<Vec<f32>> {
    if logits.len() != mask.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: mask.len(),
        });
    }
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&l, &keep)| if keep { l } else { f32::NEG_INFINITY })
        .collect())
}
