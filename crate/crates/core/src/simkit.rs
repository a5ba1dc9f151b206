//! Symbolic payloads and the deterministic simulated semantics of every tool
//! and corruption operator.
//!
//! A payload carries an expression tree describing its content, a language
//! tag, a stack of corruptions and a quality scalar. Restoration tools pop
//! corruptions; transforms wrap the expression and price any residual
//! corruption into quality. The symbolic [`similarity`] scorer stands in for
//! embedding-based metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::registry::Modality;

/// Augmentation operators used to build multi-step tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Corruption {
    Blur,
    Noise,
    Gray,
    LowRes,
    Mask,
    Translate,
}

impl Corruption {
    pub const IMAGE: [Corruption; 4] = [Corruption::Blur, Corruption::Noise, Corruption::Gray, Corruption::LowRes];
    pub const TEXT: [Corruption; 2] = [Corruption::Mask, Corruption::Translate];

    pub fn modality(self) -> Modality {
        match self {
            Corruption::Blur | Corruption::Noise | Corruption::Gray | Corruption::LowRes => Modality::Image,
            Corruption::Mask | Corruption::Translate => Modality::Text,
        }
    }

    /// The semantic that undoes this corruption.
    pub fn inverse(self) -> SemanticId {
        match self {
            Corruption::Blur => SemanticId::RemoveBlur,
            Corruption::Noise => SemanticId::RemoveNoise,
            Corruption::Gray => SemanticId::RemoveGray,
            Corruption::LowRes => SemanticId::RemoveLowRes,
            Corruption::Mask => SemanticId::RemoveMask,
            Corruption::Translate => SemanticId::TranslateEnDe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    De,
    None,
}

/// Identifier of a simulated tool behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticId {
    RemoveBlur,
    RemoveNoise,
    RemoveGray,
    RemoveLowRes,
    RemoveMask,
    TranslateEnDe,
    Summarize,
    Sentiment,
    #[serde(rename = "QA")]
    Qa,
    Classify,
    Detect,
    Caption,
    Generate,
    #[serde(rename = "VQA")]
    Vqa,
}

impl SemanticId {
    pub const ALL: [SemanticId; 14] = [
        SemanticId::RemoveBlur,
        SemanticId::RemoveNoise,
        SemanticId::RemoveGray,
        SemanticId::RemoveLowRes,
        SemanticId::RemoveMask,
        SemanticId::TranslateEnDe,
        SemanticId::Summarize,
        SemanticId::Sentiment,
        SemanticId::Qa,
        SemanticId::Classify,
        SemanticId::Detect,
        SemanticId::Caption,
        SemanticId::Generate,
        SemanticId::Vqa,
    ];

    /// Input modalities and output modality of the behavior.
    pub fn signature(self) -> (&'static [Modality], Modality) {
        use Modality::{Image, Text};
        use SemanticId::*;
        match self {
            RemoveBlur | RemoveNoise | RemoveGray | RemoveLowRes => (&[Image], Image),
            RemoveMask | TranslateEnDe | Summarize | Sentiment => (&[Text], Text),
            Classify | Detect | Caption => (&[Image], Text),
            Generate => (&[Text], Image),
            Qa => (&[Text, Text], Text),
            Vqa => (&[Image, Text], Text),
        }
    }

    /// The corruption this semantic pops, for restoration semantics.
    pub fn restores(self) -> Option<Corruption> {
        match self {
            SemanticId::RemoveBlur => Some(Corruption::Blur),
            SemanticId::RemoveNoise => Some(Corruption::Noise),
            SemanticId::RemoveGray => Some(Corruption::Gray),
            SemanticId::RemoveLowRes => Some(Corruption::LowRes),
            SemanticId::RemoveMask => Some(Corruption::Mask),
            _ => None,
        }
    }

    /// Operator name written into expression trees by transforms.
    pub fn operator(self) -> Option<&'static str> {
        match self {
            SemanticId::TranslateEnDe => Some("de"),
            SemanticId::Summarize => Some("summ"),
            SemanticId::Sentiment => Some("sent"),
            SemanticId::Qa => Some("qa"),
            SemanticId::Classify => Some("class"),
            SemanticId::Detect => Some("detect"),
            SemanticId::Caption => Some("caption"),
            SemanticId::Generate => Some("gen"),
            SemanticId::Vqa => Some("vqa"),
            _ => None,
        }
    }
}

/// Penalty constants of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Quality factor for removing a corruption that is not on top of the stack.
    pub beta: f64,
    /// Quality factor for a no-op restoration and per residual corruption.
    pub gamma: f64,
    /// Similarity factor when language tags differ.
    pub language_mismatch: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            beta: 0.8,
            gamma: 0.9,
            language_mismatch: 0.5,
        }
    }
}

impl SimParams {
    pub fn check(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("language_mismatch", self.language_mismatch),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::BadParam(name));
            }
        }
        Ok(())
    }
}

/// Content expression: a leaf content id or an operator applied to children.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expr {
    Leaf(String),
    Op(String, Vec<Expr>),
}

impl Expr {
    pub fn leaf(id: impl Into<String>) -> Self {
        Expr::Leaf(id.into())
    }

    pub fn op(name: impl Into<String>, args: Vec<Expr>) -> Self {
        Expr::Op(name.into(), args)
    }

    fn collect_symbols<'a>(&'a self, into: &mut BTreeMap<&'a str, usize>) {
        match self {
            Expr::Leaf(id) => *into.entry(id).or_default() += 1,
            Expr::Op(name, args) => {
                *into.entry(name).or_default() += 1;
                for a in args {
                    a.collect_symbols(into);
                }
            }
        }
    }

    /// Multiset of operator names and leaf ids.
    pub fn symbols(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        self.collect_symbols(&mut m);
        m
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Leaf(id) => f.write_str(id),
            Expr::Op(name, args) => {
                write!(f, "({name}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl FromStr for Expr {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut tokens = Vec::new();
        let mut atom = String::new();
        for ch in s.chars() {
            match ch {
                '(' | ')' => {
                    if !atom.is_empty() {
                        tokens.push(std::mem::take(&mut atom));
                    }
                    tokens.push(ch.to_string());
                }
                c if c.is_whitespace() => {
                    if !atom.is_empty() {
                        tokens.push(std::mem::take(&mut atom));
                    }
                }
                c => atom.push(c),
            }
        }
        if !atom.is_empty() {
            tokens.push(atom);
        }
        let mut pos = 0;
        let expr = parse_expr(&tokens, &mut pos).ok_or_else(|| SimError::BadExpr(s.to_string()))?;
        if pos != tokens.len() {
            return Err(SimError::BadExpr(s.to_string()));
        }
        Ok(expr)
    }
}

fn parse_expr(tokens: &[String], pos: &mut usize) -> Option<Expr> {
    let tok = tokens.get(*pos)?;
    *pos += 1;
    match tok.as_str() {
        ")" => None,
        "(" => {
            let name = tokens.get(*pos)?.clone();
            if name == "(" || name == ")" {
                return None;
            }
            *pos += 1;
            let mut args = Vec::new();
            loop {
                if tokens.get(*pos)? == ")" {
                    *pos += 1;
                    return Some(Expr::Op(name, args));
                }
                args.push(parse_expr(tokens, pos)?);
            }
        }
        _ => Some(Expr::Leaf(tok.clone())),
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A symbolic data sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    pub modality: Modality,
    pub expr: Expr,
    pub language: Language,
    /// Bottom of the stack first; the last element is the most recent corruption.
    pub corruptions: Vec<Corruption>,
    pub quality: f64,
}

impl Payload {
    pub fn image(id: impl Into<String>) -> Self {
        Self {
            modality: Modality::Image,
            expr: Expr::leaf(id),
            language: Language::None,
            corruptions: Vec::new(),
            quality: 1.0,
        }
    }

    pub fn text(id: impl Into<String>) -> Self {
        Self {
            modality: Modality::Text,
            expr: Expr::leaf(id),
            language: Language::En,
            corruptions: Vec::new(),
            quality: 1.0,
        }
    }

    pub fn residuals(&self) -> usize {
        self.corruptions.len()
    }

    pub fn top(&self) -> Option<Corruption> {
        self.corruptions.last().copied()
    }

    /// Checks the payload invariants.
    pub fn check(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(SimError::BadQuality(self.quality));
        }
        if let Some(c) = self.corruptions.iter().find(|c| c.modality() != self.modality) {
            return Err(SimError::IllegalCorruption {
                corruption: *c,
                modality: self.modality,
            });
        }
        let lang_ok = match self.modality {
            Modality::Image => self.language == Language::None,
            Modality::Text => self.language != Language::None,
        };
        if !lang_ok {
            return Err(SimError::BadLanguage(self.modality, self.language));
        }
        Ok(())
    }
}

/// A similarity value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Score(f64);

impl Score {
    pub const ZERO: Score = Score(0.0);
    pub const ONE: Score = Score(1.0);

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn new(v: f64) -> Self {
        if v.is_nan() {
            Score(0.0)
        } else {
            Score(v.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("corruption {corruption:?} is illegal for a {modality} payload")]
    IllegalCorruption { corruption: Corruption, modality: Modality },
    #[error("translate corruption requires an English payload, found {0:?}")]
    IllegalTranslate(Language),
    #[error("{semantic:?} expects {expected} inputs, got {got}")]
    ArityMismatch { semantic: SemanticId, expected: usize, got: usize },
    #[error("{semantic:?} input {slot} expects {expected}, got {got}")]
    ModalityMismatch {
        semantic: SemanticId,
        slot: usize,
        expected: Modality,
        got: Modality,
    },
    #[error("cannot translate a {0:?} payload that carries no translate corruption")]
    LanguageGuard(Language),
    #[error("quality {0} outside [0, 1]")]
    BadQuality(f64),
    #[error("{0} payload cannot have language {1:?}")]
    BadLanguage(Modality, Language),
    #[error("malformed expression `{0}`")]
    BadExpr(String),
    #[error("simulator parameter `{0}` outside [0, 1]")]
    BadParam(&'static str),
}

/// Pushes `c` onto the payload's corruption stack.
pub fn apply_corruption(p: &Payload, c: Corruption) -> Result<Payload, SimError> {
    if c.modality() != p.modality {
        return Err(SimError::IllegalCorruption {
            corruption: c,
            modality: p.modality,
        });
    }
    let mut out = p.clone();
    if c == Corruption::Translate {
        if p.language != Language::En {
            return Err(SimError::IllegalTranslate(p.language));
        }
        out.language = Language::De;
    }
    out.corruptions.push(c);
    Ok(out)
}

fn remove_corruption(p: &mut Payload, kind: Corruption, params: &SimParams) {
    if p.top() == Some(kind) {
        p.corruptions.pop();
    } else if let Some(i) = p.corruptions.iter().position(|c| *c == kind) {
        // index 0 is the bottom of the stack, so this is the deepest occurrence
        p.corruptions.remove(i);
        p.quality *= params.beta;
    } else {
        p.quality *= params.gamma;
    }
}

/// Applies the simulated behavior `semantic` to `inputs`.
pub fn apply_tool(semantic: SemanticId, inputs: &[Payload], params: &SimParams) -> Result<Payload, SimError> {
    let (sig, out_modality) = semantic.signature();
    if inputs.len() != sig.len() {
        return Err(SimError::ArityMismatch {
            semantic,
            expected: sig.len(),
            got: inputs.len(),
        });
    }
    for (slot, (p, m)) in inputs.iter().zip(sig).enumerate() {
        if p.modality != *m {
            return Err(SimError::ModalityMismatch {
                semantic,
                slot,
                expected: *m,
                got: p.modality,
            });
        }
    }

    if let Some(kind) = semantic.restores() {
        let mut out = inputs[0].clone();
        remove_corruption(&mut out, kind, params);
        return Ok(out);
    }

    if semantic == SemanticId::TranslateEnDe && inputs[0].corruptions.contains(&Corruption::Translate) {
        let mut out = inputs[0].clone();
        remove_corruption(&mut out, Corruption::Translate, params);
        if !out.corruptions.contains(&Corruption::Translate) {
            out.language = Language::En;
        }
        return Ok(out);
    }

    let op = semantic.operator().expect("transform semantics carry an operator");
    let residual: usize = inputs.iter().map(Payload::residuals).sum();
    let base: f64 = inputs.iter().map(|p| p.quality).product();
    let quality = base * params.gamma.powi(residual as i32);
    let language = match semantic {
        SemanticId::TranslateEnDe => {
            if inputs[0].language != Language::En {
                return Err(SimError::LanguageGuard(inputs[0].language));
            }
            Language::De
        }
        SemanticId::Summarize | SemanticId::Sentiment => inputs[0].language,
        SemanticId::Qa | SemanticId::Vqa => inputs[1].language,
        SemanticId::Classify | SemanticId::Detect | SemanticId::Caption => Language::En,
        SemanticId::Generate => Language::None,
        _ => unreachable!("restorations handled above"),
    };
    Ok(Payload {
        modality: out_modality,
        expr: Expr::op(op, inputs.iter().map(|p| p.expr.clone()).collect()),
        language,
        corruptions: Vec::new(),
        quality,
    })
}

/// Multiset Jaccard similarity of the symbols of two trees.
pub fn structural_similarity(a: &Expr, b: &Expr) -> f64 {
    if a == b {
        return 1.0;
    }
    let sa = a.symbols();
    let sb = b.symbols();
    let mut inter = 0usize;
    let mut union = 0usize;
    let keys: std::collections::BTreeSet<&str> = sa.keys().chain(sb.keys()).copied().collect();
    for k in keys {
        let x = sa.get(k).copied().unwrap_or(0);
        let y = sb.get(k).copied().unwrap_or(0);
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Symbolic stand-in for embedding similarity between an output and its reference.
pub fn similarity(out: &Payload, reference: &Payload, params: &SimParams) -> Score {
    if out.modality != reference.modality {
        return Score::ZERO;
    }
    let w_struct = structural_similarity(&out.expr, &reference.expr);
    let w_lang = if out.language == reference.language {
        1.0
    } else {
        params.language_mismatch
    };
    let w_quality = out.quality * params.gamma.powi(out.residuals() as i32);
    Score::new(w_struct * w_lang * w_quality)
}
