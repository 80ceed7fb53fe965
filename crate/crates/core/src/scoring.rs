//! Answer scoring: rule-based type classification, normalization with
//! unit-variant expansion, Exact Match for short answer types, ANLS for
//! long ones.
//!
//! Gold answers expand into accepted surface variants ("9 cm" admits "9",
//! "9cm", "cm 9", ...), and unit tolerance runs both ways: a prediction that
//! attaches a recognized unit to the right number matches a bare-number gold
//! ("9 cm" vs "9"), while conflicting units never match ("9 m" vs "9 cm").
//! Short types (number, date, identifier, phrase) score by exact match; long
//! types (address, sentence) score by Average Normalized Levenshtein
//! Similarity with a configurable threshold.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoreError {
    #[error("answer is empty after normalization")]
    EmptyAnswer,
    #[error("record '{id}' has no gold answers")]
    NoGolds { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Number,
    Date,
    Identifier,
    Phrase,
    Address,
    Sentence,
}

impl AnswerType {
    pub fn label(self) -> &'static str {
        match self {
            AnswerType::Number => "number",
            AnswerType::Date => "date",
            AnswerType::Identifier => "identifier",
            AnswerType::Phrase => "phrase",
            AnswerType::Address => "address",
            AnswerType::Sentence => "sentence",
        }
    }
}

impl std::str::FromStr for AnswerType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "number" => Ok(AnswerType::Number),
            "date" => Ok(AnswerType::Date),
            "identifier" => Ok(AnswerType::Identifier),
            "phrase" => Ok(AnswerType::Phrase),
            "address" => Ok(AnswerType::Address),
            "sentence" => Ok(AnswerType::Sentence),
            other => Err(format!("unknown answer type '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Em,
    Anls,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Em => "EM",
            Metric::Anls => "ANLS",
        }
    }
}

/// One scored prediction. `matched` carries the gold variant (EM) or the
/// best-similarity gold (ANLS) when the score is nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub id: String,
    pub answer_type: AnswerType,
    pub metric: Metric,
    pub score: f64,
    pub matched: Option<String>,
}

/// A model prediction as read from a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

/// Unit tokens recognized when splitting number+unit answers. Matching runs
/// over normalized (lowercased) text; list is editable via configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitLexicon {
    units: BTreeSet<String>,
}

impl UnitLexicon {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            units: tokens.into_iter().map(|t| t.into().to_lowercase()).collect(),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.units.contains(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.units.iter().map(String::as_str)
    }
}

impl Default for UnitLexicon {
    fn default() -> Self {
        Self::from_tokens([
            // currency
            "$", "€", "£", "¥", "¢", "₹", "usd", "eur", "gbp", "jpy", "cents",
            // proportion
            "%", "percent", "pct",
            // length
            "mm", "cm", "m", "km", "in", "ft", "yd", "mi", "inches", "feet", "miles",
            // mass
            "mg", "g", "kg", "t", "lb", "lbs", "oz", "tons",
            // volume
            "ml", "l", "gal", "liters", "litres",
            // time
            "s", "sec", "secs", "min", "mins", "h", "hr", "hrs", "days", "weeks",
            "months", "years",
            // temperature
            "°c", "°f",
            // data and power
            "kb", "mb", "gb", "tb", "w", "kw", "mw", "kwh",
            // speed / area
            "mph", "kmh", "kph", "sqft", "sqm", "m2", "km2", "acres",
        ])
    }
}

/// Scoring knobs: ANLS threshold, the sentence token cutoff used by
/// classification, and the unit lexicon.
#[derive(Debug, Clone)]
pub struct ScoringConfig {
    pub tau: f64,
    pub sentence_tokens: usize,
    pub lexicon: UnitLexicon,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            sentence_tokens: 8,
            lexicon: UnitLexicon::default(),
        }
    }
}

/// Case-fold, trim, collapse runs of whitespace, and strip trailing sentence
/// punctuation. Idempotent.
pub fn normalize(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut prev_space = true; // leading whitespace is dropped
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            if !prev_space {
                out.push(' ');
                prev_space = true;
            }
        } else {
            out.push(ch);
            prev_space = false;
        }
    }
    while out.ends_with([' ', '.', '!', '?', ',', ';', ':']) {
        out.pop();
    }
    out
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?$").unwrap()
    })
}

fn date_res() -> &'static Vec<Regex> {
    static RES: OnceLock<Vec<Regex>> = OnceLock::new();
    RES.get_or_init(|| {
        let month = r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|jun(?:e)?|jul(?:y)?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)";
        [
            r"^\d{4}-\d{1,2}-\d{1,2}$".to_string(),
            r"^\d{1,2}[/.-]\d{1,2}[/.-]\d{2,4}$".to_string(),
            r"^\d{4}[/.]\d{1,2}[/.]\d{1,2}$".to_string(),
            format!(r"^{month}\.? \d{{1,2}}(?:st|nd|rd|th)?(?:,? \d{{2,4}})?$"),
            format!(r"^\d{{1,2}}(?:st|nd|rd|th)? (?:of )?{month}\.?(?:,? \d{{2,4}})?$"),
            format!(r"^{month}\.? \d{{4}}$"),
        ]
        .iter()
        .map(|p| Regex::new(p).unwrap())
        .collect()
    })
}

const ADDRESS_KEYWORDS: &[&str] = &[
    "street", "st", "avenue", "ave", "road", "rd", "boulevard", "blvd", "lane",
    "ln", "drive", "dr", "court", "ct", "plaza", "square", "highway", "hwy",
    "suite", "apt", "floor", "block", "box", "city", "p.o",
];

fn is_numeric_token(token: &str) -> bool {
    number_re().is_match(token)
}

/// Split a normalized answer into (number, unit) if it is a number with an
/// attached or space-separated unit token, (number, None) if bare numeric.
fn split_number_unit(normalized: &str, lexicon: &UnitLexicon) -> Option<(String, Option<String>)> {
    if is_numeric_token(normalized) {
        return Some((normalized.to_string(), None));
    }
    let tokens: Vec<&str> = normalized.split(' ').collect();
    match tokens.as_slice() {
        [num, unit] if is_numeric_token(num) && lexicon.contains(unit) => {
            return Some((num.to_string(), Some(unit.to_string())));
        }
        [unit, num] if lexicon.contains(unit) && is_numeric_token(num) => {
            return Some((num.to_string(), Some(unit.to_string())));
        }
        [single] => {
            // attached forms: "9cm", "193$", "$193", "cm9"
            for (i, _) in single.char_indices().skip(1) {
                let (head, tail) = single.split_at(i);
                if is_numeric_token(head) && lexicon.contains(tail) {
                    return Some((head.to_string(), Some(tail.to_string())));
                }
                if lexicon.contains(head) && is_numeric_token(tail) {
                    return Some((tail.to_string(), Some(head.to_string())));
                }
            }
        }
        _ => {}
    }
    None
}

/// Rule-based answer type. Rules apply in fixed order: date, number,
/// identifier, sentence, address, phrase.
pub fn classify_answer(gold: &str, cfg: &ScoringConfig) -> Result<AnswerType, ScoreError> {
    let norm = normalize(gold);
    if norm.is_empty() {
        return Err(ScoreError::EmptyAnswer);
    }
    if date_res().iter().any(|re| re.is_match(&norm)) {
        return Ok(AnswerType::Date);
    }
    if split_number_unit(&norm, &cfg.lexicon).is_some() {
        return Ok(AnswerType::Number);
    }
    let tokens: Vec<&str> = norm.split(' ').collect();
    if tokens.len() == 1 {
        let t = tokens[0];
        let charset_ok = t
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '-' | '_' | '/' | '#' | '.'));
        if charset_ok && t.chars().any(|c| c.is_ascii_digit()) && t.chars().any(char::is_alphabetic)
        {
            return Ok(AnswerType::Identifier);
        }
    }
    if tokens.len() >= cfg.sentence_tokens {
        return Ok(AnswerType::Sentence);
    }
    if tokens.iter().any(|t| ADDRESS_KEYWORDS.contains(t)) {
        return Ok(AnswerType::Address);
    }
    Ok(AnswerType::Phrase)
}

/// Accepted surface forms of a gold answer, all normalized. A number with a
/// unit expands to the bare number plus spaced and attached orderings; any
/// other answer stays a singleton.
pub fn expand_variants(gold: &str, lexicon: &UnitLexicon) -> BTreeSet<String> {
    let norm = normalize(gold);
    if let Some((num, Some(unit))) = split_number_unit(&norm, lexicon) {
        return BTreeSet::from([
            num.clone(),
            format!("{num} {unit}"),
            format!("{num}{unit}"),
            format!("{unit} {num}"),
            format!("{unit}{num}"),
        ]);
    }
    BTreeSet::from([norm])
}

/// 1 iff the normalized prediction equals any expanded variant of any gold.
pub fn exact_match(pred: &str, golds: &[String], lexicon: &UnitLexicon) -> u8 {
    match matched_variant(pred, golds, lexicon) {
        Some(_) => 1,
        None => 0,
    }
}

fn matched_variant(pred: &str, golds: &[String], lexicon: &UnitLexicon) -> Option<String> {
    let p = normalize(pred);
    if let Some(v) = golds
        .iter()
        .flat_map(|g| expand_variants(g, lexicon))
        .find(|v| *v == p)
    {
        return Some(v);
    }
    // Unit tolerance runs both ways: a prediction that attaches a recognized
    // unit to the right number also matches a bare-number gold ("9 cm" vs
    // "9"). The numeric cores must agree, and when BOTH sides carry a unit
    // the units must agree too -- "9 m" never matches "9 cm".
    let (p_num, p_unit) = split_number_unit(&p, lexicon)?;
    golds.iter().map(|g| normalize(g)).find(|g| {
        split_number_unit(g, lexicon).is_some_and(|(g_num, g_unit)| {
            let units_agree = match (&p_unit, &g_unit) {
                (Some(pu), Some(gu)) => pu == gu,
                _ => true,
            };
            p_num == g_num && units_agree
        })
    })
}

/// Unit-cost edit distance over chars of the strings as given; callers
/// normalize first where the protocol requires it.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity of two already-normalized strings:
/// 1 − distance / max(len); 1 when both are empty.
fn nls(pred: &str, gold: &str) -> f64 {
    let max_len = pred.chars().count().max(gold.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, gold) as f64 / max_len as f64
}

/// ANLS: best per-gold similarity on normalized strings, zeroed below `tau`.
pub fn anls(pred: &str, golds: &[String], tau: f64) -> f64 {
    let p = normalize(pred);
    golds
        .iter()
        .map(|g| {
            let s = nls(&p, &normalize(g));
            if s >= tau {
                s
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Score one prediction against a record's golds. An explicit answer type
/// wins; otherwise the first gold is classified. Types number, date,
/// identifier, and phrase use EM; address and sentence use ANLS.
pub fn score_record(
    id: &str,
    pred: &str,
    golds: &[String],
    declared: Option<AnswerType>,
    cfg: &ScoringConfig,
) -> Result<ScoredAnswer, ScoreError> {
    if golds.is_empty() {
        return Err(ScoreError::NoGolds { id: id.to_string() });
    }
    let answer_type = match declared {
        Some(t) => t,
        None => classify_answer(&golds[0], cfg)?,
    };
    let metric = match answer_type {
        AnswerType::Number | AnswerType::Date | AnswerType::Identifier | AnswerType::Phrase => {
            Metric::Em
        }
        AnswerType::Address | AnswerType::Sentence => Metric::Anls,
    };
    let (score, matched) = match metric {
        Metric::Em => match matched_variant(pred, golds, &cfg.lexicon) {
            Some(v) => (1.0, Some(v)),
            None => (0.0, None),
        },
        Metric::Anls => {
            let p = normalize(pred);
            let best = golds
                .iter()
                .map(|g| {
                    let gn = normalize(g);
                    let s = nls(&p, &gn);
                    (s, gn)
                })
                .max_by(|(s1, _), (s2, _)| s1.total_cmp(s2));
            match best {
                Some((s, g)) if s >= cfg.tau => (s, Some(g)),
                _ => (0.0, None),
            }
        }
    };
    Ok(ScoredAnswer {
        id: id.to_string(),
        answer_type,
        metric,
        score,
        matched,
    })
}
