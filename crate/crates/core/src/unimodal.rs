//! Single-modality rules: caption rules (PoS patterns, high-frequency texts,
//! bad patterns, language, optional heuristics) and image rules (aspect
//! ratio, face area).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};

/// Why a record was dropped by a single-modality rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleReason {
    PosPattern,
    HighFrequency,
    BadPattern,
    Language,
    WordCount,
    CharCount,
    AvgWordLength,
    AlphaRatio,
    UniqueTokenRatio,
    Synset,
    Aspect,
    Face,
}

impl RuleReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleReason::PosPattern => "pos_pattern",
            RuleReason::HighFrequency => "highfreq",
            RuleReason::BadPattern => "bad_pattern",
            RuleReason::Language => "language",
            RuleReason::WordCount => "word_count",
            RuleReason::CharCount => "char_count",
            RuleReason::AvgWordLength => "avg_word_length",
            RuleReason::AlphaRatio => "alpha_ratio",
            RuleReason::UniqueTokenRatio => "unique_token_ratio",
            RuleReason::Synset => "synset",
            RuleReason::Aspect => "aspect",
            RuleReason::Face => "face",
        }
    }
}

impl fmt::Display for RuleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop(RuleReason),
}

impl Verdict {
    pub fn is_keep(self) -> bool {
        self == Verdict::Keep
    }
}

/// Sorted, de-duplicated tags joined with `,`.
pub fn pos_pattern<S: AsRef<str>>(tags: &[S]) -> Result<String> {
    if tags.is_empty() {
        return Err(Error::InvalidArgument("empty tag list".into()));
    }
    let set: BTreeSet<&str> = tags.iter().map(|t| t.as_ref().trim()).collect();
    Ok(set.into_iter().collect::<Vec<_>>().join(","))
}

/// Heuristics that were evaluated but are off unless configured.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionalTextRules {
    /// Drop when the caption has fewer whitespace-separated words.
    pub min_word_count: Option<usize>,
    /// Drop when the caption has fewer characters.
    pub min_char_count: Option<usize>,
    /// Drop unless the mean word length is strictly above this.
    pub min_avg_word_length: Option<f64>,
    /// Drop unless `tokens with an alphabetic char / tokens` is strictly above this.
    pub min_alpha_token_ratio: Option<f64>,
    /// Drop unless `unique tokens / tokens` is strictly above this.
    pub min_unique_token_ratio: Option<f64>,
    /// Drop captions sharing no (lowercased) token with this list.
    pub synsets: Option<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct TextRuleConfig {
    pub pos_blocklist: HashSet<String>,
    pub highfreq_min_count: u64,
    pub highfreq_blocklist: HashSet<String>,
    pub bad_patterns: Vec<Regex>,
    /// Captions whose English score is below this may be dropped as non-English.
    pub english_threshold: Option<f64>,
    /// Per-language removal thresholds for non-English languages.
    pub lang_thresholds: BTreeMap<String, f64>,
    /// Threshold for non-English languages missing from `lang_thresholds`;
    /// `None` means such languages never trigger removal.
    pub default_lang_threshold: Option<f64>,
    pub bad_pattern_score_cap: f64,
    pub optional: OptionalTextRules,
}

impl Default for TextRuleConfig {
    fn default() -> Self {
        TextRuleConfig {
            pos_blocklist: HashSet::new(),
            highfreq_min_count: 1000,
            highfreq_blocklist: HashSet::new(),
            bad_patterns: Vec::new(),
            english_threshold: None,
            lang_thresholds: BTreeMap::new(),
            default_lang_threshold: None,
            bad_pattern_score_cap: 0.2,
            optional: OptionalTextRules::default(),
        }
    }
}

impl TextRuleConfig {
    pub fn with_pos_patterns<I, S>(mut self, patterns: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for p in patterns {
            let tags: Vec<&str> = p.as_ref().split(',').collect();
            self.pos_blocklist.insert(pos_pattern(&tags)?);
        }
        Ok(self)
    }

    pub fn with_bad_patterns<I, S>(mut self, patterns: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for p in patterns {
            let re = Regex::new(p.as_ref())
                .map_err(|e| Error::Config(format!("bad pattern {:?}: {e}", p.as_ref())))?;
            self.bad_patterns.push(re);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        if let Some(t) = self.english_threshold {
            unit("english_threshold", t)?;
        }
        if let Some(t) = self.default_lang_threshold {
            unit("default_lang_threshold", t)?;
        }
        for (lang, &t) in &self.lang_thresholds {
            unit(&format!("lang_thresholds.{lang}"), t)?;
        }
        unit("bad_pattern_score_cap", self.bad_pattern_score_cap)?;
        if let Some(t) = self.optional.min_alpha_token_ratio {
            unit("min_alpha_token_ratio", t)?;
        }
        if let Some(t) = self.optional.min_unique_token_ratio {
            unit("min_unique_token_ratio", t)?;
        }
        Ok(())
    }

    fn language_rule_active(&self) -> bool {
        !self.lang_thresholds.is_empty() || self.default_lang_threshold.is_some()
    }
}

/// Applies the caption rules in fixed order and stops at the first failure.
/// Rules whose annotation is absent (`pos_tags`, `lang_scores`) are skipped.
pub fn apply_text_rules(record: &SampleRecord, config: &TextRuleConfig) -> Verdict {
    match &record.pos_tags {
        Some(tags) if !config.pos_blocklist.is_empty() && !tags.is_empty() => {
            if let Ok(p) = pos_pattern(tags) {
                if config.pos_blocklist.contains(&p) {
                    return Verdict::Drop(RuleReason::PosPattern);
                }
            }
        }
        None if !config.pos_blocklist.is_empty() => {
            log::debug!("{}: no pos_tags, PoS rule skipped", record.uid);
        }
        _ => {}
    }
    if config.highfreq_blocklist.contains(&record.text) {
        return Verdict::Drop(RuleReason::HighFrequency);
    }
    if config.bad_patterns.iter().any(|re| re.is_match(&record.text)) {
        return Verdict::Drop(RuleReason::BadPattern);
    }
    if config.language_rule_active() {
        match &record.lang_scores {
            Some(scores) => {
                if is_non_english(scores, config) {
                    return Verdict::Drop(RuleReason::Language);
                }
            }
            None => log::debug!("{}: no lang_scores, language rule skipped", record.uid),
        }
    }
    if let Some(reason) = optional_rules(&record.text, &config.optional) {
        return Verdict::Drop(reason);
    }
    Verdict::Keep
}

fn is_non_english(scores: &BTreeMap<String, f64>, config: &TextRuleConfig) -> bool {
    let english = scores.get("en").copied().unwrap_or(0.0);
    let english_low = config.english_threshold.is_none_or(|t| english < t);
    let foreign_high = scores.iter().any(|(lang, &s)| {
        lang != "en"
            && config
                .lang_thresholds
                .get(lang)
                .copied()
                .or(config.default_lang_threshold)
                .is_some_and(|t| s >= t)
    });
    english_low && foreign_high
}

fn optional_rules(text: &str, rules: &OptionalTextRules) -> Option<RuleReason> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let n = tokens.len();
    if let Some(min) = rules.min_word_count {
        if n < min {
            return Some(RuleReason::WordCount);
        }
    }
    if let Some(min) = rules.min_char_count {
        if text.chars().count() < min {
            return Some(RuleReason::CharCount);
        }
    }
    if let Some(min) = rules.min_avg_word_length {
        let chars: usize = tokens.iter().map(|t| t.chars().count()).sum();
        let avg = if n == 0 { 0.0 } else { chars as f64 / n as f64 };
        if avg <= min {
            return Some(RuleReason::AvgWordLength);
        }
    }
    if let Some(min) = rules.min_alpha_token_ratio {
        let alpha = tokens.iter().filter(|t| t.chars().any(char::is_alphabetic)).count();
        let ratio = if n == 0 { 0.0 } else { alpha as f64 / n as f64 };
        if ratio <= min {
            return Some(RuleReason::AlphaRatio);
        }
    }
    if let Some(min) = rules.min_unique_token_ratio {
        let unique: HashSet<&str> = tokens.iter().copied().collect();
        let ratio = if n == 0 { 0.0 } else { unique.len() as f64 / n as f64 };
        if ratio <= min {
            return Some(RuleReason::UniqueTokenRatio);
        }
    }
    if let Some(synsets) = &rules.synsets {
        let vocab: HashSet<String> = synsets.iter().map(|s| s.to_lowercase()).collect();
        let hit = tokens.iter().any(|t| {
            let t = t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            vocab.contains(&t)
        });
        if !hit {
            return Some(RuleReason::Synset);
        }
    }
    None
}

/// Exact caption counts above `min_count`, most frequent first (ties by text).
/// The output is a review list; nothing is removed automatically.
pub fn high_frequency_texts<'a, I>(records: I, min_count: u64) -> Vec<(String, u64)>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in records {
        *counts.entry(r.text.as_str()).or_default() += 1;
    }
    let mut out: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c > min_count)
        .map(|(t, c)| (t.to_string(), c))
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Captions whose language scores are all below `cap`: the pool reviewed
/// when writing bad-pattern rules.
pub fn bad_pattern_review_candidates<'a, I>(records: I, cap: f64) -> Vec<&'a SampleRecord>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    records
        .into_iter()
        .filter(|r| r.lang_scores.as_ref().is_some_and(|s| s.values().all(|&v| v < cap)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageRuleConfig {
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub max_face_ratio: f64,
}

impl Default for ImageRuleConfig {
    fn default() -> Self {
        ImageRuleConfig {
            min_aspect: 0.33,
            max_aspect: 3.33,
            max_face_ratio: 0.4,
        }
    }
}

impl ImageRuleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_aspect > 0.0 && self.min_aspect <= self.max_aspect) {
            return Err(Error::Config(format!(
                "aspect bounds [{}, {}] are invalid",
                self.min_aspect, self.max_aspect
            )));
        }
        if !(0.0..=1.0).contains(&self.max_face_ratio) {
            return Err(Error::Config(format!("max_face_ratio = {} must lie in [0, 1]", self.max_face_ratio)));
        }
        Ok(())
    }
}

/// Aspect ratio `w / h` must lie inside the inclusive bounds; the face ratio
/// must not exceed its cap. A missing face ratio skips the face rule.
pub fn apply_image_rules(record: &SampleRecord, config: &ImageRuleConfig) -> Verdict {
    let aspect = record.image_width as f64 / record.image_height as f64;
    if aspect < config.min_aspect || aspect > config.max_aspect {
        return Verdict::Drop(RuleReason::Aspect);
    }
    if record.face_area_ratio.is_some_and(|r| r > config.max_face_ratio) {
        return Verdict::Drop(RuleReason::Face);
    }
    Verdict::Keep
}

/// One entry per non-empty line, taken verbatim (minus the line ending).
pub fn load_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Regex rules: one pattern per line, `#` starts a comment line.
pub fn load_patterns(path: &Path) -> Result<Vec<String>> {
    Ok(load_list(path)?
        .into_iter()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect())
}
