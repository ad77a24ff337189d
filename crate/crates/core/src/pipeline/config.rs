use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::ann::{DedupConfig, IvfPqParams};
use crate::corpus::{ColumnSchema, ScoreColumn};
use crate::crossmodal::CrossModalConfig;
use crate::error::{Error, Result};
use crate::unimodal::{load_list, load_patterns, ImageRuleConfig, OptionalTextRules, TextRuleConfig};

/// Web-scale settings (production index, 100k clusters).
pub const PAPER_DEFAULTS: &str = include_str!("../../presets/paper-defaults.toml");
/// The same thresholds with index and cluster sizes suited to ~10^4 records.
pub const DESK_SCALE: &str = include_str!("../../presets/desk-scale.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub metadata: PathBuf,
    /// Prefix of `<prefix>.f32` / `<prefix>.uids`.
    pub embeddings: PathBuf,
    pub embedding_dim: usize,
    /// Text embeddings for the joint-embedding mode, same layout and uid order.
    #[serde(default)]
    pub text_embeddings: Option<PathBuf>,
    #[serde(default)]
    pub text_embedding_dim: Option<usize>,
    /// `name<TAB>prefix` per downstream task.
    #[serde(default)]
    pub task_manifest: Option<PathBuf>,
    /// Optional columns promised on every metadata line.
    #[serde(default)]
    pub declared_columns: BTreeSet<String>,
    #[serde(default = "default_reject_rate")]
    pub max_reject_rate: f64,
}

fn default_reject_rate() -> f64 {
    0.05
}

/// Which steps run. The order is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub near_dup: bool,
    pub text_rules: bool,
    pub image_rules: bool,
    pub clip_threshold: bool,
    pub itm_threshold: bool,
    pub cids: bool,
    pub quality_duplication: bool,
    pub semantic_dedup: bool,
    pub digit_merge: bool,
    pub shard_pack: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            near_dup: true,
            text_rules: true,
            image_rules: true,
            clip_threshold: true,
            itm_threshold: true,
            cids: true,
            quality_duplication: true,
            semantic_dedup: true,
            digit_merge: true,
            shard_pack: true,
        }
    }
}

impl Stages {
    pub fn none() -> Self {
        Stages {
            near_dup: false,
            text_rules: false,
            image_rules: false,
            clip_threshold: false,
            itm_threshold: false,
            cids: false,
            quality_duplication: false,
            semantic_dedup: false,
            digit_merge: false,
            shard_pack: false,
        }
    }
}

/// Caption rule settings as written in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    /// Inline PoS patterns, tags separated by `,`.
    pub pos_patterns: Vec<String>,
    pub pos_blocklist_file: Option<PathBuf>,
    pub highfreq_min_count: u64,
    pub highfreq_texts: Vec<String>,
    pub highfreq_blocklist_file: Option<PathBuf>,
    pub bad_patterns: Vec<String>,
    pub bad_patterns_file: Option<PathBuf>,
    pub english_threshold: Option<f64>,
    pub default_lang_threshold: Option<f64>,
    pub lang_thresholds: BTreeMap<String, f64>,
    pub bad_pattern_score_cap: f64,
    pub optional: OptionalTextRules,
}

impl Default for TextSection {
    fn default() -> Self {
        let rules = TextRuleConfig::default();
        TextSection {
            pos_patterns: Vec::new(),
            pos_blocklist_file: None,
            highfreq_min_count: rules.highfreq_min_count,
            highfreq_texts: Vec::new(),
            highfreq_blocklist_file: None,
            bad_patterns: Vec::new(),
            bad_patterns_file: None,
            english_threshold: None,
            default_lang_threshold: None,
            lang_thresholds: BTreeMap::new(),
            bad_pattern_score_cap: rules.bad_pattern_score_cap,
            optional: OptionalTextRules::default(),
        }
    }
}

impl TextSection {
    /// Compiles the rule set, reading any referenced list files.
    pub fn build(&self) -> Result<TextRuleConfig> {
        let mut pos = self.pos_patterns.clone();
        if let Some(p) = &self.pos_blocklist_file {
            pos.extend(load_patterns(p)?);
        }
        let mut highfreq = self.highfreq_texts.clone();
        if let Some(p) = &self.highfreq_blocklist_file {
            highfreq.extend(load_list(p)?);
        }
        let mut patterns = self.bad_patterns.clone();
        if let Some(p) = &self.bad_patterns_file {
            patterns.extend(load_patterns(p)?);
        }
        let rules = TextRuleConfig {
            highfreq_min_count: self.highfreq_min_count,
            highfreq_blocklist: highfreq.into_iter().collect(),
            english_threshold: self.english_threshold,
            lang_thresholds: self.lang_thresholds.clone(),
            default_lang_threshold: self.default_lang_threshold,
            bad_pattern_score_cap: self.bad_pattern_score_cap,
            optional: self.optional.clone(),
            ..Default::default()
        }
        .with_pos_patterns(pos)
        .map_err(|e| Error::Config(e.to_string()))?
        .with_bad_patterns(patterns)?;
        rules.validate()?;
        Ok(rules)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
    /// Keep per-stage selections and drop lists under `stages/`.
    #[serde(default = "default_true")]
    pub persist_stages: bool,
    pub inputs: Inputs,
    #[serde(default)]
    pub stages: Stages,
    /// Index parameters; sized from the corpus when absent.
    #[serde(default)]
    pub ann: Option<IvfPqParams>,
    #[serde(default)]
    pub dedup: DedupConfig,
    #[serde(default)]
    pub text: TextSection,
    #[serde(default)]
    pub image: ImageRuleConfig,
    #[serde(default)]
    pub crossmodal: CrossModalConfig,
    #[serde(default)]
    pub align: AlignConfig,
}

fn default_shard_size() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

impl PipelineConfig {
    /// Parses TOML; relative paths stay relative until [`resolve_paths`](Self::resolve_paths).
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.inputs.metadata);
        fix(&mut self.inputs.embeddings);
        for p in [
            self.inputs.text_embeddings.as_mut(),
            self.inputs.task_manifest.as_mut(),
            self.text.pos_blocklist_file.as_mut(),
            self.text.highfreq_blocklist_file.as_mut(),
            self.text.bad_patterns_file.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Columns each enabled stage reads from every record.
    pub fn required_columns(&self) -> BTreeSet<String> {
        let s = &self.stages;
        let mut cols = BTreeSet::new();
        let mut need = |c: &str| {
            cols.insert(c.to_string());
        };
        if s.near_dup {
            need("embedding_row");
            need(self.dedup.score_column.name());
        }
        if s.clip_threshold {
            need(self.crossmodal.score_column.name());
        }
        if s.itm_threshold && self.crossmodal.itm_threshold.is_some() {
            need(ScoreColumn::Itm.name());
        }
        if s.cids || s.quality_duplication {
            need("embedding_row");
            need(self.align.score_column.name());
        }
        if s.semantic_dedup {
            need("embedding_row");
            need(self.align.representative_score_column.name());
        }
        if s.digit_merge {
            need("digit_flag");
        }
        cols
    }

    pub fn schema(&self) -> ColumnSchema {
        self.inputs
            .declared_columns
            .iter()
            .fold(ColumnSchema::base(), |s, c| s.with(c))
    }

    /// Checks values, referenced files and that every column an enabled stage
    /// needs is declared present.
    pub fn validate(&self) -> Result<()> {
        self.dedup.validate()?;
        self.image.validate()?;
        self.crossmodal.validate()?;
        self.align.validate()?;
        self.text.build()?;
        if self.shard_size == 0 {
            return Err(Error::Config("shard_size must be >= 1".into()));
        }
        if self.inputs.embedding_dim == 0 {
            return Err(Error::Config("inputs.embedding_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.inputs.max_reject_rate) {
            return Err(Error::Config("inputs.max_reject_rate must lie in [0, 1]".into()));
        }
        if let Some(p) = &self.ann {
            if p.nlist == 0 || p.m == 0 || p.nprobe == 0 || p.k_neighbors == 0 || !(1..=16).contains(&p.nbits) {
                return Err(Error::Config(format!("invalid ann parameters {p:?}")));
            }
            if self.inputs.embedding_dim % p.m != 0 {
                return Err(Error::Config(format!(
                    "embedding_dim {} is not divisible by ann.m = {}",
                    self.inputs.embedding_dim, p.m
                )));
            }
        }
        let known: BTreeSet<&str> = [
            "face_area_ratio",
            "pos_tags",
            "lang_scores",
            "clip_score",
            "flipped_clip_score",
            "itm_score",
            "digit_flag",
            "embedding_row",
        ]
        .into();
        for c in &self.inputs.declared_columns {
            if !known.contains(c.as_str()) {
                return Err(Error::Config(format!("unknown declared column `{c}`")));
            }
        }
        let missing: Vec<String> = self
            .required_columns()
            .into_iter()
            .filter(|c| !self.inputs.declared_columns.contains(c))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "enabled stages need columns not listed in inputs.declared_columns: {}",
                missing.join(", ")
            )));
        }

        let mut files = vec![self.inputs.metadata.clone()];
        let (f, u) = crate::corpus::embedding_paths(&self.inputs.embeddings);
        files.extend([f, u]);
        if self.align.joint_embedding && self.stages.semantic_dedup {
            let Some(t) = &self.inputs.text_embeddings else {
                return Err(Error::Config("align.joint_embedding needs inputs.text_embeddings".into()));
            };
            if self.inputs.text_embedding_dim.is_none() {
                return Err(Error::Config("align.joint_embedding needs inputs.text_embedding_dim".into()));
            }
            let (f, u) = crate::corpus::embedding_paths(t);
            files.extend([f, u]);
        }
        if self.stages.cids {
            if let Some(m) = &self.inputs.task_manifest {
                files.push(m.clone());
            }
        }
        files.extend(
            [
                &self.text.pos_blocklist_file,
                &self.text.highfreq_blocklist_file,
                &self.text.bad_patterns_file,
            ]
            .into_iter()
            .flatten()
            .cloned(),
        );
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", f.display())));
            }
        }
        Ok(())
    }
}
