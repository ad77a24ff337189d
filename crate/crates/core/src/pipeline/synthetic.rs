//! Labeled synthetic corpora with planted contamination.
//!
//! Image embeddings lie on short arcs, one arc per topic, each in its own
//! pair of axes, so embeddings from different topics are exactly orthogonal.
//! The last two axes hold the digit records, which no downstream task covers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_embeddings, write_metadata, EmbeddingMatrix, SampleRecord, Uid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Clean,
    /// Highest-scored record of its topic; must survive every stage.
    Sentinel,
    /// First copy of an exact-duplicate group in ingest order.
    DuplicateOriginal,
    /// Later copy of an exact-duplicate group.
    DuplicateCopy,
    NonEnglish,
    BadAspect,
    HighFace,
    LowScore,
    Digit,
}

impl Label {
    /// Labels every curated output must exclude.
    pub fn is_violation(self) -> bool {
        matches!(
            self,
            Label::DuplicateCopy | Label::NonEnglish | Label::BadAspect | Label::HighFace | Label::LowScore
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub records: usize,
    pub dim: usize,
    pub duplicate_groups: usize,
    pub max_group_size: usize,
    pub non_english: usize,
    pub bad_aspect: usize,
    pub high_face: usize,
    pub low_score: usize,
    pub digit: usize,
    pub tasks: usize,
    pub task_images: usize,
    /// Half-width of each topic's arc, in radians.
    pub arc: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            records: 10_000,
            dim: 64,
            duplicate_groups: 300,
            max_group_size: 3,
            non_english: 200,
            bad_aspect: 150,
            high_face: 100,
            low_score: 500,
            digit: 50,
            tasks: 3,
            task_images: 600,
            arc: PI / 6.0,
        }
    }
}

impl SyntheticSpec {
    /// Topics available after reserving the digit axes.
    pub fn topics(&self) -> usize {
        (self.dim - 2) / 2
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 4 || self.dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("dim must be even and >= 4, got {}", self.dim)));
        }
        if self.max_group_size < 2 {
            return Err(Error::InvalidArgument("max_group_size must be >= 2".into()));
        }
        let planted = self.duplicate_groups * self.max_group_size
            + self.non_english
            + self.bad_aspect
            + self.high_face
            + self.low_score
            + self.digit
            + self.topics();
        if planted > self.records {
            return Err(Error::InvalidArgument(format!(
                "{} records cannot hold up to {planted} planted ones",
                self.records
            )));
        }
        if !(self.arc > 0.0 && self.arc < PI / 4.0) {
            return Err(Error::InvalidArgument("arc must lie in (0, pi/4)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    /// In ingest order; `embedding_row` indexes `embeddings`.
    pub records: Vec<SampleRecord>,
    pub embeddings: EmbeddingMatrix,
    pub labels: BTreeMap<Uid, Label>,
    pub tasks: Vec<(String, EmbeddingMatrix)>,
}

impl SyntheticCorpus {
    pub fn with_label(&self, label: Label) -> impl Iterator<Item = Uid> + '_ {
        self.labels.iter().filter(move |(_, &l)| l == label).map(|(&u, _)| u)
    }

    pub fn violations(&self) -> impl Iterator<Item = Uid> + '_ {
        self.labels.iter().filter(|(_, l)| l.is_violation()).map(|(&u, _)| u)
    }
}

struct Draft {
    label: Label,
    text: String,
    embedding: Vec<f32>,
    record: SampleRecord,
}

const WORDS: [&str; 24] = [
    "red", "small", "wooden", "old", "bright", "quiet", "city", "river", "garden", "kitchen", "mountain", "street",
    "dog", "bicycle", "lamp", "chair", "window", "boat", "market", "bridge", "forest", "table", "train", "cup",
];

fn arc_point(rng: &mut ChaCha8Rng, dim: usize, axis: usize, arc: f64, angle: Option<f64>) -> Vec<f32> {
    let theta = angle.unwrap_or_else(|| rng.gen_range(-arc..=arc));
    let r = rng.gen_range(0.97..1.03);
    let mut v = vec![0.0f32; dim];
    v[axis] = (r * theta.cos()) as f32;
    v[axis + 1] = (r * theta.sin()) as f32;
    v
}

fn caption(rng: &mut ChaCha8Rng, serial: usize) -> String {
    let w: Vec<&str> = (0..3).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
    format!("a {} {} near the {} number {serial}", w[0], w[1], w[2])
}

fn clean_record(rng: &mut ChaCha8Rng, text: &str, score: f64) -> SampleRecord {
    let (w, h) = *[(640, 480), (480, 640), (800, 800), (1024, 576)].choose(rng).expect("non-empty");
    let mut r = SampleRecord::new(Uid(0), text, w, h);
    r.face_area_ratio = Some(rng.gen_range(0.0..0.3));
    r.pos_tags = Some(vec!["DET".into(), "ADJ".into(), "NOUN".into(), "ADP".into(), "NOUN".into()]);
    r.lang_scores = Some(BTreeMap::from([("de".to_string(), 0.02), ("en".to_string(), 0.95)]));
    let clip = score + rng.gen_range(-0.02..0.02);
    r.clip_score = Some(clip);
    r.flipped_clip_score = Some(score);
    r.itm_score = Some(rng.gen_range(0.5..1.0));
    r.digit_flag = Some(false);
    r
}

/// Generates a corpus with exactly `spec.records` records.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = spec.topics();
    let digit_axis = spec.dim - 2;
    let mut drafts: Vec<Draft> = Vec::with_capacity(spec.records);
    let mut serial = 0usize;
    let mut next_text = |rng: &mut ChaCha8Rng| {
        serial += 1;
        caption(rng, serial)
    };

    for t in 0..topics {
        let text = next_text(&mut rng);
        let score = rng.gen_range(0.6..0.7);
        let record = clean_record(&mut rng, &text, score);
        let embedding = arc_point(&mut rng, spec.dim, 2 * t, spec.arc, Some(0.0));
        drafts.push(Draft { label: Label::Sentinel, text, embedding, record });
    }
    for _ in 0..spec.digit {
        let text = next_text(&mut rng);
        let score = rng.gen_range(0.25..0.45);
        let mut record = clean_record(&mut rng, &text, score);
        record.digit_flag = Some(true);
        let embedding = arc_point(&mut rng, spec.dim, digit_axis, spec.arc, None);
        drafts.push(Draft { label: Label::Digit, text, embedding, record });
    }
    let mut group_of: Vec<Option<usize>> = Vec::new();
    let mut used = drafts.len();
    for g in 0..spec.duplicate_groups {
        let size = rng.gen_range(2..=spec.max_group_size);
        let text = next_text(&mut rng);
        let score = rng.gen_range(0.25..0.45);
        let base = clean_record(&mut rng, &text, score);
        let axis = 2 * rng.gen_range(0..topics);
        let embedding = arc_point(&mut rng, spec.dim, axis, spec.arc, None);
        for _ in 0..size {
            drafts.push(Draft {
                label: Label::DuplicateCopy,
                text: text.clone(),
                embedding: embedding.clone(),
                record: base.clone(),
            });
            group_of.resize(drafts.len(), None);
            group_of[drafts.len() - 1] = Some(g);
        }
        used += size;
    }
    let planted = [
        (Label::NonEnglish, spec.non_english),
        (Label::BadAspect, spec.bad_aspect),
        (Label::HighFace, spec.high_face),
        (Label::LowScore, spec.low_score),
    ];
    let background = spec.records - used - planted.iter().map(|p| p.1).sum::<usize>();
    let kinds = planted.into_iter().chain([(Label::Clean, background)]);
    for (label, count) in kinds {
        for _ in 0..count {
            let text = next_text(&mut rng);
            let score = rng.gen_range(0.2..0.45);
            let mut record = clean_record(&mut rng, &text, score);
            match label {
                Label::NonEnglish => {
                    record.lang_scores = Some(BTreeMap::from([("en".to_string(), 0.1), ("fr".to_string(), 0.85)]));
                }
                Label::BadAspect => {
                    let (w, h) = if rng.gen_bool(0.5) { (1000, 200) } else { (150, 600) };
                    record.image_width = w;
                    record.image_height = h;
                }
                Label::HighFace => record.face_area_ratio = Some(rng.gen_range(0.5..0.9)),
                Label::LowScore => {
                    let s = rng.gen_range(0.02..0.18);
                    record.flipped_clip_score = Some(s);
                    record.clip_score = Some(s);
                }
                _ => {}
            }
            let axis = 2 * rng.gen_range(0..topics);
            let embedding = arc_point(&mut rng, spec.dim, axis, spec.arc, None);
            drafts.push(Draft { label, text, embedding, record });
        }
    }
    group_of.resize(drafts.len(), None);

    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.shuffle(&mut rng);
    let mut seen_groups = vec![false; spec.duplicate_groups];
    let mut records = Vec::with_capacity(drafts.len());
    let mut data = Vec::with_capacity(drafts.len() * spec.dim);
    let mut uids = Vec::with_capacity(drafts.len());
    let mut labels = BTreeMap::new();
    for (row, &i) in order.iter().enumerate() {
        let d = &drafts[i];
        let uid = loop {
            let u = Uid(rng.gen());
            if !labels.contains_key(&u) {
                break u;
            }
        };
        let mut label = d.label;
        if let Some(g) = group_of[i] {
            if !seen_groups[g] {
                seen_groups[g] = true;
                label = Label::DuplicateOriginal;
            }
        }
        let mut record = d.record.clone();
        record.uid = uid;
        record.text = d.text.clone();
        record.embedding_row = Some(row);
        records.push(record);
        data.extend_from_slice(&d.embedding);
        uids.push(uid);
        labels.insert(uid, label);
    }
    let embeddings = EmbeddingMatrix::new(spec.dim, data, uids)?;

    let mut tasks = Vec::with_capacity(spec.tasks);
    let mut task_uid = 1u128;
    for k in 0..spec.tasks {
        let mut rows = Vec::with_capacity(spec.task_images * spec.dim);
        let mut ids = Vec::with_capacity(spec.task_images);
        for j in 0..spec.task_images {
            // Every topic is covered by every task; the digit axes by none.
            let topic = (j + k) % topics;
            rows.extend(arc_point(&mut rng, spec.dim, 2 * topic, spec.arc, None));
            ids.push(Uid(task_uid));
            task_uid += 1;
        }
        tasks.push((format!("task_{k}"), EmbeddingMatrix::new(spec.dim, rows, ids)?));
    }
    Ok(SyntheticCorpus {
        records,
        embeddings,
        labels,
        tasks,
    })
}

#[derive(Serialize)]
struct LabelLine {
    uid: Uid,
    label: Label,
}

/// Writes the corpus, its labels and a desk-scale `config.toml` into `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("tasks")).map_err(|e| Error::io(dir, e))?;
    write_metadata(&dir.join("metadata.jsonl"), &corpus.records)?;
    write_embeddings(&dir.join("embeddings"), &corpus.embeddings)?;
    let mut manifest = String::new();
    for (name, m) in &corpus.tasks {
        write_embeddings(&dir.join("tasks").join(name), m)?;
        manifest.push_str(&format!("{name}\ttasks/{name}\n"));
    }
    let path = dir.join("tasks.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

    let mut labels = String::new();
    for (&uid, &label) in &corpus.labels {
        let line = serde_json::to_string(&LabelLine { uid, label }).map_err(|e| Error::Data(e.to_string()))?;
        labels.push_str(&line);
        labels.push('\n');
    }
    let path = dir.join("labels.jsonl");
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;

    let config = super::config::DESK_SCALE
        .replace(
            "declared_columns = [\"embedding_row\", \"flipped_clip_score\", \"digit_flag\"]",
            "declared_columns = [\"embedding_row\", \"flipped_clip_score\", \"clip_score\", \"itm_score\", \
             \"digit_flag\", \"face_area_ratio\", \"pos_tags\", \"lang_scores\"]",
        )
        .replace("embedding_dim = 64", &format!("embedding_dim = {}", corpus.embeddings.dim()));
    let path = dir.join("config.toml");
    std::fs::write(&path, config).map_err(|e| Error::io(&path, e))
}

/// Reads `labels.jsonl` as written by [`write_corpus`].
pub fn read_labels(path: &Path) -> Result<BTreeMap<Uid, Label>> {
    #[derive(Deserialize)]
    struct Line {
        uid: Uid,
        label: Label,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: Line =
                serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Ok((line.uid, line.label))
        })
        .collect()
}
