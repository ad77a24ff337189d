//! Corpus data model: sample records, embedding matrices and selection sets,
//! together with their on-disk formats.
//!
//! * metadata: UTF-8 JSON Lines, one [`SampleRecord`] per line;
//! * embeddings: `<name>.f32` (raw little-endian `f32`, row-major) plus
//!   `<name>.uids` (one hex UID per line, same order as the rows);
//! * selections: `"<uid> <multiplicity>\n"` sorted ascending by UID.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// 128-bit sample identifier, rendered as 32 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Uid(pub u128);

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Uid({self})")
    }
}

impl FromStr for Uid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ok = s.len() == 32 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if !ok {
            return Err(Error::Data(format!(
                "invalid uid {s:?}: expected 32 lowercase hex characters"
            )));
        }
        u128::from_str_radix(s, 16)
            .map(Uid)
            .map_err(|e| Error::Data(format!("invalid uid {s:?}: {e}")))
    }
}

impl From<u128> for Uid {
    fn from(v: u128) -> Self {
        Uid(v)
    }
}

impl Serialize for Uid {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Uid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One image-text pair: caption, image geometry, annotations and model scores.
///
/// Every optional column is left `None` when absent from the input; the stage
/// consuming it decides what a missing value means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub uid: Uid,
    pub text: String,
    pub image_width: u32,
    pub image_height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_area_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang_scores: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flipped_clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itm_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digit_flag: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_row: Option<usize>,
}

impl SampleRecord {
    /// A record with only the required columns filled in.
    pub fn new(uid: Uid, text: impl Into<String>, image_width: u32, image_height: u32) -> Self {
        SampleRecord {
            uid,
            text: text.into(),
            image_width,
            image_height,
            face_area_ratio: None,
            pos_tags: None,
            lang_scores: None,
            clip_score: None,
            flipped_clip_score: None,
            itm_score: None,
            digit_flag: None,
            embedding_row: None,
        }
    }

    pub fn score(&self, column: ScoreColumn) -> Option<f64> {
        match column {
            ScoreColumn::Clip => self.clip_score,
            ScoreColumn::FlippedClip => self.flipped_clip_score,
            ScoreColumn::Itm => self.itm_score,
        }
    }

    /// Range checks applied at ingest. Returns the rejection reason, if any.
    pub fn validate(&self) -> std::result::Result<(), &'static str> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err("nonpositive dimension");
        }
        let in_range = |v: Option<f64>, lo: f64, hi: f64| v.is_none_or(|x| x >= lo && x <= hi);
        if !in_range(self.clip_score, -1.0, 1.0)
            || !in_range(self.flipped_clip_score, -1.0, 1.0)
            || !in_range(self.itm_score, 0.0, 1.0)
        {
            return Err("score out of range");
        }
        if !in_range(self.face_area_ratio, 0.0, 1.0) {
            return Err("face ratio out of range");
        }
        if let Some(scores) = &self.lang_scores {
            if scores.values().any(|&s| !(0.0..=1.0).contains(&s)) {
                return Err("language score out of range");
            }
        }
        Ok(())
    }
}

/// The three ingested score columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreColumn {
    #[serde(rename = "clip_score")]
    Clip,
    #[serde(rename = "flipped_clip_score")]
    FlippedClip,
    #[serde(rename = "itm_score")]
    Itm,
}

impl ScoreColumn {
    pub fn name(self) -> &'static str {
        match self {
            ScoreColumn::Clip => "clip_score",
            ScoreColumn::FlippedClip => "flipped_clip_score",
            ScoreColumn::Itm => "itm_score",
        }
    }
}

impl FromStr for ScoreColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip_score" => Ok(ScoreColumn::Clip),
            "flipped_clip_score" => Ok(ScoreColumn::FlippedClip),
            "itm_score" => Ok(ScoreColumn::Itm),
            other => Err(Error::Config(format!("unknown score column `{other}`"))),
        }
    }
}

impl fmt::Display for ScoreColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Columns that must be present on every metadata line.
#[derive(Clone, Debug)]
pub struct ColumnSchema {
    pub required: BTreeSet<String>,
}

impl ColumnSchema {
    pub const BASE: [&'static str; 4] = ["uid", "text", "image_width", "image_height"];

    pub fn base() -> Self {
        ColumnSchema {
            required: Self::BASE.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with(mut self, column: &str) -> Self {
        self.required.insert(column.to_string());
        self
    }
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self::base()
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Fraction of rejected lines above which ingest fails.
    pub max_reject_rate: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            max_reject_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IngestReport {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug)]
pub struct Ingested {
    pub records: Vec<SampleRecord>,
    pub report: IngestReport,
}

/// Result of parsing a single metadata line.
#[derive(Debug)]
pub enum LineOutcome {
    Record(SampleRecord),
    Rejected(Rejection),
}

/// Streaming metadata reader. Yields one outcome per non-empty line; schema
/// violations (a required column absent) are returned as `Err` and are fatal.
pub struct MetadataReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    schema: ColumnSchema,
}

impl MetadataReader<BufReader<File>> {
    pub fn open(path: &Path, schema: ColumnSchema) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufReader::new(file), schema))
    }
}

impl<R: BufRead> MetadataReader<R> {
    pub fn new(reader: R, schema: ColumnSchema) -> Self {
        MetadataReader {
            lines: reader.lines(),
            line_no: 0,
            schema,
        }
    }

    fn parse(&self, line: &str) -> Result<LineOutcome> {
        let reject = |reason: String| {
            Ok(LineOutcome::Rejected(Rejection {
                line: self.line_no,
                reason,
            }))
        };
        let obj: Map<String, Value> = match serde_json::from_str(line) {
            Ok(Value::Object(obj)) => obj,
            Ok(_) => return reject("malformed line: not a JSON object".into()),
            Err(e) => return reject(format!("malformed line: {e}")),
        };
        for column in &self.schema.required {
            if !obj.contains_key(column) {
                return Err(Error::Schema(format!(
                    "line {}: missing required column `{column}`",
                    self.line_no
                )));
            }
        }
        // Dimensions are read as signed integers first so that 0 and negative
        // values get the dedicated reason instead of a generic type error.
        for key in ["image_width", "image_height"] {
            if let Some(v) = obj.get(key).and_then(Value::as_i64) {
                if v <= 0 {
                    return reject("nonpositive dimension".into());
                }
            }
        }
        let record: SampleRecord = match serde_json::from_value(Value::Object(obj)) {
            Ok(r) => r,
            Err(e) => return reject(format!("malformed line: {e}")),
        };
        match record.validate() {
            Ok(()) => Ok(LineOutcome::Record(record)),
            Err(reason) => reject(reason.to_string()),
        }
    }
}

impl<R: BufRead> Iterator for MetadataReader<R> {
    type Item = Result<LineOutcome>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(Error::Data(format!("read error: {e}")))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}

/// Reads a whole metadata file, enforcing UID uniqueness and the reject cap.
pub fn ingest_metadata(path: &Path, schema: &ColumnSchema, opts: &IngestOptions) -> Result<Ingested> {
    let reader = MetadataReader::open(path, schema.clone())?;
    collect_records(reader, opts)
}

pub fn collect_records<R: BufRead>(reader: MetadataReader<R>, opts: &IngestOptions) -> Result<Ingested> {
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for outcome in reader {
        report.lines += 1;
        match outcome? {
            LineOutcome::Record(r) => {
                if !seen.insert(r.uid) {
                    return Err(Error::Data(format!("duplicate uid {} at record {}", r.uid, report.lines)));
                }
                records.push(r);
            }
            LineOutcome::Rejected(rej) => report.rejected.push(rej),
        }
    }
    report.accepted = records.len();
    if report.lines > 0 {
        let rate = report.rejected.len() as f64 / report.lines as f64;
        if rate > opts.max_reject_rate {
            return Err(Error::Data(format!(
                "reject rate {:.4} exceeds cap {} ({} of {} lines)",
                rate,
                opts.max_reject_rate,
                report.rejected.len(),
                report.lines
            )));
        }
    }
    Ok(Ingested { records, report })
}

pub fn write_metadata(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dense row-major `f32` matrix whose rows are keyed by UID.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    uids: Vec<Uid>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, uids: Vec<Uid>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        if data.len() != dim * uids.len() {
            return Err(Error::Data(format!(
                "embedding payload holds {} values, expected {} rows x {} dims",
                data.len(),
                uids.len(),
                dim
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {}", pos / dim)));
        }
        Ok(EmbeddingMatrix { dim, data, uids })
    }

    /// Builds a matrix from rows, assigning sequential UIDs `0..n`.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let uids = (0..rows.len() as u128).map(Uid).collect();
        Self::with_uids(rows, uids, dim)
    }

    pub fn with_uids(rows: &[Vec<f32>], uids: Vec<Uid>, dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data, uids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.uids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn uids(&self) -> &[Uid] {
        &self.uids
    }

    /// Gathers the given rows into a new matrix (UIDs follow the rows).
    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut uids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            uids.push(self.uids[r]);
        }
        EmbeddingMatrix {
            dim: self.dim,
            data,
            uids,
        }
    }
}

/// `<prefix>.f32` and `<prefix>.uids` for an embedding prefix.
pub fn embedding_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut f32_path = prefix.as_os_str().to_owned();
    f32_path.push(".f32");
    let mut uids_path = prefix.as_os_str().to_owned();
    uids_path.push(".uids");
    (f32_path.into(), uids_path.into())
}

pub fn read_uid_manifest(path: &Path) -> Result<Vec<Uid>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut uids = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let uid = line
            .parse()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        uids.push(uid);
    }
    Ok(uids)
}

/// Loads a raw little-endian `f32` payload and its UID manifest.
pub fn ingest_embeddings(path: &Path, dim: usize, uid_manifest: &Path) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be positive".into()));
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let row_bytes = dim * 4;
    if bytes.len() % row_bytes != 0 {
        return Err(Error::Data(format!(
            "{}: payload length {} is not a multiple of {} bytes (dim {})",
            path.display(),
            bytes.len(),
            row_bytes,
            dim
        )));
    }
    let uids = read_uid_manifest(uid_manifest)?;
    let rows = bytes.len() / row_bytes;
    if rows != uids.len() {
        return Err(Error::Data(format!(
            "{}: payload holds {rows} rows but manifest lists {} uids",
            path.display(),
            uids.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingMatrix::new(dim, data, uids)
}

pub fn write_embeddings(prefix: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    let (f32_path, uids_path) = embedding_paths(prefix);
    let mut bytes = Vec::with_capacity(matrix.data.len() * 4);
    for v in &matrix.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&f32_path, bytes).map_err(|e| Error::io(&f32_path, e))?;
    let mut manifest = String::with_capacity(matrix.uids.len() * 33);
    for uid in &matrix.uids {
        manifest.push_str(&uid.to_string());
        manifest.push('\n');
    }
    std::fs::write(&uids_path, manifest).map_err(|e| Error::io(&uids_path, e))
}

/// UIDs with multiplicities, ordered by UID.
///
/// Equality compares entries only; `provenance` is a label.
#[derive(Clone, Debug, Default)]
pub struct SelectionSet {
    entries: BTreeMap<Uid, u32>,
    pub provenance: String,
}

impl PartialEq for SelectionSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Eq for SelectionSet {}

impl SelectionSet {
    pub fn new(provenance: impl Into<String>) -> Self {
        SelectionSet {
            entries: BTreeMap::new(),
            provenance: provenance.into(),
        }
    }

    /// Every UID at multiplicity 1.
    pub fn from_uids(provenance: impl Into<String>, uids: impl IntoIterator<Item = Uid>) -> Self {
        let mut set = Self::new(provenance);
        for uid in uids {
            set.entries.insert(uid, 1);
        }
        set
    }

    /// Inserts or overwrites. Multiplicity 0 is rejected.
    pub fn insert(&mut self, uid: Uid, multiplicity: u32) -> Result<()> {
        if multiplicity == 0 {
            return Err(Error::InvalidArgument(format!("multiplicity of {uid} must be >= 1")));
        }
        self.entries.insert(uid, multiplicity);
        Ok(())
    }

    pub fn remove(&mut self, uid: &Uid) -> Option<u32> {
        self.entries.remove(uid)
    }

    pub fn get(&self, uid: &Uid) -> Option<u32> {
        self.entries.get(uid).copied()
    }

    pub fn contains(&self, uid: &Uid) -> bool {
        self.entries.contains_key(uid)
    }

    pub fn unique_count(&self) -> usize {
        self.entries.len()
    }

    pub fn total_count(&self) -> u64 {
        self.entries.values().map(|&m| m as u64).sum()
    }

    pub fn max_multiplicity(&self) -> u32 {
        self.entries.values().copied().max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Uid, u32)> + '_ {
        self.entries.iter().map(|(&u, &m)| (u, m))
    }

    pub fn uids(&self) -> impl Iterator<Item = Uid> + '_ {
        self.entries.keys().copied()
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Renders the selection file body.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 36);
        for (uid, m) in &self.entries {
            out.push_str(&format!("{uid} {m}\n"));
        }
        out
    }

    pub fn parse_text(text: &str, provenance: impl Into<String>) -> Result<Self> {
        let mut set = Self::new(provenance);
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (uid, m) = line
                .split_once(' ')
                .ok_or_else(|| Error::Data(format!("selection line {}: expected `<uid> <multiplicity>`", i + 1)))?;
            let uid: Uid = uid.parse()?;
            let m: u32 = m
                .parse()
                .map_err(|e| Error::Data(format!("selection line {}: bad multiplicity: {e}", i + 1)))?;
            if set.contains(&uid) {
                return Err(Error::Data(format!("selection line {}: repeated uid {uid}", i + 1)));
            }
            set.insert(uid, m)?;
        }
        Ok(set)
    }
}

impl FromIterator<(Uid, u32)> for SelectionSet {
    fn from_iter<I: IntoIterator<Item = (Uid, u32)>>(iter: I) -> Self {
        SelectionSet {
            entries: iter.into_iter().filter(|&(_, m)| m > 0).collect(),
            provenance: String::new(),
        }
    }
}

pub fn write_selection(set: &SelectionSet, path: &Path) -> Result<()> {
    std::fs::write(path, set.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_selection(path: &Path, provenance: impl Into<String>) -> Result<SelectionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SelectionSet::parse_text(&text, provenance)
}
