use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_selection, Uid};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub enabled: bool,
    pub input_unique: usize,
    pub output_unique: usize,
    /// Sum of multiplicities.
    pub output_total: u64,
    /// Dropped UIDs per reason.
    pub drops: BTreeMap<String, usize>,
    /// Stage-specific figures (cluster counts, removal fractions, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Rejections per reason.
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ingest: IngestSummary,
    pub stages: Vec<StageReport>,
}

impl RunReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Stage table in the shape "unique (with duplicates)".
pub fn render_report(report: &RunReport) -> String {
    let mut out = String::new();
    let i = &report.ingest;
    let _ = writeln!(out, "ingest: {} lines, {} accepted, {} rejected", i.lines, i.accepted, i.rejected);
    for (reason, n) in &i.reasons {
        let _ = writeln!(out, "  reject {reason}: {n}");
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<22} {:>8} {:>10} {:>18} {:>9}  drops",
        "stage", "enabled", "input", "output (dup.)", "removed"
    );
    for s in &report.stages {
        let removed = s.input_unique as i64 - s.output_unique as i64;
        let output = if s.output_total != s.output_unique as u64 {
            format!("{} ({})", s.output_unique, s.output_total)
        } else {
            s.output_unique.to_string()
        };
        let drops: Vec<String> = s.drops.iter().map(|(r, n)| format!("{r}={n}")).collect();
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>10} {:>18} {:>9}  {}",
            s.stage,
            if s.enabled { "yes" } else { "no" },
            s.input_unique,
            output,
            removed,
            drops.join(" ")
        );
        for (k, v) in &s.extra {
            let _ = writeln!(out, "{:<22}   {k} = {v}", "");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    /// Not in the stage's input.
    Absent,
    Kept { multiplicity: u32 },
    Dropped { reason: String },
    /// Present after the stage without having been in its input.
    Added { multiplicity: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageTrace {
    pub stage: String,
    pub enabled: bool,
    pub decision: Decision,
}

pub(crate) fn stage_file_stem(index: usize, name: &str) -> String {
    format!("{index:02}_{name}")
}

pub(crate) fn read_drops(path: &Path) -> Result<HashMap<Uid, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for line in text.lines() {
        let (uid, reason) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}: malformed drop line {line:?}", path.display())))?;
        out.insert(uid.parse()?, reason.to_string());
    }
    Ok(out)
}

/// Per-stage decisions for `uid`, read from a finished run's `stages/` files.
pub fn explain_uid(output_dir: &Path, uid: Uid) -> Result<Vec<StageTrace>> {
    let report = RunReport::read(&output_dir.join("report.json"))?;
    let stages_dir = output_dir.join("stages");
    let input = read_selection(&stages_dir.join(format!("{}.sel", stage_file_stem(0, "input"))), "input")
        .map_err(|e| Error::Data(format!("no persisted stages in {}: {e}", output_dir.display())))?;
    if !input.contains(&uid) {
        return Err(Error::InvalidArgument(format!("uid {uid} is not in the run's input")));
    }
    let mut present = Some(1u32);
    let mut trace = Vec::new();
    for (i, s) in report.stages.iter().enumerate() {
        let stem = stage_file_stem(i + 1, &s.stage);
        let sel = read_selection(&stages_dir.join(format!("{stem}.sel")), s.stage.clone())?;
        let drops = read_drops(&stages_dir.join(format!("{stem}.drops.tsv")))?;
        let after = sel.get(&uid);
        let decision = match (present, after) {
            (Some(_), Some(m)) => Decision::Kept { multiplicity: m },
            (None, Some(m)) => Decision::Added { multiplicity: m },
            (Some(_), None) => Decision::Dropped {
                reason: drops.get(&uid).cloned().unwrap_or_else(|| "unrecorded".into()),
            },
            (None, None) => Decision::Absent,
        };
        trace.push(StageTrace {
            stage: s.stage.clone(),
            enabled: s.enabled,
            decision,
        });
        present = after;
    }
    Ok(trace)
}

pub fn render_trace(uid: Uid, trace: &[StageTrace]) -> String {
    let mut out = format!("{uid}\n");
    for t in trace {
        let what = match &t.decision {
            Decision::Absent => "absent".to_string(),
            Decision::Kept { multiplicity } => format!("kept x{multiplicity}"),
            Decision::Added { multiplicity } => format!("added x{multiplicity}"),
            Decision::Dropped { reason } => format!("dropped ({reason})"),
        };
        let off = if t.enabled { "" } else { " [disabled]" };
        let _ = writeln!(out, "  {:<22} {what}{off}", t.stage);
    }
    out
}
