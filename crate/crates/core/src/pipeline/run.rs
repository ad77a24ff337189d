use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::PipelineConfig;
use super::report::{stage_file_stem, IngestSummary, RunReport, StageReport};
use crate::align::{
    cids_select, cluster_importance, cluster_size_histogram, group_by_label, joint_matrix, merge_digit_subset,
    quality_duplicate, read_task_manifest, semantic_dedup, write_histogram_jsonl, write_importance_jsonl,
    ImportanceVector, SemDedupParams,
};
use crate::ann::{build_index, near_duplicate_removal, IvfPqParams};
use crate::corpus::{
    embedding_paths, ingest_embeddings, ingest_metadata, write_selection, EmbeddingMatrix, IngestOptions,
    SampleRecord, SelectionSet, Uid,
};
use crate::crossmodal::{clip_stage, itm_stage};
use crate::error::{Error, Result};
use crate::shard::{pack_shards, validate_plan, write_plan, write_shard_manifests, ShardPlan};
use crate::unimodal::{apply_image_rules, apply_text_rules, TextRuleConfig, Verdict};
use crate::vector::kmeans_fit;

/// Stage names in execution order.
pub const STAGE_ORDER: [&str; 10] = [
    "near_dup",
    "text_rules",
    "image_rules",
    "clip_threshold",
    "itm_threshold",
    "cids",
    "quality_duplication",
    "semantic_dedup",
    "digit_merge",
    "shard_pack",
];

const SEED_ANN: u64 = 0;
const SEED_CLUSTERS: u64 = 2;
const SEED_SEMANTIC: u64 = 3;
const SEED_SHARDS: u64 = 4;

#[derive(Debug)]
pub struct RunOutput {
    pub selection: SelectionSet,
    pub plan: Option<ShardPlan>,
    pub report: RunReport,
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct Timing {
    stage: String,
    seconds: f64,
}

struct StageOutcome {
    selection: SelectionSet,
    drops: Vec<(Uid, String)>,
    extra: BTreeMap<String, serde_json::Value>,
}

impl StageOutcome {
    fn new(selection: SelectionSet, drops: Vec<(Uid, &'static str)>) -> Self {
        StageOutcome {
            selection,
            drops: drops.into_iter().map(|(u, r)| (u, r.to_string())).collect(),
            extra: BTreeMap::new(),
        }
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    records: Vec<SampleRecord>,
    embeddings: Option<EmbeddingMatrix>,
    current: SelectionSet,
    report: RunReport,
    timings: Vec<Timing>,
    /// Cluster of each record as fitted for selection; reused for duplication weights.
    clusters: Option<(usize, HashMap<Uid, usize>)>,
    plan: Option<ShardPlan>,
    text_rules: TextRuleConfig,
}

/// Files and directories a run owns inside its output directory.
const OWNED: [&str; 10] = [
    "FAILED",
    "report.json",
    "timings.json",
    "final.sel",
    "plan.tsv",
    "importance.jsonl",
    "cids_clusters.jsonl",
    "semantic_groups.jsonl",
    "stages",
    "shards",
];

fn clear_outputs(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in OWNED {
        let p = dir.join(name);
        let res = if p.is_dir() {
            std::fs::remove_dir_all(&p)
        } else if p.exists() {
            std::fs::remove_file(&p)
        } else {
            Ok(())
        };
        res.map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every enabled stage in the fixed order and writes all artifacts to
/// `config.output_dir`. On failure the completed stages' outputs stay on
/// disk next to a `FAILED` marker naming the stage.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    let out = config.output_dir.clone();
    clear_outputs(&out)?;
    let mut run = Run {
        cfg: config,
        out: out.clone(),
        records: Vec::new(),
        embeddings: None,
        current: SelectionSet::new("input"),
        report: RunReport::default(),
        timings: Vec::new(),
        clusters: None,
        plan: None,
        text_rules: config.text.build()?,
    };
    match run.execute() {
        Ok(()) => Ok(RunOutput {
            selection: run.current,
            plan: run.plan,
            report: run.report,
            output_dir: out,
        }),
        Err((stage, e)) => {
            let e = e.in_stage(stage);
            let marker = out.join("FAILED");
            let flushed = write_json(&out.join("report.json"), &run.report)
                .and_then(|_| std::fs::write(&marker, format!("stage: {stage}\nerror: {e}\n")).map_err(|io| Error::io(&marker, io)));
            if let Err(flush) = flushed {
                warn!("could not flush partial outputs: {flush}");
            }
            Err(e)
        }
    }
}

type StageResult<T> = std::result::Result<T, (&'static str, Error)>;

impl Run<'_> {
    fn execute(&mut self) -> StageResult<()> {
        let started = Instant::now();
        self.ingest().map_err(|e| ("ingest", e))?;
        self.timings.push(Timing {
            stage: "ingest".into(),
            seconds: started.elapsed().as_secs_f64(),
        });
        let s = self.cfg.stages.clone();
        let toggles = [
            s.near_dup,
            s.text_rules,
            s.image_rules,
            s.clip_threshold,
            s.itm_threshold,
            s.cids,
            s.quality_duplication,
            s.semantic_dedup,
            s.digit_merge,
            s.shard_pack,
        ];
        for (i, (&name, &enabled)) in STAGE_ORDER.iter().zip(&toggles).enumerate() {
            self.stage(i + 1, name, enabled).map_err(|e| (name, e))?;
        }
        let out = self.out.clone();
        let run_err = |e| ("finalize", e);
        write_selection(&self.current, &out.join("final.sel")).map_err(run_err)?;
        write_json(&out.join("report.json"), &self.report).map_err(run_err)?;
        write_json(&out.join("timings.json"), &self.timings).map_err(run_err)?;
        Ok(())
    }

    fn ingest(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let ingested = ingest_metadata(
            &cfg.inputs.metadata,
            &cfg.schema(),
            &IngestOptions {
                max_reject_rate: cfg.inputs.max_reject_rate,
            },
        )?;
        let mut reasons = BTreeMap::new();
        for r in &ingested.report.rejected {
            let key = r.reason.split(':').next().unwrap_or(&r.reason).to_string();
            *reasons.entry(key).or_default() += 1;
        }
        self.report.ingest = IngestSummary {
            lines: ingested.report.lines,
            accepted: ingested.report.accepted,
            rejected: ingested.report.rejected.len(),
            reasons,
        };
        info!(
            "ingested {} records ({} rejected)",
            ingested.report.accepted,
            ingested.report.rejected.len()
        );
        self.records = ingested.records;

        let s = &cfg.stages;
        if s.near_dup || s.cids || s.quality_duplication || s.semantic_dedup {
            let (f, u) = embedding_paths(&cfg.inputs.embeddings);
            let emb = ingest_embeddings(&f, cfg.inputs.embedding_dim, &u)?;
            for r in &self.records {
                if let Some(row) = r.embedding_row {
                    if row >= emb.len() || emb.uids()[row] != r.uid {
                        return Err(Error::Data(format!(
                            "record {} points at embedding row {row}, which belongs to another uid",
                            r.uid
                        )));
                    }
                }
            }
            self.embeddings = Some(emb);
        }
        self.current = SelectionSet::from_uids("input", self.records.iter().map(|r| r.uid));
        if self.cfg.persist_stages {
            let dir = self.out.join("stages");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_selection(&self.current, &dir.join(format!("{}.sel", stage_file_stem(0, "input"))))?;
        }
        Ok(())
    }

    fn current_records(&self) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| self.current.contains(&r.uid)).collect()
    }

    fn embeddings(&self) -> &EmbeddingMatrix {
        self.embeddings.as_ref().expect("embeddings are loaded for embedding stages")
    }

    fn stage(&mut self, index: usize, name: &'static str, enabled: bool) -> Result<()> {
        let started = Instant::now();
        let input = self.current.clone();
        let outcome = if enabled {
            info!("stage {name}: {} unique in", input.unique_count());
            match name {
                "near_dup" => self.near_dup()?,
                "text_rules" => self.verdict_stage(|r, run| apply_text_rules(r, &run.text_rules))?,
                "image_rules" => self.verdict_stage(|r, run| apply_image_rules(r, &run.cfg.image))?,
                "clip_threshold" => {
                    let recs = self.current_records();
                    let o = clip_stage(&recs, &self.cfg.crossmodal)?;
                    StageOutcome::new(o.selection, o.drops)
                }
                "itm_threshold" => self.itm()?,
                "cids" => self.cids()?,
                "quality_duplication" => self.quality()?,
                "semantic_dedup" => self.semantic()?,
                "digit_merge" => {
                    let (selection, added) = merge_digit_subset(&self.current, &self.records);
                    let mut o = StageOutcome::new(selection, Vec::new());
                    o.extra.insert("added".into(), json!(added));
                    o
                }
                "shard_pack" => self.shard()?,
                _ => unreachable!("unknown stage {name}"),
            }
        } else {
            StageOutcome::new(input.clone(), Vec::new())
        };
        let StageOutcome {
            selection,
            mut drops,
            extra,
        } = outcome;
        let selection = selection.with_provenance(name);

        if name != "digit_merge" {
            if let Some(u) = selection.uids().find(|u| !input.contains(u)) {
                return Err(Error::Invariant(format!("stage {name} produced {u}, which was not in its input")));
            }
        } else if let Some(u) = input.uids().find(|u| !selection.contains(u)) {
            return Err(Error::Invariant(format!("digit merge lost {u}")));
        }
        drops.retain(|(u, _)| input.contains(u));
        drops.sort();
        drops.dedup_by(|a, b| a.0 == b.0);
        let dropped = input.unique_count() - input.uids().filter(|u| selection.contains(u)).count();
        if drops.len() != dropped {
            return Err(Error::Invariant(format!(
                "stage {name} dropped {dropped} uids but recorded {} reasons",
                drops.len()
            )));
        }
        let mut hist: BTreeMap<String, usize> = BTreeMap::new();
        for (_, r) in &drops {
            *hist.entry(r.clone()).or_default() += 1;
        }
        if self.cfg.persist_stages {
            let dir = self.out.join("stages");
            let stem = stage_file_stem(index, name);
            write_selection(&selection, &dir.join(format!("{stem}.sel")))?;
            let path = dir.join(format!("{stem}.drops.tsv"));
            let mut body = String::with_capacity(drops.len() * 48);
            for (u, r) in &drops {
                body.push_str(&format!("{u}\t{r}\n"));
            }
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        self.report.stages.push(StageReport {
            stage: name.to_string(),
            enabled,
            input_unique: input.unique_count(),
            output_unique: selection.unique_count(),
            output_total: selection.total_count(),
            drops: hist,
            extra,
        });
        self.timings.push(Timing {
            stage: name.to_string(),
            seconds: started.elapsed().as_secs_f64(),
        });
        self.current = selection;
        Ok(())
    }

    fn verdict_stage(&self, rule: impl Fn(&SampleRecord, &Self) -> Verdict + Sync) -> Result<StageOutcome> {
        let recs = self.current_records();
        let verdicts: Vec<Verdict> = recs.par_iter().map(|r| rule(r, self)).collect();
        let mut selection = SelectionSet::new("");
        let mut drops = Vec::new();
        for (r, v) in recs.iter().zip(verdicts) {
            match v {
                Verdict::Keep => selection.insert(r.uid, self.current.get(&r.uid).unwrap_or(1))?,
                Verdict::Drop(reason) => drops.push((r.uid, reason.as_str())),
            }
        }
        Ok(StageOutcome::new(selection, drops))
    }

    fn near_dup(&self) -> Result<StageOutcome> {
        let emb = self.embeddings();
        let params = self.cfg.ann.unwrap_or_else(|| IvfPqParams::desk_scale(emb.len()));
        let index = build_index(emb, params, self.cfg.seed.wrapping_add(SEED_ANN))?;
        let recs: Vec<SampleRecord> = self.current_records().into_iter().cloned().collect();
        let o = near_duplicate_removal(&recs, emb, &index, &self.cfg.dedup)?;
        let mut out = StageOutcome::new(o.selection, o.drops);
        out.extra.insert("nlist".into(), json!(params.nlist));
        out.extra.insert("nbits".into(), json!(params.nbits));
        out.extra.insert("nprobe".into(), json!(params.nprobe));
        out.extra.insert("k_neighbors".into(), json!(params.k_neighbors));
        Ok(out)
    }

    fn itm(&self) -> Result<StageOutcome> {
        let recs = self.current_records();
        let o = itm_stage(&recs, &self.cfg.crossmodal)?;
        let mut out = StageOutcome::new(o.selection, o.drops);
        match self.cfg.crossmodal.itm_threshold {
            Some(t) => {
                let frac = if recs.is_empty() {
                    0.0
                } else {
                    out.drops.len() as f64 / recs.len() as f64
                };
                out.extra.insert("threshold".into(), json!(t));
                out.extra.insert("removed_fraction".into(), json!(frac));
            }
            None => {
                out.extra.insert("threshold".into(), json!("unset"));
            }
        }
        Ok(out)
    }

    /// k-means over `recs`' embedding rows with `k` clamped to the record count.
    fn fit_clusters(&self, recs: &[&SampleRecord]) -> Result<(crate::vector::ClusterModel, Vec<usize>)> {
        let emb = self.embeddings();
        let rows = rows_of(recs)?;
        let x = emb.select_rows(&rows);
        let k = self.cfg.align.k_clusters.min(recs.len());
        if k < self.cfg.align.k_clusters {
            warn!(
                "k_clusters = {} exceeds the {} records; using k = {k}",
                self.cfg.align.k_clusters,
                recs.len()
            );
        }
        let model = kmeans_fit(
            &x,
            k,
            self.cfg.align.kmeans_max_iters,
            self.cfg.seed.wrapping_add(SEED_CLUSTERS),
        )?;
        let labels = model.assign(&x)?;
        Ok((model, labels))
    }

    fn cids(&mut self) -> Result<StageOutcome> {
        let recs = self.current_records();
        if recs.is_empty() {
            return Ok(StageOutcome::new(SelectionSet::new(""), Vec::new()));
        }
        let (model, labels) = self.fit_clusters(&recs)?;
        let tasks = match &self.cfg.inputs.task_manifest {
            Some(m) => read_task_manifest(m, self.cfg.inputs.embedding_dim)?,
            None => {
                warn!("no task manifest: selection falls back to the global score ranking");
                Vec::new()
            }
        };
        let matrices: Vec<EmbeddingMatrix> = tasks.iter().map(|t| t.embeddings.clone()).collect();
        let importance: ImportanceVector = cluster_importance(&model, &matrices, self.cfg.align.thre_imp)?;
        let total_n = ((self.cfg.align.select_fraction * recs.len() as f64) + 0.5).floor() as usize;
        let total_n = total_n.min(recs.len());
        let selection = cids_select(&recs, &labels, &importance, total_n, self.cfg.align.score_column)?;
        write_importance_jsonl(&self.out.join("importance.jsonl"), &importance)?;
        let selected_labels: Vec<usize> = recs
            .iter()
            .zip(&labels)
            .filter(|(r, _)| selection.contains(&r.uid))
            .map(|(_, &l)| l)
            .collect();
        let hist = cluster_size_histogram(&selected_labels);
        write_histogram_jsonl(&self.out.join("cids_clusters.jsonl"), &hist)?;

        let drops = recs
            .iter()
            .filter(|r| !selection.contains(&r.uid))
            .map(|r| (r.uid, "cids_not_selected"))
            .collect();
        let mut out = StageOutcome::new(selection, drops);
        out.extra.insert("k".into(), json!(model.k()));
        out.extra.insert("tasks".into(), json!(tasks.len()));
        out.extra.insert("total_n".into(), json!(total_n));
        out.extra.insert("importance_zero".into(), json!(importance.is_zero()));
        out.extra.insert(
            "selected_per_cluster".into(),
            json!({"clusters": hist.counts.len(), "min": hist.min, "median": hist.median, "max": hist.max}),
        );
        let map = recs.iter().map(|r| r.uid).zip(labels).collect();
        self.clusters = Some((model.k(), map));
        Ok(out)
    }

    fn quality(&mut self) -> Result<StageOutcome> {
        let recs = self.current_records();
        if recs.is_empty() {
            return Ok(StageOutcome::new(SelectionSet::new(""), Vec::new()));
        }
        if self.clusters.is_none() {
            let (model, labels) = self.fit_clusters(&recs)?;
            let map = recs.iter().map(|r| r.uid).zip(labels).collect();
            let k = model.k();
            self.clusters = Some((k, map));
        }
        let recs = self.current_records();
        let selection = self.weights_for(&recs)?;
        let mut out = StageOutcome::new(selection, Vec::new());
        out.extra.insert("w1".into(), json!(self.cfg.align.w1));
        out.extra.insert("w2".into(), json!(self.cfg.align.w2));
        Ok(out)
    }

    /// Duplication weights from each record's rank inside its cluster.
    fn weights_for(&self, recs: &[&SampleRecord]) -> Result<SelectionSet> {
        let (k, map) = self.clusters.as_ref().expect("clusters fitted before weighting");
        let labels: Vec<usize> = recs
            .iter()
            .map(|r| {
                map.get(&r.uid)
                    .copied()
                    .ok_or_else(|| Error::Invariant(format!("{} has no cluster", r.uid)))
            })
            .collect::<Result<_>>()?;
        let members = group_by_label(recs, &labels, *k);
        quality_duplicate(&members, self.cfg.align.w1, self.cfg.align.w2, self.cfg.align.score_column)
    }

    fn semantic(&self) -> Result<StageOutcome> {
        let recs = self.current_records();
        if recs.is_empty() {
            return Ok(StageOutcome::new(SelectionSet::new(""), Vec::new()));
        }
        let a = &self.cfg.align;
        let joint;
        let matrix = if a.joint_embedding {
            let prefix = self.cfg.inputs.text_embeddings.as_ref().expect("validated");
            let dim = self.cfg.inputs.text_embedding_dim.expect("validated");
            let (f, u) = embedding_paths(prefix);
            let txt = ingest_embeddings(&f, dim, &u)?;
            joint = joint_matrix(self.embeddings(), &txt, a.w_t as f32)?;
            &joint
        } else {
            self.embeddings()
        };
        let k = a.k_clusters.min(recs.len());
        let params = SemDedupParams {
            k_clusters: k,
            thre_sem: a.thre_sem,
            score_column: a.representative_score_column,
            seed: self.cfg.seed.wrapping_add(SEED_SEMANTIC),
            max_iters: a.kmeans_max_iters,
            pairwise_cap: a.pairwise_cap,
        };
        let o = semantic_dedup(&recs, matrix, &params)?;
        let survivors: Vec<&SampleRecord> = recs.iter().copied().filter(|r| o.selection.contains(&r.uid)).collect();
        // Weights are recomputed on the survivors, so the result does not depend
        // on whether duplication ran before or after this stage.
        let selection = if self.cfg.stages.quality_duplication && self.clusters.is_some() {
            self.weights_for(&survivors)?
        } else {
            survivors
                .iter()
                .map(|r| (r.uid, self.current.get(&r.uid).unwrap_or(1)))
                .collect()
        };
        let path = self.out.join("semantic_groups.jsonl");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        for g in &o.groups {
            let line = json!({"representative": g.representative.to_string(), "members": g.members.iter().map(Uid::to_string).collect::<Vec<_>>()});
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let mut out = StageOutcome::new(selection, o.drops);
        out.extra.insert("k".into(), json!(k));
        out.extra.insert("groups".into(), json!(o.groups.len()));
        out.extra.insert("joint_embedding".into(), json!(a.joint_embedding));
        Ok(out)
    }

    fn shard(&mut self) -> Result<StageOutcome> {
        let plan = pack_shards(
            &self.current,
            self.cfg.shard_size,
            self.cfg.seed.wrapping_add(SEED_SHARDS),
        )?;
        if let Err(v) = validate_plan(&plan, &self.current) {
            return Err(Error::Invariant(format!(
                "shard plan violates {} constraint(s), first: {}",
                v.len(),
                v[0]
            )));
        }
        write_plan(&plan, &self.out.join("plan.tsv"))?;
        write_shard_manifests(&plan, &self.out.join("shards"))?;
        let mut out = StageOutcome::new(self.current.clone(), Vec::new());
        out.extra.insert("shards".into(), json!(plan.shard_count()));
        out.extra.insert("shard_size".into(), json!(plan.shard_size));
        self.plan = Some(plan);
        Ok(out)
    }
}

fn rows_of(recs: &[&SampleRecord]) -> Result<Vec<usize>> {
    recs.iter()
        .map(|r| {
            r.embedding_row
                .ok_or_else(|| Error::Data(format!("record {} has no embedding_row", r.uid)))
        })
        .collect()
}
