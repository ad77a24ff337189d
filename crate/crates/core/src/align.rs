//! Distribution alignment: cluster importance from downstream-task images,
//! importance-based selection, quality-based duplication, semantic
//! deduplication and the digit-subset merge.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ingest_embeddings, EmbeddingMatrix, SampleRecord, ScoreColumn, SelectionSet, Uid};
use crate::error::{Error, Result};
use crate::vector::{dot64, kmeans_fit, unit_rows, ClusterModel};

/// Prompts whose joint "yes" answer sets `digit_flag` upstream.
pub const DIGIT_PROMPTS: [&str; 2] = [
    "Question: Does this image contain a number or a digit, Answer in yes or no only? Answer:",
    "Question: Does this image contain a digit between 0-10, Answer in yes or no only? Answer:",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub k_clusters: usize,
    pub thre_imp: f64,
    pub select_fraction: f64,
    pub thre_sem: f64,
    pub w1: u32,
    pub w2: u32,
    /// Text weight in the joint embedding; used only when `joint_embedding` is on.
    pub w_t: f64,
    pub joint_embedding: bool,
    /// Score used for selection and duplication.
    pub score_column: ScoreColumn,
    /// Score deciding which member of a semantic group survives.
    pub representative_score_column: ScoreColumn,
    pub kmeans_max_iters: usize,
    /// Clusters larger than this are grouped without a pairwise matrix.
    pub pairwise_cap: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            k_clusters: 100_000,
            thre_imp: 0.72,
            select_fraction: 0.20,
            thre_sem: 0.04,
            w1: 1,
            w2: 2,
            w_t: 0.25,
            joint_embedding: false,
            score_column: ScoreColumn::FlippedClip,
            representative_score_column: ScoreColumn::FlippedClip,
            kmeans_max_iters: 25,
            pairwise_cap: 10_000,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_clusters == 0 {
            return Err(Error::Config("k_clusters must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.thre_imp) {
            return Err(Error::Config(format!("thre_imp = {} must lie in [-1, 1]", self.thre_imp)));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "select_fraction = {} must lie in (0, 1]",
                self.select_fraction
            )));
        }
        if !(-1.0..=1.0).contains(&self.thre_sem) {
            return Err(Error::Config(format!("thre_sem = {} must lie in [-1, 1]", self.thre_sem)));
        }
        if self.w1 < 1 || self.w2 < self.w1 {
            return Err(Error::Config(format!("need w2 >= w1 >= 1 (w1 = {}, w2 = {})", self.w1, self.w2)));
        }
        if !(self.w_t.is_finite() && self.w_t >= 0.0) {
            return Err(Error::Config(format!("w_t = {} must be >= 0", self.w_t)));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::Config("kmeans_max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-cluster weights summing to 1, or all zero when no downstream image
/// matched any cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub weights: Vec<f64>,
}

impl ImportanceVector {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }
}

const IMAGE_CHUNK: usize = 256;

/// Importance of each centroid for the given downstream tasks.
///
/// Image `j` votes for every cluster whose cosine similarity exceeds
/// `thre_imp`, splitting one vote evenly among them. Votes are summed and
/// normalized per task, then summed over tasks and normalized again.
pub fn cluster_importance(model: &ClusterModel, tasks: &[EmbeddingMatrix], thre_imp: f64) -> Result<ImportanceVector> {
    let k = model.k();
    let centroids = unit_rows(model.centroids().chunks_exact(model.dim()))?;
    let mut total = vec![0.0f64; k];
    for task in tasks {
        if task.dim() != model.dim() {
            return Err(Error::DimMismatch {
                expected: model.dim(),
                found: task.dim(),
            });
        }
        let images = unit_rows(task.rows())?;
        // Fixed-size chunks summed in order keep the result independent of the worker count.
        let partials: Vec<Vec<f64>> = images
            .par_chunks(IMAGE_CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0f64; k];
                let mut valid = Vec::new();
                for img in chunk {
                    valid.clear();
                    valid.extend((0..k).filter(|&i| dot64(&centroids[i], img) > thre_imp));
                    if valid.is_empty() {
                        continue;
                    }
                    let share = 1.0 / valid.len() as f64;
                    for &i in &valid {
                        acc[i] += share;
                    }
                }
                acc
            })
            .collect();
        let mut task_weights = vec![0.0f64; k];
        for p in &partials {
            for (t, v) in task_weights.iter_mut().zip(p) {
                *t += v;
            }
        }
        let mass: f64 = task_weights.iter().sum();
        if mass > 0.0 {
            for (t, v) in total.iter_mut().zip(&task_weights) {
                *t += v / mass;
            }
        }
    }
    let mass: f64 = total.iter().sum();
    if mass > 0.0 {
        for w in &mut total {
            *w /= mass;
        }
    }
    Ok(ImportanceVector { weights: total })
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

fn score_of(r: &SampleRecord, column: ScoreColumn) -> Result<f64> {
    r.score(column)
        .ok_or_else(|| Error::Data(format!("record {} has no {column}", r.uid)))
}

/// Descending score, then ascending uid.
fn better(a: &(f64, Uid), b: &(f64, Uid)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Selects exactly `total_n` records: `round(total_n · w_i)` best-scored from
/// each cluster (capped by cluster size), then any shortfall from the best
/// unselected records overall, or any overshoot trimmed from the worst selected.
pub fn cids_select<R: Borrow<SampleRecord>>(
    records: &[R],
    labels: &[usize],
    importance: &ImportanceVector,
    total_n: usize,
    score_column: ScoreColumn,
) -> Result<SelectionSet> {
    if labels.len() != records.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} records",
            labels.len(),
            records.len()
        )));
    }
    if total_n > records.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {total_n} of {} records",
            records.len()
        )));
    }
    let k = importance.k();
    let mut clusters: Vec<Vec<(f64, Uid)>> = vec![Vec::new(); k];
    for (r, &l) in records.iter().zip(labels) {
        let r = r.borrow();
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} outside {k} clusters")));
        }
        clusters[l].push((score_of(r, score_column)?, r.uid));
    }
    clusters.par_iter_mut().for_each(|c| c.sort_by(better));

    let mut chosen: Vec<(f64, Uid)> = Vec::with_capacity(total_n);
    let mut pool: Vec<(f64, Uid)> = Vec::new();
    for (c, &w) in clusters.iter().zip(&importance.weights) {
        let quota = (round_half_up(total_n as f64 * w) as usize).min(c.len());
        chosen.extend_from_slice(&c[..quota]);
        pool.extend_from_slice(&c[quota..]);
    }
    if chosen.len() > total_n {
        chosen.sort_by(better);
        chosen.truncate(total_n);
    } else if chosen.len() < total_n {
        pool.sort_by(better);
        let need = total_n - chosen.len();
        chosen.extend_from_slice(&pool[..need]);
    }
    Ok(SelectionSet::from_uids("cids", chosen.into_iter().map(|(_, u)| u)))
}

/// `round((w2 − w1)(i − 1)/(N − 1) + w1)` for `i = 1..=N`, rounded half up in
/// exact integer arithmetic. A single-member cluster gets `w2`.
pub fn interpolated_weights(n: usize, w1: u32, w2: u32) -> Vec<u32> {
    match n {
        0 => Vec::new(),
        1 => vec![w2],
        _ => {
            let span = (w2 - w1) as u64;
            let d = (n - 1) as u64;
            (0..n as u64).map(|i| w1 + ((2 * span * i + d) / (2 * d)) as u32).collect()
        }
    }
}

/// Multiplicity per record from its rank within its cluster (ascending score,
/// ties: lower uid first). Empty clusters are skipped.
pub fn quality_duplicate(members: &[Vec<&SampleRecord>], w1: u32, w2: u32, score_column: ScoreColumn) -> Result<SelectionSet> {
    if w1 < 1 || w2 < w1 {
        return Err(Error::InvalidArgument(format!("need w2 >= w1 >= 1 (w1 = {w1}, w2 = {w2})")));
    }
    let per_cluster: Vec<Vec<(Uid, u32)>> = members
        .par_iter()
        .map(|cluster| -> Result<Vec<(Uid, u32)>> {
            let mut ranked: Vec<(f64, Uid)> = cluster
                .iter()
                .map(|r| Ok((score_of(r, score_column)?, r.uid)))
                .collect::<Result<_>>()?;
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let weights = interpolated_weights(ranked.len(), w1, w2);
            Ok(ranked.into_iter().map(|(_, u)| u).zip(weights).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = SelectionSet::new("quality_duplicate");
    for (uid, m) in per_cluster.into_iter().flatten() {
        if out.contains(&uid) {
            return Err(Error::InvalidArgument(format!("{uid} appears in more than one cluster")));
        }
        out.insert(uid, m)?;
    }
    Ok(out)
}

/// Groups records by label: `members[c]` holds the records labelled `c`, in input order.
pub fn group_by_label<'a>(records: &[&'a SampleRecord], labels: &[usize], k: usize) -> Vec<Vec<&'a SampleRecord>> {
    let mut members = vec![Vec::new(); k];
    for (r, &l) in records.iter().zip(labels) {
        members[l].push(*r);
    }
    members
}

/// One semantic group: its surviving representative and every member.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGroup {
    pub representative: Uid,
    pub members: Vec<Uid>,
}

#[derive(Clone, Debug, Default)]
pub struct SemDedupOutcome {
    pub selection: SelectionSet,
    /// Groups with more than one member.
    pub groups: Vec<SemanticGroup>,
    pub labels: Vec<usize>,
    pub drops: Vec<(Uid, &'static str)>,
    pub model: Option<ClusterModel>,
}

/// Semantic deduplication inside fixed clusters. Rows of `x` align with
/// `uids` and `scores`. Within each cluster, items are joined when their
/// cosine similarity is strictly above `thre_sem`; each connected component
/// keeps its best-scored member (ties: lower uid).
pub fn semantic_dedup_in_clusters(
    uids: &[Uid],
    scores: &[f64],
    x: &EmbeddingMatrix,
    labels: &[usize],
    thre_sem: f64,
    pairwise_cap: usize,
) -> Result<(SelectionSet, Vec<SemanticGroup>)> {
    let n = uids.len();
    if scores.len() != n || x.len() != n || labels.len() != n {
        return Err(Error::InvalidArgument("uids, scores, rows and labels must have equal length".into()));
    }
    let unit = unit_rows(x.rows())?;
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_cluster.entry(l).or_default().push(i);
    }
    let clusters: Vec<Vec<usize>> = by_cluster.into_values().collect();
    let components: Vec<Vec<Vec<usize>>> = clusters
        .par_iter()
        .map(|members| {
            if members.len() > pairwise_cap {
                greedy_components(members, &unit, uids, scores, thre_sem)
            } else {
                pairwise_components(members, &unit, thre_sem)
            }
        })
        .collect();

    let mut selection = SelectionSet::new("semantic_dedup");
    let mut groups = Vec::new();
    for comp in components.into_iter().flatten() {
        let rep = *comp
            .iter()
            .min_by(|&&a, &&b| better(&(scores[a], uids[a]), &(scores[b], uids[b])))
            .expect("components are non-empty");
        selection.insert(uids[rep], 1)?;
        if comp.len() > 1 {
            let mut members: Vec<Uid> = comp.iter().map(|&i| uids[i]).collect();
            members.sort();
            groups.push(SemanticGroup {
                representative: uids[rep],
                members,
            });
        }
    }
    groups.sort_by_key(|g| g.representative);
    Ok((selection, groups))
}

/// Union-find over every pair in the cluster.
fn pairwise_components(members: &[usize], unit: &[Vec<f64>], thre: f64) -> Vec<Vec<usize>> {
    let m = members.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..m {
        for b in a + 1..m {
            if dot64(&unit[members[a]], &unit[members[b]]) > thre {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..m {
        let r = find(&mut parent, a);
        comps.entry(r).or_default().push(members[a]);
    }
    comps.into_values().collect()
}

/// Components grown breadth-first from the best-scored unvisited item,
/// without storing the similarity matrix.
fn greedy_components(members: &[usize], unit: &[Vec<f64>], uids: &[Uid], scores: &[f64], thre: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = members.to_vec();
    order.sort_by(|&a, &b| better(&(scores[a], uids[a]), &(scores[b], uids[b])));
    let mut unvisited: Vec<usize> = order;
    let mut comps = Vec::new();
    while !unvisited.is_empty() {
        let seed = unvisited.remove(0);
        let mut comp = vec![seed];
        let mut head = 0;
        while head < comp.len() {
            let cur = comp[head];
            head += 1;
            let mut rest = Vec::with_capacity(unvisited.len());
            for &j in &unvisited {
                if dot64(&unit[cur], &unit[j]) > thre {
                    comp.push(j);
                } else {
                    rest.push(j);
                }
            }
            unvisited = rest;
        }
        comps.push(comp);
    }
    comps
}

#[derive(Clone, Debug)]
pub struct SemDedupParams {
    pub k_clusters: usize,
    pub thre_sem: f64,
    pub score_column: ScoreColumn,
    pub seed: u64,
    pub max_iters: usize,
    pub pairwise_cap: usize,
}

/// Clusters the records' rows of `embeddings` with k-means, then groups
/// within clusters as in [`semantic_dedup_in_clusters`]. Records without an
/// embedding row or score are dropped with `missing_embedding` / `missing_score`.
pub fn semantic_dedup(records: &[&SampleRecord], embeddings: &EmbeddingMatrix, params: &SemDedupParams) -> Result<SemDedupOutcome> {
    let mut drops = Vec::new();
    let mut rows = Vec::new();
    let mut uids = Vec::new();
    let mut scores = Vec::new();
    for r in records {
        let Some(row) = r.embedding_row.filter(|&row| row < embeddings.len()) else {
            drops.push((r.uid, "missing_embedding"));
            continue;
        };
        let Some(s) = r.score(params.score_column) else {
            drops.push((r.uid, "missing_score"));
            continue;
        };
        rows.push(row);
        uids.push(r.uid);
        scores.push(s);
    }
    if uids.is_empty() {
        return Ok(SemDedupOutcome {
            selection: SelectionSet::new("semantic_dedup"),
            drops,
            ..Default::default()
        });
    }
    if params.k_clusters > uids.len() {
        return Err(Error::InvalidArgument(format!(
            "k_clusters = {} exceeds the {} records to deduplicate",
            params.k_clusters,
            uids.len()
        )));
    }
    let x = embeddings.select_rows(&rows);
    let model = kmeans_fit(&x, params.k_clusters, params.max_iters, params.seed)?;
    let labels = model.assign(&x)?;
    let (selection, groups) = semantic_dedup_in_clusters(&uids, &scores, &x, &labels, params.thre_sem, params.pairwise_cap)?;
    for u in &uids {
        if !selection.contains(u) {
            drops.push((*u, "semantic_duplicate"));
        }
    }
    Ok(SemDedupOutcome {
        selection,
        groups,
        labels,
        drops,
        model: Some(model),
    })
}

/// `[img; w_t · txt]`.
pub fn joint_embedding(img_emb: &[f32], txt_emb: &[f32], w_t: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(img_emb.len() + txt_emb.len());
    out.extend_from_slice(img_emb);
    out.extend(txt_emb.iter().map(|&t| w_t * t));
    out
}

/// Row-wise [`joint_embedding`] of two matrices with identical uid order.
pub fn joint_matrix(img: &EmbeddingMatrix, txt: &EmbeddingMatrix, w_t: f32) -> Result<EmbeddingMatrix> {
    if img.uids() != txt.uids() {
        return Err(Error::Data("image and text embeddings list different uids".into()));
    }
    let dim = img.dim() + txt.dim();
    let mut data = Vec::with_capacity(img.len() * dim);
    for (a, b) in img.rows().zip(txt.rows()) {
        data.extend(joint_embedding(a, b, w_t));
    }
    EmbeddingMatrix::new(dim, data, img.uids().to_vec())
}

/// Adds every `digit_flag = true` record at multiplicity 1; selected records
/// keep their multiplicity. Returns the merged set and the number of UIDs added.
pub fn merge_digit_subset(selection: &SelectionSet, records: &[SampleRecord]) -> (SelectionSet, usize) {
    let mut out = selection.clone().with_provenance("digit_merge");
    let mut added = 0;
    for r in records {
        if r.digit_flag == Some(true) && !out.contains(&r.uid) {
            out.insert(r.uid, 1).expect("multiplicity 1");
            added += 1;
        }
    }
    (out, added)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterHistogram {
    /// `(cluster, count)` by descending count, ties by cluster id.
    pub counts: Vec<(usize, usize)>,
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

/// Member count of every non-empty cluster.
pub fn cluster_size_histogram(labels: &[usize]) -> ClusterHistogram {
    let mut tally: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *tally.entry(l).or_default() += 1;
    }
    let mut counts: Vec<(usize, usize)> = tally.into_iter().collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = counts.len();
    if n == 0 {
        return ClusterHistogram {
            counts,
            min: 0,
            median: 0.0,
            max: 0,
        };
    }
    // counts are descending, so the median reads from the middle directly
    let median = if n % 2 == 1 {
        counts[n / 2].1 as f64
    } else {
        (counts[n / 2 - 1].1 + counts[n / 2].1) as f64 / 2.0
    };
    ClusterHistogram {
        min: counts[n - 1].1,
        median,
        max: counts[0].1,
        counts,
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct WeightLine {
    cluster: usize,
    weight: f64,
}

#[derive(Serialize)]
struct CountLine {
    cluster: usize,
    count: usize,
}

/// One `{"cluster", "weight"}` object per line.
pub fn write_importance_jsonl(path: &Path, importance: &ImportanceVector) -> Result<()> {
    write_jsonl(
        path,
        importance
            .weights
            .iter()
            .enumerate()
            .map(|(cluster, &weight)| WeightLine { cluster, weight }),
    )
}

/// One `{"cluster", "count"}` object per line, largest first.
pub fn write_histogram_jsonl(path: &Path, hist: &ClusterHistogram) -> Result<()> {
    write_jsonl(
        path,
        hist.counts.iter().map(|&(cluster, count)| CountLine { cluster, count }),
    )
}

/// A downstream task's image embeddings.
#[derive(Clone, Debug)]
pub struct DownstreamTask {
    pub name: String,
    pub embeddings: EmbeddingMatrix,
}

/// Reads a task manifest: one `name<TAB>prefix` line per task, where
/// `prefix.f32` / `prefix.uids` hold the embeddings. Relative prefixes are
/// resolved against the manifest's directory; `#` starts a comment line.
pub fn read_task_manifest(path: &Path, dim: usize) -> Result<Vec<DownstreamTask>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, prefix) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}:{}: expected `name<TAB>prefix`", path.display(), i + 1)))?;
        let prefix = PathBuf::from(prefix.trim());
        let prefix = if prefix.is_absolute() { prefix } else { base.join(prefix) };
        let (f32_path, uid_path) = crate::corpus::embedding_paths(&prefix);
        tasks.push(DownstreamTask {
            name: name.trim().to_string(),
            embeddings: ingest_embeddings(&f32_path, dim, &uid_path)?,
        });
    }
    Ok(tasks)
}
