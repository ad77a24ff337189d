//! IVF-PQ approximate nearest-neighbour index and near-duplicate removal.
//!
//! The index keeps a coarse k-means quantizer whose centroids key the
//! inverted lists, and a product quantizer trained on the raw embeddings.
//! Distances between a raw query and an indexed entry are asymmetric:
//! `‖x − decode(codes(y))‖`.
//!
//! Near-duplicate removal walks the records in ingest order. For each record
//! `x` not yet marked for removal it looks up the duplicates among its
//! approximate neighbours (relative criterion on the ADC distances), removes
//! every duplicate whose score is at most `gamma`, and when `x` itself scores
//! above `gamma` keeps `x` and removes the high-scoring duplicates that carry
//! a byte-identical caption.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingMatrix, SampleRecord, ScoreColumn, SelectionSet, Uid};
use crate::error::{Error, Result};
use crate::vector::pq::{read_f32s, read_u32};
use crate::vector::{kmeans_fit, pq_train, squared_l2, AdcTable, ClusterModel, PqCodebook};

const INDEX_MAGIC: &[u8; 4] = b"IVPQ";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvfPqParams {
    pub nlist: usize,
    pub m: usize,
    pub nbits: u32,
    pub nprobe: usize,
    pub k_neighbors: usize,
    pub max_iters: usize,
}

impl IvfPqParams {
    /// Web-scale configuration (65,536 lists, 4 chunks of 8 bits, 2 probes, 1,024 neighbours).
    pub fn production() -> Self {
        IvfPqParams {
            nlist: 65_536,
            m: 4,
            nbits: 8,
            nprobe: 2,
            k_neighbors: 1024,
            max_iters: 25,
        }
    }

    /// Scaled for `n` vectors: `nlist ≈ sqrt(n)`, `k_neighbors = min(1024, n − 1)`,
    /// and `nbits` lowered when `n` is too small to train 256 sub-centroids.
    pub fn desk_scale(n: usize) -> Self {
        let nlist = ((n as f64).sqrt().round() as usize).max(1);
        let mut nbits = 8;
        while nbits > 1 && (1usize << nbits) > n {
            nbits -= 1;
        }
        IvfPqParams {
            nlist,
            m: 4,
            nbits,
            nprobe: 2,
            k_neighbors: n.saturating_sub(1).min(1024),
            max_iters: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub uid: Uid,
    pub distance: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    /// Ascending by distance, ties by UID; never contains the query's own UID.
    pub neighbors: Vec<Neighbor>,
    /// ADC distance from the query to its own quantized entry.
    pub d_self: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct InvertedList {
    uids: Vec<Uid>,
    codes: Vec<u16>,
}

#[derive(Clone, Debug)]
pub struct IvfPqIndex {
    params: IvfPqParams,
    coarse: ClusterModel,
    codebook: PqCodebook,
    lists: Vec<InvertedList>,
    locator: HashMap<Uid, (u32, u32)>,
}

pub fn build_index(x: &EmbeddingMatrix, params: IvfPqParams, seed: u64) -> Result<IvfPqIndex> {
    if x.len() < params.nlist {
        return Err(Error::InvalidArgument(format!(
            "{} vectors cannot train {} inverted lists",
            x.len(),
            params.nlist
        )));
    }
    if params.m == 0 || x.dim() % params.m != 0 {
        return Err(Error::InvalidArgument(format!(
            "dim {} is not divisible by m = {}",
            x.dim(),
            params.m
        )));
    }
    let coarse = kmeans_fit(x, params.nlist, params.max_iters, seed)?;
    let codebook = pq_train(x, params.m, params.nbits, seed.wrapping_add(1))?;

    let placed: Vec<(usize, Vec<u16>)> = x
        .as_slice()
        .par_chunks_exact(x.dim())
        .map(|row| (coarse.nearest(row).0, codebook.encode_unchecked(row)))
        .collect();

    let mut lists = vec![InvertedList::default(); params.nlist];
    let mut locator = HashMap::with_capacity(x.len());
    for (&uid, (list, codes)) in x.uids().iter().zip(placed) {
        let l = &mut lists[list];
        if locator.insert(uid, (list as u32, l.uids.len() as u32)).is_some() {
            return Err(Error::Data(format!("uid {uid} indexed twice")));
        }
        l.uids.push(uid);
        l.codes.extend_from_slice(&codes);
    }
    Ok(IvfPqIndex {
        params,
        coarse,
        codebook,
        lists,
        locator,
    })
}

impl IvfPqIndex {
    pub fn params(&self) -> &IvfPqParams {
        &self.params
    }

    pub fn coarse(&self) -> &ClusterModel {
        &self.coarse
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn len(&self) -> usize {
        self.locator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locator.is_empty()
    }

    pub fn list_len(&self, list: usize) -> usize {
        self.lists[list].uids.len()
    }

    pub fn list_uids(&self, list: usize) -> &[Uid] {
        &self.lists[list].uids
    }

    pub fn list_of(&self, uid: &Uid) -> Option<usize> {
        self.locator.get(uid).map(|&(l, _)| l as usize)
    }

    pub fn codes_of(&self, uid: &Uid) -> Option<&[u16]> {
        let &(l, p) = self.locator.get(uid)?;
        let m = self.params.m;
        let p = p as usize;
        Some(&self.lists[l as usize].codes[p * m..(p + 1) * m])
    }

    pub fn set_nprobe(&mut self, nprobe: usize) {
        self.params.nprobe = nprobe;
    }

    pub fn set_k_neighbors(&mut self, k: usize) {
        self.params.k_neighbors = k;
    }

    /// The `nprobe` coarse lists nearest to `x` (ties by list index).
    pub fn probe_lists(&self, x: &[f32]) -> Vec<usize> {
        let mut order: Vec<(f32, usize)> = (0..self.coarse.k())
            .map(|c| (squared_l2(x, self.coarse.centroid(c)), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order
            .into_iter()
            .take(self.params.nprobe.min(self.coarse.k()))
            .map(|(_, c)| c)
            .collect()
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.coarse.dim() {
            return Err(Error::DimMismatch {
                expected: self.coarse.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn scan(&self, table: &AdcTable, lists: &[usize], exclude: Option<Uid>, k: usize) -> Vec<Neighbor> {
        let m = self.params.m;
        let mut out: Vec<Neighbor> = Vec::new();
        for &l in lists {
            let list = &self.lists[l];
            for (uid, codes) in list.uids.iter().zip(list.codes.chunks_exact(m)) {
                if Some(*uid) == exclude {
                    continue;
                }
                out.push(Neighbor {
                    uid: *uid,
                    distance: table.distance(codes),
                });
            }
        }
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.uid.cmp(&b.uid)));
        out.truncate(k);
        out
    }

    /// Approximate k nearest neighbours of an arbitrary vector.
    pub fn search(&self, x: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.check_dim(x)?;
        let table = self.codebook.adc_table(x)?;
        Ok(self.scan(&table, &self.probe_lists(x), None, k))
    }

    /// Neighbours of an indexed vector, excluding itself, plus its own ADC distance.
    pub fn query_neighbors(&self, x: &[f32], uid_of_x: Uid) -> Result<QueryResult> {
        self.check_dim(x)?;
        let own = self
            .codes_of(&uid_of_x)
            .ok_or_else(|| Error::InvalidArgument(format!("uid {uid_of_x} is not indexed")))?;
        let table = self.codebook.adc_table(x)?;
        let d_self = table.distance(own);
        let neighbors = self.scan(&table, &self.probe_lists(x), Some(uid_of_x), self.params.k_neighbors);
        Ok(QueryResult { neighbors, d_self })
    }

    /// Serializes to a single little-endian file: magic, header
    /// (`nlist`, `m`, `nbits`, `dim`, `nprobe`, `k_neighbors`), coarse
    /// centroids, PQ codebook, then each inverted list as
    /// `len, (uid as u128, codes as u16 × m) × len`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        let p = &self.params;
        for v in [p.nlist, p.m, p.nbits as usize, self.coarse.dim(), p.nprobe, p.k_neighbors] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in self.coarse.centroids() {
            w.write_all(&v.to_le_bytes())?;
        }
        self.codebook.write_to(w)?;
        for list in &self.lists {
            w.write_all(&(list.uids.len() as u32).to_le_bytes())?;
            for (uid, codes) in list.uids.iter().zip(list.codes.chunks_exact(p.m)) {
                w.write_all(&uid.0.to_le_bytes())?;
                for c in codes {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::Data(format!("truncated index: {e}")))?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Data("not an IVF-PQ index file".into()));
        }
        let mut header = [0usize; 6];
        for h in header.iter_mut() {
            *h = read_u32(r)? as usize;
        }
        let [nlist, m, nbits, dim, nprobe, k_neighbors] = header;
        let coarse = ClusterModel::from_centroids(dim, read_f32s(r, nlist * dim)?)?;
        let codebook = PqCodebook::read_from(r)?;
        if codebook.m() != m || codebook.nbits() as usize != nbits || codebook.dim() != dim {
            return Err(Error::Data("codebook header disagrees with index header".into()));
        }
        let mut lists = Vec::with_capacity(nlist);
        let mut locator = HashMap::new();
        for l in 0..nlist {
            let len = read_u32(r)? as usize;
            let mut list = InvertedList::default();
            for p in 0..len {
                let mut ub = [0u8; 16];
                r.read_exact(&mut ub).map_err(|e| Error::Data(format!("truncated index: {e}")))?;
                let uid = Uid(u128::from_le_bytes(ub));
                for _ in 0..m {
                    let mut cb = [0u8; 2];
                    r.read_exact(&mut cb).map_err(|e| Error::Data(format!("truncated index: {e}")))?;
                    list.codes.push(u16::from_le_bytes(cb));
                }
                list.uids.push(uid);
                locator.insert(uid, (l as u32, p as u32));
            }
            lists.push(list);
        }
        Ok(IvfPqIndex {
            params: IvfPqParams {
                nlist,
                m,
                nbits: nbits as u32,
                nprobe,
                k_neighbors,
                max_iters: 0,
            },
            coarse,
            codebook,
            lists,
            locator,
        })
    }
}

/// How the relative duplicate ratio is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicateCriterion {
    /// `(d_xy − d_self) / d_self < tau`: `y` is at most `tau` relatively
    /// farther from `x` than `x`'s own quantization error.
    #[default]
    Relative,
    /// `(d_self − d_xy) / d_self < tau`, the sign-inverted form.
    /// Flags arbitrarily distant neighbours; kept for comparison only.
    Inverted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub tau: f64,
    pub gamma: f64,
    pub epsilon_abs: f64,
    pub criterion: DuplicateCriterion,
    pub score_column: ScoreColumn,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            tau: 0.03,
            gamma: 0.19,
            epsilon_abs: 1e-9,
            criterion: DuplicateCriterion::Relative,
            score_column: ScoreColumn::FlippedClip,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau = {} must be > 0", self.tau)));
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} must lie in [-1, 1]", self.gamma)));
        }
        if !(self.epsilon_abs > 0.0) {
            return Err(Error::Config(format!("epsilon_abs = {} must be > 0", self.epsilon_abs)));
        }
        Ok(())
    }
}

pub fn is_duplicate(d_self: f64, d_xy: f64, config: &DedupConfig) -> Result<bool> {
    if !(d_self >= 0.0) || !(d_xy >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distances must be non-negative (d_self = {d_self}, d_xy = {d_xy})"
        )));
    }
    if d_self < config.epsilon_abs {
        return Ok(d_xy < config.epsilon_abs);
    }
    let ratio = match config.criterion {
        DuplicateCriterion::Relative => (d_xy - d_self) / d_self,
        DuplicateCriterion::Inverted => (d_self - d_xy) / d_self,
    };
    Ok(ratio < config.tau)
}

#[derive(Clone, Debug, Default)]
pub struct NearDupOutcome {
    /// Kept records at multiplicity 1.
    pub selection: SelectionSet,
    /// Records marked for removal as someone's duplicate.
    pub removed: BTreeSet<Uid>,
    /// Every input record not kept, with a machine-readable reason.
    pub drops: Vec<(Uid, &'static str)>,
}

/// Near-duplicate removal over `records` in the given order.
///
/// Records lacking an embedding row or the configured score are dropped with
/// `missing_embedding` / `missing_score` and do not take part; neighbours
/// outside the participating set are ignored.
pub fn near_duplicate_removal(
    records: &[SampleRecord],
    embeddings: &EmbeddingMatrix,
    index: &IvfPqIndex,
    config: &DedupConfig,
) -> Result<NearDupOutcome> {
    config.validate()?;
    let mut drops = Vec::new();
    let mut eligible: Vec<(&SampleRecord, usize, f64)> = Vec::with_capacity(records.len());
    for r in records {
        let Some(row) = r.embedding_row else {
            drops.push((r.uid, "missing_embedding"));
            continue;
        };
        let Some(score) = r.score(config.score_column) else {
            drops.push((r.uid, "missing_score"));
            continue;
        };
        if row >= embeddings.len() || embeddings.uids()[row] != r.uid {
            return Err(Error::Data(format!(
                "record {} points at embedding row {row} which does not carry its uid",
                r.uid
            )));
        }
        eligible.push((r, row, score));
    }

    let members: HashMap<Uid, (f64, &str)> = eligible.iter().map(|(r, _, s)| (r.uid, (*s, r.text.as_str()))).collect();

    // Duplicate candidates are looked up in parallel; the keep/remove walk below is sequential.
    let duplicates: Vec<Vec<Uid>> = eligible
        .par_iter()
        .map(|(r, row, _)| -> Result<Vec<Uid>> {
            let q = index.query_neighbors(embeddings.row(*row), r.uid)?;
            let mut dups = Vec::new();
            for n in q.neighbors {
                if members.contains_key(&n.uid) && is_duplicate(q.d_self as f64, n.distance as f64, config)? {
                    dups.push(n.uid);
                }
            }
            Ok(dups)
        })
        .collect::<Result<_>>()?;

    let gamma = config.gamma;
    let mut kept: Vec<Uid> = Vec::new();
    let mut removed: HashSet<Uid> = HashSet::new();
    for ((x, _, score_x), dups) in eligible.iter().zip(&duplicates) {
        if removed.contains(&x.uid) {
            continue;
        }
        if dups.is_empty() {
            kept.push(x.uid);
            continue;
        }
        for y in dups {
            if members[y].0 <= gamma {
                removed.insert(*y);
            }
        }
        if *score_x > gamma {
            kept.push(x.uid);
            for y in dups {
                let (score_y, text_y) = members[y];
                if score_y > gamma && text_y == x.text {
                    removed.insert(*y);
                }
            }
        }
    }

    let kept_set: HashSet<Uid> = kept.iter().copied().filter(|u| !removed.contains(u)).collect();
    for (x, _, _) in &eligible {
        if kept_set.contains(&x.uid) {
            continue;
        }
        let reason = if removed.contains(&x.uid) {
            "near_duplicate"
        } else {
            "duplicate_low_score"
        };
        drops.push((x.uid, reason));
    }
    Ok(NearDupOutcome {
        selection: SelectionSet::from_uids("near_dedup", kept_set),
        removed: removed.into_iter().collect(),
        drops,
    })
}
