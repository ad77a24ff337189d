//! Shard packing that keeps the copies of a duplicated UID in different shards.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{write_selection, SelectionSet, Uid};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    pub shard_size: usize,
    pub seed: u64,
    /// UIDs per shard, in shard order.
    pub assignments: Vec<Vec<Uid>>,
}

impl ShardPlan {
    pub fn shard_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// One line per shard: `shard_id<TAB>uid,uid,...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, shard) in self.assignments.iter().enumerate() {
            out.push_str(&i.to_string());
            out.push('\t');
            let uids: Vec<String> = shard.iter().map(Uid::to_string).collect();
            out.push_str(&uids.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses a plan file body. `shard_size` and `seed` are not stored in the
    /// file and must be supplied.
    pub fn parse_text(text: &str, shard_size: usize, seed: u64) -> Result<Self> {
        let mut assignments = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (id, uids) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("plan line {}: expected `shard_id<TAB>uids`", i + 1)))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(Error::Data(format!("plan line {}: expected shard id {i}, found {id:?}", i + 1)));
            }
            let shard = if uids.is_empty() {
                Vec::new()
            } else {
                uids.split(',').map(str::parse).collect::<Result<Vec<Uid>>>()?
            };
            assignments.push(shard);
        }
        Ok(ShardPlan {
            shard_size,
            seed,
            assignments,
        })
    }
}

/// Splits the selection's copies into `ceil(total / shard_size)` shards of
/// near-equal size.
///
/// UIDs are dealt by descending multiplicity (then uid) onto a cyclic walk
/// over a seeded shuffle of the shards, so the copies of one UID always land
/// on consecutive, hence distinct, shards. Each shard is then shuffled.
pub fn pack_shards(selection: &SelectionSet, shard_size: usize, seed: u64) -> Result<ShardPlan> {
    if shard_size == 0 {
        return Err(Error::InvalidArgument("shard_size must be >= 1".into()));
    }
    let total = selection.total_count() as usize;
    let shard_count = total.div_ceil(shard_size);
    if let Some((uid, m)) = selection.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))) {
        if m as usize > shard_count {
            return Err(Error::CannotSeparate {
                uid: uid.to_string(),
                multiplicity: m,
                shards: shard_count,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..shard_count).collect();
    order.shuffle(&mut rng);

    let mut items: Vec<(Uid, u32)> = selection.iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut assignments: Vec<Vec<Uid>> = vec![Vec::new(); shard_count];
    let mut slot = 0usize;
    for (uid, m) in items {
        for _ in 0..m {
            assignments[order[slot % shard_count]].push(uid);
            slot += 1;
        }
    }
    for shard in &mut assignments {
        shard.shuffle(&mut rng);
    }
    Ok(ShardPlan {
        shard_size,
        seed,
        assignments,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    RepeatedInShard { shard: usize, uid: Uid },
    CountMismatch { uid: Uid, expected: u32, found: u32 },
    OversizedShard { shard: usize, size: usize, limit: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RepeatedInShard { shard, uid } => write!(f, "shard {shard} holds {uid} more than once"),
            Violation::CountMismatch { uid, expected, found } => {
                write!(f, "{uid} has {found} copies in the plan, selection says {expected}")
            }
            Violation::OversizedShard { shard, size, limit } => {
                write!(f, "shard {shard} has {size} entries, limit {limit}")
            }
        }
    }
}

/// Checks every plan invariant; the violations are returned sorted.
pub fn validate_plan(plan: &ShardPlan, selection: &SelectionSet) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut counts: BTreeMap<Uid, u32> = BTreeMap::new();
    for (i, shard) in plan.assignments.iter().enumerate() {
        if shard.len() > plan.shard_size {
            violations.push(Violation::OversizedShard {
                shard: i,
                size: shard.len(),
                limit: plan.shard_size,
            });
        }
        let mut seen = HashSet::new();
        let mut repeated = Vec::new();
        for &uid in shard {
            *counts.entry(uid).or_default() += 1;
            if !seen.insert(uid) {
                repeated.push(uid);
            }
        }
        repeated.sort();
        repeated.dedup();
        violations.extend(repeated.into_iter().map(|uid| Violation::RepeatedInShard { shard: i, uid }));
    }
    let mut mismatches = Vec::new();
    for (uid, expected) in selection.iter() {
        let found = counts.remove(&uid).unwrap_or(0);
        if found != expected {
            mismatches.push(Violation::CountMismatch { uid, expected, found });
        }
    }
    for (uid, found) in counts {
        mismatches.push(Violation::CountMismatch { uid, expected: 0, found });
    }
    mismatches.sort_by_key(|v| match v {
        Violation::CountMismatch { uid, .. } => *uid,
        _ => unreachable!(),
    });
    violations.extend(mismatches);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

pub fn write_plan(plan: &ShardPlan, path: &Path) -> Result<()> {
    std::fs::write(path, plan.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_plan(path: &Path, shard_size: usize, seed: u64) -> Result<ShardPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ShardPlan::parse_text(&text, shard_size, seed)
}

/// Writes `shard_NNNNN.sel` per shard (every UID at multiplicity 1) and
/// returns the paths in shard order.
pub fn write_shard_manifests(plan: &ShardPlan, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    plan.assignments
        .par_iter()
        .enumerate()
        .map(|(i, shard)| {
            let path = dir.join(format!("shard_{i:05}.sel"));
            let set = SelectionSet::from_uids(format!("shard_{i}"), shard.iter().copied());
            write_selection(&set, &path)?;
            Ok(path)
        })
        .collect()
}
