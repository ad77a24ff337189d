//! Image-text agreement: similarity scores from ingested embeddings,
//! threshold filters on score columns and top-x% bucketing.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::corpus::{SampleRecord, ScoreColumn, SelectionSet, Uid};
use crate::error::{Error, Result};
use crate::vector::{cosine_similarity, l2_normalize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossModalConfig {
    pub flipped_clip_threshold: f64,
    /// Disabled unless set.
    pub itm_threshold: Option<f64>,
    pub score_temperature: f64,
    pub score_column: ScoreColumn,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        CrossModalConfig {
            flipped_clip_threshold: 0.19,
            itm_threshold: None,
            score_temperature: 1.0,
            score_column: ScoreColumn::FlippedClip,
        }
    }
}

impl CrossModalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.flipped_clip_threshold) {
            return Err(Error::Config(format!(
                "flipped_clip_threshold = {} must lie in [-1, 1]",
                self.flipped_clip_threshold
            )));
        }
        if let Some(t) = self.itm_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("itm_threshold = {t} must lie in [0, 1]")));
            }
        }
        if !(self.score_temperature.is_finite() && self.score_temperature > 0.0) {
            return Err(Error::Config(format!(
                "score_temperature = {} must be positive",
                self.score_temperature
            )));
        }
        Ok(())
    }
}

/// Cosine similarity of the normalized pair, times `temperature`.
pub fn pairwise_clip_score(img_emb: &[f32], txt_emb: &[f32], temperature: f64) -> Result<f64> {
    let a = l2_normalize(img_emb)?;
    let b = l2_normalize(txt_emb)?;
    Ok(cosine_similarity(&a, &b)? * temperature)
}

#[derive(Clone, Debug, Default)]
pub struct FilterOutcome {
    pub selection: SelectionSet,
    pub drops: Vec<(Uid, &'static str)>,
}

fn reason_for(column: ScoreColumn) -> &'static str {
    match column {
        ScoreColumn::Clip => "clip",
        ScoreColumn::FlippedClip => "flipped_clip",
        ScoreColumn::Itm => "itm",
    }
}

/// Keeps records with `score >= threshold` (`keep_geq`) or `score < threshold`
/// otherwise. Records lacking the column are dropped as `missing_score`.
pub fn threshold_filter<R: Borrow<SampleRecord>>(records: &[R], column: &str, threshold: f64, keep_geq: bool) -> Result<FilterOutcome> {
    let column: ScoreColumn = column.parse()?;
    Ok(scaled_filter(records, column, threshold, keep_geq, 1.0))
}

fn scaled_filter<R: Borrow<SampleRecord>>(records: &[R], column: ScoreColumn, threshold: f64, keep_geq: bool, scale: f64) -> FilterOutcome {
    let mut out = FilterOutcome {
        selection: SelectionSet::new(column.name()),
        drops: Vec::new(),
    };
    for r in records {
        let r = r.borrow();
        match r.score(column) {
            None => out.drops.push((r.uid, "missing_score")),
            Some(s) => {
                let s = s * scale;
                let keep = if keep_geq { s >= threshold } else { s < threshold };
                if keep {
                    out.selection.insert(r.uid, 1).expect("multiplicity 1");
                } else {
                    out.drops.push((r.uid, reason_for(column)));
                }
            }
        }
    }
    out
}

/// The primary-score threshold; `config.score_column` is normally the flipped score.
pub fn clip_stage<R: Borrow<SampleRecord>>(records: &[R], config: &CrossModalConfig) -> Result<FilterOutcome> {
    config.validate()?;
    Ok(scaled_filter(
        records,
        config.score_column,
        config.flipped_clip_threshold,
        true,
        config.score_temperature,
    ))
}

/// The ITM threshold, or a pass-through when none is configured.
pub fn itm_stage<R: Borrow<SampleRecord>>(records: &[R], config: &CrossModalConfig) -> Result<FilterOutcome> {
    config.validate()?;
    match config.itm_threshold {
        Some(t) => Ok(scaled_filter(records, ScoreColumn::Itm, t, true, 1.0)),
        None => Ok(FilterOutcome {
            selection: SelectionSet::from_uids("itm", records.iter().map(|r| r.borrow().uid)),
            drops: Vec::new(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buckets {
    /// Cumulative rank cut (exclusive end index) per requested percentile.
    pub cuts: Vec<usize>,
    /// `buckets[i]` holds ranks `cuts[i-1]..cuts[i]`, best first. A trailing
    /// bucket with the remainder is appended when the last percentile is below 100.
    pub buckets: Vec<Vec<Uid>>,
}

/// Nearest-rank cut for the top `percent`% of `n` items.
pub fn nearest_rank(percent: f64, n: usize) -> usize {
    let x = percent * n as f64 / 100.0;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Splits records by descending score (ties: lower uid first) at the
/// cumulative top-`p`% cuts in `percentiles` (strictly increasing, in (0, 100]).
pub fn score_bucketize(records: &[SampleRecord], column: ScoreColumn, percentiles: &[f64]) -> Result<Buckets> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot bucketize an empty corpus".into()));
    }
    if percentiles.is_empty() || percentiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("percentiles must be non-empty and strictly increasing".into()));
    }
    if percentiles.iter().any(|&p| !(p > 0.0 && p <= 100.0)) {
        return Err(Error::InvalidArgument("percentiles must lie in (0, 100]".into()));
    }
    let mut ranked: Vec<(f64, Uid)> = records
        .iter()
        .map(|r| {
            r.score(column)
                .map(|s| (s, r.uid))
                .ok_or_else(|| Error::Data(format!("record {} has no {column}", r.uid)))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let n = ranked.len();
    let mut cuts: Vec<usize> = percentiles.iter().map(|&p| nearest_rank(p, n)).collect();
    if *cuts.last().unwrap() < n {
        cuts.push(n);
    }
    let mut buckets = Vec::with_capacity(cuts.len());
    let mut start = 0;
    for &end in &cuts {
        buckets.push(ranked[start..end].iter().map(|&(_, u)| u).collect());
        start = end;
    }
    cuts.truncate(percentiles.len());
    Ok(Buckets { cuts, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(uid: u128, s: f64) -> SampleRecord {
        let mut r = SampleRecord::new(Uid(uid), "t", 10, 10);
        r.flipped_clip_score = Some(s);
        r
    }

    #[test]
    fn pairwise_examples() {
        assert!((pairwise_clip_score(&[0.3, 0.4], &[0.3, 0.4], 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pairwise_clip_score(&[1.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), 0.0);
        assert!((pairwise_clip_score(&[1.0, 0.0], &[0.6, 0.8], 1.0).unwrap() - 0.6).abs() < 1e-6);
        assert!((pairwise_clip_score(&[1.0, 0.0], &[0.6, 0.8], 2.0).unwrap() - 1.2).abs() < 1e-6);
        assert!(pairwise_clip_score(&[0.0, 0.0], &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn boundary_is_inclusive() {
        let below = f64::from_bits(0.19f64.to_bits() - 1);
        let recs = [scored(1, 0.19), scored(2, 0.1899), scored(3, below)];
        let out = threshold_filter(&recs, "flipped_clip_score", 0.19, true).unwrap();
        assert_eq!(out.selection.uids().collect::<Vec<_>>(), vec![Uid(1)]);
        assert_eq!(out.drops, vec![(Uid(2), "flipped_clip"), (Uid(3), "flipped_clip")]);
        assert!(matches!(threshold_filter(&recs, "nope", 0.1, true), Err(Error::Config(_))));
    }

    #[test]
    fn itm_after_clip() {
        let mut a = scored(1, 0.3);
        a.itm_score = Some(0.9);
        let mut b = scored(2, 0.3);
        b.itm_score = Some(0.05);
        let c = scored(3, 0.3);
        let cfg = CrossModalConfig {
            itm_threshold: Some(0.1),
            ..Default::default()
        };
        let recs = [a, b, c];
        assert_eq!(clip_stage(&recs, &cfg).unwrap().selection.unique_count(), 3);
        let out = itm_stage(&recs, &cfg).unwrap();
        assert_eq!(out.selection.uids().collect::<Vec<_>>(), vec![Uid(1)]);
        assert_eq!(out.drops, vec![(Uid(2), "itm"), (Uid(3), "missing_score")]);
        let off = itm_stage(&recs, &CrossModalConfig::default()).unwrap();
        assert_eq!(off.selection.unique_count(), 3);
    }

    #[test]
    fn bucket_examples() {
        let recs: Vec<_> = (0..10).map(|i| scored(i, i as f64 / 10.0)).collect();
        let b = score_bucketize(&recs, ScoreColumn::FlippedClip, &[30.0]).unwrap();
        assert_eq!(b.buckets[0], vec![Uid(9), Uid(8), Uid(7)]);
        assert_eq!(b.buckets[1].len(), 7);
        let all = score_bucketize(&recs, ScoreColumn::FlippedClip, &[100.0]).unwrap();
        assert_eq!(all.buckets.len(), 1);
        assert_eq!(all.buckets[0].len(), 10);

        let tie = [scored(5, 0.5), scored(2, 0.5), scored(1, 0.1)];
        let b = score_bucketize(&tie, ScoreColumn::FlippedClip, &[33.0]).unwrap();
        assert_eq!(b.buckets[0], vec![Uid(2)]);
        assert!(score_bucketize(&[], ScoreColumn::FlippedClip, &[10.0]).is_err());
        assert!(score_bucketize(&tie, ScoreColumn::FlippedClip, &[50.0, 20.0]).is_err());
    }

    #[test]
    fn deciles_match_sort_oracle() {
        let recs: Vec<_> = (0..37u128).map(|i| scored(i * 7919 % 101, ((i * 31) % 17) as f64 / 17.0)).collect();
        let pct: Vec<f64> = (1..=10).map(|i| i as f64 * 10.0).collect();
        let b = score_bucketize(&recs, ScoreColumn::FlippedClip, &pct).unwrap();
        let mut oracle: Vec<_> = recs.iter().map(|r| (r.flipped_clip_score.unwrap(), r.uid)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let flat: Vec<Uid> = b.buckets.concat();
        assert_eq!(flat, oracle.iter().map(|x| x.1).collect::<Vec<_>>());
        for (i, &c) in b.cuts.iter().enumerate() {
            let exact = (37 * (i + 1)) as f64 / 10.0;
            assert_eq!(c, exact.ceil() as usize);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_in_threshold(scores in proptest::collection::vec(-1.0f64..1.0, 0..40), t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let recs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| scored(i as u128, s)).collect();
                let a = threshold_filter(&recs, "flipped_clip_score", lo, true).unwrap().selection;
                let b = threshold_filter(&recs, "flipped_clip_score", hi, true).unwrap().selection;
                prop_assert!(b.uids().all(|u| a.contains(&u)));
            }

            #[test]
            fn buckets_partition(scores in proptest::collection::vec(0.0f64..1.0, 1..60), mut pct in proptest::collection::btree_set(1u32..=100, 1..6)) {
                pct.insert(100);
                let pct: Vec<f64> = pct.into_iter().map(f64::from).collect();
                let recs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| scored(i as u128, s)).collect();
                let b = score_bucketize(&recs, ScoreColumn::FlippedClip, &pct).unwrap();
                let mut flat: Vec<Uid> = b.buckets.concat();
                prop_assert_eq!(flat.len(), recs.len());
                flat.sort();
                flat.dedup();
                prop_assert_eq!(flat.len(), recs.len());
            }

            #[test]
            fn pairwise_symmetric(a in proptest::collection::vec(0.1f32..1.0, 4), b in proptest::collection::vec(-1.0f32..1.0, 4)) {
                let x = pairwise_clip_score(&a, &b, 1.0);
                let y = pairwise_clip_score(&b, &a, 1.0);
                if let (Ok(x), Ok(y)) = (x, y) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
