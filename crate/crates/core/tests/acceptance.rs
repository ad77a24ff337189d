//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every expected value comes from a reference
//! implementation in this file, not from the library.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use itcurate::align::{
    cluster_importance, group_by_label, interpolated_weights, quality_duplicate, semantic_dedup,
    semantic_dedup_in_clusters, SemDedupParams,
};
use itcurate::ann::{build_index, near_duplicate_removal, DedupConfig, IvfPqIndex, IvfPqParams};
use itcurate::corpus::{read_selection, EmbeddingMatrix, SampleRecord, ScoreColumn, SelectionSet, Uid};
use itcurate::crossmodal::{clip_stage, CrossModalConfig};
use itcurate::pipeline::config::DESK_SCALE;
use itcurate::pipeline::synthetic::{generate, read_labels, write_corpus, Label, SyntheticSpec};
use itcurate::pipeline::{run_pipeline, PipelineConfig, Stages};
use itcurate::shard::{pack_shards, validate_plan};
use itcurate::unimodal::{apply_image_rules, ImageRuleConfig, Verdict};
use itcurate::vector::{kmeans_fit, ClusterModel};
use itcurate::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_matrix(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    let data: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let uids = (0..n).map(|i| Uid(i as u128 + 1)).collect();
    EmbeddingMatrix::new(dim, data, uids).unwrap()
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    dot / (na * nb)
}

// 1 ------------------------------------------------------------------------

fn ann_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_matrix(10_000, 32, &mut rng);
    let mut params = IvfPqParams::desk_scale(x.len());
    params.nprobe = params.nlist;
    let index = build_index(&x, params, 1).map_err(|e| e.to_string())?;
    check_inertia(index.coarse(), "coarse quantizer")?;
    let k = params.k_neighbors;
    let decoded: Vec<Vec<f32>> = x
        .uids()
        .iter()
        .map(|u| index.codebook().decode(index.codes_of(u).unwrap()).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let qi = rng.gen_range(0..x.len());
        let quid = x.uids()[qi];
        let q = index.query_neighbors(x.row(qi), quid).map_err(|e| e.to_string())?;
        let mut oracle: Vec<(f64, Uid)> = (0..x.len())
            .filter(|&j| j != qi)
            .map(|j| (l2(x.row(qi), &decoded[j]), x.uids()[j]))
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        oracle.truncate(k);
        ensure!(q.neighbors.len() == k, "query {qi}: {} neighbours, expected {k}", q.neighbors.len());
        let d_self = l2(x.row(qi), &decoded[qi]);
        ensure!((q.d_self as f64 - d_self).abs() <= 1e-5, "query {qi}: d_self {} vs {d_self}", q.d_self);
        for (got, want) in q.neighbors.iter().zip(&oracle) {
            let diff = (got.distance as f64 - want.0).abs();
            worst = worst.max(diff);
            ensure!(diff <= 1e-5, "query {qi}: distance {} vs {}", got.distance, want.0);
        }
        // Exact set equality, except that members tied with the k-th distance
        // to within the tolerance may trade places.
        let kth = oracle[k - 1].0;
        let got: HashSet<Uid> = q.neighbors.iter().map(|n| n.uid).collect();
        let exact: HashMap<Uid, f64> = (0..x.len()).map(|j| (x.uids()[j], l2(x.row(qi), &decoded[j]))).collect();
        for (d, u) in &oracle {
            ensure!(*d >= kth - 1e-5 || got.contains(u), "query {qi}: missing {u} at {d}");
        }
        for u in &got {
            ensure!(exact[u] <= kth + 1e-5, "query {qi}: extra {u} at {}", exact[u]);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("100 queries, k = {k}, max |Δd| = {worst:.2e}, {secs:.1}s"))
}

// 2 ------------------------------------------------------------------------

struct DupCorpus {
    records: Vec<SampleRecord>,
    embeddings: EmbeddingMatrix,
    groups: Vec<Vec<Uid>>,
}

fn dup_corpus(seed: u64) -> DupCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 16;
    let mut rows: Vec<(Vec<f32>, String, f64, Option<usize>)> = Vec::new();
    let n_groups = 40;
    for g in 0..n_groups {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let score = rng.gen_range(0.2..0.5);
        for _ in 0..rng.gen_range(2..=4) {
            rows.push((v.clone(), format!("group caption {g}"), score, Some(g)));
        }
    }
    // Near copies with mixed scores; some share text.
    while rows.len() < 160 {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let text = format!("pair caption {}", rows.len());
        for _ in 0..2 {
            let w: Vec<f32> = v.iter().map(|x| x + rng.gen_range(-1e-3..1e-3)).collect();
            let t = if rng.gen_bool(0.5) { text.clone() } else { format!("{text} variant {}", rng.gen::<u16>()) };
            rows.push((w, t, rng.gen_range(0.0..0.5), None));
        }
    }
    while rows.len() < 500 {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        rows.push((v, format!("caption {}", rng.gen_range(0..300)), rng.gen_range(0.0..0.5), None));
    }
    rows.shuffle(&mut rng);
    let mut groups = vec![Vec::new(); n_groups];
    let mut records = Vec::new();
    let mut data = Vec::new();
    let mut uids = Vec::new();
    for (i, (v, text, score, g)) in rows.into_iter().enumerate() {
        let uid = Uid(rng.gen::<u128>() | 1);
        let mut r = SampleRecord::new(uid, text, 100, 100);
        r.flipped_clip_score = Some(score);
        r.embedding_row = Some(i);
        if let Some(g) = g {
            groups[g].push(uid);
        }
        records.push(r);
        data.extend(v);
        uids.push(uid);
    }
    DupCorpus {
        records,
        embeddings: EmbeddingMatrix::new(dim, data, uids).unwrap(),
        groups,
    }
}

/// Near-duplicate removal written line by line from the published algorithm.
/// The returned set is S without S_remove.
fn alg1_reference(c: &DupCorpus, index: &IvfPqIndex, tau: f64, gamma: f64, eps: f64) -> BTreeSet<Uid> {
    let score: HashMap<Uid, f64> = c.records.iter().map(|r| (r.uid, r.flipped_clip_score.unwrap())).collect();
    let text: HashMap<Uid, &str> = c.records.iter().map(|r| (r.uid, r.text.as_str())).collect();
    let mut s: Vec<Uid> = Vec::new();
    let mut s_remove: HashSet<Uid> = HashSet::new();
    for x in &c.records {
        if s_remove.contains(&x.uid) {
            continue;
        }
        let q = index
            .query_neighbors(c.embeddings.row(x.embedding_row.unwrap()), x.uid)
            .unwrap();
        let d_self = q.d_self as f64;
        let y_n: Vec<Uid> = q
            .neighbors
            .iter()
            .filter(|n| {
                let d_xy = n.distance as f64;
                if d_self < eps {
                    d_xy < eps
                } else {
                    (d_xy - d_self) / d_self < tau
                }
            })
            .map(|n| n.uid)
            .collect();
        if y_n.is_empty() {
            s.push(x.uid);
        } else {
            for y in &y_n {
                if score[y] <= gamma {
                    s_remove.insert(*y);
                }
            }
            if score[&x.uid] > gamma {
                s.push(x.uid);
                for y in &y_n {
                    if score[y] > gamma && text[y] == text[&x.uid] {
                        s_remove.insert(*y);
                    }
                }
            }
        }
    }
    s.into_iter().filter(|u| !s_remove.contains(u)).collect()
}

fn alg1_oracle() -> Outcome {
    let cfg = DedupConfig::default();
    let mut removed = 0;
    for seed in 0..50 {
        let c = dup_corpus(seed);
        let index = build_index(&c.embeddings, IvfPqParams::desk_scale(c.records.len()), seed).unwrap();
        let got = near_duplicate_removal(&c.records, &c.embeddings, &index, &cfg).map_err(|e| e.to_string())?;
        let want = alg1_reference(&c, &index, cfg.tau, cfg.gamma, cfg.epsilon_abs);
        let got_set: BTreeSet<Uid> = got.selection.uids().collect();
        ensure!(
            got_set == want,
            "seed {seed}: {} kept vs {} in the reference ({} differ)",
            got_set.len(),
            want.len(),
            got_set.symmetric_difference(&want).count()
        );
        for (g, members) in c.groups.iter().enumerate() {
            let survivors = members.iter().filter(|u| got_set.contains(u)).count();
            ensure!(survivors == 1, "seed {seed}: exact-copy group {g} kept {survivors} of {}", members.len());
        }
        removed += c.records.len() - got_set.len();
    }
    Ok(format!("50 seeds identical to the reference, {removed} removals in total"))
}

// 3 ------------------------------------------------------------------------

/// Per-task vote normalization then a global one, as in the published
/// pseudocode; a task whose images clear no centroid contributes nothing.
fn importance_reference(centroids: &[Vec<f32>], tasks: &[Vec<Vec<f32>>], thre: f64) -> Vec<f64> {
    let k = centroids.len();
    let mut total = vec![0.0f64; k];
    for images in tasks {
        let mut imp = vec![0.0f64; k];
        for img in images {
            let valid: Vec<f64> = centroids
                .iter()
                .map(|c| if cos(c, img) > thre { 1.0 } else { 0.0 })
                .collect();
            let sum: f64 = valid.iter().sum();
            if sum != 0.0 {
                for i in 0..k {
                    imp[i] += valid[i] / sum;
                }
            }
        }
        let s: f64 = imp.iter().sum();
        if s != 0.0 {
            for i in 0..k {
                total[i] += imp[i] / s;
            }
        }
    }
    let s: f64 = total.iter().sum();
    if s == 0.0 {
        return total;
    }
    total.iter().map(|v| v / s).collect()
}

fn importance_oracle() -> Outcome {
    let worked = ClusterModel::from_centroids(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let task = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
    let iv = cluster_importance(&worked, &[task], 0.72).map_err(|e| e.to_string())?;
    ensure!(iv.weights == vec![0.5, 0.5], "worked example gave {:?}", iv.weights);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut zero = 0;
    for inst in 0..200 {
        let dim = rng.gen_range(2..=6);
        let k = rng.gen_range(1..=50);
        let centroids: Vec<Vec<f32>> = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
        let tasks: Vec<Vec<Vec<f32>>> = (0..rng.gen_range(1..=5))
            .map(|_| {
                (0..rng.gen_range(1..=100))
                    .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                    .collect()
            })
            .collect();
        let model = ClusterModel::from_centroids(dim, centroids.iter().flatten().copied().collect()).unwrap();
        let mats: Vec<EmbeddingMatrix> = tasks.iter().map(|t| EmbeddingMatrix::from_rows(t).unwrap()).collect();
        let got = cluster_importance(&model, &mats, 0.72).map_err(|e| e.to_string())?;
        let want = importance_reference(&centroids, &tasks, 0.72);
        if want.iter().all(|&w| w == 0.0) {
            zero += 1;
        }
        for (g, w) in got.weights.iter().zip(&want) {
            worst = worst.max((g - w).abs());
            ensure!((g - w).abs() <= 1e-9, "instance {inst}: {g} vs {w}");
        }
    }
    Ok(format!("worked example (0.5, 0.5); 200 instances, max |Δ| = {worst:.1e}, {zero} all-zero"))
}

// 4 ------------------------------------------------------------------------

fn quality_duplication() -> Outcome {
    ensure!(interpolated_weights(5, 1, 2) == vec![1, 1, 2, 2, 2], "N = 5 gave {:?}", interpolated_weights(5, 1, 2));
    for n in 2..=3000usize {
        let w = interpolated_weights(n, 1, 2);
        ensure!(w.len() == n, "N = {n}: {} weights", w.len());
        ensure!(w[0] == 1 && w[n - 1] == 2, "N = {n}: endpoints {} {}", w[0], w[n - 1]);
        ensure!(w.windows(2).all(|p| p[0] <= p[1]), "N = {n}: not non-decreasing");
        for (i, &v) in w.iter().enumerate() {
            // round(1 + i/(N-1)) with halves up is 2 exactly when 2i >= N-1.
            let want = if 2 * i >= n - 1 { 2 } else { 1 };
            ensure!(v == want, "N = {n}, rank {}: {v} vs {want}", i + 1);
        }
    }
    // Through records: multiplicity follows score rank within a cluster.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [2usize, 5, 17, 200] {
        let recs: Vec<SampleRecord> = (0..n)
            .map(|i| {
                let mut r = SampleRecord::new(Uid(i as u128 + 1), "t", 1, 1);
                r.flipped_clip_score = Some(rng.gen());
                r
            })
            .collect();
        let refs: Vec<&SampleRecord> = recs.iter().collect();
        let sel = quality_duplicate(&[refs], 1, 2, ScoreColumn::FlippedClip).map_err(|e| e.to_string())?;
        let mut by_score: Vec<&SampleRecord> = recs.iter().collect();
        by_score.sort_by(|a, b| a.flipped_clip_score.unwrap().total_cmp(&b.flipped_clip_score.unwrap()));
        let mults: Vec<u32> = by_score.iter().map(|r| sel.get(&r.uid).unwrap()).collect();
        ensure!(mults == interpolated_weights(n, 1, 2), "N = {n}: record multiplicities {mults:?}");
    }
    Ok("N in 2..=3000 checked; N = 5 gives (1,1,2,2,2)".into())
}

// 5 ------------------------------------------------------------------------

/// Components by boolean transitive closure; representative is the
/// best-scored member, ties to the lower uid.
fn components_reference(x: &EmbeddingMatrix, scores: &[f64], members: &[usize], thre: f64) -> Vec<(usize, Vec<usize>)> {
    let m = members.len();
    let mut r = vec![vec![false; m]; m];
    for a in 0..m {
        r[a][a] = true;
        for b in 0..m {
            if a != b && cos(x.row(members[a]), x.row(members[b])) > thre {
                r[a][b] = true;
            }
        }
    }
    for k in 0..m {
        for i in 0..m {
            if r[i][k] {
                for j in 0..m {
                    if r[k][j] {
                        r[i][j] = true;
                    }
                }
            }
        }
    }
    let mut seen = vec![false; m];
    let mut out = Vec::new();
    for a in 0..m {
        if seen[a] {
            continue;
        }
        let comp: Vec<usize> = (0..m).filter(|&b| r[a][b]).collect();
        for &b in &comp {
            seen[b] = true;
        }
        let rep = *comp
            .iter()
            .max_by(|&&p, &&q| {
                scores[members[p]]
                    .total_cmp(&scores[members[q]])
                    .then(x.uids()[members[q]].cmp(&x.uids()[members[p]]))
            })
            .unwrap();
        out.push((members[rep], comp.iter().map(|&b| members[b]).collect()));
    }
    out
}

fn semantic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for inst in 0..60 {
        let n = rng.gen_range(2..=200);
        let dim = rng.gen_range(3..=24);
        let x = random_matrix(n, dim, &mut rng);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..40) as f64) / 100.0).collect();
        let k = rng.gen_range(1..=3);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let thre = if inst % 2 == 0 { 0.04 } else { rng.gen_range(0.3..0.9) };
        let mut want_sel = BTreeSet::new();
        let mut want_groups = BTreeMap::new();
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            for (rep, comp) in components_reference(&x, &scores, &members, thre) {
                want_sel.insert(x.uids()[rep]);
                if comp.len() > 1 {
                    let mut m: Vec<Uid> = comp.iter().map(|&i| x.uids()[i]).collect();
                    m.sort();
                    want_groups.insert(x.uids()[rep], m);
                }
            }
        }
        // Both the union-find path and the cap-exceeded path.
        for cap in [usize::MAX, 0] {
            let (sel, groups) =
                semantic_dedup_in_clusters(x.uids(), &scores, &x, &labels, thre, cap).map_err(|e| e.to_string())?;
            let got_sel: BTreeSet<Uid> = sel.uids().collect();
            ensure!(got_sel == want_sel, "instance {inst} (cap {cap}): representatives differ");
            let got_groups: BTreeMap<Uid, Vec<Uid>> = groups.into_iter().map(|g| (g.representative, g.members)).collect();
            ensure!(got_groups == want_groups, "instance {inst} (cap {cap}): groups differ");

            let rows: Vec<usize> = (0..n).filter(|&i| got_sel.contains(&x.uids()[i])).collect();
            let x2 = x.select_rows(&rows);
            let s2: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
            let l2: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let (again, _) = semantic_dedup_in_clusters(x2.uids(), &s2, &x2, &l2, thre, cap).map_err(|e| e.to_string())?;
            ensure!(again == sel, "instance {inst} (cap {cap}): second application changed the result");
        }
        checked += 1;
    }
    // 1/25 is the cosine of these two, exactly.
    let pair = EmbeddingMatrix::with_uids(
        &[vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 24.0, 4.0, 4.0, 4.0]],
        vec![Uid(1), Uid(2)],
        5,
    )
    .unwrap();
    let at = semantic_dedup_in_clusters(pair.uids(), &[0.3, 0.2], &pair, &[0, 0], 0.04, usize::MAX).unwrap().0;
    ensure!(at.unique_count() == 2, "S = 0.04 merged at thre_sem = 0.04");
    let below = f64::from_bits(0.04f64.to_bits() - 1);
    let merged = semantic_dedup_in_clusters(pair.uids(), &[0.3, 0.2], &pair, &[0, 0], below, usize::MAX).unwrap().0;
    ensure!(merged.unique_count() == 1, "S = 0.04 did not merge just below the threshold");
    Ok(format!("{checked} instances match the closure oracle on both paths; S = 0.04 stays apart"))
}

// 6 ------------------------------------------------------------------------

fn boundaries() -> Outcome {
    let below = f64::from_bits(0.19f64.to_bits() - 1);
    let recs: Vec<SampleRecord> = [(1u128, 0.19), (2, below)]
        .iter()
        .map(|&(u, s)| {
            let mut r = SampleRecord::new(Uid(u), "t", 1, 1);
            r.flipped_clip_score = Some(s);
            r
        })
        .collect();
    let out = clip_stage(&recs, &CrossModalConfig::default()).map_err(|e| e.to_string())?;
    ensure!(out.selection.contains(&Uid(1)), "0.19 dropped");
    ensure!(!out.selection.contains(&Uid(2)), "{below:e} kept");

    let img = ImageRuleConfig::default();
    let verdict = |w: u32, h: u32, face: f64| {
        let mut r = SampleRecord::new(Uid(9), "t", w, h);
        r.face_area_ratio = Some(face);
        apply_image_rules(&r, &img)
    };
    ensure!(33.0f64 / 100.0 == 0.33 && 333.0f64 / 100.0 == 3.33, "aspect fixtures are not exact");
    ensure!(verdict(33, 100, 0.0) == Verdict::Keep, "aspect 0.33 dropped");
    ensure!(verdict(333, 100, 0.0) == Verdict::Keep, "aspect 3.33 dropped");
    ensure!(verdict(32, 100, 0.0) != Verdict::Keep, "aspect 0.32 kept");
    ensure!(verdict(334, 100, 0.0) != Verdict::Keep, "aspect 3.34 kept");
    ensure!(verdict(100, 100, 0.4) == Verdict::Keep, "face 0.4 dropped");
    let above = f64::from_bits(0.4f64.to_bits() + 1);
    ensure!(verdict(100, 100, above) != Verdict::Keep, "face {above:e} kept");
    Ok("0.19 kept / next float down dropped; aspect 0.33, 3.33 kept; face 0.4 kept / +1 ulp dropped".into())
}

// 7 ------------------------------------------------------------------------

fn shard_separation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_shards = usize::MAX;
    for case in 0..1000 {
        let n = rng.gen_range(40..=400);
        let sel: SelectionSet = (0..n).map(|i| (Uid(rng.gen::<u128>() | i as u128), rng.gen_range(1..=4u32))).collect();
        let total = sel.total_count() as usize;
        let target = rng.gen_range(4..=40);
        let shard_size = (total / target).max(1);
        let plan = pack_shards(&sel, shard_size, case).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(plan.shard_count() >= 4, "case {case}: only {} shards", plan.shard_count());
        min_shards = min_shards.min(plan.shard_count());
        if let Err(v) = validate_plan(&plan, &sel) {
            return Err(format!("case {case}: {} violations, first {}", v.len(), v[0]));
        }
    }
    for case in 0..50u64 {
        let m = rng.gen_range(5..=9u32);
        let mut sel: SelectionSet = (0..rng.gen_range(1..5)).map(|i| (Uid(100 + i), 1)).collect();
        sel.insert(Uid(1), m).unwrap();
        let total = sel.total_count() as usize;
        // Fewer shards than copies of uid 1.
        let shards = rng.gen_range(1..m as usize);
        let shard_size = total.div_ceil(shards);
        if total.div_ceil(shard_size) >= m as usize {
            continue;
        }
        match pack_shards(&sel, shard_size, case) {
            Err(Error::CannotSeparate { multiplicity, .. }) if multiplicity == m => {}
            other => return Err(format!("case {case}: expected the pigeonhole error, got {other:?}")),
        }
    }
    Ok(format!("1000 plans valid (min {min_shards} shards); oversize multiplicities rejected"))
}

// 8 ------------------------------------------------------------------------

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_itcurate"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "itcurate {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let d = dir.to_str().unwrap();
    cli(&["gen-synthetic", d, "--seed", "0"])?;
    let labels = read_labels(&dir.join("labels.jsonl")).map_err(|e| e.to_string())?;
    ensure!(labels.len() == 10_000, "{} labeled records", labels.len());
    let count = |l: Label| labels.values().filter(|&&x| x == l).count();
    ensure!(count(Label::DuplicateOriginal) == 300, "{} duplicate groups", count(Label::DuplicateOriginal));
    ensure!(
        count(Label::NonEnglish) == 200
            && count(Label::BadAspect) == 150
            && count(Label::HighFace) == 100
            && count(Label::LowScore) == 500
            && count(Label::Digit) == 50,
        "planted counts differ"
    );

    let config = dir.join("config.toml");
    let mut elapsed = Duration::ZERO;
    for out in ["out_a", "out_b"] {
        let started = Instant::now();
        cli(&["run", config.to_str().unwrap(), "--output-dir", dir.join(out).to_str().unwrap()])?;
        elapsed = elapsed.max(started.elapsed());
    }
    ensure!(elapsed.as_secs_f64() < 60.0, "slowest run took {:.1}s", elapsed.as_secs_f64());

    let final_sel = read_selection(&dir.join("out_a/final.sel"), "final").map_err(|e| e.to_string())?;
    let leaked: Vec<_> = labels.iter().filter(|(u, l)| l.is_violation() && final_sel.contains(u)).collect();
    ensure!(leaked.is_empty(), "{} violations survive, e.g. {:?}", leaked.len(), leaked[0]);
    let lost: Vec<_> = labels.iter().filter(|(u, &l)| l == Label::Sentinel && !final_sel.contains(u)).collect();
    ensure!(lost.is_empty(), "{} sentinels lost, e.g. {:?}", lost.len(), lost[0]);
    let digits = labels.iter().filter(|(u, &l)| l == Label::Digit && final_sel.contains(u)).count();
    ensure!(digits == 50, "{digits} of 50 digit uids in the output");

    let a = files_under(&dir.join("out_a"));
    let b = files_under(&dir.join("out_b"));
    ensure!(a == b, "the two runs wrote different file sets");
    for f in &a {
        if f.as_os_str() == "timings.json" {
            continue;
        }
        let fa = std::fs::read(dir.join("out_a").join(f)).unwrap();
        let fb = std::fs::read(dir.join("out_b").join(f)).unwrap();
        ensure!(fa == fb, "{} differs between runs", f.display());
    }
    let violations = labels.values().filter(|l| l.is_violation()).count();
    Ok(format!(
        "{violations} violations removed, {} sentinels kept, 50 digits merged, {} identical files, {:.1}s",
        count(Label::Sentinel),
        a.len() - 1,
        elapsed.as_secs_f64()
    ))
}

// 9 ------------------------------------------------------------------------

fn check_inertia(model: &ClusterModel, what: &str) -> Result<(), String> {
    let h = &model.inertia_history;
    ensure!(!h.is_empty(), "{what}: no inertia history");
    for (i, w) in h.windows(2).enumerate() {
        ensure!(w[1] <= w[0], "{what}: inertia rose at iteration {}: {} -> {}", i + 1, w[0], w[1]);
    }
    Ok(())
}

fn check_assignments(model: &ClusterModel, x: &EmbeddingMatrix, what: &str) -> Result<(), String> {
    let got = model.assign(x).map_err(|e| e.to_string())?;
    for (i, row) in x.rows().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..model.k() {
            let d = l2(row, model.centroid(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        if got[i] != best.1 {
            let d_got = l2(row, model.centroid(got[i]));
            ensure!((d_got - best.0).abs() <= 1e-6, "{what}: row {i} assigned {} instead of {}", got[i], best.1);
        }
    }
    Ok(())
}

fn kmeans_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let corpus = generate(&SyntheticSpec::default(), 0).map_err(|e| e.to_string())?;
    let mut runs = vec![(corpus.embeddings.clone(), 64usize, 2u64, "synthetic corpus")];
    for (n, dim, k) in [(2000, 16, 37), (500, 8, 5), (3000, 32, 100), (64, 4, 64)] {
        runs.push((random_matrix(n, dim, &mut rng), k, rng.gen(), "random"));
    }
    let mut iters = 0;
    for (x, k, seed, what) in &runs {
        let model = kmeans_fit(x, *k, 25, *seed).map_err(|e| e.to_string())?;
        check_inertia(&model, what)?;
        check_assignments(&model, x, what)?;
        iters += model.inertia_history.len();
    }
    Ok(format!("{} fits, {iters} iterations, inertia never rose, assignments exhaustive-exact", runs.len()))
}

// 10 -----------------------------------------------------------------------

fn desk_config(dir: &Path, dim: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(DESK_SCALE).unwrap();
    cfg.inputs.embedding_dim = dim;
    cfg.inputs.task_manifest = None;
    cfg.inputs.declared_columns = ["embedding_row", "flipped_clip_score", "digit_flag"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cfg.resolve_paths(dir);
    cfg
}

fn order_independence() -> Outcome {
    let spec = SyntheticSpec {
        records: 2_000,
        dim: 16,
        duplicate_groups: 40,
        non_english: 0,
        bad_aspect: 0,
        high_face: 0,
        low_score: 0,
        digit: 10,
        ..Default::default()
    };
    let mut total_diff_if_carried = 0;
    for seed in 0..20u64 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let corpus = generate(&spec, 1000 + seed).map_err(|e| e.to_string())?;
        write_corpus(&corpus, tmp.path()).map_err(|e| e.to_string())?;
        let mut cfg = desk_config(tmp.path(), spec.dim);
        cfg.seed = seed;
        cfg.persist_stages = false;
        cfg.stages = Stages {
            quality_duplication: true,
            semantic_dedup: true,
            ..Stages::none()
        };
        // Duplication runs first inside the pipeline.
        let q_then_s = run_pipeline(&cfg).map_err(|e| e.to_string())?.selection;

        // Semantic dedup first, then duplication over the same fixed clusters.
        let recs: Vec<&SampleRecord> = corpus.records.iter().collect();
        let k = cfg.align.k_clusters.min(recs.len());
        let clusters = kmeans_fit(&corpus.embeddings, k, cfg.align.kmeans_max_iters, seed + 2).unwrap();
        let labels = clusters.assign(&corpus.embeddings).unwrap();
        let label_of: HashMap<Uid, usize> = corpus.embeddings.uids().iter().copied().zip(labels).collect();
        let params = SemDedupParams {
            k_clusters: k,
            thre_sem: cfg.align.thre_sem,
            score_column: ScoreColumn::FlippedClip,
            seed: seed + 3,
            max_iters: cfg.align.kmeans_max_iters,
            pairwise_cap: cfg.align.pairwise_cap,
        };
        let sd = semantic_dedup(&recs, &corpus.embeddings, &params).map_err(|e| e.to_string())?;
        let survivors: Vec<&SampleRecord> = recs.iter().copied().filter(|r| sd.selection.contains(&r.uid)).collect();
        let sl: Vec<usize> = survivors.iter().map(|r| label_of[&r.uid]).collect();
        let s_then_q =
            quality_duplicate(&group_by_label(&survivors, &sl, k), 1, 2, ScoreColumn::FlippedClip).unwrap();
        ensure!(
            q_then_s == s_then_q,
            "corpus {seed}: orders disagree ({} vs {} unique, {} vs {} total)",
            q_then_s.unique_count(),
            s_then_q.unique_count(),
            q_then_s.total_count(),
            s_then_q.total_count()
        );

        // For the record: carrying the pre-dedup weights instead would differ.
        let all_l: Vec<usize> = recs.iter().map(|r| label_of[&r.uid]).collect();
        let before = quality_duplicate(&group_by_label(&recs, &all_l, k), 1, 2, ScoreColumn::FlippedClip).unwrap();
        total_diff_if_carried += survivors
            .iter()
            .filter(|r| before.get(&r.uid) != s_then_q.get(&r.uid))
            .count();
    }
    Ok(format!(
        "20 corpora identical in both orders ({total_diff_if_carried} multiplicities would differ without recomputation)"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("ann_oracle_equivalence", ann_oracle),
        ("near_dup_reference_equivalence", alg1_oracle),
        ("cluster_importance_reference", importance_oracle),
        ("quality_duplication_weights", quality_duplication),
        ("semantic_dedup_closure", semantic_oracle),
        ("threshold_boundaries", boundaries),
        ("shard_separation", shard_separation),
        ("end_to_end_planted_contamination", end_to_end),
        ("kmeans_monotone_exact", kmeans_properties),
        ("order_independence", order_independence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
