//! Prompt-corpus preparation: toxicity filter, text and embedding
//! deduplication, k-means clustering and cluster-balanced resampling.
//!
//! Both dedup passes scan in input order and keep the first of any
//! near-duplicate group. Similarities against the kept set are computed in
//! parallel; the keep/drop decision is sequential, so output is order-stable.
//! Cost is quadratic in corpus size.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::numerics::{dot, norm, sq_dist};
use crate::rectflow::standard_normal;
use crate::{seeded_rng, Error, Result, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub toxicity: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPipelineConfig {
    pub toxicity_threshold: f64,
    pub jaccard_threshold: f64,
    pub cosine_threshold: f64,
    pub k_clusters: usize,
    pub per_cluster: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for CorpusPipelineConfig {
    fn default() -> Self {
        CorpusPipelineConfig {
            toxicity_threshold: 0.1,
            jaccard_threshold: 0.8,
            cosine_threshold: 0.8,
            k_clusters: 100,
            per_cluster: 200,
            kmeans_iters: 50,
            seed: 0,
        }
    }
}

impl CorpusPipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("toxicity_threshold", self.toxicity_threshold),
            ("jaccard_threshold", self.jaccard_threshold),
            ("cosine_threshold", self.cosine_threshold),
        ] {
            check_threshold(name, v)?;
        }
        if self.k_clusters == 0 {
            return Err(Error::Config("k_clusters must be >= 1".into()));
        }
        if self.per_cluster == 0 {
            return Err(Error::Config("per_cluster must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in (0, 1], got {v}")))
    }
}

/// Checks that ids are unique and embeddings share one dimension.
pub fn validate_corpus(records: &[PromptRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Data(format!("duplicate id {:?}", r.id)));
        }
        if r.embedding.len() != records[0].embedding.len() {
            return Err(Error::Data(format!(
                "record {:?} has embedding dim {}, expected {}",
                r.id,
                r.embedding.len(),
                records[0].embedding.len()
            )));
        }
    }
    Ok(())
}

pub fn toxicity_filter(records: &[PromptRecord], threshold: f64) -> Result<Vec<PromptRecord>> {
    check_threshold("toxicity threshold", threshold)?;
    Ok(records
        .iter()
        .filter(|r| r.toxicity <= threshold)
        .cloned()
        .collect())
}

/// Lowercased whitespace tokens, sorted and deduplicated.
pub fn token_set(text: &str) -> Vec<String> {
    let mut toks: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    toks.sort_unstable();
    toks.dedup();
    toks
}

/// `|A ∩ B| / |A ∪ B|` over sorted token sets; two empty sets give 1.
pub fn jaccard(a: &[String], b: &[String]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Keeps item `i` unless `similar(kept_j, i)` for some already-kept `j`.
fn keep_first<T: Sync>(items: &[T], similar: impl Fn(&T, &T) -> bool + Sync) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if !kept.par_iter().any(|&j| similar(&items[j], item)) {
            kept.push(i);
        }
    }
    kept
}

pub fn jaccard_dedup(records: &[PromptRecord], threshold: f64) -> Result<Vec<PromptRecord>> {
    check_threshold("jaccard threshold", threshold)?;
    let sets: Vec<Vec<String>> = records.iter().map(|r| token_set(&r.text)).collect();
    let kept = keep_first(&sets, |a, b| jaccard(a, b) > threshold);
    Ok(kept.into_iter().map(|i| records[i].clone()).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn embedding_dedup(records: &[PromptRecord], threshold: f64) -> Result<Vec<PromptRecord>> {
    check_threshold("cosine threshold", threshold)?;
    let units = records
        .iter()
        .map(|r| {
            let n = norm(&r.embedding);
            if n > 0.0 && n.is_finite() {
                Ok(r.embedding.iter().map(|v| v / n).collect::<Vec<f64>>())
            } else {
                Err(Error::Data(format!(
                    "record {:?} has a zero-norm embedding",
                    r.id
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let kept = keep_first(&units, |a, b| dot(a, b) > threshold);
    Ok(kept.into_iter().map(|i| records[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective after each assignment step; the first entry uses the
    /// seeded centroids.
    pub objective_history: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Index drawn proportionally to `weights`; uniform when they sum to zero.
fn weighted_index(rng: &mut SeededRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Greedy k-means++: each new centre is the best of `2 + ln k` candidates
/// drawn proportionally to squared distance.
fn kmeanspp(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weighted_index(rng, &d2);
            let next: Vec<f64> = points
                .par_iter()
                .zip(&d2)
                .map(|(p, &d)| d.min(sq_dist(p, &points[cand])))
                .collect();
            let pot = next.iter().sum::<f64>();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, next));
            }
        }
        let (_, idx, next) = best.expect("at least two trials");
        centroids.push(points[idx].clone());
        d2 = next;
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds, for at most `iters` updates.
/// An empty cluster keeps its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= n, got k={k}, n={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Data("points have mixed dimensions".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut centroids = kmeanspp(points, k, &mut rng);
    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let pairs: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, centroids)).collect();
        let obj = crate::numerics::pairwise_sum(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        (pairs.into_iter().map(|p| p.0).collect(), obj)
    };
    let (mut assignments, obj) = assign(&centroids);
    let mut history = vec![obj];
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let (next, obj) = assign(&centroids);
        history.push(obj);
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective_history: history,
    })
}

pub fn kmeans_cluster(
    records: &[PromptRecord],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansResult> {
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.embedding.clone()).collect();
    kmeans(&points, k, iters, seed)
}

/// Draws `min(per_cluster, size)` members of each cluster without
/// replacement. Output is ordered by (cluster id, original index).
pub fn cluster_resample(
    records: &[PromptRecord],
    assignments: &[usize],
    per_cluster: usize,
    seed: u64,
) -> Result<Vec<PromptRecord>> {
    if per_cluster == 0 {
        return Err(Error::Config("per_cluster must be >= 1".into()));
    }
    if assignments.len() != records.len() {
        return Err(Error::shape(
            "cluster assignments",
            records.len(),
            assignments.len(),
        ));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    for group in members.iter().filter(|g| !g.is_empty()) {
        let take = per_cluster.min(group.len());
        let mut picked: Vec<usize> = sample_indices(&mut rng, group.len(), take)
            .into_iter()
            .map(|j| group[j])
            .collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| records[i].clone()));
    }
    Ok(out)
}

/// Survivor count after each pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCounts {
    pub input: usize,
    pub after_toxicity: usize,
    pub after_jaccard: usize,
    pub after_embedding: usize,
    /// Clusters actually used: `min(k_clusters, after_embedding)`.
    pub k_used: usize,
    pub cluster_sizes: Vec<usize>,
    pub after_resample: usize,
}

/// filter → jaccard → embedding → cluster → resample.
pub fn run_pipeline(
    records: &[PromptRecord],
    cfg: &CorpusPipelineConfig,
) -> Result<(Vec<PromptRecord>, StageCounts)> {
    cfg.validate()?;
    validate_corpus(records)?;
    let tox = toxicity_filter(records, cfg.toxicity_threshold)?;
    let jac = jaccard_dedup(&tox, cfg.jaccard_threshold)?;
    let emb = embedding_dedup(&jac, cfg.cosine_threshold)?;
    let mut counts = StageCounts {
        input: records.len(),
        after_toxicity: tox.len(),
        after_jaccard: jac.len(),
        after_embedding: emb.len(),
        k_used: 0,
        cluster_sizes: Vec::new(),
        after_resample: 0,
    };
    if emb.is_empty() {
        return Ok((emb, counts));
    }
    let k = cfg.k_clusters.min(emb.len());
    let km = kmeans_cluster(&emb, k, cfg.kmeans_iters, cfg.seed)?;
    let mut sizes = vec![0; k];
    for &a in &km.assignments {
        sizes[a] += 1;
    }
    let out = cluster_resample(
        &emb,
        &km.assignments,
        cfg.per_cluster,
        cfg.seed.wrapping_add(1),
    )?;
    counts.k_used = k;
    counts.cluster_sizes = sizes;
    counts.after_resample = out.len();
    Ok((out, counts))
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `id\ttext\ttox\te0..e{dim-1}`. `dim` fixes the header when the
/// corpus is empty.
pub fn write_tsv<W: Write>(mut w: W, records: &[PromptRecord], dim: usize) -> Result<()> {
    let mut header = String::from("id\ttext\ttox");
    for j in 0..dim {
        header.push_str(&format!("\te{j}"));
    }
    writeln!(w, "{header}")?;
    for r in records {
        if r.embedding.len() != dim {
            return Err(Error::shape("corpus embedding", dim, r.embedding.len()));
        }
        for field in [&r.id, &r.text] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::Data(format!(
                    "record {:?} contains a tab or newline",
                    r.id
                )));
            }
        }
        let mut line = format!("{}\t{}\t{}", r.id, r.text, fmt_real(r.toxicity));
        for v in &r.embedding {
            line.push('\t');
            line.push_str(&fmt_real(*v));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a corpus TSV; returns the records and the embedding dimension.
/// An empty file is an empty corpus of dimension 0.
pub fn read_tsv<R: BufRead>(r: R) -> Result<(Vec<PromptRecord>, usize)> {
    let mut lines = r.lines();
    let header = match lines.next() {
        None => return Ok((Vec::new(), 0)),
        Some(h) => h?,
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    if cols.len() < 3 || cols[..3] != ["id", "text", "tox"] {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with id, text, tox".into(),
        });
    }
    let dim = cols.len() - 3;
    for (j, c) in cols[3..].iter().enumerate() {
        if *c != format!("e{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column e{j}, found {c:?}"),
            });
        }
    }
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != dim + 3 {
            return Err(perr(format!(
                "expected {} fields, found {}",
                dim + 3,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(format!("invalid number {s:?}")))
        };
        let toxicity = num(fields[2])?;
        if !(0.0..=1.0).contains(&toxicity) {
            return Err(perr(format!("toxicity {toxicity} outside [0, 1]")));
        }
        let embedding = fields[3..]
            .iter()
            .map(|s| num(s))
            .collect::<Result<Vec<_>>>()?;
        if !ids.insert(fields[0].to_string()) {
            return Err(perr(format!("duplicate id {:?}", fields[0])));
        }
        records.push(PromptRecord {
            id: fields[0].to_string(),
            text: fields[1].to_string(),
            toxicity,
            embedding,
        });
    }
    Ok((records, dim))
}

/// Shape of a [`planted_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpusSpec {
    pub n_records: usize,
    pub n_toxic: usize,
    pub n_exact_dup_pairs: usize,
    pub n_near_dup_pairs: usize,
    pub n_clusters: usize,
    pub dim: usize,
    /// Cosine between the two members of each near-duplicate pair.
    pub near_dup_cosine: f64,
}

impl Default for PlantedCorpusSpec {
    fn default() -> Self {
        PlantedCorpusSpec {
            n_records: 1000,
            n_toxic: 150,
            n_exact_dup_pairs: 50,
            n_near_dup_pairs: 40,
            n_clusters: 10,
            dim: 128,
            near_dup_cosine: 0.9,
        }
    }
}

/// A synthetic corpus with known ground truth.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub records: Vec<PromptRecord>,
    /// Planted cluster of each record.
    pub clusters: Vec<usize>,
    pub expected_after_toxicity: usize,
    pub expected_after_jaccard: usize,
    pub expected_after_embedding: usize,
}

const VOCAB: &[&str] = &[
    "red",
    "blue",
    "green",
    "gold",
    "silver",
    "misty",
    "quiet",
    "bright",
    "ancient",
    "tiny",
    "giant",
    "cat",
    "dog",
    "fox",
    "owl",
    "whale",
    "tower",
    "bridge",
    "forest",
    "river",
    "castle",
    "garden",
    "robot",
    "dragon",
    "ship",
    "lantern",
    "mountain",
    "desert",
    "city",
    "cloud",
    "painting",
    "photo",
    "sketch",
    "render",
    "portrait",
    "landscape",
    "sunset",
    "dawn",
    "night",
    "storm",
    "glass",
    "stone",
    "wooden",
    "paper",
    "velvet",
    "neon",
    "marble",
    "ice",
    "fire",
    "smoke",
    "over",
    "under",
    "beside",
    "inside",
    "floating",
    "running",
    "sleeping",
    "dancing",
    "flying",
    "hidden",
];

/// Builds a corpus where every stage's survivor count is known exactly.
///
/// Non-toxic records have toxicity in `[0, 0.09]`, toxic ones in
/// `[0.2, 1]`. Each distinct text is a unique id token plus six distinct
/// vocabulary words, so distinct texts have Jaccard ≤ 6/8. Embeddings are
/// `√0.4 · u_k + √0.6 · noise` for cluster direction `u_k`; a near-duplicate
/// partner sits at the planted cosine from its original. Duplicated and
/// near-duplicated records are never toxic, and the duplicate always comes
/// after its original.
pub fn planted_corpus(spec: &PlantedCorpusSpec, seed: u64) -> Result<PlantedCorpus> {
    let n_base = spec
        .n_records
        .checked_sub(spec.n_exact_dup_pairs + spec.n_near_dup_pairs)
        .filter(|b| *b >= spec.n_toxic + spec.n_exact_dup_pairs + spec.n_near_dup_pairs)
        .ok_or_else(|| Error::Config("planted corpus counts do not fit".into()))?;
    if spec.n_clusters == 0 || spec.dim < spec.n_clusters + 2 {
        return Err(Error::Config(
            "planted corpus needs dim >= n_clusters + 2".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let unit = |v: Vec<f64>| {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    // Orthonormal cluster directions: the first n_clusters basis vectors.
    let direction = |k: usize| {
        let mut d = vec![0.0; spec.dim];
        d[k] = 1.0;
        d
    };
    let (a, b) = (0.4f64.sqrt(), 0.6f64.sqrt());
    let mut base: Vec<PromptRecord> = Vec::with_capacity(n_base);
    let mut clusters = Vec::with_capacity(spec.n_records);
    for i in 0..n_base {
        let k = i % spec.n_clusters;
        let mut words: Vec<&str> = Vec::with_capacity(6);
        while words.len() < 6 {
            let w = VOCAB[rng.random_range(0..VOCAB.len())];
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let noise = unit(standard_normal(&mut rng, spec.dim));
        let emb = unit(
            direction(k)
                .iter()
                .zip(&noise)
                .map(|(d, z)| a * d + b * z)
                .collect(),
        );
        let toxicity = if i < spec.n_toxic {
            0.2 + 0.8 * rng.random::<f64>()
        } else {
            0.09 * rng.random::<f64>()
        };
        base.push(PromptRecord {
            id: format!("p{i:05}"),
            text: format!("tok{i:05} {}", words.join(" ")),
            toxicity,
            embedding: emb,
        });
        clusters.push(k);
    }
    let mut records = base.clone();
    let clean = spec.n_toxic..n_base;
    let mut next_id = n_base;
    for j in 0..spec.n_exact_dup_pairs {
        let src = &base[clean.start + j];
        let mut dup = src.clone();
        dup.id = format!("p{next_id:05}");
        dup.toxicity = 0.09 * rng.random::<f64>();
        records.push(dup);
        clusters.push(clusters[clean.start + j]);
        next_id += 1;
    }
    let c = spec.near_dup_cosine;
    for j in 0..spec.n_near_dup_pairs {
        let idx = clean.start + spec.n_exact_dup_pairs + j;
        let src = &base[idx];
        // Component of a fresh Gaussian orthogonal to the (unit) source.
        let z = standard_normal(&mut rng, spec.dim);
        let proj = dot(&z, &src.embedding);
        let orth = unit(
            z.iter()
                .zip(&src.embedding)
                .map(|(zi, e)| zi - proj * e)
                .collect(),
        );
        let s = (1.0 - c * c).sqrt();
        let emb = src
            .embedding
            .iter()
            .zip(&orth)
            .map(|(e, o)| c * e + s * o)
            .collect();
        let mut words: Vec<&str> = Vec::with_capacity(6);
        while words.len() < 6 {
            let w = VOCAB[rng.random_range(0..VOCAB.len())];
            if !words.contains(&w) {
                words.push(w);
            }
        }
        records.push(PromptRecord {
            id: format!("p{next_id:05}"),
            text: format!("tok{next_id:05} {}", words.join(" ")),
            toxicity: 0.09 * rng.random::<f64>(),
            embedding: emb,
        });
        clusters.push(clusters[idx]);
        next_id += 1;
    }
    let after_tox = spec.n_records - spec.n_toxic;
    let after_jac = after_tox - spec.n_exact_dup_pairs;
    Ok(PlantedCorpus {
        records,
        clusters,
        expected_after_toxicity: after_tox,
        expected_after_jaccard: after_jac,
        expected_after_embedding: after_jac - spec.n_near_dup_pairs,
    })
}
