//! Expand a seed user list into a scored, ranked lookalike audience, either
//! by exhaustive cosine scoring or through a coarse-quantized partition
//! index.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed_file::EmbeddingSet;
use crate::linalg::{axpy, cosine, l2_norm};
use crate::{Error, Result};

/// How candidate similarity against the seed list is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Cosine against the mean of the seed vectors.
    Centroid,
    /// Maximum cosine over the individual seeds.
    MaxSim,
}

impl ScoreMode {
    pub fn parse(s: &str) -> Result<ScoreMode> {
        match s {
            "centroid" => Ok(ScoreMode::Centroid),
            "max-sim" => Ok(ScoreMode::MaxSim),
            _ => Err(Error::Config(format!(
                "unknown scoring mode `{s}` (expected `centroid` or `max-sim`)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Centroid => "centroid",
            ScoreMode::MaxSim => "max-sim",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedList {
    pub users: Vec<String>,
    pub campaign: String,
}

/// Parse a seed list: one user label per line, no blanks, no duplicates.
pub fn parse_seed_list(content: &str, file: &str) -> Result<SeedList> {
    let mut users = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        let label = line.strip_suffix('\r').unwrap_or(line);
        if label.is_empty() {
            return Err(Error::parse(file, lineno, "blank line in seed list"));
        }
        if !seen.insert(label.to_string()) {
            return Err(Error::parse(file, lineno, format!("duplicate seed `{label}`")));
        }
        users.push(label.to_string());
    }
    if users.is_empty() {
        return Err(Error::Invalid(format!("{file}: empty seed list")));
    }
    Ok(SeedList {
        users,
        campaign: file.to_string(),
    })
}

pub fn load_seed_list(path: &Path) -> Result<SeedList> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut seeds = parse_seed_list(&content, &path.display().to_string())?;
    seeds.campaign = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "campaign".to_string());
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUser {
    pub user: String,
    pub score: f64,
}

/// Score candidates against the seed list. Seeds are removed from the
/// candidate set; candidates without an embedding score as a zero vector.
/// The result is sorted by descending score, ties broken by user ascending.
pub fn score_candidates(
    embeddings: &EmbeddingSet,
    seeds: &SeedList,
    candidates: &[String],
    mode: ScoreMode,
) -> Result<Vec<ScoredUser>> {
    let seed_vecs: Vec<&[f64]> = seeds
        .users
        .iter()
        .map(|u| {
            embeddings
                .get(u)
                .ok_or_else(|| Error::Invalid(format!("seed user `{u}` has no embedding")))
        })
        .collect::<Result<_>>()?;

    let seed_set: HashSet<&str> = seeds.users.iter().map(|s| s.as_str()).collect();
    let zero = vec![0.0; embeddings.dim()];
    let centroid = if mode == ScoreMode::Centroid {
        let mut c = vec![0.0; embeddings.dim()];
        for v in &seed_vecs {
            axpy(&mut c, 1.0, v);
        }
        for x in &mut c {
            *x /= seed_vecs.len() as f64;
        }
        Some(c)
    } else {
        None
    };

    let mut scored = Vec::new();
    for user in candidates {
        if seed_set.contains(user.as_str()) {
            continue;
        }
        let v = embeddings.get(user).unwrap_or(&zero);
        let score = match mode {
            ScoreMode::Centroid => cosine(v, centroid.as_ref().unwrap()),
            ScoreMode::MaxSim => seed_vecs
                .iter()
                .map(|s| cosine(v, s))
                .fold(f64::NEG_INFINITY, f64::max),
        };
        scored.push(ScoredUser {
            user: user.clone(),
            score,
        });
    }
    sort_scored(&mut scored);
    Ok(scored)
}

fn sort_scored(scored: &mut [ScoredUser]) {
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("cosine scores are finite")
            .then_with(|| a.user.cmp(&b.user))
    });
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpandParams {
    Threshold(f64),
    TopN(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionResult {
    pub ranked: Vec<ScoredUser>,
    pub params: ExpandParams,
    pub mode: ScoreMode,
}

pub fn validate_threshold(t: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&t) {
        return Err(Error::Config(format!(
            "similarity threshold {t} out of range [-1, 1]"
        )));
    }
    Ok(t)
}

/// Keep candidates scoring at least `t`.
pub fn expand_threshold(scored: &[ScoredUser], t: f64, mode: ScoreMode) -> Result<ExpansionResult> {
    validate_threshold(t)?;
    let ranked = scored.iter().filter(|s| s.score >= t).cloned().collect();
    Ok(ExpansionResult {
        ranked,
        params: ExpandParams::Threshold(t),
        mode,
    })
}

/// Keep the top `n` candidates (all if fewer).
pub fn expand_top_n(scored: &[ScoredUser], n: usize, mode: ScoreMode) -> Result<ExpansionResult> {
    if n == 0 {
        return Err(Error::Config("top-n must be >= 1".into()));
    }
    let ranked = scored.iter().take(n).cloned().collect();
    Ok(ExpansionResult {
        ranked,
        params: ExpandParams::TopN(n),
        mode,
    })
}

/// Write `rank,user,score` with six decimal places.
pub fn write_expansion_csv(path: &Path, result: &ExpansionResult) -> Result<()> {
    let mut out = String::from("rank,user,score\n");
    for (i, s) in result.ranked.iter().enumerate() {
        out.push_str(&format!("{},{},{:.6}\n", i + 1, s.user, s.score));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Partition index
// ---------------------------------------------------------------------------

/// Coarse-quantized cosine index: spherical k-means with ceil(sqrt(N))
/// centroids; queries probe the `p` closest partitions and score members
/// exactly, so full probing reproduces brute force bit for bit.
#[derive(Debug, Clone)]
pub struct PartitionIndex {
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
    clusters: Vec<Vec<u32>>,
    default_probe: usize,
}

const KMEANS_ITERS: usize = 15;

impl PartitionIndex {
    pub fn build(set: &EmbeddingSet, seed: u64) -> Result<PartitionIndex> {
        if set.is_empty() {
            return Err(Error::Invalid("cannot index an empty embedding set".into()));
        }
        let n = set.len();
        let dim = set.dim();
        let k = (n as f64).sqrt().ceil() as usize;
        let labels: Vec<String> = set.labels().to_vec();
        let vectors: Vec<Vec<f64>> = set.iter().map(|(_, v)| v.to_vec()).collect();
        let normalized: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                let norm = l2_norm(v);
                if norm == 0.0 {
                    v.clone()
                } else {
                    v.iter().map(|x| x / norm).collect()
                }
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = kmeans_pp_init(&normalized, k, &mut rng);
        let mut assignment = vec![0usize; n];
        for _ in 0..KMEANS_ITERS {
            for (i, v) in normalized.iter().enumerate() {
                assignment[i] = nearest_centroid(v, &centroids);
            }
            let mut sums = vec![vec![0.0; dim]; centroids.len()];
            let mut counts = vec![0usize; centroids.len()];
            for (i, v) in normalized.iter().enumerate() {
                axpy(&mut sums[assignment[i]], 1.0, v);
                counts[assignment[i]] += 1;
            }
            for (c, centroid) in centroids.iter_mut().enumerate() {
                if counts[c] == 0 {
                    continue; // keep the previous position
                }
                let norm = l2_norm(&sums[c]);
                if norm > 0.0 {
                    for (o, s) in centroid.iter_mut().zip(&sums[c]) {
                        *o = s / norm;
                    }
                }
            }
        }
        for (i, v) in normalized.iter().enumerate() {
            assignment[i] = nearest_centroid(v, &centroids);
        }
        let mut clusters = vec![Vec::new(); centroids.len()];
        for (i, &a) in assignment.iter().enumerate() {
            clusters[a].push(i as u32);
        }
        let default_probe = centroids.len().div_ceil(4);
        Ok(PartitionIndex {
            labels,
            vectors,
            centroids,
            clusters,
            default_probe,
        })
    }

    pub fn partitions(&self) -> usize {
        self.centroids.len()
    }

    pub fn default_probe(&self) -> usize {
        self.default_probe
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// k nearest stored vectors by cosine, probing the `probe` partitions
    /// whose centroids are closest to the query. `k > N` returns all N.
    pub fn query(&self, vector: &[f64], k: usize, probe: usize) -> Vec<ScoredUser> {
        let probe = probe.clamp(1, self.centroids.len());
        let mut order: Vec<usize> = (0..self.centroids.len()).collect();
        let sims: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| cosine(vector, c))
            .collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .expect("centroid similarities are finite")
                .then_with(|| a.cmp(&b))
        });

        let mut scored = Vec::new();
        for &c in order.iter().take(probe) {
            for &i in &self.clusters[c] {
                let i = i as usize;
                scored.push(ScoredUser {
                    user: self.labels[i].clone(),
                    score: cosine(vector, &self.vectors[i]),
                });
            }
        }
        sort_scored(&mut scored);
        scored.truncate(k);
        scored
    }
}

/// Exhaustive cosine ranking over the whole set; the oracle the index is
/// measured against.
pub fn brute_force_query(set: &EmbeddingSet, vector: &[f64], k: usize) -> Vec<ScoredUser> {
    let mut scored: Vec<ScoredUser> = set
        .iter()
        .map(|(label, v)| ScoredUser {
            user: label.to_string(),
            score: cosine(vector, v),
        })
        .collect();
    sort_scored(&mut scored);
    scored.truncate(k);
    scored
}

fn nearest_centroid(v: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let s = crate::linalg::dot(v, centroid);
        if s > best_sim {
            best_sim = s;
            best = c;
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let k = k.min(n);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centroids.last().unwrap());
            if d < dist2[i] {
                dist2[i] = d;
            }
        }
    }
    centroids
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
