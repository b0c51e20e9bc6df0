//! Metrics (precision, accuracy, PR-AUC as average precision), the 1:3
//! labeled-pool protocol, a logistic-regression baseline, feature export,
//! and the experiment driver that compares methods on one test split.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed_file::EmbeddingSet;
use crate::expansion::{score_candidates, ScoreMode, SeedList};
use crate::kg::KnowledgeGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub precision: f64,
    pub accuracy: f64,
    pub pr_auc: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_count: usize,
    /// False when no candidate was predicted positive (precision forced to 0).
    pub precision_defined: bool,
}

/// Classify `score >= threshold` as positive and compute the confusion
/// counts, precision, accuracy, and PR-AUC (NaN when only one class is
/// present).
pub fn precision_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid(
            "precision_accuracy needs equal-length, non-empty scores and labels".into(),
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_count) = (0usize, 0usize, 0usize, 0usize);
    for (s, &l) in scores.iter().zip(labels) {
        match (*s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_count += 1,
        }
    }
    let precision_defined = tp + fp > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    let pr_auc = pr_auc(scores, labels).unwrap_or(f64::NAN);
    Ok(MetricReport {
        precision,
        accuracy,
        pr_auc,
        threshold,
        tp,
        fp,
        tn,
        fn_count,
        precision_defined,
    })
}

/// Area under the precision-recall curve by the average-precision
/// convention: sum of (R_k - R_{k-1}) * P_k over descending-score prefixes,
/// one prefix per distinct score.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid("pr_auc needs equal-length, non-empty inputs".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(
            "pr_auc needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // advance over the whole tied-score group
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            }
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Fraction of positives among the k highest-scoring items (ties keep input
/// order, so callers should pass deterministically ordered inputs).
pub fn precision_at_k(scores: &[f64], labels: &[bool], k: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then_with(|| a.cmp(&b))
    });
    let k = k.min(order.len()).max(1);
    let hits = order[..k].iter().filter(|&&i| labels[i]).count();
    hits as f64 / k as f64
}

/// Pick the threshold maximizing F1 on a validation set; ties resolve to the
/// smallest threshold. Every distinct score is a candidate.
pub fn max_f1_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let mut best_f1 = -1.0;
    let mut best_t = f64::INFINITY;
    for &t in &distinct {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp == 0 {
            continue;
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / n_pos.max(1) as f64;
        let f1 = 2.0 * p * r / (p + r);
        if f1 > best_f1 + 1e-15 {
            best_f1 = f1;
            best_t = t;
        } else if (f1 - best_f1).abs() <= 1e-15 && t < best_t {
            best_t = t;
        }
    }
    best_t
}

// ---------------------------------------------------------------------------
// Pool protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.72,
            validation: 0.10,
            test: 0.18,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        if self.train <= 0.0 || self.validation < 0.0 || self.test <= 0.0 {
            return Err(Error::Config("train and test fractions must be positive".into()));
        }
        Ok(())
    }
}

pub const NEGATIVE_RATIO: usize = 3;

/// One labeled (user, is_positive) list per split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolSplits {
    pub train: Vec<(String, bool)>,
    pub validation: Vec<(String, bool)>,
    pub test: Vec<(String, bool)>,
}

impl PoolSplits {
    pub fn all(&self) -> impl Iterator<Item = &(String, bool)> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Build the labeled pool at the 3:1 negative:positive ratio and split it
/// into train/validation/test, stratified per class so each split keeps the
/// ratio up to rounding.
pub fn build_pool(
    positives: &[String],
    universe: &[String],
    fractions: SplitFractions,
    seed: u64,
) -> Result<PoolSplits> {
    fractions.validate()?;
    if positives.is_empty() {
        return Err(Error::Invalid("pool needs at least one positive user".into()));
    }
    let positive_set: HashSet<&str> = positives.iter().map(|s| s.as_str()).collect();
    let mut negative_candidates: Vec<&String> = universe
        .iter()
        .filter(|u| !positive_set.contains(u.as_str()))
        .collect();
    let needed = positives.len() * NEGATIVE_RATIO;
    if negative_candidates.len() < needed {
        return Err(Error::Invalid(format!(
            "need {needed} negative candidates, only {} available",
            negative_candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negative_candidates.shuffle(&mut rng);
    let negatives: Vec<String> = negative_candidates[..needed]
        .iter()
        .map(|s| s.to_string())
        .collect();

    let mut pos = positives.to_vec();
    pos.shuffle(&mut rng);
    let mut neg = negatives;
    neg.shuffle(&mut rng);

    let mut splits = PoolSplits::default();
    for (items, label) in [(pos, true), (neg, false)] {
        let n = items.len();
        let n_train = ((n as f64) * fractions.train).round() as usize;
        let n_val = ((n as f64) * fractions.validation).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        for (i, user) in items.into_iter().enumerate() {
            let entry = (user, label);
            if i < n_train {
                splits.train.push(entry);
            } else if i < n_train + n_val {
                splits.validation.push(entry);
            } else {
                splits.test.push(entry);
            }
        }
    }
    // Deterministic order within each split.
    for split in [&mut splits.train, &mut splits.validation, &mut splits.test] {
        split.sort();
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LrParams {
    pub l2: f64,
    pub lr: f64,
    pub max_iters: usize,
}

impl Default for LrParams {
    fn default() -> Self {
        LrParams {
            l2: 1e-4,
            lr: 0.1,
            max_iters: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticRegression {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.bias + crate::linalg::dot(&self.weights, x);
        1.0 / (1.0 + (-z).exp())
    }
}

/// Full-batch gradient descent on L2-regularized cross-entropy (bias
/// unregularized). Deterministic: no randomness anywhere.
pub fn train_logistic(x: &[Vec<f64>], y: &[bool], params: &LrParams) -> Result<LogisticRegression> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Invalid("logistic regression needs non-empty aligned data".into()));
    }
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut model = LogisticRegression {
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    let mut grad_w = vec![0.0; dim];
    for _ in 0..params.max_iters {
        grad_w.fill(0.0);
        let mut grad_b = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let p = model.predict(xi);
            let err = p - if yi { 1.0 } else { 0.0 };
            crate::linalg::axpy(&mut grad_w, err / n, xi);
            grad_b += err / n;
        }
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= params.lr * (*g + params.l2 * *w);
        }
        model.bias -= params.lr * grad_b;
    }
    Ok(model)
}

fn check_features(user: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid(format!("non-finite feature for user `{user}`")));
    }
    Ok(())
}

/// Train on the train split and score another split with probability
/// outputs. `features` must cover every pool user.
pub fn lr_baseline(
    features: &BTreeMap<String, Vec<f64>>,
    train: &[(String, bool)],
    score_on: &[(String, bool)],
    params: &LrParams,
) -> Result<Vec<f64>> {
    let lookup = |user: &str| -> Result<&Vec<f64>> {
        let v = features
            .get(user)
            .ok_or_else(|| Error::Invalid(format!("no features for user `{user}`")))?;
        check_features(user, v)?;
        Ok(v)
    };
    let mut x = Vec::with_capacity(train.len());
    let mut y = Vec::with_capacity(train.len());
    for (user, label) in train {
        x.push(lookup(user)?.clone());
        y.push(*label);
    }
    let model = train_logistic(&x, &y, params)?;
    score_on
        .iter()
        .map(|(user, _)| Ok(model.predict(lookup(user)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Feature export
// ---------------------------------------------------------------------------

/// Per-user downstream feature row: the fused vector plus a missing flag
/// (users absent from fusion get a zero vector and flag 1).
pub fn pool_feature_rows(
    fused: &EmbeddingSet,
    pool: &[(String, bool)],
) -> Vec<(String, bool, Vec<f64>, bool)> {
    pool.iter()
        .map(|(user, label)| {
            match fused.get(user) {
                Some(v) => (user.clone(), *label, v.to_vec(), false),
                None => (user.clone(), *label, vec![0.0; fused.dim()], true),
            }
        })
        .collect()
}

/// Write `user<TAB>label<TAB>v1,...,vd<TAB>missing_flag` rows.
pub fn export_features(path: &Path, fused: &EmbeddingSet, pool: &[(String, bool)]) -> Result<()> {
    let mut out = String::new();
    for (user, label, v, missing) in pool_feature_rows(fused, pool) {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:.8e}")).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            user,
            if label { 1 } else { 0 },
            vals.join(","),
            if missing { 1 } else { 0 }
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub user: String,
    pub label: bool,
    pub values: Vec<f64>,
    pub missing: bool,
}

pub fn parse_feature_file(content: &str, file: &str) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(file, lineno, "expected 4 tab-separated fields"));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(file, lineno, "empty user field"));
        }
        let label = match fields[1] {
            "1" => true,
            "0" => false,
            other => return Err(Error::parse(file, lineno, format!("bad label `{other}`"))),
        };
        let values: Vec<f64> = fields[2]
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(file, lineno, format!("bad value `{v}`")))
            })
            .collect::<Result<_>>()?;
        let missing = match fields[3] {
            "1" => true,
            "0" => false,
            other => return Err(Error::parse(file, lineno, format!("bad flag `{other}`"))),
        };
        rows.push(FeatureRow {
            user: fields[0].to_string(),
            label,
            values,
            missing,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Raw demographic features for the baseline
// ---------------------------------------------------------------------------

fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const HASH_BUCKETS: usize = 8;

/// Turn literal attributes into dense per-user vectors: one standardized
/// column per numeric attribute relation, eight hash-bucket indicator
/// columns per non-numeric one.
pub fn demographic_raw_features(kg: &KnowledgeGraph) -> BTreeMap<String, Vec<f64>> {
    let relations = kg.attribute_relations();
    enum ColKind {
        Numeric { offset: usize, mean: f64, std: f64 },
        Hashed { offset: usize },
    }
    let mut kinds = Vec::new();
    let mut width = 0usize;
    for &r in &relations {
        let pool = kg.literal_pool(r);
        let numeric: Option<Vec<f64>> = pool
            .iter()
            .map(|l| l.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect();
        match numeric {
            Some(values) if !values.is_empty() => {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / values.len() as f64;
                let std = var.sqrt().max(1e-9);
                kinds.push(ColKind::Numeric {
                    offset: width,
                    mean,
                    std,
                });
                width += 1;
            }
            _ => {
                kinds.push(ColKind::Hashed { offset: width });
                width += HASH_BUCKETS;
            }
        }
    }

    let mut features: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for a in kg.attributes() {
        let user = kg.entity_label(a.subject).to_string();
        let row = features.entry(user).or_insert_with(|| vec![0.0; width]);
        let idx = relations
            .iter()
            .position(|&r| r == a.attribute_relation)
            .expect("relation seen at scan time");
        match &kinds[idx] {
            ColKind::Numeric { offset, mean, std } => {
                if let Ok(v) = a.literal.parse::<f64>() {
                    row[*offset] = (v - mean) / std;
                }
            }
            ColKind::Hashed { offset } => {
                let bucket = (fnv1a(&a.literal) % HASH_BUCKETS as u64) as usize;
                row[offset + bucket] = 1.0;
            }
        }
    }
    features
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

pub const METHOD_EMBED_SIM: &str = "embed_sim";
pub const METHOD_EMBED_LR: &str = "embed_lr";
pub const METHOD_RAW_LR: &str = "raw_lr";

#[derive(Debug, Clone)]
pub struct ExperimentInputs<'a> {
    pub fused: &'a EmbeddingSet,
    pub seeds: &'a SeedList,
    pub splits: &'a PoolSplits,
    /// Raw per-user features for the plain LR baseline; skipped when absent.
    pub raw_features: Option<&'a BTreeMap<String, Vec<f64>>>,
    pub mode: ScoreMode,
    pub lr_params: LrParams,
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: String,
    pub report: MetricReport,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<bool>,
}

fn scores_for_split(
    fused: &EmbeddingSet,
    seeds: &SeedList,
    split: &[(String, bool)],
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    let users: Vec<String> = split.iter().map(|(u, _)| u.clone()).collect();
    let scored = score_candidates(fused, seeds, &users, mode)?;
    let by_user: BTreeMap<&str, f64> = scored.iter().map(|s| (s.user.as_str(), s.score)).collect();
    Ok(split
        .iter()
        .map(|(u, _)| by_user.get(u.as_str()).copied().unwrap_or(0.0))
        .collect())
}

fn labels_of(split: &[(String, bool)]) -> Vec<bool> {
    split.iter().map(|(_, l)| *l).collect()
}

fn outcome(
    method: &str,
    val_scores: &[f64],
    val_labels: &[bool],
    test_scores: Vec<f64>,
    test_labels: Vec<bool>,
) -> Result<MethodOutcome> {
    let threshold = max_f1_threshold(val_scores, val_labels);
    let report = precision_accuracy(&test_scores, &test_labels, threshold)?;
    Ok(MethodOutcome {
        method: method.to_string(),
        report,
        test_scores,
        test_labels,
    })
}

/// Evaluate the similarity method, the downstream classifier on fused
/// features, and (optionally) plain LR on raw features, all on the same
/// validation/test splits. The classification threshold is chosen on the
/// validation split by max F1 and frozen for test.
pub fn run_experiment(inputs: &ExperimentInputs) -> Result<Vec<MethodOutcome>> {
    let stage = |name: &str, e: Error| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    };
    let splits = inputs.splits;
    let val_labels = labels_of(&splits.validation);
    let test_labels = labels_of(&splits.test);
    let mut outcomes = Vec::new();

    // Similarity of fused embeddings against the seed centroid (or max-sim).
    let val_scores = scores_for_split(inputs.fused, inputs.seeds, &splits.validation, inputs.mode)
        .map_err(|e| stage(METHOD_EMBED_SIM, e))?;
    let test_scores = scores_for_split(inputs.fused, inputs.seeds, &splits.test, inputs.mode)
        .map_err(|e| stage(METHOD_EMBED_SIM, e))?;
    outcomes.push(
        outcome(METHOD_EMBED_SIM, &val_scores, &val_labels, test_scores, test_labels.clone())
            .map_err(|e| stage(METHOD_EMBED_SIM, e))?,
    );

    // Downstream linear classifier on exported fused features.
    let mut fused_features: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (user, _, mut v, missing) in pool_feature_rows(
        inputs.fused,
        &splits.all().cloned().collect::<Vec<_>>(),
    ) {
        v.push(if missing { 1.0 } else { 0.0 });
        fused_features.insert(user, v);
    }
    let val_scores = lr_baseline(
        &fused_features,
        &splits.train,
        &splits.validation,
        &inputs.lr_params,
    )
    .map_err(|e| stage(METHOD_EMBED_LR, e))?;
    let test_scores = lr_baseline(&fused_features, &splits.train, &splits.test, &inputs.lr_params)
        .map_err(|e| stage(METHOD_EMBED_LR, e))?;
    outcomes.push(
        outcome(METHOD_EMBED_LR, &val_scores, &val_labels, test_scores, test_labels.clone())
            .map_err(|e| stage(METHOD_EMBED_LR, e))?,
    );

    if let Some(raw) = inputs.raw_features {
        let val_scores = lr_baseline(raw, &splits.train, &splits.validation, &inputs.lr_params)
            .map_err(|e| stage(METHOD_RAW_LR, e))?;
        let test_scores = lr_baseline(raw, &splits.train, &splits.test, &inputs.lr_params)
            .map_err(|e| stage(METHOD_RAW_LR, e))?;
        outcomes.push(
            outcome(METHOD_RAW_LR, &val_scores, &val_labels, test_scores, test_labels)
                .map_err(|e| stage(METHOD_RAW_LR, e))?,
        );
    }
    Ok(outcomes)
}

/// Write `method,precision,pr_auc,accuracy,threshold` rows.
pub fn write_report_csv(path: &Path, outcomes: &[MethodOutcome]) -> Result<()> {
    let mut out = String::from("method,precision,pr_auc,accuracy,threshold\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            o.method, o.report.precision, o.report.pr_auc, o.report.accuracy, o.report.threshold
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
