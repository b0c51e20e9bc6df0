//! Mini-batch SGD over the three loss families, one embedding table per
//! view. Gradients are hand-derived subgradients (L1 kinks use sign(0)=0)
//! and everything is driven by an explicit seeded RNG, so a fixed seed
//! reproduces the table bit for bit.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    cnn_backward, cnn_forward, ngram_encode, ngram_encode_grad, CharEmbeddingTable, CnnParams,
};
use crate::kg::{
    negative_sample_attribute, negative_sample_triple, AttributeTriple, CharId, EntityId,
    KnowledgeGraph, Triple, USER_TYPE,
};
use crate::linalg::{axpy, l1_norm, sign, Matrix};
use crate::{Error, Result, ViewKind};

/// L1 translation score; lower is more plausible.
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    debug_assert!(h.len() == r.len() && r.len() == t.len());
    let mut s = 0.0;
    for i in 0..h.len() {
        s += (h[i] + r[i] - t[i]).abs();
    }
    s
}

/// Margin ranking loss `max(0, gamma + pos - neg)`.
pub fn kge_margin_loss(pos_score: f64, neg_score: f64, gamma: f64) -> f64 {
    (gamma + pos_score - neg_score).max(0.0)
}

/// Translation score of a literal triple against its encoded value.
pub fn demography_score(u: &[f64], r: &[f64], phi: &[f64]) -> f64 {
    transe_score(u, r, phi)
}

/// Scaled margin loss `max(0, gamma + alpha * (f_pos - f_neg))` over literal
/// triples.
#[allow(clippy::too_many_arguments)]
pub fn demography_loss(
    u: &[f64],
    r: &[f64],
    phi_pos: &[f64],
    u_neg: &[f64],
    r_neg: &[f64],
    phi_neg: &[f64],
    gamma: f64,
    alpha: f64,
) -> f64 {
    let f_pos = demography_score(u, r, phi_pos);
    let f_neg = demography_score(u_neg, r_neg, phi_neg);
    (gamma + alpha * (f_pos - f_neg)).max(0.0)
}

/// Softplus with the asymptote shortcut for large inputs.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Loyalty loss per triple: `log(1 + exp(||u - cnn_out||_1))`.
pub fn loyalty_loss(u: &[f64], cnn_out: &[f64]) -> f64 {
    let mut d = u.to_vec();
    axpy(&mut d, -1.0, cnn_out);
    softplus(l1_norm(&d))
}

/// Hyperparameter grids used by the grid-search command.
pub const DIM_GRID: [usize; 3] = [50, 75, 100];
pub const LR_GRID: [f64; 3] = [0.001, 0.01, 0.1];
pub const GAMMA_GRID: [f64; 3] = [1.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub ngram_order: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub patience: usize,
    pub val_fraction: f64,
    pub cnn_filters: usize,
    pub cnn_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 50,
            lr: 0.01,
            gamma: 1.0,
            alpha: 1.0,
            batch_size: 10_000,
            max_epochs: 500,
            ngram_order: 3,
            negatives_per_positive: 1,
            seed: 42,
            patience: 20,
            val_fraction: 0.1,
            cnn_filters: 8,
            cnn_width: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be > 0".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if self.ngram_order == 0 {
            return Err(Error::Config("ngram_order must be >= 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoder parameters owned by a view in addition to its entity/relation
/// matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewEncoder {
    Structural,
    Chars(CharEmbeddingTable),
    Loyalty {
        cnn: CnnParams,
        /// One row per distinct loyalty value, aligned with `value_entities`.
        values: Matrix,
        /// Entity id of each value row.
        value_entities: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entities: Matrix,
    pub relations: Matrix,
    pub encoder: ViewEncoder,
}

impl EmbeddingTable {
    pub fn all_finite(&self) -> bool {
        let encoder_ok = match &self.encoder {
            ViewEncoder::Structural => true,
            ViewEncoder::Chars(t) => t.all_finite(),
            ViewEncoder::Loyalty { cnn, values, .. } => cnn.all_finite() && values.all_finite(),
        };
        self.entities.all_finite() && self.relations.all_finite() && encoder_ok
    }

    pub fn bits_eq(&self, other: &EmbeddingTable) -> bool {
        if self.dim != other.dim
            || !self.entities.bits_eq(&other.entities)
            || !self.relations.bits_eq(&other.relations)
        {
            return false;
        }
        match (&self.encoder, &other.encoder) {
            (ViewEncoder::Structural, ViewEncoder::Structural) => true,
            (ViewEncoder::Chars(a), ViewEncoder::Chars(b)) => a.bits_eq(b),
            (
                ViewEncoder::Loyalty { cnn: ca, values: va, .. },
                ViewEncoder::Loyalty { cnn: cb, values: vb, .. },
            ) => va.bits_eq(vb) && ca == cb,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedView {
    pub view: ViewKind,
    pub table: EmbeddingTable,
    pub history: Vec<EpochLoss>,
    /// Entity ids of users with at least one training example in this view;
    /// only these users count as present for fusion.
    pub present_users: Vec<u32>,
}

impl TrainedView {
    /// Rows exported to the per-view embedding file: present users only, in
    /// entity-id (= sorted label) order.
    pub fn user_embeddings(&self, kg: &KnowledgeGraph) -> crate::embed_file::EmbeddingSet {
        let mut set = crate::embed_file::EmbeddingSet::new(self.table.dim);
        for &e in &self.present_users {
            set.push(
                kg.entity_label(EntityId(e)).to_string(),
                self.table.entities.row(e as usize).to_vec(),
            )
            .expect("present users are distinct");
        }
        set
    }
}

pub fn write_loss_history(path: &std::path::Path, history: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in history {
        out.push_str(&format!(
            "{},{:.9e},{:.9e}\n",
            e.epoch, e.train_loss, e.val_loss
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Gradient accumulation
// ---------------------------------------------------------------------------

struct GradEntry {
    g: Vec<f64>,
    touches: u32,
}

/// Per-row accumulated gradients with touch counts. The SGD step divides a
/// row's gradient by how many batch examples touched it, so frequently
/// shared rows (relations, popular characters) take unit-scale steps instead
/// of batch-size-scale ones, while rare entity rows keep full steps.
#[derive(Default)]
struct SparseGrads {
    rows: HashMap<u32, GradEntry>,
}

impl SparseGrads {
    fn add(&mut self, id: u32, scale: f64, v: &[f64]) {
        let entry = self.rows.entry(id).or_insert_with(|| GradEntry {
            g: vec![0.0; v.len()],
            touches: 0,
        });
        axpy(&mut entry.g, scale, v);
        entry.touches += 1;
    }

    fn apply(&self, m: &mut Matrix, lr: f64) {
        for (&id, entry) in &self.rows {
            axpy(m.row_mut(id as usize), -lr / entry.touches as f64, &entry.g);
        }
    }

    fn clear(&mut self) {
        self.rows.clear();
    }
}

struct GradAcc {
    entities: SparseGrads,
    relations: SparseGrads,
    chars: SparseGrads,
    values: SparseGrads,
    cnn_filter_weights: Option<Matrix>,
    cnn_filter_bias: Vec<f64>,
    cnn_proj: Option<Matrix>,
    cnn_proj_bias: Vec<f64>,
    /// Examples that touched the dense CNN parameters this batch.
    cnn_examples: u32,
}

impl GradAcc {
    fn new() -> GradAcc {
        GradAcc {
            entities: SparseGrads::default(),
            relations: SparseGrads::default(),
            chars: SparseGrads::default(),
            values: SparseGrads::default(),
            cnn_filter_weights: None,
            cnn_filter_bias: Vec::new(),
            cnn_proj: None,
            cnn_proj_bias: Vec::new(),
            cnn_examples: 0,
        }
    }

    fn clear(&mut self) {
        self.entities.clear();
        self.relations.clear();
        self.chars.clear();
        self.values.clear();
        if let Some(m) = &mut self.cnn_filter_weights {
            m.data_mut().fill(0.0);
        }
        self.cnn_filter_bias.fill(0.0);
        if let Some(m) = &mut self.cnn_proj {
            m.data_mut().fill(0.0);
        }
        self.cnn_proj_bias.fill(0.0);
        self.cnn_examples = 0;
    }
}

/// Signs and L1 norm of `a + b - c`.
fn signed_diff(a: &[f64], b: &[f64], c: &[f64]) -> (Vec<f64>, f64) {
    let mut s = vec![0.0; a.len()];
    let mut norm = 0.0;
    for i in 0..a.len() {
        let d = a[i] + b[i] - c[i];
        norm += d.abs();
        s[i] = sign(d);
    }
    (s, norm)
}

/// Accumulate the margin-loss subgradient for one positive/negative triple
/// pair; returns the pair loss.
fn accumulate_kge_pair(
    table: &EmbeddingTable,
    pos: &Triple,
    neg: &Triple,
    gamma: f64,
    acc: &mut GradAcc,
) -> f64 {
    let h = table.entities.row(pos.head.idx());
    let r = table.relations.row(pos.relation.idx());
    let t = table.entities.row(pos.tail.idx());
    let (s_pos, pos_score) = signed_diff(h, r, t);

    let h2 = table.entities.row(neg.head.idx());
    let r2 = table.relations.row(neg.relation.idx());
    let t2 = table.entities.row(neg.tail.idx());
    let (s_neg, neg_score) = signed_diff(h2, r2, t2);

    let loss = kge_margin_loss(pos_score, neg_score, gamma);
    if loss > 0.0 {
        acc.entities.add(pos.head.0, 1.0, &s_pos);
        acc.relations.add(pos.relation.0, 1.0, &s_pos);
        acc.entities.add(pos.tail.0, -1.0, &s_pos);
        acc.entities.add(neg.head.0, -1.0, &s_neg);
        acc.relations.add(neg.relation.0, -1.0, &s_neg);
        acc.entities.add(neg.tail.0, 1.0, &s_neg);
    }
    loss
}

fn accumulate_demography_pair(
    table: &EmbeddingTable,
    pos: (u32, u32, &[CharId]),
    neg: (u32, u32, &[CharId]),
    gamma: f64,
    alpha: f64,
    ngram_order: usize,
    acc: &mut GradAcc,
) -> f64 {
    let chars = match &table.encoder {
        ViewEncoder::Chars(t) => t,
        _ => unreachable!("demography table owns a char encoder"),
    };
    let (u, r, pos_chars) = pos;
    let (u2, r2, neg_chars) = neg;

    let phi_pos = ngram_encode(pos_chars, chars, ngram_order);
    let phi_neg = ngram_encode(neg_chars, chars, ngram_order);
    let (s_pos, f_pos) = signed_diff(
        table.entities.row(u as usize),
        table.relations.row(r as usize),
        &phi_pos,
    );
    let (s_neg, f_neg) = signed_diff(
        table.entities.row(u2 as usize),
        table.relations.row(r2 as usize),
        &phi_neg,
    );

    let loss = (gamma + alpha * (f_pos - f_neg)).max(0.0);
    if loss > 0.0 {
        acc.entities.add(u, alpha, &s_pos);
        acc.relations.add(r, alpha, &s_pos);
        acc.entities.add(u2, -alpha, &s_neg);
        acc.relations.add(r2, -alpha, &s_neg);
        // d loss / d phi_pos = -alpha * s_pos, routed to character rows.
        let mut up = s_pos;
        for v in &mut up {
            *v *= -alpha;
        }
        for (c, g) in ngram_encode_grad(pos_chars, ngram_order, &up) {
            acc.chars.add(c.0, 1.0, &g);
        }
        let mut up = s_neg;
        for v in &mut up {
            *v *= alpha;
        }
        for (c, g) in ngram_encode_grad(neg_chars, ngram_order, &up) {
            acc.chars.add(c.0, 1.0, &g);
        }
    }
    loss
}

fn accumulate_loyalty_example(
    table: &EmbeddingTable,
    user: u32,
    relation: u32,
    value_row: usize,
    acc: &mut GradAcc,
) -> f64 {
    let (cnn, values) = match &table.encoder {
        ViewEncoder::Loyalty { cnn, values, .. } => (cnn, values),
        _ => unreachable!("loyalty table owns a cnn encoder"),
    };
    let u = table.entities.row(user as usize);
    let rel = table.relations.row(relation as usize);
    let val = values.row(value_row);
    let out = cnn_forward(rel, val, cnn);

    let mut s = vec![0.0; u.len()];
    let mut norm = 0.0;
    for i in 0..u.len() {
        let d = u[i] - out[i];
        norm += d.abs();
        s[i] = sign(d);
    }
    let loss = softplus(norm);
    let coeff = sigmoid(norm); // d softplus / d norm

    acc.entities.add(user, coeff, &s);
    let mut upstream = s;
    for v in &mut upstream {
        *v *= -coeff;
    }
    let g = cnn_backward(rel, val, cnn, &upstream);
    acc.relations.add(relation, 1.0, &g.rel_emb);
    acc.values.add(value_row as u32, 1.0, &g.val_emb);
    acc.cnn_examples += 1;
    let fw = acc
        .cnn_filter_weights
        .get_or_insert_with(|| Matrix::zeros(cnn.filters(), 2 * cnn.width()));
    for (o, x) in fw.data_mut().iter_mut().zip(g.filter_weights.data()) {
        *o += x;
    }
    if acc.cnn_filter_bias.is_empty() {
        acc.cnn_filter_bias = vec![0.0; cnn.filters()];
    }
    for (o, x) in acc.cnn_filter_bias.iter_mut().zip(&g.filter_bias) {
        *o += x;
    }
    let proj = acc
        .cnn_proj
        .get_or_insert_with(|| Matrix::zeros(cnn.dim(), cnn.filters()));
    for (o, x) in proj.data_mut().iter_mut().zip(g.proj.data()) {
        *o += x;
    }
    if acc.cnn_proj_bias.is_empty() {
        acc.cnn_proj_bias = vec![0.0; cnn.dim()];
    }
    for (o, x) in acc.cnn_proj_bias.iter_mut().zip(&g.proj_bias) {
        *o += x;
    }
    loss
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum TrainData {
    Kge(Vec<Triple>),
    Demography {
        attrs: Vec<AttributeTriple>,
        encoded: Vec<Vec<CharId>>,
    },
    Loyalty {
        examples: Vec<(u32, u32, usize)>, // user, relation, value row
    },
}

enum ValNegative {
    Kge(Triple),
    Demography {
        subject: u32,
        relation: u32,
        chars: Vec<CharId>,
    },
    None,
}

fn view_seed(seed: u64, view: ViewKind) -> u64 {
    seed ^ ((view.slot() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Train one view's embedding table.
///
/// Parameters start uniform in [-6/sqrt(d), 6/sqrt(d)], positives are
/// shuffled per epoch, each draws `negatives_per_positive` negatives, and one
/// SGD step is taken per batch with entity (and character/value) rows
/// projected back into the unit ball. Training stops at `max_epochs` or after
/// `patience` epochs without validation-loss improvement.
pub fn train_view(kg: &KnowledgeGraph, view: ViewKind, cfg: &TrainConfig) -> Result<TrainedView> {
    cfg.validate()?;
    let dim = cfg.dim;
    let bound = 6.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, view));

    match view {
        ViewKind::Demography => {
            let attrs = kg.attributes().to_vec();
            if attrs.is_empty() {
                return Err(Error::Invalid(format!(
                    "view {view}: no attribute triples to train on"
                )));
            }
            let encoded = attrs
                .iter()
                .map(|a| kg.encode_literal(&a.literal))
                .collect();
            let table = EmbeddingTable {
                dim,
                entities: Matrix::uniform(kg.entity_count(), dim, bound, &mut rng),
                relations: Matrix::uniform(kg.relation_count(), dim, bound, &mut rng),
                encoder: ViewEncoder::Chars(Matrix::uniform(
                    kg.char_vocab().len(),
                    dim,
                    bound,
                    &mut rng,
                )),
            };
            train_loop(kg, view, cfg, table, TrainData::Demography { attrs, encoded }, rng)
        }
        ViewKind::Loyalty => {
            if kg.triples().is_empty() {
                return Err(Error::Invalid(format!(
                    "view {view}: no loyalty triples to train on"
                )));
            }
            let mut value_entities: Vec<u32> = kg.triples().iter().map(|t| t.tail.0).collect();
            value_entities.sort_unstable();
            value_entities.dedup();
            let value_row: HashMap<u32, usize> = value_entities
                .iter()
                .enumerate()
                .map(|(i, &e)| (e, i))
                .collect();
            let examples = kg
                .triples()
                .iter()
                .map(|t| (t.head.0, t.relation.0, value_row[&t.tail.0]))
                .collect();
            let entities = Matrix::uniform(kg.entity_count(), dim, bound, &mut rng);
            let relations = Matrix::uniform(kg.relation_count(), dim, bound, &mut rng);
            let mut cnn = CnnParams::new(dim, cfg.cnn_filters, cfg.cnn_width)?;
            cnn.randomize(bound, &mut rng);
            let values = Matrix::uniform(value_entities.len(), dim, bound, &mut rng);
            let table = EmbeddingTable {
                dim,
                entities,
                relations,
                encoder: ViewEncoder::Loyalty {
                    cnn,
                    values,
                    value_entities,
                },
            };
            train_loop(kg, view, cfg, table, TrainData::Loyalty { examples }, rng)
        }
        _ => {
            if kg.triples().is_empty() {
                return Err(Error::Invalid(format!(
                    "view {view}: no relational triples to train on"
                )));
            }
            let table = EmbeddingTable {
                dim,
                entities: Matrix::uniform(kg.entity_count(), dim, bound, &mut rng),
                relations: Matrix::uniform(kg.relation_count(), dim, bound, &mut rng),
                encoder: ViewEncoder::Structural,
            };
            train_loop(kg, view, cfg, table, TrainData::Kge(kg.triples().to_vec()), rng)
        }
    }
}

fn train_loop(
    kg: &KnowledgeGraph,
    view: ViewKind,
    cfg: &TrainConfig,
    mut table: EmbeddingTable,
    data: TrainData,
    mut rng: ChaCha8Rng,
) -> Result<TrainedView> {
    let n = match &data {
        TrainData::Kge(t) => t.len(),
        TrainData::Demography { attrs, .. } => attrs.len(),
        TrainData::Loyalty { examples } => examples.len(),
    };

    // Held-out validation split with negatives drawn once, so the stopping
    // criterion tracks a fixed quantity.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let val_count = ((n as f64) * cfg.val_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(val_count);
    let train_idx: Vec<usize> = train_idx.to_vec();
    let mut val_rng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, view) ^ 0x5DEE_CE66);
    let val_set: Vec<(usize, ValNegative)> = val_idx
        .iter()
        .map(|&i| {
            let neg = match &data {
                TrainData::Kge(triples) => {
                    ValNegative::Kge(negative_sample_triple(kg, &triples[i], &mut val_rng).triple)
                }
                TrainData::Demography { attrs, .. } => {
                    let neg = negative_sample_attribute(kg, &attrs[i], &mut val_rng);
                    ValNegative::Demography {
                        subject: neg.subject.0,
                        relation: neg.attribute_relation.0,
                        chars: kg.encode_literal(&neg.literal),
                    }
                }
                TrainData::Loyalty { .. } => ValNegative::None,
            };
            (i, neg)
        })
        .collect();

    let batch_size = cfg.batch_size.min(train_idx.len()).max(1);
    let mut acc = GradAcc::new();
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut shuffled = train_idx;

    for epoch in 1..=cfg.max_epochs {
        shuffled.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut pair_count = 0usize;

        for (batch_idx, batch) in shuffled.chunks(batch_size).enumerate() {
            acc.clear();
            for &i in batch {
                match &data {
                    TrainData::Kge(triples) => {
                        for _ in 0..cfg.negatives_per_positive {
                            let neg = negative_sample_triple(kg, &triples[i], &mut rng).triple;
                            epoch_loss +=
                                accumulate_kge_pair(&table, &triples[i], &neg, cfg.gamma, &mut acc);
                            pair_count += 1;
                        }
                    }
                    TrainData::Demography { attrs, encoded } => {
                        let a = &attrs[i];
                        for _ in 0..cfg.negatives_per_positive {
                            let neg = negative_sample_attribute(kg, a, &mut rng);
                            let neg_chars = kg.encode_literal(&neg.literal);
                            epoch_loss += accumulate_demography_pair(
                                &table,
                                (a.subject.0, a.attribute_relation.0, &encoded[i]),
                                (neg.subject.0, neg.attribute_relation.0, &neg_chars),
                                cfg.gamma,
                                cfg.alpha,
                                cfg.ngram_order,
                                &mut acc,
                            );
                            pair_count += 1;
                        }
                    }
                    TrainData::Loyalty { examples } => {
                        let (u, r, v) = examples[i];
                        epoch_loss += accumulate_loyalty_example(&table, u, r, v, &mut acc);
                        pair_count += 1;
                    }
                }
            }

            apply_step(&mut table, &acc, cfg.lr);
            table.entities.clamp_rows_to_unit_ball();
            match &mut table.encoder {
                ViewEncoder::Chars(t) => t.clamp_rows_to_unit_ball(),
                ViewEncoder::Loyalty { values, .. } => values.clamp_rows_to_unit_ball(),
                ViewEncoder::Structural => {}
            }

            if !table.all_finite() {
                return Err(Error::Invalid(format!(
                    "view {view}: non-finite parameter after batch {batch_idx} of epoch {epoch}"
                )));
            }
        }

        let train_loss = if pair_count > 0 {
            epoch_loss / pair_count as f64
        } else {
            0.0
        };
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            validation_loss(&table, &data, &val_set, cfg)
        };
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let present_users = present_users(kg, view);
    Ok(TrainedView {
        view,
        table,
        history,
        present_users,
    })
}

fn apply_step(table: &mut EmbeddingTable, acc: &GradAcc, lr: f64) {
    acc.entities.apply(&mut table.entities, lr);
    acc.relations.apply(&mut table.relations, lr);
    match &mut table.encoder {
        ViewEncoder::Structural => {}
        ViewEncoder::Chars(chars) => acc.chars.apply(chars, lr),
        ViewEncoder::Loyalty { cnn, values, .. } => {
            acc.values.apply(values, lr);
            if acc.cnn_examples > 0 {
                let scale = lr / acc.cnn_examples as f64;
                if let Some(gw) = &acc.cnn_filter_weights {
                    let [fw, fb, proj, pb] = cnn.params_mut();
                    for (o, g) in fw.iter_mut().zip(gw.data()) {
                        *o -= scale * g;
                    }
                    for (o, g) in fb.iter_mut().zip(&acc.cnn_filter_bias) {
                        *o -= scale * g;
                    }
                    if let Some(gp) = &acc.cnn_proj {
                        for (o, g) in proj.iter_mut().zip(gp.data()) {
                            *o -= scale * g;
                        }
                    }
                    for (o, g) in pb.iter_mut().zip(&acc.cnn_proj_bias) {
                        *o -= scale * g;
                    }
                }
            }
        }
    }
}

fn validation_loss(
    table: &EmbeddingTable,
    data: &TrainData,
    val_set: &[(usize, ValNegative)],
    cfg: &TrainConfig,
) -> f64 {
    let mut total = 0.0;
    for (i, neg) in val_set {
        match (data, neg) {
            (TrainData::Kge(triples), ValNegative::Kge(neg)) => {
                let p = &triples[*i];
                let pos = transe_score(
                    table.entities.row(p.head.idx()),
                    table.relations.row(p.relation.idx()),
                    table.entities.row(p.tail.idx()),
                );
                let ns = transe_score(
                    table.entities.row(neg.head.idx()),
                    table.relations.row(neg.relation.idx()),
                    table.entities.row(neg.tail.idx()),
                );
                total += kge_margin_loss(pos, ns, cfg.gamma);
            }
            (
                TrainData::Demography { attrs, encoded },
                ValNegative::Demography {
                    subject,
                    relation,
                    chars,
                },
            ) => {
                let chars_table = match &table.encoder {
                    ViewEncoder::Chars(t) => t,
                    _ => unreachable!(),
                };
                let a = &attrs[*i];
                let phi_pos = ngram_encode(&encoded[*i], chars_table, cfg.ngram_order);
                let phi_neg = ngram_encode(chars, chars_table, cfg.ngram_order);
                total += demography_loss(
                    table.entities.row(a.subject.idx()),
                    table.relations.row(a.attribute_relation.idx()),
                    &phi_pos,
                    table.entities.row(*subject as usize),
                    table.relations.row(*relation as usize),
                    &phi_neg,
                    cfg.gamma,
                    cfg.alpha,
                );
            }
            (TrainData::Loyalty { examples }, ValNegative::None) => {
                let (u, r, v) = examples[*i];
                let (cnn, values) = match &table.encoder {
                    ViewEncoder::Loyalty { cnn, values, .. } => (cnn, values),
                    _ => unreachable!(),
                };
                let out = cnn_forward(table.relations.row(r as usize), values.row(v), cnn);
                total += loyalty_loss(table.entities.row(u as usize), &out);
            }
            _ => unreachable!("validation negatives match the data kind"),
        }
    }
    total / val_set.len() as f64
}

fn present_users(kg: &KnowledgeGraph, view: ViewKind) -> Vec<u32> {
    kg.entities_of_type(USER_TYPE)
        .iter()
        .copied()
        .filter(|&e| match view {
            ViewKind::Demography => kg.attribute_degree(EntityId(e)) > 0,
            _ => kg.relational_degree(EntityId(e)) > 0,
        })
        .collect()
}

/// Mean positive vs. freshly sampled negative translation score, for
/// checking that training separated the two.
pub fn mean_scores(table: &EmbeddingTable, kg: &KnowledgeGraph, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos_total = 0.0;
    let mut neg_total = 0.0;
    for t in kg.triples() {
        pos_total += transe_score(
            table.entities.row(t.head.idx()),
            table.relations.row(t.relation.idx()),
            table.entities.row(t.tail.idx()),
        );
        let neg = negative_sample_triple(kg, t, &mut rng).triple;
        neg_total += transe_score(
            table.entities.row(neg.head.idx()),
            table.relations.row(neg.relation.idx()),
            table.entities.row(neg.tail.idx()),
        );
    }
    let n = kg.triples().len() as f64;
    (pos_total / n, neg_total / n)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Kge,
    Demography,
    Loyalty,
}

/// Compare the analytic subgradient of one random loss instance against
/// central finite differences; returns the maximum relative error over all
/// parameters. Instances are resampled away from hinge and L1 kinks.
pub fn grad_check(kind: LossKind, seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        LossKind::Kge => kge_grad_check(&mut rng, h),
        LossKind::Demography => demography_grad_check(&mut rng, h),
        LossKind::Loyalty => loyalty_grad_check(&mut rng, h),
    }
}

const KINK_TOL: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn central_diff(mut eval: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (eval(h) - eval(-h)) / (2.0 * h)
}

fn kge_grad_check(rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let dim = 6;
    let gamma = 1.0;
    let (mut entities, mut relations) = loop {
        let entities = Matrix::uniform(4, dim, 1.0, rng);
        let relations = Matrix::uniform(1, dim, 1.0, rng);
        let (_, pos) = signed_diff(entities.row(0), relations.row(0), entities.row(1));
        let (_, neg) = signed_diff(entities.row(2), relations.row(0), entities.row(3));
        let coords_ok = |a: usize, b: usize| {
            (0..dim)
                .all(|i| (entities.row(a)[i] + relations.row(0)[i] - entities.row(b)[i]).abs() > KINK_TOL)
        };
        if (gamma + pos - neg).abs() > KINK_TOL && coords_ok(0, 1) && coords_ok(2, 3) {
            break (entities, relations);
        }
    };
    let pos = Triple {
        head: EntityId(0),
        relation: crate::kg::RelationId(0),
        tail: EntityId(1),
    };
    let neg = Triple {
        head: EntityId(2),
        relation: crate::kg::RelationId(0),
        tail: EntityId(3),
    };

    let mut acc = GradAcc::new();
    let table = EmbeddingTable {
        dim,
        entities: entities.clone(),
        relations: relations.clone(),
        encoder: ViewEncoder::Structural,
    };
    accumulate_kge_pair(&table, &pos, &neg, gamma, &mut acc);

    let loss = |entities: &Matrix, relations: &Matrix| {
        let p = transe_score(entities.row(0), relations.row(0), entities.row(1));
        let n = transe_score(entities.row(2), relations.row(0), entities.row(3));
        kge_margin_loss(p, n, gamma)
    };

    let zero = vec![0.0; dim];
    let mut max = 0.0f64;
    for row in 0..4 {
        let g = acc.entities.rows.get(&(row as u32)).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
        for i in 0..dim {
            let numeric = central_diff(
                |eps| {
                    let orig = entities.row(row)[i];
                    entities.row_mut(row)[i] = orig + eps;
                    let v = loss(&entities, &relations);
                    entities.row_mut(row)[i] = orig;
                    v
                },
                h,
            );
            max = max.max(rel_err(g[i], numeric));
        }
    }
    let g = acc.relations.rows.get(&0).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
    for i in 0..dim {
        let numeric = central_diff(
            |eps| {
                let orig = relations.row(0)[i];
                relations.row_mut(0)[i] = orig + eps;
                let v = loss(&entities, &relations);
                relations.row_mut(0)[i] = orig;
                v
            },
            h,
        );
        max = max.max(rel_err(g[i], numeric));
    }
    max
}

fn demography_grad_check(rng: &mut ChaCha8Rng, h: f64) -> f64 {
    use rand::Rng;
    let dim = 5;
    let (gamma, alpha) = (1.0, 0.7);
    let order = 3;
    let n_chars = 6u32;
    let k_pos = 4;
    let k_neg = 3;

    loop {
        let entities = Matrix::uniform(2, dim, 1.0, rng);
        let relations = Matrix::uniform(1, dim, 1.0, rng);
        let chars = Matrix::uniform(n_chars as usize, dim, 1.0, rng);
        let pos_chars: Vec<CharId> = (0..k_pos).map(|_| CharId(rng.gen_range(0..n_chars))).collect();
        let neg_chars: Vec<CharId> = (0..k_neg).map(|_| CharId(rng.gen_range(0..n_chars))).collect();

        let phi_pos = ngram_encode(&pos_chars, &chars, order);
        let phi_neg = ngram_encode(&neg_chars, &chars, order);
        let (_, f_pos) = signed_diff(entities.row(0), relations.row(0), &phi_pos);
        let (_, f_neg) = signed_diff(entities.row(1), relations.row(0), &phi_neg);
        let coord_ok = |u: &[f64], phi: &[f64]| {
            (0..dim).all(|i| (u[i] + relations.row(0)[i] - phi[i]).abs() > KINK_TOL)
        };
        if (gamma + alpha * (f_pos - f_neg)).abs() <= KINK_TOL
            || !coord_ok(entities.row(0), &phi_pos)
            || !coord_ok(entities.row(1), &phi_neg)
        {
            continue;
        }

        let mut table = EmbeddingTable {
            dim,
            entities,
            relations,
            encoder: ViewEncoder::Chars(chars),
        };
        let mut acc = GradAcc::new();
        accumulate_demography_pair(
            &table,
            (0, 0, &pos_chars),
            (1, 0, &neg_chars),
            gamma,
            alpha,
            order,
            &mut acc,
        );

        let loss = |t: &EmbeddingTable| {
            let chars = match &t.encoder {
                ViewEncoder::Chars(c) => c,
                _ => unreachable!(),
            };
            demography_loss(
                t.entities.row(0),
                t.relations.row(0),
                &ngram_encode(&pos_chars, chars, order),
                t.entities.row(1),
                t.relations.row(0),
                &ngram_encode(&neg_chars, chars, order),
                gamma,
                alpha,
            )
        };

        let zero = vec![0.0; dim];
        let mut max = 0.0f64;
        for row in 0..2u32 {
            let g = acc.entities.rows.get(&row).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
            for i in 0..dim {
                let numeric = central_diff(
                    |eps| {
                        let orig = table.entities.row(row as usize)[i];
                        table.entities.row_mut(row as usize)[i] = orig + eps;
                        let v = loss(&table);
                        table.entities.row_mut(row as usize)[i] = orig;
                        v
                    },
                    h,
                );
                max = max.max(rel_err(g[i], numeric));
            }
        }
        let g = acc.relations.rows.get(&0).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
        for i in 0..dim {
            let numeric = central_diff(
                |eps| {
                    let orig = table.relations.row(0)[i];
                    table.relations.row_mut(0)[i] = orig + eps;
                    let v = loss(&table);
                    table.relations.row_mut(0)[i] = orig;
                    v
                },
                h,
            );
            max = max.max(rel_err(g[i], numeric));
        }
        for c in 0..n_chars {
            let g = acc.chars.rows.get(&c).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
            for i in 0..dim {
                let numeric = central_diff(
                    |eps| {
                        match &mut table.encoder {
                            ViewEncoder::Chars(t) => t.row_mut(c as usize)[i] += eps,
                            _ => unreachable!(),
                        }
                        let v = loss(&table);
                        match &mut table.encoder {
                            ViewEncoder::Chars(t) => t.row_mut(c as usize)[i] -= eps,
                            _ => unreachable!(),
                        }
                        v
                    },
                    h,
                );
                max = max.max(rel_err(g[i], numeric));
            }
        }
        return max;
    }
}

fn loyalty_grad_check(rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let dim = 4;
    let (filters, width) = (2, 2);

    'outer: loop {
        let entities = Matrix::uniform(1, dim, 1.0, rng);
        let relations = Matrix::uniform(1, dim, 1.0, rng);
        let values = Matrix::uniform(1, dim, 1.0, rng);
        let mut cnn = CnnParams::new(dim, filters, width).unwrap();
        cnn.randomize(1.0, rng);

        let out = cnn_forward(relations.row(0), values.row(0), &cnn);
        for i in 0..dim {
            if (entities.row(0)[i] - out[i]).abs() <= KINK_TOL {
                continue 'outer;
            }
        }
        // The max-pool argmax must be stable under the perturbation; skip
        // instances with near-ties.
        for f in 0..filters {
            let weights = cnn.params()[0];
            let bias = cnn.params()[1];
            let mut acts: Vec<f64> = (0..dim - width + 1)
                .map(|p| {
                    let mut z = bias[f];
                    for c in 0..width {
                        z += weights[f * 2 * width + c] * relations.row(0)[p + c]
                            + weights[f * 2 * width + width + c] * values.row(0)[p + c];
                    }
                    z.tanh()
                })
                .collect();
            acts.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if acts.len() > 1 && (acts[0] - acts[1]).abs() <= 1e-4 {
                continue 'outer;
            }
        }

        let mut table = EmbeddingTable {
            dim,
            entities,
            relations,
            encoder: ViewEncoder::Loyalty {
                cnn,
                values,
                value_entities: vec![0],
            },
        };
        let mut acc = GradAcc::new();
        accumulate_loyalty_example(&table, 0, 0, 0, &mut acc);

        let loss = |t: &EmbeddingTable| {
            let (cnn, values) = match &t.encoder {
                ViewEncoder::Loyalty { cnn, values, .. } => (cnn, values),
                _ => unreachable!(),
            };
            let out = cnn_forward(t.relations.row(0), values.row(0), cnn);
            loyalty_loss(t.entities.row(0), &out)
        };

        let zero = vec![0.0; dim];
        let mut max = 0.0f64;
        let g = acc.entities.rows.get(&0).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
        for i in 0..dim {
            let numeric = central_diff(
                |eps| {
                    let orig = table.entities.row(0)[i];
                    table.entities.row_mut(0)[i] = orig + eps;
                    let v = loss(&table);
                    table.entities.row_mut(0)[i] = orig;
                    v
                },
                h,
            );
            max = max.max(rel_err(g[i], numeric));
        }
        let g = acc.relations.rows.get(&0).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
        for i in 0..dim {
            let numeric = central_diff(
                |eps| {
                    let orig = table.relations.row(0)[i];
                    table.relations.row_mut(0)[i] = orig + eps;
                    let v = loss(&table);
                    table.relations.row_mut(0)[i] = orig;
                    v
                },
                h,
            );
            max = max.max(rel_err(g[i], numeric));
        }
        let g = acc.values.rows.get(&0).map(|e| e.g.clone()).unwrap_or_else(|| zero.clone());
        for i in 0..dim {
            let numeric = central_diff(
                |eps| {
                    match &mut table.encoder {
                        ViewEncoder::Loyalty { values, .. } => values.row_mut(0)[i] += eps,
                        _ => unreachable!(),
                    }
                    let v = loss(&table);
                    match &mut table.encoder {
                        ViewEncoder::Loyalty { values, .. } => values.row_mut(0)[i] -= eps,
                        _ => unreachable!(),
                    }
                    v
                },
                h,
            );
            max = max.max(rel_err(g[i], numeric));
        }

        // CNN parameters, flattened in declaration order.
        let param_grads: Vec<Vec<f64>> = vec![
            acc.cnn_filter_weights
                .as_ref()
                .map(|m| m.data().to_vec())
                .unwrap_or_default(),
            acc.cnn_filter_bias.clone(),
            acc.cnn_proj
                .as_ref()
                .map(|m| m.data().to_vec())
                .unwrap_or_default(),
            acc.cnn_proj_bias.clone(),
        ];
        for (pi, grads) in param_grads.iter().enumerate() {
            for (j, &g) in grads.iter().enumerate() {
                let numeric = central_diff(
                    |eps| {
                        match &mut table.encoder {
                            ViewEncoder::Loyalty { cnn, .. } => cnn.params_mut()[pi][j] += eps,
                            _ => unreachable!(),
                        }
                        let v = loss(&table);
                        match &mut table.encoder {
                            ViewEncoder::Loyalty { cnn, .. } => cnn.params_mut()[pi][j] -= eps,
                            _ => unreachable!(),
                        }
                        v
                    },
                    h,
                );
                max = max.max(rel_err(g, numeric));
            }
        }
        return max;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{load_triples, RelationId};
    use std::io::Write;

    #[test]
    fn transe_score_hand_cases() {
        assert_eq!(transe_score(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(transe_score(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]), 0.0);
        assert_eq!(transe_score(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]), 2.0);
    }

    #[test]
    fn transe_score_is_symmetric_under_negated_relation() {
        let h = [0.3, -0.7, 1.1];
        let r = [0.2, 0.4, -0.9];
        let t = [-0.5, 0.0, 0.8];
        let neg_r: Vec<f64> = r.iter().map(|x| -x).collect();
        assert!((transe_score(&h, &r, &t) - transe_score(&t, &neg_r, &h)).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_hand_cases() {
        assert_eq!(kge_margin_loss(0.0, 5.0, 1.0), 0.0);
        assert_eq!(kge_margin_loss(2.0, 2.0, 1.0), 1.0);
        assert_eq!(kge_margin_loss(3.0, 1.0, 5.0), 7.0);
    }

    #[test]
    fn demography_loss_hand_cases() {
        let zero = vec![0.0; 2];
        // f_pos = f_neg -> gamma
        let l = demography_loss(&zero, &zero, &zero, &zero, &zero, &zero, 1.5, 0.3);
        assert_eq!(l, 1.5);
        // f_pos=1, f_neg=4, alpha=0.5, gamma=1 -> max(0, 1 + 0.5*(-3)) = 0
        let u = vec![1.0, 0.0];
        let phi_neg = vec![0.0, 4.0];
        let l = demography_loss(&u, &zero, &zero, &zero, &zero, &phi_neg, 1.0, 0.5);
        assert_eq!(l, 0.0);
        // alpha = 1 reduces to the margin-loss form
        let l = demography_loss(&u, &zero, &zero, &zero, &zero, &phi_neg, 1.0, 1.0);
        assert_eq!(l, kge_margin_loss(1.0, 4.0, 1.0));
    }

    #[test]
    fn loyalty_loss_hand_cases() {
        let u = vec![0.4, -0.2, 0.0];
        assert!((loyalty_loss(&u, &u) - 2.0f64.ln()).abs() < 1e-12);
        // asymptote: |log(1+e^30) - 30| < 1e-12
        assert!((softplus(30.0) - 30.0).abs() < 1e-12);
        assert_eq!(softplus(31.0), 31.0);
        // strictly increasing in the distance
        let mut prev = loyalty_loss(&u, &u);
        for step in 1..6 {
            let other: Vec<f64> = u.iter().map(|x| x + 0.3 * step as f64).collect();
            let l = loyalty_loss(&u, &other);
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn grad_checks_pass_at_small_scale() {
        for seed in 0..10 {
            assert!(grad_check(LossKind::Kge, seed, 1e-5) < 1e-4);
            assert!(grad_check(LossKind::Demography, seed, 1e-5) < 1e-4);
            assert!(grad_check(LossKind::Loyalty, seed, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn kge_zero_loss_has_zero_gradients() {
        let dim = 3;
        let mut entities = Matrix::zeros(4, dim);
        entities.row_mut(2).copy_from_slice(&[5.0, 5.0, 5.0]);
        let relations = Matrix::zeros(1, dim);
        let table = EmbeddingTable {
            dim,
            entities,
            relations,
            encoder: ViewEncoder::Structural,
        };
        let pos = Triple {
            head: EntityId(0),
            relation: RelationId(0),
            tail: EntityId(1),
        };
        let neg = Triple {
            head: EntityId(2),
            relation: RelationId(0),
            tail: EntityId(3),
        };
        let mut acc = GradAcc::new();
        let loss = accumulate_kge_pair(&table, &pos, &neg, 1.0, &mut acc);
        assert_eq!(loss, 0.0);
        assert!(acc.entities.rows.is_empty());
        assert!(acc.relations.rows.is_empty());
    }

    fn toy_kg(n_entities: usize, n_triples: usize, seed: u64) -> KnowledgeGraph {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut content = String::new();
        let mut seen = std::collections::HashSet::new();
        while seen.len() < n_triples {
            let h = rng.gen_range(0..n_entities / 2);
            let t = n_entities / 2 + rng.gen_range(0..n_entities - n_entities / 2);
            let r = rng.gen_range(0..3);
            if seen.insert((h, r, t)) {
                content.push_str(&format!("e{h:03}\trel{r}\te{t:03}\n"));
            }
        }
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        load_triples(f.path(), ViewKind::Ichiba).unwrap()
    }

    #[test]
    fn toy_training_separates_positive_and_negative_scores() {
        let kg = toy_kg(12, 20, 99);
        let cfg = TrainConfig {
            dim: 16,
            lr: 0.05,
            max_epochs: 50,
            patience: 50,
            val_fraction: 0.0,
            seed: 7,
            ..TrainConfig::default()
        };
        let trained = train_view(&kg, ViewKind::Ichiba, &cfg).unwrap();
        let (pos, neg) = mean_scores(&trained.table, &kg, 1234);
        assert!(pos < neg, "pos {pos} !< neg {neg}");
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let kg = toy_kg(10, 15, 5);
        let base = TrainConfig {
            dim: 8,
            lr: 0.0,
            max_epochs: 3,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let a = train_view(&kg, ViewKind::Ichiba, &base).unwrap();
        let b = train_view(
            &kg,
            ViewKind::Ichiba,
            &TrainConfig {
                max_epochs: 30,
                ..base
            },
        )
        .unwrap();
        // With lr = 0 the parameters never move, so any epoch count matches.
        assert!(a.table.bits_eq(&b.table));
    }

    #[test]
    fn same_seed_reproduces_history_and_table_bits() {
        let kg = toy_kg(14, 25, 17);
        let cfg = TrainConfig {
            dim: 8,
            lr: 0.02,
            max_epochs: 12,
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        let a = train_view(&kg, ViewKind::Ichiba, &cfg).unwrap();
        let b = train_view(&kg, ViewKind::Ichiba, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.table.bits_eq(&b.table));
    }

    #[test]
    fn entity_rows_stay_in_unit_ball() {
        let kg = toy_kg(12, 24, 31);
        let cfg = TrainConfig {
            dim: 8,
            lr: 0.1,
            max_epochs: 10,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let trained = train_view(&kg, ViewKind::Ichiba, &cfg).unwrap();
        for i in 0..trained.table.entities.rows() {
            let norm = crate::linalg::l2_norm(trained.table.entities.row(i));
            assert!(norm <= 1.0 + 1e-9, "row {i} norm {norm}");
        }
    }

    #[test]
    fn non_finite_parameters_abort_with_batch_diagnostic() {
        let kg = toy_kg(10, 15, 3);
        // Updates are capped at lr per batch, so f64::MAX overflows a
        // relation row as soon as two same-sign steps stack.
        let cfg = TrainConfig {
            dim: 8,
            lr: f64::MAX,
            max_epochs: 50,
            patience: 50,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let err = train_view(&kg, ViewKind::Ichiba, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite parameter after batch"), "{msg}");
    }

    #[test]
    fn loss_history_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_history(
            &path,
            &[
                EpochLoss {
                    epoch: 1,
                    train_loss: 1.5,
                    val_loss: 1.25,
                },
                EpochLoss {
                    epoch: 2,
                    train_loss: 1.0,
                    val_loss: 0.75,
                },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn demography_training_runs_and_marks_presence() {
        let mut content = String::new();
        for i in 0..12 {
            content.push_str(&format!("u{i:02}\tage\t{}\n", 20 + (i % 4) * 10));
            content.push_str(&format!("u{i:02}\tarea\tA{}\n", i % 3));
        }
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        let kg = crate::kg::GraphSource {
            view: Some(ViewKind::Demography),
            attribute_files: vec![f.path().to_path_buf()],
            add_missing_subjects: true,
            ..Default::default()
        }
        .load()
        .unwrap();
        let cfg = TrainConfig {
            dim: 8,
            lr: 0.02,
            max_epochs: 15,
            val_fraction: 0.25,
            ..TrainConfig::default()
        };
        let trained = train_view(&kg, ViewKind::Demography, &cfg).unwrap();
        assert_eq!(trained.present_users.len(), 12);
        assert!(trained.table.all_finite());
        let set = trained.user_embeddings(&kg);
        assert_eq!(set.len(), 12);
    }

    #[test]
    fn loyalty_training_runs_on_derived_graph() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            "u1\tbought\ti1\nu1\tbought\ti2\nu2\tbought\ti3\nu2\tbought\ti4\n\
             i1\tsold_by\ts1\ni2\tsold_by\ts1\ni3\tsold_by\ts2\ni4\tsold_by\ts2\n"
        )
        .unwrap();
        let mut tf = tempfile::NamedTempFile::new().unwrap();
        for e in ["u1", "u2"] {
            writeln!(tf, "{e}\tuser").unwrap();
        }
        for e in ["i1", "i2", "i3", "i4"] {
            writeln!(tf, "{e}\titem").unwrap();
        }
        for e in ["s1", "s2"] {
            writeln!(tf, "{e}\tshop").unwrap();
        }
        let kg = crate::kg::GraphSource {
            view: Some(ViewKind::Ichiba),
            triple_files: vec![f.path().to_path_buf()],
            entity_types_file: Some(tf.path().to_path_buf()),
            ..Default::default()
        }
        .load()
        .unwrap();
        let rules = crate::kg::LoyaltyRules {
            min_repeat: 2,
            ..Default::default()
        };
        let loyal = crate::kg::loyalty_graph(&[&kg], &rules);
        assert_eq!(loyal.triples().len(), 2);
        let cfg = TrainConfig {
            dim: 6,
            lr: 0.05,
            max_epochs: 20,
            val_fraction: 0.0,
            cnn_filters: 2,
            cnn_width: 2,
            ..TrainConfig::default()
        };
        let trained = train_view(&loyal, ViewKind::Loyalty, &cfg).unwrap();
        assert!(trained.table.all_finite());
        assert_eq!(trained.present_users.len(), 2);
        // The loss pulls user embeddings toward their CNN targets.
        let first = trained.history.first().unwrap().train_loss;
        let last = trained.history.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last}");
    }
}
