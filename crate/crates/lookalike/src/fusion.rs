//! Combine up to five per-user view embeddings into one vector using
//! cosine-derived weights against the views' mean.

use std::collections::BTreeSet;
use std::path::Path;

use crate::embed_file::EmbeddingSet;
use crate::linalg::{axpy, cosine};
use crate::{Error, Result, ViewKind};

/// Denominators smaller than this trigger the uniform-weight fallback.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-9;

/// Per-user view slots in `ViewKind::ALL` order; missing views are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub user: String,
    pub slots: [Option<Vec<f64>>; 5],
}

impl ViewSet {
    pub fn new(user: impl Into<String>) -> ViewSet {
        ViewSet {
            user: user.into(),
            slots: Default::default(),
        }
    }

    pub fn set(&mut self, view: ViewKind, vector: Vec<f64>) {
        self.slots[view.slot()] = Some(vector);
    }

    pub fn present_slots(&self) -> Vec<usize> {
        (0..5).filter(|&i| self.slots[i].is_some()).collect()
    }

    fn check(&self) -> Result<usize> {
        let mut dim = None;
        for v in self.slots.iter().flatten() {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d == v.len() => {}
                Some(d) => {
                    return Err(Error::Invalid(format!(
                        "user {}: views trained with different dimensions ({} vs {})",
                        self.user,
                        d,
                        v.len()
                    )))
                }
            }
        }
        dim.ok_or_else(|| Error::Invalid(format!("user {}: no view present", self.user)))
    }
}

/// Unweighted mean of the present view vectors.
pub fn mean_view(views: &ViewSet) -> Result<Vec<f64>> {
    let dim = views.check()?;
    let mut mean = vec![0.0; dim];
    let mut count = 0.0;
    for v in views.slots.iter().flatten() {
        axpy(&mut mean, 1.0, v);
        count += 1.0;
    }
    for m in &mut mean {
        *m /= count;
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewWeights {
    /// Weight per slot; missing views hold exactly 0.
    pub by_slot: [f64; 5],
    /// True when the cosine denominator degenerated and uniform weights were
    /// used instead.
    pub uniform_fallback: bool,
}

impl ViewWeights {
    pub fn present_weights(&self, views: &ViewSet) -> Vec<f64> {
        views
            .present_slots()
            .into_iter()
            .map(|i| self.by_slot[i])
            .collect()
    }
}

fn weights_against(views: &ViewSet, reference: &[f64]) -> ViewWeights {
    let mut by_slot = [0.0; 5];
    let present = views.present_slots();
    let mut denom = 0.0;
    for &i in &present {
        let c = cosine(views.slots[i].as_ref().unwrap(), reference);
        by_slot[i] = c;
        denom += c;
    }
    if denom.abs() <= DEGENERATE_DENOMINATOR {
        by_slot = [0.0; 5];
        let w = 1.0 / present.len() as f64;
        for &i in &present {
            by_slot[i] = w;
        }
        return ViewWeights {
            by_slot,
            uniform_fallback: true,
        };
    }
    for &i in &present {
        by_slot[i] /= denom;
    }
    ViewWeights {
        by_slot,
        uniform_fallback: false,
    }
}

/// Cosine of each present view against the mean view, normalized to sum 1.
pub fn view_weights(views: &ViewSet) -> Result<ViewWeights> {
    Ok(weights_against(views, &mean_view(views)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub user: String,
    pub vector: Vec<f64>,
    pub weights: [f64; 5],
    pub present: [bool; 5],
    pub uniform_fallback: bool,
}

/// Weighted combination of the present views.
pub fn fuse(views: &ViewSet) -> Result<FusedEmbedding> {
    fuse_with_iters(views, 1)
}

/// Like [`fuse`], but the reference vector may be re-estimated: iteration 1
/// uses the plain mean, every further iteration recomputes weights against
/// the previous weighted combination.
pub fn fuse_with_iters(views: &ViewSet, iters: usize) -> Result<FusedEmbedding> {
    let dim = views.check()?;
    let iters = iters.max(1);
    let mut reference = mean_view(views)?;
    let mut weights = weights_against(views, &reference);
    for _ in 1..iters {
        reference = combine(views, &weights, dim);
        weights = weights_against(views, &reference);
    }
    let vector = combine(views, &weights, dim);
    let mut present = [false; 5];
    for i in views.present_slots() {
        present[i] = true;
    }
    Ok(FusedEmbedding {
        user: views.user.clone(),
        vector,
        weights: weights.by_slot,
        present,
        uniform_fallback: weights.uniform_fallback,
    })
}

fn combine(views: &ViewSet, weights: &ViewWeights, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in views.present_slots() {
        axpy(&mut out, weights.by_slot[i], views.slots[i].as_ref().unwrap());
    }
    out
}

/// Join per-view embedding sets into one ViewSet per user (union of users,
/// sorted) and fuse each.
pub fn fuse_sets(
    per_view: &[Option<&EmbeddingSet>; 5],
    iters: usize,
) -> Result<(EmbeddingSet, Vec<FusedEmbedding>)> {
    let mut dim = None;
    for set in per_view.iter().flatten() {
        match dim {
            None => dim = Some(set.dim()),
            Some(d) if d == set.dim() => {}
            Some(d) => {
                return Err(Error::Invalid(format!(
                    "views trained with different dimensions ({} vs {})",
                    d,
                    set.dim()
                )))
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::Invalid("no view embeddings to fuse".to_string()))?;

    let mut users: BTreeSet<&str> = BTreeSet::new();
    for set in per_view.iter().flatten() {
        users.extend(set.labels().iter().map(|s| s.as_str()));
    }
    if users.is_empty() {
        return Err(Error::Invalid("no users present in any view".to_string()));
    }

    let mut fused_set = EmbeddingSet::new(dim);
    let mut fused = Vec::with_capacity(users.len());
    for user in users {
        let mut vs = ViewSet::new(user);
        for (slot, set) in per_view.iter().enumerate() {
            if let Some(set) = set {
                if let Some(v) = set.get(user) {
                    vs.slots[slot] = Some(v.to_vec());
                }
            }
        }
        let f = fuse_with_iters(&vs, iters)?;
        fused_set.push(f.user.clone(), f.vector.clone())?;
        fused.push(f);
    }
    Ok((fused_set, fused))
}

// ---------------------------------------------------------------------------
// Weight sidecar file
// ---------------------------------------------------------------------------

/// Write the per-user weight sidecar: `user<TAB>w1,...,w5<TAB>present_mask`,
/// mask in demography/loyalty/ichiba/travel/family slot order.
pub fn write_weight_sidecar(path: &Path, fused: &[FusedEmbedding]) -> Result<()> {
    let mut out = String::new();
    for f in fused {
        let ws: Vec<String> = f.weights.iter().map(|w| format!("{w:.8e}")).collect();
        let mask: String = f
            .present
            .iter()
            .map(|&p| if p { '1' } else { '0' })
            .collect();
        out.push_str(&format!("{}\t{}\t{}\n", f.user, ws.join(","), mask));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidecarRow {
    pub user: String,
    pub weights: [f64; 5],
    pub present: [bool; 5],
}

pub fn parse_weight_sidecar(content: &str, file: &str) -> Result<Vec<SidecarRow>> {
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(file, lineno, "expected user<TAB>weights<TAB>mask"));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(file, lineno, "empty user field"));
        }
        let parts: Vec<&str> = fields[1].split(',').collect();
        if parts.len() != 5 {
            return Err(Error::parse(file, lineno, "expected 5 weights"));
        }
        let mut weights = [0.0; 5];
        for (j, p) in parts.iter().enumerate() {
            weights[j] = p
                .parse::<f64>()
                .map_err(|_| Error::parse(file, lineno, format!("bad weight `{p}`")))?;
            if !weights[j].is_finite() {
                return Err(Error::parse(file, lineno, "non-finite weight"));
            }
        }
        let mask: Vec<char> = fields[2].chars().collect();
        if mask.len() != 5 || mask.iter().any(|&c| c != '0' && c != '1') {
            return Err(Error::parse(file, lineno, "mask must be 5 characters of 0/1"));
        }
        let mut present = [false; 5];
        for (j, &c) in mask.iter().enumerate() {
            present[j] = c == '1';
        }
        rows.push(SidecarRow {
            user: fields[0].to_string(),
            weights,
            present,
        });
    }
    Ok(rows)
}

pub fn load_weight_sidecar(path: &Path) -> Result<Vec<SidecarRow>> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_weight_sidecar(&content, &path.display().to_string())
}
