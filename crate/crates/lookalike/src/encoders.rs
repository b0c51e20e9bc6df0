//! Differentiable encoders with closed-form gradients: the n-gram
//! compositional literal encoder and the loyalty CNN over a 2-row
//! relation/value matrix.

use rand::Rng;

use crate::kg::CharId;
use crate::linalg::{axpy, Matrix};
use crate::{Error, Result};

/// Character embedding rows, one per character id.
pub type CharEmbeddingTable = Matrix;

/// Per-position coefficients of the n-gram compositional function.
///
/// For each order n in 1..=min(N, k) the encoder averages the summed
/// character vectors over all k-n+1 windows, so position j contributes with
/// weight (number of windows covering j) / (k-n+1), summed over orders.
pub fn ngram_position_coefficients(k: usize, max_order: usize) -> Vec<f64> {
    assert!(k >= 1, "literal length must be >= 1");
    assert!(max_order >= 1, "n-gram order must be >= 1");
    let mut coef = vec![0.0; k];
    for n in 1..=max_order.min(k) {
        let windows = k - n + 1;
        for (j, c) in coef.iter_mut().enumerate() {
            // windows covering position j start in [j+1-n, j] (0-based),
            // clipped to the valid window starts [0, k-n].
            let lo = j.saturating_sub(n - 1);
            let hi = j.min(k - n);
            if hi >= lo {
                *c += (hi - lo + 1) as f64 / windows as f64;
            }
        }
    }
    coef
}

/// Encode a character sequence: sum over orders of the mean window sum.
/// Orders larger than the sequence length contribute zero.
pub fn ngram_encode(chars: &[CharId], table: &CharEmbeddingTable, max_order: usize) -> Vec<f64> {
    assert!(!chars.is_empty(), "cannot encode an empty literal");
    let coef = ngram_position_coefficients(chars.len(), max_order);
    let mut out = vec![0.0; table.cols()];
    for (c, w) in chars.iter().zip(&coef) {
        axpy(&mut out, *w, table.row(c.idx()));
    }
    out
}

/// Gradient of `<ngram_encode(chars), upstream>` with respect to each
/// involved character row. Repeated characters accumulate.
pub fn ngram_encode_grad(
    chars: &[CharId],
    max_order: usize,
    upstream: &[f64],
) -> Vec<(CharId, Vec<f64>)> {
    let coef = ngram_position_coefficients(chars.len(), max_order);
    let mut acc: Vec<(CharId, f64)> = Vec::new();
    for (c, w) in chars.iter().zip(&coef) {
        match acc.iter_mut().find(|(id, _)| id == c) {
            Some((_, total)) => *total += w,
            None => acc.push((*c, *w)),
        }
    }
    acc.into_iter()
        .map(|(c, w)| (c, upstream.iter().map(|u| w * u).collect()))
        .collect()
}

/// Convolutional encoder over the stacked 2 x d relation/value matrix:
/// full-height filters of width `w` slid over the d columns, tanh
/// activation, max-pool per filter, affine projection back to d.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    dim: usize,
    filters: usize,
    width: usize,
    /// filters x (2 * width), row-major per filter.
    filter_weights: Matrix,
    filter_bias: Vec<f64>,
    /// d x filters projection.
    proj: Matrix,
    proj_bias: Vec<f64>,
}

impl CnnParams {
    pub fn new(dim: usize, filters: usize, width: usize) -> Result<CnnParams> {
        if width > dim {
            return Err(Error::Config(format!(
                "cnn filter width {width} exceeds embedding dimension {dim}"
            )));
        }
        if filters == 0 || width == 0 {
            return Err(Error::Config("cnn needs at least one filter of width >= 1".into()));
        }
        Ok(CnnParams {
            dim,
            filters,
            width,
            filter_weights: Matrix::zeros(filters, 2 * width),
            filter_bias: vec![0.0; filters],
            proj: Matrix::zeros(dim, filters),
            proj_bias: vec![0.0; dim],
        })
    }

    pub fn randomize(&mut self, bound: f64, rng: &mut impl Rng) {
        let mut fill = |data: &mut [f64]| {
            for v in data {
                *v = rng.gen_range(-bound..=bound);
            }
        };
        fill(self.filter_weights.data_mut());
        fill(&mut self.filter_bias);
        fill(self.proj.data_mut());
        fill(&mut self.proj_bias);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn all_finite(&self) -> bool {
        self.filter_weights.all_finite()
            && self.filter_bias.iter().all(|v| v.is_finite())
            && self.proj.all_finite()
            && self.proj_bias.iter().all(|v| v.is_finite())
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.filter_weights.data_mut(),
            &mut self.filter_bias,
            self.proj.data_mut(),
            &mut self.proj_bias,
        ]
    }

    pub fn params(&self) -> [&[f64]; 4] {
        [
            self.filter_weights.data(),
            &self.filter_bias,
            self.proj.data(),
            &self.proj_bias,
        ]
    }

    fn positions(&self) -> usize {
        self.dim - self.width + 1
    }

    fn preactivation(&self, f: usize, p: usize, rel: &[f64], val: &[f64]) -> f64 {
        let w = self.filter_weights.row(f);
        let mut z = self.filter_bias[f];
        for c in 0..self.width {
            z += w[c] * rel[p + c] + w[self.width + c] * val[p + c];
        }
        z
    }

    /// Pooled activations and their argmax positions (ties -> lowest index).
    fn pool(&self, rel: &[f64], val: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let mut pooled = vec![0.0; self.filters];
        let mut arg = vec![0usize; self.filters];
        for f in 0..self.filters {
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0;
            for p in 0..self.positions() {
                let a = self.preactivation(f, p, rel, val).tanh();
                if a > best {
                    best = a;
                    best_p = p;
                }
            }
            pooled[f] = best;
            arg[f] = best_p;
        }
        (pooled, arg)
    }
}

/// Forward pass; output length equals the embedding dimension.
pub fn cnn_forward(rel_emb: &[f64], val_emb: &[f64], params: &CnnParams) -> Vec<f64> {
    assert_eq!(rel_emb.len(), params.dim);
    assert_eq!(val_emb.len(), params.dim);
    let (pooled, _) = params.pool(rel_emb, val_emb);
    let mut out = params.proj_bias.clone();
    for (i, o) in out.iter_mut().enumerate() {
        *o += crate::linalg::dot(params.proj.row(i), &pooled);
    }
    out
}

/// Gradients of `<cnn_forward, upstream>`.
#[derive(Debug, Clone)]
pub struct CnnGrads {
    pub filter_weights: Matrix,
    pub filter_bias: Vec<f64>,
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub rel_emb: Vec<f64>,
    pub val_emb: Vec<f64>,
}

pub fn cnn_backward(
    rel_emb: &[f64],
    val_emb: &[f64],
    params: &CnnParams,
    upstream: &[f64],
) -> CnnGrads {
    assert_eq!(upstream.len(), params.dim);
    let (pooled, arg) = params.pool(rel_emb, val_emb);

    let mut g = CnnGrads {
        filter_weights: Matrix::zeros(params.filters, 2 * params.width),
        filter_bias: vec![0.0; params.filters],
        proj: Matrix::zeros(params.dim, params.filters),
        proj_bias: upstream.to_vec(),
        rel_emb: vec![0.0; params.dim],
        val_emb: vec![0.0; params.dim],
    };

    // d<out,u>/d proj[i][f] = u_i * pooled_f; d/d pooled_f = sum_i P[i][f] u_i
    let mut g_pooled = vec![0.0; params.filters];
    for i in 0..params.dim {
        let row = params.proj.row(i);
        let grow = g.proj.row_mut(i);
        for f in 0..params.filters {
            grow[f] = upstream[i] * pooled[f];
            g_pooled[f] += row[f] * upstream[i];
        }
    }

    // Max-pool routes the gradient to the argmax position only.
    for f in 0..params.filters {
        let p = arg[f];
        let dz = g_pooled[f] * (1.0 - pooled[f] * pooled[f]); // tanh'
        g.filter_bias[f] += dz;
        let w = params.filter_weights.row(f);
        let gw = g.filter_weights.row_mut(f);
        for c in 0..params.width {
            gw[c] += dz * rel_emb[p + c];
            gw[params.width + c] += dz * val_emb[p + c];
            g.rel_emb[p + c] += dz * w[c];
            g.val_emb[p + c] += dz * w[params.width + c];
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(rows: &[&[f64]]) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        m
    }

    #[test]
    fn single_char_is_identity() {
        let t = table(&[&[0.3, -1.2, 0.5]]);
        let out = ngram_encode(&[CharId(0)], &t, 1);
        assert_eq!(out, vec![0.3, -1.2, 0.5]);
    }

    #[test]
    fn two_chars_order_two_expands_by_hand() {
        // n=1 term (e1+e2)/2, n=2 term (e1+e2)/1 => 1.5*(e1+e2)
        let t = table(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let out = ngram_encode(&[CharId(0), CharId(1)], &t, 2);
        assert!((out[0] - 1.5).abs() < 1e-12);
        assert!((out[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn orders_beyond_length_contribute_zero() {
        let t = table(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let short = ngram_encode(&[CharId(0), CharId(1)], &t, 2);
        let long = ngram_encode(&[CharId(0), CharId(1)], &t, 5);
        assert_eq!(short, long);
    }

    #[test]
    fn zero_table_encodes_to_zero() {
        let t = Matrix::zeros(4, 3);
        for k in 1..5 {
            let chars: Vec<CharId> = (0..k).map(|i| CharId(i as u32 % 4)).collect();
            let out = ngram_encode(&chars, &t, 3);
            assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn grad_coefficients_match_forward() {
        let up = vec![1.0, 0.0];
        let g = ngram_encode_grad(&[CharId(0)], 1, &up);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].1[0], 1.0);

        let g = ngram_encode_grad(&[CharId(0), CharId(1)], 2, &up);
        for (_, v) in &g {
            assert!((v[0] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_chars_accumulate_in_grad() {
        let up = vec![1.0];
        let g = ngram_encode_grad(&[CharId(7), CharId(7)], 2, &up);
        assert_eq!(g.len(), 1);
        assert!((g[0].1[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ngram_grad_matches_finite_differences() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut t = Matrix::uniform(6, d, 0.9, &mut rng);
        let chars: Vec<CharId> = [0u32, 3, 1, 3, 5].iter().map(|&c| CharId(c)).collect();
        let upstream: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = ngram_encode_grad(&chars, 3, &upstream);

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for (c, grad) in &analytic {
            for j in 0..d {
                let orig = t.row(c.idx())[j];
                t.row_mut(c.idx())[j] = orig + h;
                let fp = dot(&ngram_encode(&chars, &t, 3), &upstream);
                t.row_mut(c.idx())[j] = orig - h;
                let fm = dot(&ngram_encode(&chars, &t, 3), &upstream);
                t.row_mut(c.idx())[j] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let rel = (grad[j] - numeric).abs() / numeric.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn phi_is_linear_in_the_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a = Matrix::uniform(4, 3, 1.0, &mut rng);
        let b = Matrix::uniform(4, 3, 1.0, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let mut mix = Matrix::zeros(4, 3);
        for i in 0..4 {
            for j in 0..3 {
                mix.row_mut(i)[j] = alpha * a.row(i)[j] + beta * b.row(i)[j];
            }
        }
        let chars: Vec<CharId> = [0u32, 2, 1, 2].iter().map(|&c| CharId(c)).collect();
        let fa = ngram_encode(&chars, &a, 3);
        let fb = ngram_encode(&chars, &b, 3);
        let fm = ngram_encode(&chars, &mix, 3);
        for j in 0..3 {
            assert!((fm[j] - (alpha * fa[j] + beta * fb[j])).abs() < 1e-9);
        }
    }

    #[test]
    fn order_one_is_permutation_invariant_higher_orders_are_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let t = Matrix::uniform(5, 2, 1.0, &mut rng);
        let seq: Vec<CharId> = [0u32, 1, 2].iter().map(|&c| CharId(c)).collect();
        let perm: Vec<CharId> = [2u32, 0, 1].iter().map(|&c| CharId(c)).collect();
        let a1 = ngram_encode(&seq, &t, 1);
        let b1 = ngram_encode(&perm, &t, 1);
        for j in 0..2 {
            assert!((a1[j] - b1[j]).abs() < 1e-12);
        }
        let a2 = ngram_encode(&seq, &t, 2);
        let b2 = ngram_encode(&perm, &t, 2);
        assert!(a2.iter().zip(&b2).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn zero_params_output_projection_bias() {
        let mut p = CnnParams::new(3, 2, 2).unwrap();
        p.proj_bias = vec![0.4, -0.1, 2.0];
        let out = cnn_forward(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &p);
        // tanh(0) = 0 pools to 0, so only the bias survives.
        assert_eq!(out, vec![0.4, -0.1, 2.0]);
    }

    #[test]
    fn single_full_width_filter_by_hand() {
        // d=2, F=1, w=2: one position, out = proj_col * tanh(<W, [rel; val]>)
        let mut p = CnnParams::new(2, 1, 2).unwrap();
        p.filter_weights.row_mut(0).copy_from_slice(&[0.5, -0.25, 1.0, 0.75]);
        p.proj.row_mut(0)[0] = 2.0;
        p.proj.row_mut(1)[0] = -1.0;
        let rel = [0.2, 0.4];
        let val = [-0.6, 0.8];
        let z: f64 = 0.5 * 0.2 - 0.25 * 0.4 + 1.0 * (-0.6) + 0.75 * 0.8;
        let a = z.tanh();
        let out = cnn_forward(&rel, &val, &p);
        assert!((out[0] - 2.0 * a).abs() < 1e-12);
        assert!((out[1] - (-1.0) * a).abs() < 1e-12);
    }

    #[test]
    fn output_dimension_is_always_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for (d, f, w) in [(4, 1, 1), (4, 3, 2), (5, 8, 5)] {
            let mut p = CnnParams::new(d, f, w).unwrap();
            p.randomize(0.5, &mut rng);
            let rel: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let val: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(cnn_forward(&rel, &val, &p).len(), d);
        }
    }

    #[test]
    fn width_larger_than_dim_is_a_config_error() {
        assert!(CnnParams::new(3, 2, 4).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut p = CnnParams::new(3, 2, 2).unwrap();
        p.randomize(0.5, &mut rng);
        let g = cnn_backward(&[0.1, 0.2, 0.3], &[0.3, 0.2, 0.1], &p, &[0.0, 0.0, 0.0]);
        assert!(g.filter_weights.data().iter().all(|v| *v == 0.0));
        assert!(g.proj.data().iter().all(|v| *v == 0.0));
        assert!(g.rel_emb.iter().all(|v| *v == 0.0));
        assert!(g.val_emb.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pool_tie_routes_to_lowest_index() {
        // Symmetric input makes positions 0 and 1 tie exactly.
        let mut p = CnnParams::new(3, 1, 2).unwrap();
        p.filter_weights.row_mut(0).copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        p.proj.row_mut(0)[0] = 1.0;
        let rel = [0.5, 0.5, 0.5];
        let val = [9.0, -9.0, 9.0];
        let g = cnn_backward(&rel, &val, &p, &[1.0, 0.0, 0.0]);
        // Gradient lands on columns 0..2 (position 0), column 2 untouched.
        assert!(g.rel_emb[0] != 0.0 && g.rel_emb[1] != 0.0);
        assert_eq!(g.rel_emb[2], 0.0);
    }

    #[test]
    fn cnn_grads_match_finite_differences() {
        let (d, f, w) = (4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut p = CnnParams::new(d, f, w).unwrap();
        p.randomize(0.7, &mut rng);
        let mut rel: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut val: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let g = cnn_backward(&rel, &val, &p, &upstream);
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        let mut check = |analytic: f64, eval: &mut dyn FnMut(f64) -> f64| {
            let fp = eval(h);
            let fm = eval(-h);
            let numeric = (fp - fm) / (2.0 * h);
            let rel_err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel_err);
        };

        for i in 0..d {
            let gi = g.rel_emb[i];
            check(gi, &mut |eps| {
                rel[i] += eps;
                let out = dot(&cnn_forward(&rel, &val, &p), &upstream);
                rel[i] -= eps;
                out
            });
            let gi = g.val_emb[i];
            check(gi, &mut |eps| {
                val[i] += eps;
                let out = dot(&cnn_forward(&rel, &val, &p), &upstream);
                val[i] -= eps;
                out
            });
        }
        for fi in 0..f {
            for c in 0..2 * w {
                let analytic = g.filter_weights.row(fi)[c];
                check(analytic, &mut |eps| {
                    p.filter_weights.row_mut(fi)[c] += eps;
                    let out = dot(&cnn_forward(&rel, &val, &p), &upstream);
                    p.filter_weights.row_mut(fi)[c] -= eps;
                    out
                });
            }
            let analytic = g.filter_bias[fi];
            check(analytic, &mut |eps| {
                p.filter_bias[fi] += eps;
                let out = dot(&cnn_forward(&rel, &val, &p), &upstream);
                p.filter_bias[fi] -= eps;
                out
            });
        }
        for i in 0..d {
            for fi in 0..f {
                let analytic = g.proj.row(i)[fi];
                check(analytic, &mut |eps| {
                    p.proj.row_mut(i)[fi] += eps;
                    let out = dot(&cnn_forward(&rel, &val, &p), &upstream);
                    p.proj.row_mut(i)[fi] -= eps;
                    out
                });
            }
            let analytic = upstream[i]; // proj_bias grad
            check(analytic, &mut |eps| {
                p.proj_bias[i] += eps;
                let out = dot(&cnn_forward(&rel, &val, &p), &upstream);
                p.proj_bias[i] -= eps;
                out
            });
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn swapping_rows_changes_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let mut p = CnnParams::new(4, 3, 2).unwrap();
        p.randomize(0.8, &mut rng);
        let rel: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let val: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = cnn_forward(&rel, &val, &p);
        let b = cnn_forward(&val, &rel, &p);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
