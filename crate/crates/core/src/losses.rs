//! The seven training losses and their temperature-scheduled fusion.
//!
//! Individual terms: a stable binary cross-entropy on the kinship logit, a
//! part-averaged family-identity cross-entropy, a batch-all triplet loss
//! over person features, positive/negative cross-generation gap terms, a
//! cosine direction loss, and a center loss on the last hidden activation.
//! [`fuse_losses`] combines them with per-term constants; the center term's
//! weight grows geometrically with the epoch counter so the center pull
//! strengthens as training progresses.

use crate::config::RunConfig;
use crate::graph::{AutodiffError, Graph, Var};
use crate::tensor::Tensor;

/// Weights and schedule state consumed by [`fuse_losses`].
///
/// `w_pos`/`w_neg` are the inner weights of the cross-generation pair of
/// terms; `w0..w6` are the per-term fusion constants; `alpha` and `t` drive
/// the geometric center-weight schedule; `margin` is the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub w6: f64,
    pub w_pos: f64,
    pub w_neg: f64,
    pub alpha: f64,
    pub margin: f64,
    pub t: usize,
}

impl FusionConfig {
    /// Extracts the fusion weights from a validated run configuration at
    /// epoch `t`.
    pub fn from_run(cfg: &RunConfig, t: usize) -> Self {
        FusionConfig {
            w0: cfg.w0,
            w1: cfg.w1,
            w2: cfg.w2,
            w3: cfg.w3,
            w4: cfg.w4,
            w5: cfg.w5,
            w6: cfg.w6,
            w_pos: cfg.w_pos,
            w_neg: cfg.w_neg,
            alpha: cfg.alpha,
            margin: cfg.margin,
            t,
        }
    }

    /// The scheduled center weight `w0 * alpha^t` at this config's epoch.
    pub fn center_weight(&self) -> f64 {
        center_weight(self.w0, self.alpha, self.t)
    }

    /// Checks the schedule invariants: a shrinking schedule (`alpha < 1`)
    /// and a negative margin are both rejected.
    pub fn validate(&self) -> Result<(), AutodiffError> {
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(AutodiffError::InvalidArg {
                op: "fuse_losses",
                msg: format!("alpha must be >= 1, got {}", self.alpha),
            });
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(AutodiffError::InvalidArg {
                op: "fuse_losses",
                msg: format!("margin must be finite and >= 0, got {}", self.margin),
            });
        }
        Ok(())
    }
}

/// The scheduled center weight `w0 * alpha^t`.
pub fn center_weight(w0: f64, alpha: f64, t: usize) -> f64 {
    w0 * alpha.powi(t as i32)
}

/// Learnable class centers for the center loss: one row per kinship class
/// (non-kin, kin), `h2` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterParams {
    c: Tensor,
}

impl CenterParams {
    /// Zero-initialized centers of width `h2`.
    pub fn zeros(h2: usize) -> Self {
        CenterParams { c: Tensor::zeros(vec![2, h2]) }
    }

    /// Wraps an existing matrix, insisting on exactly two class rows.
    pub fn from_tensor(c: Tensor) -> Result<Self, AutodiffError> {
        if c.shape().len() != 2 || c.rows() != 2 {
            return Err(AutodiffError::InvalidArg {
                op: "center_params",
                msg: format!("centers must be [2, h2], got {:?}", c.shape()),
            });
        }
        Ok(CenterParams { c })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.c
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.c
    }

    pub fn h2(&self) -> usize {
        self.c.cols()
    }
}

/// Mean stable binary cross-entropy of the kinship logits against `{0,1}`
/// targets.
pub fn kin_bce_loss(g: &mut Graph, logits: Var, y: &[f64]) -> Result<Var, AutodiffError> {
    g.bce_with_logits(logits, y)
}

/// Family-identity loss: softmax cross-entropy at the true family label,
/// averaged over rows within each part and then over the parts.
pub fn family_id_loss(
    g: &mut Graph,
    part_logits: &[Var],
    labels: &[usize],
) -> Result<Var, AutodiffError> {
    if part_logits.is_empty() {
        return Err(AutodiffError::EmptyInput { op: "family_id_loss" });
    }
    let mut per_part = Vec::with_capacity(part_logits.len());
    for &logits in part_logits {
        per_part.push(g.cross_entropy_rows(logits, labels)?);
    }
    g.reduce_mean(&per_part)
}

/// Batch-all triplet loss over `[r, d]` person features with family-id
/// labels; see [`Graph::triplet_batch_all`] for the mining rule.
pub fn triplet_loss(
    g: &mut Graph,
    features: Var,
    family_ids: &[u64],
    margin: f64,
) -> Result<Var, AutodiffError> {
    g.triplet_batch_all(features, family_ids, margin)
}

/// The two raw cross-generation gap terms, before their inner weights:
/// mean squared parent-child distance over kin pairs, and the same over
/// non-kin pairs.
pub fn cross_generation_terms(
    g: &mut Graph,
    f_p: Var,
    f_c: Var,
    y: &[f64],
) -> Result<(Var, Var), AutodiffError> {
    let n = g.shape(f_p).first().copied().unwrap_or(0);
    if n == 0 || y.len() != n {
        return Err(AutodiffError::ShapeMismatch {
            op: "cross_generation",
            lhs: g.shape(f_p).to_vec(),
            rhs: vec![y.len()],
        });
    }
    let diff = g.sub(f_p, f_c)?;
    let sq = g.mul(diff, diff)?;
    let gap = g.row_sum(sq)?;
    let y_mask = g.constant(&Tensor::vector(y.to_vec()));
    let not_y: Vec<f64> = y.iter().map(|&v| 1.0 - v).collect();
    let n_mask = g.constant(&Tensor::vector(not_y));
    let pos = g.mul(gap, y_mask)?;
    let pos = g.sum(pos)?;
    let pos = g.scale(pos, 1.0 / n as f64)?;
    let neg = g.mul(gap, n_mask)?;
    let neg = g.sum(neg)?;
    let neg = g.scale(neg, 1.0 / n as f64)?;
    Ok((pos, neg))
}

/// Weighted cross-generation loss `w_pos * L_pos + w_neg * L_neg`.
///
/// `w_neg` defaults negative in [`RunConfig`]: pulling non-kin pairs
/// together would contradict every other term, so the negative term repels
/// by default and the sign is left to configuration.
pub fn cross_generation_loss(
    g: &mut Graph,
    f_p: Var,
    f_c: Var,
    y: &[f64],
    w_pos: f64,
    w_neg: f64,
) -> Result<Var, AutodiffError> {
    let (pos, neg) = cross_generation_terms(g, f_p, f_c, y)?;
    let pos = g.scale(pos, w_pos)?;
    let neg = g.scale(neg, w_neg)?;
    g.add(pos, neg)
}

/// Direction loss: mean squared gap between the parent/child cosine
/// similarity and the signed label `2y - 1`. Norms are epsilon-guarded, so
/// zero vectors are safe.
pub fn direction_loss(g: &mut Graph, f_p: Var, f_c: Var, y: &[f64]) -> Result<Var, AutodiffError> {
    let n = g.shape(f_p).first().copied().unwrap_or(0);
    if n == 0 || y.len() != n {
        return Err(AutodiffError::ShapeMismatch {
            op: "direction_loss",
            lhs: g.shape(f_p).to_vec(),
            rhs: vec![y.len()],
        });
    }
    let prod = g.mul(f_p, f_c)?;
    let dot = g.row_sum(prod)?;
    let p_sq = g.mul(f_p, f_p)?;
    let p_norm = g.row_sum(p_sq)?;
    let p_norm = g.sqrt(p_norm)?;
    let c_sq = g.mul(f_c, f_c)?;
    let c_norm = g.row_sum(c_sq)?;
    let c_norm = g.sqrt(c_norm)?;
    let denom = g.mul(p_norm, c_norm)?;
    let cos = g.div(dot, denom)?;
    let signed: Vec<f64> = y.iter().map(|&v| 2.0 * v - 1.0).collect();
    let target = g.constant(&Tensor::vector(signed));
    let gap = g.sub(cos, target)?;
    let sq = g.mul(gap, gap)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / n as f64)
}

/// Center loss `0.5 * sum_i ||H_i - C_{y_i}||^2` (a sum, not a mean, so
/// duplicating the batch doubles the loss). `centers` must be a `[2, h2]`
/// tape node and `y_idx` selects each row's class center.
pub fn center_loss(
    g: &mut Graph,
    h: Var,
    y_idx: &[usize],
    centers: Var,
) -> Result<Var, AutodiffError> {
    let h_shape = g.shape(h).to_vec();
    let c_shape = g.shape(centers).to_vec();
    if h_shape.len() != 2 || c_shape.len() != 2 || c_shape[0] != 2 || c_shape[1] != h_shape[1] {
        return Err(AutodiffError::ShapeMismatch {
            op: "center_loss",
            lhs: h_shape,
            rhs: c_shape,
        });
    }
    if y_idx.len() != h_shape[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "center_loss",
            lhs: h_shape,
            rhs: vec![y_idx.len()],
        });
    }
    let picked = g.gather_rows(centers, y_idx)?;
    let diff = g.sub(h, picked)?;
    let ss = g.sum_sq(diff)?;
    g.scale(ss, 0.5)
}

/// The seven scalar terms consumed by [`fuse_losses`]. `cross_pos` and
/// `cross_neg` are the raw halves from [`cross_generation_terms`]; their
/// inner weights are applied during fusion.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub kin_bce: Var,
    pub cross_pos: Var,
    pub cross_neg: Var,
    pub direction: Var,
    pub triplet: Var,
    pub family_id: Var,
    pub center: Var,
}

impl LossTerms {
    fn all(&self) -> [Var; 7] {
        [
            self.kin_bce,
            self.cross_pos,
            self.cross_neg,
            self.direction,
            self.triplet,
            self.family_id,
            self.center,
        ]
    }
}

/// Fuses the seven terms:
/// `w0*alpha^t * center + w1*bce + w2*w_pos*cross_pos + w3*w_neg*cross_neg
///  + w4*direction + w5*triplet + w6*family_id`.
pub fn fuse_losses(g: &mut Graph, terms: &LossTerms, cfg: &FusionConfig) -> Result<Var, AutodiffError> {
    cfg.validate()?;
    for v in terms.all() {
        if !g.shape(v).is_empty() {
            return Err(AutodiffError::NotScalar { op: "fuse_losses", shape: g.shape(v).to_vec() });
        }
    }
    let mut acc = g.scale(terms.center, cfg.center_weight())?;
    let weighted = [
        (terms.kin_bce, cfg.w1),
        (terms.cross_pos, cfg.w2 * cfg.w_pos),
        (terms.cross_neg, cfg.w3 * cfg.w_neg),
        (terms.direction, cfg.w4),
        (terms.triplet, cfg.w5),
        (terms.family_id, cfg.w6),
    ];
    for (term, w) in weighted {
        let scaled = g.scale(term, w)?;
        acc = g.add(acc, scaled)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn scalar_of(g: &Graph, v: Var) -> f64 {
        g.scalar_value(v)
    }

    #[test]
    fn bce_closed_forms() {
        let mut g = Graph::new();
        let zero = g.constant(&Tensor::vector(vec![0.0]));
        let l = kin_bce_loss(&mut g, zero, &[1.0]).unwrap();
        assert!((scalar_of(&g, l) - LN_2).abs() < 1e-15);

        let hot = g.constant(&Tensor::vector(vec![40.0]));
        let l = kin_bce_loss(&mut g, hot, &[1.0]).unwrap();
        assert!(scalar_of(&g, l) < 1e-12);

        let cold = g.constant(&Tensor::vector(vec![-1000.0]));
        let l = kin_bce_loss(&mut g, cold, &[0.0]).unwrap();
        assert!(scalar_of(&g, l).is_finite());
        assert!(scalar_of(&g, l) < 1e-12);

        let extreme = g.constant(&Tensor::vector(vec![1e6, -1e6]));
        let l = kin_bce_loss(&mut g, extreme, &[0.0, 1.0]).unwrap();
        assert!(scalar_of(&g, l).is_finite());
    }

    #[test]
    fn family_id_uniform_logits_hit_ln_k() {
        let mut g = Graph::new();
        let k = 7;
        let logits = g.zeros(vec![3, k]);
        let l = family_id_loss(&mut g, &[logits, logits], &[0, 3, 6]).unwrap();
        assert!((scalar_of(&g, l) - (k as f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn family_id_saturated_correct_logits_vanish() {
        let mut g = Graph::new();
        let mut vals = vec![0.0; 2 * 4];
        vals[1] = 60.0; // row 0 -> class 1
        vals[4 + 2] = 60.0; // row 1 -> class 2
        let logits = g.constant(&Tensor::matrix(2, 4, vals));
        let l = family_id_loss(&mut g, &[logits], &[1, 2]).unwrap();
        assert!(scalar_of(&g, l) < 1e-12);
    }

    #[test]
    fn identical_parts_match_single_part_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let logits = g.constant(&Tensor::uniform(4, 5, 2.0, &mut rng));
        let labels = [0, 4, 2, 2];
        let one = family_id_loss(&mut g, &[logits], &labels).unwrap();
        let two = family_id_loss(&mut g, &[logits, logits], &labels).unwrap();
        assert_eq!(scalar_of(&g, one), scalar_of(&g, two));
    }

    #[test]
    fn triplet_fixture_values() {
        let mut g = Graph::new();
        let feats = g.constant(&Tensor::matrix(3, 1, vec![0.0, 2.0, 1.0]));
        let l = triplet_loss(&mut g, feats, &[1, 1, 2], 0.0).unwrap();
        assert_eq!(scalar_of(&g, l), 3.0);

        let feats = g.constant(&Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]));
        let l = triplet_loss(&mut g, feats, &[1, 1, 2], 0.0).unwrap();
        assert_eq!(scalar_of(&g, l), 0.0);

        let l = triplet_loss(&mut g, feats, &[1, 1, 1], 0.0).unwrap();
        assert_eq!(scalar_of(&g, l), 0.0, "no valid triples yields zero");
    }

    #[test]
    fn triplet_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = Tensor::uniform(6, 3, 1.0, &mut rng);
        let shifted = Tensor::matrix(
            6,
            3,
            base.values().iter().enumerate().map(|(i, &v)| v + [10.0, -4.0, 2.5][i % 3]).collect(),
        );
        let labels = [1u64, 1, 2, 2, 3, 3];
        let mut g = Graph::new();
        let a = g.constant(&base);
        let b = g.constant(&shifted);
        let la = triplet_loss(&mut g, a, &labels, 0.5).unwrap();
        let lb = triplet_loss(&mut g, b, &labels, 0.5).unwrap();
        assert!((scalar_of(&g, la) - scalar_of(&g, lb)).abs() < 1e-9);
    }

    #[test]
    fn cross_generation_fixtures() {
        let mut g = Graph::new();
        let f_p = g.constant(&Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let f_c = g.constant(&Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let l = cross_generation_loss(&mut g, f_p, f_c, &[1.0], 1.0, -1.0).unwrap();
        assert_eq!(scalar_of(&g, l), 1.0);

        // Identical kin features: zero gap.
        let same = cross_generation_loss(&mut g, f_p, f_p, &[1.0], 1.0, -1.0).unwrap();
        assert_eq!(scalar_of(&g, same), 0.0);

        // A non-kin pair reaches the loss only through the negative weight.
        let neg = cross_generation_loss(&mut g, f_p, f_c, &[0.0], 1.0, -1.0).unwrap();
        assert_eq!(scalar_of(&g, neg), -1.0);
        let neg_off = cross_generation_loss(&mut g, f_p, f_c, &[0.0], 1.0, 0.0).unwrap();
        assert_eq!(scalar_of(&g, neg_off), 0.0);
    }

    #[test]
    fn cross_generation_raw_terms_are_nonnegative_means() {
        let mut g = Graph::new();
        let f_p = g.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 4.0]));
        let f_c = g.constant(&Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 2.0]));
        let (pos, neg) = cross_generation_terms(&mut g, f_p, f_c, &[1.0, 0.0]).unwrap();
        assert_eq!(scalar_of(&g, pos), 0.5, "kin gap 1 averaged over batch of 2");
        assert_eq!(scalar_of(&g, neg), 2.0, "non-kin gap 4 averaged over batch of 2");
    }

    #[test]
    fn direction_fixture_values() {
        let mut g = Graph::new();
        let f_p = g.constant(&Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let f_c = g.constant(&Tensor::matrix(1, 2, vec![2.0, 4.0]));
        let l = direction_loss(&mut g, f_p, f_c, &[1.0]).unwrap();
        assert!(scalar_of(&g, l) < 1e-20, "colinear kin pair: {}", scalar_of(&g, l));

        let ortho = g.constant(&Tensor::matrix(1, 2, vec![-2.0, 1.0]));
        let l = direction_loss(&mut g, f_p, ortho, &[1.0]).unwrap();
        assert_eq!(scalar_of(&g, l), 1.0);

        let anti = g.constant(&Tensor::matrix(1, 2, vec![-1.0, -2.0]));
        let l = direction_loss(&mut g, f_p, anti, &[0.0]).unwrap();
        assert!(scalar_of(&g, l) < 1e-20);
    }

    #[test]
    fn direction_is_scale_invariant_per_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = Tensor::uniform(4, 3, 1.0, &mut rng);
        let c = Tensor::uniform(4, 3, 1.0, &mut rng);
        let scale = |t: &Tensor, s: f64| {
            Tensor::matrix(4, 3, t.values().iter().map(|&v| v * s).collect())
        };
        let y = [1.0, 0.0, 1.0, 0.0];
        let mut g = Graph::new();
        let (a, b) = (g.constant(&p), g.constant(&c));
        let base = direction_loss(&mut g, a, b, &y).unwrap();
        let (a3, b7) = (g.constant(&scale(&p, 3.0)), g.constant(&scale(&c, 7.0)));
        let scaled = direction_loss(&mut g, a3, b7, &y).unwrap();
        assert!((scalar_of(&g, base) - scalar_of(&g, scaled)).abs() < 1e-9);
    }

    #[test]
    fn center_loss_fixtures() {
        let mut g = Graph::new();
        let h = g.constant(&Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let centers = g.zeros(vec![2, 2]);
        let l = center_loss(&mut g, h, &[1], centers).unwrap();
        assert_eq!(scalar_of(&g, l), 0.5);

        // A sample sitting on its center contributes nothing.
        let c_vals = g.constant(&Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]));
        let l = center_loss(&mut g, h, &[1], c_vals).unwrap();
        assert_eq!(scalar_of(&g, l), 0.0);

        // Sum semantics: a duplicated batch doubles the loss.
        let h2 = g.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]));
        let l2 = center_loss(&mut g, h2, &[1, 1], centers).unwrap();
        assert_eq!(scalar_of(&g, l2), 1.0);

        let bad = g.zeros(vec![3, 2]);
        assert!(center_loss(&mut g, h, &[1], bad).is_err(), "three center rows rejected");
    }

    fn dummy_terms(g: &mut Graph, v: f64) -> LossTerms {
        LossTerms {
            kin_bce: g.scalar(v),
            cross_pos: g.scalar(2.0 * v),
            cross_neg: g.scalar(3.0 * v),
            direction: g.scalar(4.0 * v),
            triplet: g.scalar(5.0 * v),
            family_id: g.scalar(6.0 * v),
            center: g.scalar(7.0 * v),
        }
    }

    #[test]
    fn fusion_weights_and_schedule() {
        let cfg = FusionConfig {
            w0: 0.01,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w5: 1.0,
            w6: 1.0,
            w_pos: 1.0,
            w_neg: -1.0,
            alpha: 1.05,
            margin: 0.0,
            t: 0,
        };
        assert_eq!(cfg.center_weight(), 0.01, "no scaling at the first epoch");
        let at14 = FusionConfig { t: 14, ..cfg };
        assert!((at14.center_weight() - 0.019799315994393975).abs() < 1e-15);

        let mut g = Graph::new();
        let terms = dummy_terms(&mut g, 1.0);
        let fused = fuse_losses(&mut g, &terms, &cfg).unwrap();
        // 0.01*7 + 1 + 2 - 3 + 4 + 5 + 6 = 15.07
        assert!((scalar_of(&g, fused) - 15.07).abs() < 1e-12);

        let ablated = FusionConfig { w0: 0.0, ..cfg };
        let fused = fuse_losses(&mut g, &terms, &ablated).unwrap();
        assert!((scalar_of(&g, fused) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn center_weight_strictly_increases_when_alpha_above_one() {
        let mut prev = center_weight(0.01, 1.05, 0);
        for t in 1..=70 {
            let next = center_weight(0.01, 1.05, t);
            assert!(next > prev, "schedule must grow at t={t}");
            prev = next;
        }
    }

    #[test]
    fn fusion_rejects_bad_schedule_parameters() {
        let mut g = Graph::new();
        let terms = dummy_terms(&mut g, 1.0);
        let bad_alpha = FusionConfig {
            w0: 0.01,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w5: 1.0,
            w6: 1.0,
            w_pos: 1.0,
            w_neg: -1.0,
            alpha: 0.9,
            margin: 0.0,
            t: 0,
        };
        assert!(fuse_losses(&mut g, &terms, &bad_alpha).is_err());
        let bad_margin = FusionConfig { alpha: 1.0, margin: -0.5, ..bad_alpha };
        assert!(fuse_losses(&mut g, &terms, &bad_margin).is_err());
    }

    #[test]
    fn every_loss_passes_gradcheck_on_random_batches() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3 + (seed as usize % 3);
            let d = 2 + (seed as usize % 7); // d <= 8
            let y: Vec<f64> = (0..n).map(|i| f64::from(i as u32 % 2)).collect();
            let y_idx: Vec<usize> = y.iter().map(|&v| v as usize).collect();
            let fams: Vec<u64> = (0..n as u64).map(|i| i % 3).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();

            let logits = Tensor::uniform_vector(n, 2.0, &mut rng);
            let r = gradient_check(
                |g, v| kin_bce_loss(g, v[0], &y),
                std::slice::from_ref(&logits),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "bce seed {seed}: {}", r.max_rel_err);

            let part_a = Tensor::uniform(n, 4, 1.0, &mut rng);
            let part_b = Tensor::uniform(n, 4, 1.0, &mut rng);
            let r = gradient_check(
                |g, v| family_id_loss(g, &[v[0], v[1]], &labels),
                &[part_a, part_b],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "family seed {seed}: {}", r.max_rel_err);

            let feats = Tensor::uniform(n, d, 1.0, &mut rng);
            let r = gradient_check(
                |g, v| triplet_loss(g, v[0], &fams, 0.3),
                std::slice::from_ref(&feats),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "triplet seed {seed}: {}", r.max_rel_err);

            let f_p = Tensor::uniform(n, d, 1.0, &mut rng);
            let f_c = Tensor::uniform(n, d, 1.0, &mut rng);
            let r = gradient_check(
                |g, v| cross_generation_loss(g, v[0], v[1], &y, 1.0, -1.0),
                &[f_p.clone(), f_c.clone()],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "cross seed {seed}: {}", r.max_rel_err);

            let r = gradient_check(
                |g, v| direction_loss(g, v[0], v[1], &y),
                &[f_p, f_c],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "direction seed {seed}: {}", r.max_rel_err);

            let h = Tensor::uniform(n, d, 1.0, &mut rng);
            let centers = Tensor::uniform(2, d, 1.0, &mut rng);
            let r = gradient_check(
                |g, v| center_loss(g, v[0], &y_idx, v[1]),
                &[h, centers],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "center seed {seed}: {}", r.max_rel_err);
        }
    }

    proptest! {
        #[test]
        fn bce_is_finite_and_nonnegative(
            logits in proptest::collection::vec(-1e6f64..1e6, 1..6),
            bits in proptest::collection::vec(proptest::bool::ANY, 6),
        ) {
            let y: Vec<f64> = bits.iter().take(logits.len()).map(|&b| f64::from(u8::from(b))).collect();
            let mut g = Graph::new();
            let l = g.constant(&Tensor::vector(logits));
            let loss = kin_bce_loss(&mut g, l, &y).unwrap();
            let v = g.scalar_value(loss);
            prop_assert!(v.is_finite());
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn unweighted_losses_are_nonnegative(
            vals in proptest::collection::vec(-3.0f64..3.0, 24),
            bits in proptest::collection::vec(proptest::bool::ANY, 4),
        ) {
            let y: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
            let y_idx: Vec<usize> = y.iter().map(|&v| v as usize).collect();
            let mut g = Graph::new();
            let f_p = g.constant(&Tensor::matrix(4, 3, vals[0..12].to_vec()));
            let f_c = g.constant(&Tensor::matrix(4, 3, vals[12..24].to_vec()));
            let (pos, neg) = cross_generation_terms(&mut g, f_p, f_c, &y).unwrap();
            prop_assert!(g.scalar_value(pos) >= 0.0);
            prop_assert!(g.scalar_value(neg) >= 0.0);
            let dir = direction_loss(&mut g, f_p, f_c, &y).unwrap();
            prop_assert!(g.scalar_value(dir) >= 0.0);
            let trip = triplet_loss(&mut g, f_p, &[1, 1, 2, 2], 0.25).unwrap();
            prop_assert!(g.scalar_value(trip) >= 0.0);
            let centers = g.zeros(vec![2, 3]);
            let cent = center_loss(&mut g, f_p, &y_idx, centers).unwrap();
            prop_assert!(g.scalar_value(cent) >= 0.0);
        }
    }
}
