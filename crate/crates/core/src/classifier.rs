//! Feature combination and the two prediction heads.
//!
//! The combined pair feature stacks four interactions of the person
//! features, in fixed block order: squared difference, sum, product, and
//! difference of squares. The first three are symmetric under a parent/child
//! swap and the fourth flips sign, so the kinship score sees both symmetric
//! and directional evidence. The kinship head is three linear layers with
//! ReLU between them, down to a single logit; its last hidden activation `H`
//! doubles as the center-loss feature. The family-identity head predicts the
//! family label from each contiguous part of a person feature, one
//! independent linear map per part.

use crate::graph::{AutodiffError, Graph, Var};

/// Classifier weights bound to a tape: the three kinship layers plus one
/// `(weights, bias)` pair per family-head part.
#[derive(Clone, Debug)]
pub struct BoundClassifierParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub family: Vec<(Var, Var)>,
}

/// Stacks the four interaction blocks of a pair of `[n, d]` person
/// features into `[n, 4d]`: `(F_p-F_c)^2 | F_p+F_c | F_p*F_c | F_p^2-F_c^2`.
pub fn combine_features(g: &mut Graph, f_p: Var, f_c: Var) -> Result<Var, AutodiffError> {
    if g.shape(f_p) != g.shape(f_c) {
        return Err(AutodiffError::ShapeMismatch {
            op: "combine_features",
            lhs: g.shape(f_p).to_vec(),
            rhs: g.shape(f_c).to_vec(),
        });
    }
    let diff = g.sub(f_p, f_c)?;
    let sq_diff = g.mul(diff, diff)?;
    let sum = g.add(f_p, f_c)?;
    let prod = g.mul(f_p, f_c)?;
    let p_sq = g.mul(f_p, f_p)?;
    let c_sq = g.mul(f_c, f_c)?;
    let diff_sq = g.sub(p_sq, c_sq)?;
    g.concat(&[sq_diff, sum, prod, diff_sq], 1)
}

/// Three-layer kinship scorer over the combined feature.
///
/// Returns the `[n, 1]` logits and the `[n, h2]` last hidden activation `H`
/// consumed by the center loss.
pub fn kinship_head(
    g: &mut Graph,
    combined: Var,
    params: &BoundClassifierParams,
) -> Result<(Var, Var), AutodiffError> {
    let z1 = g.matmul(combined, params.w1)?;
    let z1 = g.add_bias(z1, params.b1)?;
    let a1 = g.relu(z1)?;
    let z2 = g.matmul(a1, params.w2)?;
    let z2 = g.add_bias(z2, params.b2)?;
    let h = g.relu(z2)?;
    let logit = g.matmul(h, params.w3)?;
    let logit = g.add_bias(logit, params.b3)?;
    Ok((logit, h))
}

/// Part-based family-identity logits.
///
/// Splits `[r, d]` person features into `parts` equal contiguous column
/// blocks and applies that part's own linear map, yielding one `[r,
/// n_families]` logit matrix per part.
pub fn family_id_head(
    g: &mut Graph,
    features: Var,
    params: &BoundClassifierParams,
    parts: usize,
) -> Result<Vec<Var>, AutodiffError> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "family_id_head",
            lhs: shape,
            rhs: vec![0, 0],
        });
    }
    let d = shape[1];
    if parts == 0 || !d.is_multiple_of(parts) {
        return Err(AutodiffError::InvalidArg {
            op: "family_id_head",
            msg: format!("feature width {d} is not divisible into {parts} parts"),
        });
    }
    if params.family.len() != parts {
        return Err(AutodiffError::InvalidArg {
            op: "family_id_head",
            msg: format!("{} per-part maps for {parts} parts", params.family.len()),
        });
    }
    let width = d / parts;
    let mut logits = Vec::with_capacity(parts);
    for (m, &(w, b)) in params.family.iter().enumerate() {
        let part = g.slice(features, 1, m * width, width)?;
        let z = g.matmul(part, w)?;
        let z = g.add_bias(z, b)?;
        logits.push(z);
    }
    Ok(logits)
}
