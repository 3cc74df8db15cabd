//! The forest core: residual gated graph-convolution layers on nine paired
//! two-node graphs, plus the layer-wise mean readout.
//!
//! Each paired graph links one facial component of the parent with the same
//! component of the child. A layer updates both node states and both
//! directed edge states:
//!
//! ```text
//! pre_p  = e_p C + h_p D + h_c E          (edge pre-activation)
//! gate_p = sigmoid(pre_p) / (sigmoid(pre_p) + sigmoid(pre_c))
//! h_p'   = h_p + relu(h_p A + gate_p * (h_c B))   (residual node update)
//! e_p'   = e_p + relu(h_p)                         (edge carry)
//! ```
//!
//! with the child's formulas mirrored. The two gates share one denominator
//! node on the tape, so they partition to 1 and swapping the parent/child
//! inputs swaps every downstream state bit-for-bit (IEEE addition is
//! commutative).
//!
//! All state is batched: a "vector" here is an `[n, d_h]` matrix holding one
//! row per pair in the batch.

use crate::graph::{AutodiffError, Graph, Var};

/// Number of paired graphs in the forest (one per patch kind).
pub const FOREST_SIZE: usize = 9;

/// One layer's five weight matrices, already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayerParams {
    /// Self term of the node update.
    pub a: Var,
    /// Neighbor term of the node update (gated).
    pub b: Var,
    /// Edge-state term of the edge pre-activation.
    pub c: Var,
    /// Own-node term of the edge pre-activation.
    pub d: Var,
    /// Neighbor-node term of the edge pre-activation.
    pub e: Var,
}

/// Node and edge states entering or leaving one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub h_p: Var,
    pub h_c: Var,
    pub e_p: Var,
    pub e_c: Var,
}

/// Per-graph trace: `layers[0]` is the input state, `layers[l]` the state
/// after layer `l`.
#[derive(Clone, Debug)]
pub struct GraphTrace {
    pub layers: Vec<LayerState>,
}

/// Traces for all nine graphs, in patch-kind order.
#[derive(Clone, Debug)]
pub struct ForestState {
    pub graphs: Vec<GraphTrace>,
}

impl ForestState {
    /// Number of gated layers that were run.
    pub fn depth(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.layers.len().saturating_sub(1))
    }
}

/// Edge gate: `sigmoid(e_own) / (sigmoid(e_own) + sigmoid(e_other))`,
/// elementwise, with the division's epsilon guard keeping it finite.
pub fn gate(g: &mut Graph, e_own: Var, e_other: Var) -> Result<Var, AutodiffError> {
    let s_own = g.sigmoid(e_own)?;
    let s_other = g.sigmoid(e_other)?;
    let denom = g.add(s_own, s_other)?;
    g.div(s_own, denom)
}

/// One residual gated graph-convolution layer on a paired graph.
pub fn gated_layer_forward(
    g: &mut Graph,
    state: &LayerState,
    params: &BoundLayerParams,
) -> Result<LayerState, AutodiffError> {
    // Edge pre-activations; the parent and child paths run the same ops in
    // the same order so swapped inputs produce bitwise-swapped outputs.
    let ep_c = g.matmul(state.e_p, params.c)?;
    let hp_d = g.matmul(state.h_p, params.d)?;
    let hc_e = g.matmul(state.h_c, params.e)?;
    let pre_p = {
        let t = g.add(ep_c, hp_d)?;
        g.add(t, hc_e)?
    };

    let ec_c = g.matmul(state.e_c, params.c)?;
    let hc_d = g.matmul(state.h_c, params.d)?;
    let hp_e = g.matmul(state.h_p, params.e)?;
    let pre_c = {
        let t = g.add(ec_c, hc_d)?;
        g.add(t, hp_e)?
    };

    // Both gates share one denominator node: they partition to 1 by
    // construction.
    let sig_p = g.sigmoid(pre_p)?;
    let sig_c = g.sigmoid(pre_c)?;
    let denom = g.add(sig_p, sig_c)?;
    let gate_p = g.div(sig_p, denom)?;
    let gate_c = g.div(sig_c, denom)?;

    // Residual node updates.
    let hp_a = g.matmul(state.h_p, params.a)?;
    let hc_b = g.matmul(state.h_c, params.b)?;
    let mix_p = g.mul(gate_p, hc_b)?;
    let sum_p = g.add(hp_a, mix_p)?;
    let act_p = g.relu(sum_p)?;
    let h_p = g.add(state.h_p, act_p)?;

    let hc_a = g.matmul(state.h_c, params.a)?;
    let hp_b = g.matmul(state.h_p, params.b)?;
    let mix_c = g.mul(gate_c, hp_b)?;
    let sum_c = g.add(hc_a, mix_c)?;
    let act_c = g.relu(sum_c)?;
    let h_c = g.add(state.h_c, act_c)?;

    // Edge carries.
    let relu_hp = g.relu(state.h_p)?;
    let e_p = g.add(state.e_p, relu_hp)?;
    let relu_hc = g.relu(state.h_c)?;
    let e_c = g.add(state.e_c, relu_hc)?;

    Ok(LayerState { h_p, h_c, e_p, e_c })
}

/// Runs `L` gated layers on each of the nine paired graphs independently.
///
/// `inputs[g]` holds the `[n, d_h]` initial node states `(h0_p, h0_c)` of
/// graph `g` (the input projection, if any, has already been applied);
/// `params[g]` holds that graph's per-layer weights. Both initial edge
/// states start at zero, which keeps the first-layer gate at an unbiased
/// 0.5 and makes the parent/child roles symmetric.
pub fn forest_forward(
    g: &mut Graph,
    inputs: &[(Var, Var)],
    params: &[Vec<BoundLayerParams>],
) -> Result<ForestState, AutodiffError> {
    if inputs.len() != FOREST_SIZE || params.len() != FOREST_SIZE {
        return Err(AutodiffError::InvalidArg {
            op: "forest_forward",
            msg: format!(
                "expected {FOREST_SIZE} paired graphs, got {} inputs and {} parameter sets",
                inputs.len(),
                params.len()
            ),
        });
    }
    let depth = params[0].len();
    if depth == 0 || params.iter().any(|p| p.len() != depth) {
        return Err(AutodiffError::InvalidArg {
            op: "forest_forward",
            msg: "every graph needs the same positive number of layers".into(),
        });
    }

    let mut graphs = Vec::with_capacity(FOREST_SIZE);
    for (gi, &(h0_p, h0_c)) in inputs.iter().enumerate() {
        let shape = g.shape(h0_p).to_vec();
        let e0 = g.zeros(shape);
        let mut layers = Vec::with_capacity(depth + 1);
        layers.push(LayerState { h_p: h0_p, h_c: h0_c, e_p: e0, e_c: e0 });
        for layer in &params[gi] {
            let next = gated_layer_forward(g, layers.last().expect("state present"), layer)?;
            layers.push(next);
        }
        graphs.push(GraphTrace { layers });
    }
    Ok(ForestState { graphs })
}

/// Layer-wise mean readout: per layer, the mean of the nine parent node
/// states (and of the nine child states), concatenated over layers into
/// `[n, L*d_h]` features `(F_p, F_c)`.
pub fn readout(g: &mut Graph, state: &ForestState) -> Result<(Var, Var), AutodiffError> {
    let depth = state.depth();
    if depth == 0 {
        return Err(AutodiffError::InvalidArg {
            op: "readout",
            msg: "forest state holds no layer outputs".into(),
        });
    }
    let mut per_layer_p = Vec::with_capacity(depth);
    let mut per_layer_c = Vec::with_capacity(depth);
    for l in 1..=depth {
        let hp: Vec<Var> = state.graphs.iter().map(|t| t.layers[l].h_p).collect();
        let hc: Vec<Var> = state.graphs.iter().map(|t| t.layers[l].h_c).collect();
        per_layer_p.push(g.reduce_mean(&hp)?);
        per_layer_c.push(g.reduce_mean(&hc)?);
    }
    let f_p = g.concat(&per_layer_p, 1)?;
    let f_c = g.concat(&per_layer_c, 1)?;
    Ok((f_p, f_c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind_layer(g: &mut Graph, dh: usize, fill: [f64; 5]) -> BoundLayerParams {
        let m = |v: f64| {
            let mut t = Tensor::zeros(vec![dh, dh]);
            for i in 0..dh {
                t.values_mut()[i * dh + i] = v;
            }
            t
        };
        BoundLayerParams {
            a: g.leaf(&m(fill[0]), true),
            b: g.leaf(&m(fill[1]), true),
            c: g.leaf(&m(fill[2]), true),
            d: g.leaf(&m(fill[3]), true),
            e: g.leaf(&m(fill[4]), true),
        }
    }

    fn random_layer(g: &mut Graph, dh: usize, rng: &mut ChaCha8Rng) -> BoundLayerParams {
        let bound = 1.0 / (dh as f64).sqrt();
        BoundLayerParams {
            a: g.leaf(&Tensor::uniform(dh, dh, bound, rng), true),
            b: g.leaf(&Tensor::uniform(dh, dh, bound, rng), true),
            c: g.leaf(&Tensor::uniform(dh, dh, bound, rng), true),
            d: g.leaf(&Tensor::uniform(dh, dh, bound, rng), true),
            e: g.leaf(&Tensor::uniform(dh, dh, bound, rng), true),
        }
    }

    #[test]
    fn gate_is_half_for_equal_edges() {
        let mut g = Graph::new();
        let e = g.constant(&Tensor::vector(vec![0.3, -4.0, 2.0]));
        let gate = gate(&mut g, e, e).unwrap();
        for &v in g.values(gate) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_ln3_against_zero_is_point_six() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::vector(vec![3.0f64.ln()]));
        let b = g.constant(&Tensor::vector(vec![0.0]));
        let gate = gate(&mut g, a, b).unwrap();
        assert!((g.values(gate)[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn gate_partitions_to_one_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = Graph::new();
        for _ in 0..100 {
            let a = g.constant(&Tensor::uniform(1, 6, 8.0, &mut rng));
            let b = g.constant(&Tensor::uniform(1, 6, 8.0, &mut rng));
            let gab = gate(&mut g, a, b).unwrap();
            let gba = gate(&mut g, b, a).unwrap();
            for (x, y) in g.values(gab).iter().zip(g.values(gba)) {
                assert!((x + y - 1.0).abs() <= 1e-10, "partition violated: {x} + {y}");
            }
        }
    }

    #[test]
    fn scalar_toy_layer_matches_hand_evaluation() {
        // d_h = 1, h_p = 1, h_c = 2, every weight = 1, edges start at 0.
        // Pre-activations are 3 on both sides, gates 0.5, so
        // h_p' = 1 + relu(1 + 0.5*2) = 3 and h_c' = 2 + relu(2 + 0.5*1) = 4.5;
        // edge carries are relu of the old node states.
        let mut g = Graph::new();
        let h_p = g.constant(&Tensor::matrix(1, 1, vec![1.0]));
        let h_c = g.constant(&Tensor::matrix(1, 1, vec![2.0]));
        let zero = g.zeros(vec![1, 1]);
        let params = bind_layer(&mut g, 1, [1.0; 5]);
        let state = LayerState { h_p, h_c, e_p: zero, e_c: zero };
        let out = gated_layer_forward(&mut g, &state, &params).unwrap();
        assert!((g.values(out.h_p)[0] - 3.0).abs() < 1e-15);
        assert!((g.values(out.h_c)[0] - 4.5).abs() < 1e-15);
        assert_eq!(g.values(out.e_p), &[1.0]);
        assert_eq!(g.values(out.e_c), &[2.0]);
    }

    #[test]
    fn zero_node_weights_leave_states_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let h_p = g.constant(&Tensor::uniform(3, 4, 2.0, &mut rng));
        let h_c = g.constant(&Tensor::uniform(3, 4, 2.0, &mut rng));
        let e_p = g.constant(&Tensor::uniform(3, 4, 2.0, &mut rng));
        let e_c = g.constant(&Tensor::uniform(3, 4, 2.0, &mut rng));
        // A = B = 0; C, D, E arbitrary.
        let mut params = random_layer(&mut g, 4, &mut rng);
        params.a = g.zeros(vec![4, 4]);
        params.b = g.zeros(vec![4, 4]);
        let out = gated_layer_forward(&mut g, &LayerState { h_p, h_c, e_p, e_c }, &params).unwrap();
        assert_eq!(g.values(out.h_p), g.values(h_p), "identity must be exact");
        assert_eq!(g.values(out.h_c), g.values(h_c));
    }

    #[test]
    fn zero_edge_weights_center_both_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let h_p = g.constant(&Tensor::uniform(2, 3, 2.0, &mut rng));
        let h_c = g.constant(&Tensor::uniform(2, 3, 2.0, &mut rng));
        let e_p = g.constant(&Tensor::uniform(2, 3, 2.0, &mut rng));
        let e_c = g.constant(&Tensor::uniform(2, 3, 2.0, &mut rng));
        let zero_w = g.zeros(vec![3, 3]);
        // With C = D = E = 0 both pre-activations are 0, so both sigmoids
        // are 0.5 and the gated neighbor term is exactly half of h B.
        let params = BoundLayerParams {
            a: g.zeros(vec![3, 3]),
            b: g.leaf(&Tensor::uniform(3, 3, 1.0, &mut rng), true),
            c: zero_w,
            d: zero_w,
            e: zero_w,
        };
        let out = gated_layer_forward(&mut g, &LayerState { h_p, h_c, e_p, e_c }, &params).unwrap();
        let hc_b = g.matmul(h_c, params.b).unwrap();
        let out_vals = g.values(out.h_p).to_vec();
        for (i, &v) in out_vals.iter().enumerate() {
            let expect = g.values(h_p)[i] + (0.5 * g.values(hc_b)[i]).max(0.0);
            assert!((v - expect).abs() < 1e-9, "row {i}: {v} vs {expect}");
        }
    }

    fn forest_fixture(
        g: &mut Graph,
        n: usize,
        dh: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<(Var, Var)>, Vec<Vec<BoundLayerParams>>) {
        let inputs: Vec<(Var, Var)> = (0..FOREST_SIZE)
            .map(|_| {
                let p = g.constant(&Tensor::uniform(n, dh, 1.5, rng));
                let c = g.constant(&Tensor::uniform(n, dh, 1.5, rng));
                (p, c)
            })
            .collect();
        let params: Vec<Vec<BoundLayerParams>> = (0..FOREST_SIZE)
            .map(|_| (0..depth).map(|_| random_layer(g, dh, rng)).collect())
            .collect();
        (inputs, params)
    }

    #[test]
    fn forest_rejects_wrong_graph_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let (inputs, params) = forest_fixture(&mut g, 1, 2, 1, &mut rng);
        let err = forest_forward(&mut g, &inputs[..8], &params).unwrap_err();
        assert!(err.to_string().contains("9 paired graphs"), "{err}");
    }

    #[test]
    fn symmetric_inputs_keep_roles_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let inputs: Vec<(Var, Var)> = (0..FOREST_SIZE)
            .map(|_| {
                let x = g.constant(&Tensor::uniform(2, 3, 1.0, &mut rng));
                (x, x)
            })
            .collect();
        let params: Vec<Vec<BoundLayerParams>> =
            (0..FOREST_SIZE).map(|_| (0..2).map(|_| random_layer(&mut g, 3, &mut rng)).collect()).collect();
        let state = forest_forward(&mut g, &inputs, &params).unwrap();
        for trace in &state.graphs {
            for layer in &trace.layers {
                assert_eq!(g.values(layer.h_p), g.values(layer.h_c));
            }
        }
    }

    #[test]
    fn swapping_roles_swaps_readout_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let (inputs, params) = forest_fixture(&mut g, 3, 4, 3, &mut rng);
        let state = forest_forward(&mut g, &inputs, &params).unwrap();
        let (f_p, f_c) = readout(&mut g, &state).unwrap();

        let swapped: Vec<(Var, Var)> = inputs.iter().map(|&(p, c)| (c, p)).collect();
        let state_sw = forest_forward(&mut g, &swapped, &params).unwrap();
        let (f_p_sw, f_c_sw) = readout(&mut g, &state_sw).unwrap();

        assert_eq!(g.values(f_p_sw), g.values(f_c), "swap must be exact");
        assert_eq!(g.values(f_c_sw), g.values(f_p), "swap must be exact");
    }

    #[test]
    fn readout_means_scalar_graphs() {
        // Nine scalar graphs holding 1..9 after one layer: the layer mean is
        // 5 for parents; children hold 2..18 with mean 10.
        let mut g = Graph::new();
        let mut graphs = Vec::new();
        for i in 1..=9 {
            let h0 = g.zeros(vec![1, 1]);
            let e0 = g.zeros(vec![1, 1]);
            let h_p = g.constant(&Tensor::matrix(1, 1, vec![i as f64]));
            let h_c = g.constant(&Tensor::matrix(1, 1, vec![2.0 * i as f64]));
            graphs.push(GraphTrace {
                layers: vec![
                    LayerState { h_p: h0, h_c: h0, e_p: e0, e_c: e0 },
                    LayerState { h_p, h_c, e_p: e0, e_c: e0 },
                ],
            });
        }
        let state = ForestState { graphs };
        let (f_p, f_c) = readout(&mut g, &state).unwrap();
        assert_eq!(g.shape(f_p), &[1, 1]);
        assert!((g.values(f_p)[0] - 5.0).abs() < 1e-15);
        assert!((g.values(f_c)[0] - 10.0).abs() < 1e-15);
    }

    #[test]
    fn readout_concatenates_layers_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut g = Graph::new();
        let (inputs, params) = forest_fixture(&mut g, 2, 3, 4, &mut rng);
        let state = forest_forward(&mut g, &inputs, &params).unwrap();
        let (f_p, _) = readout(&mut g, &state).unwrap();
        assert_eq!(g.shape(f_p), &[2, 12], "L=4 layers of d_h=3");

        // Block l of the concatenation is the mean of layer l+1's states.
        let block = g.slice(f_p, 1, 3, 3).unwrap();
        let hp: Vec<Var> = state.graphs.iter().map(|t| t.layers[2].h_p).collect();
        let mean = g.reduce_mean(&hp).unwrap();
        assert_eq!(g.values(block), g.values(mean));
    }

    #[test]
    fn layer_gradients_pass_finite_difference_check() {
        // End-to-end gradient through two stacked layers on two separate
        // paired graphs, checking all ten weight matrices.
        use crate::gradcheck::gradient_check;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 3;
        let bound = 1.0 / (d as f64).sqrt();
        let params: Vec<Tensor> = (0..10).map(|_| Tensor::uniform(d, d, bound, &mut rng)).collect();
        let h_p = Tensor::uniform(2, d, 1.0, &mut rng);
        let h_c = Tensor::uniform(2, d, 1.0, &mut rng);

        let report = gradient_check(
            |g, vars| {
                let mut outputs = Vec::new();
                for graph_i in 0..2 {
                    let base = graph_i * 5;
                    let layer1 = BoundLayerParams {
                        a: vars[base],
                        b: vars[base + 1],
                        c: vars[base + 2],
                        d: vars[base + 3],
                        e: vars[base + 4],
                    };
                    // Reuse the same five matrices for the second layer; the
                    // tape accumulates both contributions.
                    let layer2 = layer1;
                    let hp0 = g.constant(&h_p);
                    let hc0 = g.constant(&h_c);
                    let e0 = g.zeros(vec![2, d]);
                    let s0 = LayerState { h_p: hp0, h_c: hc0, e_p: e0, e_c: e0 };
                    let s1 = gated_layer_forward(g, &s0, &layer1)?;
                    let s2 = gated_layer_forward(g, &s1, &layer2)?;
                    outputs.push(s2);
                }
                let hp: Vec<Var> = outputs.iter().map(|s| s.h_p).collect();
                let hc: Vec<Var> = outputs.iter().map(|s| s.h_c).collect();
                let mp = g.reduce_mean(&hp)?;
                let mc = g.reduce_mean(&hc)?;
                let both = g.concat(&[mp, mc], 1)?;
                g.sum_sq(both)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }
}
