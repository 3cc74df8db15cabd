//! Model assembly: dimensions, the parameter store with its fixed layout,
//! tape binding, and the full forward pass from raw patch embeddings to
//! kinship logits.
//!
//! Every parameter tensor lives in one flat, documented order — the same
//! order used for initialization draws, optimizer state, and checkpoint
//! serialization:
//!
//! 1. `proj` (only when `d_in != d_h`)
//! 2. forest weights, graph-major then layer-major: `a, b, c, d, e`
//!    (one graph set when parameters are shared, nine otherwise)
//! 3. kinship head: `w1, b1, w2, b2, w3, b3`
//! 4. family head: per part `w, b`
//! 5. `centers`
//!
//! Initialization draws each tensor in this order from one seeded stream,
//! uniform in `(-1/sqrt(fan_in), +1/sqrt(fan_in))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classifier::{combine_features, family_id_head, kinship_head, BoundClassifierParams};
use crate::config::RunConfig;
use crate::data::ForestBatch;
use crate::forest::{forest_forward, readout, BoundLayerParams, FOREST_SIZE};
use crate::graph::{stable_sigmoid, AutodiffError, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dimensions: {0}")]
    BadDims(String),
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("flat parameter vector holds {got} values, the layout needs {expected}")]
    FlatSize { expected: usize, got: usize },
}

/// Every size the model needs, resolved against a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_h: usize,
    pub layers: usize,
    pub h1: usize,
    pub h2: usize,
    pub parts: usize,
    pub n_families: usize,
    pub share_params: bool,
}

impl ModelDims {
    /// Resolves the configured sizes against a dataset's embedding width and
    /// training-fold family count.
    pub fn from_config(cfg: &RunConfig, d_in: usize, n_families: usize) -> Result<Self, ModelError> {
        let dims = ModelDims {
            d_in,
            d_h: cfg.dh,
            layers: cfg.layers,
            h1: cfg.h1,
            h2: cfg.h2,
            parts: cfg.parts,
            n_families,
            share_params: cfg.share_params,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadDims(msg));
        if self.d_in == 0 || self.d_h == 0 || self.layers == 0 {
            return bad(format!(
                "d_in={}, d_h={}, layers={} must all be positive",
                self.d_in, self.d_h, self.layers
            ));
        }
        if self.h1 == 0 || self.h2 == 0 {
            return bad(format!("h1={}, h2={} must be positive", self.h1, self.h2));
        }
        if self.parts == 0 || !self.feature_dim().is_multiple_of(self.parts) {
            return bad(format!(
                "feature width {} is not divisible into {} parts",
                self.feature_dim(),
                self.parts
            ));
        }
        if self.n_families == 0 {
            return bad("a family head needs at least one family".to_string());
        }
        Ok(())
    }

    /// Width of one person feature: `layers * d_h`.
    pub fn feature_dim(&self) -> usize {
        self.layers * self.d_h
    }

    /// Width of the combined pair feature (four interaction blocks).
    pub fn combined_dim(&self) -> usize {
        4 * self.feature_dim()
    }

    /// Column width of one family-head part.
    pub fn part_width(&self) -> usize {
        self.feature_dim() / self.parts
    }

    /// Independent forest weight sets: one when shared, nine otherwise.
    pub fn graph_sets(&self) -> usize {
        if self.share_params {
            1
        } else {
            FOREST_SIZE
        }
    }

    /// The input projection exists only when the embedding width differs
    /// from the hidden width; otherwise layer one consumes the embeddings
    /// directly.
    pub fn has_projection(&self) -> bool {
        self.d_in != self.d_h
    }

    /// The full parameter layout, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
            specs.push(ParamSpec { name, shape, fan_in });
        };
        if self.has_projection() {
            push("proj".into(), vec![self.d_in, self.d_h], self.d_in);
        }
        for set in 0..self.graph_sets() {
            let set_name = if self.share_params { "shared".to_string() } else { format!("g{set}") };
            for layer in 0..self.layers {
                for which in ["a", "b", "c", "d", "e"] {
                    push(
                        format!("forest.{set_name}.l{layer}.{which}"),
                        vec![self.d_h, self.d_h],
                        self.d_h,
                    );
                }
            }
        }
        let cd = self.combined_dim();
        push("kin.w1".into(), vec![cd, self.h1], cd);
        push("kin.b1".into(), vec![self.h1], cd);
        push("kin.w2".into(), vec![self.h1, self.h2], self.h1);
        push("kin.b2".into(), vec![self.h2], self.h1);
        push("kin.w3".into(), vec![self.h2, 1], self.h2);
        push("kin.b3".into(), vec![1], self.h2);
        let pw = self.part_width();
        for part in 0..self.parts {
            push(format!("family.p{part}.w"), vec![pw, self.n_families], pw);
            push(format!("family.p{part}.b"), vec![self.n_families], pw);
        }
        push("centers".into(), vec![2, self.h2], self.h2);
        specs
    }
}

/// One entry of the parameter layout: name, shape, and the fan-in that sets
/// its initialization bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The parameter store: one tensor per layout entry, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct FnnParams {
    dims: ModelDims,
    tensors: Vec<Tensor>,
}

impl FnnParams {
    /// Fresh parameters drawn from a single seeded stream in layout order,
    /// each tensor uniform in `(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = dims
            .param_specs()
            .iter()
            .map(|spec| {
                let bound = 1.0 / (spec.fan_in as f64).sqrt();
                match spec.shape.as_slice() {
                    [n] => Tensor::uniform_vector(*n, bound, &mut rng),
                    [r, c] => Tensor::uniform(*r, *c, bound, &mut rng),
                    other => unreachable!("layout emits rank-1/2 shapes only, got {other:?}"),
                }
            })
            .collect();
        Ok(FnnParams { dims, tensors })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.dims.param_specs()
    }

    /// Index of the centers tensor (always last in the layout).
    pub fn centers_index(&self) -> usize {
        self.tensors.len() - 1
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Rebuilds the store from a flat vector in layout order.
    pub fn from_flat(dims: ModelDims, values: &[f64]) -> Result<Self, ModelError> {
        dims.validate()?;
        let specs = dims.param_specs();
        let expected: usize = specs.iter().map(ParamSpec::numel).sum();
        if values.len() != expected {
            return Err(ModelError::FlatSize { expected, got: values.len() });
        }
        let mut tensors = Vec::with_capacity(specs.len());
        let mut at = 0;
        for spec in &specs {
            let n = spec.numel();
            tensors.push(Tensor::new(spec.shape.clone(), values[at..at + n].to_vec()));
            at += n;
        }
        Ok(FnnParams { dims, tensors })
    }

    /// Binds every tensor onto a tape as a gradient-tracked leaf and builds
    /// the structured views over them.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundModel, ModelError> {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.leaf(t, true)).collect();
        BoundModel::from_vars(&self.dims, &vars)
    }
}

/// Structured views over one tape binding of the parameters. `vars` keeps
/// the flat layout order for gradient extraction; shared forest weights
/// appear once in `vars` and are repeated across the nine per-graph entries.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub proj: Option<Var>,
    pub forest: Vec<Vec<BoundLayerParams>>,
    pub classifier: BoundClassifierParams,
    pub centers: Var,
}

impl BoundModel {
    /// Assembles the structured views from leaves in layout order (the same
    /// order as [`ModelDims::param_specs`]).
    pub fn from_vars(dims: &ModelDims, vars: &[Var]) -> Result<Self, ModelError> {
        let specs = dims.param_specs();
        if vars.len() != specs.len() {
            return Err(ModelError::ParamCount { expected: specs.len(), got: vars.len() });
        }
        let mut at = 0;
        let proj = if dims.has_projection() {
            at += 1;
            Some(vars[0])
        } else {
            None
        };
        let sets = dims.graph_sets();
        let mut per_set = Vec::with_capacity(sets);
        for _ in 0..sets {
            let mut layers = Vec::with_capacity(dims.layers);
            for _ in 0..dims.layers {
                layers.push(BoundLayerParams {
                    a: vars[at],
                    b: vars[at + 1],
                    c: vars[at + 2],
                    d: vars[at + 3],
                    e: vars[at + 4],
                });
                at += 5;
            }
            per_set.push(layers);
        }
        let forest: Vec<Vec<BoundLayerParams>> = if dims.share_params {
            (0..FOREST_SIZE).map(|_| per_set[0].clone()).collect()
        } else {
            per_set
        };
        let classifier = BoundClassifierParams {
            w1: vars[at],
            b1: vars[at + 1],
            w2: vars[at + 2],
            b2: vars[at + 3],
            w3: vars[at + 4],
            b3: vars[at + 5],
            family: (0..dims.parts)
                .map(|m| (vars[at + 6 + 2 * m], vars[at + 7 + 2 * m]))
                .collect(),
        };
        at += 6 + 2 * dims.parts;
        let centers = vars[at];
        Ok(BoundModel { vars: vars.to_vec(), proj, forest, classifier, centers })
    }
}

/// Everything the losses need from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[n, 1]` kinship logits.
    pub logits: Var,
    /// `[n, h2]` last hidden activation, the center-loss feature.
    pub h: Var,
    /// `[n, F]` parent person features.
    pub f_p: Var,
    /// `[n, F]` child person features.
    pub f_c: Var,
    /// `[2n, F]` parent rows then child rows, for the triplet and family
    /// losses.
    pub stacked: Var,
    /// Per-part `[2n, n_families]` family-identity logits.
    pub family_logits: Vec<Var>,
}

/// Full forward pass on one batch: project (if configured), run the nine
/// paired graphs, read out, combine, and score both heads.
pub fn forward(
    g: &mut Graph,
    bound: &BoundModel,
    dims: &ModelDims,
    batch: &ForestBatch,
) -> Result<ForwardOut, AutodiffError> {
    let mut inputs = Vec::with_capacity(FOREST_SIZE);
    for k in 0..FOREST_SIZE {
        let x_p = g.constant(&batch.parent_x[k]);
        let x_c = g.constant(&batch.child_x[k]);
        let (h_p, h_c) = match bound.proj {
            Some(p) => (g.matmul(x_p, p)?, g.matmul(x_c, p)?),
            None => (x_p, x_c),
        };
        inputs.push((h_p, h_c));
    }
    let state = forest_forward(g, &inputs, &bound.forest)?;
    let (f_p, f_c) = readout(g, &state)?;
    let combined = combine_features(g, f_p, f_c)?;
    let (logits, h) = kinship_head(g, combined, &bound.classifier)?;
    let stacked = g.concat(&[f_p, f_c], 0)?;
    let family_logits = family_id_head(g, stacked, &bound.classifier, dims.parts)?;
    Ok(ForwardOut { logits, h, f_p, f_c, stacked, family_logits })
}

/// The prediction rule: sigmoid of the logit, then a strict `> 0.5` test,
/// so a zero logit predicts non-kin.
pub fn predict_kin(logit: f64) -> bool {
    stable_sigmoid(logit) > 0.5
}
