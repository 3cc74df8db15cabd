//! Shared fixtures for the pipeline benchmarks; see `benches/pipeline.rs`.

use fnn_core::config::RunConfig;
use fnn_core::data::{build_batch, DatasetManifest, FoldFilter, ForestBatch};
use fnn_core::model::{FnnParams, ModelDims};
use fnn_core::synth::generate_synthetic;
use fnn_core::train::FamilyIndex;

/// A mid-sized benchmark instance: 16-pair batch, 16-dimensional embeddings,
/// two forest layers. Small enough for quick iteration, large enough that
/// matrix products dominate the tape bookkeeping.
pub struct BenchInstance {
    pub manifest: DatasetManifest,
    pub cfg: RunConfig,
    pub dims: ModelDims,
    pub params: FnnParams,
    pub batch: ForestBatch,
    pub fam: FamilyIndex,
    pub idx: Vec<usize>,
}

impl BenchInstance {
    pub fn new() -> Self {
        let manifest = generate_synthetic(40, 16, 0.1, 7).expect("generator args are valid");
        let cfg = RunConfig {
            dh: 16,
            layers: 2,
            h1: 32,
            h2: 8,
            parts: 2,
            batch: 16,
            epochs: 1,
            ..RunConfig::default()
        };
        cfg.validate().expect("benchmark config is valid");

        let idx: Vec<usize> = manifest.pair_indices(None, FoldFilter::All)[..16].to_vec();
        let fam = FamilyIndex::from_pairs(&manifest, &idx);
        let dims = ModelDims::from_config(&cfg, manifest.d_in(), fam.len())
            .expect("benchmark dims are valid");
        let params = FnnParams::init(dims, 1).expect("init succeeds");
        let batch = build_batch(&manifest, &idx).expect("batch builds");
        BenchInstance { manifest, cfg, dims, params, batch, fam, idx }
    }
}

impl Default for BenchInstance {
    fn default() -> Self {
        Self::new()
    }
}
