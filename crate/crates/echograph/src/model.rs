//! Full pipeline assembly: video encoder → attention encoder → graph
//! regressor, with size presets and a single ordered parameter registry.

use std::rc::Rc;

use rand::SeedableRng;

use crate::attention::{AttentionEncoderParams, EchoGraph};
use crate::encoder::{count_parameters, FrameEmbeddings, VideoEncoder, VideoEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::regressor::RegressorParams;
use crate::sampling::Clip;
use crate::tensor::{Param, Tensor, Var};
use crate::Rng;

/// Size preset for the three components.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub t_fixed: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub encoder_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub attention_hidden: usize,
    pub gcn_dims: Vec<usize>,
    pub head_hidden: usize,
}

impl ModelConfig {
    /// CPU-friendly profile: 32×32 frames, 32-frame clips.
    pub fn desk() -> Self {
        ModelConfig {
            t_fixed: 32,
            frame_height: 32,
            frame_width: 32,
            encoder_channels: vec![8, 16, 32, 64],
            embedding_dim: 64,
            attention_hidden: 32,
            gcn_dims: vec![32, 16, 8],
            head_hidden: 8,
        }
    }

    /// Full-scale profile (112×112, 64-frame clips); exists as a preset for
    /// parameter accounting, not for CPU training runs.
    pub fn paper() -> Self {
        ModelConfig {
            t_fixed: 64,
            frame_height: 112,
            frame_width: 112,
            encoder_channels: vec![16, 32, 64, 128, 256],
            embedding_dim: 128,
            attention_hidden: 128,
            gcn_dims: vec![128, 64, 32],
            head_hidden: 16,
        }
    }

    /// Tiny profile for gradient checks and structural tests.
    pub fn micro() -> Self {
        ModelConfig {
            t_fixed: 6,
            frame_height: 8,
            frame_width: 8,
            encoder_channels: vec![2, 3],
            embedding_dim: 4,
            attention_hidden: 4,
            gcn_dims: vec![4, 3],
            head_hidden: 3,
        }
    }

    pub fn parse_preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "paper" => Ok(ModelConfig::paper()),
            "micro" => Ok(ModelConfig::micro()),
            other => Err(Error::config(format!("unknown model preset '{other}'"))),
        }
    }
}

/// Batched training-path output.
pub struct BatchForward {
    /// N×1 EF predictions on the normalized (EF/100) scale.
    pub ef_norm: Var,
    /// N×4 class logits.
    pub logits: Var,
}

/// Eval-path output for one clip.
#[derive(Debug, Clone)]
pub struct ClipPrediction {
    /// Raw, unclamped EF estimate in percent.
    pub ef_raw: f64,
    pub logits: [f64; 4],
    pub graph: EchoGraph,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: VideoEncoder,
    pub attention: AttentionEncoderParams,
    pub regressor: RegressorParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        let mut rng = Rng::seed_from_u64(seed);
        let encoder = VideoEncoder::new(
            &mut rng,
            VideoEncoderConfig::with_default_strides(
                cfg.encoder_channels.clone(),
                cfg.embedding_dim,
            ),
        )?;
        let attention = AttentionEncoderParams::new(&mut rng, cfg.embedding_dim, cfg.attention_hidden);
        let regressor =
            RegressorParams::new(&mut rng, cfg.embedding_dim, &cfg.gcn_dims, cfg.head_hidden)?;
        Ok(Model {
            cfg,
            encoder,
            attention,
            regressor,
        })
    }

    /// All parameters (trainable and buffers) in a stable order.
    pub fn params(&self) -> Vec<Rc<Param>> {
        let mut out = Vec::new();
        self.encoder.collect_params(&mut out);
        self.attention.collect_params(&mut out);
        self.regressor.collect_params(&mut out);
        out
    }

    /// Parameters of the encoder + attention components only (the pretraining
    /// stage updates just these).
    pub fn pretrain_params(&self) -> Vec<Rc<Param>> {
        let mut out = Vec::new();
        self.encoder.collect_params(&mut out);
        self.attention.collect_params(&mut out);
        out
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params())
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            if p.trainable() {
                p.zero_grad();
            }
        }
    }

    /// Differentiable batched forward over equally shaped clips.
    pub fn forward_batch(&self, clips: &[Clip], mode: Mode) -> Result<BatchForward> {
        let (_, w_all) = self.forward_batch_graphs(clips, mode)?;
        Ok(w_all)
    }

    /// Like [`forward_batch`](Self::forward_batch) but also exposes each
    /// sample's node-weight Var (for the pretraining objective).
    pub fn forward_batch_graphs(
        &self,
        clips: &[Clip],
        mode: Mode,
    ) -> Result<(Vec<Var>, BatchForward)> {
        let n = clips.len();
        let t = self.cfg.t_fixed;
        let input = Var::constant(VideoEncoder::batch_input(clips)?);
        let emb = self.encoder.forward_batch(&input, mode, true)?; // (N·T)×d
        let (adjacencies, node_weight_vars) = self.attention.forward_batched(&emb, n, t, mode)?;
        let h0s = (0..n)
            .map(|i| emb.slice_rows(i * t, (i + 1) * t))
            .collect::<Result<Vec<_>>>()?;
        let stacked =
            self.regressor
                .graph_embeddings_batched(&adjacencies, &h0s, &node_weight_vars, mode)?;
        let ef_norm = self.regressor.ef_head.forward(&stacked, mode)?;
        let logits = self.regressor.class_head.forward(&stacked, mode)?;
        Ok((node_weight_vars, BatchForward { ef_norm, logits }))
    }

    /// Encoder + attention only: per-sample node-weight columns (T×1).
    /// The pretraining stage drives this path so the regressor is neither
    /// executed nor touched.
    pub fn forward_node_weights(&self, clips: &[Clip], mode: Mode) -> Result<Vec<Var>> {
        let n = clips.len();
        let t = self.cfg.t_fixed;
        let input = Var::constant(VideoEncoder::batch_input(clips)?);
        let emb = self.encoder.forward_batch(&input, mode, true)?;
        let (_, weights) = self.attention.forward_batched(&emb, n, t, mode)?;
        Ok(weights)
    }

    /// Frozen-statistics embedding of one clip.
    pub fn encode(&self, clip: &Clip) -> Result<FrameEmbeddings> {
        self.encoder.encode(clip)
    }

    /// Frozen-statistics prediction for one clip, with the inferred graph.
    pub fn predict_clip(&self, clip: &Clip) -> Result<ClipPrediction> {
        let embeddings = self.encoder.encode(clip)?;
        let graph = self.attention.infer_graph(&embeddings)?;
        let (ef_raw, logits) = self.regressor.predict(&graph)?;
        Ok(ClipPrediction {
            ef_raw,
            logits,
            graph,
        })
    }
}

/// Snapshot of all parameter tensors, keyed by name; used by checkpointing
/// and the determinism tests.
pub fn snapshot_params(params: &[Rc<Param>]) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|p| (p.name().to_string(), p.value().clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_clip(rng: &mut Rng, cfg: &ModelConfig) -> Clip {
        let n = cfg.t_fixed * cfg.frame_height * cfg.frame_width;
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Clip {
            frames: Tensor::new(
                vec![cfg.t_fixed, cfg.frame_height, cfg.frame_width],
                data,
            )
            .unwrap(),
            source_id: 0,
            start_index: 0,
            pad_count: 0,
        }
    }

    #[test]
    fn micro_model_runs_batched_and_single() {
        let cfg = ModelConfig::micro();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let mut r = Rng::seed_from_u64(2);
        let clips = vec![random_clip(&mut r, &cfg), random_clip(&mut r, &cfg)];
        let out = model.forward_batch(&clips, Mode::Train).unwrap();
        assert_eq!(out.ef_norm.shape(), &[2, 1]);
        assert_eq!(out.logits.shape(), &[2, 4]);

        let pred = model.predict_clip(&clips[0]).unwrap();
        assert_eq!(pred.graph.frame_count(), cfg.t_fixed);
        assert!(pred.ef_raw.is_finite());
    }

    #[test]
    fn param_names_are_unique_and_ordered_stably() {
        let model = Model::new(ModelConfig::micro(), 3).unwrap();
        let names: Vec<String> = model.params().iter().map(|p| p.name().to_string()).collect();
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate parameter names");
        let again: Vec<String> = model.params().iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names, again);
    }

    #[test]
    fn same_seed_same_init() {
        let a = Model::new(ModelConfig::micro(), 42).unwrap();
        let b = Model::new(ModelConfig::micro(), 42).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value().data(), pb.value().data(), "{}", pa.name());
        }
        let c = Model::new(ModelConfig::micro(), 43).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(x, y)| x.value().data() != y.value().data());
        assert!(differs);
    }

    #[test]
    fn paper_preset_parameter_count_is_order_millions() {
        let model = Model::new(ModelConfig::paper(), 1).unwrap();
        let count = model.count_parameters();
        assert!(
            (1_000_000..4_000_000).contains(&count),
            "paper-scale parameter count {count}"
        );
    }
}
