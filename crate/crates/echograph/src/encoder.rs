//! Video encoder: residual 3-D convolution blocks that turn a clip into one
//! embedding per frame, preserving the temporal extent throughout.
//!
//! Each block applies conv3d (temporal stride 1, spatial stride 1 on the
//! first block and 2 afterwards) → batch norm → residual add → ELU, where the
//! skip path is the identity or a 1×1×1 projection when the shape changes.
//! Global spatial average pooling and a linear map produce the T×d embedding
//! matrix, to which sinusoidal positional encodings are added.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{positional_encoding, BatchNormLayer, Conv3dLayer, LinearLayer, Mode};
use crate::sampling::Clip;
use crate::tensor::{Param, Tensor, Var};
use crate::Rng;

#[derive(Debug, Clone)]
pub struct VideoEncoderConfig {
    /// Output channels per block.
    pub channels: Vec<usize>,
    /// Embedding dimension d.
    pub embedding_dim: usize,
    /// Convolution kernel (k_t, k_h, k_w); temporal padding is (k_t−1)/2 so
    /// T is preserved.
    pub kernel: (usize, usize, usize),
    /// Spatial stride per block.
    pub spatial_strides: Vec<usize>,
}

impl VideoEncoderConfig {
    /// Stride-1 first block, stride-2 afterwards.
    pub fn with_default_strides(channels: Vec<usize>, embedding_dim: usize) -> Self {
        let strides = (0..channels.len()).map(|i| if i == 0 { 1 } else { 2 }).collect();
        VideoEncoderConfig {
            channels,
            embedding_dim,
            kernel: (3, 3, 3),
            spatial_strides: strides,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.spatial_strides.len() {
            return Err(Error::config(
                "encoder needs one spatial stride per channel block",
            ));
        }
        if self.kernel.0 % 2 == 0 {
            return Err(Error::config(
                "temporal kernel must be odd to preserve the frame count",
            ));
        }
        Ok(())
    }

    /// Spatial extent after all blocks. Every block must see at least a full
    /// kernel of real pixels; otherwise the stride pyramid has exhausted the
    /// frame.
    fn check_spatial(&self, mut h: usize, mut w: usize) -> Result<(usize, usize)> {
        let (_, kh, kw) = self.kernel;
        for (i, &s) in self.spatial_strides.iter().enumerate() {
            if h < kh || w < kw {
                return Err(Error::config(format!(
                    "spatial extent {h}x{w} too small for block {i}"
                )));
            }
            let (ph, pw) = (kh / 2, kw / 2);
            h = (h + 2 * ph - kh) / s + 1;
            w = (w + 2 * pw - kw) / s + 1;
        }
        Ok((h, w))
    }
}

/// Per-frame embeddings with the clip bookkeeping needed downstream.
#[derive(Debug, Clone)]
pub struct FrameEmbeddings {
    /// T×d matrix; row j embeds frame j of the clip.
    pub matrix: Tensor,
    pub pad_count: usize,
    pub start_index: usize,
}

struct EncoderBlock {
    conv: Conv3dLayer,
    bn: BatchNormLayer,
    /// 1×1×1 projection when channel count or spatial stride changes.
    skip: Option<Conv3dLayer>,
}

pub struct VideoEncoder {
    pub cfg: VideoEncoderConfig,
    blocks: Vec<EncoderBlock>,
    to_embedding: LinearLayer,
}

impl VideoEncoder {
    pub fn new(rng: &mut Rng, cfg: VideoEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (kt, kh, kw) = cfg.kernel;
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, (&c_out, &stride)) in cfg.channels.iter().zip(cfg.spatial_strides.iter()).enumerate()
        {
            let conv = Conv3dLayer::new(
                rng,
                &format!("encoder.block{i}.conv"),
                c_out,
                c_in,
                (kt, kh, kw),
                (1, stride, stride),
                (kt / 2, kh / 2, kw / 2),
            );
            let bn = BatchNormLayer::new(&format!("encoder.block{i}.bn"), c_out);
            let skip = if c_in != c_out || stride != 1 {
                Some(Conv3dLayer::new(
                    rng,
                    &format!("encoder.block{i}.skip"),
                    c_out,
                    c_in,
                    (1, 1, 1),
                    (1, stride, stride),
                    (0, 0, 0),
                ))
            } else {
                None
            };
            blocks.push(EncoderBlock { conv, bn, skip });
            c_in = c_out;
        }
        let to_embedding = LinearLayer::new(
            rng,
            "encoder.to_embedding",
            cfg.embedding_dim,
            *cfg.channels.last().unwrap(),
        );
        Ok(VideoEncoder {
            cfg,
            blocks,
            to_embedding,
        })
    }

    /// Stacks clips into an N×1×T×H×W input tensor.
    pub fn batch_input(clips: &[Clip]) -> Result<Tensor> {
        if clips.is_empty() {
            return Err(Error::contract("empty clip batch"));
        }
        let shape = clips[0].frames.shape().to_vec();
        let (t, h, w) = (shape[0], shape[1], shape[2]);
        let mut data = Vec::with_capacity(clips.len() * t * h * w);
        for c in clips {
            if c.frames.shape() != shape.as_slice() {
                return Err(Error::shape("clips in a batch must share dimensions"));
            }
            data.extend_from_slice(c.frames.data());
        }
        Ok(Tensor::from_raw(vec![clips.len(), 1, t, h, w], data))
    }

    /// Encodes a batch: N×1×T×H×W → (N·T)×d, rows ordered sample-major.
    /// Positional encodings are added per sample unless disabled.
    pub fn forward_batch(&self, x: &Var, mode: Mode, positional: bool) -> Result<Var> {
        let (n, t, h, w) = match *x.shape() {
            [n, 1, t, h, w] => (n, t, h, w),
            ref s => return Err(Error::shape(format!("encoder input shape {s:?}"))),
        };
        self.cfg.check_spatial(h, w)?;
        let mut cur = x.clone();
        for block in &self.blocks {
            let main = block.bn.forward(&block.conv.forward(&cur)?, mode)?;
            let skip = match &block.skip {
                Some(proj) => proj.forward(&cur)?,
                None => cur.clone(),
            };
            cur = main.add(&skip)?.elu(1.0)?;
        }
        let pooled = spatial_mean_pool(&cur)?; // (N·T)×C_last
        let emb = self.to_embedding.forward(&pooled)?; // (N·T)×d
        if positional {
            let pe = positional_encoding(t, self.cfg.embedding_dim)?;
            let mut tiled = Vec::with_capacity(n * t * self.cfg.embedding_dim);
            for _ in 0..n {
                tiled.extend_from_slice(pe.data());
            }
            emb.add_const(&Tensor::from_raw(
                vec![n * t, self.cfg.embedding_dim],
                tiled,
            ))
        } else {
            Ok(emb)
        }
    }

    /// Encodes one clip with frozen statistics; the embedding rows include
    /// positional encodings.
    pub fn encode(&self, clip: &Clip) -> Result<FrameEmbeddings> {
        let x = Var::constant(Self::batch_input(std::slice::from_ref(clip))?);
        let emb = self.forward_batch(&x, Mode::Eval, true)?;
        Ok(FrameEmbeddings {
            matrix: emb.value().clone(),
            pad_count: clip.pad_count,
            start_index: clip.start_index,
        })
    }

    /// Same as [`encode`](Self::encode) but without positional encodings;
    /// used by structural tests that need per-frame outputs only.
    pub fn encode_without_positional(&self, clip: &Clip) -> Result<FrameEmbeddings> {
        let x = Var::constant(Self::batch_input(std::slice::from_ref(clip))?);
        let emb = self.forward_batch(&x, Mode::Eval, false)?;
        Ok(FrameEmbeddings {
            matrix: emb.value().clone(),
            pad_count: clip.pad_count,
            start_index: clip.start_index,
        })
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        for b in &self.blocks {
            b.conv.collect_params(out);
            b.bn.collect_params(out);
            if let Some(s) = &b.skip {
                s.collect_params(out);
            }
        }
        self.to_embedding.collect_params(out);
    }
}

/// Exact count of trainable scalars in a parameter list.
pub fn count_parameters(params: &[Rc<Param>]) -> usize {
    params
        .iter()
        .filter(|p| p.trainable())
        .map(|p| p.numel())
        .sum()
}

/// N×C×T×H×W → (N·T)×C by averaging over the spatial plane.
pub fn spatial_mean_pool(x: &Var) -> Result<Var> {
    let (n, c, t, h, w) = match *x.shape() {
        [n, c, t, h, w] => (n, c, t, h, w),
        ref s => return Err(Error::shape(format!("spatial_mean_pool input {s:?}"))),
    };
    let plane = h * w;
    let xs = x.value().data();
    let mut out = vec![0.0; n * t * c];
    for nn in 0..n {
        for cc in 0..c {
            for tt in 0..t {
                let base = (((nn * c) + cc) * t + tt) * plane;
                let mut acc = 0.0;
                for p in 0..plane {
                    acc += xs[base + p];
                }
                out[(nn * t + tt) * c + cc] = acc / plane as f64;
            }
        }
    }
    let value = Tensor::new(vec![n * t, c], out)
        .map_err(|e| Error::numeric(format!("spatial_mean_pool: {e}")))?;
    Ok(Var::from_parts(
        "spatial_mean_pool",
        value,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; n * c * t * h * w];
            let plane = h * w;
            for nn in 0..n {
                for cc in 0..c {
                    for tt in 0..t {
                        let gv = gd[(nn * t + tt) * c + cc] / plane as f64;
                        let base = (((nn * c) + cc) * t + tt) * plane;
                        for p in 0..plane {
                            dx[base + p] = gv;
                        }
                    }
                }
            }
            Ok(vec![Some(Tensor::from_raw(vec![n, c, t, h, w], dx))])
        }),
    ))
}
