//! Graph regressor: GCN layers over the weighted echo-graph, node-weight
//! readout, and the EF / classification heads.
//!
//! Each layer propagates `D̂^{-1/2}(A_sym + I)D̂^{-1/2} · H · W` followed by
//! batch normalization over the nodes and ELU, where `A_sym = (A + Aᵀ)/2`
//! and `D̂` is the degree matrix of the self-looped symmetrized adjacency. A
//! row-normalized directed propagation is available behind a config flag.
//! The final node embeddings are averaged with the learned frame weights and
//! mapped to an EF estimate (trained on EF/100) plus four class logits.

use std::rc::Rc;

use crate::attention::EchoGraph;
use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, MlpBlock, Mode};
use crate::tensor::{Param, Tensor, Var};
use crate::Rng;

/// How the adjacency is normalized before propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjacencyNorm {
    /// Symmetrize, add unit self-loops, normalize by D^{-1/2} on both sides.
    #[default]
    Symmetric,
    /// Keep the directed adjacency, add self-loops, normalize rows by D^{-1}.
    RowDirected,
}

pub struct GcnLayer {
    /// in×out propagation weights (no bias; the batch norm provides a shift).
    pub weight: Rc<Param>,
    pub bn: BatchNormLayer,
}

impl GcnLayer {
    pub fn new(rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        GcnLayer {
            weight: Param::new(
                format!("{name}.weight"),
                crate::nn::uniform_init(rng, &[in_dim, out_dim], in_dim),
                true,
            ),
            bn: BatchNormLayer::new(&format!("{name}.bn"), out_dim),
        }
    }

    /// The linear half of the layer: normalized propagation times the weight
    /// matrix, before batch norm and ELU.
    pub fn propagate(&self, adjacency: &Var, h: &Var, norm: AdjacencyNorm) -> Result<Var> {
        let t = match *adjacency.shape() {
            [r, c] if r == c => r,
            ref s => return Err(Error::shape(format!("adjacency shape {s:?}"))),
        };
        if h.shape()[0] != t {
            return Err(Error::shape(format!(
                "adjacency is {t}x{t} but embeddings have {} rows",
                h.shape()[0]
            )));
        }
        normalized_propagate(adjacency, norm)?.matmul(&h.matmul(&Var::param(&self.weight))?)
    }

    /// Propagation + BN + ELU. `adjacency` is T×T with zero diagonal.
    pub fn forward(&self, adjacency: &Var, h: &Var, norm: AdjacencyNorm, mode: Mode) -> Result<Var> {
        let propagated = self.propagate(adjacency, h, norm)?;
        self.bn.forward(&propagated, mode)?.elu(1.0)
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(Rc::clone(&self.weight));
        self.bn.collect_params(out);
    }
}

/// Normalized adjacency with unit self-loops; the zero-diagonal input always
/// yields strictly positive degrees.
fn normalized_propagate(adjacency: &Var, norm: AdjacencyNorm) -> Result<Var> {
    let t = adjacency.shape()[0];
    let eye = Tensor::eye(t);
    match norm {
        AdjacencyNorm::Symmetric => {
            let a_sym = adjacency
                .add(&adjacency.transpose()?)?
                .mul_scalar(0.5)?
                .add_const(&eye)?;
            let r = a_sym.row_sum()?.powf(-0.5)?;
            a_sym.mul(&r.outer(&r)?)
        }
        AdjacencyNorm::RowDirected => {
            let a_hat = adjacency.add_const(&eye)?;
            let inv_deg = a_hat.row_sum()?.powf(-1.0)?;
            let ones = Var::constant(Tensor::ones(&[t, 1]));
            a_hat.mul(&inv_deg.outer(&ones)?)
        }
    }
}

/// Weighted mean of node embeddings: `h_graph = Σ w_j H_j / Σ w_j`.
pub fn weighted_readout(h: &Var, w: &Var) -> Result<Var> {
    let (t, _) = match *h.shape() {
        [t, d] => (t, d),
        ref s => return Err(Error::shape(format!("readout embeddings shape {s:?}"))),
    };
    if w.shape() != [t, 1] {
        return Err(Error::shape(format!(
            "readout weights shape {:?}, want [{t}, 1]",
            w.shape()
        )));
    }
    let total = w.value().data().iter().sum::<f64>();
    if total <= 0.0 {
        return Err(Error::contract("readout weights sum to zero"));
    }
    w.transpose()?.matmul(h)?.div_scalar_node(&w.sum_all()?)
}

/// GCN stack plus the two heads.
pub struct RegressorParams {
    pub layers: Vec<GcnLayer>,
    pub ef_head: MlpBlock,
    pub class_head: MlpBlock,
    pub norm: AdjacencyNorm,
}

impl RegressorParams {
    /// `dims` are the per-layer output widths (e.g. [128, 64, 32] at paper
    /// scale); `head_hidden` the MLP hidden width of both heads.
    pub fn new(
        rng: &mut Rng,
        embedding_dim: usize,
        dims: &[usize],
        head_hidden: usize,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::config("regressor needs at least one GCN layer"));
        }
        let mut layers = Vec::new();
        let mut d_in = embedding_dim;
        for (i, &d_out) in dims.iter().enumerate() {
            layers.push(GcnLayer::new(rng, &format!("regressor.gcn{i}"), d_in, d_out));
            d_in = d_out;
        }
        Ok(RegressorParams {
            layers,
            ef_head: MlpBlock::new(rng, "regressor.ef_head", d_in, head_hidden, 1),
            class_head: MlpBlock::new(rng, "regressor.class_head", d_in, head_hidden, 4),
            norm: AdjacencyNorm::Symmetric,
        })
    }

    /// Runs the GCN stack and readout, returning the 1×d_g graph embedding.
    pub fn graph_embedding(&self, adjacency: &Var, h0: &Var, w: &Var, mode: Mode) -> Result<Var> {
        let out = self.graph_embeddings_batched(
            std::slice::from_ref(adjacency),
            &[h0.clone()],
            &[w.clone()],
            mode,
        )?;
        Ok(out)
    }

    /// Batched GCN stack over per-sample graphs: propagation happens per
    /// graph, but each layer's batch norm pools statistics over the nodes of
    /// the whole batch. Returns the N×d_g stack of graph embeddings.
    pub fn graph_embeddings_batched(
        &self,
        adjacencies: &[Var],
        h0s: &[Var],
        ws: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        let n = adjacencies.len();
        if n == 0 || h0s.len() != n || ws.len() != n {
            return Err(Error::contract("regressor batch inputs must align"));
        }
        let t = h0s[0].shape()[0];
        if h0s.iter().any(|h| h.shape()[0] != t) {
            return Err(Error::shape(
                "batched graphs must share the frame count".to_string(),
            ));
        }
        let mut hs: Vec<Var> = h0s.to_vec();
        for layer in &self.layers {
            let mut propagated = Vec::with_capacity(n);
            for (a, h) in adjacencies.iter().zip(hs.iter()) {
                if a.shape()[0] != h.shape()[0] {
                    return Err(Error::shape(format!(
                        "adjacency is {}x{} but embeddings have {} rows",
                        a.shape()[0],
                        a.shape()[1],
                        h.shape()[0]
                    )));
                }
                propagated.push(
                    normalized_propagate(a, self.norm)?
                        .matmul(&h.matmul(&Var::param(&layer.weight))?)?,
                );
            }
            let stacked = Var::concat_rows(&propagated)?;
            let activated = layer.bn.forward(&stacked, mode)?.elu(1.0)?;
            hs = (0..n)
                .map(|i| activated.slice_rows(i * t, (i + 1) * t))
                .collect::<Result<Vec<_>>>()?;
        }
        let readouts = hs
            .iter()
            .zip(ws.iter())
            .map(|(h, w)| weighted_readout(h, w))
            .collect::<Result<Vec<_>>>()?;
        Var::concat_rows(&readouts)
    }

    /// Full eval-mode prediction from a concrete graph: EF estimate in
    /// percent (raw, unclamped) plus the four class logits.
    pub fn predict(&self, graph: &EchoGraph) -> Result<(f64, [f64; 4])> {
        let t = graph.frame_count();
        let a = Var::constant(graph.adjacency.clone());
        let h0 = Var::constant(graph.node_features.matrix.clone());
        let w = Var::constant(Tensor::new(
            vec![t, 1],
            graph.node_weights.clone(),
        )?);
        let h_graph = self.graph_embedding(&a, &h0, &w, Mode::Eval)?;
        let ef = self.ef_head.forward(&h_graph, Mode::Eval)?;
        let logits = self.class_head.forward(&h_graph, Mode::Eval)?;
        let l = logits.value().data();
        Ok((
            ef.value().data()[0] * 100.0,
            [l[0], l[1], l[2], l[3]],
        ))
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        for l in &self.layers {
            l.collect_params(out);
        }
        self.ef_head.collect_params(out);
        self.class_head.collect_params(out);
    }
}
