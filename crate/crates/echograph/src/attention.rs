//! Attention encoder: infers edge and node weights over the complete frame
//! graph by one round of message passing.
//!
//! For frame embeddings h_1..h_T, every ordered pair (k, s) with k ≠ s gets a
//! learned edge message `u_{k,s} = MLP1([h_k ∥ h_s])`; per-node states
//! aggregate incoming messages, `v_s = MLP2(Σ_{k≠s} u_{k,s})`; scalar logits
//! `z_{k,s} = MLP3([v_k ∥ v_s])` become edge weights through a sigmoid; and
//! node weights pass the per-node sum of pre-sigmoid logits through
//! `w_s = σ(MLP4(Σ_{k≠s} z_{k,s}))`. One message-passing round reaches every
//! node because the graph is complete.

use std::rc::Rc;

use crate::encoder::FrameEmbeddings;
use crate::error::{Error, Result};
use crate::nn::{MlpBlock, Mode};
use crate::tensor::{Param, Tensor, Var};
use crate::Rng;

/// Weighted complete graph over the frames of one clip.
#[derive(Debug, Clone)]
pub struct EchoGraph {
    /// T×T edge weights in [0,1]; the diagonal is exactly 0 (no self-edges —
    /// the regressor adds unit self-loops during normalization).
    pub adjacency: Tensor,
    /// Per-frame weights in [0,1], length T.
    pub node_weights: Vec<f64>,
    /// The embeddings the graph was inferred from.
    pub node_features: FrameEmbeddings,
}

impl EchoGraph {
    pub fn frame_count(&self) -> usize {
        self.node_weights.len()
    }
}

/// The four message-passing MLPs.
pub struct AttentionEncoderParams {
    /// node → edge: [h_k ∥ h_s] → d_e
    pub mlp1: MlpBlock,
    /// edge → node: d_e → d_v
    pub mlp2: MlpBlock,
    /// node → edge: [v_k ∥ v_s] → scalar logit
    pub mlp3: MlpBlock,
    /// edge → node on pre-sigmoid logits → scalar node logit
    pub mlp4: MlpBlock,
}

impl AttentionEncoderParams {
    /// `hidden` is both the MLP hidden width and the message dimensions
    /// d_e = d_v.
    pub fn new(rng: &mut Rng, embedding_dim: usize, hidden: usize) -> Self {
        AttentionEncoderParams {
            mlp1: MlpBlock::new(rng, "attention.mlp1", 2 * embedding_dim, hidden, hidden),
            mlp2: MlpBlock::new(rng, "attention.mlp2", hidden, hidden, hidden),
            mlp3: MlpBlock::new(rng, "attention.mlp3", 2 * hidden, hidden, 1),
            mlp4: MlpBlock::new(rng, "attention.mlp4", 1, hidden, 1),
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        self.mlp1.collect_params(out);
        self.mlp2.collect_params(out);
        self.mlp3.collect_params(out);
        self.mlp4.collect_params(out);
    }

    /// Differentiable forward over an embedding matrix (T×d): returns the
    /// dense adjacency (T×T, zero diagonal) and node weights (T×1).
    pub fn forward(&self, h0: &Var, mode: Mode) -> Result<(Var, Var)> {
        let t = match *h0.shape() {
            [t, _] => t,
            ref s => return Err(Error::shape(format!("attention input shape {s:?}"))),
        };
        let (mut a, mut w) = self.forward_batched(h0, 1, t, mode)?;
        Ok((a.remove(0), w.remove(0)))
    }

    /// Batched forward over sample-major stacked embeddings ((N·T)×d). All
    /// N·T·(T−1) edges pass through the MLPs jointly, so batch-norm
    /// statistics pool over the whole batch of edges (and of nodes); message
    /// aggregation never crosses sample boundaries.
    pub fn forward_batched(
        &self,
        emb: &Var,
        n: usize,
        t: usize,
        mode: Mode,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        match *emb.shape() {
            [rows, _] if rows == n * t => {}
            ref s => {
                return Err(Error::shape(format!(
                    "attention batch input shape {s:?}, want [{} rows, d]",
                    n * t
                )))
            }
        }
        if t < 2 {
            return Err(Error::contract(
                "echo-graph needs at least 2 frames for its edge set",
            ));
        }
        let (from_local, to_local) = edge_lists(t);
        let e = from_local.len();
        let mut from_all = Vec::with_capacity(n * e);
        let mut to_all = Vec::with_capacity(n * e);
        for i in 0..n {
            from_all.extend(from_local.iter().map(|&k| i * t + k));
            to_all.extend(to_local.iter().map(|&s| i * t + s));
        }
        let from_all = Rc::new(from_all);
        let to_all = Rc::new(to_all);

        // node → edge (messages for every ordered pair)
        let h_from = emb.index_select_rows(&from_all)?;
        let h_to = emb.index_select_rows(&to_all)?;
        let u = self
            .mlp1
            .forward(&Var::concat_cols(&[h_from, h_to])?, mode)?;

        // edge → node: sum over incoming edges of each target node
        let agg = u.segment_sum_rows(&to_all, n * t)?;
        let v = self.mlp2.forward(&agg, mode)?;

        // node → edge: scalar logits
        let v_from = v.index_select_rows(&from_all)?;
        let v_to = v.index_select_rows(&to_all)?;
        let z = self
            .mlp3
            .forward(&Var::concat_cols(&[v_from, v_to])?, mode)?;

        // edge weights: per-sample dense adjacency from each edge block
        let sig = z.sigmoid()?;
        let mut adjacencies = Vec::with_capacity(n);
        for i in 0..n {
            adjacencies.push(
                sig.slice_rows(i * e, (i + 1) * e)?
                    .edges_to_dense(&from_local, &to_local, t)?,
            );
        }

        // node weights from pre-sigmoid logit sums
        let node_logits = z.segment_sum_rows(&to_all, n * t)?;
        let w_all = self.mlp4.forward(&node_logits, mode)?.sigmoid()?;
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            weights.push(w_all.slice_rows(i * t, (i + 1) * t)?);
        }
        Ok((adjacencies, weights))
    }

    /// Frozen-statistics inference producing a concrete [`EchoGraph`].
    pub fn infer_graph(&self, embeddings: &FrameEmbeddings) -> Result<EchoGraph> {
        let h0 = Var::constant(embeddings.matrix.clone());
        let (a, w) = self.forward(&h0, Mode::Eval)?;
        Ok(EchoGraph {
            adjacency: a.value().clone(),
            node_weights: w.value().data().to_vec(),
            node_features: embeddings.clone(),
        })
    }
}

/// Ordered edge lists of the complete graph: (from[e], to[e]) for all k ≠ s
/// in lexicographic order. The order fixes every aggregation's accumulation
/// sequence.
pub fn edge_lists(t: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
    let mut from = Vec::with_capacity(t * (t - 1));
    let mut to = Vec::with_capacity(t * (t - 1));
    for k in 0..t {
        for s in 0..t {
            if k != s {
                from.push(k);
                to.push(s);
            }
        }
    }
    (Rc::new(from), Rc::new(to))
}

/// Summary statistics of a graph's weights, used by the periodicity triage
/// and the explainability export.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    /// Entropy of w normalized by ln(T): 1 for uniform weights, → 0 as the
    /// mass concentrates.
    pub normalized_entropy: f64,
    pub max_w: f64,
    pub mean_w: f64,
    pub var_w: f64,
    /// Histogram of edge weights over 10 equal bins of [0, 1].
    pub edge_histogram: [usize; 10],
}

pub fn graph_stats(graph: &EchoGraph) -> GraphStats {
    let w = &graph.node_weights;
    let t = w.len();
    let total: f64 = w.iter().sum();
    let mut entropy = 0.0;
    if total > 0.0 && t > 1 {
        for &x in w {
            if x > 0.0 {
                let p = x / total;
                entropy -= p * p.ln();
            }
        }
        entropy /= (t as f64).ln();
    }
    let mean = total / t as f64;
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = w.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
    let mut hist = [0usize; 10];
    let a = &graph.adjacency;
    for k in 0..t {
        for s in 0..t {
            if k != s {
                let v = a.at2(k, s);
                let bin = ((v * 10.0).floor() as usize).min(9);
                hist[bin] += 1;
            }
        }
    }
    GraphStats {
        normalized_entropy: entropy,
        max_w: max,
        mean_w: mean,
        var_w: var,
        edge_histogram: hist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random_embeddings(rng: &mut Rng, t: usize, d: usize) -> Tensor {
        let data = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, d], data).unwrap()
    }

    fn embeddings_of(matrix: Tensor) -> FrameEmbeddings {
        FrameEmbeddings {
            matrix,
            pad_count: 0,
            start_index: 0,
        }
    }

    #[test]
    fn weights_live_strictly_inside_unit_interval() {
        let mut r = rng(1);
        let attn = AttentionEncoderParams::new(&mut r, 4, 6);
        let emb = embeddings_of(random_embeddings(&mut r, 7, 4));
        let g = attn.infer_graph(&emb).unwrap();
        for k in 0..7 {
            for s in 0..7 {
                let v = g.adjacency.at2(k, s);
                if k == s {
                    assert_eq!(v, 0.0, "diagonal must be exactly zero");
                } else {
                    assert!(v > 0.0 && v < 1.0, "edge ({k},{s}) = {v}");
                }
            }
        }
        for &w in &g.node_weights {
            assert!(w > 0.0 && w < 1.0);
        }
    }

    #[test]
    fn identical_embeddings_give_constant_weights() {
        let mut r = rng(2);
        let attn = AttentionEncoderParams::new(&mut r, 4, 6);
        let row: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let g = attn
            .infer_graph(&embeddings_of(Tensor::new(vec![5, 4], data).unwrap()))
            .unwrap();
        let a01 = g.adjacency.at2(0, 1);
        for k in 0..5 {
            for s in 0..5 {
                if k != s {
                    assert!((g.adjacency.at2(k, s) - a01).abs() < 1e-12);
                }
            }
        }
        let w0 = g.node_weights[0];
        for &w in &g.node_weights {
            assert!((w - w0).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_frames_permutes_the_graph() {
        let mut r = rng(3);
        let attn = AttentionEncoderParams::new(&mut r, 4, 6);
        let t = 6;
        let base = random_embeddings(&mut r, t, 4);
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let mut permuted = vec![0.0; t * 4];
        for (new_row, &old_row) in perm.iter().enumerate() {
            permuted[new_row * 4..(new_row + 1) * 4]
                .copy_from_slice(&base.data()[old_row * 4..(old_row + 1) * 4]);
        }
        let g = attn.infer_graph(&embeddings_of(base)).unwrap();
        let gp = attn
            .infer_graph(&embeddings_of(Tensor::new(vec![t, 4], permuted).unwrap()))
            .unwrap();
        // A'[i,j] = A[perm[i], perm[j]], w'[i] = w[perm[i]]
        for i in 0..t {
            assert!((gp.node_weights[i] - g.node_weights[perm[i]]).abs() < 1e-5);
            for j in 0..t {
                assert!(
                    (gp.adjacency.at2(i, j) - g.adjacency.at2(perm[i], perm[j])).abs() < 1e-5,
                    "edge ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn rejects_single_frame_graphs() {
        let mut r = rng(4);
        let attn = AttentionEncoderParams::new(&mut r, 4, 6);
        let emb = embeddings_of(random_embeddings(&mut r, 1, 4));
        assert!(matches!(
            attn.infer_graph(&emb),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn every_embedding_influences_every_node_state() {
        // One message-passing round reaches the full graph: each node weight
        // must have nonzero gradient with respect to every input frame row.
        let mut r = rng(5);
        let attn = AttentionEncoderParams::new(&mut r, 3, 5);
        let t = 5;
        let x = Param::new("h0", random_embeddings(&mut r, t, 3), true);
        for s in 0..t {
            x.zero_grad();
            let (_, w) = attn.forward(&Var::param(&x), Mode::Eval).unwrap();
            let picked = w.slice_rows(s, s + 1).unwrap().sum_all().unwrap();
            picked.backward().unwrap();
            let g = x.grad();
            for k in 0..t {
                let row_norm: f64 = (0..3).map(|j| g.at2(k, j).abs()).sum();
                assert!(
                    row_norm > 1e-12,
                    "node {s} insensitive to frame {k}"
                );
            }
        }
    }

    #[test]
    fn edge_count_is_complete_directed() {
        let (from, to) = edge_lists(6);
        assert_eq!(from.len(), 30);
        assert!(from.iter().zip(to.iter()).all(|(a, b)| a != b));
        let mut r = rng(6);
        let attn = AttentionEncoderParams::new(&mut r, 4, 4);
        let g = attn
            .infer_graph(&embeddings_of(random_embeddings(&mut r, 6, 4)))
            .unwrap();
        let nonzero = (0..6)
            .flat_map(|k| (0..6).map(move |s| (k, s)))
            .filter(|&(k, s)| g.adjacency.at2(k, s) != 0.0)
            .count();
        assert_eq!(nonzero, 30);
    }

    #[test]
    fn stats_of_uniform_and_peaked_weights() {
        let mk = |w: Vec<f64>| {
            let t = w.len();
            EchoGraph {
                adjacency: Tensor::zeros(&[t, t]),
                node_weights: w,
                node_features: embeddings_of(Tensor::zeros(&[t, 2])),
            }
        };
        let uniform = graph_stats(&mk(vec![0.5; 8]));
        assert!((uniform.normalized_entropy - 1.0).abs() < 1e-12);

        let peaked = graph_stats(&mk(vec![0.999, 1e-9, 1e-9, 1e-9]));
        assert!(peaked.normalized_entropy < 0.01);

        let s = graph_stats(&mk(vec![0.9, 0.1, 0.1, 0.1]));
        assert!((s.max_w - s.mean_w - 0.6).abs() < 1e-12);
    }

    #[test]
    fn edge_histogram_counts_off_diagonal_entries() {
        let mut r = rng(7);
        let attn = AttentionEncoderParams::new(&mut r, 4, 4);
        let g = attn
            .infer_graph(&embeddings_of(random_embeddings(&mut r, 5, 4)))
            .unwrap();
        let stats = graph_stats(&g);
        assert_eq!(stats.edge_histogram.iter().sum::<usize>(), 20);
    }
}
