//! Snippet preparation and the differentiable forward pass. A prepared
//! snippet freezes everything the network consumes (features, adjacencies,
//! edge targets, pooling index maps) so passes over it are cheap and safe to
//! run from worker threads.

use std::sync::Arc;

use ndarray::Array2;

use super::tape::Tape;
use super::{pool_blocks, unpool_map, LossWeights, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, EdgeChannel, MultiScaleGraphSet, NormalizedAdjacency};
use crate::grid::ScaleSpec;

/// One scale of a prepared snippet.
#[derive(Clone, Debug)]
pub struct PreparedScale {
    pub spec: ScaleSpec,
    /// nodes x 2 consistency features.
    pub node_features: Array2<f64>,
    pub adj_spatial: Arc<NormalizedAdjacency>,
    pub adj_temporal: Arc<NormalizedAdjacency>,
    pub edges: Arc<Vec<(usize, usize)>>,
    /// First endpoint of each edge, aligned with `edges`.
    pub edges_i: Arc<Vec<usize>>,
    /// Second endpoint of each edge, aligned with `edges`.
    pub edges_j: Arc<Vec<usize>>,
    /// Mapped edge-consistency targets, edges x 2.
    pub targets: Array2<f64>,
    /// Base-grid row -> owning region row at this scale.
    pub unpool: Arc<Vec<usize>>,
    /// Region row at this scale -> covered base-grid rows.
    pub blocks: Arc<Vec<Vec<usize>>>,
}

/// A snippet's multi-scale graphs in network-ready form.
#[derive(Clone, Debug)]
pub struct PreparedSnippet {
    pub end_frame: usize,
    /// Node count of the base grid every scale unpools onto.
    pub base_nodes: usize,
    pub scales: Vec<PreparedScale>,
}

pub fn prepare_snippet(set: &MultiScaleGraphSet) -> Result<PreparedSnippet> {
    if set.graphs.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "prepare_snippet",
            expected: "at least one scale graph".into(),
            actual: "0".into(),
        });
    }
    let base = &set.graphs[0].spec;
    for g in &set.graphs {
        if g.spec.base_regions_w != base.base_regions_w
            || g.spec.base_regions_h != base.base_regions_h
        {
            return Err(Error::ShapeMismatch {
                context: "prepare_snippet",
                expected: format!("base grid {}x{}", base.base_regions_w, base.base_regions_h),
                actual: format!("{}x{}", g.spec.base_regions_w, g.spec.base_regions_h),
            });
        }
    }
    let scales = set
        .graphs
        .iter()
        .map(|g| PreparedScale {
            spec: g.spec.clone(),
            node_features: g.node_features.clone(),
            adj_spatial: Arc::new(normalized_adjacency(g, EdgeChannel::Spatial)),
            adj_temporal: Arc::new(normalized_adjacency(g, EdgeChannel::Temporal)),
            edges_i: Arc::new(g.edges.iter().map(|&(i, _)| i).collect()),
            edges_j: Arc::new(g.edges.iter().map(|&(_, j)| j).collect()),
            edges: Arc::new(g.edges.clone()),
            targets: g.edge_mapped.clone(),
            unpool: Arc::new(unpool_map(&g.spec)),
            blocks: Arc::new(pool_blocks(&g.spec)),
        })
        .collect();
    Ok(PreparedSnippet {
        end_frame: set.end_frame,
        base_nodes: base.base_regions_w * base.base_regions_h,
        scales,
    })
}

/// Every intermediate and output of one forward pass, per-scale vectors in
/// configured scale order.
#[derive(Clone, Debug)]
pub struct NetOutputs {
    /// Scale-level embeddings z, nodes x 2C.
    pub embeddings: Vec<Array2<f64>>,
    /// Embeddings unpooled onto the base grid, base nodes x 2C.
    pub unified: Vec<Array2<f64>>,
    /// Raw attention logits, base nodes x scales.
    pub attention_logits: Array2<f64>,
    /// Softmax-normalized attention, base nodes x scales; rows sum to 1.
    pub attention: Array2<f64>,
    /// Fused embedding on the base grid, base nodes x 2C.
    pub fused: Array2<f64>,
    /// Fused embedding pooled back to each scale, nodes x 2C.
    pub pooled_fused: Vec<Array2<f64>>,
    /// Attention pooled back to each scale, nodes x 1.
    pub pooled_attention: Vec<Array2<f64>>,
    /// Fusion-path edge reconstructions, edges x 2.
    pub fused_recon: Vec<Array2<f64>>,
    /// Auxiliary-path edge reconstructions, edges x 2.
    pub aux_recon: Vec<Array2<f64>>,
}

struct OutputIds {
    embeddings: Vec<usize>,
    unified: Vec<usize>,
    logits: usize,
    attention: usize,
    fused: usize,
    pooled_fused: Vec<usize>,
    pooled_attention: Vec<usize>,
    fused_recon: Vec<usize>,
    aux_recon: Vec<usize>,
}

/// A completed forward pass with its tape retained for backprop.
pub(crate) struct Pass {
    tape: Tape,
    /// Leaf ids aligned with [`ModelParams::tensors`] order.
    param_ids: Vec<usize>,
    fusion_id: usize,
    aux_ids: Vec<usize>,
    ids: OutputIds,
}

impl Pass {
    pub fn fusion_value(&self) -> f64 {
        self.tape.value(self.fusion_id)[[0, 0]]
    }

    pub fn aux_values(&self) -> Vec<f64> {
        self.aux_ids
            .iter()
            .map(|&id| self.tape.value(id)[[0, 0]])
            .collect()
    }

    pub fn outputs(&self) -> NetOutputs {
        let v = |id: usize| self.tape.value(id).clone();
        let vs = |ids: &[usize]| ids.iter().map(|&id| v(id)).collect();
        NetOutputs {
            embeddings: vs(&self.ids.embeddings),
            unified: vs(&self.ids.unified),
            attention_logits: v(self.ids.logits),
            attention: v(self.ids.attention),
            fused: v(self.ids.fused),
            pooled_fused: vs(&self.ids.pooled_fused),
            pooled_attention: vs(&self.ids.pooled_attention),
            fused_recon: vs(&self.ids.fused_recon),
            aux_recon: vs(&self.ids.aux_recon),
        }
    }

    /// Weighted data loss (fusion + auxiliary terms, soft sharing excluded)
    /// and its gradient per parameter tensor in [`ModelParams::tensors`]
    /// order.
    pub fn data_grads(&mut self, weights: &LossWeights) -> (f64, Vec<Array2<f64>>) {
        let f = self.tape.scale(self.fusion_id, weights.fusion);
        let mut aux = self.aux_ids[0];
        for &id in &self.aux_ids[1..] {
            aux = self.tape.add(aux, id);
        }
        let aux = self.tape.scale(aux, weights.aux);
        let root = self.tape.add(f, aux);
        let loss = self.tape.value(root)[[0, 0]];
        let grads = self.tape.backward(root);
        (
            loss,
            self.param_ids.iter().map(|&id| grads[id].clone()).collect(),
        )
    }
}

/// Builds the full differentiable pass: per-scale GCN encoders, unpooling,
/// cross-scale attention fusion, per-scale pooling, both decoder paths, and
/// the fusion/auxiliary loss nodes.
pub(crate) fn run_pass(params: &ModelParams, snippet: &PreparedSnippet) -> Result<Pass> {
    params.validate()?;
    if params.encoders.len() != snippet.scales.len() {
        return Err(Error::ShapeMismatch {
            context: "run_pass",
            expected: format!("{} scales", params.encoders.len()),
            actual: format!("{}", snippet.scales.len()),
        });
    }
    for (scale, &factor) in snippet.scales.iter().zip(&params.scale_factors) {
        if scale.spec.scale_factor != factor {
            return Err(Error::ShapeMismatch {
                context: "run_pass",
                expected: format!("scale factor {factor}"),
                actual: format!("{}", scale.spec.scale_factor),
            });
        }
        if scale.node_features.ncols() != params.encoders[0].spatial.w1.nrows() {
            return Err(Error::ShapeMismatch {
                context: "run_pass",
                expected: format!("{} node features", params.encoders[0].spatial.w1.nrows()),
                actual: format!("{}", scale.node_features.ncols()),
            });
        }
    }

    let c = params.embed_dim;
    let mut tape = Tape::new();
    let mut param_ids = Vec::with_capacity(4 * params.encoders.len() + 3);
    for enc in &params.encoders {
        param_ids.push(tape.leaf(enc.spatial.w1.clone()));
        param_ids.push(tape.leaf(enc.spatial.w2.clone()));
        param_ids.push(tape.leaf(enc.temporal.w1.clone()));
        param_ids.push(tape.leaf(enc.temporal.w2.clone()));
    }
    let wq = tape.leaf(params.attention.w_query.clone());
    let wk = tape.leaf(params.attention.w_key.clone());
    let wv = tape.leaf(params.attention.w_value.clone());
    param_ids.extend([wq, wk, wv]);

    // Encoders, unpooling, and per-scale attention ingredients.
    let mut embeddings = Vec::new();
    let mut unified = Vec::new();
    let mut logit_cols = Vec::new();
    let mut values = Vec::new();
    for (sidx, scale) in snippet.scales.iter().enumerate() {
        let x = tape.leaf(scale.node_features.clone());
        let p = &param_ids[4 * sidx..4 * sidx + 4];
        let mut halves = Vec::with_capacity(2);
        for (adj, w1, w2) in [
            (&scale.adj_spatial, p[0], p[1]),
            (&scale.adj_temporal, p[2], p[3]),
        ] {
            let ax = tape.sp_apply(adj.clone(), x);
            let xw = tape.matmul(ax, w1);
            let h1 = tape.relu(xw);
            let ah = tape.sp_apply(adj.clone(), h1);
            halves.push(tape.matmul(ah, w2));
        }
        let z = tape.concat_cols(halves[0], halves[1]);
        embeddings.push(z);
        let zt = tape.gather(z, scale.unpool.clone());
        unified.push(zt);
        let q = tape.matmul(zt, wq);
        let k = tape.matmul(zt, wk);
        logit_cols.push(tape.row_cosine(q, k));
        values.push(tape.matmul(zt, wv));
    }

    // Softmax over scales at every base position, then the weighted blend.
    let mut logits = logit_cols[0];
    for &col in &logit_cols[1..] {
        logits = tape.concat_cols(logits, col);
    }
    let attention = tape.softmax_rows(logits);
    let mut attn_cols = Vec::with_capacity(values.len());
    let mut fused = None;
    for (s, &v) in values.iter().enumerate() {
        let w_col = tape.slice_cols(attention, s, s + 1);
        attn_cols.push(w_col);
        let contrib = tape.scale_rows(v, w_col);
        fused = Some(match fused {
            None => contrib,
            Some(prev) => tape.add(prev, contrib),
        });
    }
    let fused = fused.expect("at least one scale");

    // Pool the fused embedding and attention back to each scale and decode
    // both paths; accumulate the two data losses.
    let decode = |tape: &mut Tape, z: usize, scale: &PreparedScale| {
        let zi = tape.gather(z, scale.edges_i.clone());
        let zj = tape.gather(z, scale.edges_j.clone());
        let mut chans = Vec::with_capacity(2);
        for (start, end) in [(0, c), (c, 2 * c)] {
            let hi = tape.slice_cols(zi, start, end);
            let hj = tape.slice_cols(zj, start, end);
            let prod = tape.mul(hi, hj);
            let dot = tape.row_sum(prod);
            chans.push(tape.sigmoid(dot));
        }
        tape.concat_cols(chans[0], chans[1])
    };

    let mut pooled_fused = Vec::new();
    let mut pooled_attention = Vec::new();
    let mut fused_recon = Vec::new();
    let mut aux_recon = Vec::new();
    let mut fusion_total = None;
    let mut aux_ids = Vec::new();
    for (s, scale) in snippet.scales.iter().enumerate() {
        let pf = tape.pool_mean(fused, scale.blocks.clone());
        let pa = tape.pool_mean(attn_cols[s], scale.blocks.clone());
        pooled_fused.push(pf);
        pooled_attention.push(pa);

        let recon = decode(&mut tape, pf, scale);
        fused_recon.push(recon);
        let recon_aux = decode(&mut tape, embeddings[s], scale);
        aux_recon.push(recon_aux);

        let tgt = tape.leaf(scale.targets.clone());
        let diff = tape.sub(tgt, recon);
        let dist = tape.row_norm(diff);
        let ai = tape.gather(pa, scale.edges_i.clone());
        let aj = tape.gather(pa, scale.edges_j.clone());
        let pair = tape.mul(ai, aj);
        let weighted = tape.mul(pair, dist);
        let sum = tape.sum_all(weighted);
        let term = tape.scale(sum, 1.0 / scale.spec.node_count() as f64);
        fusion_total = Some(match fusion_total {
            None => term,
            Some(prev) => tape.add(prev, term),
        });

        let diff_aux = tape.sub(tgt, recon_aux);
        let dist_aux = tape.row_norm(diff_aux);
        aux_ids.push(tape.sum_all(dist_aux));
    }

    Ok(Pass {
        fusion_id: fusion_total.expect("at least one scale"),
        aux_ids,
        ids: OutputIds {
            embeddings,
            unified,
            logits,
            attention,
            fused,
            pooled_fused,
            pooled_attention,
            fused_recon,
            aux_recon,
        },
        param_ids,
        tape,
    })
}

/// Runs the forward pass and returns every intermediate and output.
pub fn forward_reconstruct(params: &ModelParams, snippet: &PreparedSnippet) -> Result<NetOutputs> {
    Ok(run_pass(params, snippet)?.outputs())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::consistency::{ConsistencyParams, FrameGrids};
    use crate::flow::{FlowSequence, Velocity};
    use crate::graph::build_msmc;
    use crate::grid::build_scale_specs;
    use crate::net::{
        attention_fuse, aux_loss, decode_edges, fusion_loss, gcn_forward, pool_to_scale,
        snippet_loss_report, soft_sharing_grads, unpool_nearest, AttentionParams, FusionLossTerm,
        GcnChannelParams, ScaleEncoderParams,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_flow_snippet(
        w: usize,
        h: usize,
        factors: &[usize],
        seed: u64,
    ) -> PreparedSnippet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 6;
        let frames = (0..m)
            .map(|_| {
                (0..w * h)
                    .map(|_| Velocity::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                    .collect()
            })
            .collect();
        let flow = FlowSequence::new(w, h, frames).unwrap();
        let specs = build_scale_specs(w, h, 8.0, factors).unwrap();
        let grids = FrameGrids::compute(&flow, &specs).unwrap();
        let window = grids.window(&flow, m, 1, m - 1).unwrap();
        let set = build_msmc(&window, &specs, &ConsistencyParams::default()).unwrap();
        prepare_snippet(&set).unwrap()
    }

    #[test]
    fn prepared_snippet_geometry() {
        let snip = random_flow_snippet(32, 32, &[1, 2, 4], 1);
        assert_eq!(snip.base_nodes, 16);
        assert_eq!(snip.scales.len(), 3);
        assert_eq!(snip.scales[0].unpool.len(), 16);
        assert_eq!(snip.scales[2].blocks.len(), 1);
        assert_eq!(snip.scales[2].blocks[0].len(), 16);
        // Edge endpoint arrays stay aligned with the edge list.
        for scale in &snip.scales {
            assert_eq!(scale.edges.len(), scale.edges_i.len());
            for (k, &(i, j)) in scale.edges.iter().enumerate() {
                assert_eq!(scale.edges_i[k], i);
                assert_eq!(scale.edges_j[k], j);
            }
            assert_eq!(scale.targets.nrows(), scale.edges.len());
        }
    }

    #[test]
    fn zero_params_produce_neutral_outputs() {
        let snip = random_flow_snippet(32, 32, &[1, 2], 2);
        let zero = GcnChannelParams {
            w1: Array2::zeros((2, 6)),
            w2: Array2::zeros((6, 3)),
        };
        let params = ModelParams {
            embed_dim: 3,
            scale_factors: vec![1, 2],
            encoders: vec![
                ScaleEncoderParams {
                    spatial: zero.clone(),
                    temporal: zero.clone(),
                },
                ScaleEncoderParams {
                    spatial: zero.clone(),
                    temporal: zero.clone(),
                },
            ],
            attention: AttentionParams {
                w_query: Array2::zeros((6, 6)),
                w_key: Array2::zeros((6, 6)),
                w_value: Array2::zeros((6, 6)),
            },
        };
        let out = forward_reconstruct(&params, &snip).unwrap();
        assert!(out.embeddings.iter().all(|z| z.iter().all(|&v| v == 0.0)));
        assert!(out.attention_logits.iter().all(|&v| v == 0.0));
        // Zero logits are equal logits: exactly uniform attention.
        assert!(out.attention.iter().all(|&a| a == 0.5));
        assert!(out.fused.iter().all(|&v| v == 0.0));
        // Zero embeddings decode to sigmoid(0) on both channels.
        for recon in out.fused_recon.iter().chain(out.aux_recon.iter()) {
            assert!(recon.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let snip = random_flow_snippet(40, 24, &[1, 2, 4], 3);
        let params = ModelParams::init(5, &[1, 2, 4], 3);
        let out = forward_reconstruct(&params, &snip).unwrap();
        assert_eq!(out.attention.dim(), (snip.base_nodes, 3));
        for r in 0..out.attention.nrows() {
            let sum: f64 = (0..3).map(|s| out.attention[[r, s]]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for s in 0..3 {
                assert!(out.attention[[r, s]] > 0.0);
            }
        }
        // Logits are cosines: all within [-1, 1].
        assert!(out.attention_logits.iter().all(|&l| (-1.0..=1.0).contains(&l)));
    }

    #[test]
    fn pass_matches_pure_op_pipeline() {
        let snip = random_flow_snippet(32, 32, &[1, 2, 4], 4);
        let params = ModelParams::init(4, &[1, 2, 4], 5);

        // Rebuild the graphs the snippet was prepared from to feed the pure
        // ops, which take MotionGraph directly.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 6;
        let frames = (0..m)
            .map(|_| {
                (0..32 * 32)
                    .map(|_| Velocity::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                    .collect()
            })
            .collect();
        let flow = FlowSequence::new(32, 32, frames).unwrap();
        let specs = build_scale_specs(32, 32, 8.0, &[1, 2, 4]).unwrap();
        let grids = FrameGrids::compute(&flow, &specs).unwrap();
        let window = grids.window(&flow, m, 1, m - 1).unwrap();
        let set = build_msmc(&window, &specs, &ConsistencyParams::default()).unwrap();

        let out = forward_reconstruct(&params, &snip).unwrap();

        let mut unified = Vec::new();
        for (g, enc) in set.graphs.iter().zip(&params.encoders) {
            let z = gcn_forward(g, enc).unwrap();
            unified.push(unpool_nearest(&z, &g.spec).unwrap());
        }
        let (fused, attn, logits) = attention_fuse(&unified, &params.attention).unwrap();
        let close = |a: &Array2<f64>, b: &Array2<f64>| {
            assert_eq!(a.dim(), b.dim());
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        };
        close(&out.fused, &fused);
        close(&out.attention, &attn);
        close(&out.attention_logits, &logits);

        let mut fusion_terms = Vec::new();
        let mut pooled_fused = Vec::new();
        let mut pooled_attn = Vec::new();
        for (s, g) in set.graphs.iter().enumerate() {
            pooled_fused.push(pool_to_scale(&fused, &g.spec).unwrap());
            let col = attn.slice(ndarray::s![.., s..s + 1]).to_owned();
            pooled_attn.push(pool_to_scale(&col, &g.spec).unwrap());
        }
        for (s, g) in set.graphs.iter().enumerate() {
            let recon = decode_edges(&pooled_fused[s], &g.edges).unwrap();
            close(&out.fused_recon[s], &recon);
            let recon_aux =
                decode_edges(&gcn_forward(g, &params.encoders[s]).unwrap(), &g.edges).unwrap();
            close(&out.aux_recon[s], &recon_aux);
            close(&out.pooled_fused[s], &pooled_fused[s]);
            close(&out.pooled_attention[s], &pooled_attn[s]);
        }

        // Loss values agree with the pure implementations.
        let mut pass = run_pass(&params, &snip).unwrap();
        for (s, g) in set.graphs.iter().enumerate() {
            fusion_terms.push(FusionLossTerm {
                targets: &g.edge_mapped,
                recon: &out.fused_recon[s],
                edges: &g.edges,
                pooled_attention: &pooled_attn[s],
                node_count: g.node_count(),
            });
            let aux_direct = aux_loss(&g.edge_mapped, &out.aux_recon[s]);
            assert!((pass.aux_values()[s] - aux_direct).abs() < 1e-12);
        }
        assert!((pass.fusion_value() - fusion_loss(&fusion_terms)).abs() < 1e-12);

        // And the report's weighted total decomposes the same way.
        let weights = LossWeights {
            fusion: 0.7,
            aux: 1.3,
            soft: 0.9,
        };
        let report = snippet_loss_report(&params, &snip, &weights).unwrap();
        let expected = 0.7 * pass.fusion_value()
            + 1.3 * pass.aux_values().iter().sum::<f64>()
            + 0.9 * report.soft_sum();
        assert!((report.total - expected).abs() < 1e-12);
        let (data_loss, _) = pass.data_grads(&weights);
        assert!(
            (data_loss - (0.7 * pass.fusion_value() + 1.3 * pass.aux_values().iter().sum::<f64>()))
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn single_scale_fusion_differs_from_aux_only_by_value_projection() {
        let snip = random_flow_snippet(24, 24, &[1], 6);
        let mut params = ModelParams::init(4, &[1], 7);
        params.attention.w_value = Array2::eye(8);
        let out = forward_reconstruct(&params, &snip).unwrap();
        // One scale: attention is identically 1 and, with W_val = I, the
        // fused pipeline replays the auxiliary one exactly.
        assert!(out.attention.iter().all(|&a| a == 1.0));
        assert_eq!(out.fused_recon[0], out.aux_recon[0]);
        assert_eq!(out.fused, out.unified[0]);
    }

    #[test]
    fn data_grads_match_finite_differences() {
        let snip = random_flow_snippet(32, 32, &[1, 2], 8);
        let params = ModelParams::init(3, &[1, 2], 9);
        let weights = LossWeights {
            fusion: 1.0,
            aux: 0.5,
            soft: 0.0,
        };
        let mut pass = run_pass(&params, &snip).unwrap();
        let (_, grads) = pass.data_grads(&weights);

        let loss_at = |p: &ModelParams| {
            let mut pass = run_pass(p, &snip).unwrap();
            pass.data_grads(&weights).0
        };
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (t, (_, tensor)) in params.tensors().iter().enumerate() {
            for _ in 0..3 {
                let r = rng.random_range(0..tensor.nrows());
                let c = rng.random_range(0..tensor.ncols());
                let mut plus = params.clone();
                plus.tensors_mut()[t].1[[r, c]] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t].1[[r, c]] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let got = grads[t][[r, c]];
                let denom = numeric.abs().max(got.abs()).max(1e-8);
                assert!(
                    ((numeric - got) / denom).abs() < 1e-4,
                    "tensor {t} [{r},{c}]: numeric {numeric} vs analytic {got}"
                );
            }
        }
        // Adding the analytic soft-sharing gradient completes the total
        // objective's gradient; spot-check one encoder coordinate.
        let full_weights = LossWeights {
            fusion: 1.0,
            aux: 0.5,
            soft: 2.0,
        };
        let soft = soft_sharing_grads(&params, full_weights.soft);
        let total_at = |p: &ModelParams| {
            snippet_loss_report(p, &snip, &full_weights).unwrap().total
        };
        let mut plus = params.clone();
        plus.tensors_mut()[1].1[[0, 0]] += h;
        let mut minus = params.clone();
        minus.tensors_mut()[1].1[[0, 0]] -= h;
        let numeric = (total_at(&plus) - total_at(&minus)) / (2.0 * h);
        let got = grads[1][[0, 0]] + soft[1][[0, 0]];
        assert!((numeric - got).abs() / numeric.abs().max(got.abs()).max(1e-8) < 1e-4);
    }

    #[test]
    fn mismatched_scale_count_is_rejected() {
        let snip = random_flow_snippet(32, 32, &[1, 2], 11);
        let params = ModelParams::init(3, &[1, 2, 4], 11);
        assert!(run_pass(&params, &snip).is_err());
        let params = ModelParams::init(3, &[2, 1], 11);
        assert!(run_pass(&params, &snip).is_err());
    }
}
