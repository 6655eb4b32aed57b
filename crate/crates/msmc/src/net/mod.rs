//! The graph autoencoder: per-scale two-channel GCN encoders, cross-scale
//! attention fusion on the base grid, block pooling back to each scale, and
//! inner-product edge decoders, trained against three losses (attention-
//! weighted fusion reconstruction, per-scale auxiliary reconstruction, and
//! soft parameter sharing between scale encoders).

mod forward;
mod gradcheck;
mod tape;
mod train;

pub use forward::{forward_reconstruct, prepare_snippet, NetOutputs, PreparedScale, PreparedSnippet};
pub use gradcheck::{
    check_coordinates, grad_check, random_graph_set, CoordCheck, GradCheckOptions, GradCheckReport,
};
pub use train::{fusion_losses, train, AdamState, EpochRecord, TrainOutcome, TrainSettings};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, EdgeChannel, MotionGraph};
use crate::grid::ScaleSpec;
use tape::{gather_rows, pool_rows, row_cosine, sigmoid, softmax_rows};

/// Weights of one GCN channel: two layers, widths 2 -> 2C -> C, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnChannelParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

/// One scale's encoder: a spatial-channel GCN and a temporal-channel GCN.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEncoderParams {
    pub spatial: GcnChannelParams,
    pub temporal: GcnChannelParams,
}

/// Attention projections shared across positions and scales, each 2C x 2C.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
}

/// All trainable tensors. Every scale's encoder has identical shapes, which
/// the soft-sharing loss depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// C: per-channel embedding width. Node embeddings are 2C wide.
    pub embed_dim: usize,
    pub scale_factors: Vec<usize>,
    pub encoders: Vec<ScaleEncoderParams>,
    pub attention: AttentionParams,
}

const NODE_FEATURES: usize = 2;

impl ModelParams {
    /// Seeded initialization, uniform in +-sqrt(6 / (fan_in + fan_out)) per
    /// tensor, tensors filled row-major in [`ModelParams::tensors`] order.
    pub fn init(embed_dim: usize, scale_factors: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = embed_dim;
        let mut mk = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        let encoders = scale_factors
            .iter()
            .map(|_| ScaleEncoderParams {
                spatial: GcnChannelParams {
                    w1: mk(NODE_FEATURES, 2 * c),
                    w2: mk(2 * c, c),
                },
                temporal: GcnChannelParams {
                    w1: mk(NODE_FEATURES, 2 * c),
                    w2: mk(2 * c, c),
                },
            })
            .collect();
        let attention = AttentionParams {
            w_query: mk(2 * c, 2 * c),
            w_key: mk(2 * c, 2 * c),
            w_value: mk(2 * c, 2 * c),
        };
        ModelParams {
            embed_dim,
            scale_factors: scale_factors.to_vec(),
            encoders,
            attention,
        }
    }

    /// Stable name/tensor enumeration: per scale (in configured order) the
    /// spatial then temporal channel weights, then the attention
    /// projections. Checkpoints, the optimizer, and gradient layouts all
    /// share this order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (enc, &s) in self.encoders.iter().zip(&self.scale_factors) {
            out.push((format!("scale{s}.spatial.w1"), &enc.spatial.w1));
            out.push((format!("scale{s}.spatial.w2"), &enc.spatial.w2));
            out.push((format!("scale{s}.temporal.w1"), &enc.temporal.w1));
            out.push((format!("scale{s}.temporal.w2"), &enc.temporal.w2));
        }
        out.push(("attention.w_query".into(), &self.attention.w_query));
        out.push(("attention.w_key".into(), &self.attention.w_key));
        out.push(("attention.w_value".into(), &self.attention.w_value));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (enc, &s) in self.encoders.iter_mut().zip(&self.scale_factors) {
            out.push((format!("scale{s}.spatial.w1"), &mut enc.spatial.w1));
            out.push((format!("scale{s}.spatial.w2"), &mut enc.spatial.w2));
            out.push((format!("scale{s}.temporal.w1"), &mut enc.temporal.w1));
            out.push((format!("scale{s}.temporal.w2"), &mut enc.temporal.w2));
        }
        out.push(("attention.w_query".into(), &mut self.attention.w_query));
        out.push(("attention.w_key".into(), &mut self.attention.w_key));
        out.push(("attention.w_value".into(), &mut self.attention.w_value));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim;
        if c == 0 {
            return Err(Error::InvalidConfig {
                field: "embed_dim".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.encoders.len() != self.scale_factors.len() {
            return Err(Error::ShapeMismatch {
                context: "ModelParams",
                expected: format!("{} encoders", self.scale_factors.len()),
                actual: format!("{}", self.encoders.len()),
            });
        }
        for (name, tensor) in self.tensors() {
            let expected = match name.as_str() {
                n if n.ends_with(".w1") => (NODE_FEATURES, 2 * c),
                n if n.ends_with(".w2") => (2 * c, c),
                _ => (2 * c, 2 * c),
            };
            if tensor.dim() != expected {
                return Err(Error::ShapeMismatch {
                    context: "ModelParams",
                    expected: format!("{name} as {expected:?}"),
                    actual: format!("{:?}", tensor.dim()),
                });
            }
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::Internal {
                    context: "ModelParams::validate",
                    reason: format!("non-finite value in {name}"),
                });
            }
        }
        Ok(())
    }
}

/// Loss weighting coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub fusion: f64,
    pub aux: f64,
    pub soft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            fusion: 1.0,
            aux: 1.0,
            soft: 1.0,
        }
    }
}

/// Every loss component of one forward pass, plus the weighted total.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub fusion: f64,
    /// Per scale, in configured order.
    pub aux: Vec<f64>,
    /// Per unordered scale pair (indices into the configured order).
    pub soft: Vec<((usize, usize), f64)>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossReport {
    pub fn new(
        fusion: f64,
        aux: Vec<f64>,
        soft: Vec<((usize, usize), f64)>,
        weights: LossWeights,
    ) -> Self {
        let total = weights.fusion * fusion
            + weights.aux * aux.iter().sum::<f64>()
            + weights.soft * soft.iter().map(|(_, v)| v).sum::<f64>();
        LossReport {
            fusion,
            aux,
            soft,
            weights,
            total,
        }
    }

    pub fn aux_sum(&self) -> f64 {
        self.aux.iter().sum()
    }

    pub fn soft_sum(&self) -> f64 {
        self.soft.iter().map(|(_, v)| v).sum()
    }
}

/// Encodes one graph: per channel h1 = relu(A_c X W1_c), h2 = A_c h1 W2_c,
/// output rows are [spatial | temporal] concatenations of width 2C.
pub fn gcn_forward(graph: &MotionGraph, enc: &ScaleEncoderParams) -> Result<Array2<f64>> {
    if enc.spatial.w1.nrows() != graph.node_features.ncols() {
        return Err(Error::ShapeMismatch {
            context: "gcn_forward",
            expected: format!("{} feature channels", enc.spatial.w1.nrows()),
            actual: format!("{}", graph.node_features.ncols()),
        });
    }
    for ch in [&enc.spatial, &enc.temporal] {
        if ch.w1.ncols() != ch.w2.nrows() {
            return Err(Error::ShapeMismatch {
                context: "gcn_forward",
                expected: format!("w2 rows = {}", ch.w1.ncols()),
                actual: format!("{}", ch.w2.nrows()),
            });
        }
    }
    let x = &graph.node_features;
    let mut halves = Vec::with_capacity(2);
    for (channel, ch) in [
        (EdgeChannel::Spatial, &enc.spatial),
        (EdgeChannel::Temporal, &enc.temporal),
    ] {
        let adj = normalized_adjacency(graph, channel);
        let h1 = adj.apply(x).dot(&ch.w1).mapv(|v| v.max(0.0));
        let h2 = adj.apply(&h1).dot(&ch.w2);
        halves.push(h2);
    }
    let (s, t) = (&halves[0], &halves[1]);
    let mut z = Array2::zeros((s.nrows(), s.ncols() + t.ncols()));
    z.slice_mut(ndarray::s![.., ..s.ncols()]).assign(s);
    z.slice_mut(ndarray::s![.., s.ncols()..]).assign(t);
    Ok(z)
}

/// Base-grid row index -> source row in the `spec`-scale grid (the region
/// that owns each base cell).
pub fn unpool_map(spec: &ScaleSpec) -> Vec<usize> {
    let mut map = Vec::with_capacity(spec.base_regions_w * spec.base_regions_h);
    for row in 0..spec.base_regions_h {
        for col in 0..spec.base_regions_w {
            let (sc, sr) = spec.region_of_base_cell(col, row);
            map.push(sr * spec.regions_w + sc);
        }
    }
    map
}

/// Inverse structure of [`unpool_map`]: for each `spec`-scale region, the
/// base-grid rows it covers.
pub fn pool_blocks(spec: &ScaleSpec) -> Vec<Vec<usize>> {
    let mut blocks = vec![Vec::new(); spec.node_count()];
    for (base_idx, &src) in unpool_map(spec).iter().enumerate() {
        blocks[src].push(base_idx);
    }
    blocks
}

/// Replicates each region's embedding onto the base cells it covers.
pub fn unpool_nearest(z: &Array2<f64>, spec: &ScaleSpec) -> Result<Array2<f64>> {
    if z.nrows() != spec.node_count() {
        return Err(Error::ShapeMismatch {
            context: "unpool_nearest",
            expected: format!("{} rows", spec.node_count()),
            actual: format!("{}", z.nrows()),
        });
    }
    Ok(gather_rows(z, &unpool_map(spec)))
}

/// Block mean from the base grid back to the `spec`-scale grid; partial edge
/// blocks average their actual members.
pub fn pool_to_scale(x: &Array2<f64>, spec: &ScaleSpec) -> Result<Array2<f64>> {
    let base = spec.base_regions_w * spec.base_regions_h;
    if x.nrows() != base {
        return Err(Error::ShapeMismatch {
            context: "pool_to_scale",
            expected: format!("{base} rows"),
            actual: format!("{}", x.nrows()),
        });
    }
    Ok(pool_rows(x, &pool_blocks(spec)))
}

/// Cross-scale attention fusion on the base grid. Returns
/// (fused embeddings, normalized weights n x S, raw logits n x S). The logit
/// of scale s at a position is the cosine of the query- and key-projected
/// unified embedding; a projected norm under 1e-12 yields logit 0.
pub fn attention_fuse(
    unified: &[Array2<f64>],
    attn: &AttentionParams,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if unified.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "attention_fuse",
            expected: "at least one scale".into(),
            actual: "0".into(),
        });
    }
    let n = unified[0].nrows();
    let width = unified[0].ncols();
    for z in unified {
        if z.nrows() != n || z.ncols() != width {
            return Err(Error::ShapeMismatch {
                context: "attention_fuse",
                expected: format!("{n}x{width}"),
                actual: format!("{}x{}", z.nrows(), z.ncols()),
            });
        }
    }
    if attn.w_query.nrows() != width {
        return Err(Error::ShapeMismatch {
            context: "attention_fuse",
            expected: format!("projection rows {width}"),
            actual: format!("{}", attn.w_query.nrows()),
        });
    }
    let s_count = unified.len();
    let mut logits = Array2::zeros((n, s_count));
    for (s, z) in unified.iter().enumerate() {
        let q = z.dot(&attn.w_query);
        let k = z.dot(&attn.w_key);
        let col = row_cosine(&q, &k);
        for r in 0..n {
            logits[[r, s]] = col[[r, 0]];
        }
    }
    let weights = softmax_rows(&logits);
    let mut fused = Array2::zeros((n, attn.w_value.ncols()));
    for (s, z) in unified.iter().enumerate() {
        let v = z.dot(&attn.w_value);
        for r in 0..n {
            let w = weights[[r, s]];
            for c in 0..fused.ncols() {
                fused[[r, c]] += w * v[[r, c]];
            }
        }
    }
    Ok((fused, weights, logits))
}

/// Inner-product edge decoder: the spatial channel from the first half of
/// each embedding, the temporal channel from the second half, both squashed
/// by the logistic function. Output is edges x 2.
pub fn decode_edges(z: &Array2<f64>, edges: &[(usize, usize)]) -> Result<Array2<f64>> {
    if z.ncols() % 2 != 0 {
        return Err(Error::ShapeMismatch {
            context: "decode_edges",
            expected: "even embedding width".into(),
            actual: format!("{}", z.ncols()),
        });
    }
    let c = z.ncols() / 2;
    let mut out = Array2::zeros((edges.len(), 2));
    for (e, &(i, j)) in edges.iter().enumerate() {
        if i >= z.nrows() || j >= z.nrows() {
            return Err(Error::ShapeMismatch {
                context: "decode_edges",
                expected: format!("node indices < {}", z.nrows()),
                actual: format!("edge ({i},{j})"),
            });
        }
        let (zi, zj) = (z.row(i), z.row(j));
        let mut dot_s = 0.0;
        let mut dot_t = 0.0;
        for k in 0..c {
            dot_s += zi[k] * zj[k];
            dot_t += zi[c + k] * zj[c + k];
        }
        out[[e, 0]] = sigmoid(dot_s);
        out[[e, 1]] = sigmoid(dot_t);
    }
    Ok(out)
}

/// One scale's contribution to the fusion loss.
pub struct FusionLossTerm<'a> {
    /// Mapped edge targets, edges x 2.
    pub targets: &'a Array2<f64>,
    /// Fusion-path reconstruction, edges x 2.
    pub recon: &'a Array2<f64>,
    pub edges: &'a [(usize, usize)],
    /// Pooled attention column, nodes x 1.
    pub pooled_attention: &'a Array2<f64>,
    pub node_count: usize,
}

/// Attention-weighted reconstruction loss: per scale the mean-per-node sum
/// over edges of `a_i * a_j * ||target - recon||_2` (Euclidean over the two
/// channels, not squared).
pub fn fusion_loss(terms: &[FusionLossTerm]) -> f64 {
    let mut total = 0.0;
    for term in terms {
        let mut scale_sum = 0.0;
        for (e, &(i, j)) in term.edges.iter().enumerate() {
            let ds = term.targets[[e, 0]] - term.recon[[e, 0]];
            let dt = term.targets[[e, 1]] - term.recon[[e, 1]];
            let dist = (ds * ds + dt * dt).sqrt();
            scale_sum += term.pooled_attention[[i, 0]] * term.pooled_attention[[j, 0]] * dist;
        }
        total += scale_sum / term.node_count as f64;
    }
    total
}

/// Unweighted reconstruction loss of one scale's auxiliary path.
pub fn aux_loss(targets: &Array2<f64>, recon: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for e in 0..targets.nrows() {
        let ds = targets[[e, 0]] - recon[[e, 0]];
        let dt = targets[[e, 1]] - recon[[e, 1]];
        total += (ds * ds + dt * dt).sqrt();
    }
    total
}

/// Euclidean distances between flattened encoder parameter sets, one value
/// per unordered scale pair in configured order.
pub fn soft_sharing_pairs(params: &ModelParams) -> Vec<((usize, usize), f64)> {
    let s = params.encoders.len();
    let mut out = Vec::new();
    for a in 0..s {
        for b in (a + 1)..s {
            let mut sq = 0.0;
            for (ta, tb) in encoder_tensors(&params.encoders[a])
                .into_iter()
                .zip(encoder_tensors(&params.encoders[b]))
            {
                for (x, y) in ta.iter().zip(tb.iter()) {
                    let d = x - y;
                    sq += d * d;
                }
            }
            out.push(((a, b), sq.sqrt()));
        }
    }
    out
}

/// Total soft-sharing loss over all unordered scale pairs.
pub fn soft_sharing_loss(params: &ModelParams) -> f64 {
    soft_sharing_pairs(params).iter().map(|(_, v)| v).sum()
}

fn encoder_tensors(enc: &ScaleEncoderParams) -> [&Array2<f64>; 4] {
    [
        &enc.spatial.w1,
        &enc.spatial.w2,
        &enc.temporal.w1,
        &enc.temporal.w2,
    ]
}

/// Analytic gradient of `soft * soft_sharing_loss` in
/// [`ModelParams::tensors`] layout (attention entries stay zero). The
/// gradient of each pair distance is `(W_a - W_b) / ||...||`, with
/// subgradient 0 at zero distance.
pub(crate) fn soft_sharing_grads(params: &ModelParams, soft_weight: f64) -> Vec<Array2<f64>> {
    let mut grads: Vec<Array2<f64>> = params
        .tensors()
        .iter()
        .map(|(_, t)| Array2::zeros(t.raw_dim()))
        .collect();
    let s = params.encoders.len();
    for a in 0..s {
        for b in (a + 1)..s {
            let mut sq = 0.0;
            for (ta, tb) in encoder_tensors(&params.encoders[a])
                .into_iter()
                .zip(encoder_tensors(&params.encoders[b]))
            {
                for (x, y) in ta.iter().zip(tb.iter()) {
                    let d = x - y;
                    sq += d * d;
                }
            }
            let norm = sq.sqrt();
            if norm == 0.0 {
                continue;
            }
            let k = soft_weight / norm;
            for t in 0..4 {
                let ta = encoder_tensors(&params.encoders[a])[t];
                let tb = encoder_tensors(&params.encoders[b])[t];
                let diff = (ta - tb).mapv(|v| v * k);
                grads[4 * a + t] = &grads[4 * a + t] + &diff;
                grads[4 * b + t] = &grads[4 * b + t] - &diff;
            }
        }
    }
    grads
}

/// Losses of one snippet under the current parameters: the tape forward for
/// the data terms plus the parameter-space soft-sharing terms.
pub fn snippet_loss_report(
    params: &ModelParams,
    snippet: &PreparedSnippet,
    weights: &LossWeights,
) -> Result<LossReport> {
    let pass = forward::run_pass(params, snippet)?;
    let fusion = pass.fusion_value();
    let aux = pass.aux_values();
    Ok(LossReport::new(
        fusion,
        aux,
        soft_sharing_pairs(params),
        *weights,
    ))
}
