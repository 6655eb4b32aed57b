//! Central-difference verification of the analytic gradient of the full
//! training objective (fusion + auxiliary + soft-sharing terms).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{run_pass, PreparedSnippet};
use super::{snippet_loss_report, soft_sharing_grads, LossWeights, ModelParams};
use crate::consistency::ConsistencySnapshot;
use crate::error::{Error, Result};
use crate::graph::{build_graph, MultiScaleGraphSet};
use crate::grid::{grid_edges, Connectivity, ScaleSpec};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Minimum number of coordinates to check, spread evenly over tensors.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    /// Relative error bound for a coordinate to pass.
    pub rel_tol: f64,
    /// Both gradients under this magnitude pass outright; the relative
    /// criterion is meaningless near zero.
    pub abs_tol: f64,
    pub weights: LossWeights,
    /// Seeds the coordinate sampler.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 200,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Outcome of one checked coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub failures: usize,
}

impl GradCheckReport {
    /// Converts a failed report into [`Error::GradCheckFailed`].
    pub fn into_result(self) -> Result<GradCheckReport> {
        if self.failures > 0 {
            Err(Error::GradCheckFailed {
                failures: self.failures,
                checked: self.checks.len(),
            })
        } else {
            Ok(self)
        }
    }
}

/// Verifies sampled coordinates of the analytic objective gradient against
/// central differences. The report lists every coordinate checked; use
/// [`GradCheckReport::into_result`] to turn failures into an error.
pub fn grad_check(
    params: &ModelParams,
    snippet: &PreparedSnippet,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut pass = run_pass(params, snippet)?;
    let (_, mut grads) = pass.data_grads(&options.weights);
    for (g, s) in grads
        .iter_mut()
        .zip(soft_sharing_grads(params, options.weights.soft))
    {
        *g = &*g + &s;
    }
    let coords = sample_coords(params, options);
    let checks = check_coordinates(params, snippet, options, &coords, &grads)?;
    let failures = checks.iter().filter(|c| !c.pass).count();
    Ok(GradCheckReport { checks, failures })
}

/// Spreads at least `options.samples` coordinate picks evenly over tensors,
/// without replacement inside each tensor.
fn sample_coords(params: &ModelParams, options: &GradCheckOptions) -> Vec<(usize, usize, usize)> {
    let tensors = params.tensors();
    let per_tensor = options.samples.div_ceil(tensors.len());
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut coords = Vec::new();
    for (t, (_, tensor)) in tensors.iter().enumerate() {
        let cells = tensor.len();
        let take = per_tensor.min(cells);
        for flat in rand::seq::index::sample(&mut rng, cells, take) {
            coords.push((t, flat / tensor.ncols(), flat % tensor.ncols()));
        }
    }
    coords
}

/// Compares the given analytic gradient against central differences at the
/// listed coordinates. Exposed separately so a deliberately corrupted
/// gradient can be shown to fail.
pub fn check_coordinates(
    params: &ModelParams,
    snippet: &PreparedSnippet,
    options: &GradCheckOptions,
    coords: &[(usize, usize, usize)],
    analytic: &[Array2<f64>],
) -> Result<Vec<CoordCheck>> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut checks = Vec::with_capacity(coords.len());
    for &(t, r, c) in coords {
        let mut plus = params.clone();
        plus.tensors_mut()[t].1[[r, c]] += options.step;
        let mut minus = params.clone();
        minus.tensors_mut()[t].1[[r, c]] -= options.step;
        let lp = snippet_loss_report(&plus, snippet, &options.weights)?.total;
        let lm = snippet_loss_report(&minus, snippet, &options.weights)?.total;
        let numeric = (lp - lm) / (2.0 * options.step);
        let a = analytic[t][[r, c]];
        let denom = a.abs().max(numeric.abs());
        let rel_error = if denom == 0.0 {
            0.0
        } else {
            (a - numeric).abs() / denom
        };
        let pass = rel_error < options.rel_tol
            || (a.abs() < options.abs_tol && numeric.abs() < options.abs_tol);
        checks.push(CoordCheck {
            tensor: names[t].clone(),
            index: (r, c),
            analytic: a,
            numeric,
            rel_error,
            pass,
        });
    }
    Ok(checks)
}

/// A multi-scale graph set with uniformly random features in their natural
/// ranges: node entropies in [0, ln D], spatial edge consistency in [-1, 1],
/// temporal edge consistency in [0, ln D]. Used to exercise the network on
/// inputs that need no flow data.
pub fn random_graph_set(specs: &[ScaleSpec], classes: usize, seed: u64) -> MultiScaleGraphSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln_d = (classes as f64).ln();
    let graphs = specs
        .iter()
        .map(|spec| {
            let n = spec.node_count();
            let edges = grid_edges(spec.regions_w, spec.regions_h, Connectivity::Four);
            let e = edges.len();
            build_graph(
                &ConsistencySnapshot {
                    spec: spec.clone(),
                    end_frame: 0,
                    node_spatial: (0..n).map(|_| rng.random_range(0.0..ln_d)).collect(),
                    node_temporal: (0..n).map(|_| rng.random_range(0.0..ln_d)).collect(),
                    edge_spatial: (0..e).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    edge_temporal: (0..e).map(|_| rng.random_range(0.0..ln_d)).collect(),
                    edges,
                },
                classes,
            )
        })
        .collect();
    MultiScaleGraphSet {
        end_frame: 0,
        graphs,
    }
}
