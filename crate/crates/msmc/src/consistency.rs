//! The four crowd motion-consistency measures, computed over sliding
//! snippets of flow frames.
//!
//! Per region: spatial-inner consistency (direction entropy of the region's
//! pixel vectors in the snippet's final frame) and temporal-inner
//! consistency (direction entropy of the region's average velocity across
//! the snippet). Per adjacent region pair: spatial-inter consistency
//! (magnitude-adjusted cosine of the final frame's average velocities) and
//! temporal-inter consistency (mutual information of the two regions'
//! direction sequences across the snippet). All entropies are in nats.

use crate::error::{Error, Result};
use crate::flow::{FlowSequence, Velocity};
use crate::grid::{
    average_velocity_grid, grid_edges, quantize_direction, Connectivity, Direction,
    DirectionHistogram, ScaleSpec, VelocityGrid,
};

/// Knobs shared by every consistency measure.
#[derive(Clone, Copy, Debug)]
pub struct ConsistencyParams {
    /// Direction class count D.
    pub classes: usize,
    /// Magnitude floor below which a vector counts as static.
    pub eps_static: f64,
    pub connectivity: Connectivity,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        ConsistencyParams {
            classes: 8,
            eps_static: 1e-3,
            connectivity: Connectivity::Four,
        }
    }
}

/// Direction entropy of a region's pixel vectors. Static vectors carry no
/// probability mass; a region with no moving vectors has entropy 0.
pub fn spatial_inner(vectors: &[Velocity], classes: usize, eps_static: f64) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(DirectionHistogram::from_velocities(vectors, classes, eps_static).entropy())
}

/// Magnitude-adjusted cosine similarity of two average velocities:
/// `cos(a, b) * (1 - | |a| - |b| | / (|a| + |b|))`, in [-1, 1].
///
/// Two static regions agree perfectly (1); a static region next to a moving
/// one is maximally uninformative (0).
pub fn spatial_inter(a: Velocity, b: Velocity, eps_static: f64) -> f64 {
    let ma = a.magnitude();
    let mb = b.magnitude();
    let a_static = ma < eps_static;
    let b_static = mb < eps_static;
    if a_static && b_static {
        return 1.0;
    }
    if a_static || b_static {
        return 0.0;
    }
    let cos = (a.u * b.u + a.v * b.v) / (ma * mb);
    let adjust = 1.0 - (ma - mb).abs() / (ma + mb);
    (cos * adjust).clamp(-1.0, 1.0)
}

/// Direction entropy of one region's average velocity across a snippet.
pub fn temporal_inner(history: &[Velocity], classes: usize, eps_static: f64) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::HistoryTooShort {
            actual: history.len(),
            min: 2,
        });
    }
    Ok(DirectionHistogram::from_velocities(history, classes, eps_static).entropy())
}

/// Mutual information of two adjacent regions' direction sequences across a
/// snippet, in nats, bounded by ln(classes).
///
/// Snippet positions where either region is static are dropped before
/// counting; fewer than 2 surviving positions yield 0.
pub fn temporal_inter(
    history_i: &[Velocity],
    history_j: &[Velocity],
    classes: usize,
    eps_static: f64,
) -> Result<f64> {
    if history_i.len() != history_j.len() {
        return Err(Error::LengthMismatch {
            what: "temporal-inter histories",
            expected: history_i.len(),
            actual: history_j.len(),
        });
    }
    if history_i.len() < 2 {
        return Err(Error::HistoryTooShort {
            actual: history_i.len(),
            min: 2,
        });
    }
    let di = direction_sequence(history_i, classes, eps_static);
    let dj = direction_sequence(history_j, classes, eps_static);
    Ok(mutual_information(&di, &dj, classes))
}

pub(crate) fn direction_sequence(
    history: &[Velocity],
    classes: usize,
    eps_static: f64,
) -> Vec<Direction> {
    history
        .iter()
        .map(|&v| quantize_direction(v, classes, eps_static))
        .collect()
}

pub(crate) fn entropy_of_directions(dirs: &[Direction], classes: usize) -> f64 {
    let mut hist = DirectionHistogram::new(classes);
    for &d in dirs {
        hist.add(d);
    }
    hist.entropy()
}

pub(crate) fn mutual_information(dirs_i: &[Direction], dirs_j: &[Direction], classes: usize) -> f64 {
    let mut joint = vec![0u32; classes * classes];
    let mut total = 0u32;
    for (&a, &b) in dirs_i.iter().zip(dirs_j) {
        if let (Direction::Class(x), Direction::Class(y)) = (a, b) {
            joint[x * classes + y] += 1;
            total += 1;
        }
    }
    if total < 2 {
        return 0.0;
    }
    let mut row = vec![0u32; classes];
    let mut col = vec![0u32; classes];
    for x in 0..classes {
        for y in 0..classes {
            let c = joint[x * classes + y];
            row[x] += c;
            col[y] += c;
        }
    }
    let n = total as f64;
    let mut mi = 0.0;
    for x in 0..classes {
        for y in 0..classes {
            let c = joint[x * classes + y];
            if c > 0 {
                let p_xy = c as f64 / n;
                let p_x = row[x] as f64 / n;
                let p_y = col[y] as f64 / n;
                mi += p_xy * (p_xy / (p_x * p_y)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// One sliding snippet: `m` consecutive raw frames plus the matching
/// per-scale velocity grids, ending at global frame index `end_frame`.
#[derive(Clone, Debug)]
pub struct SnippetWindow<'a> {
    pub tau: usize,
    pub end_frame: usize,
    frames: &'a [Vec<Velocity>],
    grids: Vec<&'a [VelocityGrid]>,
}

impl<'a> SnippetWindow<'a> {
    /// `frames` are the m raw frames oldest-first; each entry of `grids` is
    /// one scale's grids for exactly those frames.
    pub fn new(
        tau: usize,
        end_frame: usize,
        frames: &'a [Vec<Velocity>],
        grids: Vec<&'a [VelocityGrid]>,
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::HistoryTooShort {
                actual: frames.len(),
                min: 2,
            });
        }
        if tau == 0 {
            return Err(Error::InvalidConfig {
                field: "snippet_stride".into(),
                reason: "must be >= 1".into(),
            });
        }
        if grids.is_empty() {
            return Err(Error::Internal {
                context: "SnippetWindow::new",
                reason: "no scales".into(),
            });
        }
        for scale_grids in &grids {
            if scale_grids.len() != frames.len() {
                return Err(Error::LengthMismatch {
                    what: "snippet grids per scale",
                    expected: frames.len(),
                    actual: scale_grids.len(),
                });
            }
        }
        Ok(SnippetWindow {
            tau,
            end_frame,
            frames,
            grids,
        })
    }

    /// Snippet length m.
    pub fn snippet_len(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &'a [Vec<Velocity>] {
        self.frames
    }

    pub fn final_frame(&self) -> &'a [Velocity] {
        &self.frames[self.frames.len() - 1]
    }

    pub fn scale_specs(&self) -> impl Iterator<Item = &ScaleSpec> {
        self.grids.iter().map(|g| &g[0].spec)
    }

    pub fn grids_for(&self, spec: &ScaleSpec) -> Option<&'a [VelocityGrid]> {
        self.grids.iter().copied().find(|g| &g[0].spec == spec)
    }
}

/// Consistency features of one snippet at one scale: per-region values plus
/// per-adjacent-pair values over the grid edges in canonical order.
#[derive(Clone, Debug)]
pub struct ConsistencySnapshot {
    pub spec: ScaleSpec,
    pub end_frame: usize,
    /// Spatial-inner consistency per region, row-major.
    pub node_spatial: Vec<f64>,
    /// Temporal-inner consistency per region, row-major.
    pub node_temporal: Vec<f64>,
    /// Adjacent region pairs, canonical order, i < j.
    pub edges: Vec<(usize, usize)>,
    /// Spatial-inter consistency per edge.
    pub edge_spatial: Vec<f64>,
    /// Temporal-inter consistency per edge.
    pub edge_temporal: Vec<f64>,
}

/// Computes all four measures for one snippet at one scale. Spatial values
/// come from the window's final frame only; temporal values span the whole
/// snippet.
pub fn snippet_features(
    window: &SnippetWindow,
    spec: &ScaleSpec,
    params: &ConsistencyParams,
) -> Result<ConsistencySnapshot> {
    let grids = window.grids_for(spec).ok_or_else(|| Error::ShapeMismatch {
        context: "snippet_features",
        expected: format!("window grids at scale {}", spec.scale_factor),
        actual: "no matching scale in window".into(),
    })?;
    let final_frame = window.final_frame();
    let final_grid = grids.last().expect("window holds at least 2 frames");
    let n = spec.node_count();
    let m = window.snippet_len();

    let mut node_spatial = Vec::with_capacity(n);
    let mut region_pixels: Vec<Velocity> = Vec::new();
    for row in 0..spec.regions_h {
        for col in 0..spec.regions_w {
            let (xs, ys) = spec.region_extent(col, row);
            region_pixels.clear();
            for y in ys {
                for x in xs.clone() {
                    region_pixels.push(final_frame[y * spec.frame_width + x]);
                }
            }
            node_spatial.push(spatial_inner(&region_pixels, params.classes, params.eps_static)?);
        }
    }

    // Direction sequences per region, shared by the temporal measures.
    let mut dirs: Vec<Vec<Direction>> = vec![Vec::with_capacity(m); n];
    for grid in grids {
        for (node, &cell) in grid.cells().iter().enumerate() {
            dirs[node].push(quantize_direction(cell, params.classes, params.eps_static));
        }
    }
    let node_temporal: Vec<f64> = dirs
        .iter()
        .map(|d| entropy_of_directions(d, params.classes))
        .collect();

    let edges = grid_edges(spec.regions_w, spec.regions_h, params.connectivity);
    let mut edge_spatial = Vec::with_capacity(edges.len());
    let mut edge_temporal = Vec::with_capacity(edges.len());
    for &(i, j) in &edges {
        edge_spatial.push(spatial_inter(
            final_grid.cells()[i],
            final_grid.cells()[j],
            params.eps_static,
        ));
        edge_temporal.push(mutual_information(&dirs[i], &dirs[j], params.classes));
    }

    Ok(ConsistencySnapshot {
        spec: spec.clone(),
        end_frame: window.end_frame,
        node_spatial,
        node_temporal,
        edges,
        edge_spatial,
        edge_temporal,
    })
}

/// Velocity grids for every frame of a sequence at every configured scale;
/// the shared substrate for sliding windows.
#[derive(Clone, Debug)]
pub struct FrameGrids {
    specs: Vec<ScaleSpec>,
    /// grids[scale][frame]
    grids: Vec<Vec<VelocityGrid>>,
}

impl FrameGrids {
    pub fn compute(seq: &FlowSequence, specs: &[ScaleSpec]) -> Result<Self> {
        let mut grids = Vec::with_capacity(specs.len());
        for spec in specs {
            let per_frame = seq
                .frames()
                .iter()
                .enumerate()
                .map(|(t, frame)| average_velocity_grid(frame, spec, t))
                .collect::<Result<Vec<_>>>()?;
            grids.push(per_frame);
        }
        Ok(FrameGrids {
            specs: specs.to_vec(),
            grids,
        })
    }

    pub fn specs(&self) -> &[ScaleSpec] {
        &self.specs
    }

    /// The window of `m` frames ending at `end_frame`.
    pub fn window<'a>(
        &'a self,
        seq: &'a FlowSequence,
        m: usize,
        tau: usize,
        end_frame: usize,
    ) -> Result<SnippetWindow<'a>> {
        if seq.frame_count() < m {
            return Err(Error::SequenceTooShort {
                frames: seq.frame_count(),
                snippet: m,
            });
        }
        if end_frame + 1 < m || end_frame >= seq.frame_count() {
            return Err(Error::Internal {
                context: "FrameGrids::window",
                reason: format!(
                    "end frame {end_frame} out of range for m={m}, {} frames",
                    seq.frame_count()
                ),
            });
        }
        let start = end_frame + 1 - m;
        let grids = self
            .grids
            .iter()
            .map(|per_frame| &per_frame[start..=end_frame])
            .collect();
        SnippetWindow::new(tau, end_frame, &seq.frames()[start..=end_frame], grids)
    }

    /// End-frame indices of every snippet of length `m` slid by `tau`.
    pub fn snippet_ends(frame_count: usize, m: usize, tau: usize) -> Vec<usize> {
        if frame_count < m {
            return Vec::new();
        }
        (0..)
            .map(|k| m - 1 + k * tau)
            .take_while(|&t| t < frame_count)
            .collect()
    }
}
