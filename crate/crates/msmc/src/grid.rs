//! Region grids over the frame at multiple scales.
//!
//! The base (1x) grid tiles the frame with square regions whose side
//! approximates a configured body width in pixels; coarser scales merge
//! `s x s` blocks of base cells. Regions on the right/bottom frame edges
//! may be partial, but every pixel belongs to exactly one region at every
//! scale.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Velocity;

/// Geometry of the region grid at one scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// Coarsening factor `s` relative to the base grid.
    pub scale_factor: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Side of a base (1x) region in pixels.
    pub base_side: usize,
    /// Base grid region counts.
    pub base_regions_w: usize,
    pub base_regions_h: usize,
    /// Region counts at this scale.
    pub regions_w: usize,
    pub regions_h: usize,
}

impl ScaleSpec {
    pub fn node_count(&self) -> usize {
        self.regions_w * self.regions_h
    }

    /// Row-major region index.
    pub fn region_index(&self, col: usize, row: usize) -> usize {
        row * self.regions_w + col
    }

    /// Pixel extent of region (col, row): x range then y range. Edge
    /// regions are clipped to the frame.
    pub fn region_extent(&self, col: usize, row: usize) -> (Range<usize>, Range<usize>) {
        let block = self.scale_factor * self.base_side;
        let x0 = col * block;
        let y0 = row * block;
        let x1 = (x0 + block).min(self.frame_width);
        let y1 = (y0 + block).min(self.frame_height);
        (x0..x1, y0..y1)
    }

    /// The region at this scale that owns base cell (col, row).
    pub fn region_of_base_cell(&self, base_col: usize, base_row: usize) -> (usize, usize) {
        (base_col / self.scale_factor, base_row / self.scale_factor)
    }
}

/// Builds one [`ScaleSpec`] per factor. The base region side is the integer
/// nearest `shoulder_px` (ties toward the smaller integer, minimum 1) and
/// must fit inside both frame dimensions. Region counts are ceil-divisions,
/// so partial edge regions are kept.
pub fn build_scale_specs(
    frame_width: usize,
    frame_height: usize,
    shoulder_px: f64,
    scale_factors: &[usize],
) -> Result<Vec<ScaleSpec>> {
    if frame_width == 0 || frame_height == 0 {
        return Err(Error::InvalidConfig {
            field: "frame dimensions".into(),
            reason: format!("{frame_width}x{frame_height} must be nonzero"),
        });
    }
    if !(shoulder_px.is_finite() && shoulder_px > 0.0) {
        return Err(Error::InvalidConfig {
            field: "shoulder_px".into(),
            reason: format!("{shoulder_px} must be finite and positive"),
        });
    }
    if scale_factors.is_empty() {
        return Err(Error::InvalidConfig {
            field: "scale_factors".into(),
            reason: "at least one scale factor is required".into(),
        });
    }
    if scale_factors.contains(&0) {
        return Err(Error::InvalidConfig {
            field: "scale_factors".into(),
            reason: "scale factors must be >= 1".into(),
        });
    }

    let lo = shoulder_px.floor();
    let hi = shoulder_px.ceil();
    let side = if shoulder_px - lo <= hi - shoulder_px {
        lo
    } else {
        hi
    };
    let side = (side as usize).max(1);
    if side > frame_width || side > frame_height {
        return Err(Error::RegionLargerThanFrame {
            side,
            width: frame_width,
            height: frame_height,
        });
    }

    let base_w = frame_width.div_ceil(side);
    let base_h = frame_height.div_ceil(side);
    Ok(scale_factors
        .iter()
        .map(|&s| ScaleSpec {
            scale_factor: s,
            frame_width,
            frame_height,
            base_side: side,
            base_regions_w: base_w,
            base_regions_h: base_h,
            regions_w: base_w.div_ceil(s),
            regions_h: base_h.div_ceil(s),
        })
        .collect())
}

/// Per-region mean velocities of one frame at one scale.
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub spec: ScaleSpec,
    pub frame_index: usize,
    cells: Vec<Velocity>,
}

impl VelocityGrid {
    pub fn cell(&self, col: usize, row: usize) -> Velocity {
        self.cells[self.spec.region_index(col, row)]
    }

    pub fn cells(&self) -> &[Velocity] {
        &self.cells
    }
}

/// Averages a row-major flow frame into the region grid described by `spec`.
pub fn average_velocity_grid(
    frame: &[Velocity],
    spec: &ScaleSpec,
    frame_index: usize,
) -> Result<VelocityGrid> {
    let expected = spec.frame_width * spec.frame_height;
    if frame.len() != expected {
        return Err(Error::LengthMismatch {
            what: "flow frame for velocity grid",
            expected,
            actual: frame.len(),
        });
    }
    let mut cells = Vec::with_capacity(spec.node_count());
    for row in 0..spec.regions_h {
        for col in 0..spec.regions_w {
            let (xs, ys) = spec.region_extent(col, row);
            let mut sum = Velocity::default();
            let mut count = 0usize;
            for y in ys {
                for x in xs.clone() {
                    sum = sum + frame[y * spec.frame_width + x];
                    count += 1;
                }
            }
            cells.push(sum * (1.0 / count as f64));
        }
    }
    Ok(VelocityGrid {
        spec: spec.clone(),
        frame_index,
        cells,
    })
}

/// Direction class of a velocity vector: one of `classes` equal angular
/// sectors, or `Static` for vectors below the magnitude floor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Static,
    Class(usize),
}

/// Quantizes a vector into one of `classes` sectors of width `2*pi/classes`,
/// sector 0 centered on the +x axis, indices increasing with
/// `atan2(v, u)`. Angles exactly on a sector boundary resolve to the
/// lower-index of the two adjacent sectors, counted before wrapping: the
/// seam boundary just below the +x axis joins the top sector, which keeps
/// rotation by one sector an index increment everywhere. Magnitude below
/// `eps_static` yields [`Direction::Static`].
pub fn quantize_direction(vel: Velocity, classes: usize, eps_static: f64) -> Direction {
    debug_assert!(classes >= 2);
    if vel.magnitude() < eps_static {
        return Direction::Static;
    }
    let sector = 2.0 * std::f64::consts::PI / classes as f64;
    let raw = vel.angle() / sector;
    // raw + 0.5 landing on an integer means the angle sits exactly on the
    // boundary between sectors floor(raw+0.5)-1 and floor(raw+0.5); take the
    // lower one.
    let shifted = raw + 0.5;
    let idx = if shifted.fract() == 0.0 {
        shifted as i64 - 1
    } else {
        raw.round() as i64
    };
    Direction::Class(idx.rem_euclid(classes as i64) as usize)
}

/// Histogram of direction classes. Static vectors are tallied separately and
/// never contribute probability mass.
#[derive(Clone, Debug)]
pub struct DirectionHistogram {
    bins: Vec<u32>,
    static_count: u32,
}

impl DirectionHistogram {
    pub fn new(classes: usize) -> Self {
        DirectionHistogram {
            bins: vec![0; classes],
            static_count: 0,
        }
    }

    pub fn from_velocities<'a>(
        velocities: impl IntoIterator<Item = &'a Velocity>,
        classes: usize,
        eps_static: f64,
    ) -> Self {
        let mut hist = DirectionHistogram::new(classes);
        for &vel in velocities {
            hist.add(quantize_direction(vel, classes, eps_static));
        }
        hist
    }

    pub fn add(&mut self, dir: Direction) {
        match dir {
            Direction::Static => self.static_count += 1,
            Direction::Class(c) => self.bins[c] += 1,
        }
    }

    pub fn bins(&self) -> &[u32] {
        &self.bins
    }

    pub fn static_count(&self) -> u32 {
        self.static_count
    }

    /// Count of non-static samples; the probability denominator.
    pub fn moving_count(&self) -> u32 {
        self.bins.iter().sum()
    }

    /// Shannon entropy in nats over the non-static mass. Zero when no bin is
    /// occupied (0 * ln 0 := 0 throughout). Bounded by ln(classes).
    pub fn entropy(&self) -> f64 {
        let total = self.moving_count();
        if total == 0 {
            return 0.0;
        }
        let total = total as f64;
        let mut h = 0.0;
        for &count in &self.bins {
            if count > 0 {
                let p = count as f64 / total;
                h -= p * p.ln();
            }
        }
        h.max(0.0)
    }
}

/// Neighborhood structure used when wiring region grids into graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Undirected edges of a `w x h` grid in canonical order: nodes row-major,
/// and for each node its rightward edge precedes its downward edge
/// (eight-connectivity appends the two diagonal edges after those). Every
/// edge appears once with `i < j`.
pub fn grid_edges(w: usize, h: usize, connectivity: Connectivity) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if col + 1 < w {
                edges.push((i, i + 1));
            }
            if row + 1 < h {
                edges.push((i, i + w));
            }
            if connectivity == Connectivity::Eight {
                if col + 1 < w && row + 1 < h {
                    edges.push((i, i + w + 1));
                }
                if col > 0 && row + 1 < h {
                    edges.push((i, i + w - 1));
                }
            }
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_specs_match_reference_geometry() {
        let specs = build_scale_specs(320, 240, 16.0, &[1, 2, 4]).unwrap();
        assert_eq!(specs[0].base_side, 16);
        assert_eq!((specs[0].regions_w, specs[0].regions_h), (20, 15));
        assert_eq!((specs[1].regions_w, specs[1].regions_h), (10, 8));
        assert_eq!((specs[2].regions_w, specs[2].regions_h), (5, 4));
        for spec in &specs {
            assert_eq!(spec.base_regions_w, 20);
            assert_eq!(spec.base_regions_h, 15);
        }
    }

    #[test]
    fn coarse_counts_ceil_over_base_counts() {
        // 15 base rows at scale 2 -> 8 coarse rows, the last one a half block.
        let specs = build_scale_specs(240, 240, 16.0, &[2]).unwrap();
        assert_eq!(specs[0].base_regions_h, 15);
        assert_eq!(specs[0].regions_h, 8);
        let (_, ys) = specs[0].region_extent(0, 7);
        assert_eq!(ys, 224..240);
    }

    #[test]
    fn side_rounds_to_nearest_with_ties_down() {
        assert_eq!(build_scale_specs(100, 100, 16.4, &[1]).unwrap()[0].base_side, 16);
        assert_eq!(build_scale_specs(100, 100, 16.6, &[1]).unwrap()[0].base_side, 17);
        assert_eq!(build_scale_specs(100, 100, 16.5, &[1]).unwrap()[0].base_side, 16);
        assert_eq!(build_scale_specs(100, 100, 0.4, &[1]).unwrap()[0].base_side, 1);
    }

    #[test]
    fn oversized_region_is_rejected() {
        match build_scale_specs(10, 100, 12.0, &[1]) {
            Err(Error::RegionLargerThanFrame { side, width, .. }) => {
                assert_eq!(side, 12);
                assert_eq!(width, 10);
            }
            other => panic!("expected RegionLargerThanFrame, got {other:?}"),
        }
    }

    #[test]
    fn every_pixel_owned_by_exactly_one_region_at_every_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let w = rng.random_range(5..90);
            let h = rng.random_range(5..90);
            let shoulder = rng.random_range(1.0..(w.min(h) as f64));
            let specs = build_scale_specs(w, h, shoulder, &[1, 2, 3, 4]).unwrap();
            for spec in &specs {
                let mut owned = vec![0u32; w * h];
                for row in 0..spec.regions_h {
                    for col in 0..spec.regions_w {
                        let (xs, ys) = spec.region_extent(col, row);
                        assert!(!xs.is_empty() && !ys.is_empty());
                        for y in ys {
                            for x in xs.clone() {
                                owned[y * w + x] += 1;
                            }
                        }
                    }
                }
                assert!(owned.iter().all(|&c| c == 1), "scale {}", spec.scale_factor);
            }
        }
    }

    #[test]
    fn base_cells_map_into_coarse_regions_consistently() {
        let specs = build_scale_specs(320, 240, 16.0, &[1, 2, 4]).unwrap();
        let coarse = &specs[2];
        // Base cell (13, 9) sits in coarse region (3, 2) at scale 4; its
        // pixel extent must be contained in the coarse region's extent.
        assert_eq!(coarse.region_of_base_cell(13, 9), (3, 2));
        let base = &specs[0];
        let (bx, by) = base.region_extent(13, 9);
        let (cx, cy) = coarse.region_extent(3, 2);
        assert!(cx.start <= bx.start && bx.end <= cx.end);
        assert!(cy.start <= by.start && by.end <= cy.end);
    }

    #[test]
    fn averaging_constant_field_returns_the_constant() {
        let spec = build_scale_specs(32, 24, 8.0, &[1]).unwrap().remove(0);
        let frame = vec![Velocity::new(1.5, -0.25); 32 * 24];
        let grid = average_velocity_grid(&frame, &spec, 0).unwrap();
        for &cell in grid.cells() {
            assert!((cell.u - 1.5).abs() < 1e-12);
            assert!((cell.v + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_antisymmetric_region_is_zero() {
        // One 2x2 region holding (1,0),(−1,0),(0,1),(0,−1) averages to zero.
        let spec = build_scale_specs(2, 2, 2.0, &[1]).unwrap().remove(0);
        let frame = vec![
            Velocity::new(1.0, 0.0),
            Velocity::new(-1.0, 0.0),
            Velocity::new(0.0, 1.0),
            Velocity::new(0.0, -1.0),
        ];
        let grid = average_velocity_grid(&frame, &spec, 0).unwrap();
        assert_eq!(grid.cells().len(), 1);
        assert_eq!(grid.cell(0, 0), Velocity::new(0.0, 0.0));
    }

    #[test]
    fn averaging_matches_brute_force_on_awkward_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (w, h) = (17, 13);
        let frame: Vec<Velocity> = (0..w * h)
            .map(|_| Velocity::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        for spec in build_scale_specs(w, h, 4.0, &[1, 2]).unwrap() {
            let grid = average_velocity_grid(&frame, &spec, 3).unwrap();
            assert_eq!(grid.frame_index, 3);
            for row in 0..spec.regions_h {
                for col in 0..spec.regions_w {
                    let (xs, ys) = spec.region_extent(col, row);
                    let mut su = 0.0;
                    let mut sv = 0.0;
                    let mut n = 0.0;
                    for y in ys {
                        for x in xs.clone() {
                            su += frame[y * w + x].u;
                            sv += frame[y * w + x].v;
                            n += 1.0;
                        }
                    }
                    let cell = grid.cell(col, row);
                    assert!((cell.u - su / n).abs() <= 1e-12);
                    assert!((cell.v - sv / n).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn quantize_axis_and_boundary_cases() {
        let q = |u: f64, v: f64, d: usize| quantize_direction(Velocity::new(u, v), d, 1e-3);
        assert_eq!(q(1.0, 0.0, 8), Direction::Class(0));
        assert_eq!(q(0.0, 1.0, 8), Direction::Class(2));
        assert_eq!(q(-1.0, 0.0, 8), Direction::Class(4));
        assert_eq!(q(0.0, -1.0, 8), Direction::Class(6));
        assert_eq!(q(1e-4, 0.0, 8), Direction::Static);
        // (1,1) sits exactly on the sector boundary between classes 0 and 1
        // for D=4; the lower index wins.
        assert_eq!(q(1.0, 1.0, 4), Direction::Class(0));
        // Same angle for D=8 is the center of class 1.
        assert_eq!(q(1.0, 1.0, 8), Direction::Class(1));
        // Boundary between the top class and class 0 resolves to 0.
        let theta = -std::f64::consts::PI / 8.0;
        assert_eq!(q(theta.cos(), theta.sin(), 8), Direction::Class(7));
    }

    #[test]
    fn quantize_rotation_advances_class_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &d in &[4usize, 8, 12] {
            let sector = 2.0 * std::f64::consts::PI / d as f64;
            for _ in 0..200 {
                let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let mag = rng.random_range(0.01..5.0);
                let v0 = Velocity::new(mag * theta.cos(), mag * theta.sin());
                let v1 = Velocity::new(
                    mag * (theta + sector).cos(),
                    mag * (theta + sector).sin(),
                );
                let (Direction::Class(c0), Direction::Class(c1)) = (
                    quantize_direction(v0, d, 1e-3),
                    quantize_direction(v1, d, 1e-3),
                ) else {
                    panic!("unexpected static classification");
                };
                // Skip samples whose float-rotated angle lands within fp
                // noise of a boundary; the tie rule may then differ by one.
                let raw0 = (theta / sector + 0.5).fract().abs();
                let raw1 = ((theta + sector) / sector + 0.5).fract().abs();
                if raw0.min(raw1) < 1e-9 || (1.0 - raw0.max(raw1)).abs() < 1e-9 {
                    continue;
                }
                assert_eq!((c0 + 1) % d, c1, "d={d} theta={theta}");
            }
        }
    }

    #[test]
    fn histogram_entropy_bounds_and_uniform_max() {
        let d = 8usize;
        let mut hist = DirectionHistogram::new(d);
        for c in 0..d {
            hist.add(Direction::Class(c));
        }
        hist.add(Direction::Static);
        assert_eq!(hist.moving_count(), 8);
        assert_eq!(hist.static_count(), 1);
        assert!((hist.entropy() - (d as f64).ln()).abs() < 1e-12);

        let mut single = DirectionHistogram::new(d);
        single.add(Direction::Class(3));
        single.add(Direction::Class(3));
        assert_eq!(single.entropy(), 0.0);

        let all_static = DirectionHistogram::new(d);
        assert_eq!(all_static.entropy(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let mut h = DirectionHistogram::new(d);
            for _ in 0..rng.random_range(1..60) {
                h.add(Direction::Class(rng.random_range(0..d)));
            }
            let e = h.entropy();
            assert!(e >= 0.0 && e <= (d as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn grid_edges_counts_and_canonical_order() {
        let edges = grid_edges(3, 3, Connectivity::Four);
        assert_eq!(edges.len(), 3 * 2 + 3 * 2);
        assert_eq!(edges[0], (0, 1));
        assert_eq!(edges[1], (0, 3));
        assert!(edges.iter().all(|&(i, j)| i < j));
        // Random sizes obey w*(h-1) + h*(w-1).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = rng.random_range(1..9);
            let h = rng.random_range(1..9);
            let edges = grid_edges(w, h, Connectivity::Four);
            assert_eq!(edges.len(), w * (h - 1) + h * (w - 1));
            let mut seen = std::collections::HashSet::new();
            for &e in &edges {
                assert!(seen.insert(e), "duplicate edge {e:?}");
            }
        }
        assert!(grid_edges(1, 1, Connectivity::Four).is_empty());
        // Eight-connectivity adds 2*(w-1)*(h-1) diagonals.
        let eight = grid_edges(3, 3, Connectivity::Eight);
        assert_eq!(eight.len(), 12 + 2 * 2 * 2);
    }
}
