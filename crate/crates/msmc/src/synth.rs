//! Synthetic crowd-flow scenarios: a calm laminar baseline plus three
//! disturbance patterns (counter flow, radial escape, local turbulence),
//! composable into labeled benchmark sequences.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowSequence, Velocity};

/// Pixel noise draws come from a separate stream of the seed's generator,
/// so the underlying motion pattern for a seed is identical at any sigma.
const NOISE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Uniform rightward drift; the normal class.
    Laminar,
    /// Top half drifts right, bottom half left.
    CounterFlow,
    /// Radial outward motion from the frame center.
    Escape,
    /// Per-cell directions that re-randomize and pulse over time.
    Turbulence,
}

impl Behavior {
    pub fn is_anomalous(self) -> bool {
        !matches!(self, Behavior::Laminar)
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Behavior::Laminar => "laminar",
            Behavior::CounterFlow => "counter_flow",
            Behavior::Escape => "escape",
            Behavior::Turbulence => "turbulence",
        };
        f.write_str(name)
    }
}

impl FromStr for Behavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laminar" => Ok(Behavior::Laminar),
            "counter_flow" => Ok(Behavior::CounterFlow),
            "escape" => Ok(Behavior::Escape),
            "turbulence" => Ok(Behavior::Turbulence),
            other => Err(Error::InvalidPlan {
                reason: format!(
                    "unknown behavior {other:?}; expected laminar, counter_flow, escape, \
                     or turbulence"
                ),
            }),
        }
    }
}

/// One labeled stretch of a benchmark sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub behavior: Behavior,
    pub frames: usize,
}

/// Parses a plan like `laminar:400,counter_flow:250,laminar:300`.
pub fn parse_plan(text: &str) -> Result<Vec<SegmentSpec>> {
    let mut plan = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, count) = part.split_once(':').ok_or_else(|| Error::InvalidPlan {
            reason: format!("segment {part:?} is not of the form behavior:frames"),
        })?;
        let behavior: Behavior = name.trim().parse()?;
        let frames: usize = count.trim().parse().map_err(|_| Error::InvalidPlan {
            reason: format!("frame count {count:?} is not a positive integer"),
        })?;
        plan.push(SegmentSpec { behavior, frames });
    }
    if plan.is_empty() {
        return Err(Error::InvalidPlan {
            reason: "plan holds no segments".into(),
        });
    }
    Ok(plan)
}

/// Formats a plan back into the `behavior:frames,...` form.
pub fn format_plan(plan: &[SegmentSpec]) -> String {
    plan.iter()
        .map(|s| format!("{}:{}", s.behavior, s.frames))
        .collect::<Vec<_>>()
        .join(",")
}

/// Frame geometry and motion parameters shared by all scenario generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    /// Nominal pixel speed of the crowd.
    pub speed: f64,
    /// Standard deviation of zero-mean Gaussian noise added to both
    /// velocity components of every pixel.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Side of the square cells that move coherently under turbulence.
    pub cell_px: usize,
    /// Frames between direction re-draws under turbulence.
    pub resample_every: usize,
    /// Period in frames of the turbulence magnitude pulse.
    pub pulse_period: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            width: 64,
            height: 64,
            speed: 1.0,
            noise_sigma: 0.05,
            seed: 42,
            cell_px: 8,
            resample_every: 3,
            pulse_period: 10,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.width == 0 || self.height == 0 {
            return bad("width/height", "frame dimensions must be >= 1");
        }
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return bad("speed", "must be finite and > 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be finite and >= 0");
        }
        if self.cell_px == 0 {
            return bad("cell_px", "must be >= 1");
        }
        if self.resample_every == 0 {
            return bad("resample_every", "must be >= 1");
        }
        if self.pulse_period == 0 {
            return bad("pulse_period", "must be >= 1");
        }
        Ok(())
    }
}

/// Generates one segment of the given behavior.
pub fn gen_segment(
    cfg: &ScenarioConfig,
    behavior: Behavior,
    frames: usize,
    seed: u64,
) -> Result<FlowSequence> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::InvalidPlan {
            reason: "segment of zero frames".into(),
        });
    }
    let (w, h) = (cfg.width, cfg.height);
    let mut pattern_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(NOISE_STREAM);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    // Turbulence state: a coherent direction per cell, re-drawn every
    // `resample_every` frames, plus a fixed random pulse phase per cell.
    let cells_w = w.div_ceil(cfg.cell_px);
    let cells_h = h.div_ceil(cfg.cell_px);
    let tau = std::f64::consts::TAU;
    let mut cell_dirs = vec![0.0f64; cells_w * cells_h];
    let cell_phases: Vec<f64> = if behavior == Behavior::Turbulence {
        (0..cells_w * cells_h)
            .map(|_| pattern_rng.random_range(0.0..tau))
            .collect()
    } else {
        Vec::new()
    };

    let center_x = (w as f64 - 1.0) / 2.0;
    let center_y = (h as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if behavior == Behavior::Turbulence && t % cfg.resample_every == 0 {
            for dir in &mut cell_dirs {
                *dir = pattern_rng.random_range(0.0..tau);
            }
        }
        let mut frame = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let base = match behavior {
                    Behavior::Laminar => Velocity::new(cfg.speed, 0.0),
                    Behavior::CounterFlow => {
                        if (y as f64) < h as f64 / 2.0 {
                            Velocity::new(cfg.speed, 0.0)
                        } else {
                            Velocity::new(-cfg.speed, 0.0)
                        }
                    }
                    Behavior::Escape => {
                        let dx = x as f64 - center_x;
                        let dy = y as f64 - center_y;
                        let dist = dx.hypot(dy);
                        if dist < 1e-9 {
                            Velocity::new(0.0, 0.0)
                        } else {
                            Velocity::new(cfg.speed * dx / dist, cfg.speed * dy / dist)
                        }
                    }
                    Behavior::Turbulence => {
                        let cell = (y / cfg.cell_px) * cells_w + x / cfg.cell_px;
                        let pulse = (tau * t as f64 / cfg.pulse_period as f64
                            + cell_phases[cell])
                            .sin();
                        let mag = 0.2 * cfg.speed + 0.8 * cfg.speed * (0.5 + 0.5 * pulse);
                        let dir = cell_dirs[cell];
                        Velocity::new(mag * dir.cos(), mag * dir.sin())
                    }
                };
                let v = match &noise {
                    Some(n) => Velocity::new(
                        base.u + n.sample(&mut noise_rng),
                        base.v + n.sample(&mut noise_rng),
                    ),
                    None => base,
                };
                frame.push(v);
            }
        }
        out.push(frame);
    }
    FlowSequence::new(w, h, out)
}

/// Checks a plan against the scoring window length: every segment must span
/// at least `min_segment_frames` frames so each behavior is observable in
/// full snippets.
pub fn validate_plan(plan: &[SegmentSpec], min_segment_frames: usize) -> Result<()> {
    if plan.is_empty() {
        return Err(Error::InvalidPlan {
            reason: "plan holds no segments".into(),
        });
    }
    for (k, seg) in plan.iter().enumerate() {
        if seg.frames < min_segment_frames {
            return Err(Error::InvalidPlan {
                reason: format!(
                    "segment {k} ({}) spans {} frames, need >= {min_segment_frames}",
                    seg.behavior, seg.frames
                ),
            });
        }
    }
    Ok(())
}

/// Generates a labeled benchmark: segments in plan order, each from its own
/// derived seed, with one 0/1 label per frame (anomalous behaviors are 1).
pub fn gen_benchmark(
    cfg: &ScenarioConfig,
    plan: &[SegmentSpec],
    min_segment_frames: usize,
) -> Result<(FlowSequence, Vec<u8>)> {
    cfg.validate()?;
    validate_plan(plan, min_segment_frames)?;
    let mut sequence: Option<FlowSequence> = None;
    let mut labels = Vec::new();
    for (k, seg) in plan.iter().enumerate() {
        let seed = cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let part = gen_segment(cfg, seg.behavior, seg.frames, seed)?;
        let label = u8::from(seg.behavior.is_anomalous());
        labels.extend(std::iter::repeat(label).take(seg.frames));
        sequence = Some(match sequence {
            None => part,
            Some(mut acc) => {
                acc.extend(part)?;
                acc
            }
        });
    }
    Ok((sequence.expect("plan validated nonempty"), labels))
}
