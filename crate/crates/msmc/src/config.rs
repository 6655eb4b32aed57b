//! Flat JSON run configuration shared by every command. Unknown keys are
//! rejected, missing keys take defaults, and a saved echo of a config
//! reproduces its run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyParams;
use crate::error::{Error, Result};
use crate::grid::{build_scale_specs, Connectivity, ScaleSpec};
use crate::net::{LossWeights, TrainSettings};
use crate::synth::ScenarioConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Frames per snippet (m).
    pub snippet_frames: usize,
    /// Frames between successive snippet ends.
    pub snippet_stride: usize,
    /// Direction histogram bins (D).
    pub direction_classes: usize,
    /// Region-grid downscale factors, one graph per entry.
    pub scale_factors: Vec<usize>,
    /// Assumed shoulder width in pixels; sets the base region side.
    pub shoulder_px: f64,
    /// Pixel speeds under this magnitude count as static.
    pub eps_static: f64,
    /// Region-grid neighborhood: 4 or 8.
    pub connectivity: u8,

    /// Per-channel embedding width (C).
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop: bool,
    pub lambda_fusion: f64,
    pub lambda_aux: f64,
    pub lambda_soft: f64,
    /// Moving-average weight of the newest score.
    pub lambda_moving: f64,
    pub seed: u64,

    /// Synthetic-scenario frame width.
    pub width: usize,
    /// Synthetic-scenario frame height.
    pub height: usize,
    pub speed: f64,
    pub noise_sigma: f64,
    pub cell_px: usize,
    pub resample_every: usize,
    pub pulse_period: usize,
    /// Benchmark plan, e.g. "laminar:400,counter_flow:250".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graphs: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            snippet_frames: 20,
            snippet_stride: 1,
            direction_classes: 8,
            scale_factors: vec![1, 2, 4],
            shoulder_px: 16.0,
            eps_static: 1e-3,
            connectivity: 4,
            embed_dim: 16,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            epochs: 100,
            early_stop: true,
            lambda_fusion: 1.0,
            lambda_aux: 1.0,
            lambda_soft: 1.0,
            lambda_moving: 0.2,
            seed: 42,
            width: 64,
            height: 64,
            speed: 1.0,
            noise_sigma: 0.05,
            cell_px: 8,
            resample_every: 3,
            pulse_period: 10,
            plan: None,
            flow: None,
            labels: None,
            checkpoint: None,
            scores: None,
            metrics: None,
            graphs: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io("reading config", path, e))?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Applies `key=value` overrides. Values are parsed as JSON first, so
    /// numbers, booleans, and arrays work; anything unparseable is taken as
    /// a string. The merged result is re-checked against the schema.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let mut value = serde_json::to_value(&*self).map_err(|e| Error::Internal {
            context: "RunConfig::apply_overrides",
            reason: e.to_string(),
        })?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        for (key, raw) in pairs {
            let parsed = serde_json::from_str::<serde_json::Value>(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            obj.insert(key.clone(), parsed);
        }
        *self = serde_json::from_value(value).map_err(|e| Error::InvalidConfig {
            field: "--set".into(),
            reason: e.to_string(),
        })?;
        Ok(())
    }

    /// Splits a `key=value` argument.
    pub fn parse_override(text: &str) -> Result<(String, String)> {
        match text.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
            _ => Err(Error::InvalidConfig {
                field: "--set".into(),
                reason: format!("expected key=value, got {text:?}"),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason,
            })
        };
        if self.snippet_frames < 2 {
            return bad("snippet_frames", "must be >= 2".into());
        }
        if self.snippet_stride == 0 {
            return bad("snippet_stride", "must be >= 1".into());
        }
        if self.direction_classes < 2 {
            return bad("direction_classes", "must be >= 2".into());
        }
        if self.scale_factors.is_empty() {
            return bad("scale_factors", "must list at least one scale".into());
        }
        if self.scale_factors.iter().any(|&s| s == 0) {
            return bad("scale_factors", "factors must be >= 1".into());
        }
        if !(self.shoulder_px.is_finite() && self.shoulder_px > 0.0) {
            return bad("shoulder_px", "must be finite and > 0".into());
        }
        if !(self.eps_static.is_finite() && self.eps_static > 0.0) {
            return bad("eps_static", "must be finite and > 0".into());
        }
        if !matches!(self.connectivity, 4 | 8) {
            return bad(
                "connectivity",
                format!("must be 4 or 8, got {}", self.connectivity),
            );
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_moving) {
            return bad("lambda_moving", "must lie in [0, 1]".into());
        }
        self.train_settings().validate()?;
        self.scenario().validate()?;
        Ok(())
    }

    pub fn grid_connectivity(&self) -> Connectivity {
        match self.connectivity {
            8 => Connectivity::Eight,
            _ => Connectivity::Four,
        }
    }

    pub fn consistency_params(&self) -> ConsistencyParams {
        ConsistencyParams {
            classes: self.direction_classes,
            eps_static: self.eps_static,
            connectivity: self.grid_connectivity(),
        }
    }

    pub fn scale_specs(&self, frame_w: usize, frame_h: usize) -> Result<Vec<ScaleSpec>> {
        build_scale_specs(frame_w, frame_h, self.shoulder_px, &self.scale_factors)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            fusion: self.lambda_fusion,
            aux: self.lambda_aux,
            soft: self.lambda_soft,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
            batch_size: self.batch_size,
            epochs: self.epochs,
            early_stop: self.early_stop,
            weights: self.loss_weights(),
            seed: self.seed,
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            width: self.width,
            height: self.height,
            speed: self.speed,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            cell_px: self.cell_px,
            resample_every: self.resample_every,
            pulse_period: self.pulse_period,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_defaults() {
        let cfg = RunConfig::from_json("{}", Path::new("test.json")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_json_keeps_other_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"snippet_frames": 10, "scale_factors": [1, 2], "flow": "a.mscf"}"#,
            Path::new("test.json"),
        )
        .unwrap();
        assert_eq!(cfg.snippet_frames, 10);
        assert_eq!(cfg.scale_factors, vec![1, 2]);
        assert_eq!(cfg.flow.as_deref(), Some(Path::new("a.mscf")));
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.lambda_moving, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"snipet_frames": 10}"#, Path::new("test.json"))
            .unwrap_err();
        match err {
            Error::ConfigParse { reason, .. } => {
                assert!(reason.contains("snipet_frames"), "{reason}")
            }
            other => panic!("expected ConfigParse, got {other:?}"),
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.plan = Some("laminar:100".into());
        cfg.checkpoint = Some("/tmp/run/model.json".into());
        cfg.learning_rate = 1e-3;
        let echoed = RunConfig::from_json(&cfg.to_json_pretty(), Path::new("echo.json")).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn overrides_parse_json_then_fall_back_to_strings() {
        let mut cfg = RunConfig::default();
        let pairs = [
            ("epochs".to_string(), "5".to_string()),
            ("scale_factors".to_string(), "[1,2]".to_string()),
            ("early_stop".to_string(), "false".to_string()),
            ("flow".to_string(), "/data/test.mscf".to_string()),
            ("shoulder_px".to_string(), "8.5".to_string()),
        ];
        cfg.apply_overrides(&pairs).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.scale_factors, vec![1, 2]);
        assert!(!cfg.early_stop);
        assert_eq!(cfg.flow.as_deref(), Some(Path::new("/data/test.mscf")));
        assert_eq!(cfg.shoulder_px, 8.5);

        // Unknown key and wrong type both fail the re-check.
        let mut cfg = RunConfig::default();
        assert!(cfg
            .apply_overrides(&[("no_such_key".into(), "1".into())])
            .is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg
            .apply_overrides(&[("epochs".into(), "many".into())])
            .is_err());
    }

    #[test]
    fn parse_override_splits_on_first_equals() {
        assert_eq!(
            RunConfig::parse_override("plan=laminar:10,escape:20").unwrap(),
            ("plan".to_string(), "laminar:10,escape:20".to_string())
        );
        assert_eq!(
            RunConfig::parse_override("a=b=c").unwrap(),
            ("a".to_string(), "b=c".to_string())
        );
        assert!(RunConfig::parse_override("novalue").is_err());
        assert!(RunConfig::parse_override("=x").is_err());
    }

    #[test]
    fn validation_names_the_offending_field() {
        let cases: &[(&str, &str)] = &[
            ("snippet_frames", "1"),
            ("snippet_stride", "0"),
            ("direction_classes", "1"),
            ("scale_factors", "[]"),
            ("scale_factors", "[0]"),
            ("shoulder_px", "0"),
            ("eps_static", "-1.0"),
            ("connectivity", "5"),
            ("embed_dim", "0"),
            ("lambda_moving", "1.5"),
            ("learning_rate", "-0.1"),
            ("batch_size", "0"),
            ("epochs", "0"),
            ("beta1", "1.0"),
            ("speed", "0"),
            ("cell_px", "0"),
        ];
        for (field, value) in cases {
            let mut cfg = RunConfig::default();
            cfg.apply_overrides(&[(field.to_string(), value.to_string())])
                .unwrap();
            let err = cfg.validate().unwrap_err();
            match err {
                Error::InvalidConfig { field: named, .. } => {
                    assert!(
                        named.contains(field)
                            || (*field == "beta1" && named == "beta1")
                            || (*field == "speed" && named == "speed"),
                        "override {field}={value} blamed {named}"
                    );
                }
                other => panic!("{field}={value}: expected InvalidConfig, got {other:?}"),
            }
        }
    }

    #[test]
    fn helper_conversions_carry_fields_through() {
        let mut cfg = RunConfig::default();
        cfg.connectivity = 8;
        cfg.direction_classes = 12;
        cfg.learning_rate = 2e-3;
        cfg.lambda_soft = 0.5;
        assert_eq!(cfg.grid_connectivity(), Connectivity::Eight);
        let cp = cfg.consistency_params();
        assert_eq!(cp.classes, 12);
        assert_eq!(cp.connectivity, Connectivity::Eight);
        let ts = cfg.train_settings();
        assert_eq!(ts.learning_rate, 2e-3);
        assert_eq!(ts.weights.soft, 0.5);
        let sc = cfg.scenario();
        assert_eq!(sc.seed, cfg.seed);
        let specs = cfg.scale_specs(320, 240).unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[0].regions_w, 20);
    }
}
