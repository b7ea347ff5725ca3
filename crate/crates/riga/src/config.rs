//! Run configuration: one flat key=value schema covering every tunable,
//! with strict validation and a canonical echo used in reports and
//! checkpoint hashes.

use crate::encoders::ModelDims;
use crate::error::{Error, Result};
use crate::geom::NormalOrientation;
use crate::losses::LossConfig;
use crate::matcher::{ExtractionMode, InterpolationConfig};
use crate::metrics::MetricThresholds;
use crate::solver::RansacConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthShape {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Composite,
    /// Cycles through the five shapes by pair index.
    Mixed,
}

impl SynthShape {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sphere" => SynthShape::Sphere,
            "box" => SynthShape::Box,
            "cylinder" => SynthShape::Cylinder,
            "torus" => SynthShape::Torus,
            "composite" => SynthShape::Composite,
            "mixed" => SynthShape::Mixed,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown shape {other:?} (expected sphere, box, cylinder, torus, composite or mixed)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthShape::Sphere => "sphere",
            SynthShape::Box => "box",
            SynthShape::Cylinder => "cylinder",
            SynthShape::Torus => "torus",
            SynthShape::Composite => "composite",
            SynthShape::Mixed => "mixed",
        }
    }

    /// Resolves `Mixed` to one of the five concrete shapes by cycling on
    /// `index`; concrete shapes return themselves.
    pub fn concrete(self, index: usize) -> SynthShape {
        const CYCLE: [SynthShape; 5] = [
            SynthShape::Sphere,
            SynthShape::Box,
            SynthShape::Cylinder,
            SynthShape::Torus,
            SynthShape::Composite,
        ];
        match self {
            SynthShape::Mixed => CYCLE[index % CYCLE.len()],
            other => other,
        }
    }
}

/// Every tunable of the pipeline. Field order here fixes the canonical
/// key order in reports and the config hash.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // Geometry.
    pub normals_k: usize,
    pub orientation: NormalOrientation,
    pub node_count: usize,
    pub support_radius: f64,
    pub support_max: usize,
    pub vicinity_max: usize,
    // Model.
    pub pointnet_hidden: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub relu_before_pool: bool,
    pub scaling_mode: crate::attention::ScalingMode,
    // Matching.
    pub interp_k: usize,
    pub interp_epsilon: f64,
    pub top_k: usize,
    pub sinkhorn_iterations: usize,
    pub extraction_mode: ExtractionMode,
    // Loss.
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau_p: f64,
    pub anchors_per_frame: usize,
    pub gt_coarse_count: usize,
    // Solver.
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
    pub ransac_sample_size: usize,
    pub unit_refit: bool,
    // Metrics.
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub rmse1_conventional: bool,
    // Training.
    pub lr: f64,
    pub lr_decay: f64,
    // Synthesis.
    pub synth_shape: SynthShape,
    pub n_points: usize,
    pub partial_points: usize,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub rot_max_deg: f64,
    pub trans_range: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            normals_k: 16,
            orientation: NormalOrientation::TowardViewpoint,
            node_count: 256,
            support_radius: 0.3,
            support_max: 32,
            vicinity_max: 128,
            pointnet_hidden: 64,
            width: 256,
            heads: 4,
            blocks: 6,
            relu_before_pool: true,
            scaling_mode: crate::attention::ScalingMode::PreSoftmax,
            interp_k: 3,
            interp_epsilon: 1e-9,
            top_k: 256,
            sinkhorn_iterations: 100,
            extraction_mode: ExtractionMode::RowAndColArgmax,
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 10.0,
            lambda: 1.0,
            tau_p: 0.05,
            anchors_per_frame: 256,
            gt_coarse_count: 256,
            ransac_iterations: 5000,
            inlier_threshold: 0.05,
            ransac_sample_size: 3,
            unit_refit: false,
            tau1: 0.10,
            tau2: 0.05,
            tau3: 0.20,
            rmse1_conventional: false,
            lr: 1e-4,
            lr_decay: 0.95,
            synth_shape: SynthShape::Mixed,
            n_points: 1024,
            partial_points: 768,
            noise_sigma: 0.01,
            noise_clip: 0.05,
            rot_max_deg: 45.0,
            trans_range: 0.5,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigValue { key: key.to_string(), msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad(key, format!("expected true/false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one key=value assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "normals_k" => self.normals_k = parse_num(key, value)?,
            "orientation" => {
                self.orientation = match value {
                    "toward_viewpoint" => NormalOrientation::TowardViewpoint,
                    "away_from_centroid" => NormalOrientation::AwayFromCentroid,
                    _ => {
                        return Err(bad(
                            key,
                            format!("expected toward_viewpoint or away_from_centroid, got {value:?}"),
                        ))
                    }
                }
            }
            "node_count" => self.node_count = parse_num(key, value)?,
            "support_radius" => self.support_radius = parse_num(key, value)?,
            "support_max" => self.support_max = parse_num(key, value)?,
            "vicinity_max" => self.vicinity_max = parse_num(key, value)?,
            "pointnet_hidden" => self.pointnet_hidden = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "blocks" => self.blocks = parse_num(key, value)?,
            "relu_before_pool" => self.relu_before_pool = parse_bool(key, value)?,
            "scaling_mode" => {
                self.scaling_mode = crate::attention::ScalingMode::parse(value)
                    .map_err(|e| bad(key, e.to_string()))?
            }
            "interp_k" => self.interp_k = parse_num(key, value)?,
            "interp_epsilon" => self.interp_epsilon = parse_num(key, value)?,
            "top_k" => self.top_k = parse_num(key, value)?,
            "sinkhorn_iterations" => self.sinkhorn_iterations = parse_num(key, value)?,
            "extraction_mode" => {
                self.extraction_mode =
                    ExtractionMode::parse(value).map_err(|e| bad(key, e.to_string()))?
            }
            "delta_p" => self.delta_p = parse_num(key, value)?,
            "delta_n" => self.delta_n = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "tau_p" => self.tau_p = parse_num(key, value)?,
            "anchors_per_frame" => self.anchors_per_frame = parse_num(key, value)?,
            "gt_coarse_count" => self.gt_coarse_count = parse_num(key, value)?,
            "ransac_iterations" => self.ransac_iterations = parse_num(key, value)?,
            "inlier_threshold" => self.inlier_threshold = parse_num(key, value)?,
            "ransac_sample_size" => self.ransac_sample_size = parse_num(key, value)?,
            "unit_refit" => self.unit_refit = parse_bool(key, value)?,
            "tau1" => self.tau1 = parse_num(key, value)?,
            "tau2" => self.tau2 = parse_num(key, value)?,
            "tau3" => self.tau3 = parse_num(key, value)?,
            "rmse1_conventional" => self.rmse1_conventional = parse_bool(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_decay" => self.lr_decay = parse_num(key, value)?,
            "synth_shape" => {
                self.synth_shape = SynthShape::parse(value).map_err(|e| bad(key, e.to_string()))?
            }
            "n_points" => self.n_points = parse_num(key, value)?,
            "partial_points" => self.partial_points = parse_num(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "noise_clip" => self.noise_clip = parse_num(key, value)?,
            "rot_max_deg" => self.rot_max_deg = parse_num(key, value)?,
            "trans_range" => self.trans_range = parse_num(key, value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses `key = value` lines; '#' starts a comment, blank lines are
    /// skipped. Later assignments override earlier ones.
    pub fn from_str_overriding(base: RunConfig, text: &str) -> Result<RunConfig> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ParseLine {
                    line: lineno + 1,
                    msg: format!("expected key=value, got {line:?}"),
                });
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::UnknownConfigKey(k) => Error::ParseLine {
                    line: lineno + 1,
                    msg: format!("unknown config key {k:?}"),
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Self::from_str_overriding(RunConfig::default(), text)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("support_radius", self.support_radius),
            ("interp_epsilon", self.interp_epsilon),
            ("gamma", self.gamma),
            ("tau_p", self.tau_p),
            ("inlier_threshold", self.inlier_threshold),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau3", self.tau3),
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(key, format!("must be positive and finite, got {v}")));
            }
        }
        let at_least_one = [
            ("normals_k", self.normals_k),
            ("node_count", self.node_count),
            ("support_max", self.support_max),
            ("vicinity_max", self.vicinity_max),
            ("pointnet_hidden", self.pointnet_hidden),
            ("width", self.width),
            ("heads", self.heads),
            ("interp_k", self.interp_k),
            ("top_k", self.top_k),
            ("sinkhorn_iterations", self.sinkhorn_iterations),
            ("anchors_per_frame", self.anchors_per_frame),
            ("gt_coarse_count", self.gt_coarse_count),
            ("ransac_iterations", self.ransac_iterations),
            ("n_points", self.n_points),
            ("partial_points", self.partial_points),
        ];
        for (key, v) in at_least_one {
            if v == 0 {
                return Err(bad(key, "must be >= 1"));
            }
        }
        if self.width % self.heads != 0 {
            return Err(bad("heads", format!("width {} not divisible by {}", self.width, self.heads)));
        }
        if !(self.delta_p < self.delta_n) {
            return Err(bad("delta_p", format!("must be below delta_n ({} vs {})", self.delta_p, self.delta_n)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(bad("lambda", "must be finite and nonnegative"));
        }
        if self.ransac_sample_size < 3 {
            return Err(bad("ransac_sample_size", "must be >= 3"));
        }
        if self.partial_points > self.n_points {
            return Err(bad(
                "partial_points",
                format!("{} exceeds n_points {}", self.partial_points, self.n_points),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(bad("noise_sigma", "must be finite and nonnegative"));
        }
        if !(self.noise_clip.is_finite() && self.noise_clip >= 0.0) {
            return Err(bad("noise_clip", "must be finite and nonnegative"));
        }
        if !(self.rot_max_deg.is_finite() && (0.0..=180.0).contains(&self.rot_max_deg)) {
            return Err(bad("rot_max_deg", "must lie in [0, 180]"));
        }
        if !(self.trans_range.is_finite() && self.trans_range >= 0.0) {
            return Err(bad("trans_range", "must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            ppf_in: 4,
            pointnet_hidden: self.pointnet_hidden,
            width: self.width,
            heads: self.heads,
            blocks: self.blocks,
            proj_dims: ModelDims::proj_dims_for(self.width),
            relu_before_pool: self.relu_before_pool,
        }
    }

    pub fn interpolation(&self) -> InterpolationConfig {
        InterpolationConfig { k: self.interp_k, epsilon: self.interp_epsilon }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            delta_p: self.delta_p,
            delta_n: self.delta_n,
            gamma: self.gamma,
            tau_p: self.tau_p,
            anchors_per_frame: self.anchors_per_frame,
        }
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            iterations: self.ransac_iterations,
            inlier_threshold: self.inlier_threshold,
            sample_size: self.ransac_sample_size,
            seed: self.seed,
            unit_refit: self.unit_refit,
        }
    }

    pub fn thresholds(&self) -> MetricThresholds {
        MetricThresholds { tau1: self.tau1, tau2: self.tau2, tau3: self.tau3 }
    }

    fn fmt_f64(v: f64) -> String {
        // Shortest representation that round-trips keeps the echo canonical.
        format!("{v}")
    }

    /// Canonical `key=value` lines, one per field, fixed order.
    pub fn to_kv_lines(&self) -> Vec<String> {
        let b = |v: bool| if v { "true" } else { "false" };
        vec![
            format!("seed={}", self.seed),
            format!("normals_k={}", self.normals_k),
            format!(
                "orientation={}",
                match self.orientation {
                    NormalOrientation::TowardViewpoint => "toward_viewpoint",
                    NormalOrientation::AwayFromCentroid => "away_from_centroid",
                }
            ),
            format!("node_count={}", self.node_count),
            format!("support_radius={}", Self::fmt_f64(self.support_radius)),
            format!("support_max={}", self.support_max),
            format!("vicinity_max={}", self.vicinity_max),
            format!("pointnet_hidden={}", self.pointnet_hidden),
            format!("width={}", self.width),
            format!("heads={}", self.heads),
            format!("blocks={}", self.blocks),
            format!("relu_before_pool={}", b(self.relu_before_pool)),
            format!("scaling_mode={}", self.scaling_mode.name()),
            format!("interp_k={}", self.interp_k),
            format!("interp_epsilon={}", Self::fmt_f64(self.interp_epsilon)),
            format!("top_k={}", self.top_k),
            format!("sinkhorn_iterations={}", self.sinkhorn_iterations),
            format!("extraction_mode={}", self.extraction_mode.name()),
            format!("delta_p={}", Self::fmt_f64(self.delta_p)),
            format!("delta_n={}", Self::fmt_f64(self.delta_n)),
            format!("gamma={}", Self::fmt_f64(self.gamma)),
            format!("lambda={}", Self::fmt_f64(self.lambda)),
            format!("tau_p={}", Self::fmt_f64(self.tau_p)),
            format!("anchors_per_frame={}", self.anchors_per_frame),
            format!("gt_coarse_count={}", self.gt_coarse_count),
            format!("ransac_iterations={}", self.ransac_iterations),
            format!("inlier_threshold={}", Self::fmt_f64(self.inlier_threshold)),
            format!("ransac_sample_size={}", self.ransac_sample_size),
            format!("unit_refit={}", b(self.unit_refit)),
            format!("tau1={}", Self::fmt_f64(self.tau1)),
            format!("tau2={}", Self::fmt_f64(self.tau2)),
            format!("tau3={}", Self::fmt_f64(self.tau3)),
            format!("rmse1_conventional={}", b(self.rmse1_conventional)),
            format!("lr={}", Self::fmt_f64(self.lr)),
            format!("lr_decay={}", Self::fmt_f64(self.lr_decay)),
            format!("synth_shape={}", self.synth_shape.name()),
            format!("n_points={}", self.n_points),
            format!("partial_points={}", self.partial_points),
            format!("noise_sigma={}", Self::fmt_f64(self.noise_sigma)),
            format!("noise_clip={}", Self::fmt_f64(self.noise_clip)),
            format!("rot_max_deg={}", Self::fmt_f64(self.rot_max_deg)),
            format!("trans_range={}", Self::fmt_f64(self.trans_range)),
        ]
    }

    /// FNV-1a over the canonical echo; stored in checkpoints to flag
    /// architecture drift.
    pub fn hash(&self) -> u64 {
        let mut text = String::new();
        for line in self.to_kv_lines() {
            let _ = writeln!(text, "{line}");
        }
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in text.bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
