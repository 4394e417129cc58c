use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::IoError;
use crate::odometry::OdometryConfig;
use crate::voxel_map::MapConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Corridor,
    Room,
}

impl SceneKind {
    fn as_str(self) -> &'static str {
        match self {
            SceneKind::Corridor => "corridor",
            SceneKind::Room => "room",
        }
    }
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "corridor" => Ok(SceneKind::Corridor),
            "room" => Ok(SceneKind::Room),
            _ => Err(format!("unknown scene '{s}' (expected corridor or room)")),
        }
    }
}

/// Parameters of the `synth` subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scene: SceneKind,
    /// Trajectory length along the corridor, m.
    pub length: f64,
    pub scans: usize,
    pub rays: usize,
    /// Range noise standard deviation, m.
    pub noise: f64,
    pub outliers: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneKind::Corridor,
            length: 20.0,
            scans: 200,
            rays: 5760,
            noise: 0.01,
            outliers: 0.1,
        }
    }
}

/// Everything a CLI run needs. The RNG seed lives in `map.seed`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub map: MapConfig,
    pub odometry: OdometryConfig,
    pub synth: SynthConfig,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, IoError> {
    value
        .parse()
        .map_err(|_| IoError::Config(format!("{key}: cannot parse '{value}'")))
}

impl RunConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.map;
        let o = &self.odometry;
        let s = &self.synth;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("voxel_size", m.voxel_size.to_string()),
            ("max_depth", m.max_depth.to_string()),
            ("distance_threshold", m.distance_threshold.to_string()),
            ("inlier_ratio", m.inlier_ratio.to_string()),
            ("ransac_iterations", m.ransac_iterations.to_string()),
            ("min_points", m.min_points.to_string()),
            ("planarity_threshold", m.planarity_threshold.to_string()),
            ("grid_divisor", m.grid_divisor.to_string()),
            ("lru_capacity", m.lru_capacity.to_string()),
            ("rebuild_point_threshold", m.rebuild_point_threshold.to_string()),
            ("converged_cov_trace", m.converged_cov_trace.to_string()),
            ("seed", m.seed.to_string()),
            ("downsample", o.downsample.to_string()),
            ("max_iterations", o.max_iterations.to_string()),
            ("max_dist", o.max_dist.to_string()),
            ("sigma_gate", o.sigma_gate.to_string()),
            ("min_match_ratio", o.min_match_ratio.to_string()),
            ("convergence_tol", o.convergence_tol.to_string()),
            ("process_noise_rot", o.process_noise_rot.to_string()),
            ("process_noise_trans", o.process_noise_trans.to_string()),
            ("range_sigma", o.sensor_noise.range_sigma.to_string()),
            ("bearing_sigma_deg", o.sensor_noise.bearing_sigma_deg.to_string()),
            ("synth_scene", s.scene.as_str().to_string()),
            ("synth_length", s.length.to_string()),
            ("synth_scans", s.scans.to_string()),
            ("synth_rays", s.rays.to_string()),
            ("synth_noise", s.noise.to_string()),
            ("synth_outliers", s.outliers.to_string()),
            ("dataset", path(&self.dataset)),
            ("output", path(&self.output)),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), IoError> {
        let m = &mut self.map;
        let o = &mut self.odometry;
        let s = &mut self.synth;
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "voxel_size" => m.voxel_size = parse(key, v)?,
            "max_depth" => m.max_depth = parse(key, v)?,
            "distance_threshold" => m.distance_threshold = parse(key, v)?,
            "inlier_ratio" => m.inlier_ratio = parse(key, v)?,
            "ransac_iterations" => m.ransac_iterations = parse(key, v)?,
            "min_points" => m.min_points = parse(key, v)?,
            "planarity_threshold" => m.planarity_threshold = parse(key, v)?,
            "grid_divisor" => m.grid_divisor = parse(key, v)?,
            "lru_capacity" => m.lru_capacity = parse(key, v)?,
            "rebuild_point_threshold" => m.rebuild_point_threshold = parse(key, v)?,
            "converged_cov_trace" => m.converged_cov_trace = parse(key, v)?,
            "seed" => m.seed = parse(key, v)?,
            "downsample" => o.downsample = parse(key, v)?,
            "max_iterations" => o.max_iterations = parse(key, v)?,
            "max_dist" => o.max_dist = parse(key, v)?,
            "sigma_gate" => o.sigma_gate = parse(key, v)?,
            "min_match_ratio" => o.min_match_ratio = parse(key, v)?,
            "convergence_tol" => o.convergence_tol = parse(key, v)?,
            "process_noise_rot" => o.process_noise_rot = parse(key, v)?,
            "process_noise_trans" => o.process_noise_trans = parse(key, v)?,
            "range_sigma" => o.sensor_noise.range_sigma = parse(key, v)?,
            "bearing_sigma_deg" => o.sensor_noise.bearing_sigma_deg = parse(key, v)?,
            "synth_scene" => s.scene = v.parse().map_err(IoError::Config)?,
            "synth_length" => s.length = parse(key, v)?,
            "synth_scans" => s.scans = parse(key, v)?,
            "synth_rays" => s.rays = parse(key, v)?,
            "synth_noise" => s.noise = parse(key, v)?,
            "synth_outliers" => s.outliers = parse(key, v)?,
            "dataset" => self.dataset = path(v),
            "output" => self.output = path(v),
            _ => return Err(IoError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), IoError> {
        self.map.validate().map_err(|e| IoError::Config(e.to_string()))?;
        self.odometry.validate().map_err(|e| IoError::Config(e.to_string()))?;
        let s = &self.synth;
        if !(s.length > 0.0 && s.length.is_finite()) {
            return Err(IoError::Config("synth_length must be positive".into()));
        }
        if s.scans == 0 || s.rays == 0 {
            return Err(IoError::Config("synth_scans and synth_rays must be positive".into()));
        }
        if !(s.noise >= 0.0 && s.noise.is_finite()) {
            return Err(IoError::Config("synth_noise must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&s.outliers) {
            return Err(IoError::Config("synth_outliers must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parse `key = value` lines. Keys not present keep their defaults.
    pub fn parse_str(text: &str) -> Result<Self, IoError> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| IoError::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(IoError::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, self.to_text()).map_err(|e| IoError::io(path, e))
    }
}
