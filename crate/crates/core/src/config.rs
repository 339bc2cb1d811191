//! Flat `key = value` configuration covering every tunable constant.

use crate::frontend::DetectorState;
use crate::mapper::MapperConfig;
use crate::posegraph::GraphConfig;
use crate::relocalizer::RelocalizerConfig;
use crate::stereo::TriangulationConfig;
use crate::tracker::TrackerConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlamConfig {
    pub detector: DetectorState,
    pub triangulation: TriangulationConfig,
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
    pub relocalizer: RelocalizerConfig,
    pub graph: GraphConfig,
    pub relocalization: bool,
    /// Consecutive frames without a reliable pose before tracking halts.
    pub max_lost_frames: usize,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            detector: DetectorState::default(),
            triangulation: TriangulationConfig::default(),
            tracker: TrackerConfig::default(),
            mapper: MapperConfig::default(),
            relocalizer: RelocalizerConfig::default(),
            graph: GraphConfig::default(),
            relocalization: true,
            max_lost_frames: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

macro_rules! keys {
    ($($name:literal => $($field:ident).+),* $(,)?) => {
        impl SlamConfig {
            /// Every recognized key.
            pub const KEYS: &'static [&'static str] = &[$($name),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($name => self.$($field).+ = parse(key, value)?,)*
                    "graph.odometry_translation_information" => {
                        let v: f64 = parse(key, value)?;
                        for i in 0..3 { self.graph.odometry_information[(i, i)] = v; }
                    }
                    "graph.odometry_rotation_information" => {
                        let v: f64 = parse(key, value)?;
                        for i in 3..6 { self.graph.odometry_information[(i, i)] = v; }
                    }
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $name, self.$($field).+));)*
                out.push_str(&format!("graph.odometry_translation_information = {}\n", self.graph.odometry_information[(0, 0)]));
                out.push_str(&format!("graph.odometry_rotation_information = {}\n", self.graph.odometry_information[(3, 3)]));
                out
            }
        }
    };
}

keys! {
    "detector.threshold" => detector.threshold,
    "detector.target_count" => detector.target_count,
    "detector.band" => detector.band,
    "detector.min_threshold" => detector.min_threshold,
    "detector.max_threshold" => detector.max_threshold,
    "triangulation.max_distance" => triangulation.max_distance,
    "triangulation.bin_size" => triangulation.bin_size,
    "tracker.search_half_width" => tracker.search_half_width,
    "tracker.search_half_height" => tracker.search_half_height,
    "tracker.match_max_distance" => tracker.match_max_distance,
    "tracker.iterations" => tracker.iterations,
    "tracker.kernel_maximum_error" => tracker.kernel_maximum_error,
    "tracker.close_depth" => tracker.close_depth,
    "tracker.maximum_depth" => tracker.maximum_depth,
    "tracker.landmark_weight" => tracker.landmark_weight,
    "tracker.min_inliers" => tracker.min_inliers,
    "tracker.max_lost_frames" => max_lost_frames,
    "mapper.recovery_max_distance" => mapper.recovery_max_distance,
    "mapper.min_track_for_landmark" => mapper.min_track_for_landmark,
    "mapper.map_translation_threshold" => mapper.map_translation_threshold,
    "mapper.map_rotation_threshold" => mapper.map_rotation_threshold,
    "mapper.measurement_sigma" => mapper.measurement_sigma,
    "relocalizer.enabled" => relocalization,
    "relocalizer.max_leaf_size" => relocalizer.max_leaf_size,
    "relocalizer.max_depth" => relocalizer.max_depth,
    "relocalizer.query_max_distance" => relocalizer.query_max_distance,
    "relocalizer.min_overlap" => relocalizer.min_overlap,
    "relocalizer.temporal_gap" => relocalizer.temporal_gap,
    "relocalizer.icp_inlier_threshold" => relocalizer.icp_inlier_threshold,
    "relocalizer.icp_iterations" => relocalizer.icp_iterations,
    "relocalizer.min_inliers" => relocalizer.min_inliers,
    "relocalizer.max_mean_error" => relocalizer.max_mean_error,
    "graph.closure_translation_scale" => graph.closure_translation_scale,
    "graph.iterations" => graph.iterations,
    "graph.min_update_norm" => graph.min_update_norm,
}

impl SlamConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.detector;
        if d.min_threshold > d.max_threshold || !(d.min_threshold..=d.max_threshold).contains(&d.threshold) {
            return Err(ConfigError::Invalid("detector threshold outside its clamp range".into()));
        }
        if self.triangulation.bin_size == 0 {
            return Err(ConfigError::Invalid("triangulation.bin_size must be positive".into()));
        }
        self.tracker.validate().map_err(ConfigError::Invalid)?;
        self.mapper.validate().map_err(ConfigError::Invalid)?;
        self.relocalizer.validate().map_err(ConfigError::Invalid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = SlamConfig::default();
        assert_eq!(SlamConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn values_comments_and_overrides() {
        let mut cfg = SlamConfig::from_text("# tuned\ntracker.iterations = 7\n\nrelocalizer.enabled=false # off\n").unwrap();
        assert_eq!(cfg.tracker.iterations, 7);
        assert!(!cfg.relocalization);
        cfg.apply_overrides(["tracker.iterations=12", "graph.odometry_rotation_information=50"]).unwrap();
        assert_eq!(cfg.tracker.iterations, 12);
        assert_eq!(cfg.graph.odometry_information[(4, 4)], 50.0);
    }

    #[test]
    fn errors() {
        assert_eq!(SlamConfig::from_text("nope = 1"), Err(ConfigError::UnknownKey("nope".into())));
        assert!(matches!(SlamConfig::from_text("tracker.iterations = x"), Err(ConfigError::BadValue { .. })));
        assert_eq!(SlamConfig::from_text("tracker.iterations"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(SlamConfig::from_text("tracker.close_depth = 80"), Err(ConfigError::Invalid(_))));
    }
}
