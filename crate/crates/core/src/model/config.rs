use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How voting points contribute to a voxel's mean score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteMode {
    /// Average the full per-class score rows.
    #[default]
    Distribution,
    /// Replace each row by a one-hot vector at its argmax before averaging.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsvConfig {
    /// Point-count threshold at the reference distance.
    #[serde(alias = "T_n")]
    pub count_threshold: f64,
    /// Minimum winning mean score.
    #[serde(alias = "T_s")]
    pub score_threshold: f64,
    /// Reference distance in meters at which the count threshold applies unscaled.
    #[serde(alias = "D")]
    pub reference_distance: f64,
    pub vote_mode: VoteMode,
}

impl Default for VsvConfig {
    fn default() -> Self {
        Self {
            count_threshold: 3.0,
            score_threshold: 0.4,
            reference_distance: 20.0,
            vote_mode: VoteMode::Distribution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weights of (weighted cls, kl, cross-modal distill, pcl, vote).
    pub alphas: [f64; 5],
    /// Contrastive temperature.
    pub tau: f64,
    /// Prototype momentum.
    pub theta: f64,
    /// Prediction threshold for reliable current-frame points.
    pub phi: f64,
    /// Pseudo-label confidence threshold for reliable current-frame points.
    pub t_conf: f64,
    pub distill_temperature: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alphas: [100.0, 10.0, 1.0, 1.0, 1.0],
            tau: 0.5,
            theta: 0.9,
            phi: 0.65,
            t_conf: 0.4,
            distill_temperature: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }
}

/// Which vertical relation makes a person box count as riding a bicycle
/// box. Image `v` grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerticalRule {
    /// Person bottom edge at or above the bicycle's vertical center.
    #[default]
    BottomAboveCenter,
    /// Person bottom edge at or above the bicycle's bottom edge.
    BottomAboveBottom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiderMergeConfig {
    pub enabled: bool,
    /// Maximum horizontal center offset, as a fraction of bicycle box width.
    pub horiz_tol: f64,
    pub vert_rule: VerticalRule,
    pub person_class: usize,
    pub bicycle_class: usize,
    pub cyclist_class: usize,
}

impl Default for RiderMergeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            horiz_tol: 0.5,
            vert_rule: VerticalRule::BottomAboveCenter,
            person_class: 1,
            bicycle_class: 2,
            cyclist_class: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub class_names: Vec<String>,
    pub prompt_to_class: BTreeMap<String, usize>,
    /// Voting voxel edge in meters.
    pub voxel_size: f64,
    /// Voxel edge for connectivity clustering in meters.
    pub cluster_voxel_size: f64,
    pub cvim_iou_threshold: f64,
    pub vsv: VsvConfig,
    pub ofr_frames: usize,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub rider_merge: RiderMergeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let prompt_to_class = [
            ("car", 0),
            ("vehicle", 0),
            ("truck", 0),
            ("bus", 0),
            ("person", 1),
            ("pedestrian", 1),
            ("bicycle", 2),
            ("cyclist", 2),
        ]
        .into_iter()
        .map(|(p, c)| (p.to_string(), c))
        .collect();
        Self {
            class_names: vec!["vehicle".into(), "pedestrian".into(), "cyclist".into()],
            prompt_to_class,
            voxel_size: 0.2,
            cluster_voxel_size: 0.3,
            cvim_iou_threshold: 0.5,
            vsv: VsvConfig::default(),
            ofr_frames: 2,
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            rider_merge: RiderMergeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization; identical content gives identical bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let c = self.num_classes();
        if c == 0 {
            problems.push("class_names is empty".to_string());
        }
        for (prompt, &class) in &self.prompt_to_class {
            if class >= c {
                problems.push(format!("prompt `{prompt}` maps to class {class} >= {c}"));
            }
        }
        let positive = [
            ("voxel_size", self.voxel_size),
            ("cluster_voxel_size", self.cluster_voxel_size),
            ("vsv.reference_distance", self.vsv.reference_distance),
            ("loss.tau", self.loss.tau),
            ("loss.distill_temperature", self.loss.distill_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive"));
            }
        }
        let unit = [
            ("cvim_iou_threshold", self.cvim_iou_threshold),
            ("vsv.score_threshold", self.vsv.score_threshold),
            ("loss.theta", self.loss.theta),
            ("loss.phi", self.loss.phi),
            ("loss.t_conf", self.loss.t_conf),
            ("loss.focal_alpha", self.loss.focal_alpha),
            ("rider_merge.horiz_tol", self.rider_merge.horiz_tol),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.vsv.count_threshold >= 0.0 && self.vsv.count_threshold.is_finite()) {
            problems.push("vsv.count_threshold must be non-negative".into());
        }
        if !(self.loss.focal_gamma >= 0.0) {
            problems.push("loss.focal_gamma must be non-negative".into());
        }
        if self.loss.alphas.iter().any(|a| !(*a >= 0.0)) {
            problems.push("loss.alphas must be non-negative".into());
        }
        if self.eval.iou_thresholds.is_empty()
            || self.eval.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            problems.push("eval.iou_thresholds must be a non-empty list in [0, 1]".into());
        }
        let rm = &self.rider_merge;
        if rm.enabled && (rm.person_class >= c || rm.bicycle_class >= c || rm.cyclist_class >= c) {
            problems.push("rider_merge classes out of range".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_classes(), 3);
        assert_eq!(cfg.eval.iou_thresholds.len(), 10);
        assert_eq!(cfg.loss.alphas, [100.0, 10.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn partial_json_fills_defaults_and_accepts_aliases() {
        let cfg = PipelineConfig::from_json(r#"{"ofr_frames": 1, "vsv": {"T_s": 0.6, "D": 10}}"#).unwrap();
        assert_eq!(cfg.ofr_frames, 1);
        assert_eq!(cfg.vsv.score_threshold, 0.6);
        assert_eq!(cfg.vsv.reference_distance, 10.0);
        assert_eq!(cfg.vsv.count_threshold, 3.0);
        assert_eq!(cfg.voxel_size, 0.2);
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(PipelineConfig::from_json(r#"{"loss": {"theta": 1.5}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"voxel_size": 0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"prompt_to_class": {"dog": 7}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn canonical_json_roundtrips() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_json(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical_json(), cfg.canonical_json());
    }
}
