//! Model configuration: one JSON document covering architecture switches,
//! thresholds, and anchors.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::attention::AttentionKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsiFormerConfig {
    pub enabled: bool,
    pub layers: usize,
    pub order: usize,
    pub mlp_ratio: f64,
}

impl Default for HsiFormerConfig {
    fn default() -> Self {
        HsiFormerConfig {
            enabled: true,
            layers: 1,
            order: 3,
            mlp_ratio: 4.0,
        }
    }
}

/// Every switch needed to rebuild the shipped model or any ablation variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width_multiplier: f64,
    pub input_size: usize,
    pub num_classes: usize,
    pub attention: AttentionKind,
    /// Tiny-object branch: stride-4 pyramid level and its head.
    pub tiny_branch: bool,
    pub hsi_former: HsiFormerConfig,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub max_detections: usize,
    pub anchors: AnchorSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_multiplier: 1.0,
            input_size: 640,
            num_classes: 1,
            attention: AttentionKind::Lhab,
            tiny_branch: true,
            hsi_former: HsiFormerConfig::default(),
            conf_threshold: 0.25,
            iou_threshold: 0.45,
            max_detections: 300,
            anchors: AnchorSet::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_multiplier <= 0.0 || !self.width_multiplier.is_finite() {
            return Err(Error::Config(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be >= 1".into()));
        }
        if self.hsi_former.enabled {
            if self.hsi_former.layers == 0 || self.hsi_former.order == 0 {
                return Err(Error::Config(
                    "hsi_former layers and order must be >= 1".into(),
                ));
            }
            if self.hsi_former.mlp_ratio <= 0.0 {
                return Err(Error::Config("hsi_former mlp_ratio must be > 0".into()));
            }
        }
        self.anchors
            .validate()
            .map_err(|e| Error::Config(format!("anchors: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let config = ModelConfig::default();
        let text = config.to_json();
        let back = ModelConfig::from_json(&text).unwrap();
        assert_eq!(back.width_multiplier, 1.0);
        assert_eq!(back.input_size, 640);
        assert_eq!(back.anchors, config.anchors);
        assert_eq!(back.attention, AttentionKind::Lhab);
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut c = ModelConfig::default();
        c.input_size = 100;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.width_multiplier = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.conf_threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.anchors.groups[0][0] = (0.0, 5.0);
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_json("{\"unknown_field\": 1}").is_err());
    }

    #[test]
    fn ablation_switches_parse() {
        let text = r#"{
            "width_multiplier": 0.5,
            "attention": "eca_shared",
            "tiny_branch": false,
            "hsi_former": {"enabled": false, "layers": 1, "order": 3, "mlp_ratio": 4.0}
        }"#;
        let config = ModelConfig::from_json(text).unwrap();
        assert_eq!(config.attention, AttentionKind::EcaShared);
        assert!(!config.tiny_branch);
        assert!(!config.hsi_former.enabled);
    }
}
