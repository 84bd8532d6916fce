//! Run configuration shared by training, checkpoints and inference.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::geometry::{patch_layout, PatchBox, PatchStrategy, PyramidSpec};
use crate::nn::efficientnet::EfficientNetConfig;
use crate::nn::tiny::TinyConfig;

/// Application protocol a model is trained or evaluated under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Binary detector: normal vs distressed.
    #[serde(rename = "i-det")]
    IDet,
    /// One-stage recognizer: normal plus every distress type.
    #[serde(rename = "i-rec")]
    IRec,
    /// Second-stage recognizer trained and tested on distressed images only.
    #[serde(rename = "ii-rec-i")]
    IIRecI,
    /// Detector chained with a second-stage recognizer.
    #[serde(rename = "ii-rec-n")]
    IIRecN,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::IDet => "i-det",
            Setting::IRec => "i-rec",
            Setting::IIRecI => "ii-rec-i",
            Setting::IIRecN => "ii-rec-n",
        }
    }

    pub fn is_detection(&self) -> bool {
        matches!(self, Setting::IDet)
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i-det" => Ok(Setting::IDet),
            "i-rec" => Ok(Setting::IRec),
            "ii-rec-i" => Ok(Setting::IIRecI),
            "ii-rec-n" => Ok(Setting::IIRecN),
            other => Err(Error::InvalidConfig(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneConfig {
    Tiny(TinyConfig),
    EffnetB3(EfficientNetConfig),
}

/// Patch label inference backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub config: BackboneConfig,
    /// Whether initial weights were loaded from a pretrained file.
    pub pretrained: bool,
}

impl BackboneSpec {
    pub fn tiny() -> Self {
        Self {
            config: BackboneConfig::Tiny(TinyConfig::default()),
            pretrained: false,
        }
    }

    pub fn effnet_b3() -> Self {
        Self {
            config: BackboneConfig::EffnetB3(EfficientNetConfig::b3()),
            pretrained: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.config {
            BackboneConfig::Tiny(_) => "tiny",
            BackboneConfig::EffnetB3(_) => "effnet-b3",
        }
    }
}

/// Decision network widths: three `m*C` affine layers and a `C` output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdnSpec {
    pub hidden_width: usize,
    pub out_width: usize,
    pub dropout_rate: f64,
}

impl CdnSpec {
    pub fn new(patches: usize, classes: usize, dropout_rate: f64) -> Self {
        Self {
            hidden_width: patches * classes,
            out_width: classes,
            dropout_rate,
        }
    }
}

/// Everything needed to rebuild a model and its input pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub setting: Setting,
    pub strategy: PatchStrategy,
    /// Sparse sampling ratio; only used by [`PatchStrategy::SparseSampling`].
    pub alpha: f64,
    pub lambda: f64,
    pub class_names: Vec<String>,
    /// Index excluded from the sparsity penalty; `None` when every class is a
    /// distress type.
    pub normal_class: Option<usize>,
    pub pyramid: PyramidSpec,
    pub backbone: BackboneSpec,
    pub cdn_dropout: f64,
    pub augment: Option<AugmentSpec>,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(setting: Setting, class_names: Vec<String>, normal_class: Option<usize>) -> Self {
        Self {
            setting,
            strategy: PatchStrategy::ImagePyramid,
            alpha: 0.25,
            lambda: 1e-3,
            class_names,
            normal_class,
            pyramid: PyramidSpec::default(),
            backbone: BackboneSpec::effnet_b3(),
            cdn_dropout: 0.5,
            augment: Some(AugmentSpec::default()),
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn layout(&self) -> Result<Vec<PatchBox>> {
        patch_layout(self.strategy, &self.pyramid, self.alpha)
    }

    pub fn cdn_spec(&self) -> Result<CdnSpec> {
        Ok(CdnSpec::new(self.layout()?.len(), self.num_classes(), self.cdn_dropout))
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {c}")));
        }
        if self.setting == Setting::IDet && c != 2 {
            return Err(Error::InvalidConfig(format!("i-det needs 2 classes, got {c}")));
        }
        if let Some(n) = self.normal_class {
            if n >= c {
                return Err(Error::InvalidConfig(format!("normal class {n} out of range for {c} classes")));
            }
        }
        if self.setting == Setting::IIRecI && self.normal_class.is_some() {
            return Err(Error::InvalidConfig("ii-rec-i has no normal class".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.cdn_dropout) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {}", self.cdn_dropout)));
        }
        if self.strategy == PatchStrategy::SparseSampling && !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        self.layout()?;
        Ok(())
    }

    /// Canonical JSON used for run directories and checkpoint metadata.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut cfg = PipelineConfig::new(Setting::IRec, vec!["normal".into(), "crack".into(), "repair".into()], Some(0));
        cfg.backbone = BackboneSpec::tiny();
        let back: PipelineConfig = serde_json::from_str(&cfg.to_canonical_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.to_canonical_json().contains("\"setting\": \"i-rec\""));
        assert_eq!(cfg.cdn_spec().unwrap().hidden_width, 17 * 3);
    }

    #[test]
    fn validation() {
        let names = |n: usize| (0..n).map(|i| format!("c{i}")).collect::<Vec<_>>();
        assert!(PipelineConfig::new(Setting::IDet, names(3), Some(0)).validate().is_err());
        assert!(PipelineConfig::new(Setting::IIRecI, names(3), Some(0)).validate().is_err());
        assert!(PipelineConfig::new(Setting::IIRecI, names(3), None).validate().is_ok());
        let mut cfg = PipelineConfig::new(Setting::IDet, names(2), Some(0));
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        cfg.lambda = 0.0;
        cfg.strategy = PatchStrategy::SparseSampling;
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
    }
}
