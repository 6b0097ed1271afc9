//! The run configuration: one TOML document with a section per component.
//! Every key has a default and unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::directions::DirectionsConfig;
use crate::encoder_w::BaseEncoderConfig;
use crate::error::{CoreError, Result};
use crate::evalsuite::EvalConfig;
use crate::feature_editor::FeatureEditorConfig;
use crate::inverter::InverterConfig;
use crate::stylegen::{layer_resolution, GeneratorConfig};
use crate::toyworld::{check_resolution, AttributePriors};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub priors: AttributePriors,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 6000, test_size: 400, seed: 0, priors: AttributePriors::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
    pub encoder_e: BaseEncoderConfig,
    pub inverter: InverterConfig,
    pub feature_editor: FeatureEditorConfig,
    pub directions: DirectionsConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| CoreError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&s).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check_resolution(self.generator.image_resolution)?;
        self.generator.validate()?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(CoreError::Config("data sizes must be positive".into()));
        }
        self.encoder_e.validate()?;
        self.inverter.validate(&self.generator)?;
        self.directions.validate()?;
        self.train.validate(self.generator.num_layers())?;
        self.train.loss.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// The configuration an ablation trains with.
    pub fn ablated(&self, a: Ablation) -> Result<Self> {
        let mut c = self.clone();
        match a {
            Ablation::NoH => c.train.ablation.no_h = true,
            Ablation::NoFuser => c.train.ablation.no_fuser = true,
            Ablation::NoInvLoss => c.train.ablation.no_inv_loss = true,
            Ablation::NoE => c.train.ablation.no_e = true,
            Ablation::DSmall => c.train.ablation.d_small = true,
            Ablation::KSmall => {
                let k = c.train.ablation.k_small;
                c.inverter = c.inverter.for_layer(k, c.generator.image_resolution)?;
                c.train.ablation.k_override = Some(k);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl InverterConfig {
    /// Copy splicing at layer `k`, with backbone strides adjusted so the
    /// feature tap lands on `k`'s resolution.
    pub fn for_layer(&self, k: usize, input: usize) -> Result<Self> {
        let target = layer_resolution(k);
        let tap = self.feature_tap_stage;
        if target == 0 || input % target != 0 || !(input / target).is_power_of_two() {
            return Err(CoreError::Config(format!("layer {k} ({target}px) does not divide {input}px input")));
        }
        let halvings = (input / target).trailing_zeros() as usize;
        if halvings > tap {
            return Err(CoreError::Config(format!("layer {k} needs {halvings} halvings before stage {tap}")));
        }
        let mut strides = [1; 4];
        for s in strides.iter_mut().take(halvings) {
            *s = 2;
        }
        if tap < 4 && target > 4 {
            strides[tap] = 2;
        }
        Ok(Self { k, backbone_strides: strides, ..self.clone() })
    }
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "no_H")]
    NoH,
    #[serde(rename = "no_fuser")]
    NoFuser,
    #[serde(rename = "no_inv_loss")]
    NoInvLoss,
    #[serde(rename = "no_E")]
    NoE,
    #[serde(rename = "k_small")]
    KSmall,
    #[serde(rename = "D_small")]
    DSmall,
}

impl Ablation {
    pub const ALL: [Ablation; 6] =
        [Ablation::NoH, Ablation::NoFuser, Ablation::NoInvLoss, Ablation::NoE, Ablation::KSmall, Ablation::DSmall];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoH => "no_H",
            Self::NoFuser => "no_fuser",
            Self::NoInvLoss => "no_inv_loss",
            Self::NoE => "no_E",
            Self::KSmall => "k_small",
            Self::DSmall => "D_small",
        }
    }

    /// Whether the ablation changes phase 1 (and so needs its own).
    pub fn retrains_phase1(self) -> bool {
        matches!(self, Self::NoFuser | Self::KSmall)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| CoreError::UnknownAblation(s.to_string()))
    }
}
