//! JSON run configuration shared by the CLI commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{controller_preset, LqrSpec};
use crate::fit::ObjectiveMode;
use crate::ipcurve::DescriptorMode;
use crate::metrics::PrecisionDenominator;
use crate::model::{Gait, PendulumModel};
use crate::signal::BandSpec;
use crate::sim::SimConfig;
use crate::{Error, Result};

/// A preset name (`tip-default`, `dip-default`) or an inline parameter document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Inline(PendulumModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineController {
    #[serde(flatten)]
    pub lqr: LqrSpec,
    pub sigma: Vec<f64>,
}

/// A preset name (`toi1` … `toi8`) or inline weights and noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControllerChoice {
    Preset(String),
    Inline(InlineController),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Checked against the model when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gait: Option<Gait>,
    pub model: ModelChoice,
    pub controller: ControllerChoice,
    pub sim: SimConfig,
    /// Defaults to the standard 38-band bank at the data rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bands: Option<BandSpec>,
    /// m. Defaults to the upright stance COM height of the standard body, for
    /// both gaits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_height: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub trials: usize,
    pub descriptor_mode: DescriptorMode,
    pub objective: ObjectiveMode,
    pub precision: PrecisionDenominator,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gait: None,
            model: ModelChoice::Preset("tip-default".into()),
            controller: ControllerChoice::Preset("toi1".into()),
            sim: SimConfig::default(),
            bands: None,
            reference_height: None,
            seed: None,
            trials: 30,
            descriptor_mode: DescriptorMode::Pooled,
            objective: ObjectiveMode::SlopeError,
            precision: PrecisionDenominator::Welded,
        }
    }
}

/// Resolved controller for one gait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedController {
    pub name: Option<String>,
    pub lqr: LqrSpec,
    pub sigma: Vec<f64>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = super::io::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn model(&self) -> Result<PendulumModel> {
        let m = match &self.model {
            ModelChoice::Preset(name) => {
                let p = Path::new(name);
                if name.ends_with(".json") || p.is_file() {
                    let text = super::io::read_text(p)?;
                    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{name}: {e}")))?
                } else {
                    PendulumModel::preset(name)?
                }
            }
            ModelChoice::Inline(m) => m.clone(),
        };
        if let Some(g) = self.gait {
            if g != m.gait() {
                return Err(Error::Validation(format!("config gait {} disagrees with the {} model", g.name(), m.gait().name())));
            }
        }
        Ok(m)
    }

    pub fn controller(&self, gait: Gait) -> Result<ResolvedController> {
        let c = match &self.controller {
            ControllerChoice::Preset(name) => {
                let p = controller_preset(name, gait)?;
                ResolvedController { name: Some(p.name), lqr: p.lqr, sigma: p.sigma }
            }
            ControllerChoice::Inline(c) => ResolvedController { name: None, lqr: c.lqr.clone(), sigma: c.sigma.clone() },
        };
        c.lqr.validate(gait.dof())?;
        if c.sigma.len() != gait.dof() {
            return Err(Error::Validation(format!("sigma has {} entries, the {} model has {} joints", c.sigma.len(), gait.name(), gait.dof())));
        }
        Ok(c)
    }

    pub fn band_spec(&self, sample_rate: f64) -> Result<BandSpec> {
        let spec = match &self.bands {
            Some(b) => {
                if b.sample_rate != sample_rate {
                    return Err(Error::Validation(format!("band spec is for {} Hz, data is {sample_rate} Hz", b.sample_rate)));
                }
                b.clone()
            }
            None => BandSpec::standard(sample_rate),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn reference_height(&self) -> Result<f64> {
        let h = self.reference_height.unwrap_or_else(|| PendulumModel::tip_default().upright_com_height());
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Validation(format!("reference_height must be positive, got {h}")));
        }
        Ok(h)
    }

    /// Checks that model, controller, simulation and reference agree.
    pub fn validate(&self) -> Result<()> {
        let m = self.model()?;
        self.controller(m.gait())?;
        self.sim.validate(&m)?;
        self.reference_height()?;
        if let Some(b) = &self.bands {
            b.validate()?;
        }
        if self.trials < 1 {
            return Err(Error::Validation("trials must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!((c.reference_height().unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn inline_forms() {
        let c: RunConfig = serde_json::from_str(
            r#"{"model":"dip-default","controller":{"alpha":1e6,"beta":[0.1,0.3],"sigma":[1,1]},"sim":{"duration":10}}"#,
        )
        .unwrap();
        c.validate().unwrap();
        let m = c.model().unwrap();
        assert_eq!(m.gait(), Gait::Kneeling);
        assert_eq!(c.controller(m.gait()).unwrap().lqr.beta, vec![0.1, 0.3]);
        assert_eq!(c.sim.duration, 10.0);
        assert_eq!(c.sim.output_rate, 100.0);
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let c: RunConfig = serde_json::from_str(
            r#"{"model":"dip-default","controller":{"alpha":1e6,"beta":[0.2,0.1,0.3],"sigma":[1,1,1]}}"#,
        )
        .unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str(r#"{"gait":"stance","model":"dip-default"}"#).unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str(r#"{"reference_height":-1}"#).unwrap();
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }
}
