//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taxelsim::capmodel::{FittedCoefficients, TaxelGeometry, TaxelModel};
use taxelsim::daq::scan::ScanSetup;
use taxelsim::dynamics::SensorChannelConfig;
use taxelsim::experiments::BatteryConfig;
use taxelsim::topology::{reference_sections, ContactSpec, SectionSpec, SkinTopology};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Units {
    pub capacitance: String,
    pub force: String,
    pub length: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            capacitance: "pF".into(),
            force: "N".into(),
            length: "mm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    /// Reference four-link layout when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sections: Option<Vec<SectionSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub duration_s: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { duration_s: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub units: Units,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub geometry: TaxelGeometry,
    #[serde(default)]
    pub coefficients: FittedCoefficients,
    #[serde(default)]
    pub channel: SensorChannelConfig,
    #[serde(default)]
    pub battery: BatteryConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub contacts: Vec<ContactSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A configuration that passed every module-level check.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub setup: ScanSetup,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn topology(&self) -> Result<SkinTopology, CliError> {
        let specs = self.topology.sections.clone().unwrap_or_else(reference_sections);
        SkinTopology::from_specs(&specs).map_err(|e| CliError::Config(format!("topology: {e}")))
    }

    pub fn validate(self) -> Result<Loaded, CliError> {
        let bad = |field: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{field}: {e}"));
        let u = &self.units;
        if (u.capacitance.as_str(), u.force.as_str(), u.length.as_str()) != ("pF", "N", "mm") {
            return Err(CliError::Config(format!(
                "units: only pF / N / mm are supported, got {} / {} / {}",
                u.capacitance, u.force, u.length
            )));
        }
        let topology = self.topology()?;
        let model = TaxelModel::calibrated(self.geometry, self.coefficients)
            .map_err(|e| bad("geometry", &e))?;
        self.channel.validate().map_err(|e| bad("channel", &e))?;
        self.battery.validate().map_err(|e| bad("battery", &e))?;
        if !(self.simulation.duration_s > 0.0 && self.simulation.duration_s.is_finite()) {
            return Err(CliError::Config(format!(
                "simulation.duration_s: {} must be positive",
                self.simulation.duration_s
            )));
        }
        for (i, c) in self.contacts.iter().enumerate() {
            c.validate().map_err(|e| bad(&format!("contacts[{i}]"), &e))?;
            topology
                .section(&c.link_id)
                .map_err(|e| bad(&format!("contacts[{i}].link_id"), &e))?;
        }
        let setup = ScanSetup::new(topology, model, self.channel).map_err(|e| bad("channel", &e))?;
        Ok(Loaded {
            config: self,
            setup,
        })
    }
}

/// Loads, applies command-line overrides and validates.
pub fn load_with(
    path: &Path,
    seed: Option<u64>,
    rate_hz: Option<f64>,
) -> Result<Loaded, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.channel.seed = seed;
    }
    if let Some(rate) = rate_hz {
        cfg.channel.sample_rate_hz = rate;
    }
    cfg.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_setup() {
        let loaded = RunConfig::parse("").unwrap().validate().unwrap();
        assert_eq!(loaded.setup.topology.total_taxel_count, 56);
        assert_eq!(loaded.config.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::parse("[channel]\nshielding = \"active_passive\"\nsample_rate = 100\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("sample_rate"), "{msg}");
    }

    #[test]
    fn inconsistent_geometry_is_rejected() {
        let text = "[geometry]\nside_length_mm = 30\ndielectric_thickness_mm = 1.5\n\
                    permittivity = 1.0\nbase_capacitance_pf = 5.99\nbend_inner_radius_mm = 10\n\
                    lateral_slope = 1.1\nbend_slope = 0.1\n";
        assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))));
    }

    #[test]
    fn out_of_range_rate_fails_validation() {
        let cfg = RunConfig::parse("[channel]\nsample_rate_hz = 50\n").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("channel"), "{msg}");
    }

    #[test]
    fn contacts_must_name_a_link() {
        let text = "[[contacts]]\nlink_id = \"elbow\"\ncenter = [10.0, 10.0]\nfootprint_radius = 5\n\
                    duration = 1\nforce_profile = { times = [0.0], forces = [5.0] }\n";
        let msg = RunConfig::parse(text).unwrap().validate().unwrap_err().to_string();
        assert!(msg.contains("contacts[0]"), "{msg}");
    }
}
