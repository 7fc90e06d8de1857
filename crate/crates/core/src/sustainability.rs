//! Training energy and emissions arithmetic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CarbonError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonInputs {
    pub gpu_hours: f64,
    pub device_watts: f64,
    pub pue: f64,
    /// grams CO2-equivalent per kWh
    pub grid_intensity: f64,
}

impl CarbonInputs {
    pub fn from_devices(gpu_count: u32, hours_per_gpu: f64, device_watts: f64, pue: f64, grid_intensity: f64) -> Self {
        Self {
            gpu_hours: gpu_count as f64 * hours_per_gpu,
            device_watts,
            pue,
            grid_intensity,
        }
    }

    pub fn validate(&self) -> Result<(), CarbonError> {
        let fields = [
            ("gpu_hours", self.gpu_hours),
            ("device_watts", self.device_watts),
            ("pue", self.pue),
            ("grid_intensity", self.grid_intensity),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(CarbonError::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.pue < 1.0 {
            return Err(CarbonError::InvalidInput(format!("pue must be >= 1, got {}", self.pue)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonReport {
    pub energy_kwh: f64,
    pub emissions_kgco2eq: f64,
    /// Two-decimal display values.
    pub energy_kwh_rounded: f64,
    pub emissions_kgco2eq_rounded: f64,
    pub inputs: CarbonInputs,
}

/// `gpu_hours × watts × pue / 1000`
pub fn energy_kwh(inputs: &CarbonInputs) -> Result<f64, CarbonError> {
    inputs.validate()?;
    Ok(inputs.gpu_hours * inputs.device_watts * inputs.pue / 1000.0)
}

/// kg CO2eq = kWh × g/kWh / 1000
pub fn emissions(energy_kwh: f64, intensity: f64) -> Result<f64, CarbonError> {
    if !(energy_kwh.is_finite() && energy_kwh >= 0.0 && intensity.is_finite() && intensity >= 0.0) {
        return Err(CarbonError::InvalidInput(format!(
            "energy {energy_kwh} and intensity {intensity} must be non-negative"
        )));
    }
    Ok(energy_kwh * intensity / 1000.0)
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn carbon_report(inputs: &CarbonInputs) -> Result<CarbonReport, CarbonError> {
    let energy = energy_kwh(inputs)?;
    let kg = emissions(energy, inputs.grid_intensity)?;
    Ok(CarbonReport {
        energy_kwh: energy,
        emissions_kgco2eq: kg,
        energy_kwh_rounded: round2(energy),
        emissions_kgco2eq_rounded: round2(kg),
        inputs: inputs.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper() -> CarbonInputs {
        CarbonInputs {
            gpu_hours: 960.0,
            device_watts: 350.0,
            pue: 1.4,
            grid_intensity: 494.0,
        }
    }

    #[test]
    fn reproduces_reported_figures() {
        let r = carbon_report(&paper()).unwrap();
        assert!((r.energy_kwh - 470.4).abs() < 1e-9);
        assert!((r.emissions_kgco2eq - 232.3776).abs() < 1e-9);
        assert_eq!(r.emissions_kgco2eq_rounded, 232.38);
        assert_eq!(r.energy_kwh_rounded, 470.4);
    }

    #[test]
    fn unit_identities() {
        let one = CarbonInputs {
            gpu_hours: 1.0,
            device_watts: 1000.0,
            pue: 1.0,
            grid_intensity: 1.0,
        };
        assert_eq!(energy_kwh(&one).unwrap(), 1.0);
        assert_eq!(emissions(1000.0, 1.0).unwrap(), 1.0);
        assert_eq!(emissions(0.0, 494.0).unwrap(), 0.0);
        let eight = CarbonInputs::from_devices(8, 120.0, 350.0, 1.4, 494.0);
        assert_eq!(eight.gpu_hours, 960.0);
    }

    #[test]
    fn invalid_inputs() {
        let mut z = paper();
        z.gpu_hours = 0.0;
        assert!(energy_kwh(&z).is_err());
        let mut p = paper();
        p.pue = 0.9;
        assert!(energy_kwh(&p).is_err());
        assert!(emissions(-1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn emissions_are_linear(a in 0.0f64..1e6, b in 0.0f64..1e6, i in 0.0f64..1000.0) {
            let lhs = emissions(a + b, i).unwrap();
            let rhs = emissions(a, i).unwrap() + emissions(b, i).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }
    }
}
