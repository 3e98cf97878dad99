//! Power consumption, sum energy efficiency and Jain fairness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-device electronics scale with the number of devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    /// AP electronics counted L times, receiver electronics K times.
    #[default]
    PerUnit,
    /// AP and receiver electronics counted once each.
    Single,
}

/// Device power constants, all in W.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerModelConfig {
    pub circuit_tx: f64,
    pub led_driver: f64,
    pub amplifier: f64,
    pub filter_tx: f64,
    pub dac: f64,
    pub mirror_element: f64,
    pub circuit_rx: f64,
    pub filter_rx: f64,
    pub tia: f64,
    pub adc: f64,
    pub multiplicity: Multiplicity,
    /// Charge steering power only for mirrors whose angles changed.
    pub irs_changed_only: bool,
}

impl Default for PowerModelConfig {
    fn default() -> Self {
        Self {
            circuit_tx: 3.250,
            led_driver: 2.758,
            amplifier: 0.280,
            filter_tx: 0.0025,
            dac: 0.175,
            mirror_element: 0.100,
            circuit_rx: 0.0019,
            filter_rx: 0.0025,
            tia: 2.500,
            adc: 0.095,
            multiplicity: Multiplicity::PerUnit,
            irs_changed_only: false,
        }
    }
}

impl PowerModelConfig {
    pub fn per_ap(&self) -> f64 {
        self.circuit_tx + self.led_driver + self.amplifier + self.filter_tx + self.dac
    }

    pub fn per_receiver(&self) -> f64 {
        self.circuit_rx + self.filter_rx + self.tia + self.adc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PowerBreakdown {
    pub p_ap: f64,
    pub p_irs: f64,
    pub p_rec: f64,
    pub p_total: f64,
}

/// Total consumption for `l` APs, `m` steered mirrors and `k` receivers.
pub fn total_power(p_elec: f64, l: usize, m: usize, k: usize, cfg: &PowerModelConfig) -> PowerBreakdown {
    let (ap_units, rx_units) = match cfg.multiplicity {
        Multiplicity::PerUnit => (l as f64, k as f64),
        Multiplicity::Single => (1.0, 1.0),
    };
    let p_ap = p_elec + ap_units * cfg.per_ap();
    let p_irs = m as f64 * cfg.mirror_element;
    let p_rec = rx_units * cfg.per_receiver();
    PowerBreakdown {
        p_ap,
        p_irs,
        p_rec,
        p_total: p_ap + p_irs + p_rec,
    }
}

/// Sum energy efficiency in bit/J.
pub fn see(sum_rate: f64, p_total: f64) -> Result<f64> {
    if !(p_total > 0.0) {
        return Err(Error::ZeroPower(p_total));
    }
    Ok(sum_rate / p_total)
}

/// Jain fairness index; an all-zero rate vector counts as perfectly fair.
pub fn jain(rates: &[f64]) -> f64 {
    let sum: f64 = rates.iter().sum();
    let sq: f64 = rates.iter().map(|r| r * r).sum();
    if sq == 0.0 {
        return 1.0;
    }
    sum * sum / (rates.len() as f64 * sq)
}

pub fn objective(jain: f64, see: f64) -> f64 {
    jain * see
}
