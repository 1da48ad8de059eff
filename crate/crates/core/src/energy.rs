//! Current budget, linear battery discharge model and lifetime estimates.
//!
//! Every subsystem is modelled as drawing `i_on` for `t_on` seconds once
//! per `period`; the mote sleeps at `sleep_floor_ma` otherwise. Battery
//! charge maps linearly onto cell voltage between `v_full_cell` and
//! `v_cutoff_cell`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("period must be positive, got {0} s")]
    ZeroPeriod(f64),
    #[error("on-time {t_on_s} s exceeds period {period_s} s")]
    OnTimeExceedsPeriod { t_on_s: f64, period_s: f64 },
    #[error("negative {0}")]
    Negative(&'static str),
    #[error("voltage drop {dv} V per cell outside 0..={max} V")]
    VoltageDropOutOfRange { dv: f64, max: f64 },
    #[error("lifetime undefined for zero average current")]
    UndefinedLifetime,
    #[error("invalid battery model: {0}")]
    InvalidBattery(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetComponent {
    pub name: String,
    pub i_on_ma: f64,
    pub t_on_s: f64,
    pub period_s: f64,
}

impl BudgetComponent {
    pub fn new(name: &str, i_on_ma: f64, t_on_s: f64, period_s: f64) -> Result<Self, EnergyError> {
        duty_cycle_avg(i_on_ma, t_on_s, period_s)?;
        Ok(Self {
            name: name.to_string(),
            i_on_ma,
            t_on_s,
            period_s,
        })
    }

    pub fn average_ma(&self) -> f64 {
        self.i_on_ma * self.t_on_s / self.period_s
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurrentBudget {
    pub components: Vec<BudgetComponent>,
    pub sleep_floor_ma: f64,
}

/// Window-average radio current: 6 status messages in a 1.9 s window.
pub const RADIO_WINDOW_MA: f64 = 22.7;
pub const RADIO_WINDOW_S: f64 = 1.9;
pub const STATUS_PERIOD_S: f64 = 120.0;
/// Average current while the five sensors are sampled and logged.
pub const SAMPLING_MA: f64 = 0.64;
pub const SAMPLING_S: f64 = 0.79;
pub const SAMPLE_PERIOD_S: f64 = 60.0;

impl CurrentBudget {
    /// The deployed configuration: status beacons every two minutes and a
    /// sample every minute.
    pub fn deployed() -> Self {
        Self::for_schedule(SAMPLE_PERIOD_S, STATUS_PERIOD_S)
    }

    pub fn for_schedule(sample_period_s: f64, status_period_s: f64) -> Self {
        Self {
            components: vec![
                BudgetComponent {
                    name: "radio".into(),
                    i_on_ma: RADIO_WINDOW_MA,
                    t_on_s: RADIO_WINDOW_S,
                    period_s: status_period_s,
                },
                BudgetComponent {
                    name: "sensing".into(),
                    i_on_ma: SAMPLING_MA,
                    t_on_s: SAMPLING_S,
                    period_s: sample_period_s,
                },
            ],
            sleep_floor_ma: 0.0,
        }
    }

    pub fn component(&self, name: &str) -> Option<&BudgetComponent> {
        self.components.iter().find(|c| c.name == name)
    }
}

pub fn duty_cycle_avg(i_on_ma: f64, t_on_s: f64, period_s: f64) -> Result<f64, EnergyError> {
    if !(period_s > 0.0) {
        return Err(EnergyError::ZeroPeriod(period_s));
    }
    if i_on_ma < 0.0 {
        return Err(EnergyError::Negative("current"));
    }
    if t_on_s < 0.0 {
        return Err(EnergyError::Negative("on-time"));
    }
    if t_on_s > period_s {
        return Err(EnergyError::OnTimeExceedsPeriod { t_on_s, period_s });
    }
    Ok(i_on_ma * t_on_s / period_s)
}

pub fn total_avg_current(budget: &CurrentBudget) -> f64 {
    budget.components.iter().map(BudgetComponent::average_ma).sum::<f64>() + budget.sleep_floor_ma
}

pub fn consumed_mah(i_avg_ma: f64, duration_h: f64) -> Result<f64, EnergyError> {
    if i_avg_ma < 0.0 {
        return Err(EnergyError::Negative("current"));
    }
    if duration_h < 0.0 {
        return Err(EnergyError::Negative("duration"));
    }
    Ok(i_avg_ma * duration_h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryModel {
    pub cells: u32,
    pub capacity_mah: f64,
    pub v_full_cell: f64,
    pub v_cutoff_cell: f64,
    /// Pack voltage below which flash writes fail.
    pub flash_floor_pack: f64,
    /// Pack voltage below which the radio and MCU stop.
    pub radio_floor_pack: f64,
    /// Voltage change per cell per °C; zero disables temperature effects.
    pub temp_coeff_mv_per_c: f64,
}

impl Default for BatteryModel {
    /// Two alkaline AA cells.
    fn default() -> Self {
        Self {
            cells: 2,
            capacity_mah: 2200.0,
            v_full_cell: 1.5,
            v_cutoff_cell: 0.8,
            flash_floor_pack: 2.2,
            radio_floor_pack: 2.10,
            temp_coeff_mv_per_c: 4.0,
        }
    }
}

impl BatteryModel {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let bad = |m: &str| Err(EnergyError::InvalidBattery(m.to_string()));
        if self.cells == 0 {
            return bad("cell count must be positive");
        }
        if !(self.capacity_mah > 0.0) {
            return bad("capacity must be positive");
        }
        if !(self.v_cutoff_cell < self.v_full_cell) {
            return bad("cutoff voltage must be below full voltage");
        }
        let lo = self.pack_cutoff();
        let hi = self.pack_full();
        for (name, v) in [
            ("flash floor", self.flash_floor_pack),
            ("radio floor", self.radio_floor_pack),
        ] {
            if !(lo..=hi).contains(&v) {
                return Err(EnergyError::InvalidBattery(format!(
                    "{name} {v} V outside pack range {lo}..={hi} V"
                )));
            }
        }
        Ok(())
    }

    pub fn pack_full(&self) -> f64 {
        f64::from(self.cells) * self.v_full_cell
    }

    pub fn pack_cutoff(&self) -> f64 {
        f64::from(self.cells) * self.v_cutoff_cell
    }

    fn cell_span(&self) -> f64 {
        self.v_full_cell - self.v_cutoff_cell
    }

    /// Pack voltage after `consumed_mah` at the reference temperature.
    pub fn pack_voltage(&self, consumed_mah: f64) -> f64 {
        let frac = (consumed_mah / self.capacity_mah).clamp(0.0, 1.0);
        self.pack_full() - (self.pack_full() - self.pack_cutoff()) * frac
    }

    /// Pack voltage offset caused by a temperature `delta_c` away from the
    /// reference.
    pub fn temperature_offset(&self, delta_c: f64) -> f64 {
        f64::from(self.cells) * self.temp_coeff_mv_per_c * 1e-3 * delta_c
    }

    /// Charge usable before the pack falls to `pack_v`.
    pub fn usable_mah_to(&self, pack_v: f64) -> f64 {
        let cell_v = pack_v / f64::from(self.cells);
        let frac = ((self.v_full_cell - cell_v) / self.cell_span()).clamp(0.0, 1.0);
        self.capacity_mah * frac
    }
}

pub fn consumed_from_voltage(dv_per_cell_v: f64, model: &BatteryModel) -> Result<f64, EnergyError> {
    let max = model.cell_span();
    if !(0.0..=max).contains(&dv_per_cell_v) {
        return Err(EnergyError::VoltageDropOutOfRange { dv: dv_per_cell_v, max });
    }
    Ok(model.capacity_mah * dv_per_cell_v / max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LifetimeStop {
    /// Every cell at its cutoff voltage.
    PackCutoff,
    /// Flash stops accepting writes.
    FlashFloor,
    /// Radio and MCU stop.
    RadioFloor,
}

pub fn predict_lifetime_days(model: &BatteryModel, i_avg_ma: f64, stop: LifetimeStop) -> Result<f64, EnergyError> {
    if i_avg_ma == 0.0 {
        return Err(EnergyError::UndefinedLifetime);
    }
    if i_avg_ma < 0.0 {
        return Err(EnergyError::Negative("current"));
    }
    let stop_v = match stop {
        LifetimeStop::PackCutoff => model.pack_cutoff(),
        LifetimeStop::FlashFloor => model.flash_floor_pack,
        LifetimeStop::RadioFloor => model.radio_floor_pack,
    };
    Ok(model.usable_mah_to(stop_v) / i_avg_ma / 24.0)
}

/// Pack voltage at each sample of a uniformly sampled temperature series.
///
/// Sample `k` sits at `k · interval_s` seconds of constant draw `i_avg_ma`.
pub fn voltage_trace(model: &BatteryModel, i_avg_ma: f64, temps_c: &[f64], interval_s: f64, t_ref_c: f64) -> Vec<f64> {
    temps_c
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let hours = k as f64 * interval_s / 3600.0;
            model.pack_voltage(i_avg_ma * hours) + model.temperature_offset(t - t_ref_c)
        })
        .collect()
}
