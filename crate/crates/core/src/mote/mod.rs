//! Firmware-level simulation of one mote: minute sampling into flash,
//! duty-cycled status beacons and the data it exposes to a downloader.

pub mod env;
pub mod flash;
pub mod record;

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::energy::{BatteryModel, RADIO_WINDOW_MA, RADIO_WINDOW_S, SAMPLING_MA, SAMPLING_S};
use crate::pipeline::convert::{
    quantize_adc, resistance_to_adc, thermistor_resistance, watermark_resistance, ThermistorCoeffs, WatermarkCoeffs,
    ADC_MAX,
};
use crate::registry::{MoteId, Registry, SensorType};

pub use env::{EnvironmentModel, RainEvent};
pub use flash::{FlashError, FlashRing, FLASH_CAPACITY_RECORDS};
pub use record::{SampleRecord, RECORD_SIZE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MoteError {
    #[error("mote {0} is not in the registry")]
    UnknownMote(MoteId),
    #[error("sample interval must be at least 1 s")]
    Interval,
    #[error("ADC noise sigma must be finite and non-negative")]
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioSchedule {
    pub status_period_s: u32,
    /// Protocol availability of each window.
    pub window_s: f64,
    /// Radio-on time charged per window.
    pub radio_on_s: f64,
    pub radio_on_ma: f64,
    pub beacon_spacing_ms: u32,
    pub beacons_per_window: u32,
}

impl Default for RadioSchedule {
    fn default() -> Self {
        Self {
            status_period_s: 120,
            window_s: 2.0,
            radio_on_s: RADIO_WINDOW_S,
            radio_on_ma: RADIO_WINDOW_MA,
            beacon_spacing_ms: 250,
            beacons_per_window: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyLedger {
    pub sensing_mah: f64,
    pub radio_mah: f64,
    pub download_mah: f64,
    pub radio_on_s: f64,
    pub samples_taken: u64,
    pub windows_opened: u64,
}

impl EnergyLedger {
    pub fn total_mah(&self) -> f64 {
        self.sensing_mah + self.radio_mah + self.download_mah
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub voltage: f64,
    pub consumed_mah: f64,
}

/// How one ADC channel turns ground truth into a count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelModel {
    /// Thermistor on the soil-temperature or box-temperature divider.
    Thermistor {
        coeffs: ThermistorCoeffs,
        divider_ohms: f64,
    },
    Watermark {
        coeffs: WatermarkCoeffs,
        divider_ohms: f64,
    },
    Photo,
    Battery {
        full_scale_v: f64,
    },
    /// Nothing attached: the pulled-up pin reads full scale.
    Unbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatusMessage {
    pub mote_id: MoteId,
    /// Records not yet downloaded (records, not bytes).
    pub stored_records: u64,
    /// `None` before the first sample.
    pub highest_seq: Option<u64>,
    pub battery_adc: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    Sample {
        at: DateTime<Utc>,
        record: SampleRecord,
    },
    Beacon {
        at: DateTime<Utc>,
        window: u64,
        index: u32,
        status: StatusMessage,
    },
}

impl Emission {
    pub fn at(&self) -> DateTime<Utc> {
        match self {
            Emission::Sample { at, .. } | Emission::Beacon { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoteState {
    pub mote_id: MoteId,
    boot_utc: DateTime<Utc>,
    now_ms: u64,
    epoch: u32,
    sample_interval_s: u32,
    next_sample_ms: u64,
    last_sample_ms: Option<u64>,
    next_window_ms: u64,
    beacon_index: u32,
    window_alive: bool,
    window_count: u64,
    pub flash: FlashRing,
    pub battery: BatteryState,
    pub battery_model: BatteryModel,
    /// Temperature at which the battery model voltages hold.
    pub battery_t_ref_c: f64,
    pub radio: RadioSchedule,
    pub ledger: EnergyLedger,
    pub channels: [ChannelModel; 5],
    /// Standard deviation of additive ADC noise, in counts.
    adc_noise_counts: f64,
    downloaded_through: u64,
}

impl MoteState {
    pub fn new(mote_id: MoteId, boot_utc: DateTime<Utc>, channels: [ChannelModel; 5]) -> Self {
        let battery_model = BatteryModel::default();
        Self {
            mote_id,
            boot_utc,
            now_ms: 0,
            epoch: 0,
            sample_interval_s: 60,
            next_sample_ms: 0,
            last_sample_ms: None,
            next_window_ms: 0,
            beacon_index: 0,
            window_alive: false,
            window_count: 0,
            flash: FlashRing::default(),
            battery: BatteryState {
                voltage: battery_model.pack_full(),
                consumed_mah: 0.0,
            },
            battery_model,
            battery_t_ref_c: 20.0,
            radio: RadioSchedule::default(),
            ledger: EnergyLedger::default(),
            channels,
            adc_noise_counts: 0.0,
            downloaded_through: 0,
        }
    }

    /// Builds the channel map from the registry's sensor list. Sensors
    /// without fitted coefficients are simulated with the standard curves.
    pub fn from_registry(registry: &Registry, mote_id: MoteId, boot_utc: DateTime<Utc>) -> Result<Self, MoteError> {
        registry.mote(mote_id).ok_or(MoteError::UnknownMote(mote_id))?;
        let mut channels = [ChannelModel::Unbound; 5];
        for sensor in registry.sensors_on(mote_id) {
            let cal = &sensor.calibration;
            let model = match sensor.sensor_type {
                SensorType::SoilTemperature | SensorType::BoxTemperature => ChannelModel::Thermistor {
                    coeffs: cal.thermistor_coeffs.unwrap_or(ThermistorCoeffs::STANDARD),
                    divider_ohms: cal.divider_ohms(),
                },
                SensorType::SoilMoisture => ChannelModel::Watermark {
                    coeffs: cal.watermark_coeffs.unwrap_or(WatermarkCoeffs::STANDARD),
                    divider_ohms: cal.divider_ohms(),
                },
                SensorType::Photo => ChannelModel::Photo,
                SensorType::BatteryVoltage => ChannelModel::Battery {
                    full_scale_v: cal.adc_full_scale_v,
                },
            };
            channels[sensor.sensor_type.reading_slot()] = model;
        }
        Ok(Self::new(mote_id, boot_utc, channels))
    }

    pub fn with_adc_noise(mut self, sigma_counts: f64) -> Result<Self, MoteError> {
        if !(sigma_counts.is_finite() && sigma_counts >= 0.0) {
            return Err(MoteError::Noise);
        }
        self.adc_noise_counts = sigma_counts;
        Ok(self)
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn boot_utc(&self) -> DateTime<Utc> {
        self.boot_utc
    }

    /// Whole seconds since boot, as stamped into records.
    pub fn clock_s(&self) -> u32 {
        (self.now_ms / 1000) as u32
    }

    pub fn now_utc(&self) -> DateTime<Utc> {
        self.utc_at(self.now_ms)
    }

    fn utc_at(&self, ms: u64) -> DateTime<Utc> {
        self.boot_utc + Duration::milliseconds(ms as i64)
    }

    pub fn sample_interval_s(&self) -> u32 {
        self.sample_interval_s
    }

    /// Changes the sampling period; the next sample lands on the next
    /// multiple of the new period not already sampled.
    pub fn set_sample_interval(&mut self, interval_s: u32) -> Result<(), MoteError> {
        if interval_s == 0 {
            return Err(MoteError::Interval);
        }
        self.sample_interval_s = interval_s;
        let step = u64::from(interval_s) * 1000;
        let earliest = match self.last_sample_ms {
            Some(last) if last >= self.now_ms => last + 1,
            _ => self.now_ms,
        };
        self.next_sample_ms = earliest.div_ceil(step) * step;
        Ok(())
    }

    /// Restarts the firmware: clock back to zero, epoch incremented. Flash
    /// contents and sequence numbering survive.
    pub fn reboot(&mut self) {
        self.boot_utc = self.now_utc();
        self.now_ms = 0;
        self.epoch += 1;
        self.next_sample_ms = 0;
        self.last_sample_ms = None;
        self.next_window_ms = 0;
        self.beacon_index = 0;
        self.window_alive = false;
    }

    /// Pack voltage at `t`, including the temperature effect.
    pub fn battery_voltage_at(&self, env: &EnvironmentModel, t: DateTime<Utc>) -> f64 {
        self.battery_model.pack_voltage(self.battery.consumed_mah)
            + self
                .battery_model
                .temperature_offset(env.air_temp_c(t) - self.battery_t_ref_c)
    }

    fn refresh_battery(&mut self, env: &EnvironmentModel, t: DateTime<Utc>) -> f64 {
        let v = self.battery_voltage_at(env, t);
        self.battery.voltage = v;
        v
    }

    fn charge(&mut self, ma: f64, seconds: f64) -> f64 {
        let mah = ma * seconds / 3600.0;
        self.battery.consumed_mah += mah;
        mah
    }

    /// Radio time spent serving a download.
    pub fn charge_download(&mut self, seconds: f64) {
        let mah = self.charge(self.radio.radio_on_ma, seconds);
        self.ledger.download_mah += mah;
        self.ledger.radio_on_s += seconds;
    }

    pub fn radio_alive(&self) -> bool {
        self.battery.voltage >= self.battery_model.radio_floor_pack
    }

    fn battery_adc(&self) -> u16 {
        let fs = self
            .channels
            .iter()
            .find_map(|c| match c {
                ChannelModel::Battery { full_scale_v } => Some(*full_scale_v),
                _ => None,
            })
            .unwrap_or(3.3);
        quantize_adc(f64::from(ADC_MAX) * self.battery.voltage / fs)
    }

    /// Runs the firmware over `[now, until)`. Samples precede beacons that
    /// fall on the same millisecond.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        env: &EnvironmentModel,
        rng: &mut R,
        until: DateTime<Utc>,
    ) -> Vec<Emission> {
        let mut out = Vec::new();
        let until_ms = (until - self.boot_utc).num_milliseconds();
        if until_ms <= self.now_ms as i64 {
            return out;
        }
        let until_ms = until_ms as u64;
        let period_ms = u64::from(self.radio.status_period_s) * 1000;
        let spacing_ms = u64::from(self.radio.beacon_spacing_ms);
        loop {
            let beacon_ms = self.next_window_ms + u64::from(self.beacon_index) * spacing_ms;
            let next = self.next_sample_ms.min(beacon_ms);
            if next >= until_ms {
                break;
            }
            self.now_ms = next;
            let at = self.utc_at(next);
            if self.next_sample_ms <= beacon_ms {
                self.last_sample_ms = Some(next);
                self.next_sample_ms += u64::from(self.sample_interval_s) * 1000;
                if let Some(record) = self.take_sample(env, rng, at) {
                    out.push(Emission::Sample { at, record });
                }
                continue;
            }
            if self.beacon_index == 0 {
                self.refresh_battery(env, at);
                self.window_alive = self.radio_alive();
                self.window_count += 1;
                if self.window_alive {
                    let mah = self.charge(self.radio.radio_on_ma, self.radio.radio_on_s);
                    self.ledger.radio_mah += mah;
                    self.ledger.radio_on_s += self.radio.radio_on_s;
                    self.ledger.windows_opened += 1;
                }
            }
            if self.window_alive {
                self.refresh_battery(env, at);
                out.push(Emission::Beacon {
                    at,
                    window: self.window_count - 1,
                    index: self.beacon_index,
                    status: self.make_status(),
                });
            }
            self.beacon_index += 1;
            if self.beacon_index == self.radio.beacons_per_window {
                self.beacon_index = 0;
                self.next_window_ms += period_ms;
            }
        }
        self.now_ms = until_ms;
        out
    }

    /// Samples every channel at `t` and appends the record to flash.
    /// Returns `None` once the pack is below the flash floor.
    pub fn take_sample<R: Rng + ?Sized>(
        &mut self,
        env: &EnvironmentModel,
        rng: &mut R,
        t: DateTime<Utc>,
    ) -> Option<SampleRecord> {
        let v = self.refresh_battery(env, t);
        if v < self.battery_model.flash_floor_pack {
            return None;
        }
        let mah = self.charge(SAMPLING_MA, SAMPLING_S);
        self.ledger.sensing_mah += mah;
        self.ledger.samples_taken += 1;
        let mut readings = [0u16; 5];
        for (slot, reading) in readings.iter_mut().enumerate() {
            let ideal = self.ideal_count(slot, env, t);
            *reading = if self.adc_noise_counts > 0.0 && ideal.is_finite() {
                let noise = Normal::new(0.0, self.adc_noise_counts).expect("validated sigma");
                quantize_adc(ideal + noise.sample(rng))
            } else {
                quantize_adc(ideal)
            };
        }
        let mote_time_s = (t - self.boot_utc).num_seconds().max(0) as u32;
        Some(self.flash.append(mote_time_s, readings))
    }

    /// Unquantized count the channel in `slot` would read at `t`.
    pub fn ideal_count(&self, slot: usize, env: &EnvironmentModel, t: DateTime<Utc>) -> f64 {
        let full = f64::from(ADC_MAX);
        match self.channels[slot] {
            ChannelModel::Thermistor { coeffs, divider_ohms } => {
                let truth = if slot == SensorType::BoxTemperature.reading_slot() {
                    env.air_temp_c(t)
                } else {
                    env.soil_temp_c(t)
                };
                thermistor_resistance(truth, &coeffs)
                    .map(|r| resistance_to_adc(r, divider_ohms))
                    .unwrap_or(full)
            }
            ChannelModel::Watermark { coeffs, divider_ohms } => {
                watermark_resistance(env.soil_moisture_kpa(t), env.soil_temp_c(t), &coeffs)
                    .map(|r| resistance_to_adc(r, divider_ohms))
                    .unwrap_or(full)
            }
            ChannelModel::Photo => env.photo_count(t),
            ChannelModel::Battery { full_scale_v } => full * self.battery.voltage / full_scale_v,
            ChannelModel::Unbound => full,
        }
    }

    pub fn flash_read_range(&self, from_seq: u64, to_seq: u64) -> Result<Vec<SampleRecord>, FlashError> {
        self.flash.read_range(from_seq, to_seq)
    }

    pub fn make_status(&self) -> StatusMessage {
        let head = self.flash.head_seq();
        let from = self.flash.tail_seq().max(self.downloaded_through);
        StatusMessage {
            mote_id: self.mote_id,
            stored_records: head - from.min(head),
            highest_seq: head.checked_sub(1),
            battery_adc: self.battery_adc(),
        }
    }

    /// First sequence number not yet handed to a downloader.
    pub fn downloaded_through(&self) -> u64 {
        self.downloaded_through
    }

    /// Records every sequence number below `next_seq` as downloaded.
    pub fn mark_downloaded(&mut self, next_seq: u64) {
        self.downloaded_through = self.downloaded_through.max(next_seq.min(self.flash.head_seq()));
    }
}
