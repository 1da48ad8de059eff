//! Raw ADC counts to physical units.
//!
//! Resistive sensors sit in a voltage divider: the reference resistor runs
//! from supply to the ADC pin and the sensor from the pin to ground. The ADC
//! is ratiometric to supply, so
//!
//! ```text
//! count = 1023 · R / (R + R_ref)      R = R_ref · count / (1023 − count)
//! ```
//!
//! Thermistors use the log-cubic regression `1/T = A + B·ln R + C·(ln R)³`
//! (T in kelvin). Watermark moisture sensors use the rational form
//! `kPa = (c0 + c1·R) / (1 + c2·T + c3·R)` with R in kΩ and T in °C.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest 10-bit ADC count.
pub const ADC_MAX: u16 = 1023;
const ADC_SPAN: f64 = 1023.0;
const KELVIN_OFFSET: f64 = 273.15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvertError {
    #[error("ADC count {0} outside 0..=1023")]
    AdcOutOfRange(u16),
    #[error("ADC at full scale: sensor open circuit")]
    OpenCircuit,
    #[error("resistance {0} Ω is not positive")]
    NonPositiveResistance(f64),
    #[error("outside calibration domain: {0}")]
    CalibrationDomain(String),
    #[error("singular calibration fit: {0}")]
    Singular(String),
}

/// Coefficients of the thermistor log-cubic regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermistorCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ThermistorCoeffs {
    /// Generic 10 kΩ NTC bead.
    pub const STANDARD: Self = Self {
        a: 1.129148e-3,
        b: 2.34125e-4,
        c: 8.76741e-8,
    };

    /// Exact fit through three (ohms, °C) anchor points.
    pub fn from_points(points: [(f64, f64); 3]) -> Result<Self, ConvertError> {
        let mut m = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for (row, &(r, t_c)) in points.iter().enumerate() {
            if !(r > 0.0) {
                return Err(ConvertError::NonPositiveResistance(r));
            }
            let l = r.ln();
            m[(row, 0)] = 1.0;
            m[(row, 1)] = l;
            m[(row, 2)] = l * l * l;
            rhs[row] = 1.0 / (t_c + KELVIN_OFFSET);
        }
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| ConvertError::Singular("thermistor anchor points".into()))?;
        Ok(Self {
            a: sol[0],
            b: sol[1],
            c: sol[2],
        })
    }
}

/// Per-sensor coefficients `[c0, c1, c2, c3]` of the moisture regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkCoeffs {
    pub c: [f64; 4],
}

impl WatermarkCoeffs {
    /// Bundled fallback used when a sensor has no fitted coefficients.
    pub const STANDARD: Self = Self {
        c: [4.093, 3.213, -0.01205, -0.009733],
    };
}

pub fn adc_to_resistance(adc: u16, r_ref_ohms: f64, bias_ohms: f64) -> Result<f64, ConvertError> {
    if adc > ADC_MAX {
        return Err(ConvertError::AdcOutOfRange(adc));
    }
    if adc == ADC_MAX {
        return Err(ConvertError::OpenCircuit);
    }
    let count = f64::from(adc);
    Ok((r_ref_ohms + bias_ohms) * count / (ADC_SPAN - count))
}

/// Unquantized ADC reading produced by resistance `r_ohms`.
pub fn resistance_to_adc(r_ohms: f64, divider_ohms: f64) -> f64 {
    if r_ohms.is_infinite() {
        return ADC_SPAN;
    }
    ADC_SPAN * r_ohms / (r_ohms + divider_ohms)
}

/// Rounds to the nearest count and saturates at the converter limits.
pub fn quantize_adc(count: f64) -> u16 {
    if count.is_nan() {
        return ADC_MAX;
    }
    count.round().clamp(0.0, ADC_SPAN) as u16
}

pub fn thermistor_celsius(r_ohms: f64, coeffs: &ThermistorCoeffs) -> Result<f64, ConvertError> {
    if !(r_ohms > 0.0) {
        return Err(ConvertError::NonPositiveResistance(r_ohms));
    }
    let l = r_ohms.ln();
    let inv_t = coeffs.a + coeffs.b * l + coeffs.c * l * l * l;
    if !(inv_t > 0.0) {
        return Err(ConvertError::CalibrationDomain(format!(
            "thermistor regression gives 1/T = {inv_t} at {r_ohms} Ω"
        )));
    }
    Ok(1.0 / inv_t - KELVIN_OFFSET)
}

/// Resistance at which the thermistor reads `t_c`.
pub fn thermistor_resistance(t_c: f64, coeffs: &ThermistorCoeffs) -> Result<f64, ConvertError> {
    let t_k = t_c + KELVIN_OFFSET;
    if !(t_k > 0.0) {
        return Err(ConvertError::CalibrationDomain(format!("{t_c} °C below absolute zero")));
    }
    let ThermistorCoeffs { a, b, c } = *coeffs;
    let target = 1.0 / t_k;
    if b == 0.0 && c == 0.0 {
        return Err(ConvertError::Singular("thermistor coefficients b = c = 0".into()));
    }
    // Solve c·x³ + b·x + (a − 1/T) = 0 for x = ln R. Cardano gives the
    // single real root; with three real roots (small negative c) start from
    // the linear solution, which lies on the monotone branch.
    let linear = if b != 0.0 { (target - a) / b } else { 0.0 };
    let mut x = if c == 0.0 {
        linear
    } else {
        let p = b / c;
        let q = (a - target) / c;
        let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
        if disc >= 0.0 {
            let s = disc.sqrt();
            (-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt()
        } else {
            linear
        }
    };
    // Newton polish; Cardano loses digits when its two terms nearly cancel.
    for _ in 0..50 {
        let f = a + b * x + c * x * x * x - target;
        let df = b + 3.0 * c * x * x;
        if df == 0.0 {
            break;
        }
        let dx = f / df;
        x -= dx;
        if dx.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    let residual = a + b * x + c * x * x * x - target;
    if !(b + 3.0 * c * x * x > 0.0) || residual.abs() > 1e-12 * target {
        return Err(ConvertError::CalibrationDomain(
            "thermistor regression is not monotone here".into(),
        ));
    }
    Ok(x.exp())
}

pub fn watermark_kpa(r_ohms: f64, soil_temp_c: f64, coeffs: &WatermarkCoeffs) -> Result<f64, ConvertError> {
    if !(r_ohms > 0.0) {
        return Err(ConvertError::NonPositiveResistance(r_ohms));
    }
    let [c0, c1, c2, c3] = coeffs.c;
    let rk = r_ohms / 1000.0;
    let den = 1.0 + c2 * soil_temp_c + c3 * rk;
    if den.abs() < 1e-9 {
        return Err(ConvertError::CalibrationDomain(format!(
            "moisture regression denominator vanishes at {r_ohms} Ω, {soil_temp_c} °C"
        )));
    }
    Ok((c0 + c1 * rk) / den)
}

/// Sensor resistance that reads `kpa` at `soil_temp_c`.
pub fn watermark_resistance(kpa: f64, soil_temp_c: f64, coeffs: &WatermarkCoeffs) -> Result<f64, ConvertError> {
    let [c0, c1, c2, c3] = coeffs.c;
    let den = c1 - kpa * c3;
    if den.abs() < 1e-12 {
        return Err(ConvertError::CalibrationDomain(format!(
            "moisture regression cannot be inverted at {kpa} kPa"
        )));
    }
    let rk = (kpa * (1.0 + c2 * soil_temp_c) - c0) / den;
    if !(rk > 0.0) {
        return Err(ConvertError::CalibrationDomain(format!(
            "{kpa} kPa at {soil_temp_c} °C maps to nonpositive resistance"
        )));
    }
    Ok(rk * 1000.0)
}

/// One laboratory calibration point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatermarkPoint {
    pub r_ohms: f64,
    pub temp_c: f64,
    pub kpa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkFit {
    pub coeffs: WatermarkCoeffs,
    /// Model minus observation at each input point, kPa.
    pub residuals: Vec<f64>,
}

impl WatermarkFit {
    pub fn rms_residual(&self) -> f64 {
        let n = self.residuals.len() as f64;
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt()
    }
}

/// Fits the rational moisture regression to a 3 × 3 grid (three moisture
/// levels at each of three temperatures).
///
/// The model is linearized as `c0 + c1·R − c2·(kPa·T) − c3·(kPa·R) = kPa`
/// and solved in the least-squares sense. When the observations themselves
/// leave the coefficients underdetermined (all nine readings equal, say) the
/// minimum-norm solution is returned.
pub fn fit_watermark(points: &[WatermarkPoint]) -> Result<WatermarkFit, ConvertError> {
    check_grid(points)?;

    let n = points.len();
    let mut design = DMatrix::zeros(n, 4);
    let mut rhs = DVector::zeros(n);
    for (i, p) in points.iter().enumerate() {
        let rk = p.r_ohms / 1000.0;
        design[(i, 0)] = 1.0;
        design[(i, 1)] = rk;
        design[(i, 2)] = -p.kpa * p.temp_c;
        design[(i, 3)] = -p.kpa * rk;
        rhs[i] = p.kpa;
    }

    // Equilibrate columns so the singular-value cutoff is scale free.
    let mut scales = [1.0; 4];
    for (j, scale) in scales.iter_mut().enumerate() {
        let norm = design.column(j).norm();
        if norm > 0.0 {
            *scale = norm;
            design.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.max();
    let scaled = svd
        .solve(&rhs, max_sv * 1e-10)
        .map_err(|e| ConvertError::Singular(e.to_string()))?;

    let mut c = [0.0; 4];
    for j in 0..4 {
        c[j] = scaled[j] / scales[j];
    }
    let coeffs = WatermarkCoeffs { c };
    let residuals = points
        .iter()
        .map(|p| watermark_kpa(p.r_ohms, p.temp_c, &coeffs).map(|v| v - p.kpa))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WatermarkFit { coeffs, residuals })
}

fn check_grid(points: &[WatermarkPoint]) -> Result<(), ConvertError> {
    if points.len() != 9 {
        return Err(ConvertError::Singular(format!(
            "expected 9 calibration points, got {}",
            points.len()
        )));
    }
    for p in points {
        if !(p.r_ohms > 0.0) {
            return Err(ConvertError::NonPositiveResistance(p.r_ohms));
        }
    }
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            if p.r_ohms == q.r_ohms && p.temp_c == q.temp_c {
                return Err(ConvertError::Singular(format!(
                    "duplicate point ({} Ω, {} °C)",
                    p.r_ohms, p.temp_c
                )));
            }
        }
    }
    let mut temps: Vec<f64> = points.iter().map(|p| p.temp_c).collect();
    temps.sort_by(f64::total_cmp);
    temps.dedup();
    if temps.len() != 3 {
        return Err(ConvertError::Singular(format!(
            "expected 3 distinct temperatures, got {}",
            temps.len()
        )));
    }
    for t in &temps {
        let count = points.iter().filter(|p| p.temp_c == *t).count();
        if count != 3 {
            return Err(ConvertError::Singular(format!(
                "temperature {t} °C has {count} points, expected 3"
            )));
        }
    }
    // The observation-independent columns must separate the points.
    let structural = DMatrix::from_fn(9, 3, |i, j| match j {
        0 => 1.0,
        1 => points[i].r_ohms / 1000.0,
        _ => points[i].temp_c,
    });
    let sv = structural.singular_values();
    if sv.min() <= sv.max() * 1e-12 {
        return Err(ConvertError::Singular(
            "resistance and temperature are collinear".into(),
        ));
    }
    Ok(())
}
