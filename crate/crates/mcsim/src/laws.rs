//! Closed-form scaling laws that frame processor design trade-offs.
//!
//! Five small calculators, all pure functions:
//!
//! * [`dennard_scale`] - ideal constant-field (Dennard) scaling across process
//!   generations: dimensions shrink 30% per generation, so density roughly
//!   doubles, gates get ~43% faster, and power density stays flat.
//! * [`pollack_performance`] - Pollack's rule: single-core performance grows
//!   with the square root of core area.
//! * [`amdahl_speedup`] - Amdahl's law bound on parallel speedup.
//! * [`compound_growth`] - cumulative effect of a steady annual improvement
//!   rate over a number of years.
//! * [`bypass_paths`] - quadratic growth of operand bypass connectivity with
//!   the number of execution units.
//!
//! ```
//! use mcsim::laws::*;
//!
//! // Doubling the transistor budget of a core buys ~41% performance.
//! assert!((pollack_performance(2.0).unwrap() - 1.414).abs() < 1e-3);
//!
//! // A 90%-parallel workload on 16 cores speeds up at most 6.4x.
//! assert!((amdahl_speedup(0.9, 16).unwrap() - 6.4).abs() < 1e-12);
//!
//! // 50%/year sustained for two decades is over three orders of magnitude.
//! assert!(compound_growth(0.5, 20.0).unwrap() > 1000.0);
//! ```

use thiserror::Error;

/// Per-generation shrink of linear transistor dimensions under ideal scaling.
pub const DIMENSION_SHRINK: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum LawsError {
    #[error("area ratio must be positive and finite, got {0}")]
    BadAreaRatio(f64),
    #[error("parallel fraction must lie in [0, 1], got {0}")]
    BadParallelFraction(f64),
    #[error("core count must be at least 1")]
    ZeroCores,
    #[error("growth rate must be finite and greater than -1, got {0}")]
    BadGrowthRate(f64),
    #[error("years must be finite, got {0}")]
    BadYears(f64),
}

/// Combined effect of `generations` steps of ideal constant-field scaling.
///
/// All fields are ratios relative to the starting generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFactors {
    /// Linear dimension factor, `0.7^g`.
    pub dimension: f64,
    /// Transistor density factor, `1 / dimension^2`.
    pub density: f64,
    /// Gate delay factor, equal to the dimension factor.
    pub delay: f64,
    /// Fractional switching-speed gain, `1/delay - 1`.
    pub speed_gain: f64,
    /// Supply voltage factor; scales with dimensions under constant field.
    pub voltage: f64,
    /// Power per unit area; constant 1.0 in the ideal regime.
    pub power_density: f64,
}

/// Ideal constant-field scaling after `generations` process generations.
///
/// One generation shrinks linear dimensions to 70%, which doubles density
/// (1/0.49 = 2.04), cuts gate delay to 70% (a 43% speed gain), and leaves
/// power density unchanged because voltage shrinks with the dimensions.
pub fn dennard_scale(generations: u32) -> ScalingFactors {
    let dimension = DIMENSION_SHRINK.powi(generations as i32);
    let density = 1.0 / (dimension * dimension);
    let delay = dimension;
    ScalingFactors {
        dimension,
        density,
        delay,
        speed_gain: 1.0 / delay - 1.0,
        voltage: dimension,
        power_density: 1.0,
    }
}

/// Pollack's rule: relative performance of a core scaled to `area_ratio`
/// times the transistor budget, `sqrt(area_ratio)`.
pub fn pollack_performance(area_ratio: f64) -> Result<f64, LawsError> {
    if !area_ratio.is_finite() || area_ratio <= 0.0 {
        return Err(LawsError::BadAreaRatio(area_ratio));
    }
    Ok(area_ratio.sqrt())
}

/// Amdahl's law: speedup of a workload with parallelizable fraction
/// `parallel_fraction` on `cores` cores, `1 / ((1-f) + f/n)`.
pub fn amdahl_speedup(parallel_fraction: f64, cores: u32) -> Result<f64, LawsError> {
    if !parallel_fraction.is_finite() || !(0.0..=1.0).contains(&parallel_fraction) {
        return Err(LawsError::BadParallelFraction(parallel_fraction));
    }
    if cores == 0 {
        return Err(LawsError::ZeroCores);
    }
    let f = parallel_fraction;
    let n = cores as f64;
    Ok(1.0 / ((1.0 - f) + f / n))
}

/// Cumulative growth factor of a steady `rate` per year over `years` years,
/// `(1 + rate)^years`.
pub fn compound_growth(rate: f64, years: f64) -> Result<f64, LawsError> {
    if !rate.is_finite() || rate <= -1.0 {
        return Err(LawsError::BadGrowthRate(rate));
    }
    if !years.is_finite() {
        return Err(LawsError::BadYears(years));
    }
    Ok((1.0 + rate).powf(years))
}

/// Number of operand bypass paths among `units` execution units, `units^2`.
///
/// Each unit's result must be forwardable to every unit's inputs, so the
/// interconnect cost grows quadratically.
pub fn bypass_paths(units: u32) -> u64 {
    (units as u64) * (units as u64)
}
