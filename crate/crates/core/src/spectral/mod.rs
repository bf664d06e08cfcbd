//! Four-band spatiotemporal spectrum of velocity fields.
//!
//! Bins of the 3D DFT are labelled by their signed (center-shifted)
//! frequency. The first letter of a band is the temporal class, the second
//! the spatial class; spatial "low" is a max-norm box over `(f_h, f_w)`.

mod study;

pub use study::{perturbation_study, PerturbationReport, PerturbationRow};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::VelocityField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    LL = 0,
    LH = 1,
    HL = 2,
    HH = 3,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];

    fn from_classes(temporal_low: bool, spatial_low: bool) -> Self {
        match (temporal_low, spatial_low) {
            (true, true) => Band::LL,
            (true, false) => Band::LH,
            (false, true) => Band::HL,
            (false, false) => Band::HH,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Band::LL => "LL",
            Band::LH => "LH",
            Band::HL => "HL",
            Band::HH => "HH",
        };
        f.write_str(s)
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LL" => Ok(Band::LL),
            "LH" => Ok(Band::LH),
            "HL" => Ok(Band::HL),
            "HH" => Ok(Band::HH),
            other => Err(Error::Domain(format!("unknown band {other:?}"))),
        }
    }
}

/// Signed frequency of DFT index `k` on an axis of length `n`.
pub fn signed_frequency(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandPartition {
    shape: [usize; 3],
    temporal_frac: f64,
    spatial_frac: f64,
    labels: Vec<Band>,
}

impl BandPartition {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn temporal_frac(&self) -> f64 {
        self.temporal_frac
    }

    pub fn spatial_frac(&self) -> f64 {
        self.spatial_frac
    }

    /// Label of every bin in row-major `(t, h, w)` DFT index order.
    pub fn labels(&self) -> &[Band] {
        &self.labels
    }

    pub fn label(&self, t: usize, h: usize, w: usize) -> Band {
        let [_, hh, ww] = self.shape;
        self.labels[(t * hh + h) * ww + w]
    }

    pub fn count(&self, band: Band) -> usize {
        self.labels.iter().filter(|&&b| b == band).count()
    }
}

/// Labels every bin of a `shape` spectrum. A bin is temporally low iff
/// `|f_t| <= temporal_frac * T/2` and spatially low iff
/// `max(|f_h| / (H/2), |f_w| / (W/2)) <= spatial_frac`.
pub fn band_partition(shape: [usize; 3], temporal_frac: f64, spatial_frac: f64) -> Result<BandPartition> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("shape {shape:?} has an empty axis")));
    }
    for (name, frac) in [("temporal", temporal_frac), ("spatial", spatial_frac)] {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::Domain(format!("{name} cut fraction {frac} outside (0, 1]")));
        }
    }
    let [nt, nh, nw] = shape;
    let half = |n: usize| n as f64 / 2.0;
    let mut labels = Vec::with_capacity(nt * nh * nw);
    for t in 0..nt {
        let ft = signed_frequency(t, nt).unsigned_abs() as f64;
        let temporal_low = ft <= temporal_frac * half(nt);
        for h in 0..nh {
            let fh = signed_frequency(h, nh).unsigned_abs() as f64 / half(nh);
            for w in 0..nw {
                let fw = signed_frequency(w, nw).unsigned_abs() as f64 / half(nw);
                labels.push(Band::from_classes(temporal_low, fh.max(fw) <= spatial_frac));
            }
        }
    }
    Ok(BandPartition { shape, temporal_frac, spatial_frac, labels })
}

/// Per-band weights, `(LL, LH, HL, HH)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandWeights(pub [f64; 4]);

impl Default for BandWeights {
    fn default() -> Self {
        BandWeights([1.0, 0.5, 0.01, 0.01])
    }
}

impl BandWeights {
    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain(format!("band weights {weights:?} must be finite and nonnegative")));
        }
        Ok(Self(weights))
    }
}

/// Numerical floor added to the reference energy.
pub const DEFAULT_EPSILON: f64 = 1e-8;

fn fft_axis(data: &mut [Complex64], shape: [usize; 3], axis: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let [nt, nh, nw] = shape;
    let stride = match axis {
        0 => nh * nw,
        1 => nw,
        _ => 1,
    };
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut starts = Vec::new();
    for t in 0..if axis == 0 { 1 } else { nt } {
        for h in 0..if axis == 1 { 1 } else { nh } {
            for w in 0..if axis == 2 { 1 } else { nw } {
                starts.push((t * nh + h) * nw + w);
            }
        }
    }
    for s in starts {
        for (i, x) in line.iter_mut().enumerate() {
            *x = data[s + i * stride];
        }
        fft.process(&mut line);
        for (i, x) in line.iter().enumerate() {
            data[s + i * stride] = *x;
        }
    }
}

/// Unnormalized forward 3D DFT of a real field.
pub fn fft3(field: &[f64], shape: [usize; 3]) -> Result<Vec<Complex64>> {
    if field.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("{} values for shape {shape:?}", field.len())));
    }
    let mut data: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut planner = FftPlanner::new();
    for axis in (0..3).rev() {
        fft_axis(&mut data, shape, axis, false, &mut planner);
    }
    Ok(data)
}

/// Inverse 3D DFT including the `1/V` normalization.
pub fn ifft3(spectrum: &[Complex64], shape: [usize; 3]) -> Result<Vec<Complex64>> {
    let v: usize = shape.iter().product();
    if spectrum.len() != v {
        return Err(Error::Shape(format!("{} bins for shape {shape:?}", spectrum.len())));
    }
    let mut data = spectrum.to_vec();
    let mut planner = FftPlanner::new();
    for axis in (0..3).rev() {
        fft_axis(&mut data, shape, axis, true, &mut planner);
    }
    let norm = 1.0 / v as f64;
    for x in &mut data {
        *x *= norm;
    }
    Ok(data)
}

/// Spectral energy `sum |X(w)|^2` of `field` restricted to each band.
pub fn band_energies(field: &[f64], partition: &BandPartition) -> Result<[f64; 4]> {
    let spectrum = fft3(field, partition.shape())?;
    let mut energy = [0.0f64; 4];
    for (x, band) in spectrum.iter().zip(partition.labels()) {
        energy[*band as usize] += x.norm_sqr();
    }
    Ok(energy)
}

/// Band energies of `error` normalized by the total spectral energy of
/// `reference` plus `epsilon`.
pub fn band_energy_ratios(
    error: &VelocityField,
    reference: &VelocityField,
    partition: &BandPartition,
    epsilon: f64,
) -> Result<[f64; 4]> {
    if error.shape != partition.shape() || reference.shape != partition.shape() {
        return Err(Error::Shape(format!(
            "error {:?} and reference {:?} must match partition {:?}",
            error.shape,
            reference.shape,
            partition.shape()
        )));
    }
    let err = band_energies(&error.data, partition)?;
    let total_ref: f64 = fft3(&reference.data, reference.shape)?.iter().map(|x| x.norm_sqr()).sum();
    let denom = total_ref + epsilon;
    Ok(err.map(|e| e / denom))
}

/// `sum_q w_q r_q`.
pub fn weighted_error(ratios: &[f64; 4], weights: &BandWeights) -> Result<f64> {
    BandWeights::new(weights.0)?;
    Ok(ratios.iter().zip(weights.0).map(|(r, w)| r * w).sum())
}

/// Complex inverse transform of seeded Gaussian noise whose spectrum has been
/// confined to `band`. The spectrum is that of a real white-noise field, so
/// it is Hermitian and the imaginary part is rounding noise only.
pub fn band_limited_noise(partition: &BandPartition, band: Band, seed: u64) -> Result<Vec<Complex64>> {
    if partition.count(band) == 0 {
        return Err(Error::Domain(format!("band {band} is empty for shape {:?}", partition.shape())));
    }
    let shape = partition.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut spectrum = fft3(&noise, shape)?;
    for (x, b) in spectrum.iter_mut().zip(partition.labels()) {
        if *b != band {
            *x = Complex64::new(0.0, 0.0);
        }
    }
    ifft3(&spectrum, shape)
}

/// Real perturbation confined to `band` with `||delta|| = alpha * ||reference||`.
pub fn band_perturbation(
    reference: &VelocityField,
    partition: &BandPartition,
    band: Band,
    alpha: f64,
    seed: u64,
) -> Result<VelocityField> {
    if reference.shape != partition.shape() {
        return Err(Error::Shape(format!(
            "reference {:?} does not match partition {:?}",
            reference.shape,
            partition.shape()
        )));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Domain(format!("alpha {alpha} must be finite and nonnegative")));
    }
    let ref_norm = reference.norm();
    if ref_norm == 0.0 {
        return Err(Error::Domain("reference field is identically zero".into()));
    }
    let raw: Vec<f64> = band_limited_noise(partition, band, seed)?.iter().map(|c| c.re).collect();
    let raw_norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if raw_norm == 0.0 {
        return Err(Error::Internal(format!("band {band} noise vanished")));
    }
    let s = alpha * ref_norm / raw_norm;
    VelocityField::new(reference.shape, raw.iter().map(|x| x * s).collect())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("PSNR inputs of {} and {} values", a.len(), b.len())));
    }
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::Domain(format!("peak {peak} must be positive")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
