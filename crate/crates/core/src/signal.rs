//! Canonical waveform representation, limb-lead derivation, filtering, and
//! length normalization.
//!
//! The filter chain is a zero-phase Butterworth bandpass (bilinear-transform
//! design, forward-backward application) followed by a despiking median
//! filter, then truncation to a fixed sample count.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("lead derivation failed: {0}")]
    Derivation(String),
    #[error("filter design failed: {0}")]
    FilterDesign(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("lead too short: {0}")]
    Length(String),
    #[error("missing lead {0}")]
    MissingLead(Lead),
}

/// The twelve standard ECG leads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lead {
    I,
    II,
    III,
    AVR,
    AVL,
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Lead {
    pub const ALL: [Lead; 12] = [
        Lead::I,
        Lead::II,
        Lead::III,
        Lead::AVR,
        Lead::AVL,
        Lead::AVF,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    /// The eight recorded leads that appear on rendered images, in plot order.
    pub const PLOTTED: [Lead; 8] = [
        Lead::I,
        Lead::II,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Lead::I => "I",
            Lead::II => "II",
            Lead::III => "III",
            Lead::AVR => "aVR",
            Lead::AVL => "aVL",
            Lead::AVF => "aVF",
            Lead::V1 => "V1",
            Lead::V2 => "V2",
            Lead::V3 => "V3",
            Lead::V4 => "V4",
            Lead::V5 => "V5",
            Lead::V6 => "V6",
        }
    }

    pub fn parse(name: &str) -> Option<Lead> {
        Lead::ALL.iter().copied().find(|l| l.as_str() == name)
    }
}

impl std::fmt::Display for Lead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Patient-keyed multi-lead waveform at a known sampling rate; the unit of
/// ingestion and splitting. Sample values are millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub patient_id: String,
    pub sampling_rate_hz: u32,
    /// Insertion-ordered lead traces; all the same length.
    pub leads: Vec<(Lead, Vec<f64>)>,
    pub label: Option<u8>,
    pub acquired_at: Option<String>,
}

impl EcgRecord {
    pub fn lead(&self, lead: Lead) -> Option<&[f64]> {
        self.leads
            .iter()
            .find(|(l, _)| *l == lead)
            .map(|(_, s)| s.as_slice())
    }

    pub fn has_lead(&self, lead: Lead) -> bool {
        self.lead(lead).is_some()
    }

    pub fn n_samples(&self) -> usize {
        self.leads.first().map(|(_, s)| s.len()).unwrap_or(0)
    }

    /// Checks the structural invariants: equal lead lengths and a positive
    /// sampling rate.
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.sampling_rate_hz == 0 {
            return Err(SignalError::Argument("sampling_rate_hz must be > 0".into()));
        }
        let n = self.n_samples();
        for (lead, samples) in &self.leads {
            if samples.len() != n {
                return Err(SignalError::Argument(format!(
                    "lead {lead} has {} samples, expected {n}",
                    samples.len()
                )));
            }
        }
        Ok(())
    }
}

/// Bandpass and median filter parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub butterworth_order: usize,
    pub median_kernel_samples: usize,
    /// When set, the median filter output is treated as a baseline estimate
    /// and subtracted instead of replacing the signal.
    #[serde(default)]
    pub subtract_median_baseline: bool,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            low_cut_hz: 0.5,
            high_cut_hz: 40.0,
            butterworth_order: 3,
            median_kernel_samples: 5,
            subtract_median_baseline: false,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, rate_hz: u32) -> Result<(), SignalError> {
        let nyquist = rate_hz as f64 / 2.0;
        if !(self.low_cut_hz > 0.0
            && self.low_cut_hz < self.high_cut_hz
            && self.high_cut_hz < nyquist)
        {
            return Err(SignalError::FilterDesign(format!(
                "band edges ({}, {}) must satisfy 0 < low < high < {nyquist}",
                self.low_cut_hz, self.high_cut_hz
            )));
        }
        if self.butterworth_order == 0 {
            return Err(SignalError::FilterDesign("order must be >= 1".into()));
        }
        if self.median_kernel_samples % 2 == 0 || self.median_kernel_samples == 0 {
            return Err(SignalError::Argument(format!(
                "median kernel must be odd and positive, got {}",
                self.median_kernel_samples
            )));
        }
        Ok(())
    }
}

/// Adds III, aVR, aVL, aVF from leads I and II (Einthoven/Goldberger
/// relations). Leads already present are left untouched.
pub fn derive_limb_leads(record: &EcgRecord) -> Result<EcgRecord, SignalError> {
    let one = record
        .lead(Lead::I)
        .ok_or(SignalError::Derivation("lead I required".into()))?;
    let two = record
        .lead(Lead::II)
        .ok_or(SignalError::Derivation("lead II required".into()))?;
    if one.len() != two.len() {
        return Err(SignalError::Derivation(format!(
            "leads I and II differ in length ({} vs {})",
            one.len(),
            two.len()
        )));
    }

    let zip = || one.iter().zip(two.iter());
    let derived: [(Lead, Vec<f64>); 4] = [
        (Lead::III, zip().map(|(i, ii)| ii - i).collect()),
        (Lead::AVR, zip().map(|(i, ii)| -(i + ii) / 2.0).collect()),
        (Lead::AVL, zip().map(|(i, ii)| i - ii / 2.0).collect()),
        (Lead::AVF, zip().map(|(i, ii)| ii - i / 2.0).collect()),
    ];

    let mut out = record.clone();
    for (lead, samples) in derived {
        if !out.has_lead(lead) {
            out.leads.push((lead, samples));
        }
    }
    Ok(out)
}

/// One second-order section of the cascaded filter.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let eval = |c: &[f64; 3]| (Complex64::new(c[2], 0.0) * z_inv + c[1]) * z_inv + c[0];
        eval(&self.b) / eval(&self.a)
    }

    /// Steady-state section state for a unit step input.
    fn step_zi(&self) -> [f64; 2] {
        // Solve (I - companion(a)^T) zi = b[1:] - a[1:]*b[0] for the
        // direct-form II transposed state.
        let (b, a) = (&self.b, &self.a);
        let m = [1.0 + a[1], -1.0, a[2], 1.0];
        let rhs = [b[1] - a[1] * b[0], b[2] - a[2] * b[0]];
        let det = m[0] * m[3] - m[1] * m[2];
        [
            (rhs[0] * m[3] - rhs[1] * m[1]) / det,
            (m[0] * rhs[1] - m[2] * rhs[0]) / det,
        ]
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }
}

/// Digital Butterworth bandpass as a cascade of second-order sections; the
/// cascade form keeps the low band edge numerically well conditioned.
#[derive(Debug, Clone)]
pub struct BandpassFilter {
    pub sections: Vec<Biquad>,
    /// Largest pole magnitude; sets the slowest transient decay.
    pub max_pole_radius: f64,
}

impl BandpassFilter {
    /// Edge extension long enough for the slowest transient mode to decay by
    /// ~e^-6, but never shorter than 3x the digital filter order.
    pub fn edge_extension(&self) -> usize {
        let slow = if self.max_pole_radius < 1.0 {
            (-6.0 / self.max_pole_radius.ln()).ceil() as usize
        } else {
            usize::MAX
        };
        slow.max(6 * self.sections.len())
    }
}

impl BandpassFilter {
    /// Single-pass magnitude response at `freq_hz`.
    pub fn magnitude_at(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * freq_hz / rate_hz;
        let z_inv = Complex64::from_polar(1.0, -omega);
        self.sections
            .iter()
            .map(|s| s.response(z_inv).norm())
            .product()
    }
}

/// Designs the bilinear-transform digital Butterworth bandpass of the given
/// order and band edges.
pub fn design_bandpass(spec: &FilterSpec, rate_hz: u32) -> Result<BandpassFilter, SignalError> {
    spec.validate(rate_hz)?;
    let n = spec.butterworth_order;
    let fs = rate_hz as f64;
    let k = 2.0 * fs; // bilinear constant 2/T

    // Pre-warped analog band edges.
    let warp = |f: f64| k * (std::f64::consts::PI * f / fs).tan();
    let w1 = warp(spec.low_cut_hz);
    let w2 = warp(spec.high_cut_hz);
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    // Analog prototype poles on the unit circle, left half-plane, each mapped
    // through the lowpass->bandpass transform s^2 - (bw*p)*s + w0^2 = 0 and
    // then the bilinear transform.
    let mut digital_poles = Vec::with_capacity(2 * n);
    for i in 0..n {
        let theta = std::f64::consts::PI * (2 * i + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let bp = p * bw;
        let disc = (bp * bp - 4.0 * w0 * w0).sqrt();
        for s in [(bp + disc) / 2.0, (bp - disc) / 2.0] {
            digital_poles.push((Complex64::new(k, 0.0) + s) / (Complex64::new(k, 0.0) - s));
        }
    }

    // Pair poles into biquad denominators: conjugate pairs directly, leftover
    // real poles two at a time.
    let mut denoms: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut reals: Vec<f64> = Vec::new();
    for p in &digital_poles {
        if p.im > 1e-10 {
            denoms.push([1.0, -2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= 1e-10 {
            reals.push(p.re);
        }
    }
    reals.sort_by(|x, y| x.total_cmp(y));
    for pair in reals.chunks(2) {
        if pair.len() == 2 {
            denoms.push([1.0, -(pair[0] + pair[1]), pair[0] * pair[1]]);
        }
    }
    if denoms.len() != n {
        return Err(SignalError::FilterDesign(
            "pole pairing failed; non-conjugate pole set".into(),
        ));
    }

    // Each section carries one zero at z=+1 and one at z=-1 (numerator z^2-1)
    // and is individually normalized to unit gain at the digital image of the
    // analog center frequency.
    let theta0 = 2.0 * (w0 / k).atan();
    let z0_inv = Complex64::from_polar(1.0, -theta0);
    let mut sections = Vec::with_capacity(n);
    for den in denoms {
        let raw = Biquad {
            b: [1.0, 0.0, -1.0],
            a: den,
        };
        let gain = raw.response(z0_inv).norm();
        if !gain.is_finite() || gain == 0.0 {
            return Err(SignalError::FilterDesign("degenerate passband gain".into()));
        }
        sections.push(Biquad {
            b: [1.0 / gain, 0.0, -1.0 / gain],
            a: den,
        });
    }
    let max_pole_radius = digital_poles
        .iter()
        .map(|p| p.norm())
        .fold(0.0f64, f64::max);
    Ok(BandpassFilter {
        sections,
        max_pole_radius,
    })
}

/// Cascaded direct-form II transposed pass with steady-state initial
/// conditions scaled by the first input sample.
#[doc(hidden)]
pub fn sos_filtfilt_raw(filt: &BandpassFilter, x: &mut Vec<f64>) {
    sos_filter(filt, x);
    x.reverse();
    sos_filter(filt, x);
    x.reverse();
}

fn sos_filter(filt: &BandpassFilter, x: &mut Vec<f64>) {
    let x0 = x[0];
    let mut scale = 1.0;
    for sec in &filt.sections {
        let zi = sec.step_zi();
        let mut s0 = zi[0] * scale * x0;
        let mut s1 = zi[1] * scale * x0;
        for v in x.iter_mut() {
            let xin = *v;
            let y = sec.b[0] * xin + s0;
            s0 = sec.b[1] * xin + s1 - sec.a[1] * y;
            s1 = sec.b[2] * xin - sec.a[2] * y;
            *v = y;
        }
        scale *= sec.dc_gain();
    }
}

/// Zero-phase Butterworth bandpass: forward-backward application of the
/// designed filter over a symmetric (mirror) signal extension. The mirror
/// preserves the local mean at the joins, and the extension is sized so the
/// slowest pole's transient dies out before it reaches the kept samples.
pub fn bandpass_filter(
    samples: &[f64],
    rate_hz: u32,
    spec: &FilterSpec,
) -> Result<Vec<f64>, SignalError> {
    if samples.len() < 3 * spec.butterworth_order {
        return Err(SignalError::Argument(format!(
            "need at least {} samples, got {}",
            3 * spec.butterworth_order,
            samples.len()
        )));
    }
    let filt = design_bandpass(spec, rate_hz)?;
    let ext = filt.edge_extension().min(samples.len() - 1);
    let n = samples.len();
    let mut x = Vec::with_capacity(n + 2 * ext);
    x.extend((1..=ext).rev().map(|i| samples[i]));
    x.extend_from_slice(samples);
    x.extend((1..=ext).rev().map(|i| samples[n - 1 - i]));

    sos_filter(&filt, &mut x);
    x.reverse();
    sos_filter(&filt, &mut x);
    x.reverse();

    Ok(x[ext..ext + n].to_vec())
}

/// Sliding-window median with symmetrically shrunk edge windows, so every
/// window stays odd and centered.
pub fn median_filter(samples: &[f64], kernel: usize) -> Result<Vec<f64>, SignalError> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(SignalError::Argument(format!(
            "kernel must be odd and positive, got {kernel}"
        )));
    }
    if kernel > samples.len() {
        return Err(SignalError::Argument(format!(
            "kernel {kernel} exceeds signal length {}",
            samples.len()
        )));
    }
    let half = kernel / 2;
    let n = samples.len();
    let mut out = Vec::with_capacity(n);
    let mut window = Vec::with_capacity(kernel);
    for i in 0..n {
        let r = half.min(i).min(n - 1 - i);
        window.clear();
        window.extend_from_slice(&samples[i - r..=i + r]);
        let mid = window.len() / 2;
        window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        out.push(window[mid]);
    }
    Ok(out)
}

/// Keeps the leading `target_samples` of every lead.
pub fn truncate(record: &EcgRecord, target_samples: usize) -> Result<EcgRecord, SignalError> {
    for (lead, samples) in &record.leads {
        if samples.len() < target_samples {
            return Err(SignalError::Length(format!(
                "lead {lead} has {} samples, need {target_samples}",
                samples.len()
            )));
        }
    }
    let mut out = record.clone();
    for (_, samples) in &mut out.leads {
        samples.truncate(target_samples);
    }
    Ok(out)
}

/// Full preprocessing chain: derive limb leads, bandpass, median filter,
/// truncate, in that order.
pub fn preprocess(
    record: &EcgRecord,
    spec: &FilterSpec,
    target_samples: usize,
) -> Result<EcgRecord, SignalError> {
    record.validate()?;
    for lead in Lead::PLOTTED {
        if !record.has_lead(lead) {
            return Err(SignalError::MissingLead(lead));
        }
    }
    let mut rec = derive_limb_leads(record)?;
    for (_, samples) in &mut rec.leads {
        let banded = bandpass_filter(samples, rec.sampling_rate_hz, spec)?;
        let median = median_filter(&banded, spec.median_kernel_samples)?;
        *samples = if spec.subtract_median_baseline {
            banded.iter().zip(&median).map(|(x, m)| x - m).collect()
        } else {
            median
        };
    }
    truncate(&rec, target_samples)
}
