//! Preprocessing of recorded EEG: ICA-based removal of ocular components,
//! neighborhood and moving-average smoothing, and a zero-phase band-pass.
//!
//! Data are `channels × samples` matrices. The mixing matrix has one row per
//! channel and one column per component; the unmixing matrix is the reverse.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::NeighborMap;

/// Relative power of each component's scalp map on the EOG channels.
///
/// For component `c` with weights `w` (column `c` of `mix`),
/// `Pr = (Pe − Pne) / Pne` where `Pe` sums `w²` over EOG channels and `Pne`
/// over the rest. A component with no weight off the EOG channels gets
/// `+∞`.
pub fn eog_ratio(mix: &DMatrix<f64>, eog_channels: &[usize]) -> Result<Vec<f64>> {
    let channels = mix.nrows();
    let eog: BTreeSet<usize> = eog_channels.iter().copied().collect();
    if eog.is_empty() {
        return Err(Error::Contract("EOG channel set is empty".into()));
    }
    if let Some(&bad) = eog.iter().find(|&&c| c >= channels) {
        return Err(Error::Contract(format!(
            "EOG channel {bad} out of range for {channels} channels"
        )));
    }
    if eog.len() == channels {
        return Err(Error::Contract("every channel is marked EOG".into()));
    }
    check_finite(mix, "mixing matrix")?;
    Ok(mix
        .column_iter()
        .map(|w| {
            let (mut pe, mut pne) = (0.0, 0.0);
            for (i, x) in w.iter().enumerate() {
                if eog.contains(&i) {
                    pe += x * x;
                } else {
                    pne += x * x;
                }
            }
            if pne == 0.0 {
                f64::INFINITY
            } else {
                (pe - pne) / pne
            }
        })
        .collect())
}

/// Removes the given components from `data`: `data − mix[:, S]·(unmix[S, :]·data)`.
///
/// Only the flagged components are subtracted, so the part of the data the
/// decomposition does not span is left alone. When `unmix·mix = I` on the
/// flagged components the operation is a projection and applying it twice
/// changes nothing.
pub fn remove_components(
    data: &DMatrix<f64>,
    mix: &DMatrix<f64>,
    unmix: &DMatrix<f64>,
    components: &[usize],
) -> Result<DMatrix<f64>> {
    check_decomposition(data, mix, unmix)?;
    let set: BTreeSet<usize> = components.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&c| c >= mix.ncols()) {
        return Err(Error::Contract(format!(
            "component {bad} out of range for {} components",
            mix.ncols()
        )));
    }
    if set.is_empty() {
        return Ok(data.clone());
    }
    let idx: Vec<usize> = set.into_iter().collect();
    let m = mix.select_columns(&idx);
    let u = unmix.select_rows(&idx);
    Ok(data - m * (u * data))
}

/// Result of [`remove_eog`].
#[derive(Debug, Clone)]
pub struct EogRemoval {
    pub cleaned: DMatrix<f64>,
    pub ratios: Vec<f64>,
    /// Components whose ratio reached the threshold, ascending.
    pub removed: Vec<usize>,
}

/// Flags every component with `Pr ≥ tau` and removes it from `data`.
///
/// `tau = +∞` removes nothing. `extra` lists further components to drop
/// regardless of their ratio (cardiac components, say).
pub fn remove_eog(
    data: &DMatrix<f64>,
    mix: &DMatrix<f64>,
    unmix: &DMatrix<f64>,
    eog_channels: &[usize],
    tau: f64,
    extra: &[usize],
) -> Result<EogRemoval> {
    if tau.is_nan() {
        return Err(Error::Domain("EOG threshold is NaN".into()));
    }
    check_decomposition(data, mix, unmix)?;
    let ratios = eog_ratio(mix, eog_channels)?;
    let mut removed: BTreeSet<usize> = ratios
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= tau)
        .map(|(c, _)| c)
        .collect();
    removed.extend(extra.iter().copied());
    let removed: Vec<usize> = removed.into_iter().collect();
    let cleaned = remove_components(data, mix, unmix, &removed)?;
    Ok(EogRemoval { cleaned, ratios, removed })
}

/// Replaces each channel by the mean of itself and its neighbors.
pub fn spatial_filter(data: &DMatrix<f64>, neighbors: &NeighborMap) -> Result<DMatrix<f64>> {
    if neighbors.len() != data.nrows() {
        return Err(Error::Dimension {
            what: "neighbor map",
            expected: data.nrows(),
            actual: neighbors.len(),
        });
    }
    let mut out = DMatrix::zeros(data.nrows(), data.ncols());
    for i in 0..data.nrows() {
        let nb = neighbors.neighbors(i);
        let mut row = data.row(i).clone_owned();
        for &j in nb {
            row += data.row(j);
        }
        out.set_row(i, &(row / (nb.len() + 1) as f64));
    }
    Ok(out)
}

/// Centered moving average over `window` samples. Near the edges the
/// window shrinks symmetrically so it stays centered.
pub fn temporal_filter(data: &DMatrix<f64>, window: usize) -> Result<DMatrix<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Domain(format!("window must be odd and positive, got {window}")));
    }
    let half = window / 2;
    let t = data.ncols();
    let mut out = DMatrix::zeros(data.nrows(), t);
    for j in 0..t {
        let h = half.min(j).min(t - 1 - j);
        let cols = data.columns(j - h, 2 * h + 1);
        let mean = cols.column_sum() / (2 * h + 1) as f64;
        out.set_column(j, &mean);
    }
    Ok(out)
}

/// Default temporal window in samples.
pub const DEFAULT_WINDOW: usize = 5;

/// One second-order section in transposed direct form II, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// DC gain `H(1)`.
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State that makes a constant input `x0` produce its steady output.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y = self.dc_gain() * x0;
        let z2 = self.b[2] * x0 - self.a[1] * y;
        [y - self.b[0] * x0, z2]
    }

    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [mut z1, mut z2] = self.steady_state(x0);
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }

    /// Magnitude response at `freq` for sampling rate `rate`.
    pub fn magnitude(&self, freq: f64, rate: f64) -> f64 {
        let w = 2.0 * PI * freq / rate;
        let z1 = nalgebra::Complex::new(w.cos(), -w.sin());
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = 1.0 + z1 * self.a[0] + z2 * self.a[1];
        (num / den).norm()
    }
}

/// Butterworth order of each band edge.
pub const BUTTERWORTH_ORDER: usize = 4;

/// Sections of a Butterworth band-pass: a low-pass at `high` cascaded with
/// a high-pass at `low`, each of [`BUTTERWORTH_ORDER`].
pub fn butterworth_bandpass(low: f64, high: f64, rate: f64) -> Result<Vec<Biquad>> {
    if !(low > 0.0 && high > low && low.is_finite() && high.is_finite()) {
        return Err(Error::Domain(format!("need 0 < low < high, got {low}, {high}")));
    }
    if !(rate > 2.0 * high) {
        return Err(Error::Domain(format!(
            "sampling rate {rate} Hz must exceed twice the upper edge {high} Hz"
        )));
    }
    let mut sections = Vec::with_capacity(BUTTERWORTH_ORDER);
    for k in 0..BUTTERWORTH_ORDER / 2 {
        let theta = (2 * k + 1) as f64 * PI / (2 * BUTTERWORTH_ORDER) as f64;
        let q = 1.0 / (2.0 * theta.cos());
        sections.push(section(high, rate, q, false));
        sections.push(section(low, rate, q, true));
    }
    Ok(sections)
}

/// Bilinear second-order low- or high-pass with the cutoff prewarped.
fn section(cutoff: f64, rate: f64, q: f64, highpass: bool) -> Biquad {
    let k = (PI * cutoff / rate).tan();
    let k2 = k * k;
    let norm = 1.0 / (1.0 + k / q + k2);
    let b = if highpass {
        [norm, -2.0 * norm, norm]
    } else {
        [k2 * norm, 2.0 * k2 * norm, k2 * norm]
    };
    Biquad { b, a: [2.0 * (k2 - 1.0) * norm, (1.0 - k / q + k2) * norm] }
}

/// Zero-phase band-pass: the Butterworth cascade is run forward and then
/// backward over each channel, padded at both ends by odd reflection.
pub fn bandpass(data: &DMatrix<f64>, rate: f64, low: f64, high: f64) -> Result<DMatrix<f64>> {
    let sections = butterworth_bandpass(low, high, rate)?;
    check_finite(data, "time series")?;
    let t = data.ncols();
    if t < 2 {
        return Err(Error::Domain(format!("need at least 2 samples, got {t}")));
    }
    let pad = ((3.0 * rate / low).ceil() as usize).min(t - 1);
    let rows: Vec<Vec<f64>> = (0..data.nrows())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = data.row(i).iter().copied().collect();
            filtfilt(&sections, &x, pad)
        })
        .collect();
    Ok(DMatrix::from_fn(data.nrows(), t, |i, j| rows[i][j]))
}

fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let t = x.len();
    let (first, last) = (x[0], x[t - 1]);
    let mut buf = Vec::with_capacity(t + 2 * pad);
    buf.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    buf.extend_from_slice(x);
    buf.extend((1..=pad).map(|i| 2.0 * last - x[t - 1 - i]));
    for s in sections {
        s.run(&mut buf);
    }
    buf.reverse();
    for s in sections {
        s.run(&mut buf);
    }
    buf.reverse();
    buf[pad..pad + t].to_vec()
}

fn check_decomposition(data: &DMatrix<f64>, mix: &DMatrix<f64>, unmix: &DMatrix<f64>) -> Result<()> {
    if mix.nrows() != data.nrows() {
        return Err(Error::Dimension {
            what: "mixing matrix rows",
            expected: data.nrows(),
            actual: mix.nrows(),
        });
    }
    if unmix.ncols() != data.nrows() {
        return Err(Error::Dimension {
            what: "unmixing matrix columns",
            expected: data.nrows(),
            actual: unmix.ncols(),
        });
    }
    if unmix.nrows() != mix.ncols() {
        return Err(Error::Dimension {
            what: "unmixing matrix rows",
            expected: mix.ncols(),
            actual: unmix.nrows(),
        });
    }
    check_finite(data, "time series")?;
    check_finite(mix, "mixing matrix")?;
    check_finite(unmix, "unmixing matrix")
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} contains non-finite values")))
    }
}

/// Sinusoid of `freq` Hz sampled at `rate` for `samples` samples.
pub fn sinusoid(freq: f64, rate: f64, samples: usize) -> DVector<f64> {
    DVector::from_fn(samples, |j, _| (2.0 * PI * freq * j as f64 / rate).sin())
}
