//! Three concentric sphere forward model.
//!
//! A current dipole inside the innermost sphere (brain) is surrounded by two
//! isotropic shells (skull, scalp); the outer boundary is insulating. The
//! scalp potential is the gradient, with respect to source position, of the
//! potential of a unit monopole, expanded in Legendre polynomials:
//!
//! ```text
//! V(r_e) = p . sum_n A_n beta^(n-1) [ n P_n(u) r0_hat + P_n'(u) (e_hat - u r0_hat) ]
//!          / (4 pi sigma_1 R^2)
//! ```
//!
//! with `beta = |r0| / R`, `u = cos` of the angle between source and
//! electrode, `R` the scalp radius, and `A_n` fixed by the layer radii and
//! conductivities. `A_n` is found by carrying the degree-n solution inward
//! from the insulating outer boundary through each interface.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ElectrodeArray, Point3, SourceGrid};

/// Hard cap on the number of Legendre terms.
pub const MAX_TERMS: usize = 200;

/// Truncate once the last terms are below this fraction of the accumulated
/// series magnitude.
pub const SERIES_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    /// Brain, skull and scalp radii, mm.
    pub radii: [f64; 3],
    /// Brain, skull and scalp conductivities, S/m.
    pub conductivities: [f64; 3],
}

impl Default for HeadModel {
    fn default() -> Self {
        Self {
            radii: [80.0, 85.0, 92.0],
            conductivities: [0.33, 0.0042, 0.33],
        }
    }
}

impl HeadModel {
    pub fn validate(&self) -> Result<()> {
        let [r1, r2, r3] = self.radii;
        if !(r1 > 0.0 && r1 < r2 && r2 < r3) {
            return Err(Error::Config(format!(
                "head radii must be strictly increasing and positive: {:?}",
                self.radii
            )));
        }
        if !self.conductivities.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!(
                "conductivities must be positive: {:?}",
                self.conductivities
            )));
        }
        Ok(())
    }

    pub fn brain_radius(&self) -> f64 {
        self.radii[0]
    }

    pub fn scalp_radius(&self) -> f64 {
        self.radii[2]
    }
}

/// Precomputed series coefficients for one head model.
#[derive(Debug, Clone)]
pub struct ThreeShell {
    head: HeadModel,
    /// `coeffs[n - 1]` holds `A_n`.
    coeffs: Vec<f64>,
}

impl ThreeShell {
    pub fn new(head: HeadModel) -> Result<Self> {
        head.validate()?;
        let [r1, r2, r3] = head.radii;
        let [s1, s2, s3] = head.conductivities;
        let (rho1, rho2) = (r1 / r3, r2 / r3);
        let coeffs = (1..=MAX_TERMS)
            .map(|n| {
                let nf = n as f64;
                // Outer shell: a r^n + c r^-(n+1) with zero radial current at r = 1.
                let (a3, c3) = (1.0, nf / (nf + 1.0));
                let surface = a3 + c3;
                // Potential and r dV/dr, expressed as the growing (x) and
                // decaying (y) parts evaluated at the interface radius.
                let (x, y) = (a3 * rho2.powi(n as i32), c3 * rho2.powi(-(n as i32 + 1)));
                let (x, y) = cross_interface(nf, x, y, s3 / s2);
                // Carry skull solution from rho2 down to rho1.
                let ratio = rho1 / rho2;
                let x = x * ratio.powi(n as i32);
                let y = y * ratio.powi(-(n as i32 + 1));
                let (_, y) = cross_interface(nf, x, y, s2 / s1);
                // Decaying brain part is the source term S r^-(n+1).
                let source = y * rho1.powi(n as i32 + 1);
                surface / source
            })
            .collect();
        Ok(Self { head, coeffs })
    }

    pub fn head(&self) -> &HeadModel {
        &self.head
    }

    /// Series coefficient `A_n`, `n >= 1`.
    pub fn coefficient(&self, n: usize) -> f64 {
        self.coeffs[n - 1]
    }

    /// Potentials at `r_el` of unit dipoles along x, y and z at `r_dip`
    /// (both in mm), in volts per A·m.
    pub fn gain(&self, r_dip: &Point3, r_el: &Point3) -> Result<Vector3<f64>> {
        let [r_brain, _, r_scalp] = self.head.radii;
        let b = r_dip.norm();
        if !(b < r_brain) {
            return Err(Error::Domain(format!(
                "dipole at radius {b:.3} mm is not inside the brain sphere ({r_brain} mm)"
            )));
        }
        let e_norm = r_el.norm();
        if (e_norm - r_scalp).abs() > crate::geometry::SPHERE_TOLERANCE_MM {
            return Err(Error::Domain(format!(
                "electrode at radius {e_norm:.3} mm is not on the scalp ({r_scalp} mm)"
            )));
        }
        let e_hat = r_el / e_norm;
        let r_hat = if b > 0.0 { r_dip / b } else { Vector3::x() };
        let beta = b / r_scalp;
        let u = r_hat.dot(&e_hat).clamp(-1.0, 1.0);
        let tangential = e_hat - r_hat * u;

        // Legendre recurrences: P_{n+1} = ((2n+1) u P_n - n P_{n-1}) / (n+1),
        // P'_{n+1} = P'_{n-1} + (2n+1) P_n.
        let (mut p_prev, mut p) = (1.0, u);
        let (mut dp_prev, mut dp) = (0.0, 1.0);
        let mut beta_pow = 1.0;
        let mut radial = 0.0;
        let mut along = 0.0;
        let mut magnitude = 0.0;
        let mut converged = false;
        let mut small_run = 0;
        for n in 1..=MAX_TERMS {
            let nf = n as f64;
            let w = self.coeffs[n - 1] * beta_pow;
            let tr = w * nf * p;
            let ta = w * dp;
            radial += tr;
            along += ta;
            let term = tr.abs() + ta.abs();
            magnitude += term;
            // Two consecutive small terms, so a zero crossing of P_n alone
            // does not end the series.
            if n > 1 && term <= SERIES_TOLERANCE * magnitude {
                small_run += 1;
            } else {
                small_run = 0;
            }
            if beta_pow == 0.0 || small_run == 2 {
                converged = true;
                break;
            }
            let p_next = ((2.0 * nf + 1.0) * u * p - nf * p_prev) / (nf + 1.0);
            let dp_next = dp_prev + (2.0 * nf + 1.0) * p;
            p_prev = p;
            p = p_next;
            dp_prev = dp;
            dp = dp_next;
            beta_pow *= beta;
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "Legendre series did not converge within {MAX_TERMS} terms (source radius {b:.3} mm)"
            )));
        }
        let r_m = r_scalp * 1e-3;
        let scale = 1.0 / (4.0 * std::f64::consts::PI * self.head.conductivities[0] * r_m * r_m);
        Ok((r_hat * radial + tangential * along) * scale)
    }
}

/// Solves the degree-n continuity conditions across one interface. `x`, `y`
/// are the growing and decaying parts of the outer solution at the
/// interface; `sigma_ratio` is outer over inner conductivity. Returns the
/// inner solution's parts at the same radius.
fn cross_interface(n: f64, x: f64, y: f64, sigma_ratio: f64) -> (f64, f64) {
    let v = x + y;
    let flux = sigma_ratio * (n * x - (n + 1.0) * y);
    let xi = ((n + 1.0) * v + flux) / (2.0 * n + 1.0);
    let yi = (n * v - flux) / (2.0 * n + 1.0);
    (xi, yi)
}

/// Potential (V) at electrode `r_el` of a dipole `moment` (A·m) at `r_dip`.
pub fn dipole_potential(
    head: &HeadModel,
    r_dip: &Point3,
    moment: &Vector3<f64>,
    r_el: &Point3,
) -> Result<f64> {
    let model = ThreeShell::new(*head)?;
    Ok(model.gain(r_dip, r_el)?.dot(moment))
}

/// Average-referenced gain matrix, `N x 3M`, columns ordered
/// `(point 0: x, y, z), (point 1: x, y, z), ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadField {
    matrix: DMatrix<f64>,
}

impl LeadField {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.ncols() % 3 != 0 {
            return Err(Error::Contract(format!(
                "lead field must have 3 columns per source, got {}",
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("lead field contains non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn channels(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn columns(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn sources(&self) -> usize {
        self.matrix.ncols() / 3
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.matrix.column(j).into_owned()
    }

    /// Submatrix made of the given columns, in the given order.
    pub fn restrict(&self, columns: &[usize]) -> DMatrix<f64> {
        self.matrix.select_columns(columns)
    }

    pub fn apply(&self, j: &DVector<f64>) -> Result<DVector<f64>> {
        if j.len() != self.columns() {
            return Err(Error::Dimension {
                what: "current density length",
                expected: self.columns(),
                actual: j.len(),
            });
        }
        Ok(&self.matrix * j)
    }
}

/// Assembles the average-referenced lead field. Columns are independent and
/// computed in parallel.
pub fn lead_field(
    head: &HeadModel,
    electrodes: &ElectrodeArray,
    grid: &SourceGrid,
) -> Result<LeadField> {
    let model = ThreeShell::new(*head)?;
    let n = electrodes.len();
    let per_source: Vec<Vec<f64>> = grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(m, r_dip)| {
            let mut cols = vec![0.0; 3 * n];
            for (i, r_el) in electrodes.positions().iter().enumerate() {
                let g = model.gain(r_dip, r_el).map_err(|e| Error::AtSource {
                    source_index: m,
                    inner: Box::new(e),
                })?;
                for c in 0..3 {
                    cols[c * n + i] = g[c];
                }
            }
            for c in 0..3 {
                let col = &mut cols[c * n..(c + 1) * n];
                let mean = col.iter().sum::<f64>() / n as f64;
                col.iter_mut().for_each(|v| *v -= mean);
            }
            Ok(cols)
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = per_source.into_iter().flatten().collect();
    LeadField::from_matrix(DMatrix::from_vec(n, 3 * grid.len(), data))
}

/// Scalp potentials at one instant, one value per channel (V).
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement(pub DVector<f64>);

impl Measurement {
    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Phi = K J`, optionally plus white Gaussian noise at `snr_db` relative to
/// the mean channel power of `K J`. A fixed seed reproduces the noise.
pub fn synthesize(
    k: &LeadField,
    j: &DVector<f64>,
    snr_db: Option<f64>,
    seed: Option<u64>,
) -> Result<Measurement> {
    let mut phi = k.apply(j)?;
    if let Some(snr) = snr_db {
        let n = phi.len() as f64;
        let signal = phi.norm_squared();
        let sigma = (signal / (n * 10f64.powf(snr / 10.0))).sqrt();
        let mut rng = match seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_os_rng(),
        };
        for v in phi.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    Ok(Measurement(phi))
}
