//! Certainty-based reduction of the source space.
//!
//! * Stage 0 tabulates, for every lead-field column, the electrode where its
//!   scalp signature peaks.
//! * Stage I finds the peaks of the measurement and scores the sources
//!   peaking at each of them by how well their signature matches the
//!   measurement on the peak's hat (the peak electrode and its neighbors).
//!   The best ones become candidates; candidates the others can stand in for
//!   are eliminated, and the survivors (primary sources) are dilated on the
//!   grid into secondary sources.
//! * Stage II solves the inverse problem restricted to the selected columns.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    auto_mu, electrode_neighbors, grid_neighbors, ElectrodeArray, NeighborMap, SourceGrid,
};
use crate::linalg::pinv_solve;
use crate::solvers::{focuss, FocussConfig, RegularizedMinNorm, SourceEstimate};

/// Peak electrode of every lead-field column and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakTable {
    column_peak: Vec<usize>,
    by_electrode: Vec<Vec<usize>>,
}

impl PeakTable {
    pub fn peak_of(&self, column: usize) -> usize {
        self.column_peak[column]
    }

    /// Columns whose signature peaks at `electrode`, ascending.
    pub fn columns_at(&self, electrode: usize) -> &[usize] {
        &self.by_electrode[electrode]
    }

    pub fn columns(&self) -> usize {
        self.column_peak.len()
    }

    pub fn electrodes(&self) -> usize {
        self.by_electrode.len()
    }
}

/// Index of the largest `|v|` among electrodes that are at least as large as
/// all their neighbors. Ties go to the lower index.
fn neighborhood_peak(v: DVectorView<f64>, enbr: &NeighborMap) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..v.len() {
        let m = v[i].abs();
        if best.is_some_and(|(_, b)| m <= b) {
            continue;
        }
        if enbr.neighbors(i).iter().all(|&l| m >= v[l].abs()) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

pub fn build_peak_table(k: &DMatrix<f64>, enbr: &NeighborMap) -> Result<PeakTable> {
    if k.nrows() != enbr.len() {
        return Err(Error::Dimension {
            what: "lead-field rows vs electrode neighbor map",
            expected: enbr.len(),
            actual: k.nrows(),
        });
    }
    let column_peak: Vec<usize> = k
        .column_iter()
        .map(|c| neighborhood_peak(c, enbr))
        .collect();
    let mut by_electrode = vec![Vec::new(); k.nrows()];
    for (j, &p) in column_peak.iter().enumerate() {
        by_electrode[p].push(j);
    }
    Ok(PeakTable {
        column_peak,
        by_electrode,
    })
}

/// Electrodes that dominate their neighborhood in `|Phi|` and reach
/// `floor_frac` of the largest magnitude, sorted by descending `|Phi|`
/// (then ascending index).
pub fn find_measurement_peaks(phi: &DVector<f64>, enbr: &NeighborMap, floor_frac: f64) -> Vec<usize> {
    let max = phi.amax();
    if max == 0.0 {
        return Vec::new();
    }
    let floor = floor_frac * max;
    let mut peaks: Vec<usize> = (0..phi.len())
        .filter(|&i| {
            let m = phi[i].abs();
            m >= floor && enbr.neighbors(i).iter().all(|&j| m >= phi[j].abs())
        })
        .collect();
    peaks.sort_by(|&a, &b| phi[b].abs().total_cmp(&phi[a].abs()).then(a.cmp(&b)));
    peaks
}

/// A peak electrode followed by its neighbors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hat {
    electrodes: Vec<usize>,
}

impl Hat {
    pub fn new(peak: usize, enbr: &NeighborMap) -> Self {
        let mut electrodes = Vec::with_capacity(enbr.neighbors(peak).len() + 1);
        electrodes.push(peak);
        electrodes.extend_from_slice(enbr.neighbors(peak));
        Self { electrodes }
    }

    pub fn from_electrodes(electrodes: Vec<usize>) -> Result<Self> {
        if electrodes.is_empty() {
            return Err(Error::Contract("a hat needs at least its peak electrode".into()));
        }
        Ok(Self { electrodes })
    }

    pub fn peak(&self) -> usize {
        self.electrodes[0]
    }

    pub fn electrodes(&self) -> &[usize] {
        &self.electrodes
    }

    /// `n_e`, the hat size including the peak.
    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }
}

/// Relative magnitude mismatches `(|sc k(i)| - |Phi(i)|) / |Phi(i)|` over the
/// hat, with `sc = Phi(peak) / k(peak)`. Electrodes where `Phi` is zero are
/// skipped.
fn hat_mismatch(phi: &DVector<f64>, column: DVectorView<f64>, hat: &Hat) -> Result<Vec<f64>> {
    let p = hat.peak();
    if phi.len() != column.len() {
        return Err(Error::Dimension {
            what: "measurement vs lead-field column",
            expected: phi.len(),
            actual: column.len(),
        });
    }
    if column[p] == 0.0 || phi[p] == 0.0 {
        return Err(Error::Numeric(format!(
            "zero value at hat peak {p}; scale factor undefined"
        )));
    }
    let sc = phi[p] / column[p];
    let mut dropped = 0;
    let terms = hat
        .electrodes()
        .iter()
        .filter_map(|&i| {
            let m = phi[i].abs();
            if m == 0.0 {
                dropped += 1;
                None
            } else {
                Some(((sc * column[i]).abs() - m) / m)
            }
        })
        .collect();
    if dropped > 0 {
        warn!("{dropped} hat electrode(s) around {p} have zero measurement and were skipped");
    }
    Ok(terms)
}

/// Exponential similarity `sum_i exp(-(1/b) rel_i^2)`, in `(0, n_e]`.
pub fn similarity_exp(
    phi: &DVector<f64>,
    column: DVectorView<f64>,
    hat: &Hat,
    b: f64,
) -> Result<f64> {
    if !(b > 0.0) {
        return Err(Error::Contract(format!("similarity width b must be > 0, got {b}")));
    }
    let terms = hat_mismatch(phi, column, hat)?;
    Ok(terms.iter().map(|r| (-(r * r) / b).exp()).sum())
}

/// l2 mismatch `|rel|_2` over the hat; zero for a perfect magnitude match.
pub fn similarity_l2(phi: &DVector<f64>, column: DVectorView<f64>, hat: &Hat) -> Result<f64> {
    let terms = hat_mismatch(phi, column, hat)?;
    Ok(terms.iter().map(|r| r * r).sum::<f64>().sqrt())
}

/// Maps an l2 mismatch to a certainty, `1 / (1 + SI)`.
pub fn l2_certainty(si: f64) -> f64 {
    1.0 / (1.0 + si)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    Exp,
    L2,
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Self::Exp),
            "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown similarity mode {other:?}"))),
        }
    }
}

/// What a candidate source is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// A single lead-field column, scored with its tabulated peak.
    Column,
    /// A grid point whose dipole orientation is fitted to the hat by least
    /// squares; it peaks wherever the fitted signature peaks.
    Point,
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(Self::Column),
            "point" => Ok(Self::Point),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarssConfig {
    pub mode: SimilarityMode,
    /// Width of the exponential similarity.
    pub b: f64,
    /// Candidates keep at least this fraction of their peak's best
    /// certainty.
    pub keep_frac: f64,
    /// Grid steps used to grow primary sources into secondary ones.
    pub dilation: usize,
    /// Measurement peaks below this fraction of `max |Phi|` are ignored.
    pub floor_frac: f64,
    /// Divide the exponential similarity by the hat size.
    pub normalize_exp: bool,
    pub granularity: Granularity,
    /// Drop candidates, least certain first, while the rest still explain
    /// the measurement.
    pub eliminate: bool,
    /// Relative residual `|Phi - K_P J_P| / |Phi|` the surviving candidates
    /// may leave. Near zero for clean data, about the noise level otherwise.
    pub residual_tol: f64,
}

impl Default for CarssConfig {
    fn default() -> Self {
        Self {
            mode: SimilarityMode::Exp,
            b: 1.0,
            keep_frac: 0.95,
            dilation: 1,
            floor_frac: 0.05,
            normalize_exp: false,
            granularity: Granularity::Point,
            eliminate: true,
            residual_tol: 1e-9,
        }
    }
}

/// Relative noise amplitude `|noise| / |signal|` at a given SNR in dB.
pub fn noise_level(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

impl CarssConfig {
    /// Settings for noisy data: l2 similarity, a looser keep fraction and a
    /// wider dilation. `residual_tol` should be set to the noise level.
    pub fn noisy() -> Self {
        Self {
            mode: SimilarityMode::L2,
            keep_frac: 0.9,
            dilation: 2,
            residual_tol: noise_level(15.0),
            ..Self::default()
        }
    }

    pub fn with_residual_tol(self, residual_tol: f64) -> Self {
        Self {
            residual_tol,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::Config(format!("b must be > 0, got {}", self.b)));
        }
        if !(self.keep_frac > 0.0 && self.keep_frac <= 1.0) {
            return Err(Error::Config(format!("keep_frac must be in (0, 1], got {}", self.keep_frac)));
        }
        if !(1..=2).contains(&self.dilation) {
            return Err(Error::Config(format!("dilation must be 1 or 2, got {}", self.dilation)));
        }
        if !(self.floor_frac >= 0.0 && self.floor_frac <= 1.0) {
            return Err(Error::Config(format!("floor_frac must be in [0, 1], got {}", self.floor_frac)));
        }
        if !(self.residual_tol >= 0.0 && self.residual_tol < 1.0) {
            return Err(Error::Config(format!(
                "residual_tol must be in [0, 1), got {}",
                self.residual_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub column: usize,
    pub certainty: f64,
    pub origin: Origin,
}

/// Reduced column set with a certainty per column, sorted by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyPrior {
    pub entries: Vec<PriorEntry>,
    pub config: CarssConfig,
}

impl CertaintyPrior {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn columns(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.column).collect()
    }

    pub fn certainties(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.entries.iter().map(|e| e.certainty))
    }

    pub fn contains(&self, column: usize) -> bool {
        self.entries.binary_search_by_key(&column, |e| e.column).is_ok()
    }

    pub fn primaries(&self) -> impl Iterator<Item = &PriorEntry> {
        self.entries.iter().filter(|e| e.origin == Origin::Primary)
    }

    /// A prior over every column with the given certainty, all primary.
    pub fn full(columns: usize, certainty: f64, config: CarssConfig) -> Self {
        Self {
            entries: (0..columns)
                .map(|column| PriorEntry {
                    column,
                    certainty,
                    origin: Origin::Primary,
                })
                .collect(),
            config,
        }
    }
}

const FIT_RCOND: f64 = 1e-10;

/// Certainty of a signature on a hat, plus a hat-size-free version of it
/// used to compare candidates found at different peaks.
fn certainty(
    phi: &DVector<f64>,
    column: DVectorView<f64>,
    hat: &Hat,
    config: &CarssConfig,
) -> Result<(f64, f64)> {
    let n = hat.len() as f64;
    match config.mode {
        SimilarityMode::Exp => {
            let s = similarity_exp(phi, column, hat, config.b)?;
            Ok(if config.normalize_exp { (s / n, s / n) } else { (s, s / n) })
        }
        SimilarityMode::L2 => {
            let si = similarity_l2(phi, column, hat)?;
            Ok((l2_certainty(si), l2_certainty(si / n.sqrt())))
        }
    }
}

/// A candidate source: one column, or the three columns of a grid point.
#[derive(Debug, Clone)]
struct Candidate {
    columns: Vec<usize>,
    certainty: f64,
    normalized: f64,
}

fn column_candidates(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    peaks: &PeakTable,
    hat: &Hat,
    config: &CarssConfig,
) -> Result<Vec<(usize, f64, f64)>> {
    peaks
        .columns_at(hat.peak())
        .iter()
        .map(|&c| certainty(phi, k.column(c), hat, config).map(|(s, n)| (c, s, n)))
        .collect()
}

fn point_candidates(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    hat: &Hat,
    config: &CarssConfig,
) -> Result<Vec<(usize, f64, f64)>> {
    let h = hat.electrodes();
    let phi_hat = DVector::from_iterator(h.len(), h.iter().map(|&i| phi[i]));
    let scored: Vec<Option<(usize, f64, f64)>> = (0..k.ncols() / 3)
        .into_par_iter()
        .map(|q| {
            let block = k.columns(3 * q, 3);
            let a = DMatrix::from_fn(h.len(), 3, |i, c| block[(h[i], c)]);
            let m = pinv_solve(&a, &phi_hat, FIT_RCOND);
            if m.iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            let s = block * m;
            if s.iamax() != hat.peak() {
                return Ok(None);
            }
            certainty(phi, s.column(0), hat, config).map(|(c, n)| Some((q, c, n)))
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().flatten().collect())
}

fn ls_residual(k: &DMatrix<f64>, columns: &[usize], phi: &DVector<f64>) -> f64 {
    let kr = k.select_columns(columns);
    let x = pinv_solve(&kr, phi, FIT_RCOND);
    (phi - kr * x).norm()
}

/// Backward elimination over `order` (least certain first): a candidate is
/// dropped when the ones still kept reach `target` without it. Runs of
/// droppable candidates are tested in growing chunks, which gives the same
/// result as testing them one at a time because the residual can only grow
/// as columns are removed. Gives up with `None` once `limit` candidates
/// have been kept.
fn eliminate(
    k: &DMatrix<f64>,
    phi: &DVector<f64>,
    candidates: &[Candidate],
    order: &[usize],
    target: f64,
    limit: usize,
) -> Option<Vec<usize>> {
    let mut alive = vec![true; order.len()];
    let mut kept = 0;
    let (mut i, mut step) = (0, 1);
    while i < order.len() {
        let s = step.min(order.len() - i);
        let rest: Vec<usize> = (0..order.len())
            .filter(|&j| alive[j] && !(i..i + s).contains(&j))
            .flat_map(|j| candidates[order[j]].columns.iter().copied())
            .collect();
        if !rest.is_empty() && ls_residual(k, &rest, phi) <= target {
            alive[i..i + s].iter_mut().for_each(|a| *a = false);
            i += s;
            step *= 2;
        } else if s == 1 {
            kept += 1;
            if kept >= limit {
                return None;
            }
            i += 1;
        } else {
            step = s / 2;
        }
    }
    Some((0..order.len()).filter(|&j| alive[j]).map(|j| order[j]).collect())
}

/// The smallest surviving set over two orderings: raw certainty, and
/// certainty normalized for hat size.
fn smallest_explaining_set(
    k: &DMatrix<f64>,
    phi: &DVector<f64>,
    candidates: &[Candidate],
    residual_tol: f64,
) -> Vec<usize> {
    let all: Vec<usize> = candidates.iter().flat_map(|c| c.columns.iter().copied()).collect();
    let target = ls_residual(k, &all, phi).max(residual_tol * phi.norm()) * (1.0 + 1e-4);
    let ordered = |key: fn(&Candidate) -> f64| {
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.sort_by(|&a, &b| key(&candidates[a]).total_cmp(&key(&candidates[b])).then(a.cmp(&b)));
        idx
    };
    let raw = ordered(|c| c.certainty);
    let mut best = eliminate(k, phi, candidates, &raw, target, usize::MAX)
        .expect("an unbounded elimination always finishes");
    let normalized = ordered(|c| c.normalized);
    if normalized != raw {
        if let Some(other) = eliminate(k, phi, candidates, &normalized, target, best.len()) {
            best = other;
        }
    }
    best.sort_unstable();
    best
}

/// Stage I: candidates scored per measurement peak, optionally thinned to
/// the ones needed to explain the measurement, then grown into secondary
/// sources on the grid.
pub fn select_certain_sources(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    stage0: &Stage0,
    config: &CarssConfig,
) -> Result<CertaintyPrior> {
    config.validate()?;
    let enbr = &stage0.electrode_neighbors;
    let gnbr = stage0.grid_neighbors(config.dilation)?;
    if gnbr.len() * 3 != k.ncols() || stage0.peaks.columns() != k.ncols() {
        return Err(Error::Dimension {
            what: "grid points x 3 vs lead-field columns",
            expected: k.ncols(),
            actual: gnbr.len() * 3,
        });
    }
    if phi.len() != k.nrows() {
        return Err(Error::Dimension {
            what: "measurement vs lead-field rows",
            expected: k.nrows(),
            actual: phi.len(),
        });
    }
    let measurement_peaks = find_measurement_peaks(phi, enbr, config.floor_frac);
    if measurement_peaks.is_empty() {
        return Err(Error::NoPeaks);
    }

    // keyed by column or by point, depending on granularity
    let mut pool: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for &p in &measurement_peaks {
        let hat = Hat::new(p, enbr);
        let scored = match config.granularity {
            Granularity::Column => column_candidates(phi, k, &stage0.peaks, &hat, config)?,
            Granularity::Point => point_candidates(phi, k, &hat, config)?,
        };
        if scored.is_empty() {
            warn!("measurement peak at electrode {p} has no candidate sources");
            continue;
        }
        let best = scored.iter().map(|&(_, s, _)| s).fold(0.0, f64::max);
        for (key, s, n) in scored {
            if s > 0.0 && s >= config.keep_frac * best {
                let e = pool.entry(key).or_insert((s, n));
                e.0 = e.0.max(s);
                e.1 = e.1.max(n);
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::Contract("no candidate sources at any measurement peak".into()));
    }

    let candidates: Vec<Candidate> = pool
        .iter()
        .map(|(&key, &(certainty, normalized))| Candidate {
            columns: match config.granularity {
                Granularity::Column => vec![key],
                Granularity::Point => vec![3 * key, 3 * key + 1, 3 * key + 2],
            },
            certainty,
            normalized,
        })
        .collect();
    let chosen: Vec<usize> = if config.eliminate {
        smallest_explaining_set(k, phi, &candidates, config.residual_tol)
    } else {
        (0..candidates.len()).collect()
    };

    let mut merged: BTreeMap<usize, (f64, Origin)> = BTreeMap::new();
    for &i in &chosen {
        for &c in &candidates[i].columns {
            merged.insert(c, (candidates[i].certainty, Origin::Primary));
        }
    }
    for &i in &chosen {
        let s = candidates[i].certainty;
        let point = candidates[i].columns[0] / 3;
        let grown = std::iter::once(point).chain(gnbr.neighbors(point).iter().copied());
        for q in grown {
            for comp in 0..3 {
                let e = merged.entry(3 * q + comp).or_insert((s, Origin::Secondary));
                e.0 = e.0.max(s);
            }
        }
    }
    let entries = merged
        .into_iter()
        .map(|(column, (certainty, origin))| PriorEntry {
            column,
            certainty,
            origin,
        })
        .collect();
    Ok(CertaintyPrior {
        entries,
        config: *config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaChoice {
    Fixed(f64),
    /// Leave-one-channel-out cross-validation over the default grid.
    CrossValidated,
}

/// Inverse solver used on the restricted problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage2Solver {
    /// FOCUSS started from the prior certainties.
    Focuss(FocussConfig),
    /// Regularized minimum norm; ignores the certainties.
    RegularizedMinNorm(AlphaChoice),
}

impl Stage2Solver {
    fn label(&self) -> &'static str {
        match self {
            Stage2Solver::Focuss(_) => "carss-focuss",
            Stage2Solver::RegularizedMinNorm(_) => "carss-sloreta",
        }
    }
}

/// Solves `min |Phi - K_r J_r|^2` over the prior's columns and scatters the
/// result back into a full-length vector.
pub fn stage2_solve(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    prior: &CertaintyPrior,
    solver: &Stage2Solver,
) -> Result<SourceEstimate> {
    if prior.is_empty() {
        return Err(Error::Contract("stage-2 needs a non-empty prior".into()));
    }
    let columns = prior.columns();
    let kr = k.select_columns(&columns);
    let wrap = |e: Error| Error::Stage2 {
        prior_size: columns.len(),
        inner: Box::new(e),
    };
    let reduced = match solver {
        Stage2Solver::Focuss(cfg) => focuss(phi, &kr, &prior.certainties(), cfg).map_err(wrap)?,
        Stage2Solver::RegularizedMinNorm(choice) => {
            let rmn = RegularizedMinNorm::new(&kr);
            let alpha = match choice {
                AlphaChoice::Fixed(a) => *a,
                AlphaChoice::CrossValidated => rmn
                    .select_alpha(phi, &rmn.default_candidates())
                    .map_err(wrap)?,
            };
            rmn.solve(phi, alpha).map_err(wrap)?
        }
    };
    let mut j = DVector::zeros(k.ncols());
    for (&c, v) in columns.iter().zip(reduced.j.iter()) {
        j[c] = *v;
    }
    Ok(SourceEstimate::new(
        k,
        phi,
        j,
        solver.label(),
        reduced.alpha,
        reduced.iterations,
    ))
}

/// Neighbor maps and peak table, computed once per montage and lead field.
#[derive(Debug, Clone)]
pub struct Stage0 {
    pub mu: f64,
    pub electrode_neighbors: NeighborMap,
    /// Lattice neighborhoods for one and two grid steps.
    lattice: [NeighborMap; 2],
    pub peaks: PeakTable,
}

impl Stage0 {
    /// `mu = None` picks the neighborhood radius with [`auto_mu`].
    pub fn new(
        k: &DMatrix<f64>,
        electrodes: &ElectrodeArray,
        grid: &SourceGrid,
        mu: Option<f64>,
    ) -> Result<Self> {
        let mu = match mu {
            Some(m) => m,
            None => auto_mu(electrodes)?,
        };
        let enbr = electrode_neighbors(electrodes, mu)?;
        let lattice = [grid_neighbors(grid, 1)?, grid_neighbors(grid, 2)?];
        let peaks = build_peak_table(k, &enbr)?;
        Ok(Self {
            mu,
            electrode_neighbors: enbr,
            lattice,
            peaks,
        })
    }

    pub fn grid_neighbors(&self, steps: usize) -> Result<&NeighborMap> {
        match steps {
            1 | 2 => Ok(&self.lattice[steps - 1]),
            _ => Err(Error::Config(format!("dilation must be 1 or 2, got {steps}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CarssResult {
    pub estimate: SourceEstimate,
    pub prior: CertaintyPrior,
    pub measurement_peaks: Vec<usize>,
}

/// Stage I followed by Stage II.
pub fn carss_localize(
    phi: &DVector<f64>,
    k: &DMatrix<f64>,
    stage0: &Stage0,
    config: &CarssConfig,
    solver: &Stage2Solver,
) -> Result<CarssResult> {
    let measurement_peaks = find_measurement_peaks(phi, &stage0.electrode_neighbors, config.floor_frac);
    let prior = select_certain_sources(phi, k, stage0, config)?;
    let estimate = stage2_solve(phi, k, &prior, solver)?;
    Ok(CarssResult {
        estimate,
        prior,
        measurement_peaks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NeighborKind;
    use approx::assert_relative_eq;

    fn path_map(n: usize) -> NeighborMap {
        let sets = (0..n)
            .map(|i| {
                let mut s = Vec::new();
                if i > 0 {
                    s.push(i - 1);
                }
                if i + 1 < n {
                    s.push(i + 1);
                }
                s
            })
            .collect();
        NeighborMap::from_sets(sets, NeighborKind::Geodesic { mu: 1.0 }).unwrap()
    }

    #[test]
    fn hand_computed_similarities() {
        let hat = Hat::from_electrodes(vec![0, 1, 2]).unwrap();
        let column = DVector::from_vec(vec![1.0, 0.5, 0.25]);
        let phi = DVector::from_vec(vec![2.0, 1.2, 0.4]);
        // sc = 2; scaled column (2, 1, 0.5); relative mismatches 0, -1/6, 1/4.
        let r2: f64 = -1.0 / 6.0;
        let r3: f64 = 0.25;
        let expected = 1.0 + (-r2 * r2).exp() + (-r3 * r3).exp();
        let got = similarity_exp(&phi, column.as_view(), &hat, 1.0).unwrap();
        assert!((got - expected).abs() <= 1e-12);
        let l2 = similarity_l2(&phi, column.as_view(), &hat).unwrap();
        assert!((l2 - (r2 * r2 + r3 * r3).sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn perfect_match_scores() {
        let hat = Hat::from_electrodes(vec![2, 0, 1, 3]).unwrap();
        let column = DVector::from_vec(vec![0.3, -0.7, 1.9, 0.05]);
        for c in [-4.0, 0.01, 3.0] {
            let phi = &column * c;
            let s = similarity_exp(&phi, column.as_view(), &hat, 0.5).unwrap();
            assert!((s - 4.0).abs() <= 1e-12);
            assert!(similarity_l2(&phi, column.as_view(), &hat).unwrap() <= 1e-12);
            assert_eq!(l2_certainty(0.0), 1.0);
        }
    }

    #[test]
    fn wide_similarity_tends_to_hat_size() {
        let hat = Hat::from_electrodes(vec![0, 1, 2]).unwrap();
        let column = DVector::from_vec(vec![1.0, 3.0, -0.1]);
        let phi = DVector::from_vec(vec![2.0, 0.2, 0.9]);
        let s = similarity_exp(&phi, column.as_view(), &hat, 1e12).unwrap();
        assert_relative_eq!(s, 3.0, epsilon = 1e-9);
        assert!(similarity_exp(&phi, column.as_view(), &hat, 0.0).is_err());
    }

    #[test]
    fn mismatched_pattern_has_low_certainty() {
        let hat = Hat::from_electrodes(vec![0, 1, 2, 3]).unwrap();
        let column = DVector::from_vec(vec![1.0, 2.5, 3.0, 2.2]);
        let phi = DVector::from_vec(vec![1.0, 0.1, 0.2, 0.1]);
        let si = similarity_l2(&phi, column.as_view(), &hat).unwrap();
        assert!(l2_certainty(si) < 0.5);
    }

    #[test]
    fn zero_hat_electrode_is_skipped() {
        let hat = Hat::from_electrodes(vec![0, 1, 2]).unwrap();
        let column = DVector::from_vec(vec![1.0, 0.5, 0.25]);
        let phi = DVector::from_vec(vec![2.0, 0.0, 0.5]);
        assert_eq!(similarity_exp(&phi, column.as_view(), &hat, 1.0).unwrap(), 2.0);
    }

    #[test]
    fn peak_table_is_global_magnitude_max() {
        let enbr = path_map(5);
        let k = DMatrix::from_column_slice(5, 3, &[
            0.1, 0.9, 0.2, -1.5, 0.3, // global |max| at 3
            2.0, 1.0, 0.0, 1.0, 2.0, // tie between 0 and 4
            0.0, 0.0, 0.5, 0.0, 0.0,
        ]);
        let t = build_peak_table(&k, &enbr).unwrap();
        assert_eq!((t.peak_of(0), t.peak_of(1), t.peak_of(2)), (3, 0, 2));
        assert_eq!(t.columns_at(3), &[0]);
        let flipped = &k * -5.0;
        let t2 = build_peak_table(&flipped, &enbr).unwrap();
        assert_eq!(t, t2);
        for e in 0..5 {
            for &c in t.columns_at(e) {
                assert_eq!(t.peak_of(c), e);
            }
        }
    }

    #[test]
    fn measurement_peaks_cases() {
        let enbr = path_map(7);
        let phi = DVector::from_vec(vec![0.0, 1.0, 0.2, -3.0, 0.1, 0.01, 0.02]);
        // 0.02 at the end is a local max but below 5% of 3.
        assert_eq!(find_measurement_peaks(&phi, &enbr, 0.05), vec![3, 1]);
        assert_eq!(find_measurement_peaks(&(&phi * -2.5), &enbr, 0.05), vec![3, 1]);
        assert!(find_measurement_peaks(&DVector::zeros(7), &enbr, 0.05).is_empty());
        let flat = DVector::from_element(7, 0.4);
        assert_eq!(find_measurement_peaks(&flat, &enbr, 0.05).len(), 7);
    }

    #[test]
    fn config_validation() {
        assert!(CarssConfig::default().validate().is_ok());
        let bad = CarssConfig {
            keep_frac: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CarssConfig {
            dilation: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("l2".parse::<SimilarityMode>().unwrap(), SimilarityMode::L2);
        assert!("cosine".parse::<SimilarityMode>().is_err());
    }

    #[test]
    fn single_column_prior_is_scalar_least_squares() {
        let k = DMatrix::from_fn(6, 6, |i, j| ((i + 2 * j) % 5) as f64 - 1.5 + (i == j) as u8 as f64);
        let col = k.column(4).into_owned();
        let phi = &col * 2.5 + DVector::from_fn(6, |i, _| 0.01 * i as f64);
        let prior = CertaintyPrior {
            entries: vec![PriorEntry {
                column: 4,
                certainty: 0.8,
                origin: Origin::Primary,
            }],
            config: CarssConfig::default(),
        };
        for solver in [
            Stage2Solver::Focuss(FocussConfig::default()),
            Stage2Solver::RegularizedMinNorm(AlphaChoice::Fixed(0.0)),
        ] {
            let est = stage2_solve(&phi, &k, &prior, &solver).unwrap();
            let expected = phi.dot(&col) / col.norm_squared();
            assert_relative_eq!(est.j[4], expected, max_relative = 1e-10);
            assert!(est.j.iter().enumerate().all(|(i, &v)| i == 4 || v == 0.0));
        }
    }

    #[test]
    fn empty_prior_is_rejected() {
        let k = DMatrix::identity(3, 3);
        let prior = CertaintyPrior {
            entries: vec![],
            config: CarssConfig::default(),
        };
        let phi = DVector::from_element(3, 1.0);
        assert!(stage2_solve(&phi, &k, &prior, &Stage2Solver::Focuss(FocussConfig::default())).is_err());
    }

    fn sequential_elimination(
        k: &DMatrix<f64>,
        phi: &DVector<f64>,
        candidates: &[Candidate],
        order: &[usize],
        target: f64,
    ) -> Vec<usize> {
        let mut alive: Vec<usize> = order.to_vec();
        for &c in order {
            let rest: Vec<usize> = alive.iter().copied().filter(|&x| x != c).collect();
            let cols: Vec<usize> = rest.iter().flat_map(|&i| candidates[i].columns.clone()).collect();
            if !cols.is_empty() && ls_residual(k, &cols, phi) <= target {
                alive = rest;
            }
        }
        alive
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]
        #[test]
        fn chunked_elimination_matches_sequential(seed in 0u64..10_000, n in 4usize..30) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = DMatrix::from_fn(12, n, |_, _| rng.random_range(-1.0..1.0));
            let support = [rng.random_range(0..n), rng.random_range(0..n)];
            let mut x = DVector::zeros(n);
            for &s in &support {
                x[s] = rng.random_range(0.5..2.0);
            }
            let phi = &k * x;
            let candidates: Vec<Candidate> = (0..n)
                .map(|c| Candidate { columns: vec![c], certainty: 0.0, normalized: 0.0 })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let target = 1e-9 * phi.norm();
            let mut fast = eliminate(&k, &phi, &candidates, &order, target, usize::MAX).unwrap();
            let mut slow = sequential_elimination(&k, &phi, &candidates, &order, target);
            fast.sort_unstable();
            slow.sort_unstable();
            proptest::prop_assert_eq!(&fast, &slow);
            let cols: Vec<usize> = fast.iter().flat_map(|&i| candidates[i].columns.clone()).collect();
            proptest::prop_assert!(ls_residual(&k, &cols, &phi) <= target);
        }
    }

    #[test]
    fn elimination_gives_up_at_limit() {
        let k = DMatrix::<f64>::identity(4, 4);
        let phi = DVector::from_element(4, 1.0);
        let candidates: Vec<Candidate> = (0..4)
            .map(|c| Candidate { columns: vec![c], certainty: 0.0, normalized: 0.0 })
            .collect();
        let order = [0, 1, 2, 3];
        assert_eq!(eliminate(&k, &phi, &candidates, &order, 1e-9, 5).unwrap(), vec![0, 1, 2, 3]);
        assert!(eliminate(&k, &phi, &candidates, &order, 1e-9, 2).is_none());
    }

    #[test]
    fn noise_level_of_snr() {
        assert_relative_eq!(noise_level(20.0), 0.1, max_relative = 1e-12);
        assert_relative_eq!(noise_level(0.0), 1.0);
        let c = CarssConfig::noisy().with_residual_tol(noise_level(13.0));
        assert!(c.validate().is_ok());
        assert!(CarssConfig::default().with_residual_tol(1.5).validate().is_err());
        assert_eq!("point".parse::<Granularity>().unwrap(), Granularity::Point);
        assert!("voxel".parse::<Granularity>().is_err());
    }
}
