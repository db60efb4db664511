//! Simulated test cases and side-by-side runs of the baseline and
//! reduced-space solvers.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::carss::{carss_localize, noise_level, AlphaChoice, CarssConfig, Stage0, Stage2Solver};
use crate::error::{Error, Result};
use crate::forward::{lead_field, synthesize, HeadModel, LeadField};
use crate::geometry::{build_grid, ElectrodeArray, GridSpec, Point3, SourceGrid};
use crate::metrics::{EvalReport, Evaluator, GroundTruth, MethodReport, TrueSource};
use crate::solvers::{
    focuss, loreta_weight, weighted_min_norm, FocussConfig, RegularizedMinNorm, SourceEstimate,
    WeightSpec,
};

pub const DEFAULT_ELECTRODES: usize = 256;
pub const SEED_CASE_1: u64 = 42;
pub const SEED_CASE_2: u64 = 43;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub xyz_mm: [f64; 3],
    pub moment: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    pub sources: Vec<SourceSpec>,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

/// A test case placed on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SnappedCase {
    pub truth: GroundTruth,
    /// Distance from each printed coordinate to its grid point, mm.
    pub snap_mm: Vec<f64>,
}

impl TestCase {
    /// Moves every source to its nearest grid point. Sources are labelled
    /// `S1`, `S2`, ... in the given order.
    pub fn snap(&self, grid: &SourceGrid) -> Result<SnappedCase> {
        let mut sources = Vec::with_capacity(self.sources.len());
        let mut snap_mm = Vec::with_capacity(self.sources.len());
        for (i, s) in self.sources.iter().enumerate() {
            let p = Point3::from(s.xyz_mm);
            let (point, d) = grid
                .nearest(&p)
                .ok_or_else(|| Error::Config("empty source grid".into()))?;
            if d > grid.spacing() / 2.0 {
                return Err(Error::Config(format!(
                    "source {} at {:?} is {d:.2} mm from the nearest grid point (limit {:.2} mm)",
                    i + 1,
                    s.xyz_mm,
                    grid.spacing() / 2.0
                )));
            }
            sources.push(TrueSource {
                label: format!("S{}", i + 1),
                point,
                moment: Vector3::from(s.moment),
            });
            snap_mm.push(d);
        }
        Ok(SnappedCase {
            truth: GroundTruth::new(sources, grid.len())?,
            snap_mm,
        })
    }
}

fn case(name: &str, xyz: &[[f64; 3]], moment: [f64; 3], seed: u64) -> TestCase {
    TestCase {
        name: name.to_string(),
        sources: xyz
            .iter()
            .map(|&xyz_mm| SourceSpec { xyz_mm, moment })
            .collect(),
        snr_db: None,
        seed,
    }
}

/// Two groups of three neighboring sources: S1-S3 on the left top surface,
/// S4-S6 on the right bottom surface.
///
/// The third coordinate of the first group is printed as
/// (53.8671, -23.06, 31.56), which lands on the same grid point as the first
/// source; y = -13.06, one grid step away, is used instead.
pub fn test_case_1() -> TestCase {
    case(
        "test-case-1",
        &[
            [53.87, -24.22, 31.56],
            [53.87, -24.22, 42.71],
            [53.87, -13.06, 31.56],
            [-13.06, 65.02, 31.56],
            [-13.06, 65.02, 42.71],
            [-13.06, 53.86, 42.71],
        ],
        [1.1, 1.2, 1.3],
        SEED_CASE_1,
    )
}

/// Five isolated sources, three of them deep (S2, S3, S5).
pub fn test_case_2() -> TestCase {
    case(
        "test-case-2",
        &[
            [53.86, -24.23, 31.56],
            [-1.9, -46.53, -1.9],
            [-35.37, 20.40, -57.68],
            [-35.37, 53.86, 31.55],
            [-1.91, -1.91, -57.68],
        ],
        [5.0, 5.0, 5.0],
        SEED_CASE_2,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "focuss")]
    Focuss,
    #[serde(rename = "sloreta")]
    Sloreta,
    #[serde(rename = "mne")]
    Mne,
    #[serde(rename = "wmne")]
    Wmne,
    #[serde(rename = "loreta")]
    Loreta,
    #[serde(rename = "carss-focuss")]
    CarssFocuss,
    #[serde(rename = "carss-sloreta")]
    CarssSloreta,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Focuss,
        Method::Sloreta,
        Method::Mne,
        Method::Wmne,
        Method::Loreta,
        Method::CarssFocuss,
        Method::CarssSloreta,
    ];

    /// The four methods compared in the tables.
    pub const COMPARED: [Method; 4] = [
        Method::Focuss,
        Method::Sloreta,
        Method::CarssFocuss,
        Method::CarssSloreta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Focuss => "focuss",
            Method::Sloreta => "sloreta",
            Method::Mne => "mne",
            Method::Wmne => "wmne",
            Method::Loreta => "loreta",
            Method::CarssFocuss => "carss-focuss",
            Method::CarssSloreta => "carss-sloreta",
        }
    }

    pub fn is_carss(self) -> bool {
        matches!(self, Method::CarssFocuss | Method::CarssSloreta)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regularized-min-norm" => return Ok(Method::Sloreta),
            "c-focuss" => return Ok(Method::CarssFocuss),
            "c-sloreta" => return Ok(Method::CarssSloreta),
            _ => {}
        }
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Initial estimate for unreduced FOCUSS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocussInit {
    #[default]
    Ones,
    /// The weighted minimum-norm solution.
    Wmne,
}

/// Solver parameters shared by all methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub focuss: FocussConfig,
    pub focuss_init: FocussInit,
    /// Fixed regularization; `None` cross-validates.
    pub alpha: Option<f64>,
    /// Explicit cross-validation candidates; `None` uses the default grid.
    pub alpha_candidates: Option<Vec<f64>>,
    /// Reduction settings for noiseless data.
    pub carss: CarssConfig,
    /// Reduction settings for noisy data.
    pub carss_noisy: CarssConfig,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            focuss: FocussConfig::default(),
            focuss_init: FocussInit::Ones,
            alpha: None,
            alpha_candidates: None,
            carss: CarssConfig::default(),
            carss_noisy: CarssConfig::noisy(),
        }
    }
}

impl SolverSettings {
    /// Noiseless settings without an SNR; otherwise the noisy settings with
    /// the residual tolerance matched to the noise level.
    pub fn carss_for(&self, snr_db: Option<f64>) -> CarssConfig {
        match snr_db {
            None => self.carss,
            Some(snr) => self.carss_noisy.with_residual_tol(noise_level(snr)),
        }
    }
}

/// Head, montage, grid, lead field and the reduction tables built from them.
#[derive(Debug, Clone)]
pub struct Setup {
    pub head: HeadModel,
    pub electrodes: ElectrodeArray,
    pub grid: SourceGrid,
    pub lead_field: LeadField,
    pub stage0: Stage0,
}

impl Setup {
    pub fn new(
        head: HeadModel,
        electrodes: ElectrodeArray,
        grid: SourceGrid,
        lead_field: LeadField,
        mu: Option<f64>,
    ) -> Result<Self> {
        if lead_field.channels() != electrodes.len() || lead_field.columns() != grid.component_count()
        {
            return Err(Error::Contract(format!(
                "lead field is {}x{} but geometry needs {}x{}",
                lead_field.channels(),
                lead_field.columns(),
                electrodes.len(),
                grid.component_count()
            )));
        }
        let stage0 = Stage0::new(lead_field.matrix(), &electrodes, &grid, mu)?;
        Ok(Self {
            head,
            electrodes,
            grid,
            lead_field,
            stage0,
        })
    }

    /// Builds the lead field from scratch.
    pub fn build(
        head: HeadModel,
        electrodes: ElectrodeArray,
        grid_spec: GridSpec,
        mu: Option<f64>,
    ) -> Result<Self> {
        let grid = build_grid(grid_spec)?;
        let k = lead_field(&head, &electrodes, &grid)?;
        Self::new(head, electrodes, grid, k, mu)
    }

    /// Default head, 256 quasi-uniform scalp electrodes and the default grid.
    pub fn default_layout() -> Result<Self> {
        let head = HeadModel::default();
        let electrodes = ElectrodeArray::fibonacci(DEFAULT_ELECTRODES, head.scalp_radius())?;
        Self::build(head, electrodes, GridSpec::default(), None)
    }
}

/// A solver run: the estimate and, for two-stage methods, the size of the
/// reduced solution space.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub estimate: SourceEstimate,
    pub prior: Option<crate::carss::CertaintyPrior>,
}

/// Runs one method on a measurement. `snr_db` selects the reduction settings.
pub fn run_method(
    method: Method,
    phi: &DVector<f64>,
    setup: &Setup,
    settings: &SolverSettings,
    snr_db: Option<f64>,
) -> Result<MethodRun> {
    let k = setup.lead_field.matrix();
    let alpha_choice = || match settings.alpha {
        Some(a) => AlphaChoice::Fixed(a),
        None => AlphaChoice::CrossValidated,
    };
    let plain = |estimate: SourceEstimate| MethodRun {
        estimate,
        prior: None,
    };
    let labelled = |mut e: SourceEstimate| {
        e.solver = method.name().to_string();
        e
    };
    match method {
        Method::Focuss => {
            let j0 = match settings.focuss_init {
                FocussInit::Ones => DVector::from_element(k.ncols(), 1.0),
                FocussInit::Wmne => weighted_min_norm(phi, k, &WeightSpec::ColumnNormSquared)?.j,
            };
            Ok(plain(focuss(phi, k, &j0, &settings.focuss)?))
        }
        Method::Sloreta => {
            let rmn = RegularizedMinNorm::new(k);
            let alpha = match settings.alpha {
                Some(a) => a,
                None => match &settings.alpha_candidates {
                    Some(c) => rmn.select_alpha(phi, c)?,
                    None => rmn.select_alpha(phi, &rmn.default_candidates())?,
                },
            };
            Ok(plain(rmn.solve(phi, alpha)?))
        }
        Method::Mne => Ok(plain(weighted_min_norm(phi, k, &WeightSpec::Identity)?)),
        Method::Wmne => Ok(plain(weighted_min_norm(phi, k, &WeightSpec::ColumnNormSquared)?)),
        Method::Loreta => {
            let w = loreta_weight(k, &setup.grid)?;
            Ok(plain(labelled(weighted_min_norm(phi, k, &w)?)))
        }
        Method::CarssFocuss | Method::CarssSloreta => {
            let solver = if method == Method::CarssFocuss {
                Stage2Solver::Focuss(settings.focuss)
            } else {
                Stage2Solver::RegularizedMinNorm(alpha_choice())
            };
            let r = carss_localize(phi, k, &setup.stage0, &settings.carss_for(snr_db), &solver)?;
            Ok(MethodRun {
                estimate: r.estimate,
                prior: Some(r.prior),
            })
        }
    }
}

/// Everything needed to reproduce and read a comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonBundle {
    pub testcase: TestCase,
    pub truth_points: Vec<usize>,
    pub snap_mm: Vec<f64>,
    pub head: HeadModel,
    pub grid: GridSpec,
    pub grid_points: usize,
    pub electrodes: usize,
    pub mu_mm: f64,
    pub settings: SolverSettings,
    pub report: EvalReport,
}

/// Simulates the test case, runs each method and scores it against the
/// truth. A failing method is recorded in the report and the run goes on.
pub fn run_comparison(
    tc: &TestCase,
    setup: &Setup,
    methods: &[Method],
    settings: &SolverSettings,
) -> Result<ComparisonBundle> {
    let snapped = tc.snap(&setup.grid)?;
    let truth = &snapped.truth;
    let j_true = truth.current(setup.grid.len());
    let phi = synthesize(&setup.lead_field, &j_true, tc.snr_db, Some(tc.seed))?.0;
    let evaluator = Evaluator::new(&setup.grid)?;

    let reports: Vec<MethodReport> = methods
        .par_iter()
        .map(|&m| {
            let scored = run_method(m, &phi, setup, settings, tc.snr_db).and_then(|run| {
                evaluator.evaluate(m.name(), truth, &run.estimate, run.prior.as_ref().map(|p| p.len()))
            });
            scored.unwrap_or_else(|e| MethodReport::failed(m.name(), truth, e.to_string()))
        })
        .collect();

    Ok(ComparisonBundle {
        testcase: tc.clone(),
        truth_points: truth.sources().iter().map(|s| s.point).collect(),
        snap_mm: snapped.snap_mm,
        head: setup.head,
        grid: setup.grid.spec(),
        grid_points: setup.grid.len(),
        electrodes: setup.electrodes.len(),
        mu_mm: setup.stage0.mu,
        settings: settings.clone(),
        report: EvalReport { methods: reports },
    })
}
