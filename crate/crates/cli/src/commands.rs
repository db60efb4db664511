use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use carss::forward::lead_field;
use carss::geometry::{auto_mu, build_grid, electrode_neighbors, ElectrodeArray, NeighborKind, NeighborMap};
use carss::io::{self, CacheLookup, EstimateFile, LeadFieldKey, TimeSeries};
use carss::metrics::{EvalReport, Evaluator, GroundTruth};
use carss::preprocess;
use carss::simharness::{run_comparison, run_method, test_case_1, test_case_2, Method, Setup, TestCase};
use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{require_file, RunConfig};
use crate::manifest::{sha256_bytes, Manifest, OutputLock};
use crate::Usage;

pub const CACHE_ENV: &str = "CARSS_CACHE_DIR";

fn cache_dir(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out.join("cache"))
}

fn electrodes(cfg: &RunConfig) -> Result<ElectrodeArray> {
    Ok(match &cfg.electrodes {
        Some(p) => io::read_electrodes_csv(p, cfg.head.scalp_radius())?,
        None => ElectrodeArray::fibonacci(cfg.electrode_count, cfg.head.scalp_radius())?,
    })
}

/// Loads the lead field from the cache or builds and caches it. Returns the
/// setup and whether the cache was hit.
fn setup(cfg: &RunConfig) -> Result<(Setup, PathBuf, bool)> {
    let el = electrodes(cfg)?;
    let grid = build_grid(cfg.grid)?;
    let key = LeadFieldKey::new(&cfg.head, &grid, &el);
    let digest = sha256_bytes(&serde_json::to_vec(&key)?);
    let path = cache_dir(cfg).join(format!("leadfield-{}.bin", &digest[..16]));
    let (lf, hit) = match io::read_lead_field(&path, &key)? {
        CacheLookup::Hit(lf) => {
            info!("cache hit: {}", path.display());
            (lf, true)
        }
        lookup => {
            if let CacheLookup::Stale(why) = lookup {
                info!("cache at {} unusable ({why}), rebuilding", path.display());
            } else {
                info!("cache miss, building lead field");
            }
            let lf = lead_field(&cfg.head, &el, &grid)?;
            io::write_lead_field(&path, &key, &lf)?;
            info!("lead field {}x{} written to {}", lf.channels(), lf.columns(), path.display());
            (lf, false)
        }
    };
    let s = Setup::new(cfg.head, el, grid, lf, cfg.mu)?;
    Ok((s, path, hit))
}

fn manifest_with_montage(command: &str, args: &impl Serialize, cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new(command, serde_json::to_value(args)?, cfg);
    if let Some(p) = &cfg.electrodes {
        m.input("electrodes", p)?;
    }
    Ok(m)
}

pub fn forward(cfg: &RunConfig) -> Result<()> {
    let _lock = OutputLock::acquire(&cfg.out)?;
    let (s, path, _) = setup(cfg)?;
    let mut m = manifest_with_montage("forward", &serde_json::Value::Null, cfg)?;
    let el_path = cfg.out.join("electrodes.csv");
    let grid_path = cfg.out.join("grid.csv");
    io::write_electrodes_csv(&el_path, &s.electrodes)?;
    io::write_grid_csv(&grid_path, &s.grid)?;
    m.output(&el_path);
    m.output(&grid_path);
    m.inputs.insert("lead_field".into(), crate::manifest::sha256_file(&path)?);
    m.write(&cfg.out)?;
    println!(
        "lead field {} channels x {} columns ({} grid points) at {}",
        s.lead_field.channels(),
        s.lead_field.columns(),
        s.grid.len(),
        path.display()
    );
    Ok(())
}

fn load_testcase(spec: &str) -> Result<TestCase> {
    match spec {
        "1" | "test-case-1" => Ok(test_case_1()),
        "2" | "test-case-2" => Ok(test_case_2()),
        path => {
            let p = Path::new(path);
            require_file(p, "test case")?;
            Ok(io::read_json(p)?)
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CaseArgs {
    /// `1`, `2` or a test case JSON file.
    #[arg(long, default_value = "1")]
    pub testcase: String,
    /// Add white noise at this SNR, dB.
    #[arg(long)]
    pub snr: Option<f64>,
}

impl CaseArgs {
    /// The test case with flag and config overrides applied.
    fn resolve(&self, cfg: &RunConfig) -> Result<TestCase> {
        let mut tc = load_testcase(&self.testcase)?;
        if self.snr.is_some() {
            tc.snr_db = self.snr;
        }
        if let Some(seed) = cfg.seed {
            tc.seed = seed;
        }
        Ok(tc)
    }
}

/// Ground truth of a simulated measurement.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub testcase: TestCase,
    pub truth: GroundTruth,
    pub snap_mm: Vec<f64>,
}

pub fn simulate(cfg: &RunConfig, args: &CaseArgs) -> Result<()> {
    let tc = args.resolve(cfg)?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let (s, _, _) = setup(cfg)?;
    let snapped = tc.snap(&s.grid)?;
    let j = snapped.truth.current(s.grid.len());
    let phi = carss::forward::synthesize(&s.lead_field, &j, tc.snr_db, Some(tc.seed))?;

    let mut m = manifest_with_montage("simulate", args, cfg)?;
    m.seed = Some(tc.seed);
    let phi_path = cfg.out.join("measurement.csv");
    let truth_path = cfg.out.join("truth.json");
    io::write_measurement_csv(&phi_path, s.electrodes.labels(), phi.values())?;
    io::write_json(
        &truth_path,
        &TruthFile {
            testcase: tc.clone(),
            truth: snapped.truth,
            snap_mm: snapped.snap_mm,
        },
    )?;
    m.output(&phi_path);
    m.output(&truth_path);
    m.write(&cfg.out)?;
    println!("{}: {} sources, {} channels", tc.name, tc.sources.len(), phi.len());
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LocalizeArgs {
    /// Measurement CSV (`label,value`).
    #[arg(long)]
    pub measurement: PathBuf,
    #[arg(long, default_value = "carss-focuss")]
    pub method: Method,
    /// SNR of the measurement, dB. Selects the noisy reduction settings.
    #[arg(long)]
    pub snr: Option<f64>,
}

pub fn localize(cfg: &RunConfig, args: &LocalizeArgs) -> Result<()> {
    require_file(&args.measurement, "measurement")?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let (s, _, _) = setup(cfg)?;
    let phi = io::read_measurement_csv(&args.measurement, s.electrodes.labels())?;
    let run = run_method(args.method, &phi, &s, &cfg.solver, args.snr)?;

    let mut m = manifest_with_montage("localize", args, cfg)?;
    m.input("measurement", &args.measurement)?;
    let name = args.method.name();
    let est_path = cfg.out.join(format!("estimate-{name}.json"));
    io::write_json(&est_path, &EstimateFile::new(&run.estimate, run.prior.as_ref()))?;
    m.output(&est_path);
    if let Some(prior) = &run.prior {
        let prior_path = cfg.out.join(format!("prior-{name}.json"));
        io::write_json(&prior_path, prior)?;
        m.output(&prior_path);
    }
    let power_path = cfg.out.join(format!("power-{name}.csv"));
    io::write_power_csv(&power_path, &s.grid, &run.estimate.point_power(), run.prior.as_ref())?;
    m.output(&power_path);
    m.write(&cfg.out)?;
    println!(
        "{name}: residual {:.3e}{}{}",
        run.estimate.residual,
        run.estimate.alpha.map(|a| format!(", alpha {a:.3e}")).unwrap_or_default(),
        run.prior.as_ref().map(|p| format!(", {} columns kept", p.len())).unwrap_or_default()
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Truth JSON written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Estimate JSON files written by `localize`.
    #[arg(long, required = true, num_args = 1..)]
    pub estimate: Vec<PathBuf>,
}

pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    require_file(&args.truth, "truth file")?;
    for e in &args.estimate {
        require_file(e, "estimate")?;
    }
    let _lock = OutputLock::acquire(&cfg.out)?;
    let grid = build_grid(cfg.grid)?;
    let truth: TruthFile = io::read_json(&args.truth)?;
    let evaluator = Evaluator::new(&grid)?;
    let mut m = Manifest::new("evaluate", serde_json::to_value(args)?, cfg);
    m.input("truth", &args.truth)?;
    let mut report = EvalReport::default();
    for (i, path) in args.estimate.iter().enumerate() {
        m.input(&format!("estimate{i}"), path)?;
        let file: EstimateFile = io::read_json(path)?;
        report
            .methods
            .push(evaluator.evaluate(&file.solver, &truth.truth, &file.estimate()?, file.prior_size)?);
    }
    write_report(cfg, &report, &mut m)?;
    m.write(&cfg.out)?;
    print_report(&report);
    Ok(())
}

fn write_report(cfg: &RunConfig, report: &EvalReport, m: &mut Manifest) -> Result<()> {
    let csv_path = cfg.out.join("report.csv");
    let json_path = cfg.out.join("report.json");
    let f = std::fs::File::create(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))?;
    report.write_csv(std::io::BufWriter::new(f))?;
    io::write_json(&json_path, report)?;
    m.output(&csv_path);
    m.output(&json_path);
    Ok(())
}

fn print_report(report: &EvalReport) {
    for r in &report.methods {
        let cells: Vec<String> = r
            .scores
            .iter()
            .map(|s| match s.localization_mm {
                Some(d) => format!("{} {d:.1} mm", s.label),
                None => format!("{} X", s.label),
            })
            .collect();
        let size = r.prior_size.map(|n| format!(" [{n} columns]")).unwrap_or_default();
        match &r.error {
            Some(e) => println!("{}: failed: {e}", r.method),
            None => println!("{}:{size} {}", r.method, cells.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Methods to run, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = Method::COMPARED.to_vec())]
    pub methods: Vec<Method>,
}

pub fn compare(cfg: &RunConfig, args: &CompareArgs) -> Result<()> {
    let tc = args.case.resolve(cfg)?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let (s, _, _) = setup(cfg)?;
    let bundle = run_comparison(&tc, &s, &args.methods, &cfg.solver)?;
    let mut m = manifest_with_montage("compare", args, cfg)?;
    m.seed = Some(tc.seed);
    write_report(cfg, &bundle.report, &mut m)?;
    let bundle_path = cfg.out.join("comparison.json");
    io::write_json(&bundle_path, &bundle)?;
    m.output(&bundle_path);
    m.write(&cfg.out)?;
    print_report(&bundle.report);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PreprocessArgs {
    /// Time-series CSV (`time_s,<channel>...`).
    #[arg(long)]
    pub timeseries: PathBuf,
    /// Mixing matrix CSV, one row per channel.
    #[arg(long)]
    pub mixing: PathBuf,
    /// Unmixing matrix CSV, one row per component.
    #[arg(long)]
    pub unmixing: PathBuf,
    /// EOG channel labels, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub eog: Vec<String>,
    /// Components with EOG power ratio at or above this are removed.
    /// `inf` removes none.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: f64,
    /// Further components to remove, zero-based, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<usize>,
    /// Band edges, Hz.
    #[arg(long, default_value_t = 4.0)]
    pub low: f64,
    #[arg(long, default_value_t = 30.0)]
    pub high: f64,
    /// Moving-average window, samples (odd).
    #[arg(long, default_value_t = preprocess::DEFAULT_WINDOW)]
    pub window: usize,
    /// Average each channel with its scalp neighbors, using the configured
    /// montage and hat radius.
    #[arg(long)]
    pub spatial: bool,
}

#[derive(Debug, Serialize)]
struct PreprocessSummary {
    ratios: Vec<f64>,
    removed: Vec<usize>,
    rate_hz: f64,
}

/// Neighbors of the recorded channels within the configured montage.
fn channel_neighbors(cfg: &RunConfig, labels: &[String]) -> Result<NeighborMap> {
    let el = electrodes(cfg)?;
    let mu = match cfg.mu {
        Some(mu) => mu,
        None => auto_mu(&el)?,
    };
    let full = electrode_neighbors(&el, mu)?;
    let index: Vec<usize> = labels
        .iter()
        .map(|l| el.index_of(l).ok_or_else(|| anyhow!("channel {l:?} is not in the montage").context(Usage)))
        .collect::<Result<_>>()?;
    let sets = index
        .iter()
        .map(|&e| {
            full.neighbors(e)
                .iter()
                .filter_map(|n| index.iter().position(|i| i == n))
                .collect()
        })
        .collect();
    Ok(NeighborMap::from_sets(sets, NeighborKind::Geodesic { mu })?)
}

/// Remove components, band-pass, temporal smoothing, then spatial
/// smoothing.
pub fn preprocess(cfg: &RunConfig, args: &PreprocessArgs) -> Result<()> {
    for (p, what) in [
        (&args.timeseries, "time series"),
        (&args.mixing, "mixing matrix"),
        (&args.unmixing, "unmixing matrix"),
    ] {
        require_file(p, what)?;
    }
    if args.tau.is_nan() {
        return Err(anyhow!("tau must be a number").context(Usage));
    }
    let _lock = OutputLock::acquire(&cfg.out)?;
    let ts = io::read_time_series_csv(&args.timeseries)?;
    let mix = io::read_matrix_csv(&args.mixing)?;
    let unmix = io::read_matrix_csv(&args.unmixing)?;
    let eog: Vec<usize> = args
        .eog
        .iter()
        .map(|l| {
            ts.labels
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| anyhow!("EOG channel {l:?} not in the time series").context(Usage))
        })
        .collect::<Result<_>>()?;
    let rate = ts.rate()?;

    let removal = preprocess::remove_eog(&ts.data, &mix, &unmix, &eog, args.tau, &args.exclude)?;
    let mut data = preprocess::bandpass(&removal.cleaned, rate, args.low, args.high)?;
    data = preprocess::temporal_filter(&data, args.window)?;
    if args.spatial {
        data = preprocess::spatial_filter(&data, &channel_neighbors(cfg, &ts.labels)?)?;
    }

    let mut m = Manifest::new("preprocess", serde_json::to_value(args)?, cfg);
    m.input("timeseries", &args.timeseries)?;
    m.input("mixing", &args.mixing)?;
    m.input("unmixing", &args.unmixing)?;
    if args.spatial {
        if let Some(p) = &cfg.electrodes {
            m.input("electrodes", p)?;
        }
    }
    let out_path = cfg.out.join("cleaned.csv");
    let summary_path = cfg.out.join("preprocess.json");
    io::write_time_series_csv(
        &out_path,
        &TimeSeries {
            labels: ts.labels.clone(),
            times: ts.times.clone(),
            data,
        },
    )?;
    io::write_json(
        &summary_path,
        &PreprocessSummary {
            ratios: removal.ratios,
            removed: removal.removed.clone(),
            rate_hz: rate,
        },
    )?;
    m.output(&out_path);
    m.output(&summary_path);
    m.write(&cfg.out)?;
    println!(
        "{} channels x {} samples at {rate:.1} Hz, removed components {:?}",
        ts.labels.len(),
        ts.times.len(),
        removal.removed
    );
    Ok(())
}
