use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use carss::carss::{Granularity, SimilarityMode};
use carss::forward::HeadModel;
use carss::geometry::GridSpec;
use carss::simharness::{SolverSettings, DEFAULT_ELECTRODES};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Everything a command needs besides its own inputs. Loaded from
/// `--config`, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub head: HeadModel,
    pub grid: GridSpec,
    /// Electrode CSV; `None` uses a quasi-uniform layout of
    /// `electrode_count` points.
    pub electrodes: Option<PathBuf>,
    pub electrode_count: usize,
    /// Geodesic hat radius, mm; `None` derives it from the layout.
    pub mu: Option<f64>,
    pub solver: SolverSettings,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            head: HeadModel::default(),
            grid: GridSpec::default(),
            electrodes: None,
            electrode_count: DEFAULT_ELECTRODES,
            mu: None,
            solver: SolverSettings::default(),
            out: PathBuf::from("carss-out"),
            seed: None,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid spacing, mm.
    #[arg(long, global = true)]
    pub spacing: Option<f64>,
    /// Electrode CSV (`label,x_mm,y_mm,z_mm`).
    #[arg(long, global = true)]
    pub electrodes: Option<PathBuf>,
    /// Hat radius, mm.
    #[arg(long, global = true)]
    pub mu: Option<f64>,
    /// Fixed regularization instead of cross-validation.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Cross-validation candidates, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub focuss_max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub focuss_tol: Option<f64>,
    /// Similarity index, `exp` or `l2`.
    #[arg(long, global = true)]
    pub carss_mode: Option<SimilarityMode>,
    #[arg(long, global = true)]
    pub carss_b: Option<f64>,
    #[arg(long, global = true)]
    pub keep_frac: Option<f64>,
    #[arg(long, global = true)]
    pub dilation: Option<usize>,
    #[arg(long, global = true)]
    pub floor_frac: Option<f64>,
    /// `point` or `column`.
    #[arg(long, global = true)]
    pub granularity: Option<Granularity>,
}

impl RunConfig {
    pub fn load(args: &CommonArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(args);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, a: &CommonArgs) {
        if let Some(v) = &a.out {
            self.out = v.clone();
        }
        if a.seed.is_some() {
            self.seed = a.seed;
        }
        if let Some(v) = a.spacing {
            self.grid.spacing = v;
        }
        if let Some(v) = &a.electrodes {
            self.electrodes = Some(v.clone());
        }
        if a.mu.is_some() {
            self.mu = a.mu;
        }
        if a.alpha.is_some() {
            self.solver.alpha = a.alpha;
        }
        if let Some(v) = &a.alpha_grid {
            self.solver.alpha_candidates = Some(v.clone());
        }
        if let Some(v) = a.focuss_max_iter {
            self.solver.focuss.max_iter = v;
        }
        if let Some(v) = a.focuss_tol {
            self.solver.focuss.tol = v;
        }
        // Reduction flags apply to both the noiseless and the noisy preset.
        for c in [&mut self.solver.carss, &mut self.solver.carss_noisy] {
            if let Some(v) = a.carss_mode {
                c.mode = v;
            }
            if let Some(v) = a.carss_b {
                c.b = v;
            }
            if let Some(v) = a.keep_frac {
                c.keep_frac = v;
            }
            if let Some(v) = a.dilation {
                c.dilation = v;
            }
            if let Some(v) = a.floor_frac {
                c.floor_frac = v;
            }
            if let Some(v) = a.granularity {
                c.granularity = v;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        let g = &self.grid;
        if !(g.spacing > 0.0 && g.spacing.is_finite()) {
            bail!("grid spacing must be positive, got {}", g.spacing);
        }
        if !(g.radius > 0.0 && g.radius <= self.head.brain_radius()) {
            bail!(
                "grid radius {} must be positive and inside the brain sphere ({} mm)",
                g.radius,
                self.head.brain_radius()
            );
        }
        if let Some(p) = &self.electrodes {
            if !p.is_file() {
                bail!("electrode file {} does not exist", p.display());
            }
        } else if self.electrode_count < carss::geometry::MIN_CHANNELS {
            bail!(
                "need at least {} electrodes, got {}",
                carss::geometry::MIN_CHANNELS,
                self.electrode_count
            );
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0) {
                bail!("mu must be positive, got {mu}");
            }
        }
        if let Some(a) = self.solver.alpha {
            if !(a > 0.0) {
                bail!("alpha must be positive, got {a}");
            }
        }
        if let Some(c) = &self.solver.alpha_candidates {
            if c.is_empty() || c.iter().any(|&a| !(a > 0.0)) {
                bail!("alpha candidates must be positive and non-empty");
            }
        }
        if self.solver.focuss.max_iter == 0 || !(self.solver.focuss.tol > 0.0) {
            bail!("FOCUSS needs max_iter >= 1 and tol > 0");
        }
        self.solver.carss.validate()?;
        self.solver.carss_noisy.validate()?;
        Ok(())
    }
}

/// Checks that an input path exists, as a usage error.
pub fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(anyhow!("{what} {} does not exist", p.display()).context(Usage));
    }
    Ok(())
}
