//! Localization error, source energy error and blurring index of an
//! estimate against known sources.

use std::io::Write;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{grid_neighbors, NeighborMap, SourceGrid};
use crate::solvers::SourceEstimate;

/// Relative tolerance when comparing powers for local maxima.
pub const PEAK_TOLERANCE: f64 = 1e-9;

/// Local maxima below this fraction of the largest power are not detections.
pub const CANDIDATE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSource {
    pub label: String,
    pub point: usize,
    pub moment: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    sources: Vec<TrueSource>,
}

impl GroundTruth {
    pub fn new(sources: Vec<TrueSource>, grid_points: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Contract("ground truth needs at least one source".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &sources {
            if s.point >= grid_points {
                return Err(Error::Contract(format!(
                    "source {} at grid point {} but grid has {grid_points} points",
                    s.label, s.point
                )));
            }
            if !seen.insert(s.point) {
                return Err(Error::Contract(format!("two sources at grid point {}", s.point)));
            }
        }
        Ok(Self { sources })
    }

    pub fn sources(&self) -> &[TrueSource] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// The true current density vector over `grid_points` points.
    pub fn current(&self, grid_points: usize) -> DVector<f64> {
        let mut j = DVector::zeros(3 * grid_points);
        for s in &self.sources {
            for c in 0..3 {
                j[3 * s.point + c] = s.moment[c];
            }
        }
        j
    }

    fn power(&self, grid_points: usize) -> Vec<f64> {
        let mut p = vec![0.0; grid_points];
        for s in &self.sources {
            p[s.point] = s.moment.norm_squared();
        }
        p
    }
}

/// Assignment of true sources to detected local maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// Matched grid point per true source, in truth order.
    pub assigned: Vec<Option<usize>>,
    /// All detection candidates, ascending grid index.
    pub candidates: Vec<usize>,
}

impl Matching {
    pub fn false_positives(&self) -> usize {
        let used = self.assigned.iter().flatten().count();
        self.candidates.len() - used
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub label: String,
    pub matched_point: Option<usize>,
    pub localization_mm: Option<f64>,
    pub energy: Option<f64>,
    pub nbi_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub scores: Vec<SourceScore>,
    pub false_positives: usize,
    pub residual: Option<f64>,
    pub alpha: Option<f64>,
    pub iterations: Option<usize>,
    /// Reduced solution-space size for two-stage methods.
    pub prior_size: Option<usize>,
    /// Set when the method failed; scores are then all unmatched.
    pub error: Option<String>,
}

impl MethodReport {
    pub fn failed(method: &str, truth: &GroundTruth, error: String) -> Self {
        Self {
            method: method.to_string(),
            scores: truth.sources.iter().map(|s| unmatched(&s.label)).collect(),
            false_positives: 0,
            residual: None,
            alpha: None,
            iterations: None,
            prior_size: None,
            error: Some(error),
        }
    }
}

fn unmatched(label: &str) -> SourceScore {
    SourceScore {
        label: label.to_string(),
        matched_point: None,
        localization_mm: None,
        energy: Some(1.0),
        nbi_mm: None,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
}

fn fmt_opt(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |x| x.to_string())
}

impl EvalReport {
    /// One row per (method, source):
    /// `method,source_label,E_l_mm,E_e,NBI_mm,matched`.
    /// Unmatched localization is written `X`, undefined NBI `-`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["method", "source_label", "E_l_mm", "E_e", "NBI_mm", "matched"])
            .map_err(io)?;
        for m in &self.methods {
            for s in &m.scores {
                w.write_record([
                    m.method.clone(),
                    s.label.clone(),
                    fmt_opt(s.localization_mm, "X"),
                    fmt_opt(s.energy, "-"),
                    fmt_opt(s.nbi_mm, "-"),
                    s.matched_point.is_some().to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Scores estimates on one grid.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    grid: &'a SourceGrid,
    nbr: NeighborMap,
}

impl<'a> Evaluator<'a> {
    pub fn new(grid: &'a SourceGrid) -> Result<Self> {
        Ok(Self {
            grid,
            nbr: grid_neighbors(grid, 1)?,
        })
    }

    pub fn grid(&self) -> &SourceGrid {
        self.grid
    }

    fn check_power(&self, power: &[f64]) -> Result<()> {
        if power.len() != self.grid.len() {
            return Err(Error::Dimension {
                what: "per-point power vs grid points",
                expected: self.grid.len(),
                actual: power.len(),
            });
        }
        Ok(())
    }

    /// Local maxima of the power over the 26-neighborhood.
    pub fn candidates(&self, power: &[f64]) -> Vec<usize> {
        let max = power.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) {
            return Vec::new();
        }
        (0..power.len())
            .filter(|&i| {
                let p = power[i];
                p > 0.0
                    && p >= CANDIDATE_FLOOR * max
                    && self
                        .nbr
                        .neighbors(i)
                        .iter()
                        .all(|&n| p >= power[n] * (1.0 - PEAK_TOLERANCE))
            })
            .collect()
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        (self.grid.point(a) - self.grid.point(b)).norm()
    }

    /// Each true source in order takes the nearest unmatched candidate; ties
    /// go to the lower grid index.
    pub fn match_sources(&self, truth: &GroundTruth, power: &[f64]) -> Result<Matching> {
        self.check_power(power)?;
        let candidates = self.candidates(power);
        let mut free = vec![true; candidates.len()];
        let mut assigned = Vec::with_capacity(truth.len());
        for s in truth.sources() {
            let mut best: Option<(usize, f64)> = None;
            for (slot, &c) in candidates.iter().enumerate() {
                if !free[slot] {
                    continue;
                }
                let d = self.distance(s.point, c);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((slot, d));
                }
            }
            assigned.push(best.map(|(slot, _)| {
                free[slot] = false;
                candidates[slot]
            }));
        }
        Ok(Matching { assigned, candidates })
    }

    /// Distance in mm between a true point and its matched point.
    pub fn localization_error(&self, true_point: usize, matched: usize) -> f64 {
        self.distance(true_point, matched)
    }

    fn power_near(&self, center: usize, power: &[f64]) -> f64 {
        power[center]
            + self
                .nbr
                .neighbors(center)
                .iter()
                .map(|&n| power[n])
                .sum::<f64>()
    }

    /// `|E_true - E_est| / E_true`, each the power within one grid step of
    /// the true and the matched point respectively, capped at 1.
    pub fn energy_error(
        &self,
        truth: &GroundTruth,
        source: usize,
        matched: usize,
        power: &[f64],
    ) -> Result<f64> {
        self.check_power(power)?;
        let true_power = truth.power(self.grid.len());
        let e_true = self.power_near(truth.sources[source].point, &true_power);
        let e_est = self.power_near(matched, power);
        Ok(((e_true - e_est).abs() / e_true).min(1.0))
    }

    /// Power-weighted mean distance to `matched[which]` over the points
    /// nearer to it than to any other matched point (ties go to the earlier
    /// source). `None` when that region carries no power.
    pub fn nbi(&self, matched: &[Option<usize>], which: usize, power: &[f64]) -> Result<Option<f64>> {
        self.check_power(power)?;
        let Some(center) = matched.get(which).copied().flatten() else {
            return Ok(None);
        };
        let others: Vec<(usize, usize)> = matched
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|p| (i, p)))
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (m, &p) in power.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let d = self.distance(m, center);
            let owned = others.iter().all(|&(i, q)| {
                let dq = self.distance(m, q);
                i == which || d < dq || (d == dq && which < i)
            });
            if owned {
                num += p * d;
                den += p;
            }
        }
        Ok(if den > 0.0 { Some(num / den) } else { None })
    }

    pub fn score(&self, truth: &GroundTruth, power: &[f64]) -> Result<(Vec<SourceScore>, usize)> {
        let matching = self.match_sources(truth, power)?;
        let mut scores = Vec::with_capacity(truth.len());
        for (i, s) in truth.sources().iter().enumerate() {
            let score = match matching.assigned[i] {
                None => unmatched(&s.label),
                Some(m) => SourceScore {
                    label: s.label.clone(),
                    matched_point: Some(m),
                    localization_mm: Some(self.localization_error(s.point, m)),
                    energy: Some(self.energy_error(truth, i, m, power)?),
                    nbi_mm: self.nbi(&matching.assigned, i, power)?,
                },
            };
            scores.push(score);
        }
        Ok((scores, matching.false_positives()))
    }

    pub fn evaluate(
        &self,
        method: &str,
        truth: &GroundTruth,
        estimate: &SourceEstimate,
        prior_size: Option<usize>,
    ) -> Result<MethodReport> {
        if estimate.j.len() != 3 * self.grid.len() {
            return Err(Error::Dimension {
                what: "estimate length vs 3 x grid points",
                expected: 3 * self.grid.len(),
                actual: estimate.j.len(),
            });
        }
        let (scores, false_positives) = self.score(truth, &estimate.point_power())?;
        Ok(MethodReport {
            method: method.to_string(),
            scores,
            false_positives,
            residual: Some(estimate.residual),
            alpha: estimate.alpha,
            iterations: Some(estimate.iterations),
            prior_size,
            error: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, GridSpec};
    use approx::assert_relative_eq;

    fn grid() -> SourceGrid {
        build_grid(GridSpec::default()).unwrap()
    }

    fn lattice_point(g: &SourceGrid, l: [i32; 3]) -> usize {
        (0..g.len()).find(|&i| g.lattice_index(i) == l).unwrap()
    }

    fn truth(g: &SourceGrid, points: &[usize]) -> GroundTruth {
        GroundTruth::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &p)| TrueSource {
                    label: format!("S{i}"),
                    point: p,
                    moment: Vector3::new(1.1, 1.2, 1.3),
                })
                .collect(),
            g.len(),
        )
        .unwrap()
    }

    fn estimate_of(t: &GroundTruth, g: &SourceGrid, scale: f64) -> SourceEstimate {
        let j = t.current(g.len()) * scale;
        SourceEstimate {
            j,
            solver: "test".into(),
            alpha: None,
            iterations: 0,
            residual: 0.0,
        }
    }

    #[test]
    fn exact_estimate_scores_zero() {
        let g = grid();
        let a = lattice_point(&g, [0, 0, 0]);
        let b = lattice_point(&g, [0, 0, 1]);
        let c = lattice_point(&g, [4, 2, 1]);
        let t = truth(&g, &[a, b, c]);
        let ev = Evaluator::new(&g).unwrap();
        let r = ev.evaluate("x", &t, &estimate_of(&t, &g, 1.0), None).unwrap();
        for s in &r.scores {
            assert_eq!(s.localization_mm, Some(0.0));
            assert!(s.energy.unwrap() < 1e-12);
            assert_eq!(s.nbi_mm, Some(0.0));
        }
        assert_eq!(r.false_positives, 0);
    }

    #[test]
    fn missing_source_is_unmatched() {
        let g = grid();
        let a = lattice_point(&g, [0, 0, 0]);
        let b = lattice_point(&g, [3, 0, 0]);
        let t = truth(&g, &[a, b]);
        let only_a = truth(&g, &[a]);
        let ev = Evaluator::new(&g).unwrap();
        let r = ev.evaluate("x", &t, &estimate_of(&only_a, &g, 1.0), None).unwrap();
        assert_eq!(r.scores[0].matched_point, Some(a));
        assert_eq!(r.scores[1].matched_point, None);
        assert_eq!(r.scores[1].energy, Some(1.0));
        assert_eq!(r.scores[1].nbi_mm, None);
    }

    #[test]
    fn zero_estimate_matches_nothing() {
        let g = grid();
        let t = truth(&g, &[lattice_point(&g, [0, 0, 0])]);
        let ev = Evaluator::new(&g).unwrap();
        let r = ev.evaluate("x", &t, &estimate_of(&t, &g, 0.0), None).unwrap();
        assert_eq!(r.scores[0].matched_point, None);
    }

    #[test]
    fn equidistant_tie_goes_to_lower_index() {
        let g = grid();
        let center = lattice_point(&g, [0, 0, 0]);
        let lo = lattice_point(&g, [-2, 0, 0]);
        let hi = lattice_point(&g, [2, 0, 0]);
        let t = truth(&g, &[center]);
        let mut power = vec![0.0; g.len()];
        power[lo] = 1.0;
        power[hi] = 1.0;
        let ev = Evaluator::new(&g).unwrap();
        let m = ev.match_sources(&t, &power).unwrap();
        assert_eq!(m.assigned, vec![Some(lo.min(hi))]);
        assert_eq!(m.false_positives(), 1);
    }

    #[test]
    fn one_step_off_is_one_spacing() {
        let g = grid();
        let a = lattice_point(&g, [0, 0, 0]);
        let b = lattice_point(&g, [1, 0, 0]);
        let ev = Evaluator::new(&g).unwrap();
        assert_relative_eq!(ev.localization_error(a, b), g.spacing(), epsilon = 1e-9);
        let c = lattice_point(&g, [1, 2, -2]);
        assert_relative_eq!(ev.localization_error(a, c), 3.0 * g.spacing(), epsilon = 1e-9);
    }

    #[test]
    fn half_amplitude_loses_three_quarters_of_energy() {
        let g = grid();
        let a = lattice_point(&g, [2, 1, 0]);
        let t = truth(&g, &[a]);
        let ev = Evaluator::new(&g).unwrap();
        let power = estimate_of(&t, &g, 0.5).point_power();
        assert_relative_eq!(ev.energy_error(&t, 0, a, &power).unwrap(), 0.75, epsilon = 1e-12);
        let zero = vec![0.0; g.len()];
        assert_eq!(ev.energy_error(&t, 0, a, &zero).unwrap(), 1.0);
        let mut big = zero.clone();
        big[a] = 100.0 * t.sources()[0].moment.norm_squared();
        assert_eq!(ev.energy_error(&t, 0, a, &big).unwrap(), 1.0);
    }

    #[test]
    fn nbi_of_face_cross() {
        let g = grid();
        let a = lattice_point(&g, [0, 0, 0]);
        let mut power = vec![0.0; g.len()];
        power[a] = 1.0;
        for d in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
            power[lattice_point(&g, d)] = 1.0;
        }
        let ev = Evaluator::new(&g).unwrap();
        let nbi = ev.nbi(&[Some(a)], 0, &power).unwrap().unwrap();
        assert_relative_eq!(nbi, 6.0 * g.spacing() / 7.0, epsilon = 1e-9);
        assert_relative_eq!(nbi, 9.6, epsilon = 0.01);
    }

    #[test]
    fn nbi_splits_power_between_sources() {
        let g = grid();
        let a = lattice_point(&g, [-3, 0, 0]);
        let b = lattice_point(&g, [3, 0, 0]);
        let mut power = vec![0.0; g.len()];
        power[a] = 1.0;
        power[b] = 1.0;
        // Equidistant point goes to the first source.
        power[lattice_point(&g, [0, 0, 0])] = 2.0;
        let ev = Evaluator::new(&g).unwrap();
        let m = [Some(a), Some(b)];
        assert_relative_eq!(ev.nbi(&m, 0, &power).unwrap().unwrap(), 2.0 * g.spacing(), epsilon = 1e-9);
        assert_eq!(ev.nbi(&m, 1, &power).unwrap(), Some(0.0));
    }

    #[test]
    fn scale_invariance_of_location_and_spread() {
        let g = grid();
        let a = lattice_point(&g, [1, 1, 1]);
        let t = truth(&g, &[a]);
        let mut power: Vec<f64> = (0..g.len())
            .map(|i| 1.0 / (1.0 + ev_dist(&g, i, a)))
            .collect();
        power[a] *= 3.0;
        let ev = Evaluator::new(&g).unwrap();
        let (s1, _) = ev.score(&t, &power).unwrap();
        let scaled: Vec<f64> = power.iter().map(|p| p * 1e6).collect();
        let (s2, _) = ev.score(&t, &scaled).unwrap();
        assert_eq!(s1[0].localization_mm, s2[0].localization_mm);
        assert_relative_eq!(s1[0].nbi_mm.unwrap(), s2[0].nbi_mm.unwrap(), max_relative = 1e-12);
    }

    fn ev_dist(g: &SourceGrid, i: usize, j: usize) -> f64 {
        (g.point(i) - g.point(j)).norm()
    }

    #[test]
    fn truth_validation() {
        let g = grid();
        assert!(GroundTruth::new(vec![], g.len()).is_err());
        let bad = TrueSource {
            label: "a".into(),
            point: g.len(),
            moment: Vector3::zeros(),
        };
        assert!(GroundTruth::new(vec![bad], g.len()).is_err());
    }

    #[test]
    fn csv_markers() {
        let g = grid();
        let t = truth(&g, &[lattice_point(&g, [0, 0, 0])]);
        let report = EvalReport {
            methods: vec![MethodReport::failed("focuss", &t, "boom".into())],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "method,source_label,E_l_mm,E_e,NBI_mm,matched\nfocuss,S0,X,1,-,false\n"
        );
    }
}
