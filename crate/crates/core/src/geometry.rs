//! Electrode layouts, source lattices and the neighborhoods built on them.
//!
//! All positions are in millimetres. Electrodes live on the scalp sphere and
//! are related by geodesic (great-circle) distance; grid points live on a
//! regular cubic lattice inside the brain sphere and are related by
//! Chebyshev lattice distance.

use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Maximum radial deviation (mm) tolerated for a point said to lie on a sphere.
pub const SPHERE_TOLERANCE_MM: f64 = 0.5;

/// Smallest channel count accepted for localization work.
pub const MIN_CHANNELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeArray {
    labels: Vec<String>,
    positions: Vec<Point3>,
    radius: f64,
}

impl ElectrodeArray {
    /// Builds a layout after checking that every position lies on the sphere
    /// of `radius` and that labels are unique.
    pub fn new(labels: Vec<String>, positions: Vec<Point3>, radius: f64) -> Result<Self> {
        if labels.len() != positions.len() {
            return Err(Error::Dimension {
                what: "electrode labels vs positions",
                expected: positions.len(),
                actual: labels.len(),
            });
        }
        if positions.is_empty() {
            return Err(Error::Geometry("electrode layout is empty".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::Geometry(format!("invalid scalp radius {radius}")));
        }
        for (label, p) in labels.iter().zip(&positions) {
            let dev = (p.norm() - radius).abs();
            if !(dev <= SPHERE_TOLERANCE_MM) {
                return Err(Error::Geometry(format!(
                    "electrode {label} is {dev:.3} mm off the scalp sphere (radius {radius} mm)"
                )));
            }
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::Geometry(format!("duplicate electrode label {label}")));
            }
        }
        Ok(Self {
            labels,
            positions,
            radius,
        })
    }

    /// Quasi-uniform layout on the whole sphere (Fibonacci spiral), labelled
    /// `E1..En`.
    pub fn fibonacci(count: usize, radius: f64) -> Result<Self> {
        let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let positions = (0..count)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
                let rho = (1.0 - z * z).sqrt();
                let phi = golden_angle * i as f64;
                Point3::new(rho * phi.cos(), rho * phi.sin(), z) * radius
            })
            .collect();
        let labels = (1..=count).map(|i| format!("E{i}")).collect();
        Self::new(labels, positions, radius)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Great-circle distance between two points on the sphere of radius `radius`.
pub fn geodesic_distance(a: &Point3, b: &Point3, radius: f64) -> Result<f64> {
    for p in [a, b] {
        let dev = (p.norm() - radius).abs();
        if !(dev <= SPHERE_TOLERANCE_MM) {
            return Err(Error::Geometry(format!(
                "point ({:.2}, {:.2}, {:.2}) is {dev:.3} mm off the sphere of radius {radius}",
                p.x, p.y, p.z
            )));
        }
    }
    Ok(arc_length(a, b, radius))
}

fn arc_length(a: &Point3, b: &Point3, radius: f64) -> f64 {
    let cos = (a.dot(b) / (radius * radius)).clamp(-1.0, 1.0);
    radius * cos.acos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborKind {
    /// Geodesic ball of radius `mu` mm on the scalp.
    Geodesic { mu: f64 },
    /// Chebyshev lattice shell of `steps` grid steps.
    Lattice { steps: usize },
}

/// Symmetric, irreflexive neighbor relation. Each set is sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborMap {
    sets: Vec<Vec<usize>>,
    kind: NeighborKind,
}

impl NeighborMap {
    /// Wraps precomputed sets, sorting them. Fails if the relation is not
    /// symmetric or contains a self-loop.
    pub fn from_sets(mut sets: Vec<Vec<usize>>, kind: NeighborKind) -> Result<Self> {
        let n = sets.len();
        for (i, set) in sets.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.iter().any(|&j| j >= n) {
                return Err(Error::Contract(format!("neighbor of {i} out of range")));
            }
            if set.binary_search(&i).is_ok() {
                return Err(Error::Contract(format!("{i} is listed as its own neighbor")));
            }
        }
        let map = Self { sets, kind };
        if !map.is_symmetric() {
            return Err(Error::Contract("neighbor relation is not symmetric".into()));
        }
        Ok(map)
    }

    /// An empty relation over `n` keys.
    pub fn empty(n: usize, kind: NeighborKind) -> Self {
        Self {
            sets: vec![Vec::new(); n],
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn kind(&self) -> NeighborKind {
        self.kind
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.sets[i].binary_search(&j).is_ok()
    }

    pub fn is_symmetric(&self) -> bool {
        self.sets
            .iter()
            .enumerate()
            .all(|(i, set)| set.iter().all(|&j| self.contains(j, i)))
    }

    pub fn is_irreflexive(&self) -> bool {
        self.sets
            .iter()
            .enumerate()
            .all(|(i, set)| set.binary_search(&i).is_err())
    }
}

/// `nbr(i) = { j != i : geodesic(r_i, r_j) <= mu }`.
pub fn electrode_neighbors(electrodes: &ElectrodeArray, mu: f64) -> Result<NeighborMap> {
    if !(mu > 0.0) {
        return Err(Error::Contract(format!("neighborhood radius must be positive, got {mu}")));
    }
    let pos = electrodes.positions();
    let r = electrodes.radius();
    let n = pos.len();
    let mut sets = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if arc_length(&pos[i], &pos[j], r) <= mu {
                sets[i].push(j);
                sets[j].push(i);
            }
        }
    }
    for set in &mut sets {
        set.sort_unstable();
    }
    Ok(NeighborMap {
        sets,
        kind: NeighborKind::Geodesic { mu },
    })
}

/// Multiplier on the median nearest-neighbor distance used by [`auto_mu`].
pub const AUTO_MU_FACTOR: f64 = 1.5;

/// Neighborhood radius that captures one ring of surrounding electrodes:
/// 1.5 times the median nearest-neighbor geodesic distance.
pub fn auto_mu(electrodes: &ElectrodeArray) -> Result<f64> {
    let pos = electrodes.positions();
    if pos.len() < 4 {
        return Err(Error::Contract(format!(
            "auto_mu needs at least 4 electrodes, got {}",
            pos.len()
        )));
    }
    let r = electrodes.radius();
    let mut nearest: Vec<f64> = (0..pos.len())
        .map(|i| {
            (0..pos.len())
                .filter(|&j| j != i)
                .map(|j| arc_length(&pos[i], &pos[j], r))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nearest.sort_by(f64::total_cmp);
    let m = nearest.len();
    let median = if m % 2 == 1 {
        nearest[m / 2]
    } else {
        0.5 * (nearest[m / 2 - 1] + nearest[m / 2])
    };
    Ok(AUTO_MU_FACTOR * median)
}

/// Parameters of the source lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Lattice pitch, mm.
    pub spacing: f64,
    /// Brain sphere radius, mm.
    pub radius: f64,
    /// Coordinate of one lattice plane on every axis, mm. Zero puts a point
    /// at the origin.
    pub offset: f64,
    /// Points are kept when `|r| < radius - margin`.
    pub margin: f64,
}

impl GridSpec {
    pub fn centered(spacing: f64, radius: f64) -> Self {
        Self {
            spacing,
            radius,
            offset: 0.0,
            margin: 0.0,
        }
    }
}

impl Default for GridSpec {
    /// 11.2 mm lattice in an 80 mm brain, with lattice planes at -1.91 mm so
    /// that the published test-case coordinates fall on grid points.
    fn default() -> Self {
        Self {
            spacing: 11.2,
            radius: 80.0,
            offset: -1.91,
            margin: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceGrid {
    points: Vec<Point3>,
    lattice: Vec<[i32; 3]>,
    spec: GridSpec,
}

impl SourceGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn lattice_index(&self, i: usize) -> [i32; 3] {
        self.lattice[i]
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    /// Three dipole components per point.
    pub fn component_count(&self) -> usize {
        3 * self.points.len()
    }

    /// Chebyshev distance in lattice steps.
    pub fn lattice_distance(&self, a: usize, b: usize) -> u32 {
        let (la, lb) = (self.lattice[a], self.lattice[b]);
        (0..3).map(|c| la[c].abs_diff(lb[c])).max().unwrap_or(0)
    }

    /// Nearest grid point to `p` and the distance to it. Ties go to the lower
    /// index.
    pub fn nearest(&self, p: &Point3) -> Option<(usize, f64)> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, q)| (i, (q - p).norm()))
            .fold(None, |best, cur| match best {
                Some((_, d)) if d <= cur.1 => best,
                _ => Some(cur),
            })
    }
}

/// Regular cubic lattice inside the brain sphere, ordered by (z, y, x).
pub fn build_grid(spec: GridSpec) -> Result<SourceGrid> {
    let GridSpec {
        spacing,
        radius,
        offset,
        margin,
    } = spec;
    if !(spacing > 0.0 && radius > 0.0) {
        return Err(Error::Contract(format!(
            "grid spacing and radius must be positive (got {spacing}, {radius})"
        )));
    }
    let limit = radius - margin;
    let lo = ((-radius - offset) / spacing).ceil() as i32;
    let hi = ((radius - offset) / spacing).floor() as i32;
    let coord = |k: i32| offset + k as f64 * spacing;
    let mut points = Vec::new();
    let mut lattice = Vec::new();
    for kz in lo..=hi {
        for ky in lo..=hi {
            for kx in lo..=hi {
                let p = Point3::new(coord(kx), coord(ky), coord(kz));
                if p.norm() < limit {
                    points.push(p);
                    lattice.push([kx, ky, kz]);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Geometry("source grid is empty".into()));
    }
    Ok(SourceGrid {
        points,
        lattice,
        spec,
    })
}

/// `nbr(i) = { j != i : chebyshev(i, j) <= steps }`.
pub fn grid_neighbors(grid: &SourceGrid, steps: usize) -> Result<NeighborMap> {
    if !(1..=2).contains(&steps) {
        return Err(Error::Contract(format!("grid dilation must be 1 or 2, got {steps}")));
    }
    let index: HashMap<[i32; 3], usize> = grid
        .lattice
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let k = steps as i32;
    let sets = grid
        .lattice
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut set = Vec::new();
            for dz in -k..=k {
                for dy in -k..=k {
                    for dx in -k..=k {
                        if let Some(&j) = index.get(&[l[0] + dx, l[1] + dy, l[2] + dz]) {
                            if j != i {
                                set.push(j);
                            }
                        }
                    }
                }
            }
            set.sort_unstable();
            set
        })
        .collect();
    Ok(NeighborMap {
        sets,
        kind: NeighborKind::Lattice { steps },
    })
}

/// Face-adjacent (6-cell) lattice neighbors, the support of the discrete
/// Laplacian.
pub fn face_neighbors(grid: &SourceGrid) -> NeighborMap {
    let index: HashMap<[i32; 3], usize> = grid
        .lattice
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let sets = grid
        .lattice
        .iter()
        .map(|l| {
            let mut set: Vec<usize> = [
                [1, 0, 0],
                [-1, 0, 0],
                [0, 1, 0],
                [0, -1, 0],
                [0, 0, 1],
                [0, 0, -1],
            ]
            .iter()
            .filter_map(|d| index.get(&[l[0] + d[0], l[1] + d[1], l[2] + d[2]]).copied())
            .collect();
            set.sort_unstable();
            set
        })
        .collect();
    NeighborMap {
        sets,
        kind: NeighborKind::Lattice { steps: 1 },
    }
}
