//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N PASS|FAIL: ...` line to stderr whether or not output is
//! captured.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use carss::carss::{carss_localize, Stage2Solver};
use carss::forward::{dipole_potential, synthesize, HeadModel, ThreeShell};
use carss::geometry::Point3;
use carss::metrics::{GroundTruth, TrueSource};
use carss::preprocess::{bandpass, eog_ratio, remove_eog, sinusoid};
use carss::simharness::{
    run_comparison, test_case_1, test_case_2, Method, Setup, SolverSettings, TestCase,
};
use carss::solvers::{focuss, weighted_min_norm, FocussConfig, WeightSpec};
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(n: u32, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} {verdict}: {detail}");
    assert!(pass, "criterion {n} failed: {detail}");
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| Setup::default_layout().unwrap())
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Noiseless comparison of unreduced FOCUSS and CARSS-FOCUSS.
fn noiseless(tc: &TestCase) -> (carss::metrics::MethodReport, carss::metrics::MethodReport) {
    let b = run_comparison(tc, setup(), &[Method::Focuss, Method::CarssFocuss], &SolverSettings::default())
        .unwrap();
    let get = |m: &str| b.report.method(m).unwrap().clone();
    (get("focuss"), get("carss-focuss"))
}

fn exact(r: &carss::metrics::MethodReport) -> bool {
    r.error.is_none()
        && r.scores
            .iter()
            .all(|s| s.localization_mm == Some(0.0) && s.energy.is_some_and(|e| e <= 1e-6))
}

fn summary(r: &carss::metrics::MethodReport) -> String {
    let cells: Vec<String> = r
        .scores
        .iter()
        .map(|s| match (s.localization_mm, s.energy) {
            (Some(d), Some(e)) => format!("{} {d:.1}mm/{e:.2e}", s.label),
            _ => format!("{} X", s.label),
        })
        .collect();
    cells.join(" ")
}

#[test]
fn criterion_1_test_case_one_noiseless() {
    let start = Instant::now();
    let _ = setup();
    let (_, c) = noiseless(&test_case_1());
    let elapsed = start.elapsed().as_secs_f64();
    let size = c.prior_size.unwrap_or(0);
    let pass = exact(&c) && (100..=500).contains(&size) && elapsed < 120.0;
    report(1, pass, format!("{} | prior {size} columns | {elapsed:.1}s", summary(&c)));
}

#[test]
fn criterion_2_test_case_two_noiseless() {
    let (f, c) = noiseless(&test_case_2());
    let step = setup().grid.spacing();
    let size = c.prior_size.unwrap_or(0);
    let focuss_misses = f
        .scores
        .iter()
        .any(|s| s.localization_mm.is_none_or(|d| d >= step - 1e-9));
    let pass = exact(&c) && focuss_misses && (400..=1600).contains(&size);
    report(
        2,
        pass,
        format!(
            "carss-focuss {} | prior {size} columns | focuss {} (miss: {focuss_misses})",
            summary(&c),
            summary(&f)
        ),
    )
}

/// Per-method aggregates over seeds.
#[derive(Default)]
struct Noisy {
    nbi: BTreeMap<String, Vec<f64>>,
    loc: Vec<f64>,
    sizes: Vec<usize>,
}

fn noisy_case(tc: &TestCase, snr: f64, seeds: u64) -> BTreeMap<&'static str, Noisy> {
    let methods = [Method::Sloreta, Method::CarssSloreta];
    let mut out: BTreeMap<&'static str, Noisy> = BTreeMap::new();
    for i in 0..seeds {
        let mut tc = tc.clone();
        tc.snr_db = Some(snr);
        tc.seed += i;
        let b = run_comparison(&tc, setup(), &methods, &SolverSettings::default()).unwrap();
        for m in methods {
            let r = b.report.method(m.name()).unwrap();
            let agg = out.entry(m.name()).or_default();
            for s in &r.scores {
                if let Some(d) = s.localization_mm {
                    agg.loc.push(d);
                }
                if let Some(n) = s.nbi_mm {
                    agg.nbi.entry(s.label.clone()).or_default().push(n);
                }
            }
            if let Some(n) = r.prior_size {
                agg.sizes.push(n);
            }
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_3_noisy_comparisons() {
    let step = setup().grid.spacing();
    let mut pass = true;
    let mut lines = Vec::new();
    for (tc, snr, band) in [(test_case_1(), 17.0, 200..=900), (test_case_2(), 13.0, 800..=2400)] {
        let agg = noisy_case(&tc, snr, 20);
        let (s, c) = (&agg["sloreta"], &agg["carss-sloreta"]);
        let mut nbi_ok = true;
        let mut nbi_cells = Vec::new();
        for (label, cv) in &c.nbi {
            if let Some(sv) = s.nbi.get(label) {
                let (a, b) = (mean(cv), mean(sv));
                nbi_ok &= a < b;
                nbi_cells.push(format!("{label} {a:.1}<{b:.1}"));
            }
        }
        nbi_ok &= !nbi_cells.is_empty();
        let (lc, ls) = (mean(&c.loc), mean(&s.loc));
        let loc_ok = lc <= ls + step;
        let size = c.sizes.iter().sum::<usize>() as f64 / c.sizes.len() as f64;
        let size_ok = c.sizes.len() == 20 && band.contains(&(size.round() as usize));
        pass &= nbi_ok && loc_ok && size_ok;
        lines.push(format!(
            "{} @{snr}dB: NBI {} [{}] | mean E_l {lc:.1} vs {ls:.1} [{}] | mean size {size:.0} in {:?} [{}]",
            tc.name,
            nbi_cells.join(" "),
            if nbi_ok { "ok" } else { "no" },
            if loc_ok { "ok" } else { "no" },
            band,
            if size_ok { "ok" } else { "no" },
        ));
    }
    report(3, pass, lines.join(" || "));
}

/// True when no support of size at most 2 other than `support` explains `phi`.
fn unique_two_sparse(k: &DMatrix<f64>, phi: &DVector<f64>, support: [usize; 2]) -> bool {
    let n = k.ncols();
    let explains = |cols: &[usize]| {
        let sub = k.select_columns(cols);
        let fit = sub.clone().svd(true, true).solve(phi, 1e-12).unwrap();
        (phi - sub * fit).norm() <= 1e-8 * phi.norm()
    };
    for a in 0..n {
        if a != support[0] && a != support[1] && explains(&[a]) {
            return false;
        }
        for b in a + 1..n {
            if [a, b] != support && explains(&[a, b]) {
                return false;
            }
        }
    }
    true
}

#[test]
fn criterion_4_focuss_sparse_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut recovered, mut tried) = (0, 0);
    let cfg = FocussConfig::default();
    while tried < 100 {
        let k = DMatrix::from_fn(10, 40, |_, _| rng.sample(StandardNormal));
        let mut support = [rng.random_range(0..40), rng.random_range(0..40)];
        if support[0] == support[1] {
            continue;
        }
        support.sort();
        let mut j = DVector::zeros(40);
        for &s in &support {
            let mag: f64 = rng.random_range(0.5..2.0);
            j[s] = if rng.random_bool(0.5) { mag } else { -mag };
        }
        let phi = &k * &j;
        if !unique_two_sparse(&k, &phi, support) {
            continue;
        }
        tried += 1;
        let est = focuss(&phi, &k, &DVector::from_element(40, 1.0), &cfg).unwrap();
        let big = est.j.amax();
        let found: Vec<usize> = (0..40).filter(|&i| est.j[i].abs() > 1e-8 * big).collect();
        let err = (&est.j - &j).norm() / j.norm();
        if found == support && err < 1e-6 {
            recovered += 1;
        }
    }
    report(4, recovered >= 95, format!("{recovered}/100 exact 2-sparse recoveries"));
}

#[test]
fn criterion_5_min_norm_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let k = DMatrix::from_fn(12, 30, |_, _| rng.sample(StandardNormal));
        let j_true = gaussian(&mut rng, 30);
        let phi = &k * &j_true;
        let est = weighted_min_norm(&phi, &k, &WeightSpec::Identity).unwrap();
        let null = DMatrix::identity(30, 30) - k.clone().pseudo_inverse(1e-12).unwrap() * &k;
        for _ in 0..100 {
            let jf = &j_true + &null * gaussian(&mut rng, 30);
            assert!((&k * &jf - &phi).norm() <= 1e-9 * phi.norm());
            worst = worst.max(est.j.norm() - jf.norm());
        }
    }
    report(
        5,
        worst <= 1e-9,
        format!("max |J_hat| - |J_f| over 2000 feasible points = {worst:.3e}"),
    );
}

/// Surface potential of a dipole in a homogeneous sphere, radial and
/// tangential parts in closed form. Lengths in metres.
fn homogeneous_sphere(r0: &Vector3<f64>, p: &Vector3<f64>, re: &Vector3<f64>, sigma: f64) -> f64 {
    let radius = re.norm();
    let e = re / radius;
    let b = r0.norm();
    let d = (re - r0).norm();
    let cos = if b > 0.0 { r0.dot(&e) / b } else { 0.0 };
    let z = if b > 0.0 { r0 / b } else { Vector3::z() };
    let pr = p.dot(&z);
    let radial = if b > 0.0 {
        2.0 * (radius * cos - b) / d.powi(3) + 1.0 / (b * d) - 1.0 / (b * radius)
    } else {
        0.0
    };
    // Unit tangent towards the electrode.
    let t = e - z * cos;
    let tangential = if t.norm() > 0.0 {
        let t_hat = t / t.norm();
        let sin = t.norm();
        p.dot(&t_hat)
            * sin
            * (2.0 * radius / d.powi(3) + (d + radius) / (d * radius * (radius - b * cos + d)))
    } else {
        0.0
    };
    (pr * radial + tangential) / (4.0 * std::f64::consts::PI * sigma)
}

#[test]
fn criterion_6_forward_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let equal = HeadModel { radii: [80.0, 85.0, 92.0], conductivities: [0.33, 0.33, 0.33] };
    let unit = |rng: &mut ChaCha8Rng| {
        let v = gaussian(rng, 3);
        Vector3::new(v[0], v[1], v[2]).normalize()
    };
    let mut worst_closed: f64 = 0.0;
    for _ in 0..50 {
        let r0 = unit(&mut rng) * rng.random_range(0.0..78.0);
        let re = unit(&mut rng) * 92.0;
        let p = unit(&mut rng);
        let ours = dipole_potential(&equal, &Point3::from(r0), &p, &Point3::from(re)).unwrap();
        let closed = homogeneous_sphere(&(r0 * 1e-3), &p, &(re * 1e-3), 0.33);
        let gain = ThreeShell::new(equal).unwrap().gain(&Point3::from(r0), &Point3::from(re)).unwrap();
        worst_closed = worst_closed.max((ours - closed).abs() / gain.norm());
    }

    let head = HeadModel::default();
    let model = ThreeShell::new(head).unwrap();
    let (mut worst_lin, mut worst_rot): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let r0 = unit(&mut rng) * rng.random_range(0.0..78.0);
        let re = unit(&mut rng) * 92.0;
        let (p, q) = (unit(&mut rng) * 3.0, unit(&mut rng) * 0.5);
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let v = |m: Vector3<f64>| dipole_potential(&head, &Point3::from(r0), &m, &Point3::from(re)).unwrap();
        let scale = v(p).abs() * a.abs() + v(q).abs() * b.abs();
        worst_lin = worst_lin.max((v(p * a + q * b) - (a * v(p) + b * v(q))).abs() / scale.max(1e-300));

        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(unit(&mut rng)), rng.random_range(0.0..6.28));
        let g = model.gain(&Point3::from(r0), &Point3::from(re)).unwrap();
        let g_rot = model
            .gain(&Point3::from(rot * r0), &Point3::from(rot * re))
            .unwrap();
        worst_rot = worst_rot.max((g_rot - rot * g).norm() / g.norm());
    }
    let pass = worst_closed <= 1e-6 && worst_lin <= 1e-9 && worst_rot <= 1e-9;
    report(
        6,
        pass,
        format!(
            "closed form rel err {worst_closed:.2e} (50 pairs) | linearity {worst_lin:.2e} | rotation {worst_rot:.2e}"
        ),
    );
}

#[test]
fn criterion_7_single_source_soundness() {
    let s = setup();
    let settings = SolverSettings::default();
    let cfg = settings.carss_for(None);
    let solver = Stage2Solver::Focuss(settings.focuss);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut contained, mut hit) = (0, 0);
    for _ in 0..100 {
        let point = rng.random_range(0..s.grid.len());
        let m = gaussian(&mut rng, 3);
        let truth = GroundTruth::new(
            vec![TrueSource { label: "S1".into(), point, moment: Vector3::new(m[0], m[1], m[2]) }],
            s.grid.len(),
        )
        .unwrap();
        let phi = synthesize(&s.lead_field, &truth.current(s.grid.len()), None, None).unwrap().0;
        let r = carss_localize(&phi, s.lead_field.matrix(), &s.stage0, &cfg, &solver).unwrap();
        if (0..3).all(|c| r.prior.contains(3 * point + c)) {
            contained += 1;
        }
        let power = r.estimate.point_power();
        let best = (0..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
        if best == point {
            hit += 1;
        }
    }
    report(
        7,
        contained >= 95 && hit >= 95,
        format!("true columns kept {contained}/100 | power maximum at truth {hit}/100"),
    );
}

#[test]
fn criterion_8_compare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let files = ["report.csv", "report.json", "comparison.json", "run_manifest.json"];
    // Both invocations write to the same directory, so the manifests are
    // comparable too.
    let run = || {
        let o = Command::new(env!("CARGO_BIN_EXE_carss"))
            .args(["--out", out.to_str().unwrap(), "compare", "--testcase", "1", "--snr", "17"])
            .env("CARSS_CACHE_DIR", dir.path().join("cache"))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.map(|f| std::fs::read(out.join(f)).unwrap())
    };
    let (a, b) = (run(), run());
    let differing: Vec<&str> = files
        .iter()
        .zip(a.iter().zip(&b))
        .filter(|(_, (x, y))| x != y)
        .map(|(f, _)| *f)
        .collect();
    let detail = if differing.is_empty() {
        format!("{} identical across two runs", files.join(", "))
    } else {
        format!("differing files: {}", differing.join(", "))
    };
    report(8, differing.is_empty(), detail);
}

#[test]
fn criterion_9_preprocessing_contracts() {
    let rate = 250.0;
    let samples = 5000;
    let gain_db = |freq: f64| {
        let x = if freq == 0.0 {
            DVector::from_element(samples, 1.0)
        } else {
            sinusoid(freq, rate, samples)
        };
        let data = DMatrix::from_row_slice(1, samples, x.as_slice());
        let y = bandpass(&data, rate, 4.0, 30.0).unwrap();
        let mid = samples / 4..3 * samples / 4;
        let rms = |m: &DMatrix<f64>| (mid.clone().map(|j| m[(0, j)].powi(2)).sum::<f64>() / mid.len() as f64).sqrt();
        20.0 * (rms(&y) / rms(&data)).log10()
    };
    let probes = [(10.0, gain_db(10.0)), (1.0, gain_db(1.0)), (50.0, gain_db(50.0)), (0.5, gain_db(0.5)), (0.0, gain_db(0.0))];
    let band_ok = probes[0].1.abs() <= 1.0
        && probes[1].1 <= -20.0
        && probes[2].1 <= -20.0
        && probes[3].1 <= -20.0
        && probes[4].1 <= -40.0;

    let hand = [
        (vec![3.0, 4.0, 0.0, 0.0, 5.0], vec![0, 1], 0.0),
        (vec![2.0, 0.0, 1.0], vec![0], 3.0),
        (vec![1.0, 0.0, 0.0], vec![0], f64::INFINITY),
        (vec![0.0, 1.0, 1.0], vec![0], -1.0),
    ];
    let hand_ok = hand.iter().all(|(w, eog, want)| {
        eog_ratio(&DMatrix::from_column_slice(w.len(), 1, w), eog).unwrap()[0] == *want
    });

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mix = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(6, 6) * 3.0;
        let unmix = mix.clone().try_inverse().unwrap();
        let data = DMatrix::from_fn(6, 200, |_, _| rng.sample::<f64, _>(StandardNormal) * 20.0);
        let tau = rng.random_range(-1.0..2.0);
        let once = remove_eog(&data, &mix, &unmix, &[0, 1], tau, &[]).unwrap().cleaned;
        let twice = remove_eog(&once, &mix, &unmix, &[0, 1], tau, &[]).unwrap().cleaned;
        worst = worst.max((twice - &once).amax() / data.amax());
    }
    let idem_ok = worst <= 1e-12;

    let cells: Vec<String> = probes
        .iter()
        .map(|(f, g)| format!("{f}Hz {g:.1}dB"))
        .collect();
    report(
        9,
        band_ok && hand_ok && idem_ok,
        format!(
            "band-pass {} | eog_ratio hand examples {} | remove_eog idempotence {worst:.1e}",
            cells.join(" "),
            if hand_ok { "exact" } else { "wrong" }
        ),
    );
}
