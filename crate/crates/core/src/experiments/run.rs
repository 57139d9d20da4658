use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{Experiment, RunConfig};
use super::convolution::{convolution_csv, standard_bounds};
use super::correlation::{correlation_map, theorem_comparison, Status, Verdict};
use super::criteria::{self, Profile};
use super::gff::{gff_csv, gff_sweep};
use super::green::{corrector_moments, green_decay, MOMENT_VARIATION_BOUND};
use crate::elliptic::{dense_green_matrix, DENSE_LIMIT};
use crate::environment::sample_environment;
use crate::error::{Error, Result};
use crate::fit::{decay_fit, FitOptions};
use crate::homogenize::{
    estimate_ah, estimate_q_many, q_positivity_report, voigt_reuss_bounds, HomogenizedData, MatrixEstimate, QEstimate,
};
use crate::kernels::{discrete_vs_continuum_table, kernel_grid, sphere_grid, METHOD_TOLERANCE};
use crate::twoscale::{bundle_for_environment, representation_z_check, residual_battery, residual_csv, RESIDUAL_THRESHOLD};

/// One pass/fail line of a run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub name: String,
    pub status: Status,
    /// Hard criteria decide the exit status.
    pub hard: bool,
    pub table: Option<String>,
    pub detail: String,
}

impl CriterionSummary {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            hard: true,
            table: None,
            detail: detail.into(),
        }
    }

    pub fn from_verdict(v: &Verdict, hard: bool, table: &str) -> Self {
        Self {
            name: v.name.clone(),
            status: v.status,
            hard,
            table: Some(table.into()),
            detail: format!("statistic {:.4} band {}; {}", v.statistic, v.band, v.detail),
        }
    }

    pub fn soft(mut self) -> Self {
        self.hard = false;
        self
    }

    pub fn in_table(mut self, table: &str) -> Self {
        self.table = Some(table.into());
        self
    }

    /// Inconclusive verdicts do not fail a run.
    pub fn failed(&self) -> bool {
        self.hard && self.status == Status::Fail
    }
}

/// Tables and verdicts produced by one experiment.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub tables: Vec<(String, String)>,
    pub json: Vec<(String, String)>,
    pub criteria: Vec<CriterionSummary>,
    pub stages: Vec<(String, f64)>,
}

impl Artifacts {
    fn table(&mut self, name: &str, csv: String) {
        self.tables.push((name.into(), csv));
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.stages.push((name.into(), start.elapsed().as_secs_f64()));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub passed: bool,
    pub failing_tables: Vec<String>,
    pub criteria: Vec<CriterionSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    experiment: String,
    version: String,
    seed: u64,
    quadrature_seed: u64,
    config: RunConfig,
    tables: Vec<String>,
    wall_seconds: Vec<(String, f64)>,
    total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: Summary,
}

fn matrix_csv(label: &str, m: &MatrixEstimate, out: &mut String) {
    for i in 0..m.dim {
        for j in 0..m.dim {
            out.push_str(&format!("{label},{i},{j},{:.17e},{:.17e}\n", m.get(i, j), m.error(i, j)));
        }
    }
}

fn unit_axis(xi: &[f64]) -> Option<usize> {
    let nonzero: Vec<usize> = (0..xi.len()).filter(|&i| xi[i] != 0.0).collect();
    (nonzero.len() == 1).then(|| nonzero[0])
}

/// PSD, quadratic scaling and the transverse symmetry of `Q`, shared with the acceptance suite.
pub fn q_diagnostics(q: &QEstimate, doubled: &QEstimate) -> Vec<CriterionSummary> {
    let pos = q_positivity_report(&q.matrix);
    let d = q.matrix.dim;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let diff = (doubled.matrix.get(i, j) - 4.0 * q.matrix.get(i, j)).abs();
            let s = doubled.matrix.error(i, j).hypot(4.0 * q.matrix.error(i, j));
            worst = worst.max(if s > 0.0 { diff / s } else if diff > 1e-12 { f64::INFINITY } else { 0.0 });
        }
    }
    let mut out = vec![
        CriterionSummary::new(
            "q_positive_semidefinite",
            !pos.flagged,
            format!("eigenvalues {:?} sigmas {:?}", pos.eigenvalues, pos.sigmas),
        ),
        CriterionSummary::new(
            "q_quadratic_scaling",
            worst <= 1.0,
            format!("max |Q(2xi) - 4 Q(xi)| = {worst:.3} combined sigma"),
        ),
    ];
    if let Some(axis) = unit_axis(&q.xi) {
        let others: Vec<usize> = (0..d).filter(|&i| i != axis).collect();
        let mut sig: f64 = 0.0;
        for w in others.windows(2) {
            let (a, b) = (w[0], w[1]);
            let diff = (q.matrix.get(a, a) - q.matrix.get(b, b)).abs();
            let s = q.matrix.error(a, a).hypot(q.matrix.error(b, b));
            sig = sig.max(if s > 0.0 { diff / s } else if diff > 1e-12 { f64::INFINITY } else { 0.0 });
        }
        out.push(CriterionSummary::new(
            "q_transverse_symmetry",
            sig <= 3.0,
            format!("max transverse diagonal gap {sig:.3} sigma"),
        ));
    }
    out.into_iter().map(|c| c.in_table("q.csv")).collect()
}

pub fn q_csv(estimates: &[QEstimate]) -> String {
    let mut out = String::from("xi,i,j,value,error\n");
    for q in estimates {
        let label = q.xi.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
        matrix_csv(&label, &q.matrix, &mut out);
    }
    out
}

fn estimate_ah_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let g = config.geometry()?;
    let ah = art.stage("estimate_ah", || estimate_ah(&g, &config.map, config.seed, config.samples.max(2), config.mu, &config.solver))?;
    let mut csv = String::from("matrix,i,j,value,error\n");
    matrix_csv("ah", &ah.matrix, &mut csv);
    art.table("ah.csv", csv);
    let moments = art.stage("corrector_moments", || corrector_moments(config))?;
    art.table("moments.csv", moments.csv());
    let data = HomogenizedData {
        dim: g.dim(),
        side: g.side(),
        mu: config.mu,
        map: config.map.clone(),
        seed: config.seed,
        ah: Some(ah.clone()),
        q: vec![],
        quadrature: None,
    };
    art.json.push(("homogenized.json".into(), data.to_json()?));
    let (harmonic, arithmetic) = voigt_reuss_bounds(&config.map);
    let slack = 3.0 * ah.scalar_error + 1e-12;
    art.criteria.push(
        CriterionSummary::new(
            "voigt_reuss_sandwich",
            harmonic - slack <= ah.scalar && ah.scalar <= arithmetic + slack,
            format!("{harmonic:.6} <= {:.6} +- {:.2e} <= {arithmetic:.6}", ah.scalar, ah.scalar_error),
        )
        .in_table("ah.csv"),
    );
    art.criteria.push(
        CriterionSummary::new(
            "corrector_moment_stability",
            moments.variation < MOMENT_VARIATION_BOUND,
            format!("largest relative change across masses {:.4}", moments.variation),
        )
        .in_table("moments.csv"),
    );
    Ok(())
}

fn estimate_q_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let g = config.geometry()?;
    let doubled: Vec<f64> = config.xi.iter().map(|v| 2.0 * v).collect();
    let quad = config.q_spec()?;
    let qs = art.stage("estimate_q", || estimate_q_many(&[config.xi.clone(), doubled], &g, &config.map, &quad, &config.solver))?;
    art.table("q.csv", q_csv(&qs));
    let pos = q_positivity_report(&qs[0].matrix);
    let mut csv = String::from("index,eigenvalue,sigma\n");
    for (k, (l, s)) in pos.eigenvalues.iter().zip(&pos.sigmas).enumerate() {
        csv.push_str(&format!("{k},{l:.17e},{s:.17e}\n"));
    }
    art.table("q_eigenvalues.csv", csv);
    let data = HomogenizedData {
        dim: g.dim(),
        side: g.side(),
        mu: config.mu,
        map: config.map.clone(),
        seed: config.seed,
        ah: None,
        q: qs.clone(),
        quadrature: Some(quad),
    };
    art.json.push(("homogenized.json".into(), data.to_json()?));
    art.criteria.extend(q_diagnostics(&qs[0], &qs[1]));
    Ok(())
}

/// Criteria (ii) and (iii) are decisive only at the full trend-suite scale.
fn trend_scale(config: &RunConfig) -> bool {
    config.side >= 32 && config.samples >= 500
}

fn correlation_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let report = art.stage("correlation_map", || correlation_map(config))?;
    art.table("correlation_points.csv", report.points_csv());
    art.table("correlation_profile.csv", report.profile_csv());
    art.table("correlation_shells.csv", report.shells_csv());
    let verdicts = theorem_comparison(&report);
    art.table("verdicts.csv", verdicts.csv());
    let full = trend_scale(config);
    art.criteria.push(CriterionSummary::from_verdict(&verdicts.exponent, true, "verdicts.csv"));
    art.criteria.push(CriterionSummary::from_verdict(&verdicts.ratio_trend, full, "verdicts.csv"));
    art.criteria.push(CriterionSummary::from_verdict(&verdicts.difference_gap, full, "verdicts.csv"));
    art.json.push(("correlation.json".into(), serde_json::to_string_pretty(&report)?));
    Ok(())
}

/// Axis and diagonal points up to radius 8 plus a sphere of radius 4.
pub fn kernel_points(d: usize) -> Vec<Vec<f64>> {
    let mut points = Vec::new();
    for n in 1..=8 {
        let n = n as f64;
        for j in 0..d {
            let mut x = vec![0.0; d];
            x[j] = n;
            points.push(x);
        }
        points.push((0..d).map(|j| if j < 2 { n } else { 0.0 }).collect());
        points.push(vec![n; d]);
    }
    points.extend(sphere_grid(d, 32).into_iter().map(|p| p.iter().map(|v| 4.0 * v).collect()));
    points
}

fn kernel_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let d = config.dimension;
    let (q, diag) = match &config.kernel {
        Some(k) => (DMatrix::from_row_slice(d, d, &k.q), k.homogenized.clone()),
        None => (DMatrix::identity(d, d), vec![1.0; d]),
    };
    let grid = art.stage("kernel_grid", || kernel_grid(&q, &diag, &kernel_points(d)))?;
    art.table("kernel.csv", grid.to_csv());
    let worst = grid
        .values
        .iter()
        .zip(&grid.errors)
        .map(|(v, e)| if *v != 0.0 { e / v.abs() } else { *e })
        .fold(0.0, f64::max);
    art.criteria.push(
        CriterionSummary::new(
            "kernel_method_agreement",
            worst <= METHOD_TOLERANCE,
            format!("largest relative gap {worst:.3e} ({})", grid.method),
        )
        .in_table("kernel.csv"),
    );
    if d == 3 {
        let radii: Vec<i64> = (4..=32).collect();
        let rows = art.stage("discrete_vs_continuum", || discrete_vs_continuum_table(&diag, &[1, 0, 0], 0, &radii))?;
        let mut csv = String::from("radius,discrete,continuum,difference,scaled\n");
        for r in &rows {
            csv.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.radius, r.discrete, r.continuum, r.difference, r.scaled
            ));
        }
        art.table("gradient_comparison.csv", csv);
        art.criteria.push(criteria::discrete_continuum_summary(&rows).in_table("gradient_comparison.csv"));
    }
    Ok(())
}

fn two_scale_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let g = config.geometry()?;
    let homogenized = match &config.kernel {
        Some(k) => k.homogenized.clone(),
        None => vec![voigt_reuss_bounds(&config.map).1; g.dim()],
    };
    let rows = art.stage("residual_battery", || {
        residual_battery(&g, &config.map, config.seed, config.samples as u64, &homogenized, &config.solver)
    })?;
    art.table("residual.csv", residual_csv(&rows));
    let worst = rows.iter().map(|r| r.max_residual).fold(0.0, f64::max);
    art.criteria.push(
        CriterionSummary::new(
            "two_scale_residual",
            rows.iter().all(|r| r.pass),
            format!("largest aligned residual {worst:.3e} over {} environments, threshold {RESIDUAL_THRESHOLD:.0e}", rows.len()),
        )
        .in_table("residual.csv"),
    );
    if g.site_count() <= DENSE_LIMIT.min(512) {
        let env = sample_environment(&g, &config.map, config.seed, 0)?;
        let rep = art.stage("representation", || {
            let bundle = bundle_for_environment(&env, &homogenized, &config.solver)?;
            representation_z_check(&bundle, &dense_green_matrix(&env.a, 0.0)?)
        })?;
        art.table(
            "representation.csv",
            format!(
                "max_deviation,without_h,z_scale\n{:.17e},{:.17e},{:.17e}\n",
                rep.max_deviation, rep.without_h, rep.z_scale
            ),
        );
        art.criteria.push(
            CriterionSummary::new(
                "two_scale_representation",
                rep.max_deviation < RESIDUAL_THRESHOLD,
                format!("max deviation {:.3e}; without the h term {:.3e}", rep.max_deviation, rep.without_h),
            )
            .in_table("representation.csv"),
        );
    }
    Ok(())
}

fn conv_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let reports = art.stage("convolution_bounds", || standard_bounds(config.dimension))?;
    art.table("conv_bounds.csv", convolution_csv(&reports));
    for r in &reports {
        art.criteria.push(
            CriterionSummary::new(
                format!("convolution_{}", r.regime.name),
                r.passes(),
                format!("max/min ratio {:.3}; {} rows flagged for cutoff sensitivity", r.ratio, r.flagged()),
            )
            .in_table("conv_bounds.csv"),
        );
    }
    Ok(())
}

fn green_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let report = art.stage("green_decay", || green_decay(config))?;
    art.table("green_decay.csv", report.csv());
    for (k, v) in report.verdicts.iter().enumerate() {
        art.criteria.push(CriterionSummary::from_verdict(v, k < 2, "green_decay.csv"));
    }
    Ok(())
}

fn gff_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let rows = art.stage("gff_sweep", || gff_sweep(config))?;
    art.table("gff_defect.csv", gff_csv(&rows));
    Ok(())
}

fn verify_artifacts(config: &RunConfig, art: &mut Artifacts) -> Result<()> {
    let profile = Profile::from_env();
    for id in criteria::CRITERIA {
        let start = Instant::now();
        let outcome = criteria::evaluate(id, profile, config.seed);
        art.stages.push((format!("criterion_{id:02}"), start.elapsed().as_secs_f64()));
        let table = format!("criterion_{id:02}.csv");
        art.table(&table, outcome.table.clone());
        art.criteria.push(CriterionSummary {
            name: format!("{id:02}_{}", outcome.name),
            status: if outcome.passed { Status::Pass } else { Status::Fail },
            hard: true,
            table: Some(table),
            detail: outcome.detail,
        });
    }
    Ok(())
}

/// Computes an experiment's artifacts without touching the file system.
pub fn execute(experiment: Experiment, config: &RunConfig) -> Result<Artifacts> {
    config.validate()?;
    let mut art = Artifacts::default();
    match experiment {
        Experiment::Verify => verify_artifacts(config, &mut art)?,
        Experiment::EstimateAh => estimate_ah_artifacts(config, &mut art)?,
        Experiment::EstimateQ => estimate_q_artifacts(config, &mut art)?,
        Experiment::CorrelationMap => correlation_artifacts(config, &mut art)?,
        Experiment::KernelK => kernel_artifacts(config, &mut art)?,
        Experiment::TwoScaleBattery => two_scale_artifacts(config, &mut art)?,
        Experiment::ConvBounds => conv_artifacts(config, &mut art)?,
        Experiment::GreenDecay => green_artifacts(config, &mut art)?,
        Experiment::GffDefect => gff_artifacts(config, &mut art)?,
    }
    Ok(art)
}

/// Runs `experiment` and writes the manifest, CSV tables and summary into `out`.
pub fn run_into(experiment: Experiment, config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let start = Instant::now();
    let art = execute(experiment, config)?;
    fs::create_dir_all(out)?;
    for (name, body) in art.tables.iter().chain(&art.json) {
        fs::write(out.join(name), body)?;
    }
    let mut failing_tables: Vec<String> = art
        .criteria
        .iter()
        .filter(|c| c.failed())
        .map(|c| c.table.clone().unwrap_or_else(|| c.name.clone()))
        .collect();
    failing_tables.dedup();
    let summary = Summary {
        experiment: experiment.name().into(),
        passed: failing_tables.is_empty(),
        failing_tables,
        criteria: art.criteria.clone(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let manifest = Manifest {
        experiment: experiment.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        quadrature_seed: config.q_spec()?.seed,
        config: config.clone(),
        tables: art.tables.iter().map(|t| t.0.clone()).collect(),
        wall_seconds: art.stages.clone(),
        total_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunOutcome {
        out_dir: out.to_path_buf(),
        summary,
    })
}

/// Runs the experiment and output directory named in the config.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let experiment = config.experiment.ok_or_else(|| Error::Config {
        path: "experiment".into(),
        message: "no experiment selected".into(),
    })?;
    let out = config.output.clone().unwrap_or_else(|| PathBuf::from("out").join(experiment.name()));
    run_into(experiment, config, &out)
}

/// Fits the gradient difference table used by `kernel-k` and the acceptance suite.
pub(crate) fn gradient_difference_fit(radii: &[f64], diff: &[f64]) -> Result<crate::fit::DecayFit> {
    decay_fit(radii, diff, &FitOptions::within((4.0, 32.0)).absolute())
}
