use std::path::{Path, PathBuf};
use std::time::Instant;

use aspca::hspcr::{fit_hspcr, fit_precision, plugin_precision_cov, plugin_theta_cov};
use aspca::inference::{
    bootstrap_point, fit_pipeline_from_model, jackknife_point, BootstrapKind, BootstrapSpec, CiTable, ComponentRule,
    JackknifeSpec, PipelineFit, ResponseData,
};
use aspca::io::{self, fmt_f64, GridData, RunManifest, Table};
use aspca::normal::normal_quantile;
use aspca::pca::{
    diagnose_in_frame, eigenvalue_se, fit_in_frame, pve_from_eigenvalues, select_pve, DiagnosticReport, Frame,
};
use aspca::simgen::{reproduce_table, run_monte_carlo, McInference, Scale, ScenarioConfig};
use aspca::{
    bspline_tensor_basis, mask_space, tri_pl_basis, AmbientSpace, BasisSet, Error, Result, SampleSet, Triangulation,
};
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::{
    BasisArgs, BasisKind, BootstrapArgs, Command, DiagnoseArgs, FamilyArg, FitArgs, InferenceArg, JackknifeArgs,
    PveArgs, RegressArgs, RegressionInputs, ReproduceArgs, ScaleArg, SimulateArgs, WeightKind,
};

const MAX_REFINEMENTS: usize = 4;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => fit(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Pve(a) => pve(a),
        Command::Regress(a) => regress(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Jackknife(a) => jackknife(a),
        Command::Simulate(a) => simulate(a),
        Command::Reproduce(a) => reproduce(a),
    }
}

/// Collects output files and writes the manifest last.
struct Outputs {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Outputs {
    fn new(dir: &Path, command: &str, config: serde_json::Value, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(command, config, seed),
            started: Instant::now(),
        })
    }

    fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        let path = self.dir.join(name);
        io::write_table(&path, table)?;
        self.manifest.record_output(&path)
    }

    fn grid(&mut self, name: &str, grid: &GridData) -> Result<()> {
        let path = self.dir.join(name);
        io::write_grid(&path, grid)?;
        self.manifest.record_output(&path)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        io::write_manifest(&self.dir.join("manifest.json"), &self.manifest)
    }
}

fn header(names: &[&str]) -> Table {
    Table::new(names.iter().map(|s| s.to_string()).collect())
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "NA".into())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_sample(path: &Path) -> Result<(Vec<usize>, SampleSet)> {
    io::read_grid(path)?.into_sample()
}

fn build_space(dims: &[usize], args: &BasisArgs) -> Result<AmbientSpace> {
    let space = AmbientSpace::grid(dims)?;
    match &args.mask {
        None => Ok(space),
        Some(p) => {
            let grid = io::read_grid(p)?;
            if grid.dims != dims {
                return Err(Error::Config(format!(
                    "mask has shape {:?} but the data grid is {:?}",
                    grid.dims, dims
                )));
            }
            let mask: Vec<bool> = grid.values.iter().map(|v| *v != 0.0).collect();
            mask_space(&space, &mask)
        }
    }
}

fn build_basis(space: &AmbientSpace, args: &BasisArgs, knots: usize) -> Result<BasisSet> {
    match args.basis {
        BasisKind::Bspline => {
            let nd = space.ndim();
            bspline_tensor_basis(space, &vec![args.degree; nd], &vec![knots; nd])
        }
        BasisKind::Tri => {
            let mesh = args
                .mesh
                .as_ref()
                .ok_or_else(|| Error::Config("--basis tri requires --mesh".into()))?;
            tri_pl_basis(space, &Triangulation::read(mesh)?)
        }
    }
}

/// The projection frame, refined under `--auto-knots` until the
/// diagnostic stops rejecting. Returns the knot count actually used.
fn resolve_frame(
    space: &AmbientSpace,
    sample: &SampleSet,
    args: &BasisArgs,
) -> Result<(Frame, usize, Option<DiagnosticReport>)> {
    if !args.auto_knots {
        let frame = Frame::new(space, &build_basis(space, args, args.knots)?, args.drop_tol)?;
        return Ok((frame, args.knots, None));
    }
    if args.basis != BasisKind::Bspline {
        return Err(Error::Config("--auto-knots applies to --basis bspline only".into()));
    }
    let mut knots = args.knots;
    for step in 0..=MAX_REFINEMENTS {
        let frame = Frame::new(space, &build_basis(space, args, knots)?, args.drop_tol)?;
        let report = diagnose_in_frame(space, &frame, sample, args.alpha)?;
        info!("knots {knots}: T = {:.4}, reject = {}", report.t_stat, report.reject);
        if !report.reject || step == MAX_REFINEMENTS {
            if report.reject {
                warn!("diagnostic still rejects after {MAX_REFINEMENTS} refinements (knots {knots})");
            }
            return Ok((frame, knots, Some(report)));
        }
        knots = 2 * knots + 1;
    }
    unreachable!("the loop returns on its last step")
}

fn basis_echo(args: &BasisArgs) -> serde_json::Value {
    json!({
        "basis": match args.basis { BasisKind::Bspline => "bspline", BasisKind::Tri => "tri" },
        "degree": args.degree,
        "knots": args.knots,
        "mesh": args.mesh.as_deref().map(path_str),
        "mask": args.mask.as_deref().map(path_str),
        "auto_knots": args.auto_knots,
        "alpha": args.alpha,
        "drop_tol": args.drop_tol,
    })
}

fn diagnostic_table(report: &DiagnosticReport, knots: usize) -> Result<Table> {
    let mut t = header(&[
        "n",
        "knots",
        "delta_hat",
        "delta_hat_variance_form",
        "s2_hat",
        "t_stat",
        "alpha",
        "critical",
        "reject",
    ]);
    t.push(vec![
        report.n.to_string(),
        knots.to_string(),
        fmt_f64(report.delta_hat),
        fmt_f64(report.delta_hat_variance_form),
        fmt_f64(report.s2_hat),
        fmt_f64(report.t_stat),
        fmt_f64(report.alpha),
        fmt_f64(report.critical),
        report.reject.to_string(),
    ])?;
    Ok(t)
}

fn fit(a: FitArgs) -> Result<()> {
    let config = json!({ "data": path_str(&a.data), "basis": basis_echo(&a.basis) });
    let mut out = Outputs::new(&a.out, "fit", config, None)?;
    let (dims, sample) = load_sample(&a.data)?;
    let space = build_space(&dims, &a.basis)?;
    let (frame, knots, _) = resolve_frame(&space, &sample, &a.basis)?;
    let model = fit_in_frame(&space, frame, &sample)?;
    let se = eigenvalue_se(&model, &space, &sample)?;
    let total = model.total_variance();

    let mut t = header(&["component", "eigenvalue", "se", "cumulative_fraction"]);
    let mut cum = 0.0;
    for (j, (l, s)) in model.lambdas().iter().zip(&se).enumerate() {
        cum += l;
        t.push(vec![
            (j + 1).to_string(),
            fmt_f64(*l),
            fmt_f64(*s),
            fmt_f64(cum / total),
        ])?;
    }
    out.table("eigenvalues.csv", &t)?;

    let phi = model.eigenfunctions();
    let mut values = Vec::with_capacity(phi.len());
    for j in 0..phi.nrows() {
        values.extend(phi.row(j).iter());
    }
    let mut shape = vec![phi.nrows()];
    shape.extend_from_slice(&dims);
    out.grid("eigenfunctions.hsg", &GridData::new(shape, values)?)?;
    out.grid("mean.hsg", &GridData::from_element(&dims, model.mean())?)?;
    println!(
        "retained {} components (knots {knots}), total variance {}",
        model.rank(),
        fmt_f64(total)
    );
    out.finish()
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let config = json!({ "data": path_str(&a.data), "basis": basis_echo(&a.basis) });
    let mut out = Outputs::new(&a.out, "diagnose", config, None)?;
    let (dims, sample) = load_sample(&a.data)?;
    let space = build_space(&dims, &a.basis)?;
    let (frame, knots, report) = resolve_frame(&space, &sample, &a.basis)?;
    let report = match report {
        Some(r) => r,
        None => diagnose_in_frame(&space, &frame, &sample, a.basis.alpha)?,
    };
    out.table("diagnostic.csv", &diagnostic_table(&report, knots)?)?;
    println!(
        "T = {} (critical {}): {}",
        fmt_f64(report.t_stat),
        fmt_f64(report.critical),
        if report.reject {
            "reject, enlarge the basis"
        } else {
            "basis adequate"
        }
    );
    out.finish()
}

fn pve(a: PveArgs) -> Result<()> {
    let config = json!({
        "data": a.data.as_deref().map(path_str),
        "eigenvalues": a.eigenvalues.as_deref().map(path_str),
        "total_variance": a.total_variance,
        "tau": a.tau,
        "basis": basis_echo(&a.basis),
    });
    let mut out = Outputs::new(&a.out, "pve", config, None)?;
    let (lambdas, selection) = match (&a.data, &a.eigenvalues) {
        (_, Some(path)) => {
            let lambdas = io::read_table(path)?.numeric_column("eigenvalue")?;
            let total = a.total_variance.unwrap_or_else(|| lambdas.iter().sum());
            let sel = pve_from_eigenvalues(&lambdas, total, a.tau)?;
            (lambdas, sel)
        }
        (Some(path), None) => {
            let (dims, sample) = load_sample(path)?;
            let space = build_space(&dims, &a.basis)?;
            let (frame, _, _) = resolve_frame(&space, &sample, &a.basis)?;
            let model = fit_in_frame(&space, frame, &sample)?;
            let sel = select_pve(&model, a.tau)?;
            (model.lambdas().to_vec(), sel)
        }
        (None, None) => return Err(Error::Config("pve needs --data or --eigenvalues".into())),
    };
    let mut t = header(&["component", "eigenvalue", "cumulative_fraction", "selected"]);
    for (j, (l, f)) in lambdas.iter().zip(&selection.cumulative_fractions).enumerate() {
        t.push(vec![
            (j + 1).to_string(),
            fmt_f64(*l),
            fmt_f64(*f),
            (j < selection.m).to_string(),
        ])?;
    }
    out.table("pve.csv", &t)?;
    println!("selected m = {} at tau = {}", selection.m, a.tau);
    out.finish()
}

fn regression_echo(i: &RegressionInputs) -> serde_json::Value {
    json!({
        "data": path_str(&i.data),
        "y": path_str(&i.y),
        "y_column": i.y_column,
        "x": i.x.as_deref().map(path_str),
        "treatment": i.treatment,
        "tau": i.tau,
        "components": i.components,
        "level": i.level,
        "basis": basis_echo(&i.basis),
    })
}

fn load_response(i: &RegressionInputs, n: usize) -> Result<ResponseData> {
    let ytab = io::read_table(&i.y)?;
    let y = ytab.numeric_column(&i.y_column)?;
    if y.len() != n {
        return Err(Error::Conformance {
            what: "response rows",
            expected: n,
            found: y.len(),
        });
    }
    let x = match &i.x {
        Some(p) => {
            let (_, m) = io::read_table(p)?.numeric_matrix(&[])?;
            if m.nrows() != n {
                return Err(Error::Conformance {
                    what: "covariate rows",
                    expected: n,
                    found: m.nrows(),
                });
            }
            m
        }
        None => DMatrix::zeros(n, 0),
    };
    let data = ResponseData::new(DVector::from_vec(y), x);
    match &i.treatment {
        None => Ok(data),
        Some(col) => {
            let raw = ytab.numeric_column(col)?;
            let mut flags = Vec::with_capacity(n);
            for (row, v) in raw.iter().enumerate() {
                flags.push(match *v {
                    0.0 => false,
                    1.0 => true,
                    _ => {
                        return Err(Error::Table {
                            column: col.clone(),
                            row: row + 1,
                            message: format!("treatment must be 0 or 1, got {v}"),
                        })
                    }
                });
            }
            Ok(data.with_treatment(flags))
        }
    }
}

struct Prepared {
    space: AmbientSpace,
    sample: SampleSet,
    data: ResponseData,
    point: PipelineFit,
}

fn prepare(i: &RegressionInputs) -> Result<Prepared> {
    let (dims, sample) = load_sample(&i.data)?;
    let data = load_response(i, sample.n())?;
    let space = build_space(&dims, &i.basis)?;
    let (frame, _, _) = resolve_frame(&space, &sample, &i.basis)?;
    let model = fit_in_frame(&space, frame, &sample)?;
    let rule = match i.components {
        Some(m) => ComponentRule::Fixed(m),
        None => ComponentRule::Pve(i.tau),
    };
    let point = fit_pipeline_from_model(&space, model, &sample, &data, rule)?;
    Ok(Prepared {
        space,
        sample,
        data,
        point,
    })
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("level must lie in (0, 1), got {level}")))
    }
}

fn coefficient_table(ci: &CiTable) -> Result<Table> {
    let mut t = header(&["term", "estimate", "se", "lower", "upper"]);
    for k in 0..ci.terms.len() {
        t.push(vec![
            ci.terms[k].clone(),
            fmt_f64(ci.point[k]),
            fmt_f64(ci.se[k]),
            fmt_f64(ci.lower[k]),
            fmt_f64(ci.upper[k]),
        ])?;
    }
    Ok(t)
}

fn regress(a: RegressArgs) -> Result<()> {
    let i = &a.inputs;
    check_level(i.level)?;
    let mut out = Outputs::new(&i.out, "regress", regression_echo(i), None)?;
    let p = prepare(i)?;
    let cov = if p.data.treatment.is_some() {
        let f = fit_precision(&p.point.design)?;
        plugin_precision_cov(&f, &p.point.model, &p.space, &p.sample, &p.point.design)?
    } else {
        let f = fit_hspcr(&p.point.design)?;
        plugin_theta_cov(&f, &p.point.model, &p.space, &p.sample, &p.point.design)?
    };
    let z = normal_quantile(0.5 + i.level / 2.0);
    let se: Vec<f64> = (0..cov.nrows()).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    let theta = p.point.theta.as_slice();
    let ci = CiTable {
        terms: p.point.terms.clone(),
        point: theta.to_vec(),
        lower: theta.iter().zip(&se).map(|(t, s)| t - z * s).collect(),
        upper: theta.iter().zip(&se).map(|(t, s)| t + z * s).collect(),
        se,
        method: "plugin".into(),
        level: i.level,
        completed: 1,
    };
    out.table("coefficients.csv", &coefficient_table(&ci)?)?;
    println!("fitted {} coefficients with m = {} components", theta.len(), p.point.m);
    out.finish()
}

fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let i = &a.inputs;
    let kind = match a.kind {
        WeightKind::Nonparametric => BootstrapKind::Nonparametric,
        WeightKind::Wild => BootstrapKind::Wild,
    };
    let spec = BootstrapSpec::new(kind, a.b_reps, a.seed, i.level)?;
    let mut config = regression_echo(i);
    config["B"] = json!(a.b_reps);
    config["kind"] = json!(match a.kind {
        WeightKind::Nonparametric => "nonparametric",
        WeightKind::Wild => "wild",
    });
    let mut out = Outputs::new(&i.out, "bootstrap", config, Some(a.seed))?;
    let p = prepare(i)?;
    let res = bootstrap_point(&p.sample, &p.data, p.point, &spec)?;
    if res.failed > 0 {
        warn!(
            "{} of {} bootstrap replicates failed and were dropped",
            res.failed, a.b_reps
        );
    }
    out.table("coefficients.csv", &coefficient_table(&res.ci)?)?;
    println!(
        "{} of {} replicates completed, m = {}",
        res.ci.completed, a.b_reps, res.point.m
    );
    out.finish()
}

fn jackknife(a: JackknifeArgs) -> Result<()> {
    let i = &a.inputs;
    let mut config = regression_echo(i);
    config["r"] = json!(a.r);
    let mut out = Outputs::new(&i.out, "jackknife", config, None)?;
    let p = prepare(i)?;
    let spec = JackknifeSpec { r: a.r, level: i.level };
    let res = jackknife_point(&p.sample, &p.data, p.point, &spec)?;
    out.table("coefficients.csv", &coefficient_table(&res.ci)?)?;
    println!("{} blocks, m = {}", a.r, res.point.m);
    out.finish()
}

fn scale(s: ScaleArg) -> Scale {
    match s {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Full => Scale::Full,
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => io::read_config::<ScenarioConfig>(p)?,
        None => match a.family {
            FamilyArg::TwoD => ScenarioConfig::analog_2d(scale(a.scale), a.n, a.r, a.seed),
            FamilyArg::ThreeD => ScenarioConfig::analog_3d(scale(a.scale), a.n, a.r, a.seed),
        },
    };
    if a.config.is_none() || a.inference != InferenceArg::None {
        cfg.inference = match a.inference {
            InferenceArg::None => McInference::None,
            InferenceArg::Bootstrap => McInference::Bootstrap {
                wild: false,
                b_reps: a.b_reps,
            },
            InferenceArg::Wild => McInference::Bootstrap {
                wild: true,
                b_reps: a.b_reps,
            },
            InferenceArg::Plugin => McInference::Plugin,
            InferenceArg::Jackknife => McInference::Jackknife { r: a.blocks },
        };
    }
    cfg.validate()?;
    let config = json!({ "scenario": cfg, "reps": a.reps });
    let mut out = Outputs::new(&a.out, "simulate", config, Some(cfg.seed))?;
    let res = run_monte_carlo(&cfg, a.reps)?;

    let mut t = header(&["parameter", "truth", "mse", "coverage", "mean_se"]);
    for row in &res.table.rows {
        t.push(vec![
            row.parameter.clone(),
            fmt_f64(row.truth),
            fmt_f64(row.mse),
            opt_f64(row.coverage),
            opt_f64(row.mean_se),
        ])?;
    }
    out.table("metrics.csv", &t)?;

    let mut h = header(&["m", "count"]);
    for (m, c) in &res.table.m_hat_histogram {
        h.push(vec![m.to_string(), c.to_string()])?;
    }
    out.table("m_hat.csv", &h)?;
    println!(
        "{} replicates ({} failed), mean m = {}",
        res.table.replicates,
        res.table.failed,
        fmt_f64(res.table.m_hat_mean())
    );
    out.finish()
}

fn reproduce(a: ReproduceArgs) -> Result<()> {
    let config = json!({
        "table": a.table,
        "scale": match a.scale { ScaleArg::Desk => "desk", ScaleArg::Full => "full" },
        "reps": a.reps,
        "B": a.b_reps,
    });
    let mut out = Outputs::new(&a.out, "reproduce", config, Some(a.seed))?;
    let entries = reproduce_table(a.table, scale(a.scale), a.reps, a.seed, a.b_reps)?;
    let mut t = header(&["r", "n", "parameter", "mse", "coverage"]);
    for e in &entries {
        t.push(vec![
            fmt_f64(e.r),
            e.n.to_string(),
            e.parameter.clone(),
            fmt_f64(e.mse),
            opt_f64(e.coverage),
        ])?;
    }
    out.table(&format!("table{}.csv", a.table), &t)?;
    println!("{} rows written", entries.len());
    out.finish()
}
