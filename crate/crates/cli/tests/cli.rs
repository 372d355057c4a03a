use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aspca::io::{self, GridData, Table};
use aspca::rng::stream_rng;
use aspca::simgen::{gen_ar_covariates, gen_normal_matrix, gram_schmidt};
use aspca::{bspline_tensor_basis, AmbientSpace, SampleSet};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

const DIMS: [usize; 2] = [12, 14];
const LAMBDAS: [f64; 3] = [3.0, 2.0, 1.0];
const BETA: [f64; 2] = [1.0, -0.5];
const ALPHA: f64 = 0.7;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

/// Images built from three functions inside the quadratic spline space
/// with two interior knots, so that basis spans the truth exactly.
fn fixture(n: usize, noise_sd: f64, seed: u64) -> Fixture {
    let dir = TempDir::new().unwrap();
    let space = AmbientSpace::grid(&DIMS).unwrap();
    let basis = bspline_tensor_basis(&space, &[2, 2], &[2, 2]).unwrap();
    let raw = basis.functions().select_rows(&[6, 12, 18]);
    let family = gram_schmidt(&space, &raw).unwrap();

    let mut rng = stream_rng(seed, 1, 0);
    let mut u = gen_normal_matrix(n, 3, &mut rng);
    for (mut col, l) in u.column_iter_mut().zip(LAMBDAS) {
        col *= l.sqrt();
    }
    let z = &u * &family;
    let x = gen_ar_covariates(n, 2, 0.3, &mut rng).unwrap();
    let gamma = DVector::from_vec(vec![1.5, -1.0, 2.0]);
    let signal = &u * &gamma;
    let mut ytab = Table::new(vec!["y".into(), "trt".into()]);
    for i in 0..n {
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * noise_sd;
        let trt = i % 3 == 0;
        let y = ALPHA + BETA[0] * x[(i, 0)] + BETA[1] * x[(i, 1)] + signal[i] + if trt { 0.5 } else { 0.0 } + eps;
        ytab.push(vec![io::fmt_f64(y), if trt { "1".into() } else { "0".into() }])
            .unwrap();
    }
    let mut xtab = Table::new(vec!["x1".into(), "x2".into()]);
    for i in 0..n {
        xtab.push(vec![io::fmt_f64(x[(i, 0)]), io::fmt_f64(x[(i, 1)])]).unwrap();
    }
    let sample = SampleSet::from_matrix(z).unwrap();
    io::write_grid(
        &dir.path().join("data.hsg"),
        &GridData::from_sample(&DIMS, &sample).unwrap(),
    )
    .unwrap();
    io::write_table(&dir.path().join("y.csv"), &ytab).unwrap();
    io::write_table(&dir.path().join("x.csv"), &xtab).unwrap();
    Fixture { dir }
}

fn aspca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aspca"))
        .args(args)
        .env_remove("ASPCA_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn regression_args<'a>(f: &'a Fixture, out: &'a str) -> Vec<String> {
    vec![
        "--data".into(),
        f.arg("data.hsg"),
        "--y".into(),
        f.arg("y.csv"),
        "--x".into(),
        f.arg("x.csv"),
        "--degree".into(),
        "2".into(),
        "--knots".into(),
        "2".into(),
        "--out".into(),
        out.into(),
    ]
}

fn run_owned(cmd: &str, rest: &[String], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = vec![cmd];
    args.extend(rest.iter().map(|s| s.as_str()));
    args.extend_from_slice(extra);
    aspca(&args)
}

fn coefficients(dir: &Path) -> Table {
    io::read_table(&dir.join("coefficients.csv")).unwrap()
}

fn estimate(t: &Table, term: &str) -> f64 {
    let i = t.rows.iter().position(|r| r[0] == term).unwrap();
    t.rows[i][1].parse().unwrap()
}

#[test]
fn fit_writes_outputs_and_manifest() {
    let f = fixture(200, 1.0, 1);
    let out = f.arg("fit");
    let o = aspca(&[
        "fit",
        "--data",
        &f.arg("data.hsg"),
        "--degree",
        "2",
        "--knots",
        "2",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eig = io::read_table(&f.path("fit/eigenvalues.csv")).unwrap();
    let lambdas = eig.numeric_column("eigenvalue").unwrap();
    assert!(lambdas.len() >= 3);
    assert!(lambdas.windows(2).all(|w| w[0] >= w[1]));
    let phi = io::read_grid(&f.path("fit/eigenfunctions.hsg")).unwrap();
    assert_eq!(&phi.dims[1..], &DIMS);
    assert_eq!(phi.dims[0], lambdas.len());
    let manifest = io::read_manifest(&f.path("fit/manifest.json")).unwrap();
    assert_eq!(manifest.command, "fit");
    for name in ["eigenvalues.csv", "eigenfunctions.hsg", "mean.hsg"] {
        let bytes = std::fs::read(f.path("fit").join(name)).unwrap();
        assert_eq!(manifest.checksums[name], io::sha256_hex(&bytes));
    }
}

#[test]
fn usage_and_input_errors_exit_2() {
    let f = fixture(60, 1.0, 2);
    assert_eq!(code(&aspca(&["fit", "--bogus"])), 2);
    assert_eq!(code(&aspca(&[])), 2);
    let missing = f.arg("nope.hsg");
    assert_eq!(code(&aspca(&["fit", "--data", &missing, "--out", &f.arg("o")])), 2);

    std::fs::write(f.path("bad.hsg"), b"XXXX\x01\x00").unwrap();
    let o = aspca(&["fit", "--data", &f.arg("bad.hsg"), "--out", &f.arg("o")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte 0"));

    let o = aspca(&[
        "diagnose",
        "--data",
        &f.arg("data.hsg"),
        "--alpha",
        "0.2",
        "--out",
        &f.arg("o"),
    ]);
    assert_eq!(code(&o), 2);

    let o = aspca(&[
        "fit",
        "--data",
        &f.arg("data.hsg"),
        "--basis",
        "tri",
        "--out",
        &f.arg("o"),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn jackknife_with_too_few_blocks_exits_2() {
    let f = fixture(120, 1.0, 3);
    let args = regression_args(&f, &f.arg("jk"));
    // p = 1 + 2 + 3 = 6 coefficients, so r = 7 is not enough
    let o = run_owned("jackknife", &args, &["--components", "3", "--r", "7"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("(A4)"));
    let o = run_owned("jackknife", &args, &["--components", "3", "--r", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn numerical_failures_exit_3() {
    let f = fixture(100, 1.0, 4);
    // eigenvalues that cannot reach tau of the declared total
    let mut t = Table::new(vec!["eigenvalue".into()]);
    for l in ["2.0", "1.0"] {
        t.push(vec![l.into()]).unwrap();
    }
    io::write_table(&f.path("eig.csv"), &t).unwrap();
    let o = aspca(&[
        "pve",
        "--eigenvalues",
        &f.arg("eig.csv"),
        "--total-variance",
        "10",
        "--out",
        &f.arg("p"),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    // a covariate duplicated in the design
    let mut xtab = Table::new(vec!["x1".into(), "x1_copy".into()]);
    let x = io::read_table(&f.path("x.csv")).unwrap().numeric_column("x1").unwrap();
    for v in &x {
        xtab.push(vec![io::fmt_f64(*v), io::fmt_f64(*v)]).unwrap();
    }
    io::write_table(&f.path("dup.csv"), &xtab).unwrap();
    let mut args = regression_args(&f, &f.arg("r"));
    args[5] = f.arg("dup.csv");
    let o = run_owned("regress", &args, &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("(A4)"));
}

#[test]
fn pve_from_eigenvalue_table() {
    let f = fixture(50, 1.0, 5);
    let mut t = Table::new(vec!["eigenvalue".into()]);
    for l in ["5", "3", "1.5", "0.5"] {
        t.push(vec![l.into()]).unwrap();
    }
    io::write_table(&f.path("eig.csv"), &t).unwrap();
    let o = aspca(&[
        "pve",
        "--eigenvalues",
        &f.arg("eig.csv"),
        "--tau",
        "0.9",
        "--out",
        &f.arg("p"),
    ]);
    assert_eq!(code(&o), 0);
    let p = io::read_table(&f.path("p/pve.csv")).unwrap();
    let selected: Vec<&str> = p.rows.iter().map(|r| r[3].as_str()).collect();
    // cumulative fractions 0.5, 0.8, 0.95, 1.0 against the 0.9 threshold
    assert_eq!(selected, ["true", "true", "true", "false"]);
}

#[test]
fn noiseless_regression_recovers_coefficients() {
    let f = fixture(80, 0.0, 6);
    // drop the treatment effect by rebuilding y without it
    let y = io::read_table(&f.path("y.csv")).unwrap();
    let mut clean = Table::new(vec!["y".into()]);
    for row in &y.rows {
        let v: f64 = row[0].parse().unwrap();
        let shift = if row[1] == "1" { 0.5 } else { 0.0 };
        clean.push(vec![io::fmt_f64(v - shift)]).unwrap();
    }
    io::write_table(&f.path("y.csv"), &clean).unwrap();
    let out = f.arg("r");
    let o = run_owned("regress", &regression_args(&f, &out), &["--components", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = coefficients(&f.path("r"));
    assert!((estimate(&c, "alpha") - ALPHA).abs() < 1e-8);
    assert!((estimate(&c, "beta1") - BETA[0]).abs() < 1e-8);
    assert!((estimate(&c, "beta2") - BETA[1]).abs() < 1e-8);
}

#[test]
fn treatment_gives_two_coefficient_blocks() {
    let f = fixture(300, 0.5, 16);
    let out = f.arg("r");
    let o = run_owned(
        "regress",
        &regression_args(&f, &out),
        &["--components", "3", "--treatment", "trt"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = coefficients(&f.path("r"));
    assert_eq!(c.rows.len(), 2 * (1 + 2 + 3));
    let modifiers: Vec<&String> = c.rows.iter().map(|r| &r[0]).filter(|t| t.starts_with("trt:")).collect();
    assert_eq!(modifiers.len(), 6);
    let shift = estimate(&c, "trt:alpha");
    let lower = c.rows.iter().find(|r| r[0] == "trt:alpha").unwrap()[3]
        .parse::<f64>()
        .unwrap();
    let upper = c.rows.iter().find(|r| r[0] == "trt:alpha").unwrap()[4]
        .parse::<f64>()
        .unwrap();
    assert!(lower < shift && shift < upper);
    assert!(lower < 0.5 && 0.5 < upper, "[{lower}, {upper}]");

    let o = run_owned(
        "regress",
        &regression_args(&f, &out),
        &["--components", "3", "--treatment", "y"],
    );
    assert_eq!(code(&o), 2);
}

fn read_dir_bytes(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let f = fixture(150, 1.0, 8);
    let mut dirs = Vec::new();
    for threads in ["1", "3"] {
        let out = f.arg(&format!("b{threads}"));
        let o = run_owned(
            "bootstrap",
            &regression_args(&f, &out),
            &["--B", "60", "--seed", "11", "--threads", threads],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dirs.push(PathBuf::from(out));
    }
    assert_eq!(
        read_dir_bytes(&dirs[0], &["coefficients.csv"]),
        read_dir_bytes(&dirs[1], &["coefficients.csv"])
    );
    let m0 = io::read_manifest(&dirs[0].join("manifest.json")).unwrap();
    let m1 = io::read_manifest(&dirs[1].join("manifest.json")).unwrap();
    assert_eq!(m0.config, m1.config);
    assert_eq!(m0.checksums, m1.checksums);

    let mut sims = Vec::new();
    for threads in ["1", "4"] {
        let out = f.arg(&format!("s{threads}"));
        let o = aspca(&[
            "simulate",
            "--n",
            "100",
            "--reps",
            "6",
            "--seed",
            "3",
            "--inference",
            "plugin",
            "--threads",
            threads,
            "--out",
            &out,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        sims.push(PathBuf::from(out));
    }
    assert_eq!(
        read_dir_bytes(&sims[0], &["metrics.csv", "m_hat.csv"]),
        read_dir_bytes(&sims[1], &["metrics.csv", "m_hat.csv"])
    );
}

#[test]
fn diagnose_reports_and_auto_knots_refines() {
    let f = fixture(200, 1.0, 9);
    let o = aspca(&[
        "diagnose",
        "--data",
        &f.arg("data.hsg"),
        "--degree",
        "2",
        "--knots",
        "2",
        "--out",
        &f.arg("d"),
    ]);
    assert_eq!(code(&o), 0);
    let d = io::read_table(&f.path("d/diagnostic.csv")).unwrap();
    assert_eq!(d.rows[0][8], "false");

    // linear splines without interior knots miss most of the signal
    let o = aspca(&[
        "diagnose",
        "--data",
        &f.arg("data.hsg"),
        "--degree",
        "1",
        "--knots",
        "0",
        "--out",
        &f.arg("d0"),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(io::read_table(&f.path("d0/diagnostic.csv")).unwrap().rows[0][8], "true");

    let o = aspca(&[
        "diagnose",
        "--data",
        &f.arg("data.hsg"),
        "--degree",
        "2",
        "--knots",
        "0",
        "--auto-knots",
        "--out",
        &f.arg("d1"),
    ]);
    assert_eq!(code(&o), 0);
    let d = io::read_table(&f.path("d1/diagnostic.csv")).unwrap();
    let knots: usize = d.rows[0][1].parse().unwrap();
    assert!(knots > 0);
    assert_eq!(d.rows[0][8], "false");
}

#[test]
fn masked_fit_zeroes_outside_cells() {
    let f = fixture(100, 1.0, 10);
    let mut mask = vec![1.0; DIMS[0] * DIMS[1]];
    for v in mask.iter_mut().take(DIMS[1] * 2) {
        *v = 0.0;
    }
    io::write_grid(&f.path("mask.hsg"), &GridData::new(DIMS.to_vec(), mask).unwrap()).unwrap();
    let o = aspca(&[
        "fit",
        "--data",
        &f.arg("data.hsg"),
        "--mask",
        &f.arg("mask.hsg"),
        "--degree",
        "2",
        "--knots",
        "2",
        "--out",
        &f.arg("m"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let phi = io::read_grid(&f.path("m/eigenfunctions.hsg")).unwrap();
    let per = DIMS[0] * DIMS[1];
    let phi = DMatrix::from_row_slice(phi.dims[0], per, &phi.values);
    for j in 0..phi.nrows() {
        assert!(phi.row(j).iter().take(DIMS[1] * 2).all(|v| *v == 0.0));
    }
}
