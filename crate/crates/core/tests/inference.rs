mod common;

use aspca::inference::{
    block_jackknife, bootstrap_eigs, bootstrap_theta, fit_pipeline, fit_pipeline_from_model, gen_weights,
    jackknife_blocks, percentile_ci, BootstrapKind, BootstrapSpec, ComponentRule, JackknifeSpec, ResponseData,
};
use aspca::pca::{eigenvalue_se, fit_aspca, fit_in_frame, Frame};
use aspca::simgen::{gen_ar_covariates, gen_kl_sample, gen_response, make_family, FamilyKind, TrueFamily};
use aspca::{AmbientSpace, BasisSet, Error, SampleSet, DEFAULT_DROP_TOL};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

struct Fixture {
    space: AmbientSpace,
    family: TrueFamily,
    sample: SampleSet,
    data: ResponseData,
}

fn fixture(n: usize, lambdas: &[f64], noise_sd: f64, seed: u64) -> Fixture {
    let space = AmbientSpace::grid(&[20, 24]).unwrap();
    let family = make_family(&space, FamilyKind::Synthetic2d, lambdas.len()).unwrap();
    let mut r = rng(seed);
    let sample = gen_kl_sample(&family, lambdas, n, &mut r).unwrap();
    let x = gen_ar_covariates(n, 2, 0.5, &mut r).unwrap();
    let coefs: Vec<f64> = (0..lambdas.len()).map(|j| 1.0 + 0.5 * j as f64).collect();
    let gamma = family.combination(&coefs).unwrap();
    let y = gen_response(&space, &x, &sample, &gamma, 1.0, &[1.0, -1.0], noise_sd, &mut r).unwrap();
    Fixture {
        space,
        family,
        sample,
        data: ResponseData::new(y, x),
    }
}

fn spanning(f: &Fixture) -> BasisSet {
    BasisSet::raw(f.family.functions().clone())
}

#[test]
fn percentile_examples() {
    let draws = DMatrix::from_fn(100, 1, |i, _| (i + 1) as f64);
    let ci = percentile_ci(&draws, 0.95).unwrap();
    assert!((ci[0].0 - 3.475).abs() < 1e-12 && (ci[0].1 - 97.525).abs() < 1e-12);
    let flat = DMatrix::from_element(10, 1, 2.5);
    assert_eq!(percentile_ci(&flat, 0.9).unwrap()[0], (2.5, 2.5));
    let sym = DMatrix::from_fn(41, 1, |i, _| i as f64 - 20.0);
    let (lo, hi) = percentile_ci(&sym, 0.8).unwrap()[0];
    assert!((lo + hi).abs() < 1e-12);
    assert!(matches!(percentile_ci(&flat, 1.0), Err(Error::Config(_))));
}

#[test]
fn wild_weights_have_unit_mean_and_variance() {
    let spec = BootstrapSpec::new(BootstrapKind::Wild, 1, 9, 0.95).unwrap();
    let w = gen_weights(&spec, 1_000_000, 0);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((mean - 1.0).abs() < 1e-12);
    assert!((var - 1.0).abs() < 0.01, "{var}");
    assert!(w.iter().all(|x| *x > 0.0));
}

#[test]
fn noiseless_bootstrap_is_degenerate() {
    let f = fixture(300, &[9.0, 1.0], 0.0, 1);
    let spec = BootstrapSpec::new(BootstrapKind::Nonparametric, 50, 3, 0.95).unwrap();
    let res = bootstrap_theta(
        &f.space,
        &spanning(&f),
        &f.sample,
        &f.data,
        ComponentRule::Fixed(2),
        &spec,
    )
    .unwrap();
    let truth = [1.0, 1.0, -1.0];
    for (k, t) in truth.iter().enumerate() {
        assert!(res
            .draws
            .column(k)
            .iter()
            .all(|d| (d - res.point.theta[k]).abs() < 1e-6));
        assert!(res.ci.lower[k] - 1e-6 <= *t && *t <= res.ci.upper[k] + 1e-6);
    }
}

/// Replicates run on reduced coordinates; each must match a plain refit
/// on the resampled observations.
#[test]
fn bootstrap_replicates_match_naive_refits() {
    let f = fixture(120, &[3.0, 2.0, 1.0], 1.0, 2);
    let space = &f.space;
    let basis = aspca::bspline_tensor_basis(space, &[3, 3], &[4, 4]).unwrap();
    let frame = Frame::new(space, &basis, DEFAULT_DROP_TOL).unwrap();
    for kind in [BootstrapKind::Nonparametric, BootstrapKind::Wild] {
        let spec = BootstrapSpec::new(kind, 6, 21, 0.9).unwrap();
        let res = bootstrap_theta(space, &basis, &f.sample, &f.data, ComponentRule::Pve(0.95), &spec).unwrap();
        let m = res.point.m;
        for b in 0..6u64 {
            let w = gen_weights(&spec, 120, b);
            let theta = match kind {
                BootstrapKind::Nonparametric => {
                    let idx: Vec<usize> = w
                        .iter()
                        .enumerate()
                        .flat_map(|(i, c)| std::iter::repeat_n(i, *c as usize))
                        .collect();
                    let sample = f.sample.select(&idx);
                    let data = ResponseData::new(
                        DVector::from_iterator(idx.len(), idx.iter().map(|&i| f.data.y[i])),
                        f.data.x.select_rows(&idx),
                    );
                    let mut model = fit_in_frame(space, frame.clone(), &sample).unwrap();
                    model.align_signs_frame(res.point.model.eigvecs());
                    fit_pipeline_from_model(space, model, &sample, &data, ComponentRule::Fixed(m))
                        .unwrap()
                        .theta
                }
                BootstrapKind::Wild => {
                    // weighted least squares on weighted-covariance eigenfunctions, built densely
                    let coords = frame.coordinates(f.sample.matrix());
                    let (_, omega) = aspca::pca::subspace_eigen(&coords, Some(&w));
                    let mut omega = omega.rows(0, m).into_owned();
                    for j in 0..m {
                        if omega.row(j).dot(&res.point.model.eigvecs().row(j)) < 0.0 {
                            omega.row_mut(j).neg_mut();
                        }
                    }
                    let scores = &coords * omega.transpose();
                    let u = aspca::hspcr::design_matrix(&f.data.x, &scores, None);
                    let wd = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
                    let a = u.transpose() * &wd * &u;
                    a.lu().solve(&(u.transpose() * &wd * &f.data.y)).unwrap()
                }
            };
            for k in 0..theta.len() {
                let got = res.draws[(b as usize, k)];
                assert!(
                    (got - theta[k]).abs() < 1e-7 * (1.0 + theta[k].abs()),
                    "{kind:?} b={b} k={k}: {got} vs {}",
                    theta[k]
                );
            }
        }
    }
}

#[test]
fn jackknife_replicates_match_naive_refits() {
    let f = fixture(103, &[3.0, 2.0], 1.0, 3);
    let basis = spanning(&f);
    let spec = JackknifeSpec { r: 10, level: 0.95 };
    let res = block_jackknife(&f.space, &basis, &f.sample, &f.data, ComponentRule::Fixed(2), &spec).unwrap();
    let blocks = jackknife_blocks(103, 10).unwrap();
    for (l, block) in blocks.iter().enumerate() {
        let keep: Vec<usize> = (0..100).filter(|i| !block.contains(i)).collect();
        let sample = f.sample.select(&keep);
        let data = ResponseData::new(
            DVector::from_iterator(keep.len(), keep.iter().map(|&i| f.data.y[i])),
            f.data.x.select_rows(&keep),
        );
        let mut model = fit_aspca(&f.space, &basis, &sample, DEFAULT_DROP_TOL).unwrap();
        model.align_signs_frame(res.point.model.eigvecs());
        let theta = fit_pipeline_from_model(&f.space, model, &sample, &data, ComponentRule::Fixed(2))
            .unwrap()
            .theta;
        for k in 0..theta.len() {
            assert!((res.replicates[(l, k)] - theta[k]).abs() < 1e-8);
        }
    }
    let r = 10.0;
    let mean = res.replicates.row_mean();
    for k in 0..res.variance.nrows() {
        let v = (r - 1.0) / r * (0..10).map(|l| (res.replicates[(l, k)] - mean[k]).powi(2)).sum::<f64>();
        assert!((res.variance[(k, k)] - v).abs() < 1e-12 * (1.0 + v));
    }
}

#[test]
fn jackknife_errors_and_noiseless_case() {
    let f = fixture(60, &[9.0, 1.0], 0.0, 4);
    let basis = spanning(&f);
    let rule = ComponentRule::Fixed(2);
    // p = 5 coefficients
    let e = block_jackknife(
        &f.space,
        &basis,
        &f.sample,
        &f.data,
        rule,
        &JackknifeSpec { r: 6, level: 0.95 },
    )
    .unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    let e = block_jackknife(
        &f.space,
        &basis,
        &f.sample,
        &f.data,
        rule,
        &JackknifeSpec { r: 40, level: 0.95 },
    )
    .unwrap_err();
    assert!(matches!(e, Error::InsufficientData(_)));
    let res = block_jackknife(
        &f.space,
        &basis,
        &f.sample,
        &f.data,
        rule,
        &JackknifeSpec { r: 10, level: 0.95 },
    )
    .unwrap();
    for k in 0..3 {
        assert!(res.variance[(k, k)] < 1e-16);
    }
}

#[test]
fn cross_method_standard_errors_agree() {
    let f = fixture(2000, &[3.0, 2.0, 1.0], 1.0, 5);
    let basis = spanning(&f);
    let rule = ComponentRule::Fixed(3);
    let np = bootstrap_theta(
        &f.space,
        &basis,
        &f.sample,
        &f.data,
        rule,
        &BootstrapSpec::new(BootstrapKind::Nonparametric, 400, 1, 0.95).unwrap(),
    )
    .unwrap();
    let wild = bootstrap_theta(
        &f.space,
        &basis,
        &f.sample,
        &f.data,
        rule,
        &BootstrapSpec::new(BootstrapKind::Wild, 400, 2, 0.95).unwrap(),
    )
    .unwrap();
    let jk = block_jackknife(
        &f.space,
        &basis,
        &f.sample,
        &f.data,
        rule,
        &JackknifeSpec { r: 50, level: 0.95 },
    )
    .unwrap();
    for k in 1..3 {
        let (a, b, c) = (np.ci.se[k], wild.ci.se[k], jk.ci.se[k]);
        assert!((a / b - 1.0).abs() < 0.2, "wild vs nonparametric: {a} {b}");
        assert!((c / a - 1.0).abs() < 0.3, "jackknife vs bootstrap: {c} {a}");
    }
}

#[test]
fn eigenvalue_bootstrap() {
    let space = AmbientSpace::grid(&[4, 4]).unwrap();
    let constant = SampleSet::from_matrix(DMatrix::from_element(5, 16, 1.0)).unwrap();
    let spec = BootstrapSpec::new(BootstrapKind::Nonparametric, 20, 1, 0.95).unwrap();
    let eb = bootstrap_eigs(&space, &identity_basis(16), &constant, &spec).unwrap();
    assert!(eb.draws.iter().all(|x| *x == 0.0));

    let f = fixture(2000, &[2.0, 1.0], 1.0, 6);
    let basis = spanning(&f);
    let eb = bootstrap_eigs(
        &f.space,
        &basis,
        &f.sample,
        &BootstrapSpec::new(BootstrapKind::Nonparametric, 400, 2, 0.95).unwrap(),
    )
    .unwrap();
    let model = fit_aspca(&f.space, &basis, &f.sample, DEFAULT_DROP_TOL).unwrap();
    let se = eigenvalue_se(&model, &f.space, &f.sample).unwrap();
    assert!((eb.ci.se[0] / se[0] - 1.0).abs() < 0.25);

    let mut covered = 0;
    for seed in 0..100u64 {
        let g = fixture(1000, &[2.0, 1.0], 1.0, 500 + seed);
        let spec = BootstrapSpec::new(BootstrapKind::Nonparametric, 200, seed, 0.95).unwrap();
        let eb = bootstrap_eigs(&g.space, &spanning(&g), &g.sample, &spec).unwrap();
        if eb.ci.lower[0] <= 2.0 && 2.0 <= eb.ci.upper[0] {
            covered += 1;
        }
    }
    assert!((88..=100).contains(&covered), "{covered}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantiles_are_monotone(
        raw in proptest::collection::vec(-100.0f64..100.0, 2..60),
        l1 in 0.01f64..0.99, l2 in 0.01f64..0.99,
    ) {
        let draws = DMatrix::from_column_slice(raw.len(), 1, &raw);
        let (lo_level, hi_level) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
        let narrow = percentile_ci(&draws, lo_level).unwrap()[0];
        let wide = percentile_ci(&draws, hi_level).unwrap()[0];
        prop_assert!(narrow.0 <= narrow.1);
        prop_assert!(wide.0 <= narrow.0 && narrow.1 <= wide.1);
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= wide.0 && wide.1 <= max);
    }

    #[test]
    fn jackknife_blocks_partition(n in 2usize..400, r in 2usize..40) {
        match jackknife_blocks(n, r) {
            Ok(blocks) => {
                let k = n / r;
                prop_assert_eq!(blocks.len(), r);
                let mut seen = vec![0usize; r * k];
                for (l, b) in blocks.iter().enumerate() {
                    prop_assert_eq!(b.len(), k);
                    for (t, &i) in b.iter().enumerate() {
                        prop_assert_eq!(i, l + t * r);
                        seen[i] += 1;
                    }
                }
                prop_assert!(seen.iter().all(|c| *c == 1));
            }
            Err(Error::InsufficientData(_)) => prop_assert!(n < 2 * r),
            Err(e) => prop_assert!(false, "unexpected {}", e),
        }
    }

    #[test]
    fn weight_laws(seed in any::<u64>(), n in 1usize..300, rep in 0u64..1000) {
        let np = BootstrapSpec::new(BootstrapKind::Nonparametric, 1, seed, 0.95).unwrap();
        let w = gen_weights(&np, n, rep);
        prop_assert!(w.iter().all(|x| x.fract() == 0.0 && *x >= 0.0));
        prop_assert_eq!(w.iter().sum::<f64>(), n as f64);
        let wild = BootstrapSpec::new(BootstrapKind::Wild, 1, seed, 0.95).unwrap();
        let w = gen_weights(&wild, n, rep);
        prop_assert!(w.iter().all(|x| *x > 0.0));
        prop_assert!((w.iter().sum::<f64>() / n as f64 - 1.0).abs() < 1e-12);
        prop_assert_eq!(gen_weights(&wild, n, rep), w);
    }
}

#[test]
fn pipeline_rejects_too_many_components() {
    let f = fixture(50, &[2.0, 1.0], 1.0, 7);
    let e = fit_pipeline(&f.space, &spanning(&f), &f.sample, &f.data, ComponentRule::Fixed(3)).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}
