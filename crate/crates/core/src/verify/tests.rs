use super::*;
use crate::numerics::normal_pdf;
use crate::quantizer::initial_breakpoints;

fn random_spec(rng: &mut Rng, t: usize) -> QuantizerSpec {
    let (amps, b) = random_quantizer(rng, t);
    QuantizerSpec::new(amps, b, 10.0).unwrap()
}

#[test]
fn mixture_pdf_examples() {
    let one = MixtureSpec::new(vec![1.0], vec![0.0], 1.0).unwrap();
    assert!((mixture_pdf(&one, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
    let two = MixtureSpec::new(vec![0.5, 0.5], vec![-1.0, 1.0], 0.3).unwrap();
    assert!((mixture_pdf(&two, 0.0) - normal_pdf(1.0, 0.0, 0.3).unwrap()).abs() < 1e-16);
    let three = MixtureSpec::new(vec![0.2, 0.5, 0.3], vec![-1.0, 0.2, 1.0], 0.04).unwrap();
    let q = integrate(|x| mixture_pdf(&three, x), -12.0, 12.0, 1e-12).unwrap();
    assert!((q.value - 1.0).abs() < 1e-9);
    for x in [-3.0, -0.4, 0.0, 0.9, 2.5] {
        assert!((three.log_pdf(x) - mixture_pdf(&three, x).ln()).abs() < 1e-12);
    }
    assert!(MixtureSpec::new(vec![0.5, 0.4], vec![0.0, 1.0], 1.0).is_err());
    assert!(MixtureSpec::new(vec![1.0], vec![0.0], 0.0).is_err());
}

#[test]
fn quadrature_kl_matches_gaussian_closed_form() {
    for (m, v) in [(0.0, 1.0), (1.0, 1.0), (-0.7, 0.0025), (0.3, 0.5), (1.0, 0.81)] {
        let spec = MixtureSpec::new(vec![1.0], vec![m], v).unwrap();
        let exact = 0.5 * (m * m + v - 1.0 - f64::ln(v));
        let q = true_kl_quadrature(&spec, QUADRATURE_TOL).unwrap();
        assert!((q - exact).abs() < 1e-9, "m={m} v={v}: {q} vs {exact}");
    }
}

#[test]
fn quadrature_kl_agrees_with_monte_carlo() {
    let spec = MixtureSpec::new(vec![0.5, 0.5], vec![-1.0, 1.0], 1.0).unwrap();
    let q = true_kl_quadrature(&spec, QUADRATURE_TOL).unwrap();
    let (mc, se) = true_kl_monte_carlo(&spec, 10_000_000, &mut Rng::new(91)).unwrap();
    assert!((q - mc).abs() < 3.0 * se, "{q} vs {mc} ± {se}");
    assert!(q > 0.0 && q < 0.5);
}

#[test]
fn symmetric_two_level_margin() {
    let spec = QuantizerSpec::new(vec![1.0], vec![0.0], 10.0).unwrap();
    let check = upper_bound_check(&[0.0], &[0.8], &spec, 1.0, KlVariant::Tight).unwrap();
    assert!((check.bound[0] - 0.5).abs() < 1e-15);
    assert!(check.passed && check.margins[0] >= 0.0);
    let check = upper_bound_check(&[0.0], &[0.8], &spec, 1.0, KlVariant::Literal).unwrap();
    assert!((check.bound[0] - 1.0).abs() < 1e-15);
}

#[test]
fn degenerate_pmf_margin() {
    let spec = QuantizerSpec::new(vec![1.0], vec![0.0], 10.0).unwrap();
    let check = upper_bound_check(&[-60.0], &[0.1], &spec, 1.0, KlVariant::Tight).unwrap();
    assert!((check.bound[0] - (2f64.ln() + 0.5)).abs() < 1e-12);
    assert!(check.passed);
}

#[test]
fn random_upper_bound_configs() {
    let mut rng = Rng::new(92);
    let mut worst = f64::INFINITY;
    for _ in 0..150 {
        let t = [1, 3, 7, 15][rng.below(4)];
        let spec = random_spec(&mut rng, t);
        let mu: Vec<f64> = (0..2).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let theta: Vec<f64> = (0..2).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        let s2 = rng.uniform_range(0.0025, 0.9);
        for variant in [KlVariant::Tight, KlVariant::Literal] {
            let c = upper_bound_check(&mu, &theta, &spec, s2, variant).unwrap();
            assert!(c.passed, "{c:?}");
            assert!(c.true_kl.iter().all(|&k| k >= -1e-10));
            worst = worst.min(c.worst_margin());
        }
    }
    assert!(worst >= -CHECK_SLACK);
}

#[test]
fn gap_constants_hand_values() {
    let pmf = QuantizedPmf::from_rows(&[vec![0.5, 0.5]]).unwrap();
    let k = gap_bound_constants(&pmf, &[-1.0, 1.0], 0.25).unwrap();
    let expect = 2.0 * (-2.0f64 / 3.0).exp();
    assert!((k.c_it[0][0] - expect).abs() < 1e-15 && (k.c_it[0][1] - expect).abs() < 1e-15);
    assert!((expect - 1.0269).abs() < 1e-4);
    assert!((k.c0 - expect.ln().abs()).abs() < 1e-15);
    // (1 + 1.5 + 4/3)² / (0.5 / 0.75)
    let eps = (1.0 + 1.5 + 4.0 / 3.0f64).powi(2) / (2.0 / 3.0);
    assert!((k.eps - eps).abs() < 1e-12);
    assert_eq!(k.delta, 1.0 / std::f64::consts::E);
    assert!((k.c - (k.c0 + eps.ln() + 1.0)).abs() < 1e-14);
    assert!((k.bound - (k.c + 2.0 * k.delta)).abs() < 1e-14);
    assert_eq!(k.skipped, 0);

    assert!(matches!(gap_bound_constants(&pmf, &[-1.0, 1.0], 1.0), Err(Error::OutOfDomain(_))));
    assert!(matches!(gap_bound_constants(&pmf, &[-1.0, 1.0], 1.5), Err(Error::OutOfDomain(_))));

    let zero = QuantizedPmf::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let k = gap_bound_constants(&zero, &[-1.0, 1.0], 0.25).unwrap();
    assert_eq!(k.skipped, 1);
    assert!(k.c_it[0][1].is_nan() && k.bound >= 0.0);
}

#[test]
fn gap_bound_holds_and_is_additive() {
    let mut rng = Rng::new(93);
    for _ in 0..60 {
        let t = [1, 3, 7, 15][rng.below(4)];
        let spec = QuantizerSpec::new(vec![1.0; t], initial_breakpoints(t), 10.0).unwrap();
        let mu = [rng.uniform_range(-2.0, 2.0)];
        let theta = [rng.uniform_range(0.1, 2.0)];
        let s2 = rng.uniform_range(0.0025, 0.9);
        let single = gap_bound_check(&mu, &theta, &spec, s2, KlVariant::Tight).unwrap();
        assert!(single.holds && single.constants.bound >= 0.0);
        let double = gap_bound_check(&[mu[0]; 2], &[theta[0]; 2], &spec, s2, KlVariant::Tight).unwrap();
        assert_eq!(double.discrepancy, 2.0 * single.discrepancy);
        assert_eq!(double.bound, 2.0 * single.bound);
        let lit = gap_bound_check(&mu, &theta, &spec, s2, KlVariant::Literal).unwrap();
        assert!(lit.holds);
    }
}

#[test]
fn gap_bound_at_small_noise() {
    let spec = QuantizerSpec::new(vec![1.0; 3], initial_breakpoints(3), 10.0).unwrap();
    for s in [0.05f64, 0.1, 0.95] {
        let c = gap_bound_check(&[0.2, -0.9], &[0.4, 1.1], &spec, s * s, KlVariant::Tight).unwrap();
        assert!(c.holds, "sigma {s}: {c:?}");
    }
}

#[test]
fn certification_report() {
    let both = [KlVariant::Tight, KlVariant::Literal];
    let report = certify(&edge_corpus(), &both);
    assert!(report.passed, "{report:#?}");
    assert_eq!(report.out_of_domain, 0);
    assert!(report.worst_upper_margin >= -CHECK_SLACK && report.worst_gap_slack >= -CHECK_SLACK);

    let mut rng = Rng::new(94);
    let cases: Vec<CertCase> = (0..20).map(|i| random_case(&mut rng, format!("r{i}"))).collect();
    assert!(certify(&cases, &both).passed);

    let outside: Vec<CertCase> = edge_corpus().into_iter().map(|c| c.with_sigma2(1.5)).collect();
    let report = certify(&outside, &[KlVariant::Tight]);
    assert!(report.passed);
    assert_eq!(report.out_of_domain, outside.len());
    assert!(report.outcomes.iter().all(|o| o.upper.len() == 1 && !o.true_kl.is_empty()));
}
