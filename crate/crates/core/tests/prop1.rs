use fedlp::prop1::{verify_prop1_with, GradientDistribution};
use fedlp::verify_prop1;

#[test]
fn error_shrinks_with_trials() {
    let seeds = 0..5u64;
    let mean_err = |trials: u64| -> (f64, f64) {
        let reports: Vec<_> = seeds.clone().map(|s| verify_prop1(5, 0.3, trials, s).unwrap()).collect();
        let n = reports.len() as f64;
        (
            reports.iter().map(|r| r.abs_error).sum::<f64>() / n,
            reports.iter().map(|r| r.std_error).sum::<f64>() / n,
        )
    };
    let (err_small, se_small) = mean_err(10_000);
    let (err_large, se_large) = mean_err(1_000_000);
    assert!(err_large < err_small, "{err_large} !< {err_small}");
    // standard error scales as 1/sqrt(trials): a factor of 10 here
    let ratio = se_small / se_large;
    assert!((8.0..12.0).contains(&ratio), "{ratio}");
}

#[test]
fn holds_for_other_gradient_laws() {
    for dist in [
        GradientDistribution::Uniform { low: -1.0, high: 3.0 },
        GradientDistribution::Constant(2.5),
    ] {
        let r = verify_prop1_with(4, 0.35, 200_000, 3, dist).unwrap();
        assert!(r.within_three_sigma(), "{dist:?}: {r:?}");
    }
}

#[test]
fn chunking_does_not_depend_on_thread_count() {
    let a = verify_prop1(3, 0.6, 300_000, 8).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| verify_prop1(3, 0.6, 300_000, 8).unwrap());
    assert_eq!(a, b);
}
