use xmkd_bench::{random_cost, uniform};

#[test]
fn fixtures_are_well_formed() {
    let c = random_cost(12, 4, 1);
    assert_eq!((c.rows(), c.cols()), (12, 12));
    assert!((0..12).all(|i| c.get(i, i) >= 0.0));
    assert_eq!(random_cost(12, 4, 1), c);
    assert!((uniform(7).iter().sum::<f64>() - 1.0).abs() < 1e-15);
}
