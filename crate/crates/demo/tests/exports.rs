use expwp_demo::{convergence, field, increments};

#[test]
fn field_has_one_row_per_step() {
    let f = field("wp", 8, 16, 1.0, 3).unwrap();
    assert_eq!(f.scheme, "wagner_platen");
    assert_eq!(f.times.len(), 17);
    assert_eq!(f.values.len(), 17);
    assert!(f.values.iter().all(|r| r.len() == f.nodes.len()));
    assert!(field("heun", 8, 16, 1.0, 3).is_err());
}

#[test]
fn field_decays_without_noise() {
    let f = field("euler", 4, 32, 0.0, 1).unwrap();
    let peak = |r: &Vec<f64>| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(peak(&f.values[32]) < 1e-3 * peak(&f.values[0]));
}

#[test]
fn convergence_orders_rank_schemes() {
    let curves = convergence(4, 16, 5).unwrap();
    assert_eq!(curves.len(), 3);
    let wp = curves.iter().find(|c| c.scheme == "wagner_platen").unwrap();
    let eu = curves.iter().find(|c| c.scheme == "euler").unwrap();
    assert!(wp.order > eu.order);
    assert_eq!(wp.m, vec![4, 8, 16, 32]);
}

#[test]
fn increments_match_covariance() {
    let (q, dt, n) = (2.0, 0.5, 40_000);
    let xs = increments(q, dt, n, 9).unwrap();
    let cov = xs.chunks(2).map(|p| p[0] * p[1]).sum::<f64>() / n as f64;
    let exact = q * dt * dt / 2.0;
    assert!((cov - exact).abs() < 0.05 * exact, "{cov} vs {exact}");
}
