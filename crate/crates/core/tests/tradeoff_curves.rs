use dgselect::tradeoff::{
    check_monotone_convex, classification_risk, discrepancy_kl, reference_problem,
    tradeoff_bruteforce, tradeoff_solver,
};

// T(Δ) on the reference problem for Δ = 0.05, 0.10, …, 0.50, computed by a
// vectorized numpy enumeration of the same 1e-3 lattice and cross-checked with
// SLSQP on the continuous problem (agreement to 1e-12).
const FROZEN_T: [f64; 10] = [
    1.7792349668486591,
    1.1582497857552088,
    0.7919339962306507,
    0.5389542593033095,
    0.35433342105142007,
    0.21793549081469055,
    0.11915750231717533,
    0.051956284054190005,
    0.012846370348821343,
    0.0,
];

fn deltas() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 20.0).collect()
}

#[test]
fn bruteforce_matches_frozen_oracle() {
    let curve = tradeoff_bruteforce(&reference_problem(), &deltas(), 1e-3).unwrap();
    for (p, want) in curve.points.iter().zip(FROZEN_T) {
        assert!(p.feasible);
        assert!(
            (p.t_value - want).abs() < 1e-12,
            "delta {}: {} vs {}",
            p.delta,
            p.t_value,
            want
        );
    }
    let report = check_monotone_convex(&curve, 2e-3, 2e-3).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn solver_tracks_bruteforce() {
    let p = reference_problem();
    let t0 = std::time::Instant::now();
    let curve = tradeoff_solver(&p, &deltas()).unwrap();
    eprintln!("solver took {:?}", t0.elapsed());
    for (pt, want) in curve.points.iter().zip(FROZEN_T) {
        let q = pt.achieving_channel.as_ref().unwrap();
        let risk = classification_risk(&p, q).unwrap();
        assert!(risk <= pt.delta + 1e-12, "risk {risk} > delta {}", pt.delta);
        assert_eq!(discrepancy_kl(&p, q).unwrap(), pt.t_value);
        eprintln!(
            "{} {} {} {:e}",
            pt.delta,
            pt.t_value,
            want,
            pt.t_value - want
        );
        assert!((pt.t_value - want).abs() < 1e-3);
        assert!(pt.t_value >= want - 1e-6);
    }
}
