use volrank::calendar::TradingCalendar;
use volrank::io::load_panels;
use volrank::region::RegionMap;
use volrank::synth::{generate, write_universe, SynthConfig};

#[test]
fn factor_sample_covariance_converges_to_configured() {
    let u = generate(&SynthConfig {
        n_companies: 20,
        n_days: 10_000,
        factor_correlation: 0.5,
        missing_rate: 0.0,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let raw = &u.truth.raw_factor_returns;
    let l = raw.n_series();
    let n = raw.n_days() as f64;
    let means: Vec<f64> = (0..l).map(|i| raw.row(i).iter().sum::<f64>() / n).collect();
    for i in 0..l {
        for j in 0..=i {
            let s: f64 = raw
                .row(i)
                .iter()
                .zip(raw.row(j))
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum::<f64>()
                / (n - 1.0);
            let want = u.truth.factor_cov[(i, j)];
            assert!((s - want).abs() <= 0.1 * want.abs(), "({i},{j}): sample {s:e} vs {want:e}");
        }
    }
}

#[test]
fn written_universe_reads_back_identically() {
    let u = generate(&SynthConfig {
        n_companies: 30,
        n_days: 90,
        missing_rate: 0.05,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_universe(&u, dir.path()).unwrap();
    let calendar = TradingCalendar::from_dates(u.returns.calendar().days().iter().copied());
    let p = load_panels(
        &dir.path().join("returns.csv"),
        &dir.path().join("loadings.csv"),
        &dir.path().join("mcaps.csv"),
        &calendar,
    )
    .unwrap();
    assert_eq!(p.returns.ids(), u.returns.ids());
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
    assert!(same(p.returns.values(), u.returns.values()));
    for k in 0..30 {
        for m in 0..u.loadings.months().len() {
            let pm = p.loadings.month_pos(u.loadings.months()[m]).unwrap();
            for (f, factor) in u.loadings.factors().iter().enumerate() {
                let pf = p.loadings.factor_pos(&factor.name).unwrap();
                let (a, b) = (u.loadings.get(k, m, f), p.loadings.get(k, pm, pf));
                assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits), "{k} {m} {}", factor.name);
            }
            assert_eq!(u.mcaps.get(k, m), p.mcaps.get(k, p.mcaps.month_pos(u.mcaps.months()[m]).unwrap()));
        }
    }
    let regions = RegionMap::read_csv(std::fs::File::open(dir.path().join("regions.csv")).unwrap(), "regions.csv").unwrap();
    assert_eq!(regions, u.regions);
}
