use stgnpp::synthgen::*;

/// Homogeneous process with durations short enough that merging never
/// changes the arrival gaps measurably.
fn poisson_truth(n: usize, rate: f64) -> GroundTruthIntensity {
    let mut gt = GroundTruthIntensity::homogeneous(n, rate);
    gt.durations = DurationModel {
        log_mean: 0.001f64.ln(),
        log_sd: 0.0,
        peak_multiplier: 1.0,
    };
    gt
}

fn gaps_minutes(events: &[CongestionEvent]) -> Vec<f64> {
    events.windows(2).map(|w| w[1].t_occ - w[0].t_occ).collect()
}

#[test]
fn mean_gap_matches_rate() {
    let g = gen_graph(1, 0.0, 0).unwrap();
    let ev = simulate_events(&g, &poisson_truth(1, 2.0), 1000.0, 17).unwrap();
    let gaps = gaps_minutes(&ev[0]);
    assert!(gaps.len() >= 1000);
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!((mean - 30.0).abs() / 30.0 < 0.03, "mean gap {mean}");
}

#[test]
fn gaps_pass_ks_against_exponential() {
    let g = gen_graph(1, 0.0, 0).unwrap();
    let ev = simulate_events(&g, &poisson_truth(1, 2.0), 1000.0, 23).unwrap();
    let mut gaps: Vec<f64> = gaps_minutes(&ev[0]).iter().map(|m| m / 60.0).collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    let d = gaps
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-2.0 * x).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // Asymptotic critical value of the one-sample KS statistic at alpha = 0.01.
    let critical = 1.628 / n.sqrt();
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn counts_in_disjoint_intervals_are_uncorrelated() {
    let g = gen_graph(1, 0.0, 0).unwrap();
    let hours = 10_000usize;
    let ev = simulate_events(&g, &poisson_truth(1, 2.0), hours as f64, 5).unwrap();
    let mut counts = vec![0.0; hours];
    for e in &ev[0] {
        counts[(e.t_occ_hours() as usize).min(hours - 1)] += 1.0;
    }
    let (x, y) = (&counts[..hours - 1], &counts[1..]);
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let r = sxy / (sxx * syy).sqrt();
    assert!(r.abs() < 0.05, "r = {r}");
}

#[test]
fn generation_is_bit_identical_per_seed() {
    let a = simulate(Scenario::Standard, 8, 2.0, 41).unwrap();
    let b = simulate(Scenario::Standard, 8, 2.0, 41).unwrap();
    assert_eq!(a.events, b.events);
    assert_eq!(a.states, b.states);
    let c = simulate(Scenario::Standard, 8, 2.0, 42).unwrap();
    assert_ne!(a.events, c.events);
}

#[test]
fn labels_and_slot_ranges_agree() {
    let sim = simulate(Scenario::Standard, 6, 3.0, 9).unwrap();
    validate_events(&sim.events).unwrap();
    assert_eq!(labels_from_events(&sim.events, sim.states.n_slots), sim.states.condition);
    // Every maximal run of congested slots is covered by events on that link.
    for (n, list) in sim.events.iter().enumerate() {
        let covered: usize = list
            .iter()
            .flat_map(|e| e.slot_range())
            .filter(|&s| s < sim.states.n_slots)
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let labelled = (0..sim.states.n_slots).filter(|&s| sim.states.condition(n, s) == 1).count();
        assert_eq!(covered, labelled);
    }
}

#[test]
fn oracle_nll_closed_forms() {
    let g = gen_graph(1, 0.0, 0).unwrap();
    let gt = GroundTruthIntensity::homogeneous(1, 1.0);
    let one = vec![vec![CongestionEvent::new(0, 30.0, 1.0)]];
    let nll = oracle_nll(&gt, &g, &one, TimeWindow::new(0.0, 1.0));
    assert!((nll - 1.0).abs() < 1e-12);

    let gt = GroundTruthIntensity::homogeneous(1, 2.5);
    let none = vec![vec![]];
    let nll = oracle_nll(&gt, &g, &none, TimeWindow::new(0.0, 3.0));
    assert!((nll - 7.5).abs() < 1e-12);
}

/// `∫ λ` by trapezoid on each piece where `λ` is continuous, evaluating the
/// intensity by direct summation.
fn quadrature(
    gt: &GroundTruthIntensity,
    g: &RoadGraph,
    events: &[LinkEvents],
    link: usize,
    a: f64,
    b: f64,
) -> f64 {
    let mut cuts = vec![a, b];
    let mut k = (a / SLOT_HOURS).ceil();
    while k * SLOT_HOURS < b {
        cuts.push(k * SLOT_HOURS);
        k += 1.0;
    }
    for m in g.neighbors(link) {
        for e in &events[m] {
            let t = e.t_occ_hours();
            if t > a && t < b {
                cuts.push(t);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let points = 10_000;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let h = (hi - lo) / (points - 1) as f64;
        // Nudge the ends inside the piece so each end sees the piece's own
        // profile value and event set.
        let eps = (hi - lo) * 1e-12;
        let f = |i: usize| {
            let t = (lo + i as f64 * h).clamp(lo + eps, hi - eps);
            gt.intensity(g, events, link, t)
        };
        let mut s = 0.5 * (f(0) + f(points - 1));
        for i in 1..points - 1 {
            s += f(i);
        }
        total += s * h;
    }
    total
}

fn excited_setup() -> (RoadGraph, GroundTruthIntensity, Vec<LinkEvents>) {
    let g = gen_graph(4, 2.0, 3).unwrap();
    let mut gt = GroundTruthIntensity::homogeneous(4, 0.7);
    gt.base_rates = vec![0.7, 1.1, 0.5, 0.9];
    gt.profile = GroundTruthIntensity::peak_profile(2.0);
    gt.beta = 0.8;
    gt.gamma = 3.0;
    let ev = simulate_events(&g, &gt, 12.0, 2).unwrap();
    (g, gt, ev)
}

#[test]
fn oracle_nll_matches_quadrature_with_excitation() {
    let (g, gt, ev) = excited_setup();
    let window = TimeWindow::new(6.0, 8.5);
    assert!(ev.iter().flatten().any(|e| e.t_occ_hours() > 6.0 && e.t_occ_hours() < 8.5));
    let mut expect = 0.0;
    for n in 0..g.n_links {
        expect += quadrature(&gt, &g, &ev, n, window.start, window.end);
        for e in &ev[n] {
            let t = e.t_occ_hours();
            if t >= window.start && t < window.end {
                expect -= gt.intensity(&g, &ev, n, t).ln();
            }
        }
    }
    let got = oracle_nll(&gt, &g, &ev, window);
    assert!((got - expect).abs() < 1e-6, "oracle {got} quadrature {expect}");
}

#[test]
fn oracle_median_exponential() {
    let g = gen_graph(1, 0.0, 0).unwrap();
    for mu in [0.5, 1.0, 2.0, 5.0] {
        let gt = GroundTruthIntensity::homogeneous(1, mu);
        let m = oracle_median(&gt, &g, &[vec![]], 0, 3.3);
        let expect = std::f64::consts::LN_2 / mu;
        assert!((m - expect).abs() <= 1e-9 * expect, "mu {mu}: {m}");
    }
    let gt = GroundTruthIntensity::homogeneous(1, 2.0);
    let m = oracle_median(&gt, &g, &[vec![]], 0, 0.0);
    assert!((m - 0.3466).abs() < 5e-5);
}

#[test]
fn oracle_median_matches_dense_inversion() {
    let (g, gt, ev) = excited_setup();
    let t0 = 6.9;
    let history: Vec<LinkEvents> = ev
        .iter()
        .map(|l| l.iter().filter(|e| e.t_occ_hours() <= t0).cloned().collect())
        .collect();
    for link in 0..g.n_links {
        let got = oracle_median(&gt, &g, &history, link, t0);
        // Midpoint rule on a fine grid, then linear interpolation inside the
        // crossing cell.
        let h = 1e-4;
        let mut acc = 0.0;
        let mut t = t0;
        let expect = loop {
            let step = gt.intensity(&g, &history, link, t + 0.5 * h) * h;
            if acc + step >= std::f64::consts::LN_2 {
                break t - t0 + h * (std::f64::consts::LN_2 - acc) / step;
            }
            acc += step;
            t += h;
        };
        assert!((got - expect).abs() < 1e-6, "link {link}: {got} vs {expect}");
    }
}
