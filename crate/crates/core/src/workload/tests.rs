use proptest::prelude::*;

use super::*;

const HEADER: &str = "session_id,session_start_s,session_end_s,req_millicpus,req_mem_mb,req_gpus,req_vram_gb,event_submit_s,event_duration_s,event_gpus,event_delta_bytes\n";

fn parse(body: &str) -> Result<Vec<Session>, TraceError> {
    parse_trace(format!("{HEADER}{body}").as_bytes())
}

#[test]
fn single_row_maps_verbatim() {
    let s = parse("7,10,100.5,4000,16384,2,80,20,30.25,2,512\n").unwrap();
    assert_eq!(s.len(), 1);
    let e = &s[0].events[0];
    assert_eq!((s[0].session_id, s[0].start_ms, s[0].end_ms), (7, 10_000, 100_500));
    assert_eq!(s[0].request.gpus, 2);
    assert_eq!((e.submit_ms, e.duration_ms, e.gpus, e.vram_gb, e.delta_bytes), (20_000, 30_250, 2, 80, 512));
}

#[test]
fn out_of_order_rows_sorted() {
    let s = parse("1,0,1000,1,1,1,40,500,10,1,1\n1,0,1000,1,1,1,40,100,10,1,1\n").unwrap();
    let submits: Vec<_> = s[0].events.iter().map(|e| e.submit_ms).collect();
    assert_eq!(submits, vec![100_000, 500_000]);
}

#[test]
fn invalid_traces_rejected() {
    let overlap = parse("1,0,1000,1,1,1,40,100,50,1,1\n1,0,1000,1,1,1,40,120,10,1,1\n").unwrap_err();
    assert!(overlap.to_string().contains("overlapping"), "{overlap}");
    let neg = parse("1,0,1000,1,1,1,40,100,-5,1,1\n").unwrap_err();
    assert!(matches!(neg, TraceError::Invalid { line: 2, .. }), "{neg}");
    assert!(parse("1,0,1000,1,1,1,40,100,0,1,1\n").is_err());
    assert!(parse("1,0,1000,1,1,1,40,100,5,2,1\n").is_err());
    assert!(parse("1,0,100,1,1,1,40,90,20,1,1\n").is_err());
    assert!(parse("1,0,100,1,1,1,40,10,5,1,1\n1,0,200,1,1,1,40,50,5,1,1\n").is_err());
    let cols = parse_trace("session_id,extra\n1,2\n".as_bytes()).unwrap_err();
    assert!(matches!(cols, TraceError::Invalid { line: 1, .. }));
}

#[test]
fn round_trip_generated() {
    let s = generate(&GenParams::default(), 11).unwrap();
    let mut buf = Vec::new();
    write_trace(&s, &mut buf).unwrap();
    let back = parse_trace(buf.as_slice()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn generator_deterministic() {
    let bytes = |seed| {
        let mut b = Vec::new();
        write_trace(&generate(&GenParams::default(), seed).unwrap(), &mut b).unwrap();
        b
    };
    assert_eq!(bytes(5), bytes(5));
    assert_ne!(bytes(5), bytes(6));
}

#[test]
fn generator_rejects_non_monotone() {
    let mut p = GenParams::default();
    p.duration.knots[2].1 = 50.0;
    assert_eq!(generate(&p, 1), Err(GeneratorError::NonMonotone));
    let mut p = GenParams::default();
    p.iat.knots[0].0 = 0.1;
    assert!(generate(&p, 1).is_err());
    let p = GenParams {
        events_min: 0,
        ..GenParams::default()
    };
    assert!(matches!(generate(&p, 1), Err(GeneratorError::BadParam(_))));
}

#[test]
fn curve_hits_knots() {
    let c = PercentileCurve::durations();
    for &(p, v) in &c.knots {
        assert!((c.quantile(p) - v).abs() < 1e-9);
    }
    // Exponential tail: P(X > x) = 0.01 * exp(-(x - 10920)/2190).
    let u = 1.0 - 0.01 * (-1.0f64).exp();
    assert!((c.quantile(u) - (10920.0 + 2190.0)).abs() < 1e-6);
}

#[test]
fn generated_sessions_valid_and_fill_horizon() {
    let p = GenParams::default();
    let s = generate(&p, 3).unwrap();
    assert_eq!(s.len(), 100);
    for x in &s {
        assert!(!x.events.is_empty());
        assert!(x.end_ms <= 63_000_000);
        for w in x.events.windows(2) {
            assert!(w[1].submit_ms - w[0].submit_ms >= 240_000);
            assert!(w[1].submit_ms >= w[0].end_ms() + 180_000);
        }
    }
}

#[test]
fn micro_trace_percentiles() {
    // Durations 10, 20, 30 s; IATs 100, 200 s.
    let s = parse(
        "1,0,1000,1,1,2,80,0,10,2,1\n1,0,1000,1,1,2,80,100,20,2,1\n1,0,1000,1,1,2,80,300,30,2,1\n",
    )
    .unwrap();
    let st = compute_stats(&s, 15_000);
    assert_eq!(st.durations.p50, 20.0);
    assert_eq!(st.durations.p75, 30.0);
    assert_eq!(st.durations.min, 10.0);
    assert_eq!(st.durations.mean, 20.0);
    assert_eq!(st.iats.count, 2);
    assert_eq!(st.iats.p50, 100.0);
    assert_eq!(st.iats.p99, 200.0);
    // 60 s of 2 GPUs over 1000 s of 2 reserved.
    assert!((st.idle_fraction - 0.94).abs() < 1e-12);
    assert_eq!(st.session_utilization, vec![0.06]);
    assert_eq!(st.timeline[0].used_gpus, 2);
    assert_eq!(st.timeline[1].used_gpus, 0);
    assert_eq!(st.timeline.len(), 1000 / 15 + 1);
}

#[test]
fn one_iat_between_two_events() {
    let s = parse("1,0,1000,1,1,1,40,0,10,1,1\n1,0,1000,1,1,1,40,500,10,1,1\n").unwrap();
    let st = compute_stats(&s, 15_000);
    assert_eq!(st.iats.count, 1);
    assert_eq!(st.iats.p50, 500.0);
}

#[test]
fn saturated_trace_has_no_idle() {
    let s = parse("1,0,100,1,1,4,160,0,100,4,1\n2,50,80,1,1,1,40,50,30,1,1\n").unwrap();
    assert_eq!(compute_stats(&s, 15_000).idle_fraction, 0.0);
}

#[test]
fn default_trace_is_mostly_idle() {
    let s = generate(&GenParams::default(), 1).unwrap();
    let st = compute_stats(&s, 15_000);
    assert!(st.idle_fraction > 0.7, "{}", st.idle_fraction);
}

#[test]
fn replay_counts() {
    assert!(replay(&[]).is_empty());
    let s = parse("1,0,1000,1,1,1,40,100,10,1,1\n1,0,1000,1,1,1,40,500,10,1,1\n").unwrap();
    let r = replay(&s);
    assert_eq!(r.len(), 4);
    assert!(r.windows(2).all(|w| w[0].0 <= w[1].0));
    assert!(matches!(r[0].1, ReplayEvent::SessionStart { .. }));
    assert!(matches!(r[3].1, ReplayEvent::SessionEnd { .. }));
}

#[test]
fn replay_concurrency_matches_stats() {
    for seed in 0..5 {
        let s = generate(&GenParams::default(), seed).unwrap();
        // Walk the replay stream, applying every end at a timestamp before
        // the starts at that timestamp.
        let r = replay(&s);
        let (mut cur, mut best, mut i) = (0i64, 0i64, 0);
        while i < r.len() {
            let t = r[i].0;
            let j = r[i..].iter().position(|x| x.0 != t).map_or(r.len(), |k| i + k);
            for (_, e) in &r[i..j] {
                if matches!(e, ReplayEvent::SessionEnd { .. }) {
                    cur -= 1;
                }
            }
            for (_, e) in &r[i..j] {
                if matches!(e, ReplayEvent::SessionStart { .. }) {
                    cur += 1;
                }
            }
            best = best.max(cur);
            i = j;
        }
        assert_eq!(best as usize, compute_stats(&s, 15_000).max_concurrent_sessions);
    }
}

#[test]
fn generator_fidelity_large_sample() {
    let p = GenParams {
        sessions: 1000,
        horizon_s: 1e9,
        events_min: 10,
        events_max: 10,
        ..GenParams::default()
    };
    let s = generate(&p, 9).unwrap();
    let mut d: Vec<f64> = s.iter().flat_map(|x| x.events.iter().map(|e| e.duration_ms as f64 / 1000.0)).collect();
    d.sort_by(f64::total_cmp);
    assert_eq!(d.len(), 10_000);
    for (q, want) in [(50.0, 120.0), (75.0, 300.0), (90.0, 1020.0), (95.0, 2160.0), (99.0, 10920.0)] {
        let got = percentile(&d, q).unwrap();
        assert!((got - want).abs() <= 0.1 * want, "P{q} {got}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn percentiles_non_decreasing(v in prop::collection::vec(0.0f64..1e6, 1..200)) {
        let p = Percentiles::of(v.clone());
        prop_assert!(p.min <= p.p50 && p.p50 <= p.p75 && p.p75 <= p.p90);
        prop_assert!(p.p90 <= p.p95 && p.p95 <= p.p99 && p.p99 <= p.max);
        // Nearest rank: at least q% of samples are <= the value.
        let n = v.len() as f64;
        for (q, x) in [(50.0, p.p50), (90.0, p.p90)] {
            let below = v.iter().filter(|&&y| y <= x).count() as f64;
            prop_assert!(below >= q / 100.0 * n - 1e-9);
            let strictly = v.iter().filter(|&&y| y < x).count() as f64;
            prop_assert!(strictly < q / 100.0 * n + 1e-9);
        }
    }

    #[test]
    fn round_trip_any_seed(seed in 0u64..1000) {
        let p = GenParams { sessions: 5, ..GenParams::default() };
        let s = generate(&p, seed).unwrap();
        let mut buf = Vec::new();
        write_trace(&s, &mut buf).unwrap();
        prop_assert_eq!(parse_trace(buf.as_slice()).unwrap(), s);
    }
}

