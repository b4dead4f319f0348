use hampic::bench::{bench_csv, bench_speedup, BENCH_HEADER};
use hampic::config::RunConfig;

fn cfg() -> RunConfig {
    RunConfig::parse_str("scenario = landau\nn_particles = 200000\n").unwrap()
}

#[test]
fn one_thread_is_the_reference() {
    let rows = bench_speedup(&cfg(), &[1], 2).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].deposit_speedup, 1.0);
    assert_eq!(rows[0].push_speedup, 1.0);
    let csv = bench_csv(&rows);
    assert!(csv.starts_with(BENCH_HEADER));
    assert_eq!(csv.lines().count(), 2);
}

// Only counts up to the available cores are meaningful; beyond that the
// workers time-share.
#[test]
fn push_speedup_does_not_drop_below_physical_cores() {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let counts: Vec<usize> = (0..4).map(|i| 1 << i).filter(|&n| n <= cores).collect();
    let rows = bench_speedup(&cfg(), &counts, 10).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].push_speedup >= 0.95 * w[0].push_speedup, "{}", bench_csv(&rows));
    }
    eprint!("{}", bench_csv(&rows));
}
