use std::time::{Duration, Instant};

use scancontext::descriptor::DescriptorKind;
use scancontext::pointcloud::PointCloud;
use scancontext::synth::SyntheticWorld;
use scancontext::{DatabaseConfig, PlaceDatabase, QueryDescriptor};

const SMALL: usize = 500;
const LARGE: usize = 5000;

fn build(world: &SyntheticWorld, places: usize) -> PlaceDatabase {
    let mut config = DatabaseConfig::new(DescriptorKind::Polar);
    config.half_width = 0;
    let mut db = PlaceDatabase::new(config).unwrap();
    for i in 0..places {
        let place = db.prepare(&world.scan_at(i as f64, 0.0, 0.0)).unwrap();
        db.insert_prepared(place, i as u64).unwrap();
    }
    db.rebuild_index();
    db
}

/// Best mean over several rounds, to keep scheduler noise out of the ratio.
fn best_mean<T>(items: &[T], mut run: impl FnMut(&T)) -> Duration {
    (0..5)
        .map(|_| {
            let start = Instant::now();
            items.iter().for_each(&mut run);
            start.elapsed() / items.len() as u32
        })
        .min()
        .unwrap()
}

#[test]
fn tenfold_growth_costs_less_than_threefold_latency() {
    let world = SyntheticWorld::corridor(0x5CA1, LARGE as f64);
    let small = build(&world, SMALL);
    let large = build(&world, LARGE);
    let scans: Vec<PointCloud> = (0..100).map(|i| world.scan_at(i as f64 * 4.7 + 0.3, 1.0, 17.0)).collect();

    let t_small = best_mean(&scans, |s| drop(small.query(s, None).unwrap()));
    let t_large = best_mean(&scans, |s| drop(large.query(s, None).unwrap()));
    let ratio = t_large.as_secs_f64() / t_small.as_secs_f64();

    let keys: Vec<QueryDescriptor> = scans.iter().map(|s| large.describe(s).unwrap()).collect();
    let r_small = best_mean(&keys, |q| drop(small.query_descriptor(q, None).unwrap()));
    let r_large = best_mean(&keys, |q| drop(large.query_descriptor(q, None).unwrap()));
    eprintln!(
        "query {t_small:?} -> {t_large:?} ({ratio:.2}x); retrieve and align only {r_small:?} -> {r_large:?} ({:.2}x)",
        r_large.as_secs_f64() / r_small.as_secs_f64()
    );
    assert!(ratio < 3.0, "{SMALL} entries {t_small:?}, {LARGE} entries {t_large:?}, ratio {ratio:.2}");
}
