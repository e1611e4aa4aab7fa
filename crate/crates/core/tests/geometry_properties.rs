use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tractgraph::geometry::{
    cluster_pair_distance, distance_matrix, mdf_distance, resample_streamline, DistanceMatrix,
    FiberCluster, FiberMetric, Point3, Streamline,
};

fn random_streamline(rng: &mut ChaCha8Rng) -> Streamline {
    let n = rng.random_range(2..12);
    let mut p = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
    let mut pts = vec![p];
    for _ in 1..n {
        for c in &mut p {
            *c += rng.random_range(-8.0..8.0);
        }
        pts.push(p);
    }
    Streamline::new(pts).unwrap()
}

fn random_cluster(rng: &mut ChaCha8Rng, id: usize) -> FiberCluster {
    let n = rng.random_range(1..5);
    FiberCluster::new(id, (0..n).map(|_| random_streamline(rng)).collect()).unwrap()
}

fn norm(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Textbook MDF written without any library helpers: naive arc-length
/// resampling, then direct and flipped mean distances.
fn naive_mdf(a: &Streamline, b: &Streamline, p: usize) -> f64 {
    fn resample(pts: &[Point3], p: usize) -> Vec<Point3> {
        let mut cum = vec![0.0];
        for i in 1..pts.len() {
            cum.push(cum[i - 1] + norm(&pts[i - 1], &pts[i]));
        }
        let total = cum[pts.len() - 1];
        (0..p)
            .map(|k| {
                let s = total * k as f64 / (p - 1) as f64;
                let mut seg = 0;
                while seg < pts.len() - 2 && cum[seg + 1] < s {
                    seg += 1;
                }
                let len = cum[seg + 1] - cum[seg];
                let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
                let (x, y) = (pts[seg], pts[seg + 1]);
                [x[0] + t * (y[0] - x[0]), x[1] + t * (y[1] - x[1]), x[2] + t * (y[2] - x[2])]
            })
            .collect()
    }
    let ra = resample(a.points(), p);
    let rb = resample(b.points(), p);
    let direct: f64 = (0..p).map(|i| norm(&ra[i], &rb[i])).sum::<f64>() / p as f64;
    let flipped: f64 = (0..p).map(|i| norm(&ra[i], &rb[p - 1 - i])).sum::<f64>() / p as f64;
    direct.min(flipped)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mdf_metric_properties(seed in any::<u64>(), v in prop::array::uniform3(-100.0f64..100.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_streamline(&mut rng);
        let b = random_streamline(&mut rng);
        let d = mdf_distance(&a, &b, 15).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, mdf_distance(&b, &a, 15).unwrap());
        prop_assert!((d - mdf_distance(&a, &b.reversed(), 15).unwrap()).abs() < 1e-9);
        prop_assert!((d - mdf_distance(&a.translated(v), &b.translated(v), 15).unwrap()).abs() < 1e-9);
        prop_assert_eq!(mdf_distance(&a, &a, 15).unwrap(), 0.0);
        prop_assert_eq!(mdf_distance(&a, &a.reversed(), 15).unwrap(), 0.0);
        prop_assert!((d - naive_mdf(&a, &b, 15)).abs() < 1e-9 * (1.0 + d));
    }

    #[test]
    fn resampling_preserves_endpoints_and_length(seed in any::<u64>(), p in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_streamline(&mut rng);
        let r = resample_streamline(&s, p).unwrap();
        prop_assert_eq!(r.len(), p);
        prop_assert_eq!(r.points()[0], s.points()[0]);
        prop_assert_eq!(r.points()[p - 1], s.points()[s.len() - 1]);
        // resampled chords never exceed the original arc length
        prop_assert!(r.arc_length() <= s.arc_length() * (1.0 + 1e-9));
        prop_assert_eq!(resample_streamline(&s.reversed(), p).unwrap(), r.reversed());

        // on a straight polyline no corner is cut, so length is preserved
        let dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5];
        let steps: Vec<Point3> = (0..6)
            .scan(0.0, |t, _| {
                *t += rng.random_range(0.1..5.0);
                Some([dir[0] * *t, dir[1] * *t, dir[2] * *t])
            })
            .collect();
        let line = Streamline::new(steps).unwrap();
        let rl = resample_streamline(&line, p).unwrap();
        prop_assert!((rl.arc_length() - line.arc_length()).abs() <= 1e-9 * line.arc_length());
    }

    #[test]
    fn cluster_distance_matches_double_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_cluster(&mut rng, 0);
        let b = random_cluster(&mut rng, 1);
        let mut total = 0.0;
        for sa in &a.streamlines {
            for sb in &b.streamlines {
                total += mdf_distance(sa, sb, 15).unwrap();
            }
        }
        let oracle = total / (a.streamlines.len() * b.streamlines.len()) as f64;
        let m = FiberMetric::MinimumDirectFlip;
        prop_assert_eq!(cluster_pair_distance(&a, &b, 15, m).unwrap(), oracle);
        prop_assert_eq!(cluster_pair_distance(&b, &a, 15, m).unwrap(), oracle);
    }

    #[test]
    fn distance_matrix_permutation_invariance(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters: Vec<FiberCluster> = (0..n).map(|i| random_cluster(&mut rng, i)).collect();
        let m = FiberMetric::MinimumDirectFlip;
        let d = distance_matrix(&clusters, 15, m).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);
        let shuffled: Vec<FiberCluster> = perm.iter().map(|&i| clusters[i].clone()).collect();
        let dp = distance_matrix(&shuffled, 15, m).unwrap();
        for i in 0..n {
            prop_assert_eq!(d.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                prop_assert_eq!(dp.get(i, j), d.get(perm[i], perm[j]));
                if i != j {
                    prop_assert_eq!(d.get(i, j), cluster_pair_distance(&clusters[i], &clusters[j], 15, m).unwrap());
                }
            }
        }
    }
}

#[test]
fn resample_examples() {
    let seg = Streamline::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    let r = resample_streamline(&seg, 3).unwrap();
    assert_eq!(r.points(), &[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    let uniform = Streamline::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
    assert_eq!(resample_streamline(&uniform, 4).unwrap(), uniform);
}

#[test]
fn translated_copy_is_three_mm_away() {
    let a = Streamline::new(vec![[0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [5.0, 1.0, 3.0], [6.0, 4.0, 2.0]]).unwrap();
    let b = a.translated([0.0, 3.0, 0.0]);
    assert!((mdf_distance(&a, &b, 15).unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn distance_matrix_csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clusters: Vec<FiberCluster> = (0..4).map(|i| random_cluster(&mut rng, i)).collect();
    let d = distance_matrix(&clusters, 15, FiberMetric::MinimumDirectFlip).unwrap();
    let text = d.to_csv(Some("metric=mdf"));
    assert_eq!(DistanceMatrix::parse_csv(&text).unwrap(), d);
}

#[test]
fn mean_closest_point_is_symmetric_and_zero_on_self() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clusters: Vec<FiberCluster> = (0..3).map(|i| random_cluster(&mut rng, i)).collect();
    let d = distance_matrix(&clusters, 15, FiberMetric::MeanClosestPoint).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(d.get(i, j), d.get(j, i));
        }
    }
}
