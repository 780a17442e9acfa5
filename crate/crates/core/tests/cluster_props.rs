use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clusterharm::cluster::{
    cluster_combat_fit, kmeans_fit, kmeans_predict, ClusterCombatOptions, ClusterModel, ClusterSpace, KMeansOptions,
};
use clusterharm::eval::adjusted_rand_index;
use clusterharm::numerics::{squared_distance, Matrix};
use clusterharm::synth::{generate, SynthConfig};

const SPACE: ClusterSpace = ClusterSpace::SampleFeature;

fn cloud(rng: &mut ChaCha8Rng, q: usize, d: usize) -> Matrix {
    Matrix::from_fn(q, d, |_, _| rng.gen_range(-5.0..5.0))
}

fn restarts(n: usize) -> KMeansOptions {
    KMeansOptions {
        restarts: n,
        ..KMeansOptions::default()
    }
}

fn partition_cost(points: &Matrix, labels: &[usize], c: usize) -> f64 {
    ClusterModel::from_labels(points, labels, SPACE).map_or(f64::INFINITY, |m| {
        debug_assert_eq!(m.n_clusters, c);
        m.inertia
    })
}

#[test]
fn two_means_finds_the_best_bipartition() {
    let mut hits = 0;
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, 9, 2);
        let optimum = (1u32..(1 << 8))
            .map(|mask| {
                // point 8 always in cluster 0, so each bipartition is listed once
                let labels: Vec<usize> = (0..9).map(|i| ((mask >> i) & 1) as usize).collect();
                partition_cost(&pts, &labels, 2)
            })
            .fold(f64::INFINITY, f64::min);
        let fit = kmeans_fit(&pts, 2, seed, &restarts(10), SPACE).unwrap();
        assert!(fit.model.inertia >= optimum - 1e-9);
        if fit.model.inertia <= optimum * (1.0 + 1e-9) {
            hits += 1;
        }
    }
    assert!(hits >= 36, "global optimum found in {hits}/40 cases");
}

#[test]
fn one_cluster_per_point_has_zero_inertia() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts = cloud(&mut rng, 7, 3);
    let fit = kmeans_fit(&pts, 7, 1, &KMeansOptions::default(), SPACE).unwrap();
    assert!(fit.model.inertia < 1e-20);
    let mut labels = fit.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, (0..7).collect::<Vec<_>>());
}

#[test]
fn bad_cluster_counts_are_rejected() {
    let pts = Matrix::zeros(3, 2);
    assert!(kmeans_fit(&pts, 0, 0, &KMeansOptions::default(), SPACE).is_err());
    assert!(kmeans_fit(&pts, 4, 0, &KMeansOptions::default(), SPACE).is_err());
    let fit = kmeans_fit(&pts, 2, 0, &KMeansOptions::default(), SPACE).unwrap();
    assert!(kmeans_predict(&fit.model, &Matrix::zeros(1, 3)).is_err());
}

#[test]
fn duplicate_points_still_give_c_clusters() {
    let pts = Matrix::from_fn(6, 1, |i, _| if i < 5 { 1.0 } else { 2.0 });
    let fit = kmeans_fit(&pts, 3, 0, &KMeansOptions::default(), SPACE).unwrap();
    assert_eq!(fit.model.centroids.nrows(), 3);
    assert!(fit.model.inertia < 1e-20);
}

#[test]
fn ties_go_to_the_lowest_index() {
    let model = ClusterModel::from_labels(
        &Matrix::from_rows(&[vec![-1.0], vec![1.0]], 1).unwrap(),
        &[0, 1],
        SPACE,
    )
    .unwrap();
    let pred = kmeans_predict(&model, &Matrix::from_rows(&[vec![0.0]], 1).unwrap()).unwrap();
    assert_eq!(pred, vec![0]);
}

#[test]
fn cluster_combat_recovers_synthetic_clusters() {
    let cfg = SynthConfig::new(6, 40, 20, 2, 2).with_seed(5);
    let (ds, truth) = generate(&cfg).unwrap();
    let opts = ClusterCombatOptions {
        n_clusters: 3,
        kmeans: restarts(10),
        ..ClusterCombatOptions::default()
    };
    let fit = cluster_combat_fit(&ds, &opts).unwrap();
    let ari = adjusted_rand_index(&fit.assignment, &truth.row_clusters(&ds)).unwrap();
    assert!(ari > 0.9, "ARI {ari}");
    // training rows re-predicted land in their training cluster
    assert_eq!(fit.artifact.predict_clusters(&ds).unwrap(), fit.assignment);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lloyd_never_increases_inertia(seed in any::<u64>(), q in 4usize..40, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, q, 3);
        let fit = kmeans_fit(&pts, c.min(q), seed, &KMeansOptions::default(), SPACE).unwrap();
        for w in fit.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.inertia_trace);
        }
        let last = *fit.inertia_trace.last().unwrap();
        prop_assert!((last - fit.model.inertia).abs() <= 1e-9 * last.max(1.0));
    }

    #[test]
    fn predict_is_the_nearest_centroid(seed in any::<u64>(), c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, 30, 4);
        let fit = kmeans_fit(&pts, c, seed, &KMeansOptions::default(), SPACE).unwrap();
        let queries = cloud(&mut rng, 25, 4);
        let pred = kmeans_predict(&fit.model, &queries).unwrap();
        for (i, &p) in pred.iter().enumerate() {
            let d: Vec<f64> = fit.model.centroids.rows_iter().map(|ctr| squared_distance(ctr, queries.row(i))).collect();
            let best = d.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d.iter().position(|&x| x == best).unwrap(), p);
        }
        // predicting a permuted batch permutes the answers
        let perm: Vec<usize> = (0..25).rev().collect();
        let rev = kmeans_predict(&fit.model, &queries.select_rows(&perm)).unwrap();
        let expect: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        prop_assert_eq!(rev, expect);
    }

    #[test]
    fn same_seed_same_fit(seed in any::<u64>(), restarts_n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, 25, 2);
        let a = kmeans_fit(&pts, 3, seed, &restarts(restarts_n), SPACE).unwrap();
        let b = kmeans_fit(&pts, 3, seed, &restarts(restarts_n), SPACE).unwrap();
        prop_assert_eq!(a.labels, b.labels);
        prop_assert_eq!(a.model, b.model);
    }

    #[test]
    fn separated_blobs_are_recovered_in_any_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]];
        let mut truth = Vec::new();
        let pts = Matrix::from_fn(80, 2, |i, j| {
            if j == 0 {
                truth.push(i % 4);
            }
            centres[i % 4][j] + rng.gen_range(-1.0..1.0)
        });
        let fit = kmeans_fit(&pts, 4, seed, &restarts(5), SPACE).unwrap();
        let ari = adjusted_rand_index(&fit.labels, &truth).unwrap();
        prop_assert!(ari >= 0.9, "ARI {ari}");

        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..80).collect();
            for i in (1..80).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let shuffled = kmeans_fit(&pts.select_rows(&perm), 4, seed, &restarts(5), SPACE).unwrap();
        let back: Vec<usize> = perm.iter().map(|&i| fit.labels[i]).collect();
        prop_assert!((adjusted_rand_index(&shuffled.labels, &back).unwrap() - 1.0).abs() < 1e-12);
    }
}
