//! Partition-law properties: disjointness, exact union, determinism, and the
//! shard-structure bounds.

mod common;

use proptest::prelude::*;

use fedsim_core::data::{
    partition_class_split, partition_iid, partition_permuted, partition_shards, synthetic_dataset,
    ClientDataset, Dataset,
};

/// Multiset of (image bits, label) rows.
fn multiset(rows: impl Iterator<Item = (Vec<u64>, usize)>) -> Vec<(Vec<u64>, usize)> {
    let mut v: Vec<(Vec<u64>, usize)> = rows.collect();
    v.sort();
    v
}

fn client_rows(clients: &[ClientDataset]) -> impl Iterator<Item = (Vec<u64>, usize)> + '_ {
    clients.iter().flat_map(|c| {
        (0..c.n()).map(move |i| {
            (
                c.data.images.row(i).iter().map(|v| v.to_bits()).collect(),
                c.data.labels[i],
            )
        })
    })
}

fn source_rows(ds: &Dataset) -> impl Iterator<Item = (Vec<u64>, usize)> + '_ {
    (0..ds.len()).map(move |i| {
        (
            ds.images.row(i).iter().map(|v| v.to_bits()).collect(),
            ds.labels[i],
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_iid_partition_is_exact(
        n in 10usize..80,
        k in 1usize..10,
        seed in 0u64..500,
    ) {
        prop_assume!(k <= n);
        let ds = synthetic_dataset(n, &[2, 2, 1], 3, seed).unwrap();
        let clients = partition_iid(&ds, k, seed).unwrap();
        prop_assert_eq!(clients.len(), k);
        let total: usize = clients.iter().map(|c| c.n()).sum();
        prop_assert_eq!(total, n);
        // sizes within 1 of each other
        let min = clients.iter().map(|c| c.n()).min().unwrap();
        let max = clients.iter().map(|c| c.n()).max().unwrap();
        prop_assert!(max - min <= 1);
        prop_assert_eq!(multiset(client_rows(&clients)), multiset(source_rows(&ds)));
    }

    #[test]
    fn prop_shard_partition_is_exact(
        shards_per_client in 1usize..4,
        clients_n in 1usize..8,
        shard_size in 1usize..12,
        seed in 0u64..500,
    ) {
        let num_shards = shards_per_client * clients_n;
        // the <= 2 adjacent labels per shard bound needs every class to hold
        // at least shard_size examples; size the dataset accordingly
        let n = (num_shards * shard_size).max(4 * shard_size) * 2 + (seed % 5) as usize;
        let ds = synthetic_dataset(n, &[2, 2, 1], 4, seed).unwrap();
        prop_assume!(num_shards * shard_size <= ds.len());
        let clients = partition_shards(&ds, num_shards, shard_size, shards_per_client, seed).unwrap();
        prop_assert_eq!(clients.len(), clients_n);
        for c in &clients {
            prop_assert_eq!(c.n(), shards_per_client * shard_size);
            let mut labels = c.data.labels.clone();
            labels.sort();
            labels.dedup();
            prop_assert!(labels.len() <= 2 * shards_per_client);
        }
        // union equals the first num_shards*shard_size examples in sorted order
        let mut sorted: Vec<usize> = (0..ds.len()).collect();
        sorted.sort_by_key(|&i| ds.labels[i]);
        let covered = ds.subset(&sorted[..num_shards * shard_size]);
        prop_assert_eq!(multiset(client_rows(&clients)), multiset(source_rows(&covered)));
    }

    #[test]
    fn prop_permuted_partition_is_exact_in_labels(
        k in 1usize..5,
        per in 4usize..20,
        seed in 0u64..500,
    ) {
        let n = k * per + 3;
        let ds = synthetic_dataset(n, &[3, 2, 1], 3, seed).unwrap();
        let clients = partition_permuted(&ds, k, per, seed).unwrap();
        prop_assert_eq!(clients.len(), k);
        for c in &clients {
            prop_assert_eq!(c.n(), per);
            let perm = c.pixel_perm.as_ref().unwrap();
            prop_assert_eq!(perm.len(), 6);
            // undoing the permutation recovers rows present in the source
            let mut undone = vec![0.0f64; 6];
            for (p, &q) in perm.iter().enumerate() {
                undone[q] = c.data.images.row(0)[p];
            }
            let found = (0..ds.len()).any(|i| ds.images.row(i) == undone.as_slice());
            prop_assert!(found, "permuted row does not correspond to any source row");
        }
    }
}

#[test]
fn class_split_covers_exactly_the_grouped_classes() {
    let ds = synthetic_dataset(200, &[2, 2, 1], 10, 17).unwrap();
    let groups = vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]];
    let clients = partition_class_split(&ds, &groups).unwrap();
    assert_eq!(clients.len(), 2);
    assert_eq!(clients[0].n() + clients[1].n(), ds.len());
    assert_eq!(multiset(client_rows(&clients)), multiset(source_rows(&ds)));

    // partial coverage: union equals examples of the covered classes only
    let partial = partition_class_split(&ds, &[vec![2], vec![7, 9]]).unwrap();
    let covered: Vec<usize> = (0..ds.len())
        .filter(|&i| [2, 7, 9].contains(&ds.labels[i]))
        .collect();
    let expect = ds.subset(&covered);
    assert_eq!(multiset(client_rows(&partial)), multiset(source_rows(&expect)));
}

#[test]
fn all_partitioners_deterministic_in_seed() {
    let ds = synthetic_dataset(120, &[2, 2, 1], 4, 23).unwrap();
    let a = partition_shards(&ds, 12, 10, 2, 9).unwrap();
    let b = partition_shards(&ds, 12, 10, 2, 9).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data.labels, y.data.labels);
        assert_eq!(x.data.images.data(), y.data.images.data());
    }
    let p1 = partition_permuted(&ds, 3, 20, 4).unwrap();
    let p2 = partition_permuted(&ds, 3, 20, 4).unwrap();
    for (x, y) in p1.iter().zip(&p2) {
        assert_eq!(x.pixel_perm, y.pixel_perm);
        assert_eq!(x.data.images.data(), y.data.images.data());
    }
}

#[test]
fn iid_label_histogram_tracks_global_distribution() {
    // chi-square-style sanity bound on a large balanced dataset
    let ds = synthetic_dataset(6000, &[2, 2, 1], 10, 31).unwrap();
    let clients = partition_iid(&ds, 10, 32).unwrap();
    let global = ds.label_histogram();
    for c in &clients {
        let hist = c.data.label_histogram();
        let n = c.n() as f64;
        let mut chi2 = 0.0;
        for (obs, glob) in hist.iter().zip(&global) {
            let expected = *glob as f64 * n / ds.len() as f64;
            chi2 += (*obs as f64 - expected).powi(2) / expected;
        }
        // 9 dof; 27.9 is the 0.1% tail
        assert!(chi2 < 27.9, "client {} histogram chi2 {chi2}", c.id);
    }
}

#[test]
fn permuted_clients_share_labels_but_differ_in_pixels() {
    let ds = synthetic_dataset(400, &[4, 4, 1], 4, 41).unwrap();
    let clients = partition_permuted(&ds, 2, 200, 42).unwrap();
    let mean_image = |c: &ClientDataset| -> Vec<f64> {
        let mut acc = vec![0.0; 16];
        for i in 0..c.n() {
            for (a, &v) in acc.iter_mut().zip(c.data.images.row(i)) {
                *a += v;
            }
        }
        acc.iter().map(|v| v / c.n() as f64).collect()
    };
    let m0 = mean_image(&clients[0]);
    let m1 = mean_image(&clients[1]);
    let diff: f64 = m0.iter().zip(&m1).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.05, "pixelwise mean images too similar: {diff}");

    // label marginals stay comparable
    let h0 = clients[0].data.label_histogram();
    let h1 = clients[1].data.label_histogram();
    for (a, b) in h0.iter().zip(&h1) {
        assert!((*a as f64 - *b as f64).abs() <= 30.0);
    }
}
