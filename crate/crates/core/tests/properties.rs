//! Property tests over the library's structural invariants.

use geomoe_core::geocell::{self, CellId, LatLng};
use geomoe_core::model::supcon_loss;
use geomoe_core::tensor::{softmax_t, Graph, Tensor};
use geomoe_core::{checkpoint, Rng};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn latlng_strategy() -> impl Strategy<Value = LatLng> {
    (-89.9f64..89.9, -179.9f64..179.9).prop_map(|(lat, lng)| LatLng::new(lat, lng).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cell_token_round_trips(face in 0u8..6, path in proptest::collection::vec(0u8..4, 0..=30)) {
        let cell = CellId::new(face, path).unwrap();
        let token = cell.token();
        prop_assert_eq!(CellId::parse(&token).unwrap(), cell);
    }

    #[test]
    fn point_cells_nest(p in latlng_strategy(), level in 1u8..10) {
        let parent = geocell::cell_from_latlng(&p, level).unwrap();
        let child = geocell::cell_from_latlng(&p, level + 1).unwrap();
        prop_assert!(parent.contains(&child));
        prop_assert!(parent.contains_point(&p));
        prop_assert!(child.contains_point(&p));
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..8,
        seed in any::<u64>(),
        temp in 0.001f64..10.0,
    ) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::randn(&[rows, cols], 3.0, &mut rng);
        let y = softmax_t(&x, temp).unwrap();
        for row in y.data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, dim in 2usize..16, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[rows, dim], 2.0, &mut rng));
        let gamma = g.constant(Tensor::full(&[dim], 1.0));
        let beta = g.constant(Tensor::zeros(&[dim]));
        let y = g.layer_norm(x, gamma, beta, 1e-10).unwrap();
        for row in g.value(y).data().chunks(dim) {
            let mean: f64 = row.iter().sum::<f64>() / dim as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn partition_covers_records_exactly_once(
        seed in any::<u64>(),
        n in 5usize..80,
        classes in 1u32..6,
        n_max in 2usize..12,
    ) {
        let mut rng = Rng::new(seed);
        let records: Vec<(LatLng, u32)> = (0..n)
            .map(|k| {
                let z = rng.uniform_range(-1.0, 1.0);
                (
                    LatLng::new(z.asin().to_degrees(), rng.uniform_range(-180.0, 180.0)).unwrap(),
                    k as u32 % classes,
                )
            })
            .collect();
        let part = geocell::adaptive_partition(&records, n_max, 6).unwrap();
        let total: usize = part.counts.iter().sum();
        prop_assert_eq!(total, records.len());
        for (p, _) in &records {
            let hits = part.cells.iter().filter(|c| c.contains_point(p)).count();
            prop_assert_eq!(hits, 1);
        }
    }

    #[test]
    fn checkpoint_round_trips_arbitrary_tables(
        names in proptest::collection::btree_set("[a-z]{1,12}", 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let mut tensors = BTreeMap::new();
        for (i, name) in names.into_iter().enumerate() {
            let shape = vec![1 + i % 3, 2 + i % 4];
            tensors.insert(name, Tensor::<f32>::randn(&shape, 1.0, &mut rng));
        }
        let bytes = checkpoint::write_bytes("{}", &tensors);
        let (cfg, back) = checkpoint::read_bytes::<f32>(&bytes).unwrap();
        prop_assert_eq!(cfg, "{}");
        prop_assert_eq!(back.len(), tensors.len());
        for (name, t) in &tensors {
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back[name].data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn supcon_is_permutation_invariant(seed in any::<u64>(), n in 3usize..7) {
        let mut rng = Rng::new(seed);
        // n samples, 2 views each, labels in 0..3
        let m = 2 * n;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..m {
            let mut r: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            r.iter_mut().for_each(|v| *v /= norm);
            rows.push(r);
        }
        let labels: Vec<u32> = (0..m).map(|i| (i % 3) as u32).collect();

        let eval = |rows: &[Vec<f64>], labels: &[u32]| -> f64 {
            let mut g = Graph::<f64>::new();
            let v = g.constant(Tensor::from_rows(rows).unwrap());
            let out = supcon_loss(&mut g, v, labels, 0.2).unwrap();
            g.value(out.loss).item()
        };
        let base = eval(&rows, &labels);

        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let plabels: Vec<u32> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = eval(&prows, &plabels);
        prop_assert!((base - permuted).abs() < 1e-9, "{} vs {}", base, permuted);
    }
}
