//! Invariants checked over randomly drawn inputs.

use proptest::prelude::*;

use tribolens::dataset::{split, transpose_label, FrictionDataset, MaterialLibrary, SplitScheme};
use tribolens::linalg::Matrix;
use tribolens::measurement::{kinetic_mu, static_mu};
use tribolens::model::{Architecture, DecoderConfig, EncoderConfig, Model, ModelConfig};
use tribolens::proxy::{combinations, reveal_proxy_pairs};
use tribolens::spectral::{eig_sym, rrqr_select};
use tribolens::training::residual_weight;

fn symmetric(n: usize, entries: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = entries[k];
            m[(j, i)] = entries[k];
            k += 1;
        }
    }
    m
}

fn sparse_dataset(n: usize, cells: &[(f64, bool)]) -> FrictionDataset {
    let mut ds = FrictionDataset::new(MaterialLibrary::numbered(n), vec!["static".into()], 2.0).unwrap();
    for i in 0..n {
        for j in 0..n {
            let (v, keep) = cells[i * n + j];
            if keep {
                ds.set(i, j, 0, v).unwrap();
            }
        }
    }
    ds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_weight_is_a_decreasing_gate(a in -3.0f64..3.0, b in -3.0f64..3.0, kappa in 0.1f64..100.0, tau in 0.0f64..2.0) {
        let (wa, wb) = (residual_weight(a, kappa, tau), residual_weight(b, kappa, tau));
        prop_assert!(wa >= 0.0 && wa <= 1.0);
        if a.abs() <= b.abs() {
            prop_assert!(wa >= wb);
        }
        prop_assert_eq!(residual_weight(tau, kappa, tau), 0.5);
    }

    #[test]
    fn kinetic_never_exceeds_static(theta in 1.0f64..89.0, beta in 0.0f64..89.0, t in 0.01f64..100.0) {
        let s = static_mu(theta, beta).unwrap();
        prop_assert!(s >= 0.0);
        if let Ok(k) = kinetic_mu(theta, t, 0.3, 9.81, beta) {
            prop_assert!(k.value <= s + 1e-12);
        }
    }

    #[test]
    fn transpose_label_is_an_involution(stem in "[a-z_]{0,8}", suffix in prop::sample::select(vec!["wf", "fw", "", "x"])) {
        let label = format!("{stem}{suffix}");
        prop_assert_eq!(transpose_label(&transpose_label(&label)), label);
    }

    #[test]
    fn eigendecomposition_reconstructs(n in 2usize..7, entries in prop::collection::vec(-1.0f64..1.0, 28)) {
        let f = symmetric(n, &entries);
        let s = eig_sym(&f).unwrap();
        let mut err = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| s.vectors[(i, k)] * s.values[k] * s.vectors[(j, k)]).sum();
                err = err.max((r - f[(i, j)]).abs());
            }
        }
        prop_assert!(err <= 1e-9, "reconstruction error {err}");
    }

    #[test]
    fn rrqr_pivots_are_distinct_columns(n in 2usize..8, k in 1usize..8, entries in prop::collection::vec(-1.0f64..1.0, 36)) {
        let k = k.min(n);
        let sel = rrqr_select(&symmetric(n, &entries), k).unwrap();
        let mut idx = sel.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn combinations_count_and_order(n in 0usize..9, k in 0usize..9) {
        let all = combinations(n, k);
        let expected = if k > n { 0 } else { (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1)) };
        prop_assert_eq!(all.len(), expected);
        prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn random_split_partitions_observed_pairs(
        n in 3usize..9,
        cells in prop::collection::vec((0.0f64..2.0, prop::bool::weighted(0.7)), 64),
        seed in 0u64..1000,
    ) {
        let ds = sparse_dataset(n, &cells);
        prop_assume!(ds.observed_pairs().len() >= 3);
        let s = split(&ds, &SplitScheme::Random { train: 0.6, val: 0.2 }, seed).unwrap().remove(0);
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        prop_assert_eq!(before, all.len());
        prop_assert_eq!(all, ds.observed_pairs());
    }

    #[test]
    fn revealing_proxies_keeps_every_pair(
        n in 3usize..9,
        cells in prop::collection::vec((0.0f64..2.0, prop::bool::weighted(0.7)), 64),
        proxies in prop::collection::vec(0usize..9, 0..3),
        seed in 0u64..1000,
    ) {
        let ds = sparse_dataset(n, &cells);
        prop_assume!(ds.observed_pairs().len() >= 3);
        let s = split(&ds, &SplitScheme::Random { train: 0.6, val: 0.2 }, seed).unwrap().remove(0);
        let r = reveal_proxy_pairs(&s, &proxies);
        let touches = |&(a, b): &(usize, usize)| proxies.contains(&a) || proxies.contains(&b);
        prop_assert!(!r.val.iter().chain(&r.test).any(touches));
        prop_assert_eq!(r.train.len() + r.val.len() + r.test.len(), s.train.len() + s.val.len() + s.test.len());
    }

    #[test]
    fn symmetrize_yields_symmetric_cells(n in 2usize..8, cells in prop::collection::vec((0.0f64..2.0, prop::bool::weighted(0.5)), 49)) {
        let sym = sparse_dataset(n, &cells).symmetrize();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(sym.get(i, j, 0), sym.get(j, i, 0));
            }
        }
    }

    #[test]
    fn fusion_is_symmetric(seed in 0u64..50, z in prop::collection::vec(-3.0f64..3.0, 4), w in prop::collection::vec(-3.0f64..3.0, 4)) {
        let arch = Architecture {
            config: ModelConfig {
                encoder: EncoderConfig::Mlp { widths: vec![8] },
                embed_dim: 4,
                fusion_widths: vec![8],
                heteroscedastic: true,
                decoder: DecoderConfig::None,
            },
            columns: (0..5).collect(),
            channels: vec!["static".into()],
            mu_max: 2.0,
            seed,
        };
        let m = Model::new(arch).unwrap();
        let (a, b) = (m.fuse_values(&z, &w, 0).unwrap(), m.fuse_values(&w, &z, 0).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!(a.0 > 0.0 && a.0 < 2.0);
    }
}
