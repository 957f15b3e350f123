use std::collections::BTreeMap;

use hime_core::chair::{evaluate_chair, CaptionRecord};
use hime_core::corpus::{generate_pairs, SyntheticWorldConfig};
use hime_core::decoder::{init_decoder, ActivationTrace, DecoderConfig, LayerTrace};
use hime_core::editor::{apply_edit, weighted_null_operator, EditPlan, LayerEdit, Sides};
use hime_core::his::{his_profile, kl_histogram, Aggregation, HisConfig};
use hime_core::numerics::{projector_from_basis, softmax_rows, svd_thin, Mask, Matrix, Tensor3};
use hime_core::subspace::{
    attention_weighted_feature, extract_subspace, positional_profile, HalluSubspace,
};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c)
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

/// Orthonormal `d x k` basis from the left singular vectors of a random matrix.
fn basis(max_d: usize, max_k: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_d).prop_flat_map(move |d| {
        (Just(d), 1..=max_k.min(d)).prop_flat_map(|(d, k)| {
            prop::collection::vec(-1.0f64..1.0, d * k).prop_filter_map("rank deficient", move |v| {
                let m = Matrix::from_vec(d, k, v).ok()?;
                let svd = svd_thin(&m).ok()?;
                (svd.sigma[k - 1] > 1e-3).then(|| Matrix::from_fn(d, k, |r, c| svd.u[(r, c)]))
            })
        })
    })
}

fn subspace(b: Matrix) -> HalluSubspace {
    let k = b.cols();
    HalluSubspace {
        layer: 1,
        basis: b,
        singular_values: vec![1.0; k],
    }
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..50, n).prop_map(|c| {
        let eps = 1e-10;
        let total = c.iter().map(|&x| x as f64).sum::<f64>() + eps * c.len() as f64;
        c.iter().map(|&x| (x as f64 + eps) / total).collect()
    })
}

fn causal_trace(layers: usize, heads: usize, j: usize, seed: &[f64]) -> ActivationTrace {
    let mut it = seed.iter().cycle();
    let layers = (0..layers)
        .map(|_| {
            let maps: Vec<Matrix> = (0..heads)
                .map(|_| {
                    let scores = Matrix::from_fn(j, j, |_, _| *it.next().unwrap());
                    softmax_rows(&scores, Mask::Causal).unwrap()
                })
                .collect();
            LayerTrace {
                head_attention: Tensor3::stack(&maps).unwrap(),
                mlp_input_hidden: Matrix::from_fn(j, 3, |_, _| *it.next().unwrap()),
            }
        })
        .collect();
    ActivationTrace { seq_len: j, layers }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_shift_invariant(m in matrix(5, 5), shift in -10.0f64..10.0) {
        let a = softmax_rows(&m, Mask::None).unwrap();
        let b = softmax_rows(&m.map(|v| v + shift), Mask::None).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        for r in 0..a.rows() {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal(m in matrix(7, 7)) {
        let svd = svd_thin(&m).unwrap();
        let err = svd.reconstruct().sub(&m).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-8 * m.frobenius_norm().max(1e-300));
        prop_assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(svd.sigma.iter().all(|&s| s >= 0.0));
        let vvt = svd.vt.matmul_t(&svd.vt).unwrap();
        prop_assert!(vvt.max_abs_diff(&Matrix::identity(vvt.rows())) < 1e-9);
        let utu = svd.u.gram();
        prop_assert!(utu.max_abs_diff(&Matrix::identity(utu.rows())) < 1e-9);
    }

    #[test]
    fn eckart_young_residual(m in matrix(6, 6), k_frac in 0.0f64..1.0) {
        let svd = svd_thin(&m).unwrap();
        let r = svd.sigma.len();
        let k = 1 + ((r - 1) as f64 * k_frac) as usize;
        prop_assume!(svd.sigma[k - 1] > 1e-6 * svd.sigma[0]);
        let s = extract_subspace(1, &m, k).unwrap();
        let p = projector_from_basis(&s.basis).unwrap();
        let resid = m.sub(&m.matmul(&p).unwrap()).unwrap().frobenius_norm().powi(2);
        let tail: f64 = svd.sigma[k..].iter().map(|x| x * x).sum();
        prop_assert!((resid - tail).abs() < 1e-8);
    }

    #[test]
    fn subspace_span_survives_row_permutation(m in matrix(6, 5)) {
        let svd = svd_thin(&m).unwrap();
        prop_assume!(svd.sigma.len() < 2 || svd.sigma[0] - svd.sigma[1] > 1e-3);
        prop_assume!(svd.sigma[0] > 1e-6);
        let rows: Vec<Vec<f64>> = (0..m.rows()).rev().map(|r| m.row(r).to_vec()).collect();
        let flipped = Matrix::from_rows(&rows).unwrap().scale(-1.0);
        let a = projector_from_basis(&extract_subspace(1, &m, 1).unwrap().basis).unwrap();
        let b = projector_from_basis(&extract_subspace(1, &flipped, 1).unwrap().basis).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn projector_fixes_its_span(b in basis(10, 4), coeffs in prop::collection::vec(-2.0f64..2.0, 4)) {
        let p = projector_from_basis(&b).unwrap();
        let x = b.mat_vec(&coeffs[..b.cols()]).unwrap();
        let px = p.mat_vec(&x).unwrap();
        let diff: f64 = px.iter().zip(&x).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-9);
        prop_assert!(p.matmul(&p).unwrap().max_abs_diff(&p) < 1e-9);
        prop_assert!((p.trace() - b.cols() as f64).abs() < 1e-9);
    }

    #[test]
    fn null_operator_acts_on_span_only(b in basis(10, 4), s in 0.0f64..=1.0, w in prop::collection::vec(-1.0f64..1.0, 10)) {
        let d = b.rows();
        let sub = subspace(b.clone());
        let n = weighted_null_operator(&sub, s).unwrap();
        prop_assert_eq!(n.clone(), n.transpose());
        for c in 0..b.cols() {
            let v = b.column(c);
            let nv = n.mat_vec(&v).unwrap();
            for (a, x) in nv.iter().zip(&v) {
                prop_assert!((a - (1.0 - s) * x).abs() < 1e-9);
            }
        }
        // Component of w orthogonal to the span is left alone.
        let p = projector_from_basis(&b).unwrap();
        let pw = p.mat_vec(&w[..d]).unwrap();
        let perp: Vec<f64> = w[..d].iter().zip(&pw).map(|(a, c)| a - c).collect();
        let nperp = n.mat_vec(&perp).unwrap();
        for (a, x) in nperp.iter().zip(&perp) {
            prop_assert!((a - x).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_on_equal(p in distribution(8), q in distribution(8)) {
        let kl = kl_histogram(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl_histogram(&p, &p).unwrap(), 0.0);
        let equal = p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-12);
        prop_assert_eq!(kl <= 1e-12, equal);
    }

    #[test]
    fn his_profile_ignores_pair_order(seed in prop::collection::vec(-4.0f64..4.0, 7..40), n in 2usize..5) {
        let pairs: Vec<_> = (0..n)
            .map(|i| {
                let s: Vec<f64> = seed.iter().map(|v| v * (i + 1) as f64).collect();
                let t: Vec<f64> = seed.iter().rev().map(|v| v + i as f64).collect();
                (causal_trace(3, 2, 3 + i % 2, &s), causal_trace(3, 2, 3 + i % 2, &t))
            })
            .collect();
        let mut rev = pairs.clone();
        rev.reverse();
        for aggregation in [Aggregation::Pooled, Aggregation::PerPairMean] {
            let cfg = HisConfig { aggregation, ..HisConfig::default() };
            let a = his_profile(&pairs, &cfg).unwrap();
            let b = his_profile(&rev, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.his_raw - y.his_raw).abs() < 1e-12);
            }
        }
        let a = his_profile(&pairs, &HisConfig::default()).unwrap();
        let lo = a.iter().map(|l| l.his_norm).fold(f64::INFINITY, f64::min);
        let hi = a.iter().map(|l| l.his_norm).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo == 0.0 && hi == 1.0 || a.iter().all(|l| l.his_norm == 0.5));
        for l in &a {
            prop_assert!(l.his_raw >= 0.0);
            prop_assert!((l.his_complement - (1.0 - l.his_norm)).abs() <= 1e-12);
        }
    }

    #[test]
    fn doubling_bins_keeps_zero_set(seed in prop::collection::vec(-4.0f64..4.0, 7..30)) {
        let t = causal_trace(2, 2, 4, &seed);
        let shifted: Vec<f64> = seed.iter().map(|v| v * 1.7).collect();
        let mut u = causal_trace(2, 2, 4, &shifted);
        u.layers[0] = t.layers[0].clone();
        let pairs = vec![(t, u)];
        let b100 = his_profile(&pairs, &HisConfig::default()).unwrap();
        let b200 = his_profile(&pairs, &HisConfig { num_bins: 200, ..HisConfig::default() }).unwrap();
        prop_assert_eq!(b100[0].his_raw, 0.0);
        prop_assert_eq!(b200[0].his_raw, 0.0);
        for (a, b) in b100.iter().zip(&b200) {
            prop_assert_eq!(a.his_raw == 0.0, b.his_raw == 0.0);
        }
    }

    #[test]
    fn weighted_feature_in_convex_hull(w in prop::collection::vec(0.01f64..1.0, 1..6), h in prop::collection::vec(-5.0f64..5.0, 18)) {
        let j = w.len();
        let total: f64 = w.iter().sum();
        let pi: Vec<f64> = w.iter().map(|x| x / total).collect();
        let hidden = Matrix::from_fn(j, 3, |r, c| h[(r * 3 + c) % h.len()]);
        let z = attention_weighted_feature(&pi, &hidden).unwrap();
        for (c, zc) in z.iter().enumerate() {
            let col = hidden.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*zc >= lo - 1e-12 && *zc <= hi + 1e-12);
        }
    }

    #[test]
    fn profile_is_a_distribution(seed in prop::collection::vec(-4.0f64..4.0, 1..30), j in 1usize..7) {
        let t = causal_trace(1, 1, j, &seed);
        let pi = positional_profile(&t.layers[0].head_attention.slab(0));
        prop_assert!(pi.iter().all(|&p| p >= 0.0));
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chair_metrics_are_consistent(
        captions in prop::collection::vec((prop::collection::btree_set(0u32..6, 0..4), prop::collection::btree_set(0u32..6, 1..4)), 1..8)
    ) {
        let records: Vec<CaptionRecord> = captions
            .iter()
            .enumerate()
            .map(|(i, (m, g))| CaptionRecord { image_id: i as u64, mentioned_objects: m.clone(), ground_truth_objects: g.clone() })
            .collect();
        let r = evaluate_chair(&records).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.chair_s) && (0.0..=1.0).contains(&r.chair_i));
        prop_assert_eq!(r.chair_s == 0.0, r.chair_i == 0.0);
        let mut rev = records.clone();
        rev.reverse();
        prop_assert_eq!(evaluate_chair(&rev).unwrap(), r.clone());
        let mut more = records.clone();
        let gt = records[0].ground_truth_objects.clone();
        more.push(CaptionRecord { image_id: 99, mentioned_objects: gt.clone(), ground_truth_objects: gt });
        let r2 = evaluate_chair(&more).unwrap();
        prop_assert!(r2.chair_s <= r.chair_s + 1e-15 && r2.chair_i <= r.chair_i + 1e-15);
    }

    #[test]
    fn corpus_is_a_pure_function(seed in any::<u64>(), n in 1usize..20) {
        let world = SyntheticWorldConfig {
            num_objects: 6,
            cooccurrence: (0..6).map(|a| (0..6).map(|b| if a == b { 1.0 } else { ((a + b) % 3) as f64 * 0.25 }).collect()).collect(),
            num_pairs: n,
            seed,
            scene_size: 3,
            object_names: None,
        };
        let a = generate_pairs(&world).unwrap();
        prop_assert_eq!(&a, &generate_pairs(&world).unwrap());
        for p in &a {
            let diff: Vec<_> = p.hallucinated_objects.difference(&p.truthful_objects).collect();
            prop_assert_eq!(diff.len(), 1);
        }
    }
}

fn toy() -> hime_core::decoder::DecoderWeights {
    init_decoder(&DecoderConfig {
        vocab_size: 8,
        embed_dim: 6,
        num_heads: 2,
        num_layers: 2,
        mlp_dim: 5,
        max_seq_len: 8,
        seed: 9,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn full_strength_edit_is_idempotent(b in basis(6, 3).prop_filter("width", |b| b.rows() == 6), sides in prop_oneof![Just(Sides::Up), Just(Sides::Down), Just(Sides::Both)]) {
        let w = toy();
        let plan = EditPlan {
            layers: BTreeMap::from([(2, LayerEdit { subspace: subspace(b), strength: 1.0 })]),
            sides,
        };
        let (once, report) = apply_edit(&w, &plan).unwrap();
        let (twice, _) = apply_edit(&once, &plan).unwrap();
        prop_assert!(once.layers[1].mlp_up.max_abs_diff(&twice.layers[1].mlp_up) < 1e-9);
        prop_assert!(once.layers[1].mlp_down.max_abs_diff(&twice.layers[1].mlp_down) < 1e-9);
        prop_assert_eq!(&once.layers[0], &w.layers[0]);
        prop_assert_eq!(&once.token_embedding, &w.token_embedding);
        prop_assert_eq!(&once.layers[1].wq, &w.layers[1].wq);
        let k = plan.layers[&2].subspace.rank();
        prop_assert_eq!(report.layers[0].reduced_eigenvalues, k);
        prop_assert_eq!(report.layers[0].unit_eigenvalues, 6 - k);
    }

    #[test]
    fn edit_is_lipschitz_in_strength(b in basis(6, 3).prop_filter("width", |b| b.rows() == 6), s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0) {
        let w = toy();
        let edit = |s: f64| {
            let plan = EditPlan {
                layers: BTreeMap::from([(1, LayerEdit { subspace: subspace(b.clone()), strength: s })]),
                sides: Sides::Both,
            };
            apply_edit(&w, &plan).unwrap().0
        };
        let (a, c) = (edit(s1), edit(s2));
        let p = projector_from_basis(&b).unwrap();
        let up_bound = (s1 - s2).abs() * w.layers[0].mlp_up.matmul(&p).unwrap().frobenius_norm();
        let down_bound = (s1 - s2).abs() * p.matmul(&w.layers[0].mlp_down).unwrap().frobenius_norm();
        prop_assert!(a.layers[0].mlp_up.sub(&c.layers[0].mlp_up).unwrap().frobenius_norm() <= up_bound + 1e-12);
        prop_assert!(a.layers[0].mlp_down.sub(&c.layers[0].mlp_down).unwrap().frobenius_norm() <= down_bound + 1e-12);
    }

    #[test]
    fn weaker_his_gets_larger_change(b in basis(6, 2).prop_filter("width", |b| b.rows() == 6), raw in prop::collection::vec(0.0f64..3.0, 2)) {
        prop_assume!((raw[0] - raw[1]).abs() > 1e-6);
        let mut w = toy();
        w.layers[1] = w.layers[0].clone();
        let scores = hime_core::his::normalize_profile(&raw);
        let layers = scores
            .iter()
            .map(|s| (s.layer, LayerEdit { subspace: subspace(b.clone()), strength: s.his_complement }))
            .collect();
        let (_, report) = apply_edit(&w, &EditPlan { layers, sides: Sides::Both }).unwrap();
        let (lo, hi) = if scores[0].his_norm < scores[1].his_norm { (0, 1) } else { (1, 0) };
        prop_assert!(report.layers[lo].relative_change_up >= report.layers[hi].relative_change_up);
        prop_assert!(report.layers[lo].relative_change_down >= report.layers[hi].relative_change_down);
    }
}

#[test]
fn zero_strength_everywhere_is_bit_identical() {
    let w = toy();
    let b = Matrix::from_fn(6, 1, |r, _| if r == 0 { 1.0 } else { 0.0 });
    let layers = (1..=2)
        .map(|l| {
            (
                l,
                LayerEdit {
                    subspace: subspace(b.clone()),
                    strength: 0.0,
                },
            )
        })
        .collect();
    let (out, _) = apply_edit(
        &w,
        &EditPlan {
            layers,
            sides: Sides::Both,
        },
    )
    .unwrap();
    assert_eq!(out, w);
}

#[test]
fn full_strength_up_annihilates_basis() {
    let w = toy();
    let s2 = 0.5f64.sqrt();
    let b = Matrix::from_fn(6, 1, |r, _| if r < 2 { s2 } else { 0.0 });
    let plan = EditPlan {
        layers: BTreeMap::from([(
            1,
            LayerEdit {
                subspace: subspace(b.clone()),
                strength: 1.0,
            },
        )]),
        sides: Sides::Up,
    };
    let (out, _) = apply_edit(&w, &plan).unwrap();
    let wv = out.layers[0].mlp_up.matmul(&b).unwrap();
    assert!(wv.as_slice().iter().all(|v| v.abs() < 1e-9));
    assert_eq!(out.layers[0].mlp_down, w.layers[0].mlp_down);
}

#[test]
fn edit_rejects_mismatched_subspace() {
    let w = toy();
    let b = Matrix::from_fn(4, 1, |r, _| if r == 0 { 1.0 } else { 0.0 });
    let plan = EditPlan {
        layers: BTreeMap::from([(
            2,
            LayerEdit {
                subspace: subspace(b),
                strength: 0.5,
            },
        )]),
        sides: Sides::Both,
    };
    let err = apply_edit(&w, &plan).unwrap_err();
    assert!(err.to_string().contains("layer 2"), "{err}");
    let plan = EditPlan {
        layers: BTreeMap::from([(
            3,
            LayerEdit {
                subspace: subspace(Matrix::from_fn(6, 1, |r, _| (r == 0) as u8 as f64)),
                strength: 0.5,
            },
        )]),
        sides: Sides::Both,
    };
    assert!(apply_edit(&w, &plan).is_err());
}
