//! Three-pair corpus (seed 7) on the two-layer toy decoder, against values
//! produced by tests/oracles/toy_decoder.py.

use std::collections::BTreeMap;

use hime_core::corpus::{generate_pairs, SyntheticWorldConfig};
use hime_core::decoder::{init_decoder, ActivationTrace, DecoderConfig, DecoderWeights};
use hime_core::editor::{apply_edit, EditPlan, LayerEdit, Sides};
use hime_core::his::{his_profile, HisConfig};
use hime_core::numerics::svd_thin;
use hime_core::subspace::{extract_subspace, layer_difference_matrix};

const ORACLE_HIS_RAW: [f64; 2] = [1.3506467250069363, 0.5336627423984354];
const ORACLE_SIGMA: [[f64; 2]; 2] = [
    [0.21042493309972768, 0.12164678968022391],
    [0.18763864565387123, 0.12464717903619019],
];
const ORACLE_DELTA_UP_FRO: [f64; 2] = [0.400428924208475, 0.5174939543101026];

fn model() -> DecoderWeights {
    init_decoder(&DecoderConfig {
        vocab_size: 8,
        embed_dim: 4,
        num_heads: 2,
        num_layers: 2,
        mlp_dim: 8,
        max_seq_len: 8,
        seed: 42,
    })
    .unwrap()
}

fn traces(w: &DecoderWeights) -> Vec<(u64, ActivationTrace, ActivationTrace)> {
    let world = SyntheticWorldConfig {
        num_objects: 2,
        cooccurrence: vec![vec![1.0, 0.9], vec![0.9, 1.0]],
        num_pairs: 3,
        seed: 7,
        scene_size: 1,
        object_names: None,
    };
    let pairs = generate_pairs(&world).unwrap();
    let tokens: Vec<_> = pairs
        .iter()
        .map(|p| (p.truthful_tokens.clone(), p.hallucinated_tokens.clone()))
        .collect();
    assert_eq!(
        tokens,
        vec![
            (vec![1, 4, 2, 6, 0], vec![1, 4, 2, 6, 5, 0]),
            (vec![1, 3, 2, 5, 0], vec![1, 3, 2, 5, 6, 0]),
            (vec![1, 3, 2, 5, 0], vec![1, 3, 2, 5, 6, 0]),
        ]
    );
    pairs
        .iter()
        .map(|p| {
            let (_, a) = w.forward_capture(&p.truthful_tokens).unwrap();
            let (_, b) = w.forward_capture(&p.hallucinated_tokens).unwrap();
            (p.image_id, a, b)
        })
        .collect()
}

#[test]
fn his_raw_matches_oracle() {
    let w = model();
    let t: Vec<_> = traces(&w).into_iter().map(|(_, a, b)| (a, b)).collect();
    let profile = his_profile(&t, &HisConfig::default()).unwrap();
    for (s, want) in profile.iter().zip(ORACLE_HIS_RAW) {
        assert!(
            (s.his_raw - want).abs() < 1e-9,
            "layer {}: {} vs {want}",
            s.layer,
            s.his_raw
        );
    }
    assert_eq!(profile[0].his_complement, 0.0);
    assert_eq!(profile[1].his_complement, 1.0);
}

#[test]
fn difference_spectrum_matches_oracle() {
    let w = model();
    let t = traces(&w);
    for layer in 0..2 {
        let z = layer_difference_matrix(&t, layer, false).unwrap();
        assert_eq!(z.shape(), (3, 4));
        let sigma = svd_thin(&z).unwrap().sigma;
        for (s, want) in sigma.iter().zip(ORACLE_SIGMA[layer]) {
            assert!((s - want).abs() < 1e-9);
        }
    }
}

#[test]
fn half_strength_up_change_matches_oracle() {
    let w = model();
    let t = traces(&w);
    let mut layers = BTreeMap::new();
    for layer in 0..2 {
        let z = layer_difference_matrix(&t, layer, false).unwrap();
        let subspace = extract_subspace(layer + 1, &z, 1).unwrap();
        layers.insert(
            layer + 1,
            LayerEdit {
                subspace,
                strength: 0.5,
            },
        );
    }
    let plan = EditPlan {
        layers,
        sides: Sides::Up,
    };
    let (edited, report) = apply_edit(&w, &plan).unwrap();
    for layer in 0..2 {
        let up = &w.layers[layer].mlp_up;
        let delta = edited.layers[layer].mlp_up.sub(up).unwrap();
        let v = &plan.layers[&(layer + 1)].subspace.basis;
        let direct = up.matmul(&v.matmul_t(v).unwrap()).unwrap().frobenius_norm() * 0.5;
        assert!((delta.frobenius_norm() - direct).abs() < 1e-12);
        assert!((delta.frobenius_norm() - ORACLE_DELTA_UP_FRO[layer]).abs() < 1e-9);
        assert_eq!(edited.layers[layer].mlp_down, w.layers[layer].mlp_down);
        assert_eq!(report.layers[layer].relative_change_down, 0.0);
        assert!((report.layers[layer].residual_energy_up - 0.5).abs() < 1e-12);
    }
    assert_eq!(edited.token_embedding, w.token_embedding);
    assert_eq!(edited.output, w.output);
}
