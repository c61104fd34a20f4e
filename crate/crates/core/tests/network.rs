mod common;

use common::{max_abs_diff, planted_rotated};
use dictnet_core::deep_net::{encode_layers, train_ddnn};
use dictnet_core::dict_layer::code_least_squares;
use dictnet_core::lcksvd::{build_targets, train_lcksvd1};
use dictnet_core::numerics::seeded_gaussian;
use dictnet_core::{
    encode, evaluate, predict, Error, InversionGuard, Matrix, NetworkSpec, RngSeed, TestCoder,
    Variant,
};
use proptest::prelude::*;

/// Three classes on orthogonal 4-dimensional cones in `R^32`, 100 samples
/// each, noise 1e-2. The first layer has as many atoms as input dimensions,
/// which leaves plain least-squares codes badly conditioned, so every layer
/// uses ridge 1e-4.
fn toy(seed: u64) -> (Matrix, Vec<i64>) {
    let (x, y) = planted_rotated(32, 300, 3, 4, 1e-2, 1.0, seed);
    (x, y.into_iter().map(|v| v as i64 * 10 + 1).collect())
}

fn toy_spec(variant: Variant, atoms: &[usize], seed: u64) -> NetworkSpec {
    let mut spec = NetworkSpec::new(variant, atoms, RngSeed(seed));
    for layer in &mut spec.layers {
        layer.ridge = 1e-4;
    }
    spec
}

#[test]
fn planted_toy_is_learned_by_both_variants() {
    let (x, labels) = toy(0);
    for variant in [Variant::Ddnn1, Variant::Ddnn2] {
        let fit = train_ddnn(&x, &labels, &toy_spec(variant, &[32, 16], 0)).unwrap();
        let m = evaluate(&fit.network, &x, &labels).unwrap();
        assert!(m.accuracy >= 0.95, "{variant:?}: {}", m.accuracy);
        assert_eq!(fit.network.class_labels, vec![1, 11, 21]);
        let p = predict(&fit.network, &x).unwrap();
        assert_eq!(p.scores.shape(), (3, 300));
    }
}

#[test]
fn single_layer_is_the_final_layer_on_raw_data() {
    let (x, labels) = toy(2);
    let spec = toy_spec(Variant::Ddnn1, &[6], 3);
    let fit = train_ddnn(&x, &labels, &spec).unwrap();
    let y: Vec<usize> = labels.iter().map(|l| (*l / 10) as usize).collect();
    let direct = train_lcksvd1(&x, &build_targets(&y, 3).unwrap(), 1.0, &spec.layers[0]).unwrap();
    assert_eq!(fit.network.final_layer, direct.model);
    assert!(fit.network.layers.is_empty());

    let z = encode(&fit.network, &x).unwrap();
    let direct_codes = code_least_squares(&direct.model.dictionary, &x, 1e-4).unwrap();
    assert_eq!(z, direct_codes);
}

#[test]
fn training_is_deterministic() {
    let (x, labels) = toy(4);
    let spec = toy_spec(Variant::Ddnn2, &[32, 16, 8], 9);
    let a = train_ddnn(&x, &labels, &spec).unwrap();
    let b = train_ddnn(&x, &labels, &spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encoding_reproduces_noiseless_training_codes() {
    let (x, labels) = toy(5);
    let mut spec = toy_spec(Variant::Ddnn1, &[32, 16, 8], 1);
    spec.guard = InversionGuard::noiseless(1e-6);
    let fit = train_ddnn(&x, &labels, &spec).unwrap();
    let codes = encode_layers(&fit.network, &x).unwrap();
    for k in 0..fit.network.layers.len() {
        let diff = max_abs_diff(&codes[k], &fit.codes[k]);
        assert!(diff <= 1e-6, "layer {k}: {diff}");
    }
}

#[test]
fn dimensions_chain_and_atoms_are_unit_norm() {
    let (x, labels) = toy(6);
    for variant in [Variant::Ddnn1, Variant::Ddnn2] {
        let fit = train_ddnn(&x, &labels, &toy_spec(variant, &[24, 12, 6], 2)).unwrap();
        let net = &fit.network;
        let mut rows = x.rows();
        for layer in &net.layers {
            assert_eq!(layer.dictionary.rows(), rows);
            rows = layer.dictionary.cols();
        }
        assert_eq!(net.final_layer.dictionary.rows(), rows);
        let all = net.layers.iter().map(|l| &l.dictionary).chain([&net.final_layer.dictionary]);
        for d in all {
            for n in d.column_sq_norms() {
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
        assert!(net.greedy_objective().is_finite());
        assert_eq!(net.layer_objectives().len(), 3);
    }
}

#[test]
fn encode_shapes_and_errors() {
    let (x, labels) = toy(7);
    let fit = train_ddnn(&x, &labels, &toy_spec(Variant::Ddnn1, &[16, 8], 0)).unwrap();
    let one = x.column_block(0, 1);
    assert_eq!(encode(&fit.network, &one).unwrap().shape(), (8, 1));
    assert!(matches!(
        encode(&fit.network, &Matrix::zeros(5, 2)),
        Err(Error::ShapeMismatch { .. })
    ));
    assert_eq!(
        evaluate(&fit.network, &x.column_block(0, 1), &[99]).unwrap_err(),
        Error::UnknownLabel { value: 99 }
    );
}

#[test]
fn layer_errors_carry_the_layer_index() {
    let x = seeded_gaussian(4, 10, RngSeed(0)).map(f64::abs);
    let labels: Vec<i64> = (0..10).map(|i| i % 2).collect();
    let mut spec = NetworkSpec::new(Variant::Ddnn1, &[4, 2], RngSeed(0));
    // Codes of the first layer become signed after the inverse activation,
    // which the multiplicative solver of the second layer rejects.
    spec.layers[1].solver = dictnet_core::DictionarySolver::Multiplicative;
    match train_ddnn(&x, &labels, &spec) {
        Err(Error::Layer { index: 1, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn omp_test_coder_runs() {
    let (x, labels) = toy(8);
    let mut spec = toy_spec(Variant::Ddnn1, &[16, 8], 0);
    spec.test_coder = TestCoder::Omp { sparsity: 3 };
    let fit = train_ddnn(&x, &labels, &spec).unwrap();
    let z = encode(&fit.network, &x).unwrap();
    for c in 0..z.cols() {
        assert!(z.column(c).iter().filter(|v| **v != 0.0).count() <= 3);
    }
}

fn small_net(variant: Variant, coder: TestCoder) -> (dictnet_core::TrainedNetwork, Matrix) {
    let (x, labels) = toy(11);
    let mut spec = toy_spec(variant, &[16, 8], 4);
    spec.test_coder = coder;
    (train_ddnn(&x, &labels, &spec).unwrap().network, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predictions_follow_column_permutations(seed in 0u64..1_000) {
        let (net, x) = small_net(Variant::Ddnn1, TestCoder::Mirror);
        let sub = x.column_block(0, 12);
        let mut perm: Vec<usize> = (0..12).collect();
        let mut s = seed;
        for i in (1..12).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = predict(&net, &sub).unwrap();
        let b = predict(&net, &sub.select_columns(&perm)).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            prop_assert_eq!(b.labels[j], a.labels[p]);
        }
    }

    #[test]
    fn encoding_is_column_independent(col in 0usize..300) {
        for (variant, coder, tol) in [
            (Variant::Ddnn1, TestCoder::Mirror, 1e-12),
            (Variant::Ddnn2, TestCoder::Mirror, 1e-12),
            (Variant::Ddnn1, TestCoder::Omp { sparsity: 3 }, 0.0),
        ] {
            let (net, x) = small_net(variant, coder);
            let batch = encode(&net, &x).unwrap();
            let alone = encode(&net, &x.column_block(col, col + 1)).unwrap();
            for r in 0..batch.rows() {
                prop_assert!((batch.get(r, col) - alone.get(r, 0)).abs() <= tol);
            }
        }
    }
}
