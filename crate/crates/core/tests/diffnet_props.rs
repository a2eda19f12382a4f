mod common;

use common::random_vec;
use icbf_swarm::diffnet::{encode, EncoderNet, Observation, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn icbf_gradients_match_central_differences(seed in any::<u64>()) {
        let err = common::icbf_gradient_error(seed);
        prop_assert!(err <= REL_TOL, "relative error {err}");
    }

    #[test]
    fn policy_gradients_match_central_differences(seed in any::<u64>()) {
        let err = common::policy_gradient_error(seed);
        prop_assert!(err <= REL_TOL, "relative error {err}");
    }

    #[test]
    fn encoder_output_length_is_fixed(seed in any::<u64>(), k in 1usize..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderNet::new(4, 7, &mut rng);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| random_vec(4, 2.0, &mut rng)).collect();
        let out = encode(&enc, &Observation::from_rows(4, &rows).unwrap()).unwrap();
        prop_assert_eq!(out.len(), 7);
        prop_assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn dominated_column_leaves_encoding_unchanged(seed in any::<u64>(), k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderNet::new(4, 6, &mut rng);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| random_vec(4, 2.0, &mut rng)).collect();
        let before = encode(&enc, &Observation::from_rows(4, &rows).unwrap()).unwrap();
        // A scaled-down copy of an existing column is dominated after ReLU.
        let mut extended = rows.clone();
        let pick = rng.gen_range(0..k);
        let c = rng.gen_range(0.0..1.0);
        extended.push(rows[pick].iter().map(|v| v * c).collect());
        let after = encode(&enc, &Observation::from_rows(4, &extended).unwrap()).unwrap();
        prop_assert_eq!(before, after);
    }
}

#[test]
fn encoding_is_exactly_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let enc = EncoderNet::new(4, 16, &mut rng);
    let rows: Vec<Vec<f64>> = (0..12).map(|_| random_vec(4, 3.0, &mut rng)).collect();
    let reference = encode(&enc, &Observation::from_rows(4, &rows).unwrap()).unwrap();
    let mut shuffled = rows.clone();
    for _ in 0..1000 {
        shuffled.shuffle(&mut rng);
        let out = encode(&enc, &Observation::from_rows(4, &shuffled).unwrap()).unwrap();
        assert_eq!(out, reference);
    }
}

#[test]
fn identity_encoder_hand_example() {
    let enc = EncoderNet {
        w: Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
    };
    let obs = Observation::from_rows(2, &[vec![1.0, -5.0], vec![3.0, 2.0]]).unwrap();
    assert_eq!(encode(&enc, &obs).unwrap(), vec![3.0, 2.0]);
}

#[test]
fn squared_norm_of_u_gradient() {
    // h(u) = ‖u‖² on the tape.
    let mut tape = Tape::new();
    let u = tape.leaf(Tensor::row_vector(&[1.0, 2.0]));
    let sq = tape.mul(u, u);
    let h = tape.sum(sq);
    let g = tape.backward(h).unwrap();
    assert_eq!(g.wrt(&tape, u).data, vec![2.0, 4.0]);
}
