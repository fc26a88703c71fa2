//! Property tests for the fusion-weight simplex, masking exactness, task
//! code round trips, and map symmetry.

use proptest::prelude::*;

use tsf_core::codec::{enumerate_tasks, make_task_code};
use tsf_core::fusion::{fusion_weights, initial_weights, tsem, FusionParams};
use tsf_core::tensor::Tensor;

fn finite_params(n: usize, scale: f64) -> impl Strategy<Value = FusionParams<f64>> {
    let wn = 2 * n * n;
    (
        prop::collection::vec(-scale..scale, wn),
        prop::collection::vec(-scale..scale, n),
    )
        .prop_map(move |(w, b)| {
            let mut p = FusionParams::new(n);
            p.w = Tensor::from_vec(&[2 * n, n], w).unwrap();
            p.b = Tensor::from_vec(&[n], b).unwrap();
            p
        })
}

proptest! {
    #[test]
    fn weights_stay_on_masked_simplex(
        params in finite_params(4, 8.0),
        task_idx in 0usize..28,
    ) {
        let code = &enumerate_tasks(4).unwrap()[task_idx];
        let omega0 = initial_weights(code, &params).unwrap();
        prop_assert!(omega0.iter().all(|&v| v > 0.0));
        let w = fusion_weights(&omega0, &code.src_flags()).unwrap();
        let sum: f64 = w.omega().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        for (i, &v) in w.omega().iter().enumerate() {
            prop_assert!(v >= 0.0);
            if !code.is_available(i) {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn task_codes_round_trip(
        n in 2usize..=5,
        seed in any::<u64>(),
    ) {
        let all = enumerate_tasks(n).unwrap();
        let code = &all[(seed % all.len() as u64) as usize];
        let rebuilt = make_task_code(&code.available_indices(), code.target(), n).unwrap();
        prop_assert_eq!(rebuilt.available_indices(), code.available_indices());
        prop_assert_eq!(rebuilt.target(), code.target());
        // mask invariants
        let src = code.src_vec::<f64>();
        let tgt = code.tgt_vec::<f64>();
        prop_assert!(src.iter().sum::<f64>() >= 1.0);
        prop_assert_eq!(tgt.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(src.iter().zip(&tgt).map(|(a, b)| a * b).sum::<f64>(), 0.0);
    }

    #[test]
    fn tsem_nonnegative_and_symmetric(
        a in prop::collection::vec(-1.0f64..1.0, 64),
        b in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let ta = Tensor::from_vec(&[1, 8, 8], a).unwrap();
        let tb = Tensor::from_vec(&[1, 8, 8], b).unwrap();
        let ab = tsem(&ta, &tb).unwrap();
        let ba = tsem(&tb, &ta).unwrap();
        prop_assert!(ab.data().data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(ab.data().data(), ba.data().data());
    }
}
