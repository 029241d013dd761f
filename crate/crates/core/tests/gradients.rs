mod common;

use common::grads::{families, TOLERANCE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_finite_differences() {
    for (k, (name, family)) in families().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        for n in 0..5 {
            let err = family(&mut rng);
            assert!(err < TOLERANCE, "{name} instance {n}: relative error {err:e}");
        }
    }
}
