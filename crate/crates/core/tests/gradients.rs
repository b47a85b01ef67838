mod common;

use common::{fd_check, fd_setup};

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in [3, 4] {
        let r = fd_check(&fd_setup(seed, 3, 32));
        assert_eq!(r.checked, 288);
        assert!(r.passes(1e-4), "seed {seed}: {r:?}");
    }
}
