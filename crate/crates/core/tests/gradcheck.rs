mod common;

use common::{gradcheck_kind, FD_TOL, LAYER_KINDS};

#[test]
fn every_layer_kind_matches_central_differences() {
    for (i, kind) in LAYER_KINDS.iter().enumerate() {
        let err = gradcheck_kind(kind, 10, 100 + i as u64);
        println!("{kind} {err:.2e}");
        assert!(err <= FD_TOL, "{kind}: relative error {err:.3e}");
    }
}
