mod common;

use common::op_cases::op_cases;

#[test]
fn every_operation_passes_grad_check_on_twenty_seeds() {
    for (name, case) in op_cases() {
        for seed in 0..20 {
            let err = case(seed);
            assert!(err < 1e-5, "{name} seed {seed}: rel err {err}");
        }
    }
}
