use uthp::gradcheck::{grad_check, GradCheckSetup};
use uthp::LayerSharing;

#[test]
fn full_objective_matches_finite_differences() {
    let report = grad_check(&GradCheckSetup::default()).unwrap();
    assert!(report.checked > 500, "{report:?}");
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn ablated_variants_match_finite_differences() {
    let base = GradCheckSetup::default();
    let variants = [
        GradCheckSetup {
            model: uthp::ModelConfig {
                act_enabled: false,
                max_n: 3,
                ..base.model.clone()
            },
            ..base.clone()
        },
        GradCheckSetup {
            model: uthp::ModelConfig {
                act_enabled: false,
                layer_sharing: LayerSharing::Stacked,
                use_cnn_ffn: false,
                d_rnn: 0,
                ..base.model.clone()
            },
            seed: 3,
            ..base.clone()
        },
    ];
    for setup in variants {
        let report = grad_check(&setup).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
