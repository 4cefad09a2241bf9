mod common;

use common::checks::*;

#[test]
fn attention_matches_loop_oracle() {
    for seed in 0..5 {
        let err = attention_vs_oracle(seed);
        assert!(err <= 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn enhanced_layer_matches_stepwise_oracle() {
    for seed in 0..5 {
        let err = cma_vs_oracle(seed, true);
        assert!(err <= 1e-9, "seed {seed}: {err:e}");
    }
}

#[test]
fn plain_layer_matches_stepwise_oracle() {
    for seed in 0..5 {
        let err = cma_vs_oracle(100 + seed, false);
        assert!(err <= 1e-9, "seed {seed}: {err:e}");
    }
}

#[test]
fn identity_fusion_reduces_to_the_plain_layer() {
    for seed in 0..5 {
        let err = fused_out_low_branch_deviation(seed);
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
    }
}

#[test]
fn disabled_enhancement_is_the_plain_decoder() {
    for seed in 0..2 {
        let (err, params_match) = degenerate_decoder_deviation(seed);
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
        assert!(params_match);
    }
}

#[test]
fn masked_out_positions_do_not_leak() {
    for seed in 0..5 {
        assert_eq!(hidden_positions_change(seed), 0.0, "seed {seed}");
    }
}
