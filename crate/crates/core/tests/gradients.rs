// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic gradients against central finite differences.

mod common;

use common::{four_layer_model, gradient_check};
use diffclean::networks::ModelConfig;
use diffclean::training::Loss;

fn assert_clean(cfg: &ModelConfig, loss: Loss, seed: u64, per_group: usize) {
    let r = gradient_check(cfg, loss, seed, per_group);
    assert!(r.checked >= 50, "only {} entries checked", r.checked);
    assert!(r.failures.is_empty(), "{}", r.failures.join("\n"));
}

#[test]
fn robust_loss_gradients_match_finite_differences() {
    for seed in [1, 2] {
        assert_clean(&four_layer_model(), Loss::Huber { delta: 1.0 }, seed, 30);
    }
}

#[test]
fn squared_loss_gradients_match_finite_differences() {
    assert_clean(&four_layer_model(), Loss::Squared, 3, 30);
}

#[test]
fn unconditional_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        conditional: false,
        ..four_layer_model()
    };
    assert_clean(&cfg, Loss::Huber { delta: 1.0 }, 4, 60);
}

#[test]
fn single_layer_wide_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        context_len: 3,
        hidden: 12,
        gru_hidden: 7,
        gru_layers: 1,
        blocks: 1,
        step_embed_dim: 4,
        conditional: true,
    };
    assert_clean(&cfg, Loss::Huber { delta: 0.7 }, 5, 30);
}
