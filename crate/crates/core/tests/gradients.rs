//! Analytic gradients against central finite differences, per layer type.

mod common;

use common::*;
use simdiff::mask::layout_parallel_batch;
use simdiff::model::{loss_and_grads, DenoiserParams, DiffusionInput, LossInput, ModelConfig, SelfCond};
use simdiff::rng::RngStream;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn check(cfg: ModelConfig, with_cond: bool, n_blocks: usize, label: &str) {
    let params = randomized::<f64>(&cfg, 21, 0.2);
    assert!(params.param_count() <= 5000, "{label}: {} params", params.param_count());
    let mut rng = RngStream::named(21, "grad-inputs");
    let prompt = random_tokens(2, cfg.vocab, &mut rng);
    let target = random_tokens(2 * n_blocks, cfg.vocab, &mut rng);
    let layout = layout_parallel_batch(&prompt, &target, 2).unwrap();
    let noisy = random_logits(2 * n_blocks, cfg.vocab, 3.0, &mut rng);
    let cond = random_logits(2 * n_blocks, cfg.vocab, 2.0, &mut rng);
    let times: Vec<usize> = (0..n_blocks).map(|k| 2 + 3 * k).collect();
    let mut loss_mask = vec![true; 2 * n_blocks];
    loss_mask[0] = false;
    let input = LossInput::Diffusion {
        input: DiffusionInput {
            layout: &layout,
            noisy: &noisy,
            self_cond: if with_cond { SelfCond::Logits(&cond) } else { SelfCond::Absent },
            block_times: &times,
            ctx_time: 5,
        },
        loss_mask: &loss_mask,
    };
    let (_, grads) = loss_and_grads(&params, &input).unwrap();
    let (worst, at, n) = finite_difference_check(
        &params,
        &grads,
        |p: &DenoiserParams<f64>| loss_and_grads(p, &input).unwrap().0,
        STEP,
        FLOOR,
    );
    assert_eq!(n, params.param_count());
    assert!(worst < TOL, "{label}: worst relative error {worst:e} at {at}");
}

#[test]
fn diffusion_gradients_single_block() {
    check(tiny_config(), false, 1, "single block");
}

#[test]
fn diffusion_gradients_parallel_blocks_with_self_conditioning() {
    check(tiny_config(), true, 3, "parallel + self-cond");
}

#[test]
fn diffusion_gradients_two_layers_tied() {
    let cfg = ModelConfig { n_layers: 2, tie_embeddings: true, ..tiny_config() };
    check(cfg, true, 2, "two layers tied");
}

#[test]
fn autoregressive_gradients() {
    let cfg = tiny_config();
    let params = randomized::<f64>(&cfg, 22, 0.2);
    let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
    let mask = [true, true, false, true, true, true, true];
    let input = LossInput::<f64>::Autoregressive { tokens: &tokens, loss_mask: &mask };
    let (_, grads) = loss_and_grads(&params, &input).unwrap();
    let (worst, at, _) = finite_difference_check(
        &params,
        &grads,
        |p: &DenoiserParams<f64>| loss_and_grads(p, &input).unwrap().0,
        STEP,
        FLOOR,
    );
    assert!(worst < TOL, "worst relative error {worst:e} at {at}");
}
