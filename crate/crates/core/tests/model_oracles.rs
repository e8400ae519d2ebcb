mod common;

use common::*;
use ndarray::{s, Array2};
use simdiff::mask::{build_block_mask, causal_mask, layout_parallel_batch};
use simdiff::model::{
    ar_forward, denoise_block, denoise_forward, encode_context, input_embedding, loss_and_grads,
    AbsentSelfCond, DenoiserParams, DiffusionInput, LossInput, ModelConfig, SelfCond,
};
use simdiff::rng::RngStream;

fn max_abs_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] - v).abs());
        }
    }
    worst
}

#[test]
fn diffusion_forward_matches_naive_oracle() {
    let cfg = tiny_config();
    for (seed, with_cond) in [(1u64, false), (2, true), (3, true)] {
        let params = randomized::<f64>(&cfg, seed, 0.3);
        let mut rng = RngStream::named(seed, "inputs");
        let prompt = random_tokens(3, cfg.vocab, &mut rng);
        let target = random_tokens(4, cfg.vocab, &mut rng);
        let layout = layout_parallel_batch(&prompt, &target, 2).unwrap();
        let noisy = random_logits(4, cfg.vocab, 5.0, &mut rng);
        let cond = random_logits(4, cfg.vocab, 2.0, &mut rng);
        let block_times = [7usize, 3];
        let input = DiffusionInput {
            layout: &layout,
            noisy: &noisy,
            self_cond: if with_cond { SelfCond::Logits(&cond) } else { SelfCond::Absent },
            block_times: &block_times,
            ctx_time: 5,
        };
        let out = denoise_forward(&params, &input).unwrap();

        let mut rows: Vec<OracleRow> = layout
            .context
            .iter()
            .zip(layout.context_positions())
            .map(|(&id, &pos)| OracleRow::Token { id, pos, ctx_time: Some(5) })
            .collect();
        for r in 0..4 {
            rows.push(OracleRow::Noisy {
                logits: noisy.row(r).to_vec(),
                cond: with_cond.then(|| cond.row(r).to_vec()),
                pos: layout.block_positions()[r],
                time: block_times[r / 2],
            });
        }
        let mask: Vec<Vec<bool>> = layout.mask.delta.rows().into_iter().map(|r| r.to_vec()).collect();
        let full = oracle_forward(&params, &rows, &mask);
        let expected = &full[layout.context.len()..];
        let diff = max_abs_diff(&out, expected);
        assert!(diff < 1e-6, "seed {seed}: max diff {diff}");
    }
}

#[test]
fn ar_forward_matches_naive_oracle() {
    for tie in [false, true] {
        let cfg = ModelConfig { tie_embeddings: tie, ..tiny_config() };
        let params = randomized::<f64>(&cfg, 9, 0.3);
        let mut rng = RngStream::named(9, "inputs");
        let prefix = random_tokens(6, cfg.vocab, &mut rng);
        let out = ar_forward(&params, &prefix).unwrap();
        let rows: Vec<OracleRow> = prefix
            .iter()
            .enumerate()
            .map(|(pos, &id)| OracleRow::Token { id, pos, ctx_time: None })
            .collect();
        let mask: Vec<Vec<bool>> = causal_mask(6).rows().into_iter().map(|r| r.to_vec()).collect();
        let diff = max_abs_diff(&out, &oracle_forward(&params, &rows, &mask));
        assert!(diff < 1e-6, "tie={tie}: max diff {diff}");
    }
}

#[test]
fn ar_forward_is_causal() {
    let cfg = tiny_config();
    let params = randomized::<f32>(&cfg, 4, 0.3);
    let base = vec![1u32, 5, 2, 9, 3, 3, 7];
    let out = ar_forward(&params, &base).unwrap();
    for j in 0..base.len() {
        let mut perturbed = base.clone();
        perturbed[j] = (perturbed[j] + 4) % cfg.vocab as u32;
        let other = ar_forward(&params, &perturbed).unwrap();
        assert_eq!(out.slice(s![..j, ..]), other.slice(s![..j, ..]), "row before {j} changed");
    }
    assert_eq!(ar_forward(&params, &[4]).unwrap().nrows(), 1);
    assert!(ar_forward(&params, &[]).is_err());
}

#[test]
fn forward_is_pure() {
    let cfg = tiny_config();
    let params = randomized::<f32>(&cfg, 5, 0.3);
    let layout = layout_parallel_batch(&[1, 2], &[3, 4, 5, 6], 2).unwrap();
    let noisy = Array2::from_shape_fn((4, cfg.vocab), |(i, j)| ((i * 7 + j) % 5) as f32 - 2.0);
    let input = DiffusionInput {
        layout: &layout,
        noisy: &noisy,
        self_cond: SelfCond::Absent,
        block_times: &[4, 4],
        ctx_time: 0,
    };
    assert_eq!(denoise_forward(&params, &input).unwrap(), denoise_forward(&params, &input).unwrap());
}

#[test]
fn absent_and_uniform_self_conditioning_differ_by_a_constant_vector() {
    let cfg = tiny_config();
    let params = randomized::<f64>(&cfg, 6, 0.3);
    let layout = layout_parallel_batch(&[1, 2, 3], &[4, 5, 6, 7, 8, 9], 3).unwrap();
    let mut rng = RngStream::named(6, "inputs");
    let noisy = random_logits(6, cfg.vocab, 5.0, &mut rng);
    let uniform = Array2::<f64>::zeros((6, cfg.vocab));
    let times = [3usize, 8];
    let mk = |sc| DiffusionInput {
        layout: &layout,
        noisy: &noisy,
        self_cond: sc,
        block_times: &times,
        ctx_time: 5,
    };
    let absent = input_embedding(&params, &mk(SelfCond::Absent)).unwrap();
    let with_uniform = input_embedding(&params, &mk(SelfCond::Logits(&uniform))).unwrap();
    let diff = &with_uniform - &absent;
    let expected = params.w_pred.mean_axis(ndarray::Axis(0)).unwrap();
    let ctx = layout.context.len();
    assert!(diff.slice(s![..ctx, ..]).iter().all(|&v| v == 0.0));
    for row in diff.slice(s![ctx.., ..]).rows() {
        for (a, b) in row.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // The uniform-absence flag reproduces the explicit uniform input.
    let mut flagged = params.clone();
    flagged.config.absent_self_cond = AbsentSelfCond::Uniform;
    let flagged_out = input_embedding(&flagged, &mk(SelfCond::Absent)).unwrap();
    assert!((&flagged_out - &with_uniform).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn masked_out_positions_do_not_influence_outputs() {
    let cfg = tiny_config();
    let params = randomized::<f32>(&cfg, 8, 0.3);
    let prompt = [3u32, 1];
    let target = [4u32, 4, 2, 7, 9, 0];
    let layout = layout_parallel_batch(&prompt, &target, 2).unwrap();
    let mut rng = RngStream::named(8, "inputs");
    let noisy = random_logits(6, cfg.vocab, 5.0, &mut rng).mapv(|v| v as f32);
    let times = [2usize, 5, 9];
    let run = |layout: &simdiff::mask::ParallelLayout| {
        denoise_forward(
            &params,
            &DiffusionInput {
                layout,
                noisy: &noisy,
                self_cond: SelfCond::Absent,
                block_times: &times,
                ctx_time: 5,
            },
        )
        .unwrap()
    };
    let base = run(&layout);
    // Block 0 cannot see the clean copies of target blocks 0 and 1.
    let mut zeroed = layout.clone();
    for tok in zeroed.context[prompt.len()..].iter_mut() {
        *tok = 0;
    }
    let other = run(&zeroed);
    assert_eq!(base.slice(s![0..2, ..]), other.slice(s![0..2, ..]));
    // Block 1 still sees target block 0, so it must change.
    assert_ne!(base.slice(s![2..4, ..]), other.slice(s![2..4, ..]));
}

#[test]
fn cached_decoding_path_matches_masked_forward() {
    let cfg = ModelConfig { n_layers: 2, ..tiny_config() };
    let params = randomized::<f64>(&cfg, 10, 0.3);
    let mut rng = RngStream::named(10, "inputs");
    let context = random_tokens(5, cfg.vocab, &mut rng);
    let noisy = random_logits(3, cfg.vocab, 5.0, &mut rng);
    let cond = random_logits(3, cfg.vocab, 5.0, &mut rng);
    let layout = layout_parallel_batch(&context, &[0, 0, 0], 3).unwrap();
    let full = denoise_forward(
        &params,
        &DiffusionInput {
            layout: &layout,
            noisy: &noisy,
            self_cond: SelfCond::Logits(&cond),
            block_times: &[6],
            ctx_time: 5,
        },
    )
    .unwrap();
    let cache = encode_context(&params, &context, 5).unwrap();
    let cached = denoise_block(&params, &cache, &noisy, SelfCond::Logits(&cond), 6).unwrap();
    assert!((&full - &cached).iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn zero_head_gives_uniform_cross_entropy() {
    let cfg = tiny_config();
    let mut params = randomized::<f64>(&cfg, 11, 0.3);
    params.head_w.as_mut().unwrap().fill(0.0);
    params.head_b.fill(0.0);
    let layout = layout_parallel_batch(&[1], &[2, 3, 4, 5], 2).unwrap();
    let noisy = Array2::zeros((4, cfg.vocab));
    let loss_mask = [true; 4];
    let input = LossInput::Diffusion {
        input: DiffusionInput {
            layout: &layout,
            noisy: &noisy,
            self_cond: SelfCond::Absent,
            block_times: &[1, 2],
            ctx_time: 0,
        },
        loss_mask: &loss_mask,
    };
    let (loss, _) = loss_and_grads(&params, &input).unwrap();
    assert!((loss - (cfg.vocab as f64).ln()).abs() < 1e-12);

    let ar_mask = [true; 4];
    let (loss, _) = loss_and_grads(
        &params,
        &LossInput::<f64>::Autoregressive { tokens: &[1, 2, 3, 4, 5], loss_mask: &ar_mask },
    )
    .unwrap();
    assert!((loss - (cfg.vocab as f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_head_drives_loss_to_zero() {
    // Large logit on the correct class: the loss approaches zero.
    let cfg = ModelConfig { vocab: 3, ..tiny_config() };
    let mut params = DenoiserParams::<f64>::init(&cfg, 1).unwrap();
    params.head_w.as_mut().unwrap().fill(0.0);
    let tokens = [1u32, 2, 2, 2];
    let mask = [true; 3];
    let mut last = f64::INFINITY;
    for boost in [1.0, 10.0, 100.0] {
        params.head_b.fill(0.0);
        params.head_b[2] = boost;
        let (loss, _) = loss_and_grads(&params, &LossInput::<f64>::Autoregressive { tokens: &tokens, loss_mask: &mask }).unwrap();
        assert!(loss < last);
        last = loss;
    }
    assert!(last < 1e-40);
}

#[test]
fn loss_masked_targets_do_not_contribute() {
    let cfg = tiny_config();
    let params = randomized::<f64>(&cfg, 12, 0.3);
    let noisy = Array2::from_elem((4, cfg.vocab), 0.5);
    let loss_mask = [true, true, true, false];
    let mut losses = Vec::new();
    for last in [3u32, 8] {
        let layout = layout_parallel_batch(&[1], &[2, 3, 4, last], 2).unwrap();
        let input = LossInput::Diffusion {
            input: DiffusionInput {
                layout: &layout,
                noisy: &noisy,
                self_cond: SelfCond::Absent,
                block_times: &[4, 4],
                ctx_time: 0,
            },
            loss_mask: &loss_mask,
        };
        losses.push(loss_and_grads(&params, &input).unwrap().0);
    }
    assert_eq!(losses[0], losses[1]);
}

#[test]
fn non_finite_inputs_surface_a_named_numeric_error() {
    let cfg = tiny_config();
    let mut params = randomized::<f64>(&cfg, 13, 0.3);
    params.layers[0].w1[[0, 0]] = f64::NAN;
    let err = ar_forward(&params, &[1, 2, 3]).unwrap_err();
    match err {
        simdiff::Error::Numeric { tensor, .. } => assert_eq!(tensor, "layers.0.output"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let cfg = tiny_config();
    let params = randomized::<f64>(&cfg, 14, 0.3);
    let layout = layout_parallel_batch(&[1], &[2, 3], 2).unwrap();
    let noisy = Array2::zeros((3, cfg.vocab));
    let input = DiffusionInput {
        layout: &layout,
        noisy: &noisy,
        self_cond: SelfCond::Absent,
        block_times: &[1],
        ctx_time: 0,
    };
    assert!(matches!(denoise_forward(&params, &input), Err(simdiff::Error::Contract(_))));
    let _ = build_block_mask(1, 1, 1).unwrap();
}
