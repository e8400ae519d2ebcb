mod common;

use simdiff::decode::{decode_block, decode_sequence, decode_with, DecodeConfig, DecodeRngs, ModelStream, ShardTable};
use simdiff::model::{DenoiserParams, ModelConfig};
use simdiff::simplex::Projection;
use simdiff::tokenizer::EOS;

fn model(steps: usize, seed: u64) -> DenoiserParams<f64> {
    let cfg = ModelConfig {
        time_steps: steps,
        time_quantum: 50,
        ..common::tiny_config()
    };
    common::randomized(&cfg, seed, 0.5)
}

fn cfg(steps: usize, stop_at: f64) -> DecodeConfig {
    DecodeConfig {
        steps,
        stop_at,
        block: 3,
        max_rounds: 3,
        projection: Projection::Sample { temperature: 1.0 },
        seed: 5,
        quantum: 50,
        eos: None,
        ..DecodeConfig::default()
    }
}

#[test]
fn early_stop_runs_exactly_six_hundred_iterations() {
    let p = model(1000, 1);
    let c = cfg(1000, 0.4);
    let mut stream = ModelStream::new("m", ShardTable::single(&p));
    let (_, trace) = decode_block(&mut stream, &[1, 4], &c, &mut DecodeRngs::new(0), 0).unwrap();
    assert_eq!(trace.len(), 600);
    assert_eq!(trace.first().unwrap().t, 1000);
    assert_eq!(trace.last().unwrap().t, 401);
}

#[test]
fn self_conditioning_hands_off_previous_logits() {
    let p = model(40, 2);
    let mut stream = ModelStream::new("m", ShardTable::single(&p));
    let (_, trace) = decode_block(&mut stream, &[1, 4], &cfg(40, 0.0), &mut DecodeRngs::new(0), 0).unwrap();
    assert_eq!(trace.len(), 40);
    assert_eq!(trace[0].members[0].self_cond, None);
    for w in trace.windows(2) {
        assert_eq!(w[1].t + 1, w[0].t);
        assert_eq!(w[1].members[0].self_cond.as_ref(), Some(&w[0].members[0].logits));
    }
}

#[test]
fn deterministic_under_seed() {
    let p = model(10, 3);
    let c = DecodeConfig {
        projection: Projection::Argmax,
        ..cfg(10, 0.0)
    };
    let a = decode_with(ShardTable::single(&p), &[1, 4], &c).unwrap();
    let b = decode_with(ShardTable::single(&p), &[1, 4], &c).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.tokens.len(), 9);
}

#[test]
fn context_cache_matches_full_recompute_when_context_time_is_inert() {
    let mut p = model(200, 4);
    let row = p.ctx_time.row(0).to_owned();
    for mut r in p.ctx_time.rows_mut() {
        r.assign(&row);
    }
    let coarse = decode_with(ShardTable::single(&p), &[1, 4, 6], &cfg(200, 0.4)).unwrap();
    let fine = decode_with(
        ShardTable::single(&p),
        &[1, 4, 6],
        &DecodeConfig { quantum: 1, ..cfg(200, 0.4) },
    )
    .unwrap();
    assert_eq!(coarse.tokens, fine.tokens);
    let recomputes = |o: &simdiff::decode::DecodeOutput| o.trace.iter().filter(|r| r.members[0].recomputed_context).count();
    assert_eq!(recomputes(&fine), fine.trace.len());
    // Levels 200, 150, 100 and 50 in each of 3 rounds.
    assert_eq!(recomputes(&coarse), 3 * 4);
}

#[test]
fn three_identical_shards_equal_one_model() {
    let p = model(100, 5);
    let q = p.clone();
    let r = p.clone();
    let c = cfg(100, 0.4);
    let sharded = decode_with(ShardTable::three(&p, &q, &r).unwrap(), &[1, 2], &c).unwrap();
    let single = decode_with(ShardTable::single(&p), &[1, 2], &c).unwrap();
    assert_eq!(sharded.tokens, single.tokens);
    let shards: std::collections::BTreeSet<usize> = sharded.trace.iter().map(|r| r.members[0].shard).collect();
    assert_eq!(shards.len(), 3);
}

fn biased(token: usize) -> DenoiserParams<f64> {
    let mut p = model(20, 6);
    p.head_b.fill(0.0);
    p.head_b[token] = 1e3;
    p
}

#[test]
fn eos_in_first_block_stops_generation() {
    let p = biased(EOS as usize);
    let c = DecodeConfig { eos: Some(EOS), ..cfg(20, 0.4) };
    let out = decode_with(ShardTable::single(&p), &[1], &c).unwrap();
    assert!(out.tokens.len() < c.block);
    assert_eq!(out.rounds, 1);
}

#[test]
fn without_eos_output_is_max_rounds_blocks() {
    let p = biased(7);
    let c = DecodeConfig { eos: Some(EOS), ..cfg(20, 0.4) };
    let out = decode_with(ShardTable::single(&p), &[1], &c).unwrap();
    assert_eq!(out.tokens, vec![7; 9]);
    assert!(!out.truncated);
}

#[test]
fn length_limit_truncates_cleanly() {
    let p = biased(7);
    let c = DecodeConfig { max_rounds: 50, ..cfg(20, 0.4) };
    let out = decode_with(ShardTable::single(&p), &[1, 3], &c).unwrap();
    assert!(out.truncated);
    assert_eq!(out.tokens.len(), 21);

    let mut stream = ModelStream::new("m", ShardTable::single(&p));
    let err = decode_sequence(&mut stream, &[3; 22], &c).unwrap_err();
    assert!(matches!(err, simdiff::Error::Contract(_)));
}
