//! Attention masks that train every diffusion block of a sequence in one pass.
//!
//! The transformer input is the clean context `w[..c0 + (n-1)B]` followed by a
//! noisy copy of all `n` target blocks. Context rows attend causally. Rows of
//! noisy block `k` attend to the clean prefix `w[..c0 + kB]` and bidirectionally
//! to their own block, so each block sees exactly what a standalone forward
//! pass at context length `c0 + kB` would see.

use ndarray::Array2;

use crate::{Error, Result, TokenId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub delta: Array2<bool>,
    pub c0: usize,
    pub n: usize,
    pub block: usize,
}

impl BlockMask {
    pub fn size(&self) -> usize {
        self.delta.nrows()
    }

    /// Length of the clean context region, `c0 + (n-1)B`.
    pub fn context_len(&self) -> usize {
        self.c0 + (self.n - 1) * self.block
    }

    /// Render as `0`/`1` rows.
    pub fn to_rows(&self) -> Vec<String> {
        self.delta
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }
}

pub fn build_block_mask(c0: usize, n: usize, block: usize) -> Result<BlockMask> {
    if c0 == 0 || n == 0 || block == 0 {
        return Err(Error::Config(format!(
            "block mask needs c0, n, B >= 1 (got c0={c0}, n={n}, B={block})"
        )));
    }
    let ctx = c0 + (n - 1) * block;
    let size = ctx + n * block;
    let delta = Array2::from_shape_fn((size, size), |(i, j)| {
        if i < ctx {
            j <= i
        } else {
            let k = (i - ctx) / block;
            let own_start = ctx + k * block;
            j < c0 + k * block || (own_start..own_start + block).contains(&j)
        }
    });
    Ok(BlockMask { delta, c0, n, block })
}

/// Plain causal (lower-triangular, self-inclusive) mask.
pub fn causal_mask(len: usize) -> Array2<bool> {
    Array2::from_shape_fn((len, len), |(i, j)| j <= i)
}

/// Input layout for one masked parallel forward pass.
#[derive(Clone, Debug)]
pub struct ParallelLayout {
    /// Clean context tokens `w[..c0 + (n-1)B]`.
    pub context: Vec<TokenId>,
    /// Position index of every input row: context rows then the noisy region,
    /// which reuses the original positions `c0..c0 + nB`.
    pub positions: Vec<usize>,
    /// Clean target tokens `w[c0..c0 + nB]`.
    pub targets: Vec<TokenId>,
    pub mask: BlockMask,
}

impl ParallelLayout {
    pub fn n_blocks(&self) -> usize {
        self.mask.n
    }

    pub fn block(&self) -> usize {
        self.mask.block
    }

    pub fn c0(&self) -> usize {
        self.mask.c0
    }

    pub fn total_len(&self) -> usize {
        self.positions.len()
    }

    pub fn context_positions(&self) -> &[usize] {
        &self.positions[..self.context.len()]
    }

    pub fn block_positions(&self) -> &[usize] {
        &self.positions[self.context.len()..]
    }
}

pub fn layout_parallel_batch(
    prompt: &[TokenId],
    target: &[TokenId],
    block: usize,
) -> Result<ParallelLayout> {
    if block == 0 {
        return Err(Error::Config("block size must be >= 1".into()));
    }
    if target.is_empty() || !target.len().is_multiple_of(block) {
        return Err(Error::Contract(format!(
            "target length {} is not a positive multiple of the block size {block}",
            target.len()
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("parallel layout needs a non-empty prompt".into()));
    }
    let c0 = prompt.len();
    let n = target.len() / block;
    let mask = build_block_mask(c0, n, block)?;
    let mut context = prompt.to_vec();
    context.extend_from_slice(&target[..(n - 1) * block]);
    let positions = (0..context.len()).chain(c0..c0 + n * block).collect();
    Ok(ParallelLayout {
        context,
        positions,
        targets: target.to_vec(),
        mask,
    })
}
