//! Thread-count independent reductions.
//!
//! Work is cut into fixed-size blocks, each block is reduced sequentially,
//! and the block results are combined by a fixed pairwise tree. The result
//! depends only on the input order and the block size, never on how many
//! worker threads rayon happens to use.

use rayon::prelude::*;

pub const BLOCK: usize = 256;

/// Maps each block of `BLOCK` items through `block_fn` in parallel and folds
/// the partial results with `merge` in a fixed pairwise tree.
pub fn tree_reduce<T, F, M>(n_items: usize, block_fn: F, merge: M) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
    M: Fn(T, T) -> T + Sync,
{
    if n_items == 0 {
        return None;
    }
    let n_blocks = n_items.div_ceil(BLOCK);
    let mut parts: Vec<T> = (0..n_blocks)
        .into_par_iter()
        .map(|b| block_fn(b * BLOCK..((b + 1) * BLOCK).min(n_items)))
        .collect();
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Element-wise `a += b`.
pub fn add_into(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}
