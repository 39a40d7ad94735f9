//! Thin dispatch layer between the rayon and sequential execution paths.
//!
//! Every helper here assigns each output slot to exactly one closure call,
//! so results are bit-identical whether or not the `parallel` feature is on.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of independent work items before rayon is worth spawning.
const PAR_THRESHOLD: usize = 8;

/// Zip mutable row chunks of `out` with row chunks of `a` and run `body` on
/// each pair. `out` rows are `out_cols` wide, `a` rows are `a_cols` wide.
pub(crate) fn for_each_row_pair<F, B>(
    out: &mut [F],
    a: &[F],
    out_cols: usize,
    a_cols: usize,
    body: B,
) where
    F: Send + Sync,
    B: Fn((&mut [F], &[F])) + Send + Sync,
{
    if out_cols == 0 || a_cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() / out_cols >= PAR_THRESHOLD {
            out.par_chunks_mut(out_cols)
                .zip(a.par_chunks(a_cols))
                .for_each(body);
            return;
        }
    }
    out.chunks_mut(out_cols).zip(a.chunks(a_cols)).for_each(body);
}

/// Map a slice to a Vec, preserving order.
pub(crate) fn map_collect<T, U, B>(items: &[T], body: B) -> Vec<U>
where
    T: Sync,
    U: Send,
    B: Fn(&T) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() >= 2 {
            return items.par_iter().map(body).collect();
        }
    }
    items.iter().map(body).collect()
}

/// Map indices `0..n` to a Vec, preserving order.
pub(crate) fn map_range<U, B>(n: usize, body: B) -> Vec<U>
where
    U: Send,
    B: Fn(usize) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if n >= PAR_THRESHOLD {
            return (0..n).into_par_iter().map(body).collect();
        }
    }
    (0..n).map(body).collect()
}
