//! Data-parallel helpers. With the `parallel` feature the work is spread
//! over the rayon pool; without it the same blocks run in order on the
//! calling thread. Reductions always combine block results in block order,
//! so both modes produce bit-identical output.

/// Rows per block for blocked reductions. Part of the numeric contract:
/// changing it changes floating-point summation order.
pub const BLOCK_ROWS: usize = 64;

/// Applies `f` to every index in `0..n` and collects the results in order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Calls `f(i, chunk)` for each consecutive `chunk` of `data` of length `width`.
pub fn for_each_row_mut<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Splits `0..n` into blocks of [`BLOCK_ROWS`] and maps each block range.
pub fn map_blocks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let blocks = n.div_ceil(BLOCK_ROWS);
    map_indices(blocks, |b| {
        let lo = b * BLOCK_ROWS;
        f(lo..(lo + BLOCK_ROWS).min(n))
    })
}

/// Sum of `f(block)` over blocks, combined in block order.
pub fn sum_blocks<F>(n: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync + Send,
{
    map_blocks(n, f).into_iter().fold(0.0, |acc, v| acc + v)
}
