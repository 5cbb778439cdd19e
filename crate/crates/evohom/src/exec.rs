//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers run on the rayon pool; without it,
//! or inside [`sequential`], they run in order on the calling thread. Results
//! are always returned in index order, so reductions done by the caller stay
//! bit-reproducible.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQ: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all helpers forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQ.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQ.with(|f| f.get())
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Apply `f` to each chunk of `data` of length `chunk`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Fallible indexed map; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}
