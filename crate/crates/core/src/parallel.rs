//! Order-preserving parallel map over slices via scoped threads.
//!
//! Work is split into at most `threads` contiguous ranges, so the output
//! order (and therefore every downstream reduction) is independent of the
//! thread count. `threads <= 1` runs inline with no spawning, which also
//! keeps this usable on targets without thread support.

/// Applies `f(index, item)` to every item, preserving input order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let threads = threads.min(items.len());
    let chunk = items.len().div_ceil(threads);
    let mut results: Vec<Vec<R>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (ci, slice) in items.chunks(chunk).enumerate() {
            let f = &f;
            handles.push(scope.spawn(move || {
                slice.iter().enumerate().map(|(i, t)| f(ci * chunk + i, t)).collect::<Vec<R>>()
            }));
        }
        for h in handles {
            results.push(h.join().expect("worker panicked"));
        }
    });
    results.into_iter().flatten().collect()
}
