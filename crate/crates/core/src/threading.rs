//! Deterministic fan-out over independent work items.
//!
//! Results are collected by item index, so the output is identical for any
//! worker count. Nothing here may be used for reductions whose order is not
//! already fixed by the caller.

/// Resolve a worker count: explicit request, else the `TFM_THREADS`
/// environment variable, else 1. Always at least 1.
pub fn resolve_threads(explicit: Option<usize>) -> usize {
    let n = explicit.or_else(|| {
        std::env::var("TFM_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
    });
    n.unwrap_or(1).max(1)
}

/// Apply `f` to every index in `0..n`, using up to `threads` workers.
/// The result vector is ordered by index regardless of scheduling.
pub fn parallel_map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ptr = SendPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let next = &next;
            let f = &f;
            let slots_ptr = &slots_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                // Each index is claimed exactly once, so writes are disjoint.
                unsafe { *slots_ptr.0.add(i) = Some(out) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

struct SendPtr<T>(*mut T);
unsafe impl<T: Send> Sync for SendPtr<T> {}
