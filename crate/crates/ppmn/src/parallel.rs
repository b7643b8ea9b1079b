//! Bounded, deterministic fan-out: work items are split into contiguous
//! index ranges and results reassembled in index order, so the output does
//! not depend on scheduling.

/// Effective worker count: the `--threads` flag, else `PPMN_THREADS`,
/// else the machine's available parallelism.
pub fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("PPMN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
    .max(1)
}

pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads.min(n));
    let mut chunks: Vec<Vec<T>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(n);
                let f = &f;
                scope.spawn(move || (start..end).map(f).collect::<Vec<T>>())
            })
            .collect();
        chunks = handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect();
    });
    chunks.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let serial: Vec<usize> = (0..97).map(|i| i * i).collect();
        for threads in [1, 2, 3, 8] {
            assert_eq!(parallel_map(97, threads, |i| i * i), serial);
        }
    }

    #[test]
    fn flag_beats_environment() {
        assert_eq!(thread_count(Some(3)), 3);
        assert!(thread_count(None) >= 1);
    }
}
