//! Worker-count policy for the few kernels that split work across threads.
//!
//! `BALCONY_THREADS` caps the count; unset means one worker per available
//! core. Splitting is always by output row, so every f32 reduction keeps its
//! serial evaluation order and results do not depend on the worker count.

use std::sync::OnceLock;

static WORKERS: OnceLock<usize> = OnceLock::new();

pub fn workers() -> usize {
    *WORKERS.get_or_init(|| {
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        match std::env::var("BALCONY_THREADS") {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n >= 1 => n.min(cores),
                _ => cores,
            },
            Err(_) => cores,
        }
    })
}

/// Runs `work(row_range)` over `rows` split into contiguous chunks, one per
/// worker. `work` must only touch its own rows of any shared output.
pub fn split_rows<F>(rows: usize, min_rows_per_worker: usize, work: F)
where
    F: Fn(std::ops::Range<usize>) + Sync,
{
    let n = workers().min(rows / min_rows_per_worker.max(1)).max(1);
    if n == 1 {
        work(0..rows);
        return;
    }
    let chunk = rows.div_ceil(n);
    std::thread::scope(|scope| {
        for w in 0..n {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(rows);
            if lo >= hi {
                break;
            }
            let work = &work;
            scope.spawn(move || work(lo..hi));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_covers_all_rows_exactly_once() {
        let hits: Vec<std::sync::atomic::AtomicU32> =
            (0..97).map(|_| std::sync::atomic::AtomicU32::new(0)).collect();
        split_rows(97, 1, |range| {
            for r in range {
                hits[r].fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            }
        });
        assert!(hits.iter().all(|h| h.load(std::sync::atomic::Ordering::SeqCst) == 1));
    }

    #[test]
    fn zero_rows_is_a_noop() {
        split_rows(0, 1, |range| assert!(range.is_empty()));
    }
}
