//! Bounded worker pool whose results come back in submission order.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};

use crossbeam_channel::bounded;

/// Runs `work` over `jobs` on `workers` threads and feeds the results to
/// `sink` in job order. When `sink` breaks, outstanding jobs are abandoned
/// and the break value is returned.
pub(crate) fn ordered_map<J, R, E, I, W, S>(jobs: I, workers: usize, work: W, mut sink: S) -> Option<E>
where
    J: Send,
    R: Send,
    I: Iterator<Item = J> + Send,
    W: Fn(J) -> R + Sync,
    S: FnMut(R) -> ControlFlow<E>,
{
    let workers = workers.max(1);
    let halt = AtomicBool::new(false);
    let (job_tx, job_rx) = bounded::<(usize, J)>(workers * 2);
    let (res_tx, res_rx) = bounded::<(usize, R)>(workers * 2);

    std::thread::scope(|scope| {
        let halt = &halt;
        let work = &work;
        scope.spawn(move || {
            for item in jobs.enumerate() {
                if halt.load(Ordering::Relaxed) || job_tx.send(item).is_err() {
                    break;
                }
            }
        });
        for _ in 0..workers {
            let job_rx = job_rx.clone();
            let res_tx = res_tx.clone();
            scope.spawn(move || {
                for (i, job) in job_rx.iter() {
                    if halt.load(Ordering::Relaxed) {
                        continue;
                    }
                    if res_tx.send((i, work(job))).is_err() {
                        halt.store(true, Ordering::Relaxed);
                    }
                }
            });
        }
        drop(job_rx);
        drop(res_tx);

        let mut pending = BTreeMap::new();
        let mut next = 0usize;
        let mut outcome = None;
        'recv: for (i, r) in res_rx.iter() {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&next) {
                next += 1;
                if let ControlFlow::Break(e) = sink(r) {
                    outcome = Some(e);
                    break 'recv;
                }
            }
        }
        halt.store(true, Ordering::Relaxed);
        // Unblock workers waiting to report so the scope can join them.
        drop(res_rx);
        outcome
    })
}
