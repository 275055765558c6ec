//! Bounded worker pool over a slice with results kept in input order.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

/// Apply `f` to every item on up to `workers` threads. Output order matches
/// input order whatever the completion order.
pub fn ordered_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let results: Result<Vec<R>, (Vec<Option<R>>, std::convert::Infallible)> =
        try_ordered_map(items, workers, |i, t| Ok(f(i, t)));
    match results {
        Ok(v) => v,
        Err((_, never)) => match never {},
    }
}

/// Like [`ordered_map`], but the first failure stops workers from starting
/// new items. On failure returns every result that did complete (by input
/// position) and the error with the lowest input position.
#[allow(clippy::type_complexity)]
pub fn try_ordered_map<T, R, E, F>(
    items: &[T],
    workers: usize,
    f: F,
) -> Result<Vec<R>, (Vec<Option<R>>, E)>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let slots: Mutex<Vec<Option<Result<R, E>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = workers.clamp(1, items.len().max(1));

    let work = || loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(item) = items.get(i) else { break };
        let out = f(i, item);
        if out.is_err() {
            stop.store(true, Ordering::SeqCst);
        }
        slots.lock().expect("result lock")[i] = Some(out);
    };

    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let slots = slots.into_inner().expect("result lock");
    let mut done = Vec::with_capacity(slots.len());
    let mut first_err = None;
    for slot in slots {
        match slot {
            Some(Ok(r)) => done.push(Some(r)),
            Some(Err(e)) => {
                done.push(None);
                first_err.get_or_insert(e);
            }
            None => done.push(None),
        }
    }
    match first_err {
        None => Ok(done
            .into_iter()
            .map(|r| r.expect("all slots filled"))
            .collect()),
        Some(e) => Err((done, e)),
    }
}
