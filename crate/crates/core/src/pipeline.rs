//! Ordered parallel map over a stream of work units.
//!
//! Units are pulled in batches, mapped on a worker pool and handed to the sink
//! in input order, so the output is identical for every worker count and only
//! one batch is held in memory at a time.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_BATCH: usize = 512;

pub fn for_each_ordered<T, U, I, F, S>(
    units: I,
    workers: usize,
    batch: usize,
    map: F,
    mut sink: S,
) -> Result<()>
where
    I: Iterator<Item = Result<T>>,
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync,
    S: FnMut(U) -> Result<()>,
{
    let workers = workers.max(1);
    let batch = batch.max(1);
    let pool = if workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?,
        )
    } else {
        None
    };

    let mut units = units.peekable();
    let mut buffer = Vec::with_capacity(batch);
    while units.peek().is_some() {
        buffer.clear();
        let mut failure = None;
        for unit in units.by_ref().take(batch) {
            match unit {
                Ok(unit) => buffer.push(unit),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let mapped: Vec<U> = match &pool {
            Some(pool) => pool.install(|| buffer.par_drain(..).map(&map).collect()),
            None => buffer.drain(..).map(&map).collect(),
        };
        for out in mapped {
            sink(out)?;
        }
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(())
}
