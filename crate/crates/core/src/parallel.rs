//! Sentence-level data parallelism.
//!
//! Work items are mapped independently and their results are always
//! combined in item order, so parallel and sequential execution produce
//! bit-identical sums. Without the `parallel` feature every call runs
//! sequentially.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl fmt::Display for Execution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Execution::Sequential => "sequential",
            Execution::Parallel => "parallel",
        })
    }
}

impl FromStr for Execution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sequential" | "seq" => Ok(Execution::Sequential),
            "parallel" | "par" => Ok(Execution::Parallel),
            _ => Err(Error::Config(format!("unknown execution mode `{s}`"))),
        }
    }
}

pub fn num_workers(exec: Execution) -> usize {
    match exec {
        Execution::Sequential => 1,
        #[cfg(feature = "parallel")]
        Execution::Parallel => rayon::current_num_threads(),
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => 1,
    }
}

/// `f(i, &items[i])` for every item, results in item order.
pub fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel if items.len() > 1 => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Maps items in windows of `num_workers` and folds each window's results
/// into `acc` strictly in item order. Peak memory holds one window of
/// results, which matters when each result is a full gradient.
pub fn map_fold_ordered<T, R, A, F, G>(
    items: &[T],
    exec: Execution,
    mut acc: A,
    map: F,
    mut fold: G,
) -> A
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
    G: FnMut(A, R) -> A,
{
    let window = num_workers(exec).max(1);
    for (w, chunk) in items.chunks(window).enumerate() {
        let offset = w * window;
        let results = map_ordered(chunk, exec, |i, t| map(offset + i, t));
        for r in results {
            acc = fold(acc, r);
        }
    }
    acc
}
