//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out
//! over the rayon pool; without it every mode runs sequentially. Results are
//! always returned in input order, so reductions performed by callers are
//! identical in both modes.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this build can actually run work in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn map<I, R, F>(self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(usize, &I) -> R + Sync + Send,
    {
        self.map_range(items.len(), |i| f(i, &items[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |i: usize, v: &u64| (i as u64) * 31 + v * v;
        assert_eq!(Exec::Sequential.map(&items, f), Exec::Parallel.map(&items, f));
    }
}
