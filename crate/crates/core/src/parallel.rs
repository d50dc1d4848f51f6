//! Data-parallel helpers with a sequential fallback.

use serde::{Deserialize, Serialize};

/// How independent work items (grid cells, multistart branches, sensitivity
/// targets) are scheduled. Results are identical either way.
///
/// Without the `parallel` feature, [`Execution::Parallel`] runs sequentially.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `items.map(f)` preserving order.
pub(crate) fn map_ordered<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x.wrapping_mul(2654435761) % 97;
        assert_eq!(
            map_ordered(Execution::Parallel, &items, f),
            map_ordered(Execution::Sequential, &items, f)
        );
    }
}
