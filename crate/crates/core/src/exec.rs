//! Data-parallel helpers with a sequential fallback.
//!
//! Work items are independent and results are always returned in index
//! order, so `Sequential` and `Parallel` produce identical outputs. Without
//! the `parallel` feature, `Parallel` degrades to `Sequential`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `(0..n).map(f)` collected in order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Apply `f` to every item mutably, collecting results in order.
pub fn map_mut<I, T, F>(exec: Exec, items: &mut [I], f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(usize, &mut I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }
    let _ = exec;
    items.iter_mut().enumerate().map(|(i, item)| f(i, item)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let seq = map_indexed(Exec::Sequential, 100, |i| i * i);
        let par = map_indexed(Exec::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);

        let mut a: Vec<u64> = (0..50).collect();
        let mut b = a.clone();
        let ra = map_mut(Exec::Sequential, &mut a, |i, v| {
            *v += i as u64;
            *v
        });
        let rb = map_mut(Exec::Parallel, &mut b, |i, v| {
            *v += i as u64;
            *v
        });
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }
}
