//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) the dispatching functions run on
//! the rayon pool; without it they fall back to plain iterators. Both
//! implementations stay reachable through [`seq`] and [`par`] so that benches
//! can compare them in one binary.

/// Execution strategy for the batch helpers that take one explicitly.
///
/// `Par` degrades to sequential execution when the `parallel` feature is off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Seq,
    #[cfg_attr(feature = "parallel", default)]
    Par,
}

impl Exec {
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Seq => seq::map_range(n, f),
            Exec::Par => map_range(n, f),
        }
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        par::map_range(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::map_range(n, f)
    }
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        par::map_slice(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::map_slice(items, f)
    }
}

pub mod seq {
    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(f).collect()
    }

    pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        F: Fn(&T) -> R,
    {
        items.iter().map(f).collect()
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use rayon::prelude::*;

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_matches_sequential() {
        let a = map_range(100, |i| i * i);
        let b = seq::map_range(100, |i| i * i);
        assert_eq!(a, b);
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(map_slice(&xs, |x| x + 1.0), seq::map_slice(&xs, |x| x + 1.0));
        assert_eq!(Exec::Seq.map_range(10, |i| i), Exec::Par.map_range(10, |i| i));
    }
}
