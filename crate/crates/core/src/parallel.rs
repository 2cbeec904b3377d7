//! Thin indirection over rayon so everything builds and runs without the
//! `parallel` feature; the sequential fallback keeps identical semantics.

/// Maps `f` over `items`, preserving order. With the `parallel` feature and
/// `jobs > 1`, runs inside a dedicated pool of `jobs` threads.
pub fn par_map<I, O, F>(items: Vec<I>, jobs: usize, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if jobs > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .expect("failed to build worker pool");
            return pool.install(|| items.into_par_iter().map(f).collect());
        }
    }
    let _ = jobs;
    items.into_iter().map(f).collect()
}

/// Number of workers to use by default: the available CPUs under `parallel`,
/// one otherwise.
pub fn default_jobs() -> usize {
    #[cfg(feature = "parallel")]
    {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let out = par_map((0..100).collect(), 4, |x: i32| x * 2);
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_path_matches() {
        let seq = par_map((0..40).collect(), 1, |x: i32| x * x);
        let par = par_map((0..40).collect(), 2, |x: i32| x * x);
        assert_eq!(seq, par);
    }
}
