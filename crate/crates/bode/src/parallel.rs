//! Thread-pool member runner. Results come back in member order, so outputs
//! do not depend on the number of threads.

use bode_core::ensemble::MemberRunner;
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{Error, Result};

pub struct PoolRunner {
    pool: ThreadPool,
}

impl PoolRunner {
    pub fn new(jobs: usize) -> Result<Self> {
        let pool = ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(Error::compute)?;
        Ok(Self { pool })
    }
}

impl MemberRunner for PoolRunner {
    fn run<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(job).collect())
    }
}
