//! Row-parallel linear algebra used by the tiny backend.
//!
//! With the `parallel` feature (default) the hot matmuls fan out over rayon,
//! one output row per task, so results are bit-identical to the sequential
//! path regardless of thread count. The `set_parallel(false)` switch exists
//! so benchmarks can compare both paths in one binary; without the feature
//! the sequential path is the only one compiled.

use ndarray::{Array2, ArrayView2};

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

#[cfg(feature = "parallel")]
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

#[cfg(feature = "parallel")]
pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

#[cfg(not(feature = "parallel"))]
pub fn parallel_enabled() -> bool {
    false
}

/// `a (n×k) · b (k×m)`, dispatching on the runtime switch.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
    #[cfg(feature = "parallel")]
    if parallel_enabled() && a.nrows() > 1 {
        return matmul_par(a, b);
    }
    matmul_seq(a, b)
}

pub fn matmul_seq(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    for (i, mut row) in c.outer_iter_mut().enumerate() {
        row.assign(&a.row(i).dot(&b));
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    use rayon::prelude::*;

    let (n, m) = (a.nrows(), b.ncols());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| a.row(i).dot(&b).to_vec())
        .collect();
    let mut c = Array2::zeros((n, m));
    for (i, row) in rows.into_iter().enumerate() {
        c.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn seq_matches_ndarray_dot() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = array![[7.0, 8.0, 9.0], [10.0, 11.0, 12.0]];
        assert_eq!(matmul_seq(a.view(), b.view()), a.dot(&b));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_is_bit_identical_to_seq() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Array2::from_shape_fn((17, 23), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((23, 11), |_| rng.gen_range(-1.0..1.0));
        let s = matmul_seq(a.view(), b.view());
        let p = matmul_par(a.view(), b.view());
        assert_eq!(s, p);
    }
}
