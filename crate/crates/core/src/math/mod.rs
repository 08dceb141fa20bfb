//! Dense numeric kernel shared by every other module.

mod rng;
mod tensor;

pub use rng::RngState;
pub use tensor::{
    argmax_with_ties, gemm, gemm_view, l2_distance, l2_norm, l2_norm_slice, layer_norm,
    log_sum_exp, matmul, softmax_in_place, softmax_rows, squared_distance, Tensor, View, LN_EPS,
};

/// Arithmetic mean; `first + mean(x - first)` so identical values reproduce exactly.
pub fn mean(xs: &[f64]) -> f64 {
    match xs.first() {
        None => 0.0,
        Some(&first) => first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64,
    }
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
