use rayon::prelude::*;

/// Fixed chunk width for parallel reductions. Chunk boundaries depend only
/// on item indices, so sums are bitwise identical at any worker count.
pub const REDUCE_CHUNK: usize = 16;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Pairwise tree sum of equally sized vectors, in index order.
pub fn tree_sum(mut parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; len];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_into(&mut a, &b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Sum `f(i, acc)` over `0..n` into a vector of length `len`: items are
/// accumulated sequentially within fixed chunks, chunks are evaluated in
/// parallel and combined by [`tree_sum`]. Returns the summed vector and the
/// summed scalar side value.
pub fn chunked_sum<F>(n: usize, len: usize, f: F) -> (Vec<f64>, f64)
where
    F: Fn(usize, &mut [f64]) -> f64 + Sync,
{
    let chunks: Vec<(Vec<f64>, f64)> = (0..n.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            let mut scalar = 0.0;
            for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n) {
                scalar += f(i, &mut acc);
            }
            (acc, scalar)
        })
        .collect();
    let scalar = chunks.iter().map(|c| c.1).fold(0.0, |a, b| a + b);
    (tree_sum(chunks.into_iter().map(|c| c.0).collect(), len), scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_logistic_functions() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - 1000.0 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn chunked_sum_is_worker_independent() {
        let f = |i: usize, acc: &mut [f64]| {
            acc[i % 3] += (i as f64).sqrt();
            1.0 / (1.0 + i as f64)
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| chunked_sum(1000, 3, f));
        let b = four.install(|| chunked_sum(1000, 3, f));
        assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
}
