//! Seeded random streams and order-stable parallel reductions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// The generator used everywhere a seed appears.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a path of stream indices.
///
/// Each index is folded in with a splitmix64 round, so `stream_seed(s, &[a, b])`
/// depends on every element and on its position.
pub fn stream_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// A ChaCha8 stream for `(root, path...)`.
pub fn stream(root: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(stream_seed(root, path))
}

/// Rows per chunk for chunked reductions. Depends only on the input size, so the
/// reduction tree (and every rounding step) is identical for any thread count.
pub fn chunk_rows(n: usize) -> usize {
    const TARGET_CHUNKS: usize = 64;
    const MIN_ROWS: usize = 256;
    n.div_ceil(TARGET_CHUNKS).max(MIN_ROWS)
}

/// Maps fixed row chunks to partial accumulators, then folds them with an ordered
/// pairwise tree. `parallel = false` runs the same tree sequentially and yields
/// bit-identical results.
pub fn chunked_reduce<T, M, C>(n: usize, parallel: bool, map: M, combine: C) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let chunk = chunk_rows(n);
    let ranges: Vec<_> = (0..n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n))
        .collect();
    let partials: Vec<T> = if parallel {
        ranges.into_par_iter().map(&map).collect()
    } else {
        ranges.into_iter().map(&map).collect()
    };
    tree_fold(partials, combine)
}

/// Pairwise reduction: `[a, b, c, d, e]` becomes `((a+b)+(c+d))+e`.
pub fn tree_fold<T, C: Fn(T, T) -> T>(mut items: Vec<T>, combine: C) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Elementwise `a += b`.
pub fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Indices ordered by descending value, ties broken by ascending index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn stream_seeds_depend_on_position() {
        assert_ne!(stream_seed(1, &[2, 3]), stream_seed(1, &[3, 2]));
        assert_ne!(stream_seed(1, &[0]), stream_seed(1, &[0, 0]));
        let a: u64 = stream(9, &[1, 2]).random();
        let b: u64 = stream(9, &[1, 2]).random();
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_reduce_is_thread_independent() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin() * 1e3).collect();
        let f = |r: std::ops::Range<usize>| xs[r].iter().sum::<f64>();
        let par = chunked_reduce(xs.len(), true, f, |a, b| a + b).unwrap();
        let seq = chunked_reduce(xs.len(), false, f, |a, b| a + b).unwrap();
        assert_eq!(par.to_bits(), seq.to_bits());
        assert!(chunked_reduce(0, false, f, |a, b| a + b).is_none());
    }

    #[test]
    fn tree_fold_order() {
        let out = tree_fold(vec!["a", "b", "c", "d", "e"].into_iter().map(String::from).collect(), |a, b| {
            format!("({a}{b})")
        });
        assert_eq!(out.unwrap(), "(((ab)(cd))e)");
    }

    #[test]
    fn rank_ties_go_to_lower_index() {
        assert_eq!(rank_descending(&[0.6, 0.6, 0.2, 0.6]), vec![0, 1, 3, 2]);
    }

    #[test]
    fn lse() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
