//! Parallel execution helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) these map over rayon's thread
//! pool; without it they are plain iterator loops. Results are collected in
//! input order either way, so downstream reductions see a fixed order and
//! outputs are bitwise identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_ordered<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Fallible ordered map; returns the first error by input order.
#[cfg(feature = "parallel")]
pub fn try_map_ordered<T: Sync, R: Send, E: Send, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Fallible ordered map; returns the first error by input order.
#[cfg(not(feature = "parallel"))]
pub fn try_map_ordered<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    F: Fn(&T) -> Result<R, E>,
{
    items.iter().map(f).collect()
}

/// Run `f(row_index, row)` over the rows of a contiguous row-major buffer.
/// Rows are disjoint, so each row's arithmetic keeps a fixed order.
#[cfg(feature = "parallel")]
pub fn for_each_row<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// Run `f(row_index, row)` over the rows of a contiguous row-major buffer.
#[cfg(not(feature = "parallel"))]
pub fn for_each_row<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_ordered_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let out = map_ordered(&items, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn try_map_ordered_propagates_error() {
        let items = vec![1, 2, 3];
        let res: Result<Vec<i32>, &str> =
            try_map_ordered(&items, |&x| if x == 2 { Err("boom") } else { Ok(x) });
        assert_eq!(res, Err("boom"));
    }

    #[test]
    fn for_each_row_touches_every_row_once() {
        let mut data = vec![0.0; 12];
        for_each_row(&mut data, 3, |i, row| {
            for v in row.iter_mut() {
                *v = i as f64;
            }
        });
        assert_eq!(data[0], 0.0);
        assert_eq!(data[3], 1.0);
        assert_eq!(data[11], 3.0);
    }
}
