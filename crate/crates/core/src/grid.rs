//! Index helpers on row-major grids.

use crate::geometry::{ravel, unravel};

pub fn crop<T: Copy>(data: &[T], shape: &[usize], corner: &[usize], extents: &[usize]) -> Vec<T> {
    let n: usize = extents.iter().product();
    let mut idx = vec![0; extents.len()];
    let mut src = vec![0; extents.len()];
    (0..n)
        .map(|flat| {
            unravel(flat, extents, &mut idx);
            for ((s, &i), &c) in src.iter_mut().zip(&idx).zip(corner) {
                *s = i + c;
            }
            data[ravel(&src, shape)]
        })
        .collect()
}

/// Writes `patch` (of `extents`) into `data` at `corner`.
pub fn paste<T: Copy>(data: &mut [T], shape: &[usize], corner: &[usize], extents: &[usize], patch: &[T]) {
    let mut idx = vec![0; extents.len()];
    let mut dst = vec![0; extents.len()];
    for (flat, &v) in patch.iter().enumerate() {
        unravel(flat, extents, &mut idx);
        for ((d, &i), &c) in dst.iter_mut().zip(&idx).zip(corner) {
            *d = i + c;
        }
        data[ravel(&dst, shape)] = v;
    }
}

pub fn flip<T: Copy>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = data.to_vec();
    for o in 0..outer {
        for j in 0..len {
            let dst = (o * len + j) * inner;
            let src = (o * len + len - 1 - j) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

/// Quarter turn in the plane of axes 0 and 1, which must have equal extents:
/// `out[i][j] = in[j][n - 1 - i]`.
pub fn rot90<T: Copy>(data: &[T], shape: &[usize]) -> Vec<T> {
    let n = shape[0];
    debug_assert_eq!(n, shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = data.to_vec();
    for i in 0..n {
        for j in 0..n {
            let dst = (i * n + j) * inner;
            let src = (j * n + (n - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}
