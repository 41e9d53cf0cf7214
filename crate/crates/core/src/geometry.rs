//! Distance transforms and the geometric quantities built on them.
//!
//! The boundary of a mask is the set of foreground voxels with at least one
//! face-adjacent background voxel inside the grid. Signed distances are
//! negative inside the object, zero on the boundary and positive outside.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{stable_sigmoid, Tensor};

/// Binary voxel mask, `1` for foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<u8>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mask shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        BinaryMask {
            shape,
            data: vec![0; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> bool) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut idx = vec![0; shape.len()];
        let data = (0..n)
            .map(|flat| {
                unravel(flat, &shape, &mut idx);
                u8::from(f(&idx))
            })
            .collect();
        BinaryMask { shape, data }
    }

    /// Foreground where `p > threshold`; ties go to background.
    pub fn threshold(shape: impl Into<Vec<usize>>, probs: &[f64], threshold: f64) -> Result<Self> {
        let data = probs.iter().map(|&p| u8::from(p > threshold)).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, idx: &[usize]) -> bool {
        self.data[ravel(idx, &self.shape)] == 1
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Row-major multi-index of `flat`, written into `idx`.
pub fn unravel(mut flat: usize, shape: &[usize], idx: &mut [usize]) {
    for a in (0..shape.len()).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
}

/// Row-major flat offset of `idx`.
pub fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &e)| acc * e + i)
}

/// Length of the grid diagonal, `sqrt(sum(extent^2))`.
pub fn grid_diagonal(shape: &[usize]) -> f64 {
    shape.iter().map(|&e| (e * e) as f64).sum::<f64>().sqrt()
}

const INF: i64 = i64::MAX;

/// Lower envelope of the parabolas `(x - i)^2 + g[i]` over finite `g[i]`,
/// evaluated at every `x`. Integer arithmetic throughout, so exact.
fn envelope(g: &[i64], out: &mut [i64], s: &mut Vec<usize>, t: &mut Vec<i64>) {
    let m = g.len();
    let f = |x: i64, i: usize| (x - i as i64) * (x - i as i64) + g[i];
    // Largest x at which parabola i is still no worse than parabola u (i < u).
    let sep = |i: usize, u: usize| {
        let (i64i, i64u) = (i as i64, u as i64);
        (i64u * i64u - i64i * i64i + g[u] - g[i]).div_euclid(2 * (i64u - i64i))
    };
    s.clear();
    t.clear();
    for u in 0..m {
        if g[u] == INF {
            continue;
        }
        while let (Some(&sq), Some(&tq)) = (s.last(), t.last()) {
            if f(tq, sq) > f(tq, u) {
                s.pop();
                t.pop();
            } else {
                break;
            }
        }
        match s.last() {
            None => {
                s.push(u);
                t.push(0);
            }
            Some(&sq) => {
                let w = 1 + sep(sq, u);
                if w < m as i64 {
                    s.push(u);
                    t.push(w);
                }
            }
        }
    }
    if s.is_empty() {
        out.fill(INF);
        return;
    }
    let mut q = s.len() - 1;
    for x in (0..m).rev() {
        out[x] = f(x as i64, s[q]);
        if q > 0 && x as i64 == t[q] {
            q -= 1;
        }
    }
}

fn squared_edt_raw(shape: &[usize], seed: impl Fn(usize) -> bool) -> Vec<i64> {
    let n: usize = shape.iter().product();
    let mut field: Vec<i64> = (0..n).map(|i| if seed(i) { 0 } else { INF }).collect();
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for axis in 0..shape.len() {
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut line = vec![0i64; len];
        let mut out = vec![0i64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                for (j, l) in line.iter_mut().enumerate() {
                    *l = field[at(j)];
                }
                envelope(&line, &mut out, &mut s, &mut t);
                for (j, &v) in out.iter().enumerate() {
                    field[at(j)] = v;
                }
            }
        }
    }
    field
}

/// Squared Euclidean distance from every voxel to the nearest foreground voxel.
pub fn squared_edt(mask: &BinaryMask) -> Result<Vec<u64>> {
    if mask.count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let d = squared_edt_raw(&mask.shape, |i| mask.data[i] == 1);
    Ok(d.into_iter().map(|v| v as u64).collect())
}

/// Exact Euclidean distance from every voxel to the nearest foreground voxel,
/// by separable per-axis lower-envelope passes.
pub fn exact_edt(mask: &BinaryMask) -> Result<Vec<f64>> {
    Ok(squared_edt(mask)?
        .into_iter()
        .map(|v| (v as f64).sqrt())
        .collect())
}

/// Foreground voxels with a face-adjacent background neighbour inside the grid.
pub fn boundary_mask(mask: &BinaryMask) -> BinaryMask {
    let shape = &mask.shape;
    let mut strides = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let mut idx = vec![0; shape.len()];
    let data = (0..mask.data.len())
        .map(|flat| {
            if mask.data[flat] == 0 {
                return 0;
            }
            unravel(flat, shape, &mut idx);
            let touches = (0..shape.len()).any(|a| {
                (idx[a] > 0 && mask.data[flat - strides[a]] == 0)
                    || (idx[a] + 1 < shape[a] && mask.data[flat + strides[a]] == 0)
            });
            u8::from(touches)
        })
        .collect();
    BinaryMask {
        shape: shape.clone(),
        data,
    }
}

/// Per-voxel signed distance to the object boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedDistanceMap {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub normalized: bool,
    /// Set when the mask has no boundary (all foreground or all background).
    pub degenerate: bool,
}

/// Signed distance map in voxel units. A mask without boundary voxels maps to
/// `-D` (all foreground) or `+D` (all background), `D` the grid diagonal, and
/// is flagged degenerate.
pub fn signed_distance_map(mask: &BinaryMask) -> SignedDistanceMap {
    let boundary = boundary_mask(mask);
    if boundary.count() == 0 {
        let d = grid_diagonal(&mask.shape);
        let values = mask
            .data
            .iter()
            .map(|&v| if v == 1 { -d } else { d })
            .collect();
        return SignedDistanceMap {
            shape: mask.shape.clone(),
            values,
            normalized: false,
            degenerate: true,
        };
    }
    let sq = squared_edt_raw(&mask.shape, |i| boundary.data[i] == 1);
    let values = mask
        .data
        .iter()
        .zip(&boundary.data)
        .zip(sq)
        .map(|((&m, &b), d2)| {
            let d = (d2 as f64).sqrt();
            match (m, b) {
                (_, 1) => 0.0,
                (1, _) => -d,
                _ => d,
            }
        })
        .collect();
    SignedDistanceMap {
        shape: mask.shape.clone(),
        values,
        normalized: false,
        degenerate: false,
    }
}

impl SignedDistanceMap {
    /// Scale into `[-1, 1]`: by the largest magnitude, or by the grid diagonal
    /// for degenerate maps. Zeros stay exactly zero.
    pub fn normalized(&self) -> SignedDistanceMap {
        if self.normalized {
            return self.clone();
        }
        let scale = if self.degenerate {
            grid_diagonal(&self.shape)
        } else {
            self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let values = if scale > 0.0 {
            self.values.iter().map(|v| v / scale).collect()
        } else {
            self.values.clone()
        };
        SignedDistanceMap {
            shape: self.shape.clone(),
            values,
            normalized: true,
            degenerate: self.degenerate,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.clone()).expect("map shape matches values")
    }
}

pub fn normalize_sdm(sdm: &SignedDistanceMap) -> SignedDistanceMap {
    sdm.normalized()
}

/// Orientation of the smooth distance-to-probability map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// `sigma(-k z)`: negative (inside) distances map to foreground.
    #[default]
    InsideNegative,
    /// `sigma(k z)` exactly as the formula is usually printed.
    Literal,
}

impl SignMode {
    /// Multiplier applied to `z` before the logistic function.
    pub fn slope(self, k: f64) -> f64 {
        match self {
            SignMode::InsideNegative => -k,
            SignMode::Literal => k,
        }
    }
}

/// Smooth approximation of the inverse signed-distance transform.
pub fn approx_inverse(z: &Tensor, k: f64, mode: SignMode) -> Result<Tensor> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("k must be positive, got {k}")));
    }
    let a = mode.slope(k);
    Ok(z.map(|v| stable_sigmoid(a * v)))
}

/// Exponential boundary weights `exp(-rho * |d|)` for predicted distances `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap(pub Tensor);

impl WeightMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn mean(&self) -> f64 {
        self.values().iter().sum::<f64>() / self.values().len() as f64
    }
}

pub fn boundary_weights(sdm_pred: &Tensor, rho: f64) -> Result<WeightMap> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    Ok(WeightMap(sdm_pred.map(|d| (-rho * d.abs()).exp())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_squared(mask: &BinaryMask) -> Vec<u64> {
        let shape = mask.shape();
        let n = mask.len();
        let mut a = vec![0; shape.len()];
        let mut b = vec![0; shape.len()];
        let fg: Vec<usize> = (0..n).filter(|&i| mask.data()[i] == 1).collect();
        (0..n)
            .map(|i| {
                unravel(i, shape, &mut a);
                fg.iter()
                    .map(|&j| {
                        unravel(j, shape, &mut b);
                        a.iter()
                            .zip(&b)
                            .map(|(&x, &y)| (x as i64 - y as i64).pow(2) as u64)
                            .sum::<u64>()
                    })
                    .min()
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn edt_single_voxel_center() {
        let m = BinaryMask::from_fn(vec![3, 3], |i| i == [1, 1]);
        let d = exact_edt(&m).unwrap();
        assert_eq!(d[4], 0.0);
        assert_eq!(d[1], 1.0);
        assert_eq!(d[3], 1.0);
        assert!((d[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((d[8] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn edt_all_foreground_is_zero() {
        let m = BinaryMask::from_fn(vec![4, 5, 2], |_| true);
        assert!(exact_edt(&m).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edt_empty_rejected() {
        let m = BinaryMask::zeros(vec![4, 4]);
        assert!(matches!(exact_edt(&m), Err(Error::EmptyForeground)));
    }

    #[test]
    fn edt_matches_brute_force_on_sparse_and_dense_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let shape = vec![rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..6)];
            let p = [0.02, 0.2, 0.8][case % 3];
            let n: usize = shape.iter().product();
            let mut data: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p))).collect();
            data[rng.random_range(0..n)] = 1;
            let m = BinaryMask::new(shape, data).unwrap();
            assert_eq!(squared_edt(&m).unwrap(), brute_squared(&m));
        }
    }

    #[test]
    fn boundary_voxels_are_zero() {
        let m = BinaryMask::from_fn(vec![9, 9], |i| (2..7).contains(&i[0]) && (3..8).contains(&i[1]));
        let b = boundary_mask(&m);
        let sdm = signed_distance_map(&m);
        for i in 0..m.len() {
            if b.data()[i] == 1 {
                assert_eq!(sdm.values[i], 0.0);
            }
        }
    }

    #[test]
    fn filled_square_center_is_minus_two() {
        let m = BinaryMask::from_fn(vec![11, 11], |i| (3..8).contains(&i[0]) && (3..8).contains(&i[1]));
        let sdm = signed_distance_map(&m);
        let min = sdm.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, -2.0);
        assert_eq!(sdm.values.iter().filter(|&&v| v == min).count(), 1);
        assert_eq!(sdm.values[5 * 11 + 5], -2.0);
    }

    #[test]
    fn degenerate_masks() {
        let bg = signed_distance_map(&BinaryMask::zeros(vec![3, 4]));
        assert!(bg.degenerate);
        assert!(bg.values.iter().all(|&v| v == 5.0));
        let fg = signed_distance_map(&BinaryMask::from_fn(vec![3, 4], |_| true));
        assert!(fg.degenerate && fg.values.iter().all(|&v| v == -5.0));
        assert!(fg.normalized().values.iter().all(|&v| v == -1.0));
        assert!(bg.normalized().values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalization_scales_by_largest_magnitude() {
        let sdm = SignedDistanceMap {
            shape: vec![4],
            values: vec![-3.0, 0.0, 2.0, 6.0],
            normalized: false,
            degenerate: false,
        };
        let n = sdm.normalized();
        assert_eq!(n.values, vec![-0.5, 0.0, 2.0 / 6.0, 1.0]);
        let zeros = SignedDistanceMap {
            values: vec![0.0; 4],
            ..sdm
        };
        assert_eq!(zeros.normalized().values, vec![0.0; 4]);
    }

    #[test]
    fn inverse_transform_values() {
        let z = Tensor::new(vec![3], vec![0.0, -1.0, 0.01]).unwrap();
        let p = approx_inverse(&z, 1500.0, SignMode::InsideNegative).unwrap();
        assert_eq!(p.data()[0], 0.5);
        assert!((p.data()[1] - 1.0).abs() < 1e-6);
        assert!(p.data()[2].abs() < 1e-6);
        let lit = approx_inverse(&z, 7.0, SignMode::Literal).unwrap();
        assert_eq!(lit.data()[0], 0.5);
        assert!(lit.data()[1] < 0.5);
        assert!(approx_inverse(&z, 0.0, SignMode::Literal).is_err());
    }

    #[test]
    fn weight_values() {
        let d = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let w = boundary_weights(&d, 2.0).unwrap();
        assert_eq!(w.values()[0], 1.0);
        assert!((w.values()[1] - (-2.0f64).exp()).abs() < 1e-12);
        assert_eq!(w.values()[1], w.values()[2]);
        let half = Tensor::scalar(0.5);
        let w1 = boundary_weights(&half, 1.0).unwrap().values()[0];
        let w3 = boundary_weights(&half, 3.0).unwrap().values()[0];
        assert!(w1 > w3);
        assert!(boundary_weights(&d, 0.0).is_err());
    }
}
