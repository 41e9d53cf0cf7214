//! Sliding-window inference over whole volumes and test-set evaluation.

use crate::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::grid;
use crate::metrics::{CaseMetrics, MetricReport};
use crate::network::Network;
use crate::tensor::Tensor;

/// Probabilities strictly above this are foreground.
pub const THRESHOLD: f64 = 0.5;

/// Window start offsets along one axis: multiples of `stride`, with the last
/// window clamped so it ends at `len`.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut starts: Vec<usize> = (0..last).step_by(stride).collect();
    starts.push(last);
    starts
}

/// Tiles `image` (of `shape`) with windows and averages the per-window outputs
/// of `f` uniformly. Volumes smaller than the window are zero-padded first.
/// `f` maps a `[1, 1, window...]` tensor to a `[1, 1, window...]` tensor.
pub fn sliding_window_map(
    image: &[f64],
    shape: &[usize],
    window: &[usize],
    stride: &[usize],
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    if window.len() != shape.len() || stride.len() != shape.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window:?} and stride {stride:?} must match volume rank {}",
            shape.len()
        )));
    }
    if stride.iter().zip(window).any(|(&s, &w)| s == 0 || s > w) {
        return Err(Error::InvalidArgument(format!(
            "stride {stride:?} must be positive and no larger than window {window:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if image.len() != n {
        return Err(Error::ShapeMismatch {
            op: "sliding_window",
            lhs: shape.to_vec(),
            rhs: vec![image.len()],
        });
    }
    let padded: Vec<usize> = shape.iter().zip(window).map(|(&s, &w)| s.max(w)).collect();
    let source = if padded == shape {
        image.to_vec()
    } else {
        let mut p = vec![0.0; padded.iter().product()];
        grid::paste(&mut p, &padded, &vec![0; shape.len()], shape, image);
        p
    };
    let starts: Vec<Vec<usize>> = padded
        .iter()
        .zip(window)
        .zip(stride)
        .map(|((&l, &w), &s)| window_starts(l, w, s))
        .collect();
    let mut sum = vec![0.0; source.len()];
    let mut count = vec![0u32; source.len()];
    let mut tile_shape = vec![1, 1];
    tile_shape.extend_from_slice(window);
    let mut pos = vec![0usize; shape.len()];
    loop {
        let corner: Vec<usize> = pos.iter().zip(&starts).map(|(&i, s)| s[i]).collect();
        let tile = Tensor::new(tile_shape.clone(), grid::crop(&source, &padded, &corner, window))?;
        let out = f(&tile)?;
        if out.shape() != tile_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "sliding_window",
                lhs: tile_shape.clone(),
                rhs: out.shape().to_vec(),
            });
        }
        let mut acc = grid::crop(&sum, &padded, &corner, window);
        let mut cnt = grid::crop(&count, &padded, &corner, window);
        for ((a, c), &v) in acc.iter_mut().zip(cnt.iter_mut()).zip(out.data()) {
            *a += v;
            *c += 1;
        }
        grid::paste(&mut sum, &padded, &corner, window, &acc);
        grid::paste(&mut count, &padded, &corner, window, &cnt);
        // odometer over window positions
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                let avg: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / f64::from(c)).collect();
                return Ok(if padded == shape {
                    avg
                } else {
                    grid::crop(&avg, &padded, &vec![0; shape.len()], shape)
                });
            }
            axis -= 1;
            pos[axis] += 1;
            if pos[axis] < starts[axis].len() {
                break;
            }
            pos[axis] = 0;
        }
    }
}

/// Foreground probability of the final (decoder 1) map over a whole volume.
pub fn sliding_window_infer(
    network: &Network,
    image: &[f64],
    shape: &[usize],
    window: &[usize],
    stride: &[usize],
) -> Result<Vec<f64>> {
    let mut tile_shape = vec![1, network.config().in_channels];
    tile_shape.extend_from_slice(window);
    network.check_input(&tile_shape)?;
    sliding_window_map(image, shape, window, stride, |tile| {
        Ok(network.predict(tile)?.select_final().clone())
    })
}

/// Per-case and mean metrics of thresholded sliding-window predictions.
pub fn evaluate(network: &Network, cases: &[VolumeRecord], window: &[usize], stride: &[usize]) -> Result<MetricReport> {
    let rows = cases
        .iter()
        .map(|rec| {
            let truth = rec.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("test case {} has no mask", rec.case_id))
            })?;
            let probs = sliding_window_infer(network, &rec.image_f64(), &rec.shape, window, stride)?;
            let pred = BinaryMask::threshold(rec.shape.clone(), &probs, THRESHOLD)?;
            CaseMetrics::compute(&rec.case_id, &pred, truth)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_cases(rows)
}
