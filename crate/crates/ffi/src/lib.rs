//! C ABI over the geoseg library.
//!
//! Every function returns a `GsStatus`; on failure a message is available from
//! `gs_last_error_message` on the same thread. Arrays are row-major and sized
//! by the product of the `shape` extents. Networks are opaque handles that
//! must be released with `gs_network_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use geoseg::checkpoint::load_checkpoint;
use geoseg::geometry::{approx_inverse, boundary_weights, signed_distance_map, BinaryMask, SignMode};
use geoseg::inference::sliding_window_infer;
use geoseg::losses::ramp_up;
use geoseg::metrics::{dice_jaccard, surface_distances};
use geoseg::{Error, Network, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    /// A metric is undefined for the inputs (for example an empty surface).
    Undefined = 7,
    Internal = 8,
}

/// Opaque trained network.
pub struct GsNetwork {
    inner: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GsStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::Divisibility { .. } | Error::UndersizedVolume { .. } => GsStatus::Shape,
        Error::NonFinite { .. } => GsStatus::NonFinite,
        Error::Io { .. } | Error::Exists(_) => GsStatus::Io,
        Error::Format { .. } | Error::Digest(_) | Error::Json(_) => GsStatus::Format,
        _ => GsStatus::InvalidArgument,
    }
}

struct Fail(GsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            GsStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn dims<'a>(shape: *const usize, rank: usize) -> Result<&'a [usize], Fail> {
    if shape.is_null() {
        return Err(null("shape"));
    }
    if rank == 0 {
        return Err(Fail(GsStatus::InvalidArgument, "rank must be positive".into()));
    }
    Ok(slice::from_raw_parts(shape, rank))
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn mask_from(p: *const u8, shape: &[usize], what: &str) -> Result<BinaryMask, Fail> {
    let n = shape.iter().product();
    Ok(BinaryMask::new(shape.to_vec(), input(p, n, what)?.to_vec())?)
}

/// Message of the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn gs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_network_load(path: *const c_char, out: *mut *mut GsNetwork) -> GsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(GsStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = load_checkpoint(Path::new(p))?;
        *out = Box::into_raw(Box::new(GsNetwork { inner: ck.network }));
        Ok(())
    })
}

/// Releases a handle from `gs_network_load`. Null is ignored.
///
/// # Safety
/// `net` must come from `gs_network_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gs_network_free(net: *mut GsNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of spatial axes the network expects.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gs_network_spatial_rank(net: *const GsNetwork, out: *mut usize) -> GsStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = net.inner.config().spatial_rank;
        Ok(())
    })
}

/// Foreground probabilities from tiled inference. `window` and `stride` have
/// `rank` entries; `out` holds as many values as `image`.
///
/// # Safety
/// Arrays must be valid for the sizes implied by `shape` and `rank`.
#[no_mangle]
pub unsafe extern "C" fn gs_sliding_window(
    net: *const GsNetwork,
    image: *const f64,
    shape: *const usize,
    rank: usize,
    window: *const usize,
    stride: *const usize,
    out: *mut f64,
) -> GsStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let shape = dims(shape, rank)?;
        let n = shape.iter().product();
        let image = input(image, n, "image")?;
        let window = input(window, rank, "window")?;
        let stride = input(stride, rank, "stride")?;
        let probs = sliding_window_infer(&net.inner, image, shape, window, stride)?;
        output(out, n, "out")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Single forward pass over the whole volume (extents must suit the network).
///
/// # Safety
/// Arrays must be valid for the sizes implied by `shape` and `rank`.
#[no_mangle]
pub unsafe extern "C" fn gs_network_predict(
    net: *const GsNetwork,
    image: *const f64,
    shape: *const usize,
    rank: usize,
    out: *mut f64,
) -> GsStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let shape = dims(shape, rank)?;
        let n = shape.iter().product();
        let mut full = vec![1, 1];
        full.extend_from_slice(shape);
        let x = Tensor::new(full, input(image, n, "image")?.to_vec())?;
        let pred = net.inner.predict(&x)?;
        output(out, n, "out")?.copy_from_slice(pred.select_final().data());
        Ok(())
    })
}

/// Signed distance map of a binary mask (values 0 or 1). With `normalize`
/// non-zero the map is scaled into `[-1, 1]`. `degenerate` may be null.
///
/// # Safety
/// Arrays must be valid for the sizes implied by `shape` and `rank`.
#[no_mangle]
pub unsafe extern "C" fn gs_signed_distance_map(
    mask: *const u8,
    shape: *const usize,
    rank: usize,
    normalize: c_int,
    out: *mut f64,
    degenerate: *mut c_int,
) -> GsStatus {
    guard(|| {
        let shape = dims(shape, rank)?;
        let m = mask_from(mask, shape, "mask")?;
        let mut sdm = signed_distance_map(&m);
        if normalize != 0 {
            sdm = sdm.normalized();
        }
        output(out, m.len(), "out")?.copy_from_slice(&sdm.values);
        if let Some(d) = degenerate.as_mut() {
            *d = c_int::from(sdm.degenerate);
        }
        Ok(())
    })
}

/// `exp(-rho |d|)` for `n` distances.
///
/// # Safety
/// `sdm` and `out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn gs_boundary_weights(sdm: *const f64, n: usize, rho: f64, out: *mut f64) -> GsStatus {
    guard(|| {
        let t = Tensor::new(vec![n], input(sdm, n, "sdm")?.to_vec())?;
        output(out, n, "out")?.copy_from_slice(boundary_weights(&t, rho)?.values());
        Ok(())
    })
}

/// Logistic map of distances to foreground probability; `literal` non-zero uses
/// `sigma(k z)`, otherwise `sigma(-k z)`.
///
/// # Safety
/// `z` and `out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn gs_approx_inverse(z: *const f64, n: usize, k: f64, literal: c_int, out: *mut f64) -> GsStatus {
    guard(|| {
        let t = Tensor::new(vec![n], input(z, n, "z")?.to_vec())?;
        let mode = if literal != 0 { SignMode::Literal } else { SignMode::InsideNegative };
        output(out, n, "out")?.copy_from_slice(approx_inverse(&t, k, mode)?.data());
        Ok(())
    })
}

/// Dice and Jaccard overlap of two binary masks of the same shape.
///
/// # Safety
/// Arrays must be valid for the sizes implied by `shape` and `rank`.
#[no_mangle]
pub unsafe extern "C" fn gs_dice_jaccard(
    pred: *const u8,
    truth: *const u8,
    shape: *const usize,
    rank: usize,
    dice: *mut f64,
    jaccard: *mut f64,
) -> GsStatus {
    guard(|| {
        let shape = dims(shape, rank)?;
        let (d, j) = dice_jaccard(&mask_from(pred, shape, "pred")?, &mask_from(truth, shape, "truth")?)?;
        *dice.as_mut().ok_or_else(|| null("dice"))? = d;
        *jaccard.as_mut().ok_or_else(|| null("jaccard"))? = j;
        Ok(())
    })
}

/// Symmetric average and 95th-percentile surface distances in voxels.
/// Returns `Undefined` when either mask has no surface.
///
/// # Safety
/// Arrays must be valid for the sizes implied by `shape` and `rank`.
#[no_mangle]
pub unsafe extern "C" fn gs_surface_distances(
    pred: *const u8,
    truth: *const u8,
    shape: *const usize,
    rank: usize,
    asd: *mut f64,
    hd95: *mut f64,
) -> GsStatus {
    guard(|| {
        let shape = dims(shape, rank)?;
        let s = surface_distances(&mask_from(pred, shape, "pred")?, &mask_from(truth, shape, "truth")?)?
            .ok_or_else(|| Fail(GsStatus::Undefined, "a mask has no surface voxels".into()))?;
        *asd.as_mut().ok_or_else(|| null("asd"))? = s.asd;
        *hd95.as_mut().ok_or_else(|| null("hd95"))? = s.hd95;
        Ok(())
    })
}

/// Consistency weight `lambda_max * exp(-5 (1 - t / t_max)^power)`.
#[no_mangle]
pub extern "C" fn gs_ramp_up(t: usize, t_max: usize, lambda_max: f64, power: u32) -> f64 {
    ramp_up(t, t_max, lambda_max, power)
}
