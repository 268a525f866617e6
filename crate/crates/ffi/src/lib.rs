//! C ABI over the `asppnet` crate.
//!
//! Networks are opaque handles created by `asppnet_network_build` or
//! `asppnet_network_load` and released with `asppnet_network_free`. Every
//! fallible call returns an [`AsppnetStatus`]; on failure the message is
//! available from `asppnet_last_error` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use asppnet::metrics::ConfusionCounts;
use asppnet::model::checkpoint;
use asppnet::optim::cosine_lr;
use asppnet::{Error, ModelSpec, Network, Tensor, Variant};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsppnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Shape = 6,
    NonFinite = 7,
    Panic = 8,
}

/// Opaque network handle.
pub struct AsppnetNetwork {
    net: Network<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AsppnetMetrics {
    pub dsc: f64,
    pub miou: f64,
    pub iou_fg: f64,
    pub accuracy: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AsppnetStatus {
    match e {
        Error::InvalidArgument(_) => AsppnetStatus::InvalidArgument,
        Error::Config(_) => AsppnetStatus::Config,
        Error::Io { .. } => AsppnetStatus::Io,
        Error::Parse(_) => AsppnetStatus::Parse,
        Error::NonFinite { .. } => AsppnetStatus::NonFinite,
        Error::ShapeMismatch { .. } | Error::ChannelMismatch { .. } | Error::InvalidShape { .. } => AsppnetStatus::Shape,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (AsppnetStatus, String)>) -> AsppnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsppnetStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            AsppnetStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (AsppnetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AsppnetStatus, String) {
    (AsppnetStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AsppnetStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AsppnetStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn asppnet_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn asppnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialised network.
///
/// `variant` is one of "unet", "att_unet", "att_unet_spp", "att_unet_aspp".
///
/// # Safety
/// `variant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_build(
    variant: *const c_char,
    depth: u32,
    base_channels: u32,
    image_size: u32,
    seed: u64,
    out: *mut *mut AsppnetNetwork,
) -> AsppnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v: Variant = c_str(variant, "variant")?.parse().map_err(lib_err)?;
        let spec = ModelSpec {
            depth: depth as usize,
            base_channels: base_channels as usize,
            image_size: image_size as usize,
            ..ModelSpec::new(v)
        };
        let net = Network::build(&spec, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AsppnetNetwork { net }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_load(path: *const c_char, out: *mut *mut AsppnetNetwork) -> AsppnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = PathBuf::from(c_str(path, "path")?);
        let (net, _) = checkpoint::load::<f32>(&p).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AsppnetNetwork { net }));
        Ok(())
    })
}

/// Writes the network weights as a checkpoint file.
///
/// # Safety
/// `net` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_save(net: *const AsppnetNetwork, path: *const c_char) -> AsppnetStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        let p = PathBuf::from(c_str(path, "path")?);
        checkpoint::save(&p, &n.net, None).map_err(lib_err)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_free(net: *mut AsppnetNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_param_count(net: *const AsppnetNetwork, out: *mut usize) -> AsppnetStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = n.net.param_count();
        Ok(())
    })
}

/// Number of attention gates.
///
/// # Safety
/// `net` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_gate_count(net: *const AsppnetNetwork, out: *mut usize) -> AsppnetStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = n.net.gate_count();
        Ok(())
    })
}

/// Input side length the network was built for.
///
/// # Safety
/// `net` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_image_size(net: *const AsppnetNetwork, out: *mut usize) -> AsppnetStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = n.net.spec().image_size;
        Ok(())
    })
}

/// Foreground probabilities for `n` single-channel `h`×`w` images, row-major.
/// `images` and `probs` both hold `n*h*w` floats.
///
/// # Safety
/// `images` must point to `n*h*w` readable floats and `probs` to as many
/// writable ones.
#[no_mangle]
pub unsafe extern "C" fn asppnet_network_predict(
    net: *const AsppnetNetwork,
    images: *const f32,
    n: usize,
    h: usize,
    w: usize,
    probs: *mut f32,
) -> AsppnetStatus {
    guard(|| {
        let nw = net.as_ref().ok_or_else(|| null("net"))?;
        if images.is_null() {
            return Err(null("images"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        let len = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|&v| v > 0)
            .ok_or_else(|| (AsppnetStatus::InvalidArgument, format!("bad batch shape {n}×{h}×{w}")))?;
        let x = Tensor::new(vec![n, 1, h, w], std::slice::from_raw_parts(images, len).to_vec()).map_err(lib_err)?;
        let p = nw.net.predict(&x).map_err(lib_err)?;
        std::ptr::copy_nonoverlapping(p.data().as_ptr(), probs, len);
        Ok(())
    })
}

/// DSC, mIoU, foreground IoU and accuracy of two 0/1 masks of length `len`.
///
/// # Safety
/// `pred` and `target` must point to `len` readable bytes, `out` to a
/// writable struct.
#[no_mangle]
pub unsafe extern "C" fn asppnet_metrics(
    pred: *const u8,
    target: *const u8,
    len: usize,
    out: *mut AsppnetMetrics,
) -> AsppnetStatus {
    guard(|| {
        if pred.is_null() || target.is_null() {
            return Err(null("mask"));
        }
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let c = ConfusionCounts::from_masks(std::slice::from_raw_parts(pred, len), std::slice::from_raw_parts(target, len))
            .map_err(lib_err)?;
        *o = AsppnetMetrics {
            dsc: c.dsc(),
            miou: c.miou(),
            iou_fg: c.iou_fg(),
            accuracy: c.accuracy(),
        };
        Ok(())
    })
}

/// Cosine-annealed learning rate at epoch `t_cur` of a cycle of `t_i` epochs.
#[no_mangle]
pub extern "C" fn asppnet_cosine_lr(eta_min: f64, eta_max: f64, t_cur: f64, t_i: f64) -> f64 {
    cosine_lr(eta_min, eta_max, t_cur, t_i)
}
