// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `saelab-core`: load a trained language model and sparse
//! autoencoder, read residual streams, encode/decode and steer.
//!
//! Every fallible function returns a [`SaelabStatus`]. On failure the
//! message is kept per thread and can be fetched with
//! [`saelab_last_error_message`]. Handles are opaque and must be released
//! with the matching `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use saelab_core::sae::{Sae, SparseCode};
use saelab_core::steering::{steered_forward, SteeringSpec};
use saelab_core::tinylm::{TapPoint, TinyLm};
use saelab_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaelabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    Config = 7,
    Degenerate = 8,
    Divergence = 9,
    /// The output buffer is shorter than the result; nothing was written.
    BufferTooSmall = 10,
    Panic = 11,
}

/// A trained language model.
pub struct SaelabLm(TinyLm);

/// A trained sparse autoencoder.
pub struct SaelabSae(Sae);

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.as_bytes().to_vec());
}

fn status_of(err: &Error) -> SaelabStatus {
    match err {
        Error::Shape { .. } => SaelabStatus::ShapeMismatch,
        Error::NonFinite { .. } => SaelabStatus::NonFinite,
        Error::InvalidInput(_) => SaelabStatus::InvalidInput,
        Error::Config(_) => SaelabStatus::Config,
        Error::Divergence(_) => SaelabStatus::Divergence,
        Error::Degenerate(_) => SaelabStatus::Degenerate,
        Error::Io(_) => SaelabStatus::Io,
        Error::Json(_) | Error::Format(_) => SaelabStatus::Format,
    }
}

struct Fail(SaelabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SaelabStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SaelabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SaelabStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside saelab");
            SaelabStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SaelabStatus::InvalidInput, "path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write_out(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out_len < values.len() {
        return Err(Fail(
            SaelabStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {out_len}", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn saelab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message
/// length excluding the terminator. Empty after a successful call.
#[no_mangle]
pub unsafe extern "C" fn saelab_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a model checkpoint written by `saelab train-lm`.
#[no_mangle]
pub unsafe extern "C" fn saelab_lm_load(path: *const c_char, out: *mut *mut SaelabLm) -> SaelabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = TinyLm::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SaelabLm(model)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn saelab_lm_free(lm: *mut SaelabLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Writes vocabulary size, hidden width, layer count and context length.
/// Any output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn saelab_lm_dims(
    lm: *const SaelabLm,
    vocab_size: *mut usize,
    hidden_dim: *mut usize,
    num_layers: *mut usize,
    max_seq_len: *mut usize,
) -> SaelabStatus {
    guard(|| {
        let c = &handle(lm, "lm")?.0.config;
        for (p, v) in [
            (vocab_size, c.vocab_size),
            (hidden_dim, c.hidden_dim),
            (num_layers, c.num_layers),
            (max_seq_len, c.max_seq_len),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Next-token distribution after `tokens` (`vocab_size` values).
#[no_mangle]
pub unsafe extern "C" fn saelab_lm_next_token(
    lm: *const SaelabLm,
    tokens: *const u32,
    num_tokens: usize,
    out: *mut f64,
    out_len: usize,
) -> SaelabStatus {
    guard(|| {
        let model = &handle(lm, "lm")?.0;
        let trace = model.forward(input(tokens, num_tokens, "tokens")?)?;
        write_out(&trace.distribution, out, out_len)
    })
}

/// Residual stream at `tap` (0 = embeddings, `num_layers` = final), row-major
/// `num_tokens × hidden_dim`.
#[no_mangle]
pub unsafe extern "C" fn saelab_lm_residual(
    lm: *const SaelabLm,
    tokens: *const u32,
    num_tokens: usize,
    tap: usize,
    out: *mut f64,
    out_len: usize,
) -> SaelabStatus {
    guard(|| {
        let model = &handle(lm, "lm")?.0;
        if tap > model.config.num_layers {
            return Err(Fail(SaelabStatus::InvalidInput, format!("tap {tap} out of range")));
        }
        let trace = model.forward(input(tokens, num_tokens, "tokens")?)?;
        write_out(trace.residuals[tap].data(), out, out_len)
    })
}

/// Loads an autoencoder checkpoint written by `saelab train-sae`.
#[no_mangle]
pub unsafe extern "C" fn saelab_sae_load(path: *const c_char, out: *mut *mut SaelabSae) -> SaelabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let sae = Sae::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SaelabSae(sae)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn saelab_sae_free(sae: *mut SaelabSae) {
    if !sae.is_null() {
        drop(Box::from_raw(sae));
    }
}

#[no_mangle]
pub unsafe extern "C" fn saelab_sae_dims(sae: *const SaelabSae, input_dim: *mut usize, latent_dim: *mut usize) -> SaelabStatus {
    guard(|| {
        let s = &handle(sae, "sae")?.0;
        if !input_dim.is_null() {
            *input_dim = s.input_dim();
        }
        if !latent_dim.is_null() {
            *latent_dim = s.latent_dim();
        }
        Ok(())
    })
}

/// Sparse code of one residual vector (`latent_dim` values).
#[no_mangle]
pub unsafe extern "C" fn saelab_sae_encode(
    sae: *const SaelabSae,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SaelabStatus {
    guard(|| {
        let s = &handle(sae, "sae")?.0;
        let code = s.encode(input(x, x_len, "x")?)?;
        write_out(&code.z, out, out_len)
    })
}

/// Reconstruction of one code (`input_dim` values).
#[no_mangle]
pub unsafe extern "C" fn saelab_sae_decode(
    sae: *const SaelabSae,
    z: *const f64,
    z_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SaelabStatus {
    guard(|| {
        let s = &handle(sae, "sae")?.0;
        let code = SparseCode { z: input(z, z_len, "z")?.to_vec() };
        write_out(&s.decode(&code)?, out, out_len)
    })
}

/// Next-token distribution with `strength` times decoder column `feature`
/// added to every position of the stream at `tap`.
#[no_mangle]
pub unsafe extern "C" fn saelab_steered_next_token(
    lm: *const SaelabLm,
    sae: *const SaelabSae,
    tokens: *const u32,
    num_tokens: usize,
    feature: usize,
    strength: f64,
    tap: usize,
    out: *mut f64,
    out_len: usize,
) -> SaelabStatus {
    guard(|| {
        let model = &handle(lm, "lm")?.0;
        let s = &handle(sae, "sae")?.0;
        let spec = SteeringSpec {
            feature,
            strength,
            tap: TapPoint(tap),
        };
        let d = steered_forward(model, s, input(tokens, num_tokens, "tokens")?, &spec)?;
        write_out(&d.steered, out, out_len)
    })
}
