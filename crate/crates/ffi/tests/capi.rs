// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{c_char, CString};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::ptr;

use saelab_core::numerics::RngSeed;
use saelab_core::sae::{Sae, SaeConfig};
use saelab_core::tinylm::{TinyLm, TinyLmConfig};
use saelab_ffi::*;

fn small_lm() -> TinyLm {
    TinyLm::init(TinyLmConfig {
        vocab_size: 16,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 8,
        mlp_ratio: 2,
        seed: RngSeed(3),
    })
    .unwrap()
}

fn small_sae() -> Sae {
    Sae::init(SaeConfig {
        input_dim: 8,
        latent_dim: 12,
        seed: RngSeed(4),
        ..Default::default()
    })
    .unwrap()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { saelab_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

struct Loaded {
    lm: *mut SaelabLm,
    sae: *mut SaelabSae,
    core_lm: TinyLm,
    core_sae: Sae,
    _dir: tempfile::TempDir,
}

impl Drop for Loaded {
    fn drop(&mut self) {
        unsafe {
            saelab_lm_free(self.lm);
            saelab_sae_free(self.sae);
        }
    }
}

fn load() -> Loaded {
    let dir = tempfile::tempdir().unwrap();
    let (core_lm, core_sae) = (small_lm(), small_sae());
    core_lm.save(&dir.path().join("lm.json")).unwrap();
    core_sae.save(&dir.path().join("sae.json")).unwrap();
    let mut lm = ptr::null_mut();
    let mut sae = ptr::null_mut();
    unsafe {
        assert_eq!(saelab_lm_load(cpath(&dir.path().join("lm.json")).as_ptr(), &mut lm), SaelabStatus::Ok);
        assert_eq!(saelab_sae_load(cpath(&dir.path().join("sae.json")).as_ptr(), &mut sae), SaelabStatus::Ok);
    }
    Loaded {
        lm,
        sae,
        core_lm,
        core_sae,
        _dir: dir,
    }
}

#[test]
fn dims_match_the_checkpoints() {
    let h = load();
    let (mut v, mut d, mut l, mut t) = (0, 0, 0, 0);
    let (mut i, mut k) = (0, 0);
    unsafe {
        assert_eq!(saelab_lm_dims(h.lm, &mut v, &mut d, &mut l, &mut t), SaelabStatus::Ok);
        assert_eq!(saelab_sae_dims(h.sae, &mut i, &mut k), SaelabStatus::Ok);
        assert_eq!(saelab_lm_dims(h.lm, ptr::null_mut(), &mut d, ptr::null_mut(), ptr::null_mut()), SaelabStatus::Ok);
    }
    assert_eq!((v, d, l, t), (16, 8, 2, 8));
    assert_eq!((i, k), (8, 12));
}

#[test]
fn forward_results_are_identical_to_the_library() {
    let h = load();
    let tokens = [0u32, 5, 9, 1];
    let trace = h.core_lm.forward(&tokens).unwrap();
    let mut dist = vec![0.0; 16];
    let mut resid = vec![0.0; 4 * 8];
    unsafe {
        assert_eq!(saelab_lm_next_token(h.lm, tokens.as_ptr(), 4, dist.as_mut_ptr(), dist.len()), SaelabStatus::Ok);
        assert_eq!(saelab_lm_residual(h.lm, tokens.as_ptr(), 4, 1, resid.as_mut_ptr(), resid.len()), SaelabStatus::Ok);
    }
    assert_eq!(dist, trace.distribution);
    assert_eq!(resid, trace.residuals[1].data());

    let x = trace.residuals[1].row(3).to_vec();
    let mut z = vec![0.0; 12];
    let mut back = vec![0.0; 8];
    unsafe {
        assert_eq!(saelab_sae_encode(h.sae, x.as_ptr(), 8, z.as_mut_ptr(), 12), SaelabStatus::Ok);
        assert_eq!(saelab_sae_decode(h.sae, z.as_ptr(), 12, back.as_mut_ptr(), 8), SaelabStatus::Ok);
    }
    let code = h.core_sae.encode(&x).unwrap();
    assert_eq!(z, code.z);
    assert_eq!(back, h.core_sae.decode(&code).unwrap());
}

#[test]
fn zero_strength_steering_reproduces_the_baseline() {
    let h = load();
    let tokens = [0u32, 7, 7, 1];
    let mut base = vec![0.0; 16];
    let mut steered = vec![0.0; 16];
    let mut pushed = vec![0.0; 16];
    unsafe {
        saelab_lm_next_token(h.lm, tokens.as_ptr(), 4, base.as_mut_ptr(), 16);
        assert_eq!(
            saelab_steered_next_token(h.lm, h.sae, tokens.as_ptr(), 4, 2, 0.0, 1, steered.as_mut_ptr(), 16),
            SaelabStatus::Ok
        );
        assert_eq!(
            saelab_steered_next_token(h.lm, h.sae, tokens.as_ptr(), 4, 2, 5.0, 1, pushed.as_mut_ptr(), 16),
            SaelabStatus::Ok
        );
    }
    assert_eq!(base, steered);
    assert_ne!(base, pushed);
}

#[test]
fn errors_carry_codes_and_messages() {
    let h = load();
    let tokens = [0u32, 1];
    let mut small = vec![0.0; 3];
    unsafe {
        assert_eq!(saelab_lm_next_token(h.lm, tokens.as_ptr(), 2, small.as_mut_ptr(), 3), SaelabStatus::BufferTooSmall);
        assert!(last_error().contains("16 values"));
        assert_eq!(small, vec![0.0; 3]);

        let bad = [0u32, 99];
        let mut dist = vec![0.0; 16];
        assert_ne!(saelab_lm_next_token(h.lm, bad.as_ptr(), 2, dist.as_mut_ptr(), 16), SaelabStatus::Ok);
        assert!(!last_error().is_empty());

        assert_eq!(saelab_lm_residual(h.lm, tokens.as_ptr(), 2, 3, dist.as_mut_ptr(), 16), SaelabStatus::InvalidInput);
        assert_eq!(
            saelab_steered_next_token(h.lm, h.sae, tokens.as_ptr(), 2, 12, 1.0, 1, dist.as_mut_ptr(), 16),
            SaelabStatus::InvalidInput
        );
        let x = [0.0; 5];
        let mut z = vec![0.0; 12];
        assert_eq!(saelab_sae_encode(h.sae, x.as_ptr(), 5, z.as_mut_ptr(), 12), SaelabStatus::ShapeMismatch);

        assert_eq!(saelab_lm_next_token(ptr::null(), tokens.as_ptr(), 2, dist.as_mut_ptr(), 16), SaelabStatus::NullPointer);
        assert_eq!(saelab_lm_dims(h.lm, ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), SaelabStatus::Ok);
        assert_eq!(last_error(), "");
    }
}

#[test]
fn load_failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut lm = ptr::null_mut();
    let mut sae = ptr::null_mut();
    unsafe {
        assert_eq!(saelab_lm_load(cpath(&dir.path().join("missing.json")).as_ptr(), &mut lm), SaelabStatus::Io);
        assert!(lm.is_null());
        fs::write(dir.path().join("junk.json"), "{").unwrap();
        assert_eq!(saelab_sae_load(cpath(&dir.path().join("junk.json")).as_ptr(), &mut sae), SaelabStatus::Format);
        assert_eq!(saelab_lm_load(ptr::null(), &mut lm), SaelabStatus::NullPointer);
        assert!(last_error().contains("null"));
        small_sae().save(&dir.path().join("sae.json")).unwrap();
        assert_ne!(saelab_lm_load(cpath(&dir.path().join("sae.json")).as_ptr(), &mut lm), SaelabStatus::Ok);
        saelab_lm_free(ptr::null_mut());
        saelab_sae_free(ptr::null_mut());
    }
}

#[test]
fn error_message_is_truncated_to_the_buffer() {
    unsafe {
        saelab_lm_load(ptr::null(), &mut ptr::null_mut());
        let full = saelab_last_error_message(ptr::null_mut(), 0);
        let mut buf = [1 as c_char; 5];
        assert_eq!(saelab_last_error_message(buf.as_mut_ptr(), 5), full);
        assert_eq!(buf[4], 0);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { std::ffi::CStr::from_ptr(saelab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/saelab.h");
    let text = fs::read_to_string(&header).unwrap();
    for name in [
        "saelab_lm_load",
        "saelab_lm_free",
        "saelab_lm_residual",
        "saelab_sae_encode",
        "saelab_steered_next_token",
        "saelab_last_error_message",
        "SAELAB_STATUS_BUFFER_TOO_SMALL",
        "typedef struct SaelabLm SaelabLm",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    fs::write(
        &src,
        "#include \"saelab.h\"\nint main(void) { SaelabLm *lm = 0; return saelab_lm_load(\"x\", &lm) == SAELAB_STATUS_OK; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler; syntax check skipped"),
    }
}
