//! C ABI over the splitleak library.
//!
//! Every fallible function returns an [`SlStatus`]; on failure the message is
//! available from [`sl_last_error`] on the same thread. Models are opaque
//! handles created by `sl_model_new` or `sl_model_load` and released with
//! `sl_model_free`. Token ids are `size_t`, activations are row-major
//! `double` buffers of `rows * hidden_dim` entries.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use splitleak::attack::{actinv, AttackConfig, Distance};
use splitleak::defense::{apply_defense, DefenseContext, DefenseSpec};
use splitleak::metrics::{precision_recall, rouge_l};
use splitleak::model::{load_checkpoint, save_checkpoint, LayerRef, ModelConfig, Precision, SplitModel};
use splitleak::sensitivity::{paf_estimate, PafConfig};
use splitleak::{Error, Rng, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numeric = 4,
    Io = 5,
    Checkpoint = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SlModel {
    inner: SplitModel,
}

/// Model hyperparameters, mirrored field for field.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SlModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub split_point: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl From<&ModelConfig> for SlModelConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            hidden_dim: c.hidden_dim,
            num_blocks: c.num_blocks,
            split_point: c.split_point,
            num_heads: c.num_heads,
            ffn_dim: c.ffn_dim,
            max_seq_len: c.max_seq_len,
            seed: c.seed,
        }
    }
}

impl From<&SlModelConfig> for ModelConfig {
    fn from(c: &SlModelConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            hidden_dim: c.hidden_dim,
            num_blocks: c.num_blocks,
            split_point: c.split_point,
            num_heads: c.num_heads,
            ffn_dim: c.ffn_dim,
            max_seq_len: c.max_seq_len,
            seed: c.seed,
        }
    }
}

/// ActInv settings. `euclidean` selects the matching distance; projection
/// uses the same distance.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SlAttackConfig {
    pub iterations: usize,
    pub lr: f64,
    pub euclidean: bool,
    pub restarts: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(SlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } | Error::SequenceTooLong { .. } | Error::DimensionCap { .. } => {
                SlStatus::ShapeMismatch
            }
            Error::NonFinite(_) | Error::Singular | Error::Asymmetric(_) | Error::Diverged(_) => SlStatus::Numeric,
            Error::Io(_) => SlStatus::Io,
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } => SlStatus::Checkpoint,
            _ => SlStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SlStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const SlModel) -> Result<&'a SplitModel, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Fail> {
    if dst.len() < src.len() {
        return Err(Fail(
            SlStatus::BufferTooSmall,
            format!("output buffer holds {} values, need {}", dst.len(), src.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

unsafe fn put_model(out: *mut *mut SlModel, model: SplitModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(SlModel { inner: model }));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Defaults used by the command-line tool.
#[no_mangle]
pub extern "C" fn sl_model_config_default() -> SlModelConfig {
    (&ModelConfig::default()).into()
}

#[no_mangle]
pub extern "C" fn sl_attack_config_default() -> SlAttackConfig {
    let d = AttackConfig::default();
    SlAttackConfig {
        iterations: d.iterations,
        lr: d.lr,
        euclidean: d.distance == Distance::Euclidean,
        restarts: d.restarts,
    }
}

/// Randomly initialized model.
///
/// # Safety
/// `config` must be null or point to a valid config; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_new(config: *const SlModelConfig, out: *mut *mut SlModel) -> SlStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        put_model(out, SplitModel::init(cfg.into())?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_load(path: *const c_char, out: *mut *mut SlModel) -> SlStatus {
    guard(|| {
        let path = string(path, "path")?;
        put_model(out, load_checkpoint(path)?)
    })
}

/// Writes a checkpoint; `f32` selects compact 32-bit storage.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sl_model_save(model: *const SlModel, path: *const c_char, f32: bool) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = string(path, "path")?;
        let precision = if f32 { Precision::F32 } else { Precision::F64 };
        Ok(save_checkpoint(m, path, precision)?)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_model_free(model: *mut SlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_config(model: *const SlModel, out: *mut SlModelConfig) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.config().into();
        Ok(())
    })
}

/// Client activations `h_Q1` of a prompt, `len * hidden_dim` values.
///
/// # Safety
/// `ids` must hold `len` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn sl_client_forward(
    model: *const SlModel,
    ids: *const usize,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = slice(ids, len, "ids")?;
        let h = m.client_forward(&m.embed(ids)?)?;
        copy_out(h.data(), slice_mut(out, out_len, "out")?)
    })
}

/// Client activations of a prompt after a defense such as
/// `"element-sparsify:0.5"` or `"pripert-l0:0.5"`.
///
/// # Safety
/// As for `sl_client_forward`; `spec` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sl_defended_forward(
    model: *const SlModel,
    spec: *const c_char,
    ids: *const usize,
    len: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let spec: DefenseSpec = string(spec, "spec")?.parse()?;
        let ids = slice(ids, len, "ids")?;
        let h0 = m.embed(ids)?;
        let h = m.client_forward(&h0)?;
        let ctx = DefenseContext::new(m, &h0);
        let hd = apply_defense(&h, &spec, Some(&ctx), &mut Rng::new(seed))?;
        copy_out(hd.data(), slice_mut(out, out_len, "out")?)
    })
}

/// ActInv on `rows` observed activation rows; writes `rows` token ids and,
/// when `distance` is non-null, the final activation distance.
///
/// # Safety
/// `h` must hold `rows * hidden_dim` values and `out_ids` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn sl_actinv(
    model: *const SlModel,
    h: *const f64,
    rows: usize,
    config: *const SlAttackConfig,
    seed: u64,
    out_ids: *mut usize,
    distance: *mut f64,
) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let d = m.config().hidden_dim;
        let h = Tensor::matrix(rows, d, slice(h, rows * d, "h")?.to_vec())?;
        let cfg = AttackConfig {
            iterations: c.iterations,
            lr: c.lr,
            distance: if c.euclidean { Distance::Euclidean } else { Distance::Cosine },
            restarts: c.restarts,
            ..AttackConfig::default()
        };
        let res = actinv(m, &h, &cfg, &mut Rng::new(seed), None)?;
        slice_mut(out_ids, rows, "out_ids")?.copy_from_slice(&res.tokens);
        if let Some(d) = distance.as_mut() {
            *d = res.distance;
        }
        Ok(())
    })
}

/// Monte Carlo PAF of a client layer such as `"block0.activation"` at the
/// operating point of one prompt.
///
/// # Safety
/// `layer` must be a NUL-terminated string; `ids` must hold `len` values;
/// `mean` and `max_paf` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_paf(
    model: *const SlModel,
    layer: *const c_char,
    ids: *const usize,
    len: usize,
    draws: usize,
    seed: u64,
    mean: *mut f64,
    max_paf: *mut f64,
) -> SlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let layer: LayerRef = string(layer, "layer")?.parse()?;
        let ids = slice(ids, len, "ids")?.to_vec();
        let cfg = PafConfig {
            draws,
            ..PafConfig::default()
        };
        let r = paf_estimate(m, layer, &[ids], &cfg, &Rng::new(seed))?;
        *mean.as_mut().ok_or_else(|| null("mean"))? = r.mean;
        *max_paf.as_mut().ok_or_else(|| null("max_paf"))? = r.max_paf;
        Ok(())
    })
}

/// ROUGE-L F1 in [0, 1].
///
/// # Safety
/// `recovered` and `truth` must hold `n` and `m` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_rouge_l(
    recovered: *const usize,
    n: usize,
    truth: *const usize,
    m: usize,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        let v = rouge_l(slice(recovered, n, "recovered")?, slice(truth, m, "truth")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Bag-of-tokens precision and recall, in percent.
///
/// # Safety
/// As for `sl_rouge_l`.
#[no_mangle]
pub unsafe extern "C" fn sl_precision_recall(
    recovered: *const usize,
    n: usize,
    truth: *const usize,
    m: usize,
    precision: *mut f64,
    recall: *mut f64,
) -> SlStatus {
    guard(|| {
        let (p, r) = precision_recall(slice(recovered, n, "recovered")?, slice(truth, m, "truth")?)?;
        *precision.as_mut().ok_or_else(|| null("precision"))? = p;
        *recall.as_mut().ok_or_else(|| null("recall"))? = r;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(sl_last_error()) }.to_string_lossy().into_owned()
    }

    fn tiny() -> *mut SlModel {
        let cfg = SlModelConfig {
            vocab_size: 12,
            hidden_dim: 8,
            num_blocks: 2,
            split_point: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 6,
            seed: 3,
        };
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { sl_model_new(&cfg, &mut m) }, SlStatus::Ok);
        m
    }

    #[test]
    fn forward_save_load_round_trip() {
        let m = tiny();
        let ids = [1usize, 4, 7];
        let mut a = vec![0.0; 24];
        let mut b = vec![0.0; 24];
        unsafe {
            assert_eq!(sl_client_forward(m, ids.as_ptr(), 3, a.as_mut_ptr(), a.len()), SlStatus::Ok);
            let dir = tempfile::tempdir().unwrap();
            let path = CString::new(dir.path().join("m.slck").to_str().unwrap()).unwrap();
            assert_eq!(sl_model_save(m, path.as_ptr(), false), SlStatus::Ok);
            let mut m2 = ptr::null_mut();
            assert_eq!(sl_model_load(path.as_ptr(), &mut m2), SlStatus::Ok);
            assert_eq!(sl_client_forward(m2, ids.as_ptr(), 3, b.as_mut_ptr(), b.len()), SlStatus::Ok);
            let mut cfg = sl_model_config_default();
            assert_eq!(sl_model_config(m2, &mut cfg), SlStatus::Ok);
            assert_eq!(cfg.vocab_size, 12);
            sl_model_free(m2);
            sl_model_free(m);
        }
        assert_eq!(a, b);
        assert!(a.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn errors_are_reported() {
        let m = tiny();
        let ids = [1usize, 99];
        let mut out = vec![0.0; 16];
        unsafe {
            assert_eq!(
                sl_client_forward(m, ids.as_ptr(), 2, out.as_mut_ptr(), out.len()),
                SlStatus::InvalidArgument
            );
            assert!(last_error().contains("out of range"));
            assert_eq!(sl_client_forward(m, ids.as_ptr(), 1, out.as_mut_ptr(), 4), SlStatus::BufferTooSmall);
            assert_eq!(
                sl_client_forward(ptr::null(), ids.as_ptr(), 1, out.as_mut_ptr(), 16),
                SlStatus::NullPointer
            );
            let bad = CString::new("nonsense:1").unwrap();
            assert_eq!(
                sl_defended_forward(m, bad.as_ptr(), ids.as_ptr(), 1, 0, out.as_mut_ptr(), 16),
                SlStatus::InvalidArgument
            );
            let missing = CString::new("/nonexistent/model.slck").unwrap();
            let mut m2 = ptr::null_mut();
            assert_eq!(sl_model_load(missing.as_ptr(), &mut m2), SlStatus::Io);
            assert!(m2.is_null());
            assert_eq!(sl_client_forward(m, ids.as_ptr(), 1, out.as_mut_ptr(), 16), SlStatus::Ok);
            assert_eq!(last_error(), "");
            sl_model_free(m);
        }
    }

    #[test]
    fn defense_attack_and_metrics() {
        let m = tiny();
        let ids = [2usize, 5, 9, 0];
        let mut h = vec![0.0; 32];
        let mut hd = vec![0.0; 32];
        let spec = CString::new("element-sparsify:0.5").unwrap();
        let mut rec = [0usize; 4];
        let mut dist = f64::NAN;
        let (mut rl, mut p, mut r) = (0.0, 0.0, 0.0);
        let cfg = SlAttackConfig {
            iterations: 300,
            ..sl_attack_config_default()
        };
        unsafe {
            assert_eq!(sl_client_forward(m, ids.as_ptr(), 4, h.as_mut_ptr(), 32), SlStatus::Ok);
            assert_eq!(
                sl_defended_forward(m, spec.as_ptr(), ids.as_ptr(), 4, 1, hd.as_mut_ptr(), 32),
                SlStatus::Ok
            );
            assert_eq!(hd.iter().filter(|v| **v == 0.0).count(), 16);
            assert_eq!(sl_actinv(m, h.as_ptr(), 4, &cfg, 7, rec.as_mut_ptr(), &mut dist), SlStatus::Ok);
            assert!(dist.is_finite() && dist >= 0.0);
            assert!(rec.iter().all(|t| *t < 12));
            assert_eq!(sl_rouge_l(rec.as_ptr(), 4, ids.as_ptr(), 4, &mut rl), SlStatus::Ok);
            assert_eq!(sl_precision_recall(rec.as_ptr(), 4, ids.as_ptr(), 4, &mut p, &mut r), SlStatus::Ok);
            assert!((0.0..=1.0).contains(&rl) && (0.0..=100.0).contains(&p));
            let (a, b) = ([0usize, 2, 1, 4], [0usize, 1, 2, 3]);
            sl_rouge_l(a.as_ptr(), 4, b.as_ptr(), 4, &mut rl);
            assert_eq!(rl, 0.5);
            assert_eq!(sl_rouge_l(a.as_ptr(), 0, b.as_ptr(), 4, &mut rl), SlStatus::InvalidArgument);
            sl_model_free(m);
        }
    }

    #[test]
    fn paf_through_the_abi() {
        let m = tiny();
        let ids = [3usize, 1, 4];
        let layer = CString::new("block0.activation").unwrap();
        let (mut mean, mut max) = (0.0, 0.0);
        unsafe {
            assert_eq!(sl_paf(m, layer.as_ptr(), ids.as_ptr(), 3, 16, 5, &mut mean, &mut max), SlStatus::Ok);
            let bad = CString::new("block9.activation").unwrap();
            assert_ne!(sl_paf(m, bad.as_ptr(), ids.as_ptr(), 3, 16, 5, &mut mean, &mut max), SlStatus::Ok);
            sl_model_free(m);
        }
        assert!(mean > 0.0 && max >= mean);
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(sl_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
