//! C ABI over the shrinklab library.
//!
//! Every function returns a [`ShrinklabStatus`]. On failure a message is kept
//! per thread and can be read with [`shrinklab_last_error_message`]. Objects are
//! passed as opaque handles that the caller releases with the matching `_free`.
//! Matrices are dense row-major `double` buffers.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the stated number of elements.
//! Handles must come from this library and must not be used after `_free`.
//! Null pointers are reported as `NULL_POINTER` rather than dereferenced.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use shrinklab::config::TrainConfig;
use shrinklab::diagnostics::{diagnose, frechet_gaussian_distance, mode_entropy, DiagnosisInput};
use shrinklab::init::{kmeans, KMeansConfig};
use shrinklab::quantizer::{mean_pairwise_distance, perplexity, Codebook};
use shrinklab::synth::{generate, GaussianMixtureSpec, LabeledDataset};
use shrinklab::trainer::{run_regime, VqModel};
use shrinklab::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinklabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    TrainingFault = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Standardized mixture sample with its component means.
pub struct ShrinklabDataset {
    data: LabeledDataset,
    means: Matrix,
}

pub struct ShrinklabCodebook {
    inner: Codebook,
}

/// Trained VQ model together with the config and data it was trained on.
pub struct ShrinklabModel {
    config: TrainConfig,
    dataset: LabeledDataset,
    means: Matrix,
    model: VqModel,
}

struct Failure(ShrinklabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => ShrinklabStatus::Config,
            Error::TrainingFault { .. } => ShrinklabStatus::TrainingFault,
            Error::NonFinite(_) | Error::InvalidSimplex(_) => ShrinklabStatus::Numeric,
            _ => ShrinklabStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> ShrinklabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ShrinklabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            ShrinklabStatus::Internal
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(ShrinklabStatus::NullPointer, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ShrinklabStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, name: &str) -> FfiResult<Matrix> {
    let len = rows.checked_mul(cols).ok_or_else(|| invalid(format!("`{name}` is too large")))?;
    Ok(Matrix::from_vec(rows, cols, slice(p, len, name)?.to_vec())?)
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(name))
}

fn copy_into(src: &[f64], dst: *mut f64, len: usize) -> FfiResult<()> {
    if len < src.len() {
        return Err(Failure(
            ShrinklabStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", src.len()),
        ));
    }
    unsafe { slice_mut(dst, src.len(), "out")? }.copy_from_slice(src);
    Ok(())
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn shrinklab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Samples a standardized Gaussian mixture with means on the diagonal.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_dataset_generate(
    num_components: usize,
    points_per_component: usize,
    dim: usize,
    separation: f64,
    std: f64,
    seed: u64,
    out_dataset: *mut *mut ShrinklabDataset,
) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let spec = GaussianMixtureSpec::with_default_means(num_components, points_per_component, dim, separation, std, seed)?;
        let data = generate(&spec)?;
        let means = data.standardized_means(&spec);
        *slot = Box::into_raw(Box::new(ShrinklabDataset { data, means }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shrinklab_dataset_shape(
    dataset: *const ShrinklabDataset,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> ShrinklabStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        *out(out_rows, "out_rows")? = ds.data.points.rows();
        *out(out_cols, "out_cols")? = ds.data.points.cols();
        Ok(())
    })
}

/// Copies the points (rows × cols) into `out_points`.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_dataset_points(
    dataset: *const ShrinklabDataset,
    out_points: *mut f64,
    len: usize,
) -> ShrinklabStatus {
    guard(|| copy_into(handle(dataset, "dataset")?.data.points.as_slice(), out_points, len))
}

/// Copies the component label of every point into `out_labels`.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_dataset_labels(
    dataset: *const ShrinklabDataset,
    out_labels: *mut usize,
    len: usize,
) -> ShrinklabStatus {
    guard(|| {
        let labels = &handle(dataset, "dataset")?.data.labels;
        if len < labels.len() {
            return Err(Failure(
                ShrinklabStatus::BufferTooSmall,
                format!("buffer holds {len} labels, need {}", labels.len()),
            ));
        }
        slice_mut(out_labels, labels.len(), "out_labels")?.copy_from_slice(labels);
        Ok(())
    })
}

/// Copies the standardized component means (components × cols) into `out_means`.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_dataset_means(
    dataset: *const ShrinklabDataset,
    out_means: *mut f64,
    len: usize,
) -> ShrinklabStatus {
    guard(|| copy_into(handle(dataset, "dataset")?.means.as_slice(), out_means, len))
}

#[no_mangle]
pub unsafe extern "C" fn shrinklab_dataset_free(dataset: *mut ShrinklabDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Codebook from explicit tokens.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_codebook_new(
    tokens: *const f64,
    size: usize,
    dim: usize,
    decay: f64,
    beta: f64,
    out_codebook: *mut *mut ShrinklabCodebook,
) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_codebook, "out_codebook")?;
        let inner = Codebook::new(matrix(tokens, size, dim, "tokens")?, decay, beta)?;
        *slot = Box::into_raw(Box::new(ShrinklabCodebook { inner }));
        Ok(())
    })
}

/// Codebook of `size` k-means centers of `points`, with k-means++ seeding and
/// the lowest-objective of `restarts` runs.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_codebook_kmeans(
    points: *const f64,
    rows: usize,
    dim: usize,
    size: usize,
    restarts: usize,
    seed: u64,
    out_codebook: *mut *mut ShrinklabCodebook,
) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_codebook, "out_codebook")?;
        if restarts == 0 {
            return Err(invalid("restarts must be >= 1"));
        }
        let pts = matrix(points, rows, dim, "points")?;
        let cfg = KMeansConfig {
            restarts,
            seed,
            ..KMeansConfig::default()
        };
        let centers = kmeans(&pts, size, &cfg)?.centers;
        let inner = Codebook::new(centers, 0.9, 0.25)?;
        *slot = Box::into_raw(Box::new(ShrinklabCodebook { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shrinklab_codebook_shape(
    codebook: *const ShrinklabCodebook,
    out_size: *mut usize,
    out_dim: *mut usize,
) -> ShrinklabStatus {
    guard(|| {
        let cb = &handle(codebook, "codebook")?.inner;
        *out(out_size, "out_size")? = cb.size();
        *out(out_dim, "out_dim")? = cb.dim();
        Ok(())
    })
}

/// Copies the tokens (size × dim) into `out_tokens`.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_codebook_tokens(
    codebook: *const ShrinklabCodebook,
    out_tokens: *mut f64,
    len: usize,
) -> ShrinklabStatus {
    guard(|| copy_into(handle(codebook, "codebook")?.inner.tokens.as_slice(), out_tokens, len))
}

/// Nearest token of every row of `z`; ties go to the lowest index.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_codebook_assign(
    codebook: *const ShrinklabCodebook,
    z: *const f64,
    rows: usize,
    dim: usize,
    out_indices: *mut usize,
) -> ShrinklabStatus {
    guard(|| {
        let cb = &handle(codebook, "codebook")?.inner;
        let idx = cb.assign(&matrix(z, rows, dim, "z")?)?;
        slice_mut(out_indices, rows, "out_indices")?.copy_from_slice(&idx);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shrinklab_codebook_free(codebook: *mut ShrinklabCodebook) {
    if !codebook.is_null() {
        drop(Box::from_raw(codebook));
    }
}

/// exp of the entropy of the normalized usage counts.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_perplexity(counts: *const u64, len: usize, out_value: *mut f64) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        *slot = perplexity(slice(counts, len, "counts")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shrinklab_mean_pairwise_distance(
    tokens: *const f64,
    size: usize,
    dim: usize,
    out_value: *mut f64,
) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        *slot = mean_pairwise_distance(&matrix(tokens, size, dim, "tokens")?)?;
        Ok(())
    })
}

/// Fréchet distance between Gaussians fitted to two point sets of equal width.
/// `out_degenerate` reports a near-singular covariance product.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_frechet_distance(
    a: *const f64,
    a_rows: usize,
    b: *const f64,
    b_rows: usize,
    dim: usize,
    out_distance: *mut f64,
    out_degenerate: *mut bool,
) -> ShrinklabStatus {
    guard(|| {
        let dist = out(out_distance, "out_distance")?;
        let flag = out(out_degenerate, "out_degenerate")?;
        let r = frechet_gaussian_distance(&matrix(a, a_rows, dim, "a")?, &matrix(b, b_rows, dim, "b")?)?;
        *dist = r.distance;
        *flag = r.degenerate;
        Ok(())
    })
}

/// Shannon entropy (nats) of a probability vector.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_mode_entropy(p: *const f64, len: usize, out_value: *mut f64) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        *slot = mode_entropy(slice(p, len, "p")?)?;
        Ok(())
    })
}

/// Trains a VQ regime (`baseline_vq` or `deferred_vq`) from a TOML config.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_model_train(
    config_toml: *const c_char,
    out_model: *mut *mut ShrinklabModel,
) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        if config_toml.is_null() {
            return Err(null("config_toml"));
        }
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|_| invalid("config is not UTF-8"))?;
        let config = TrainConfig::from_toml_str(text)?;
        let spec = config.mixture_spec()?;
        let dataset = generate(&spec)?;
        let means = dataset.standardized_means(&spec);
        let mut model = run_regime(&config, &dataset)?
            .model
            .ok_or_else(|| Failure(ShrinklabStatus::Config, "train.regime: ae_pretrain has no codebook".into()))?;
        model.record_usage(&dataset.points, config.train.batch_size)?;
        *slot = Box::into_raw(Box::new(ShrinklabModel {
            config,
            dataset,
            means,
            model,
        }));
        Ok(())
    })
}

/// Copy of the trained codebook as a new handle.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_model_codebook(
    model: *const ShrinklabModel,
    out_codebook: *mut *mut ShrinklabCodebook,
) -> ShrinklabStatus {
    guard(|| {
        let slot = out(out_codebook, "out_codebook")?;
        let inner = handle(model, "model")?.model.codebook.clone();
        *slot = Box::into_raw(Box::new(ShrinklabCodebook { inner }));
        Ok(())
    })
}

/// Writes the diagnostics report as NUL-terminated JSON. `out_len` receives the
/// byte length without the terminator; with a short buffer the call fails with
/// `BUFFER_TOO_SMALL` and still sets `out_len`.
#[no_mangle]
pub unsafe extern "C" fn shrinklab_model_diagnose_json(
    model: *const ShrinklabModel,
    buffer: *mut c_char,
    capacity: usize,
    out_len: *mut usize,
) -> ShrinklabStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let len_slot = out(out_len, "out_len")?;
        let report = diagnose(&DiagnosisInput {
            tokens: &m.model.codebook.tokens,
            usage: Some(&m.model.codebook.usage_counts),
            model: Some(&m.model.params),
            means: Some(&m.means),
            data: Some(&m.dataset.points),
            embeddings: None,
            settings: &m.config.diagnostics,
            seed: m.config.seed,
        })?;
        let json = report.to_json();
        *len_slot = json.len();
        if capacity <= json.len() {
            return Err(Failure(
                ShrinklabStatus::BufferTooSmall,
                format!("report needs {} bytes, buffer has {capacity}", json.len() + 1),
            ));
        }
        let dst = slice_mut(buffer.cast::<u8>(), json.len() + 1, "buffer")?;
        dst[..json.len()].copy_from_slice(json.as_bytes());
        dst[json.len()] = 0;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shrinklab_model_free(model: *mut ShrinklabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
