//! C ABI over the `softsense` library.
//!
//! Objects are opaque handles created by `ss_*_load`, `ss_*_simulate` or
//! `ss_model_train` and released with the matching `ss_*_free`. Every fallible
//! call returns an [`SsStatus`]; on failure [`ss_last_error`] describes what
//! went wrong on the calling thread. Handles may be shared between threads
//! for reading; none of the functions mutate a handle.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use softsense::config::SimConfig;
use softsense::dataset::{generate_commands, run_episode, Dataset, Scenario, N_JOINTS};
use softsense::models::{ArchSpec, FusionModel, ModelError, ObservationBundle, TrainConfig, Variant};
use softsense::render::{frame_diff, FRAME_LEN};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// A file was read but is not a valid dataset or model.
    Corrupt = 4,
    Model = 5,
    Simulation = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsScenario {
    Empty = 0,
    Cluttered = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsVariant {
    /// Proprioception only.
    P1 = 1,
    /// Proprioception and vision.
    P2 = 2,
}

/// Number of finger joints and links.
pub const SS_JOINTS: usize = 20;
/// Bytes in one 64x64 RGB frame.
pub const SS_FRAME_BYTES: usize = 12288;

const _: () = assert!(SS_JOINTS == N_JOINTS && SS_FRAME_BYTES == FRAME_LEN);

/// One recorded sample, in raw units.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsSample {
    pub index: u32,
    pub action: [f32; 3],
    pub arm_q: [f32; 3],
    pub finger_q: [f32; SS_JOINTS],
    pub forces: [f32; SS_JOINTS],
}

/// Mean-mode prediction of the next finger angles and link forces.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsPrediction {
    pub finger_q: [f32; SS_JOINTS],
    pub forces: [f32; SS_JOINTS],
}

/// Opaque dataset handle.
pub struct SsDataset(Dataset);

/// Opaque model handle.
pub struct SsModel(FusionModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SsStatus, String);

type Res<T> = Result<T, Failure>;

fn fail<T>(status: SsStatus, msg: impl Into<String>) -> Res<T> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure for [`ss_last_error`] and turns panics
/// into [`SsStatus::Panic`].
fn guard(f: impl FnOnce() -> Res<()>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            SsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    // SAFETY: the caller passes a pointer obtained from this library or null.
    match unsafe { p.as_ref() } {
        Some(r) => Ok(r),
        None => fail(SsStatus::NullPointer, format!("{what} is null")),
    }
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    // SAFETY: non-null output pointers must be valid for writes.
    match unsafe { p.as_mut() } {
        Some(r) => Ok(r),
        None => fail(SsStatus::NullPointer, format!("{what} is null")),
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Res<PathBuf> {
    if p.is_null() {
        return fail(SsStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: non-null strings must be NUL-terminated.
    let s = unsafe { CStr::from_ptr(p) };
    match s.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(SsStatus::InvalidArgument, format!("{what} is not UTF-8")),
    }
}

fn scenario(code: u32) -> Res<Scenario> {
    match code {
        c if c == SsScenario::Empty as u32 => Ok(Scenario::Empty),
        c if c == SsScenario::Cluttered as u32 => Ok(Scenario::Cluttered),
        c => fail(SsStatus::InvalidArgument, format!("unknown scenario code {c}")),
    }
}

fn variant(code: u32) -> Res<Variant> {
    match code {
        c if c == SsVariant::P1 as u32 => Ok(Variant::P1),
        c if c == SsVariant::P2 as u32 => Ok(Variant::P2),
        c => fail(SsStatus::InvalidArgument, format!("unknown architecture code {c}")),
    }
}

fn model_failure(e: ModelError) -> Failure {
    let status = match e {
        ModelError::InvalidLatent { .. } | ModelError::InvalidArch(_) | ModelError::InvalidConfig(_) => {
            SsStatus::InvalidArgument
        }
        _ => SsStatus::Model,
    };
    Failure(status, e.to_string())
}

fn load_failure(e: impl std::fmt::Display, path: &std::path::Path, io: bool) -> Failure {
    let status = if io { SsStatus::Io } else { SsStatus::Corrupt };
    Failure(status, format!("{}: {e}", path.display()))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn sample_index(ds: &Dataset, index: usize) -> Res<()> {
    if index < ds.len() {
        Ok(())
    } else {
        fail(
            SsStatus::InvalidArgument,
            format!("index {index} is out of range for {} samples", ds.len()),
        )
    }
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Runs `commands` random arm commands (ten samples each) and records a
/// dataset. `scenario_code` is an [`SsScenario`] value; `config_path` may be
/// null for the built-in configuration.
///
/// # Safety
/// `config_path` is null or a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_simulate(
    scenario_code: u32,
    commands: usize,
    seed: u64,
    vision: bool,
    config_path: *const c_char,
    out: *mut *mut SsDataset,
) -> SsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let cfg = if config_path.is_null() {
            SimConfig::default()
        } else {
            let p = unsafe { path_arg(config_path, "config_path") }?;
            SimConfig::load(&p).map_err(|e| Failure(SsStatus::Io, format!("{}: {e}", p.display())))?
        };
        let ds = run_episode(scenario(scenario_code)?, &generate_commands(commands, seed), &cfg, seed, vision)
            .map_err(|e| Failure(SsStatus::Simulation, e.to_string()))?;
        *out = boxed(SsDataset(ds));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_load(path: *const c_char, out: *mut *mut SsDataset) -> SsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let p = unsafe { path_arg(path, "path") }?;
        let bytes = std::fs::read(&p).map_err(|e| load_failure(e, &p, true))?;
        let ds = Dataset::from_bytes(&bytes).map_err(|e| load_failure(e, &p, false))?;
        *out = boxed(SsDataset(ds));
        Ok(())
    })
}

/// Writes the dataset to `path`, which must not exist yet.
///
/// # Safety
/// `ds` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_save(ds: *const SsDataset, path: *const c_char) -> SsStatus {
    guard(|| {
        let ds = unsafe { deref(ds, "ds") }?;
        let p = unsafe { path_arg(path, "path") }?;
        softsense::cli::write_once(&p, &ds.0.to_bytes()).map_err(|e| load_failure(e, &p, true))
    })
}

/// # Safety
/// `ds` is null or comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_free(ds: *mut SsDataset) {
    if !ds.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` is null or comes from this library.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_len(ds: *const SsDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` is null or comes from this library.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_has_vision(ds: *const SsDataset) -> bool {
    unsafe { ds.as_ref() }.is_some_and(|d| d.0.has_vision)
}

/// # Safety
/// `ds` comes from this library; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_sample(ds: *const SsDataset, index: usize, out: *mut SsSample) -> SsStatus {
    guard(|| {
        let ds = unsafe { deref(ds, "ds") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        sample_index(&ds.0, index)?;
        let s = &ds.0.samples[index];
        *out = SsSample {
            index: s.index,
            action: s.action,
            arm_q: s.arm_q,
            finger_q: s.finger_q,
            forces: s.forces,
        };
        Ok(())
    })
}

/// Copies the RGB frame of sample `index` (row-major, [`SS_FRAME_BYTES`]
/// bytes) into `buf`.
///
/// # Safety
/// `ds` comes from this library; `buf` is valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_frame(ds: *const SsDataset, index: usize, buf: *mut u8, len: usize) -> SsStatus {
    guard(|| {
        let ds = unsafe { deref(ds, "ds") }?;
        if buf.is_null() {
            return fail(SsStatus::NullPointer, "buf is null");
        }
        if len < FRAME_LEN {
            return fail(SsStatus::BufferTooSmall, format!("need {FRAME_LEN} bytes, got {len}"));
        }
        sample_index(&ds.0, index)?;
        let Some(frame) = ds.0.samples[index].frame.as_deref() else {
            return fail(SsStatus::InvalidArgument, "dataset was recorded without vision");
        };
        // SAFETY: checked non-null and at least FRAME_LEN long above.
        unsafe { std::ptr::copy_nonoverlapping(frame.as_ptr(), buf, FRAME_LEN) };
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let p = unsafe { path_arg(path, "path") }?;
        let bytes = std::fs::read(&p).map_err(|e| load_failure(e, &p, true))?;
        let file = softsense::nn::ModelFile::from_bytes(&bytes).map_err(|e| load_failure(e, &p, false))?;
        let m = FusionModel::from_model_file(file).map_err(|e| load_failure(e, &p, false))?;
        *out = boxed(SsModel(m));
        Ok(())
    })
}

/// Builds and trains a model on `ds`. `arch` is an [`SsVariant`] value. Zero `epochs`, `batch_size` or a
/// non-positive `learning_rate` select the desk defaults (50, 256, 1e-3).
///
/// # Safety
/// `ds` comes from this library; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_model_train(
    ds: *const SsDataset,
    arch: u32,
    latent: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    out: *mut *mut SsModel,
) -> SsStatus {
    guard(|| {
        let ds = unsafe { deref(ds, "ds") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let spec = ArchSpec::new(variant(arch)?, latent, false).map_err(model_failure)?;
        let mut cfg = TrainConfig::desk(seed);
        if epochs > 0 {
            cfg.max_epochs = epochs;
        }
        if batch_size > 0 {
            cfg.batch_size = batch_size;
        }
        if learning_rate > 0.0 {
            cfg.learning_rate = learning_rate;
        }
        let mut m = FusionModel::build(spec, ds.0.stats.clone(), seed).map_err(model_failure)?;
        m.train(&ds.0, &cfg).map_err(model_failure)?;
        *out = boxed(SsModel(m));
        Ok(())
    })
}

/// Writes the model to `path`, which must not exist yet.
///
/// # Safety
/// `model` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ss_model_save(model: *const SsModel, path: *const c_char) -> SsStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        let p = unsafe { path_arg(path, "path") }?;
        softsense::cli::write_once(&p, &m.0.to_model_file().to_bytes()).map_err(|e| load_failure(e, &p, true))
    })
}

/// # Safety
/// `model` is null or comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Latent size, or 0 for a null handle.
///
/// # Safety
/// `model` is null or comes from this library.
#[no_mangle]
pub unsafe extern "C" fn ss_model_latent(model: *const SsModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.arch.latent)
}

/// # Safety
/// `model` comes from this library; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_model_variant(model: *const SsModel, out: *mut SsVariant) -> SsStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        *unsafe { out_ptr(out, "out") }? = match m.0.arch.variant {
            Variant::P1 => SsVariant::P1,
            Variant::P2 => SsVariant::P2,
        };
        Ok(())
    })
}

fn transition(m: &SsModel, ds: &SsDataset, index: usize) -> Res<softsense::models::Prediction> {
    let ds = &ds.0;
    if index + 1 >= ds.len() {
        return fail(
            SsStatus::InvalidArgument,
            format!("transition {index} needs sample {} of {}", index + 1, ds.len()),
        );
    }
    let Some(obs) = ObservationBundle::from_sample(&ds.samples[index], m.0.arch.variant) else {
        return fail(SsStatus::InvalidArgument, "the model needs frames but the dataset has none");
    };
    m.0.predict(&obs, &ds.samples[index + 1].command(), None).map_err(model_failure)
}

/// Predicts sample `index + 1` from sample `index` and the action that
/// followed it, without sampling the latent.
///
/// # Safety
/// `model` and `ds` come from this library; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_model_predict(
    model: *const SsModel,
    ds: *const SsDataset,
    index: usize,
    out: *mut SsPrediction,
) -> SsStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        let ds = unsafe { deref(ds, "ds") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let p = transition(m, ds, index)?;
        *out = SsPrediction {
            finger_q: p.finger_q,
            forces: p.forces,
        };
        Ok(())
    })
}

/// Predicted flow of transition `index` as RGB bytes (zero flow is 128).
/// With a null `model` the reference frame difference is written instead.
///
/// # Safety
/// `model` is null or comes from this library; `ds` comes from this library;
/// `buf` is valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn ss_flow(
    model: *const SsModel,
    ds: *const SsDataset,
    index: usize,
    buf: *mut u8,
    len: usize,
) -> SsStatus {
    guard(|| {
        let data = unsafe { deref(ds, "ds") }?;
        if buf.is_null() {
            return fail(SsStatus::NullPointer, "buf is null");
        }
        if len < FRAME_LEN {
            return fail(SsStatus::BufferTooSmall, format!("need {FRAME_LEN} bytes, got {len}"));
        }
        let bytes = match unsafe { model.as_ref() } {
            Some(m) => match transition(m, data, index)?.flow {
                Some(f) => f.to_bytes(),
                None => return fail(SsStatus::InvalidArgument, "model does not predict flow"),
            },
            None => {
                let d = &data.0;
                if index + 1 >= d.len() {
                    return fail(SsStatus::InvalidArgument, format!("transition {index} is out of range"));
                }
                match (d.samples[index].frame(), d.samples[index + 1].frame()) {
                    (Some(a), Some(b)) => frame_diff(&a, &b).to_bytes(),
                    _ => return fail(SsStatus::InvalidArgument, "dataset was recorded without vision"),
                }
            }
        };
        // SAFETY: checked non-null and at least FRAME_LEN long above.
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf, FRAME_LEN) };
        Ok(())
    })
}
