//! C ABI over the `sgwsod` library.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns an [`SgwsodStatus`]; on failure the
//! message is available from [`sgwsod_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sgwsod::eval::{evaluate, ApMode, EvalConfig};
use sgwsod::io::{generate_synthetic, load_dataset, save_dataset, Dataset, SynthConfig};
use sgwsod::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use sgwsod::trainer::{train, TrainConfig};
use sgwsod::types::BBox;
use sgwsod::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgwsodStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Validation = 4,
    Numerical = 5,
    Panic = 6,
}

/// Opaque dataset handle.
pub struct SgwsodDataset(Dataset);

/// Opaque model handle.
pub struct SgwsodModel(ModelParams);

/// Training settings mirrored from the library defaults by [`sgwsod_train_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SgwsodTrainConfig {
    pub epochs: u32,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub phase_boundary: u32,
    pub momentum: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub sigma: f64,
    pub seed: u64,
    pub disable_seed_losses: bool,
    pub disable_saliency_subnet: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SgwsodEvalSummary {
    /// Means over classes with defined values; NaN when none is defined.
    pub mean_ap: f64,
    pub mean_corloc: f64,
    pub mean_classification_ap: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> SgwsodStatus {
    match e {
        Error::Io { .. } if !e.is_validation() => SgwsodStatus::Io,
        Error::NonFinite(_) | Error::Diverged { .. } => SgwsodStatus::Numerical,
        Error::Shape(_) => SgwsodStatus::InvalidArgument,
        _ => SgwsodStatus::Validation,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgwsodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgwsodStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed as {name}"));
            SgwsodStatus::NullArgument
        }
        Ok(Err(Failure::Invalid(m))) => {
            set_error(m);
            SgwsodStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SgwsodStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

fn write_out<T>(out: *mut T, value: T, name: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(name));
    }
    unsafe { out.write(value) };
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn sgwsod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_dataset_load(
    path: *const c_char,
    out: *mut *mut SgwsodDataset,
) -> SgwsodStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let ds = load_dataset(path)?;
        write_out(out, Box::into_raw(Box::new(SgwsodDataset(ds))), "out")
    })
}

/// Default synthetic generator settings with the given size and seed. At most
/// `num_classes` objects are planted per image.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_dataset_generate(
    num_images: u32,
    num_classes: u32,
    feature_dim: u32,
    seed: u64,
    out: *mut *mut SgwsodDataset,
) -> SgwsodStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let defaults = SynthConfig::default();
        let ds = generate_synthetic(&SynthConfig {
            max_objects: defaults.max_objects.min(num_classes.max(1)),
            num_images: num_images as usize,
            num_classes: num_classes as usize,
            feature_dim: feature_dim as usize,
            seed,
            ..defaults
        })?;
        write_out(out, Box::into_raw(Box::new(SgwsodDataset(ds))), "out")
    })
}

/// # Safety
/// `dataset` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_dataset_save(
    dataset: *const SgwsodDataset,
    dir: *const c_char,
) -> SgwsodStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        let dir = path_arg(dir, "dir")?;
        save_dataset(&ds.0, dir)?;
        Ok(())
    })
}

/// Number of images, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_dataset_len(dataset: *const SgwsodDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be NULL or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_dataset_free(dataset: *mut SgwsodDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

#[no_mangle]
pub extern "C" fn sgwsod_train_config_default() -> SgwsodTrainConfig {
    let t = TrainConfig::default();
    SgwsodTrainConfig {
        epochs: t.epochs as u32,
        lr_phase1: t.lr_phase1,
        lr_phase2: t.lr_phase2,
        phase_boundary: t.phase_boundary as u32,
        momentum: t.momentum,
        lambda1: t.lambda1,
        lambda2: t.lambda2,
        lambda3: t.lambda3,
        sigma: t.sigma,
        seed: 0,
        disable_seed_losses: false,
        disable_saliency_subnet: false,
    }
}

/// Fresh model with the default layer widths sized for `dataset`.
///
/// # Safety
/// `dataset` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_model_init(
    dataset: *const SgwsodDataset,
    seed: u64,
    out: *mut *mut SgwsodModel,
) -> SgwsodStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg = ModelConfig::new(ds.0.feature_dim(), ds.0.num_classes());
        let params = init_params(&cfg, seed)?;
        write_out(out, Box::into_raw(Box::new(SgwsodModel(params))), "out")
    })
}

/// Trains a new model on `dataset`. Layer widths: `trunk_widths[0..num_trunk]`
/// and `saliency_hidden`; a NULL `trunk_widths` selects the defaults.
///
/// # Safety
/// Pointers must be valid; `trunk_widths` must hold `num_trunk` entries when non-NULL.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_train(
    dataset: *const SgwsodDataset,
    config: *const SgwsodTrainConfig,
    trunk_widths: *const u32,
    num_trunk: usize,
    saliency_hidden: u32,
    out: *mut *mut SgwsodModel,
) -> SgwsodStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        let c = deref(config, "config")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let mut mc = ModelConfig::new(ds.0.feature_dim(), ds.0.num_classes());
        if !trunk_widths.is_null() {
            mc.trunk_widths = std::slice::from_raw_parts(trunk_widths, num_trunk)
                .iter()
                .map(|&w| w as usize)
                .collect();
            mc.saliency_hidden = saliency_hidden as usize;
        }
        let tc = TrainConfig {
            epochs: c.epochs as usize,
            lr_phase1: c.lr_phase1,
            lr_phase2: c.lr_phase2,
            phase_boundary: c.phase_boundary as usize,
            momentum: c.momentum,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            lambda3: c.lambda3,
            sigma: c.sigma,
            shuffle_seed: c.seed,
            init_seed: c.seed,
            disable_seed_losses: c.disable_seed_losses,
            disable_saliency_subnet: c.disable_saliency_subnet,
            feature_jitter: 0.0,
        };
        let (params, _) = train(&ds.0, &mc, &tc).map_err(|e| Failure::Lib(e.source))?;
        write_out(out, Box::into_raw(Box::new(SgwsodModel(params))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_model_load(
    path: *const c_char,
    out: *mut *mut SgwsodModel,
) -> SgwsodStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let params = load_checkpoint(path)?;
        write_out(out, Box::into_raw(Box::new(SgwsodModel(params))), "out")
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_model_save(
    model: *const SgwsodModel,
    path: *const c_char,
) -> SgwsodStatus {
    guard(|| {
        let m = deref(model, "model")?;
        save_checkpoint(&m.0, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_model_free(model: *mut SgwsodModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model scores, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_model_num_classes(model: *const SgwsodModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.num_classes)
}

/// Scores `num_proposals` feature rows (row-major, `feature_dim` columns).
/// Writes Φ row-major as classes × proposals into `phi` and τ into `tau`;
/// either output may be NULL.
///
/// # Safety
/// `features` must hold `num_proposals * feature_dim` values; `phi` must hold
/// `num_classes * num_proposals` and `tau` `num_classes` values when non-NULL.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_forward(
    model: *const SgwsodModel,
    features: *const f64,
    num_proposals: usize,
    feature_dim: usize,
    phi: *mut f64,
    tau: *mut f64,
) -> SgwsodStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if features.is_null() {
            return Err(Failure::Null("features"));
        }
        if feature_dim != m.0.config.feature_dim {
            return Err(Failure::Invalid(format!(
                "feature_dim {feature_dim} does not match the model's {}",
                m.0.config.feature_dim
            )));
        }
        let data = std::slice::from_raw_parts(features, num_proposals * feature_dim).to_vec();
        let x = ndarray::Array2::from_shape_vec((num_proposals, feature_dim), data)
            .map_err(|e| Failure::Invalid(e.to_string()))?;
        let trace = m.0.forward(&x)?;
        if !phi.is_null() {
            let out = std::slice::from_raw_parts_mut(phi, trace.phi.len());
            for (o, v) in out.iter_mut().zip(trace.phi.iter()) {
                *o = *v;
            }
        }
        if !tau.is_null() {
            std::slice::from_raw_parts_mut(tau, trace.tau.len())
                .copy_from_slice(trace.tau.as_slice().expect("contiguous"));
        }
        Ok(())
    })
}

/// Seed proposal index per class for image `index` of `dataset`: entry `c`
/// of `seeds` receives the seed of class `c`, or -1 for absent classes.
///
/// # Safety
/// `seeds` must hold as many entries as the dataset has classes.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_select_seeds(
    dataset: *const SgwsodDataset,
    index: usize,
    sigma: f64,
    seeds: *mut i64,
) -> SgwsodStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        if seeds.is_null() {
            return Err(Failure::Null("seeds"));
        }
        let record = ds.0.records.get(index).ok_or_else(|| {
            Failure::Invalid(format!(
                "image index {index} out of range (len {})",
                ds.0.len()
            ))
        })?;
        let assignment = sgwsod::seeds::assign(record, sigma)?;
        let out = std::slice::from_raw_parts_mut(seeds, ds.0.num_classes());
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = assignment.seed_for(c).map_or(-1, |i| i as i64);
        }
        Ok(())
    })
}

/// Detection AP and classification AP on `test`, CorLoc on `corloc_set`
/// (or `test` when NULL).
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgwsod_evaluate(
    model: *const SgwsodModel,
    test: *const SgwsodDataset,
    corloc_set: *const SgwsodDataset,
    iou_threshold: f64,
    nms_threshold: f64,
    eleven_point: bool,
    out: *mut SgwsodEvalSummary,
) -> SgwsodStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let t = deref(test, "test")?;
        let loc = corloc_set.as_ref().map(|d| &d.0);
        let cfg = EvalConfig {
            iou_threshold,
            nms_threshold,
            ap_mode: if eleven_point {
                ApMode::ElevenPoint
            } else {
                ApMode::Continuous
            },
        };
        let r = evaluate(&m.0, &t.0, loc, &cfg)?;
        write_out(
            out,
            SgwsodEvalSummary {
                mean_ap: r.mean_ap.unwrap_or(f64::NAN),
                mean_corloc: r.mean_corloc.unwrap_or(f64::NAN),
                mean_classification_ap: r.mean_classification_ap.unwrap_or(f64::NAN),
            },
            "out",
        )
    })
}

/// IoU of two half-open boxes `{x0, y0, x1, y1}`; -1 if either is degenerate.
#[no_mangle]
pub extern "C" fn sgwsod_iou(a: SgwsodBox, b: SgwsodBox) -> f64 {
    match (a.to_bbox(), b.to_bbox()) {
        (Some(a), Some(b)) => sgwsod::types::iou(&a, &b),
        _ => -1.0,
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SgwsodBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl SgwsodBox {
    fn to_bbox(self) -> Option<BBox> {
        BBox::new(self.x0, self.y0, self.x1, self.y1).ok()
    }
}
