//! C ABI over the `smallaug` crate.
//!
//! Every fallible function returns a [`SmallaugStatus`]; on failure the
//! message is available from [`smallaug_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.
//! Panics are caught at the boundary and reported as `SMALLAUG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use smallaug::augment::{self, parse_policy_file, AugmentStats, Operation, PlacementConfig, Policy, PolicySet};
use smallaug::data::{self, load_manifest, AnnotatedImage, BBox, Dataset, Instance, Origin, SizeClass};
use smallaug::metrics::{self, EvalConfig, Interpolation};
use smallaug::seed::{self, Rng};
use smallaug::tpe::{self, ParamSpace, Tpe, TpeConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallaugStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    OutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallaugBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<SmallaugBox> for BBox {
    fn from(b: SmallaugBox) -> Self {
        BBox::new(b.x, b.y, b.w, b.h)
    }
}

impl From<BBox> for SmallaugBox {
    fn from(b: BBox) -> Self {
        SmallaugBox { x: b.x, y: b.y, w: b.w, h: b.h }
    }
}

/// `op`: 0 single object, 1 multiple objects, 2 all objects.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallaugPolicy {
    pub op: u32,
    pub p: f64,
    pub m: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SmallaugAugmentStats {
    pub applied: bool,
    pub selected: u64,
    pub pasted: u64,
    pub skipped: u64,
}

impl From<AugmentStats> for SmallaugAugmentStats {
    fn from(s: AugmentStats) -> Self {
        SmallaugAugmentStats {
            applied: s.applied,
            selected: s.selected as u64,
            pasted: s.pasted as u64,
            skipped: s.skipped as u64,
        }
    }
}

/// AP values; NaN where a bucket has no ground truth.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallaugEvalSummary {
    pub map: f64,
    pub map_s: f64,
    pub map_m: f64,
    pub map_l: f64,
    pub n_small: u64,
    pub n_medium: u64,
    pub n_large: u64,
}

/// One instance as seen from C. `category` stays valid until the owning
/// image is modified or freed. `origin` is 0 for original, 1 for pasted.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SmallaugInstance {
    pub bbox: SmallaugBox,
    pub category: *const c_char,
    pub difficult: bool,
    pub origin: u32,
}

/// An RGB image with its annotations.
pub struct SmallaugImage {
    image: AnnotatedImage,
    categories: Vec<CString>,
}

pub struct SmallaugPolicySet(PolicySet);

pub struct SmallaugDataset(Dataset);

/// Ask/tell TPE over the augmentation policy space.
pub struct SmallaugTpe(Tpe<Rng>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SmallaugStatus, String);

impl Failure {
    fn new(status: SmallaugStatus, message: impl Into<String>) -> Self {
        Failure(status, message.into())
    }
}

impl From<data::DataError> for Failure {
    fn from(e: data::DataError) -> Self {
        let status = match e {
            data::DataError::Io { .. } | data::DataError::Decode { .. } => SmallaugStatus::Io,
            _ => SmallaugStatus::Parse,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SmallaugStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            SmallaugStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("panic inside smallaug");
            SmallaugStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(SmallaugStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `p` must be null or point to a valid value of `T` for `'a`.
unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `p` must be null or point to a valid NUL-terminated string.
unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(SmallaugStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// # Safety
/// `out` must be null or valid for a write of `T`.
unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn to_policy(p: &SmallaugPolicy) -> Result<Policy, Failure> {
    let op = *Operation::ALL
        .get(p.op as usize)
        .ok_or_else(|| Failure::new(SmallaugStatus::InvalidArgument, format!("unknown operation {}", p.op)))?;
    let m = u8::try_from(p.m).map_err(|_| Failure::new(SmallaugStatus::InvalidArgument, "m out of range"))?;
    Policy::new(op, p.p, m).map_err(|e| Failure::new(SmallaugStatus::InvalidArgument, e.to_string()))
}

fn from_policy(p: &Policy) -> SmallaugPolicy {
    SmallaugPolicy {
        op: p.op.index() as u32,
        p: p.p,
        m: p.m as u32,
    }
}

fn wrap_image(image: AnnotatedImage) -> Box<SmallaugImage> {
    let categories = image
        .instances
        .iter()
        .map(|i| CString::new(i.category.replace('\0', " ")).unwrap_or_default())
        .collect();
    Box::new(SmallaugImage { image, categories })
}

fn placement(seed: u64, max_attempts: u32, margin: u32) -> Result<PlacementConfig, Failure> {
    if max_attempts == 0 {
        return Err(Failure::new(SmallaugStatus::InvalidArgument, "max_attempts must be at least 1"));
    }
    Ok(PlacementConfig {
        max_attempts,
        margin,
        rng_seed: seed,
    })
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next smallaug call on the same thread.
#[no_mangle]
pub extern "C" fn smallaug_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Size bucket of a box: 0 small, 1 medium, 2 large, -1 for an invalid box.
#[no_mangle]
pub extern "C" fn smallaug_classify_size(b: SmallaugBox) -> i32 {
    let b = BBox::from(b);
    if !b.is_valid() {
        return -1;
    }
    match data::classify_size(&b) {
        SizeClass::Small => 0,
        SizeClass::Medium => 1,
        SizeClass::Large => 2,
    }
}

#[no_mangle]
pub extern "C" fn smallaug_iou(a: SmallaugBox, b: SmallaugBox) -> f64 {
    metrics::iou(&a.into(), &b.into())
}

/// Create an image from `width * height * 3` RGB bytes (row-major). `pixels`
/// may be null to start from a black image.
///
/// # Safety
/// `id` must be a valid C string; `pixels`, if non-null, must point to
/// `pixels_len` readable bytes; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_image_new(
    id: *const c_char,
    width: u32,
    height: u32,
    pixels: *const u8,
    pixels_len: usize,
    out: *mut *mut SmallaugImage,
) -> SmallaugStatus {
    guard(|| {
        let id = as_str(id, "id")?;
        let bytes = if pixels.is_null() {
            vec![0; width as usize * height as usize * 3]
        } else {
            std::slice::from_raw_parts(pixels, pixels_len).to_vec()
        };
        let image = AnnotatedImage::new(id, width, height, bytes, Vec::new())?;
        write_out(out, Box::into_raw(wrap_image(image)), "out")
    })
}

/// # Safety
/// `image` must be null or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn smallaug_image_free(image: *mut SmallaugImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Append an annotation. The box must lie inside the image.
///
/// # Safety
/// `image` must be a live handle and `category` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn smallaug_image_add_instance(
    image: *mut SmallaugImage,
    bbox: SmallaugBox,
    category: *const c_char,
    difficult: bool,
) -> SmallaugStatus {
    guard(|| {
        let handle = image.as_mut().ok_or_else(|| null("image"))?;
        let category = as_str(category, "category")?;
        let mut inst = Instance::new(bbox.into(), category);
        inst.difficult = difficult;
        let mut candidate = handle.image.clone();
        candidate.instances.push(inst);
        candidate
            .validate()
            .map_err(|e| Failure::new(SmallaugStatus::InvalidArgument, e.to_string()))?;
        *handle = *wrap_image(candidate);
        Ok(())
    })
}

/// Number of annotations, or 0 for a null handle.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smallaug_image_instance_count(image: *const SmallaugImage) -> usize {
    image.as_ref().map_or(0, |h| h.image.instances.len())
}

/// # Safety
/// `image` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_image_instance(
    image: *const SmallaugImage,
    index: usize,
    out: *mut SmallaugInstance,
) -> SmallaugStatus {
    guard(|| {
        let handle = as_ref(image, "image")?;
        let inst = handle.image.instances.get(index).ok_or_else(|| {
            Failure::new(
                SmallaugStatus::OutOfRange,
                format!("instance {index} of {}", handle.image.instances.len()),
            )
        })?;
        let value = SmallaugInstance {
            bbox: inst.bbox.into(),
            category: handle.categories[index].as_ptr(),
            difficult: inst.difficult,
            origin: match inst.origin {
                Origin::Original => 0,
                Origin::Pasted => 1,
            },
        };
        write_out(out, value, "out")
    })
}

/// Borrow the RGB bytes; `out_len` receives their count. Returns null for a
/// null handle. The buffer lives as long as the image handle.
///
/// # Safety
/// `image` must be null or a live handle; `out_len` must be null or valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_image_pixels(image: *const SmallaugImage, out_len: *mut usize) -> *const u8 {
    let Some(handle) = image.as_ref() else {
        return ptr::null();
    };
    if !out_len.is_null() {
        *out_len = handle.image.pixels.len();
    }
    handle.image.pixels.as_ptr()
}

/// Apply one policy to `image`, writing a new image handle to `out`. The
/// result depends only on the inputs and `seed`.
///
/// # Safety
/// `image` must be a live handle; `policy` and `out` must be valid pointers;
/// `stats` may be null.
#[no_mangle]
pub unsafe extern "C" fn smallaug_apply_policy(
    image: *const SmallaugImage,
    policy: *const SmallaugPolicy,
    seed: u64,
    max_attempts: u32,
    margin: u32,
    out: *mut *mut SmallaugImage,
    stats: *mut SmallaugAugmentStats,
) -> SmallaugStatus {
    guard(|| {
        let handle = as_ref(image, "image")?;
        let policy = to_policy(as_ref(policy, "policy")?)?;
        let cfg = placement(seed, max_attempts, margin)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = seed::rng(seed);
        let (result, s) = augment::apply_policy_with_stats(&handle.image, &policy, &cfg, &mut rng);
        if !stats.is_null() {
            stats.write(s.into());
        }
        out.write(Box::into_raw(wrap_image(result)));
        Ok(())
    })
}

/// Parse a policy file (JSON array of `{"op", "p", "m"}`).
///
/// # Safety
/// `json` must be a valid C string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_policy_set_parse(json: *const c_char, out: *mut *mut SmallaugPolicySet) -> SmallaugStatus {
    guard(|| {
        let text = as_str(json, "json")?;
        let set = parse_policy_file(text).map_err(|e| Failure::new(SmallaugStatus::Parse, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(SmallaugPolicySet(set))), "out")
    })
}

/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smallaug_policy_set_len(set: *const SmallaugPolicySet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_policy_set_get(
    set: *const SmallaugPolicySet,
    index: usize,
    out: *mut SmallaugPolicy,
) -> SmallaugStatus {
    guard(|| {
        let set = &as_ref(set, "set")?.0;
        let entry = set.entries.get(index).ok_or_else(|| {
            Failure::new(SmallaugStatus::OutOfRange, format!("policy {index} of {}", set.len()))
        })?;
        write_out(out, from_policy(&entry.policy), "out")
    })
}

/// # Safety
/// `set` must be null or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn smallaug_policy_set_free(set: *mut SmallaugPolicySet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Draw one policy from `set` uniformly and apply it.
///
/// # Safety
/// `image` and `set` must be live handles; `out` must be valid for writes;
/// `stats` may be null.
#[no_mangle]
pub unsafe extern "C" fn smallaug_apply_policy_set(
    image: *const SmallaugImage,
    set: *const SmallaugPolicySet,
    seed: u64,
    max_attempts: u32,
    margin: u32,
    out: *mut *mut SmallaugImage,
    stats: *mut SmallaugAugmentStats,
) -> SmallaugStatus {
    guard(|| {
        let handle = as_ref(image, "image")?;
        let set = &as_ref(set, "set")?.0;
        let cfg = placement(seed, max_attempts, margin)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = seed::rng(seed);
        let (result, s) = augment::apply_policy_set_with_stats(&handle.image, set, &cfg, &mut rng)
            .map_err(|e| Failure::new(SmallaugStatus::InvalidArgument, e.to_string()))?;
        if !stats.is_null() {
            stats.write(s.into());
        }
        out.write(Box::into_raw(wrap_image(result)));
        Ok(())
    })
}

/// Load a dataset manifest (`manifest.json` plus COCO annotations).
///
/// # Safety
/// `path` must be a valid C string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_dataset_load(path: *const c_char, out: *mut *mut SmallaugDataset) -> SmallaugStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        let d = load_manifest(Path::new(path))?;
        write_out(out, Box::into_raw(Box::new(SmallaugDataset(d))), "out")
    })
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smallaug_dataset_len(dataset: *const SmallaugDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Decode image `index` of the dataset into a new image handle.
///
/// # Safety
/// `dataset` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_dataset_image(
    dataset: *const SmallaugDataset,
    index: usize,
    out: *mut *mut SmallaugImage,
) -> SmallaugStatus {
    guard(|| {
        let d = &as_ref(dataset, "dataset")?.0;
        if index >= d.len() {
            return Err(Failure::new(SmallaugStatus::OutOfRange, format!("image {index} of {}", d.len())));
        }
        let image = d.load_image(index)?;
        write_out(out, Box::into_raw(wrap_image(image)), "out")
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn smallaug_dataset_free(dataset: *mut SmallaugDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Evaluate a detections JSON file against a ground-truth manifest.
/// `interp_points` is 101 or 11.
///
/// # Safety
/// `gt_manifest` and `dets_path` must be valid C strings; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_evaluate_files(
    gt_manifest: *const c_char,
    dets_path: *const c_char,
    iou_thresh: f64,
    interp_points: u32,
    include_difficult: bool,
    out: *mut SmallaugEvalSummary,
) -> SmallaugStatus {
    guard(|| {
        let gt = as_str(gt_manifest, "gt_manifest")?;
        let dets_path = as_str(dets_path, "dets_path")?;
        let interpolation = match interp_points {
            101 => Interpolation::Points101,
            11 => Interpolation::Points11,
            n => {
                return Err(Failure::new(
                    SmallaugStatus::InvalidArgument,
                    format!("interp_points must be 101 or 11, got {n}"),
                ))
            }
        };
        if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
            return Err(Failure::new(SmallaugStatus::InvalidArgument, "iou_thresh must lie in (0, 1]"));
        }
        let gts = load_manifest(Path::new(gt))?;
        let text = std::fs::read_to_string(dets_path)
            .map_err(|e| Failure::new(SmallaugStatus::Io, format!("{dets_path}: {e}")))?;
        let dets = metrics::parse_detections(&text).map_err(|e| Failure::new(SmallaugStatus::Parse, e.to_string()))?;
        let cfg = EvalConfig {
            iou_thresh,
            interpolation,
            include_difficult,
        };
        let r = metrics::evaluate(&dets, &gts, &cfg).map_err(|e| Failure::new(SmallaugStatus::Parse, e.to_string()))?;
        let summary = SmallaugEvalSummary {
            map: r.map.unwrap_or(f64::NAN),
            map_s: r.map_s.unwrap_or(f64::NAN),
            map_m: r.map_m.unwrap_or(f64::NAN),
            map_l: r.map_l.unwrap_or(f64::NAN),
            n_small: r.counts.small as u64,
            n_medium: r.counts.medium as u64,
            n_large: r.counts.large as u64,
        };
        write_out(out, summary, "out")
    })
}

/// New optimizer over (op, p, m) with default settings.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_tpe_new(seed: u64, out: *mut *mut SmallaugTpe) -> SmallaugStatus {
    guard(|| {
        let cfg = TpeConfig {
            rng_seed: seed,
            ..TpeConfig::default()
        };
        let tpe = Tpe::new(ParamSpace::policy_space(), cfg, seed::rng(seed));
        write_out(out, Box::into_raw(Box::new(SmallaugTpe(tpe))), "out")
    })
}

/// Propose the next policy to evaluate.
///
/// # Safety
/// `tpe` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_tpe_ask(tpe: *mut SmallaugTpe, out: *mut SmallaugPolicy) -> SmallaugStatus {
    guard(|| {
        let tpe = &mut tpe.as_mut().ok_or_else(|| null("tpe"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let point = tpe.ask();
        let policy = tpe::point_to_policy(&point).expect("policy space yields policies");
        out.write(from_policy(&policy));
        Ok(())
    })
}

/// Record the loss observed for `policy`. The loss must be finite.
///
/// # Safety
/// `tpe` must be a live handle and `policy` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smallaug_tpe_tell(tpe: *mut SmallaugTpe, policy: *const SmallaugPolicy, loss: f64) -> SmallaugStatus {
    guard(|| {
        let tpe = &mut tpe.as_mut().ok_or_else(|| null("tpe"))?.0;
        let policy = to_policy(as_ref(policy, "policy")?)?;
        if !loss.is_finite() {
            return Err(Failure::new(SmallaugStatus::InvalidArgument, format!("loss {loss} is not finite")));
        }
        tpe.tell(tpe::policy_to_point(&policy), loss);
        Ok(())
    })
}

/// Number of trials told so far, or 0 for a null handle.
///
/// # Safety
/// `tpe` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smallaug_tpe_trial_count(tpe: *const SmallaugTpe) -> usize {
    tpe.as_ref().map_or(0, |t| t.0.history().len())
}

/// Lowest-loss trial so far (earliest on ties).
///
/// # Safety
/// `tpe` must be a live handle; `out_policy` and `out_loss` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn smallaug_tpe_best(
    tpe: *const SmallaugTpe,
    out_policy: *mut SmallaugPolicy,
    out_loss: *mut f64,
) -> SmallaugStatus {
    guard(|| {
        let tpe = &as_ref(tpe, "tpe")?.0;
        let best = tpe
            .history()
            .iter()
            .reduce(|a, b| if b.loss < a.loss { b } else { a })
            .ok_or_else(|| Failure::new(SmallaugStatus::OutOfRange, "no trials recorded"))?;
        let policy = tpe::point_to_policy(&best.params).expect("policy space yields policies");
        write_out(out_policy, from_policy(&policy), "out_policy")?;
        write_out(out_loss, best.loss, "out_loss")
    })
}

/// # Safety
/// `tpe` must be null or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn smallaug_tpe_free(tpe: *mut SmallaugTpe) {
    if !tpe.is_null() {
        drop(Box::from_raw(tpe));
    }
}
