use std::ffi::{CStr, CString};
use std::ptr;

use smallaug_ffi::*;

fn b(x: f64, y: f64, w: f64, h: f64) -> SmallaugBox {
    SmallaugBox { x, y, w, h }
}

fn last_error() -> String {
    let p = smallaug_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn size_and_iou() {
    assert_eq!(smallaug_classify_size(b(0.0, 0.0, 32.0, 32.0)), 0);
    assert_eq!(smallaug_classify_size(b(0.0, 0.0, 33.0, 32.0)), 1);
    assert_eq!(smallaug_classify_size(b(0.0, 0.0, 96.0, 97.0)), 2);
    assert_eq!(smallaug_classify_size(b(0.0, 0.0, -1.0, 5.0)), -1);
    let v = smallaug_iou(b(0.0, 0.0, 2.0, 2.0), b(1.0, 0.0, 2.0, 2.0));
    assert!((v - 2.0 / 6.0).abs() < 1e-12);
}

#[test]
fn image_lifecycle_and_augmentation() {
    unsafe {
        let id = CString::new("img").unwrap();
        let mut img = ptr::null_mut();
        assert_eq!(smallaug_image_new(id.as_ptr(), 32, 32, ptr::null(), 0, &mut img), SmallaugStatus::Ok);
        let cat = CString::new("car").unwrap();
        assert_eq!(
            smallaug_image_add_instance(img, b(2.0, 2.0, 4.0, 4.0), cat.as_ptr(), false),
            SmallaugStatus::Ok
        );
        assert_eq!(
            smallaug_image_add_instance(img, b(30.0, 30.0, 4.0, 4.0), cat.as_ptr(), false),
            SmallaugStatus::InvalidArgument
        );
        assert_eq!(smallaug_image_instance_count(img), 1);

        let policy = SmallaugPolicy { op: 0, p: 1.0, m: 2 };
        let mut out = ptr::null_mut();
        let mut stats = SmallaugAugmentStats::default();
        assert_eq!(
            smallaug_apply_policy(img, &policy, 7, 50, 0, &mut out, &mut stats),
            SmallaugStatus::Ok
        );
        assert!(stats.applied);
        assert_eq!(stats.pasted + stats.skipped, 2);
        assert_eq!(smallaug_image_instance_count(out), 1 + stats.pasted as usize);

        let mut inst = std::mem::zeroed::<SmallaugInstance>();
        assert_eq!(smallaug_image_instance(out, 1, &mut inst), SmallaugStatus::Ok);
        assert_eq!(inst.origin, 1);
        assert_eq!(CStr::from_ptr(inst.category).to_str().unwrap(), "car");
        assert_eq!(smallaug_image_instance(out, 99, &mut inst), SmallaugStatus::OutOfRange);

        let mut len = 0usize;
        let px = smallaug_image_pixels(out, &mut len);
        assert!(!px.is_null());
        assert_eq!(len, 32 * 32 * 3);

        // Same seed, same result.
        let mut again = ptr::null_mut();
        smallaug_apply_policy(img, &policy, 7, 50, 0, &mut again, ptr::null_mut());
        let mut len2 = 0usize;
        let px2 = smallaug_image_pixels(again, &mut len2);
        assert_eq!(std::slice::from_raw_parts(px, len), std::slice::from_raw_parts(px2, len2));

        smallaug_image_free(again);
        smallaug_image_free(out);
        smallaug_image_free(img);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(smallaug_image_new(ptr::null(), 4, 4, ptr::null(), 0, &mut img), SmallaugStatus::NullPointer);
        assert!(last_error().contains("id"));

        let id = CString::new("x").unwrap();
        let short = [0u8; 5];
        assert_eq!(
            smallaug_image_new(id.as_ptr(), 4, 4, short.as_ptr(), short.len(), &mut img),
            SmallaugStatus::Parse
        );

        let bad = SmallaugPolicy { op: 9, p: 0.5, m: 1 };
        let mut tpe = ptr::null_mut();
        assert_eq!(smallaug_tpe_new(0, &mut tpe), SmallaugStatus::Ok);
        assert_eq!(smallaug_tpe_tell(tpe, &bad, 0.1), SmallaugStatus::InvalidArgument);
        let good = SmallaugPolicy { op: 1, p: 0.5, m: 2 };
        assert_eq!(smallaug_tpe_tell(tpe, &good, f64::NAN), SmallaugStatus::InvalidArgument);
        assert!(last_error().contains("not finite"));
        assert_eq!(smallaug_tpe_tell(tpe, &good, 0.1), SmallaugStatus::Ok);
        assert!(smallaug_last_error().is_null());
        smallaug_tpe_free(tpe);
    }
}

#[test]
fn policy_set_parsing() {
    unsafe {
        let json = CString::new(r#"[{"op":"single","p":0.3,"m":1},{"op":"all","p":0.9,"m":3}]"#).unwrap();
        let mut set = ptr::null_mut();
        assert_eq!(smallaug_policy_set_parse(json.as_ptr(), &mut set), SmallaugStatus::Ok);
        assert_eq!(smallaug_policy_set_len(set), 2);
        let mut p = SmallaugPolicy { op: 0, p: 0.0, m: 0 };
        assert_eq!(smallaug_policy_set_get(set, 1, &mut p), SmallaugStatus::Ok);
        assert_eq!(p, SmallaugPolicy { op: 2, p: 0.9, m: 3 });
        smallaug_policy_set_free(set);

        let bad = CString::new(r#"[{"op":"single","p":1.5,"m":1}]"#).unwrap();
        assert_eq!(smallaug_policy_set_parse(bad.as_ptr(), &mut set), SmallaugStatus::Parse);
        assert!(last_error().contains("[0]"));
    }
}

#[test]
fn tpe_ask_tell_finds_low_loss_region() {
    unsafe {
        let mut tpe = ptr::null_mut();
        assert_eq!(smallaug_tpe_new(3, &mut tpe), SmallaugStatus::Ok);
        for _ in 0..40 {
            let mut p = SmallaugPolicy { op: 0, p: 0.0, m: 0 };
            assert_eq!(smallaug_tpe_ask(tpe, &mut p), SmallaugStatus::Ok);
            assert!(p.op < 3 && (0.0..=1.0).contains(&p.p) && (1..=3).contains(&p.m));
            let loss = (p.op != 1) as u32 as f64 + (p.p - 0.6).abs() + (p.m as f64 - 2.0).abs() / 2.0;
            assert_eq!(smallaug_tpe_tell(tpe, &p, loss), SmallaugStatus::Ok);
        }
        assert_eq!(smallaug_tpe_trial_count(tpe), 40);
        let mut best = SmallaugPolicy { op: 0, p: 0.0, m: 0 };
        let mut loss = f64::NAN;
        assert_eq!(smallaug_tpe_best(tpe, &mut best, &mut loss), SmallaugStatus::Ok);
        assert_eq!(best.op, 1, "best loss {loss}");
        assert!(loss < 1.0, "best loss {loss}");
        smallaug_tpe_free(tpe);
    }
}

#[test]
fn evaluate_files_reports_absent_buckets_as_nan() {
    let tmp = tempfile::tempdir().unwrap();
    let d = smallaug::synth::generate_dataset(&smallaug::synth::SynthConfig {
        images: 2,
        ..Default::default()
    })
    .unwrap();
    let manifest = smallaug::data::write_manifest(&d, tmp.path()).unwrap();
    let dets: Vec<serde_json::Value> = d
        .images
        .iter()
        .flat_map(|e| {
            e.instances.iter().map(move |i| {
                serde_json::json!({
                    "image_id": e.id,
                    "category": i.category,
                    "bbox": [i.bbox.x, i.bbox.y, i.bbox.w, i.bbox.h],
                    "score": 0.9,
                })
            })
        })
        .collect();
    let dets_path = tmp.path().join("dets.json");
    std::fs::write(&dets_path, serde_json::to_string(&dets).unwrap()).unwrap();

    let gt = CString::new(manifest.to_str().unwrap()).unwrap();
    let dp = CString::new(dets_path.to_str().unwrap()).unwrap();
    let mut s = std::mem::MaybeUninit::<SmallaugEvalSummary>::uninit();
    let status = unsafe { smallaug_evaluate_files(gt.as_ptr(), dp.as_ptr(), 0.5, 101, true, s.as_mut_ptr()) };
    assert_eq!(status, SmallaugStatus::Ok);
    let s = unsafe { s.assume_init() };
    assert_eq!(s.map, 1.0);
    assert_eq!(s.map_s, 1.0);
    assert!(s.map_m.is_nan() && s.map_l.is_nan());
    assert!(s.n_small > 0);

    let status = unsafe { smallaug_evaluate_files(gt.as_ptr(), dp.as_ptr(), 0.5, 7, true, ptr::null_mut()) };
    assert_eq!(status, SmallaugStatus::InvalidArgument);

    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(smallaug_dataset_load(gt.as_ptr(), &mut ds), SmallaugStatus::Ok);
        assert_eq!(smallaug_dataset_len(ds), 2);
        let mut img = ptr::null_mut();
        assert_eq!(smallaug_dataset_image(ds, 1, &mut img), SmallaugStatus::Ok);
        assert_eq!(smallaug_image_instance_count(img), d.images[1].instances.len());
        smallaug_image_free(img);
        smallaug_dataset_free(ds);
        let missing = CString::new("/nonexistent/manifest.json").unwrap();
        assert_eq!(smallaug_dataset_load(missing.as_ptr(), &mut ds), SmallaugStatus::Io);
    }
}
