//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls the library routine it is used to check.

#![allow(dead_code)]

use rand::Rng;

use smallaug::augment::{Operation, Policy};
use smallaug::data::{AnnotatedImage, BBox, Dataset, ImageEntry, Instance, Origin};
use smallaug::metrics::Detection;

pub const SMALL_LIMIT: f64 = 32.0 * 32.0;
pub const MEDIUM_LIMIT: f64 = 96.0 * 96.0;

/// 0 small, 1 medium, 2 large.
pub fn bucket_of(w: f64, h: f64) -> usize {
    let a = w * h;
    if a <= SMALL_LIMIT {
        0
    } else if a <= MEDIUM_LIMIT {
        1
    } else {
        2
    }
}

pub fn overlap_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

pub fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Integer pixel rectangle covering a box: (x0, y0, x1, y1) exclusive.
pub fn pixel_hull(b: &BBox) -> (u32, u32, u32, u32) {
    (b.x.floor() as u32, b.y.floor() as u32, (b.x + b.w).ceil() as u32, (b.y + b.h).ceil() as u32)
}

pub fn px(img: &AnnotatedImage, x: u32, y: u32) -> [u8; 3] {
    let i = (y as usize * img.width as usize + x as usize) * 3;
    [img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]]
}

/// Copy-source eligibility, written out directly.
pub fn eligible(inst: &Instance) -> bool {
    inst.origin == Origin::Original && !inst.difficult && inst.bbox.w * inst.bbox.h <= SMALL_LIMIT
}

/// Checks every augmentation invariant for one (input, output) pair and
/// returns a description of the first violation.
pub fn check_augmentation(
    input: &AnnotatedImage,
    output: &AnnotatedImage,
    policy: &Policy,
    selected: usize,
) -> Result<(), String> {
    let n_in = input.instances.len();
    if output.width != input.width || output.height != input.height {
        return Err("dimensions changed".into());
    }
    if output.instances.len() < n_in || output.instances[..n_in] != input.instances[..] {
        return Err("original instances were altered".into());
    }
    let pasted = &output.instances[n_in..];
    if pasted.iter().any(|i| i.origin != Origin::Pasted) {
        return Err("appended instance not marked pasted".into());
    }
    if pasted.len() > policy.m as usize * selected {
        return Err(format!("{} pasted > m·selected = {}", pasted.len(), policy.m as usize * selected));
    }
    let eligible_count = input.instances.iter().filter(|i| eligible(i)).count();
    let expected_selected = match policy.op {
        Operation::SingleObject => selected == 1 || (selected == 0 && eligible_count == 0),
        Operation::MultipleObjects => {
            (2..=eligible_count).contains(&selected) || (selected == 0 && eligible_count < 2)
        }
        Operation::AllObjects => selected == eligible_count,
    };
    if selected > 0 && !expected_selected {
        return Err(format!("{:?} selected {selected} of {eligible_count} eligible", policy.op));
    }

    // Zero interior overlap between every pair of instances.
    for (i, a) in output.instances.iter().enumerate() {
        if a.bbox.x < 0.0 || a.bbox.y < 0.0 || a.bbox.x + a.bbox.w > output.width as f64 + 1e-9
            || a.bbox.y + a.bbox.h > output.height as f64 + 1e-9
        {
            return Err(format!("instance {i} out of bounds: {:?}", a.bbox));
        }
        for (j, b) in output.instances.iter().enumerate().skip(i + 1) {
            if overlap_area(&a.bbox, &b.bbox) > 0.0 {
                return Err(format!("instances {i} and {j} overlap"));
            }
        }
    }

    // Each pasted rectangle equals the rectangle of some eligible source.
    let mut touched = vec![false; (input.width * input.height) as usize];
    for p in pasted {
        let (px0, py0, px1, py1) = pixel_hull(&p.bbox);
        let found = input.instances.iter().filter(|s| eligible(s)).any(|s| {
            let (sx0, sy0, sx1, sy1) = pixel_hull(&s.bbox);
            s.category == p.category
                && s.bbox.w == p.bbox.w
                && s.bbox.h == p.bbox.h
                && sx1 - sx0 == px1 - px0
                && sy1 - sy0 == py1 - py0
                && (0..py1 - py0).all(|dy| {
                    (0..px1 - px0).all(|dx| px(input, sx0 + dx, sy0 + dy) == px(output, px0 + dx, py0 + dy))
                })
        });
        if !found {
            return Err(format!("pasted {:?} matches no eligible source", p.bbox));
        }
        for y in py0..py1 {
            for x in px0..px1 {
                touched[(y * input.width + x) as usize] = true;
            }
        }
    }

    // Everything else is untouched.
    for y in 0..input.height {
        for x in 0..input.width {
            if !touched[(y * input.width + x) as usize] && px(input, x, y) != px(output, x, y) {
                return Err(format!("pixel ({x},{y}) changed outside every paste"));
            }
        }
    }
    Ok(())
}

/// Random image with pairwise disjoint instances: mostly small, some
/// medium, some difficult, some with fractional coordinates.
pub fn random_image<R: Rng>(rng: &mut R, id: &str) -> AnnotatedImage {
    let width = rng.random_range(16..=96u32);
    let height = rng.random_range(16..=96u32);
    let pixels = (0..width * height * 3).map(|_| rng.random::<u8>()).collect();
    let mut instances: Vec<Instance> = Vec::new();
    let target = rng.random_range(0..=6);
    for _ in 0..target * 4 {
        if instances.len() >= target {
            break;
        }
        let big = rng.random_bool(0.15);
        let max_side = if big { 40.0f64 } else { 12.0 };
        let w = rng.random_range(1.0..=max_side.min(width as f64 - 1.0));
        let h = rng.random_range(1.0..=max_side.min(height as f64 - 1.0));
        let (w, h) = if rng.random_bool(0.5) { (w.round().max(1.0), h.round().max(1.0)) } else { (w, h) };
        let x = rng.random_range(0.0..=(width as f64 - w));
        let y = rng.random_range(0.0..=(height as f64 - h));
        let (x, y) = if rng.random_bool(0.5) { (x.floor(), y.floor()) } else { (x, y) };
        let b = BBox::new(x, y, w, h);
        if instances.iter().any(|o| {
            let (ax0, ay0, ax1, ay1) = pixel_hull(&o.bbox);
            let (bx0, by0, bx1, by1) = pixel_hull(&b);
            ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
        }) {
            continue;
        }
        let mut inst = Instance::new(b, ["plane", "ship", "car"][rng.random_range(0..3)]);
        inst.difficult = rng.random_bool(0.1);
        instances.push(inst);
    }
    AnnotatedImage::new(id, width, height, pixels, instances).expect("valid random image")
}

pub fn random_policy<R: Rng>(rng: &mut R) -> Policy {
    let op = Operation::ALL[rng.random_range(0..3)];
    let p = match rng.random_range(0..5) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f64>(),
    };
    Policy::new(op, p, rng.random_range(1..=3)).unwrap()
}

/// Per category and bucket (all, small, medium, large) AP, recomputed from
/// scratch at every rank cut-off.
pub struct BruteForce {
    pub per_category: Vec<[Option<f64>; 4]>,
    pub means: [Option<f64>; 4],
}

fn greedy_match(dets: &[(usize, &Detection)], gts: &[&Instance], thresh: f64) -> Vec<Option<usize>> {
    // dets are already in rank order
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|(_, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.category != d.category {
                    continue;
                }
                let v = naive_iou(&d.bbox, &gt.bbox);
                if v >= thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| {
                used[g] = true;
                g
            })
        })
        .collect()
}

pub fn brute_force_evaluate(dets: &[Detection], gts: &Dataset, iou_thresh: f64) -> BruteForce {
    // rank: score descending, input order on ties
    let mut ranked: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));

    // match per image, dets in rank order
    let mut status: Vec<Option<(usize, usize)>> = vec![None; dets.len()];
    for (img_idx, img) in gts.images.iter().enumerate() {
        let mine: Vec<(usize, &Detection)> = ranked.iter().copied().filter(|(_, d)| d.image_id == img.id).collect();
        let gt_refs: Vec<&Instance> = img.instances.iter().collect();
        for (k, m) in greedy_match(&mine, &gt_refs, iou_thresh).into_iter().enumerate() {
            status[mine[k].0] = m.map(|g| (img_idx, g));
        }
    }

    let mut per_category = Vec::new();
    for cat in &gts.categories {
        let mut row = [None; 4];
        for (slot, bucket) in [None, Some(0), Some(1), Some(2)].into_iter().enumerate() {
            let in_b = |b: &BBox| bucket.is_none_or(|k| bucket_of(b.w, b.h) == k);
            let n_gt = gts
                .images
                .iter()
                .flat_map(|e| &e.instances)
                .filter(|g| &g.category == cat && in_b(&g.bbox))
                .count();
            if n_gt == 0 {
                continue;
            }
            let mut flags: Vec<bool> = Vec::new();
            for (i, d) in &ranked {
                if &d.category != cat {
                    continue;
                }
                match status[*i] {
                    Some((img, g)) => {
                        if in_b(&gts.images[img].instances[g].bbox) {
                            flags.push(true);
                        }
                    }
                    None => {
                        if in_b(&d.bbox) {
                            flags.push(false);
                        }
                    }
                }
            }
            // PR point at every cut-off, then the sampled envelope.
            let points: Vec<(f64, f64)> = (1..=flags.len())
                .map(|k| {
                    let tp = flags[..k].iter().filter(|&&t| t).count();
                    (tp as f64 / n_gt as f64, tp as f64 / k as f64)
                })
                .collect();
            let mut total = 0.0;
            for step in 0..=100 {
                let r = step as f64 / 100.0;
                total += points
                    .iter()
                    .filter(|(rec, _)| *rec >= r)
                    .map(|(_, prec)| *prec)
                    .fold(0.0, f64::max);
            }
            row[slot] = Some(total / 101.0);
        }
        per_category.push(row);
    }
    let mut means = [None; 4];
    for (slot, m) in means.iter_mut().enumerate() {
        let vals: Vec<f64> = per_category.iter().filter_map(|r| r[slot]).collect();
        if !vals.is_empty() {
            *m = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    BruteForce { per_category, means }
}

/// Random evaluation case: up to 10 images, 10 boxes each, 20 detections.
pub fn random_eval_case<R: Rng>(rng: &mut R) -> (Dataset, Vec<Detection>) {
    let cats = ["a", "b"];
    let n_images = rng.random_range(1..=10);
    let mut images = Vec::new();
    for i in 0..n_images {
        let mut e = ImageEntry::new(format!("img{i}"), 200, 200);
        for _ in 0..rng.random_range(0..=10) {
            let side = *[8.0, 20.0, 31.0, 32.0, 33.0, 60.0, 96.0, 97.0, 120.0]
                .get(rng.random_range(0..9))
                .unwrap();
            let w = side;
            let h = (side * rng.random_range(0.8..1.2f64)).round().clamp(1.0, 199.0);
            let x = rng.random_range(0.0..(200.0 - w)).floor();
            let y = rng.random_range(0.0..(200.0 - h)).floor();
            e.instances.push(Instance::new(BBox::new(x, y, w, h), cats[rng.random_range(0..2)]));
        }
        images.push(e);
    }
    let d = Dataset::new(images, cats.iter().map(|c| c.to_string()).collect()).unwrap();
    let mut dets = Vec::new();
    for _ in 0..rng.random_range(0..=20) {
        let img = &d.images[rng.random_range(0..d.len())];
        let bbox = match img.instances.get(rng.random_range(0..img.instances.len().max(1) * 2)) {
            Some(gt) => {
                let mut j = |v: f64| v * rng.random_range(-0.3..0.3f64);
                BBox::new(
                    (gt.bbox.x + j(gt.bbox.w)).max(0.0),
                    (gt.bbox.y + j(gt.bbox.h)).max(0.0),
                    gt.bbox.w * rng.random_range(0.7..1.3f64),
                    gt.bbox.h * rng.random_range(0.7..1.3f64),
                )
            }
            None => BBox::new(
                rng.random_range(0.0..150.0f64).floor(),
                rng.random_range(0.0..150.0f64).floor(),
                rng.random_range(4.0..120.0f64).floor(),
                rng.random_range(4.0..120.0f64).floor(),
            ),
        };
        // coarse scores so ties are common
        let score = rng.random_range(0..=10) as f64 / 10.0;
        dets.push(Detection {
            image_id: img.id.clone(),
            bbox,
            category: cats[rng.random_range(0..2)].to_string(),
            score,
        });
    }
    (d, dets)
}

/// Planted objective with a known optimum:
/// `[op != single] + |p - 0.5|`, independent of m.
pub fn planted_loss(op: Operation, p: f64, _m: u8) -> f64 {
    (op != Operation::SingleObject) as u8 as f64 + (p - 0.5).abs()
}

/// Exhaustive grid minimum over op × m × p ∈ {0, 0.05, ..., 1}.
pub fn grid_optimum(loss: impl Fn(Operation, f64, u8) -> f64) -> (Operation, f64, u8) {
    let mut best = (Operation::SingleObject, 0.0, 1, f64::INFINITY);
    for op in Operation::ALL {
        for m in 1..=3u8 {
            for k in 0..=20 {
                let p = k as f64 * 0.05;
                let l = loss(op, p, m);
                if l < best.3 {
                    best = (op, p, m, l);
                }
            }
        }
    }
    (best.0, best.1, best.2)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
