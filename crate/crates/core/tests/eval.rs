use dinoiser_core::denoiser::pipeline::{Pipeline, PipelineConfig};
use dinoiser_core::eval::{
    accumulate_confusion, evaluate_dataset, miou, sliding_window_segment, ConfusionMatrix, DatasetAdapter,
    DatasetKind, EvalOptions, SlidingWindow, IGNORE_INDEX,
};
use dinoiser_core::featurizer::TextQuerySet;
use dinoiser_core::synthetic::PatchColorEncoder;
use dinoiser_core::templates::TemplateSet;
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RED: [u8; 3] = [220, 20, 20];
const BLUE: [u8; 3] = [20, 20, 220];

fn two_region(w: u32, h: u32, split: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, _| Rgb(if x < split { RED } else { BLUE }))
}

/// Red and blue first, then `extra` queries that never win on either colour.
fn colour_queries(extra: usize) -> TextQuerySet {
    let mut e = Array2::<f64>::zeros((2 + extra, 3));
    e.row_mut(0).assign(&array![1.0, 0.0, 0.0]);
    e.row_mut(1).assign(&array![0.0, 0.0, 1.0]);
    for i in 0..extra {
        e.row_mut(2 + i).assign(&array![-1.0, -(i as f64) - 1.0, -1.0]);
    }
    let prompts = (0..e.nrows()).map(|i| format!("c{i}")).collect();
    TextQuerySet::new(prompts, e, TemplateSet::Single).unwrap()
}

fn baseline<'a>(enc: &'a PatchColorEncoder) -> Pipeline<'a> {
    Pipeline::new(enc, PipelineConfig::baseline())
}

#[test]
fn single_window_equals_single_pass() {
    let enc = PatchColorEncoder::new(8, 64);
    let p = baseline(&enc);
    let q = colour_queries(1);
    let img = two_region(88, 64, 40);
    let sw = SlidingWindow { window: 96, stride: 48 };
    let slid = sliding_window_segment(&img, None, &p, &q, sw).unwrap();
    let (_, direct) = p.run_window(&img, None, &q).unwrap();
    assert_eq!(slid.scores(), direct.scores());
    assert_eq!(slid.labels(), p.segment(&img, None, &q).unwrap().labels);
}

#[test]
fn constant_image_gives_constant_output() {
    let enc = PatchColorEncoder::new(8, 64);
    let p = baseline(&enc);
    let q = colour_queries(2);
    let img = RgbImage::from_pixel(150, 64, Rgb(BLUE));
    let out = sliding_window_segment(&img, None, &p, &q, SlidingWindow { window: 32, stride: 16 }).unwrap();
    assert!(out.labels().iter().all(|&l| l == 1));
    let s = out.scores();
    for k in 0..3 {
        let v0 = s[[k, 0, 0]];
        assert!(s.index_axis(ndarray::Axis(0), k).iter().all(|&v| (v - v0).abs() < 1e-6));
    }
}

#[test]
fn stride_does_not_change_labels_away_from_boundary() {
    let enc = PatchColorEncoder::new(8, 64);
    let p = baseline(&enc);
    let q = colour_queries(1);
    let img = two_region(160, 64, 72);
    let a = sliding_window_segment(&img, None, &p, &q, SlidingWindow { window: 32, stride: 32 }).unwrap();
    let b = sliding_window_segment(&img, None, &p, &q, SlidingWindow { window: 32, stride: 16 }).unwrap();
    let (la, lb) = (a.labels(), b.labels());
    for ((y, x), &l) in la.indexed_iter() {
        if (x as i64 - 72).abs() > 8 {
            assert_eq!(l, lb[[y, x]], "({y}, {x})");
            assert_eq!(l, if x < 72 { 0 } else { 1 });
        }
    }
}

#[test]
fn miou_examples() {
    let gt = array![[0u32, 1], [2, IGNORE_INDEX]];
    let perfect = accumulate_confusion(&array![[0u32, 1], [2, 0]], &gt, 3, IGNORE_INDEX).unwrap();
    assert_eq!(perfect.total(), 3);
    assert_eq!(miou(&perfect).unwrap().mean, 1.0);
    let disjoint = accumulate_confusion(&array![[1u32, 2], [0, 0]], &gt, 3, IGNORE_INDEX).unwrap();
    assert_eq!(miou(&disjoint).unwrap().mean, 0.0);
    // class 3 never appears anywhere: excluded, not zero
    let m = miou(&accumulate_confusion(&array![[0u32, 1], [2, 0]], &gt, 4, IGNORE_INDEX).unwrap()).unwrap();
    assert_eq!(m.per_class_iou[3], None);
    assert_eq!(m.mean, 1.0);
    let all_ignored = accumulate_confusion(&array![[0u32]], &array![[IGNORE_INDEX]], 2, IGNORE_INDEX).unwrap();
    assert!(miou(&all_ignored).is_err());
    assert!(accumulate_confusion(&array![[0u32, 1]], &array![[0u32]], 2, IGNORE_INDEX).is_err());
    assert!(accumulate_confusion(&array![[5u32]], &array![[0u32]], 2, IGNORE_INDEX).is_err());
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> (Array2<u32>, Array2<u32>) {
    let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(0..n as u32));
    let gt = Array2::from_shape_fn((h, w), |_| {
        if rng.random_bool(0.1) {
            IGNORE_INDEX
        } else {
            rng.random_range(0..n as u32)
        }
    });
    (pred, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miou_matches_set_oracle(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = random_pair(&mut rng, n, 7, 9);
        let m = miou(&accumulate_confusion(&pred, &gt, n, IGNORE_INDEX).unwrap());
        let mut ious = Vec::new();
        for k in 0..n as u32 {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &g) in pred.iter().zip(gt.iter()) {
                if g == IGNORE_INDEX { continue; }
                inter += (p == k && g == k) as usize;
                union += (p == k || g == k) as usize;
            }
            if union > 0 { ious.push(inter as f64 / union as f64); }
        }
        if ious.is_empty() {
            prop_assert!(m.is_err());
        } else {
            let want = ious.iter().sum::<f64>() / ious.len() as f64;
            prop_assert!((m.unwrap().mean - want).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_is_additive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p1, g1) = random_pair(&mut rng, 4, 5, 6);
        let (p2, g2) = random_pair(&mut rng, 4, 5, 6);
        let a = accumulate_confusion(&p1, &g1, 4, IGNORE_INDEX).unwrap();
        let b = accumulate_confusion(&p2, &g2, 4, IGNORE_INDEX).unwrap();
        let joint = accumulate_confusion(
            &ndarray::concatenate![ndarray::Axis(0), p1, p2],
            &ndarray::concatenate![ndarray::Axis(0), g1, g2],
            4,
            IGNORE_INDEX,
        ).unwrap();
        let mut c = ConfusionMatrix::new(4);
        c.accumulate(&p1, &g1, IGNORE_INDEX).unwrap();
        c.accumulate(&p2, &g2, IGNORE_INDEX).unwrap();
        prop_assert_eq!(&(a + b), &joint);
        prop_assert_eq!(&c, &joint);
    }

    #[test]
    fn miou_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let (pred, gt) = random_pair(&mut rng, n, 6, 6);
        let mut perm: Vec<u32> = (0..n as u32).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabel = |a: &Array2<u32>| a.mapv(|v| if v == IGNORE_INDEX { v } else { perm[v as usize] });
        let m = miou(&accumulate_confusion(&pred, &gt, n, IGNORE_INDEX).unwrap()).unwrap();
        let mp = miou(&accumulate_confusion(&relabel(&pred), &relabel(&gt), n, IGNORE_INDEX).unwrap()).unwrap();
        prop_assert!((m.mean - mp.mean).abs() < 1e-12);
        for k in 0..n {
            prop_assert_eq!(m.per_class_iou[k], mp.per_class_iou[perm[k] as usize]);
        }
    }
}

fn write_dataset(root: &std::path::Path, n: usize) -> Vec<(RgbImage, GrayImage)> {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("annotations")).unwrap();
    let mut ids = String::new();
    let mut out = Vec::new();
    for i in 0..n {
        let (w, h) = (96 + 16 * i as u32, 64);
        let split = 32 + 8 * i as u32;
        let img = two_region(w, h, split);
        let mut ann = GrayImage::from_fn(w, h, |x, _| Luma([if x < split { 0 } else { 1 }]));
        ann.put_pixel(0, 0, Luma([IGNORE_INDEX as u8]));
        let id = format!("img{i}");
        img.save(root.join("images").join(format!("{id}.png"))).unwrap();
        ann.save(root.join("annotations").join(format!("{id}.png"))).unwrap();
        ids.push_str(&id);
        ids.push('\n');
        out.push((img, ann));
    }
    std::fs::write(root.join("val.txt"), ids).unwrap();
    out
}

#[test]
fn evaluate_synthetic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), 5);
    let adapter = DatasetAdapter::open(DatasetKind::Voc20, dir.path(), None).unwrap();
    let enc = PatchColorEncoder::new(8, 64);
    let p = baseline(&enc);
    let q = colour_queries(18);
    let sw = SlidingWindow { window: 64, stride: 32 };
    let opts = EvalOptions {
        sliding: sw,
        objectness: None,
        config_hash: "test".into(),
    };
    let report = evaluate_dataset(&adapter, &p, &q, &opts).unwrap();
    assert_eq!(report.n_images, 5);
    assert_eq!(report.per_class_iou.len(), 20);
    assert!(!report.background_refinement);

    let mut oracle = ConfusionMatrix::new(20);
    for (img, ann) in &data {
        let scores = sliding_window_segment(img, None, &p, &q, sw).unwrap();
        let pred = scores.labels_at(ann.height() as usize, ann.width() as usize);
        let gt = Array2::from_shape_fn((ann.height() as usize, ann.width() as usize), |(y, x)| {
            ann.get_pixel(x as u32, y as u32).0[0] as u32
        });
        oracle.accumulate(&pred, &gt, IGNORE_INDEX).unwrap();
    }
    let m = miou(&oracle).unwrap();
    assert_eq!(report.miou, m.mean);
    assert!(report.miou > 0.9, "{}", report.miou);
    assert!(report.per_class_iou[5].iou.is_none());
    assert!(report.to_table().contains(&report.per_class_iou[0].class));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["n_images"], 5);

    let wrong_q = colour_queries(1);
    assert!(evaluate_dataset(&adapter, &p, &wrong_q, &opts).is_err());
}
