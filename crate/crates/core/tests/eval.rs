mod common;

use camoseg::data::{Instance, Mask, Rle};
use camoseg::eval::{average_precision, coco_iou_thresholds, mask_iou, recall_grid, Detection, EvalMode, EvalParams};
use camoseg::Error;
use common::{brute_force_ap, random_ap_case, rng};
use serde_json::Value;

fn gt(mask: Mask) -> Instance {
    Instance {
        mask,
        category_id: 0,
        iscrowd: false,
    }
}

fn det(mask: Mask, score: f64) -> Detection {
    Detection {
        mask,
        score,
        category: 0,
    }
}

#[test]
fn iou_examples() {
    let a = Mask::from_fn(3, 3, |y, _| y == 0);
    assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    assert_eq!(mask_iou(&a, &Mask::from_fn(3, 3, |y, _| y == 2)).unwrap(), 0.0);
}

#[test]
fn grids() {
    let t = coco_iou_thresholds();
    assert_eq!(t.len(), 10);
    assert_eq!(t[0], 0.5);
    assert_eq!(t[9], 0.95);
    let r = recall_grid();
    assert_eq!(r.len(), 101);
    assert_eq!(r[100], 1.0);
}

#[test]
fn perfect_detector() {
    let m = Mask::from_fn(4, 4, |y, x| y < 2 && x < 3);
    let r = average_precision(&[vec![det(m.clone(), 0.9)]], &[vec![gt(m)]], &EvalParams::coco(EvalMode::ClassAgnostic)).unwrap();
    assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
}

#[test]
fn straddling_threshold() {
    // IoU 6/10 = 0.6.
    let g = Mask::from_fn(2, 5, |_, x| x < 4);
    let d = Mask::from_fn(2, 5, |_, x| x >= 1);
    assert!((mask_iou(&g, &d).unwrap() - 0.6).abs() < 1e-15);
    let r = average_precision(&[vec![det(d, 0.5)]], &[vec![gt(g)]], &EvalParams::coco(EvalMode::ClassAgnostic)).unwrap();
    assert_eq!(r.ap50, 1.0);
    assert_eq!(r.ap75, 0.0);
    assert_eq!(r.per_threshold["0.60"], 1.0);
    assert_eq!(r.per_threshold["0.65"], 0.0);
    assert!((r.ap - 0.3).abs() < 1e-12);
}

#[test]
fn empty_predictions_score_zero() {
    let g = Mask::from_fn(3, 3, |y, _| y == 1);
    let r = average_precision(&[vec![]], &[vec![gt(g)]], &EvalParams::coco(EvalMode::ClassAgnostic)).unwrap();
    assert_eq!(r.ap, 0.0);
}

#[test]
fn nested_matches_are_monotone() {
    // Detections overlapping their ground truth by decreasing IoU.
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for k in 0..5 {
        let g = Mask::from_fn(1, 20, |_, x| x < 10);
        let d = Mask::from_fn(1, 20, |_, x| x < 10 + k);
        gts.push(vec![gt(g)]);
        dets.push(vec![det(d, 1.0 - 0.1 * k as f64)]);
    }
    let r = average_precision(&dets, &gts, &EvalParams::coco(EvalMode::ClassAgnostic)).unwrap();
    let v: Vec<f64> = r.per_threshold.values().copied().collect();
    assert!(v.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn brute_force_agreement_on_random_cases() {
    let mut r = rng(41);
    let mut checked = 0;
    for _ in 0..100 {
        let (dets, gts) = random_ap_case(&mut r);
        for mode in [EvalMode::ClassAgnostic, EvalMode::ClassAware] {
            let got = average_precision(&dets, &gts, &EvalParams::coco(mode));
            match brute_force_ap(&dets, &gts, mode) {
                None => assert!(matches!(got, Err(Error::UndefinedAp(_)))),
                Some((ap, ap50, ap75)) => {
                    let got = got.unwrap();
                    assert!((got.ap - ap).abs() < 1e-9);
                    assert!((got.ap50 - ap50).abs() < 1e-9);
                    assert!((got.ap75 - ap75).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 100);
}

fn decode(v: &Value) -> Mask {
    let size = &v["size"];
    Rle::from_compressed(
        size[0].as_u64().unwrap() as usize,
        size[1].as_u64().unwrap() as usize,
        v["counts"].as_str().unwrap(),
    )
    .unwrap()
    .decode()
    .unwrap()
}

/// Reference values computed by pycocotools `COCOeval` (segm, maxDets 100).
#[test]
fn pycocotools_reference_cases() {
    let cases: Vec<Value> = serde_json::from_str(include_str!("fixtures/pycocotools_ap.json")).unwrap();
    assert_eq!(cases.len(), 40);
    for (n, case) in cases.iter().enumerate() {
        let images = case["images"].as_array().unwrap();
        let mut gts: Vec<Vec<Instance>> = vec![Vec::new(); images.len()];
        let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images.len()];
        for a in case["annotations"].as_array().unwrap() {
            gts[a["image_id"].as_u64().unwrap() as usize - 1].push(Instance {
                mask: decode(&a["segmentation"]),
                category_id: a["category_id"].as_u64().unwrap() as usize - 1,
                iscrowd: a["iscrowd"].as_u64().unwrap() == 1,
            });
        }
        for d in case["detections"].as_array().unwrap() {
            dets[d["image_id"].as_u64().unwrap() as usize - 1].push(Detection {
                mask: decode(&d["segmentation"]),
                score: d["score"].as_f64().unwrap(),
                category: d["category_id"].as_u64().unwrap() as usize - 1,
            });
        }
        for (key, mode) in [("class_agnostic", EvalMode::ClassAgnostic), ("class_aware", EvalMode::ClassAware)] {
            let want = &case[key];
            let got = average_precision(&dets, &gts, &EvalParams::coco(mode)).unwrap();
            for (field, v) in [("ap", got.ap), ("ap50", got.ap50), ("ap75", got.ap75)] {
                let w = want[field].as_f64().unwrap();
                assert!((v - w).abs() < 1e-9, "case {n} {key} {field}: {v} vs {w}");
            }
        }
    }
}

#[test]
fn detection_cap_applies_per_image() {
    let g = Mask::from_fn(2, 2, |_, _| true);
    let junk = Mask::from_fn(2, 2, |y, x| y == 0 && x == 0);
    let mut dets: Vec<Detection> = (0..3).map(|k| det(junk.clone(), 0.9 - 0.1 * k as f64)).collect();
    dets.push(det(g.clone(), 0.1));
    let params = EvalParams {
        max_detections: 3,
        ..EvalParams::coco(EvalMode::ClassAgnostic)
    };
    let r = average_precision(&[dets], &[vec![gt(g)]], &params).unwrap();
    assert_eq!(r.ap, 0.0);
}
