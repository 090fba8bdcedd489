//! Mask IoU and COCO-style average precision with 101-point interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, Mask};
use crate::error::{Error, Result};

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x != 0 && y != 0) as usize;
        union += (x != 0 || y != 0) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Intersection over the detection's area, used against crowd regions.
fn crowd_overlap(dt: &Mask, crowd: &Mask) -> f64 {
    let area = dt.area();
    if area == 0 {
        return 0.0;
    }
    let inter = dt.data.iter().zip(&crowd.data).filter(|(&x, &y)| x != 0 && y != 0).count();
    inter as f64 / area as f64
}

/// A scored predicted instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: Mask,
    pub score: f64,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// All categories pooled.
    ClassAgnostic,
    /// Per-category AP averaged over categories with ground truth.
    ClassAware,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: usize,
    pub mode: EvalMode,
}

/// `0.50, 0.55, …, 0.95`, generated as `0.5 + i·(0.45/9)` with the last
/// value pinned to 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    let step = (0.95 - 0.5) / 9.0;
    let mut t: Vec<f64> = (0..10).map(|i| i as f64 * step + 0.5).collect();
    t[9] = 0.95;
    t
}

/// The 101 recall sample points `0.00, 0.01, …, 1.00`.
pub fn recall_grid() -> Vec<f64> {
    let step = 1.0 / 100.0;
    let mut r: Vec<f64> = (0..101).map(|i| i as f64 * step).collect();
    r[100] = 1.0;
    r
}

impl EvalParams {
    pub fn coco(mode: EvalMode) -> Self {
        Self {
            iou_thresholds: coco_iou_thresholds(),
            max_detections: 100,
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Keyed by the threshold with two decimals.
    pub per_threshold: BTreeMap<String, f64>,
    /// Keyed by category id; class-aware mode only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_category: Option<BTreeMap<String, f64>>,
}

impl EvalResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-(image, group) matching results at every threshold.
struct ImageEval {
    scores: Vec<f64>,
    /// `[threshold][detection]`: matched a non-crowd ground truth.
    matched: Vec<Vec<bool>>,
    /// `[threshold][detection]`: matched only a crowd region.
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn evaluate_image(dts: &[&Detection], gts: &[&Instance], thresholds: &[f64], max_dets: usize) -> Result<ImageEval> {
    let mut order: Vec<usize> = (0..dts.len()).collect();
    order.sort_by(|&a, &b| dts[b].score.total_cmp(&dts[a].score));
    order.truncate(max_dets);
    let dts: Vec<&Detection> = order.iter().map(|&i| dts[i]).collect();
    // Non-crowd ground truth first.
    let mut g_order: Vec<usize> = (0..gts.len()).collect();
    g_order.sort_by_key(|&g| gts[g].iscrowd);
    let gts: Vec<&Instance> = g_order.iter().map(|&g| gts[g]).collect();

    let mut ious = vec![vec![0.0; gts.len()]; dts.len()];
    for (d, dt) in dts.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            ious[d][g] = if gt.iscrowd {
                if (dt.mask.height, dt.mask.width) != (gt.mask.height, gt.mask.width) {
                    return Err(Error::shape("detection and crowd region sizes differ"));
                }
                crowd_overlap(&dt.mask, &gt.mask)
            } else {
                mask_iou(&dt.mask, &gt.mask)?
            };
        }
    }
    let mut matched = Vec::with_capacity(thresholds.len());
    let mut ignored = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut gt_taken = vec![false; gts.len()];
        let mut dm = vec![false; dts.len()];
        let mut di = vec![false; dts.len()];
        for d in 0..dts.len() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for g in 0..gts.len() {
                if gt_taken[g] && !gts[g].iscrowd {
                    continue;
                }
                if let Some(mm) = m {
                    if !gts[mm].iscrowd && gts[g].iscrowd {
                        break;
                    }
                }
                if ious[d][g] < best {
                    continue;
                }
                best = ious[d][g];
                m = Some(g);
            }
            if let Some(g) = m {
                gt_taken[g] = true;
                if gts[g].iscrowd {
                    di[d] = true;
                } else {
                    dm[d] = true;
                }
            }
        }
        matched.push(dm);
        ignored.push(di);
    }
    Ok(ImageEval {
        scores: dts.iter().map(|d| d.score).collect(),
        matched,
        ignored,
        num_gt: gts.iter().filter(|g| !g.iscrowd).count(),
    })
}

/// Interpolated precision at the 101 recall points, averaged.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut pr = Vec::with_capacity(tp.len());
    let mut rc = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &is_tp in tp {
        if is_tp {
            t += 1;
        } else {
            f += 1;
        }
        rc.push(t as f64 / num_gt as f64);
        pr.push(t as f64 / (t + f) as f64);
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let grid = recall_grid();
    let total: f64 = grid
        .iter()
        .map(|&r| {
            let idx = rc.partition_point(|&x| x < r);
            pr.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / grid.len() as f64
}

/// AP of one pooled group per threshold, or `None` without ground truth.
fn accumulate(evals: &[ImageEval], n_thr: usize) -> Option<Vec<f64>> {
    let num_gt: usize = evals.iter().map(|e| e.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    // Image order, then descending score, with a stable sort.
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (k, e) in evals.iter().enumerate() {
        entries.extend(e.scores.iter().enumerate().map(|(d, &s)| (s, k, d)));
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    Some(
        (0..n_thr)
            .map(|t| {
                let tp: Vec<bool> = entries
                    .iter()
                    .filter(|&&(_, k, d)| !evals[k].ignored[t][d])
                    .map(|&(_, k, d)| evals[k].matched[t][d])
                    .collect();
                interpolated_ap(&tp, num_gt)
            })
            .collect(),
    )
}

/// COCO-style mask AP over per-image detections and ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<Instance>], params: &EvalParams) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::shape(format!("{} prediction lists for {} images", dets.len(), gts.len())));
    }
    let n_thr = params.iou_thresholds.len();
    if n_thr == 0 {
        return Err(Error::config("at least one IoU threshold is required"));
    }
    let groups: Vec<Option<usize>> = match params.mode {
        EvalMode::ClassAgnostic => vec![None],
        EvalMode::ClassAware => {
            let mut cats: Vec<usize> = gts.iter().flatten().map(|g| g.category_id).collect();
            cats.extend(dets.iter().flatten().map(|d| d.category));
            cats.sort_unstable();
            cats.dedup();
            cats.into_iter().map(Some).collect()
        }
    };
    let mut per_group: Vec<(Option<usize>, Vec<f64>)> = Vec::new();
    for group in groups {
        let evals = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| {
                let d: Vec<&Detection> = d.iter().filter(|x| group.is_none_or(|c| x.category == c)).collect();
                let g: Vec<&Instance> = g.iter().filter(|x| group.is_none_or(|c| x.category_id == c)).collect();
                evaluate_image(&d, &g, &params.iou_thresholds, params.max_detections)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(aps) = accumulate(&evals, n_thr) {
            per_group.push((group, aps));
        }
    }
    if per_group.is_empty() {
        return Err(Error::UndefinedAp("no ground-truth instances in the dataset".into()));
    }
    let per_thr: Vec<f64> = (0..n_thr)
        .map(|t| per_group.iter().map(|(_, a)| a[t]).sum::<f64>() / per_group.len() as f64)
        .collect();
    let lookup = |target: f64| {
        params
            .iou_thresholds
            .iter()
            .position(|&t| (t - target).abs() < 1e-9)
            .map_or(f64::NAN, |i| per_thr[i])
    };
    let per_category = (params.mode == EvalMode::ClassAware).then(|| {
        per_group
            .iter()
            .map(|(c, a)| (c.unwrap_or(0).to_string(), a.iter().sum::<f64>() / a.len() as f64))
            .collect()
    });
    Ok(EvalResult {
        ap: per_thr.iter().sum::<f64>() / n_thr as f64,
        ap50: lookup(0.5),
        ap75: lookup(0.75),
        per_threshold: params
            .iou_thresholds
            .iter()
            .zip(&per_thr)
            .map(|(t, v)| (format!("{t:.2}"), *v))
            .collect(),
        per_category,
    })
}
