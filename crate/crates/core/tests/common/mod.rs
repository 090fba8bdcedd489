//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use camoseg::data::{Instance, Mask};
use camoseg::eval::{Detection, EvalMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn permutations(items: &[usize], k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == k {
        out.push(prefix.clone());
        return;
    }
    for &x in items {
        if !prefix.contains(&x) {
            prefix.push(x);
            permutations(items, k, prefix, out);
            prefix.pop();
        }
    }
}

/// Minimum total over all injective matchings of size `min(P, G)`, summed
/// in row order.
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let k = rows.min(cols);
    if k == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    let mut perms = Vec::new();
    if rows <= cols {
        permutations(&(0..cols).collect::<Vec<_>>(), rows, &mut Vec::new(), &mut perms);
        for p in perms {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            best = best.min(total);
        }
    } else {
        permutations(&(0..rows).collect::<Vec<_>>(), cols, &mut Vec::new(), &mut perms);
        for p in perms {
            let mut pairs: Vec<(usize, usize)> = p.iter().enumerate().map(|(j, &i)| (i, j)).collect();
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            best = best.min(total);
        }
    }
    best
}

pub fn iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height {
        for x in 0..a.width {
            let (p, q) = (a.get(y, x), b.get(y, x));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn crowd_overlap(d: &Mask, crowd: &Mask) -> f64 {
    let (mut inter, mut area) = (0usize, 0usize);
    for y in 0..d.height {
        for x in 0..d.width {
            area += d.get(y, x) as usize;
            inter += (d.get(y, x) && crowd.get(y, x)) as usize;
        }
    }
    if area == 0 {
        0.0
    } else {
        inter as f64 / area as f64
    }
}

/// Outcome of one detection at one threshold.
#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching of one image's detections (already in score order).
fn match_image(dets: &[&Detection], gts: &[&Instance], t: f64) -> Vec<Outcome> {
    let t = t.min(1.0 - 1e-10);
    let mut gts: Vec<&Instance> = gts.to_vec();
    gts.sort_by_key(|g| g.iscrowd);
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in dets {
        let mut best: Option<usize> = None;
        let mut best_iou = t;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] && !gt.iscrowd {
                continue;
            }
            if let Some(b) = best {
                if !gts[b].iscrowd && gt.iscrowd {
                    break;
                }
            }
            let v = if gt.iscrowd { crowd_overlap(&d.mask, &gt.mask) } else { iou(&d.mask, &gt.mask) };
            if v < best_iou {
                continue;
            }
            best_iou = v;
            best = Some(g);
        }
        match best {
            Some(g) if gts[g].iscrowd => out.push(Outcome::Ignored),
            Some(g) => {
                taken[g] = true;
                out.push(Outcome::Tp);
            }
            None => out.push(Outcome::Fp),
        }
    }
    out
}

/// Interpolated precision at recall `r`: the best precision over every
/// prefix of the ranked list whose recall reaches `r`.
fn interpolated_ap(outcomes: &[Outcome], num_gt: usize) -> f64 {
    let ranked: Vec<Outcome> = outcomes.iter().copied().filter(|o| *o != Outcome::Ignored).collect();
    let mut prefixes = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for o in &ranked {
        if *o == Outcome::Tp {
            tp += 1;
        } else {
            fp += 1;
        }
        prefixes.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = if i == 100 { 1.0 } else { i as f64 * 0.01 };
        let best = prefixes
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

fn group_ap(dets: &[Vec<&Detection>], gts: &[Vec<&Instance>], t: f64, max_dets: usize) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|i| !i.iscrowd).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut scored: Vec<(f64, usize, usize, Outcome)> = Vec::new();
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let mut d: Vec<&Detection> = d.clone();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        d.truncate(max_dets);
        for (k, o) in match_image(&d, g, t).into_iter().enumerate() {
            scored.push((d[k].score, img, k, o));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let outcomes: Vec<Outcome> = scored.iter().map(|s| s.3).collect();
    Some(interpolated_ap(&outcomes, num_gt))
}

/// `(ap, ap50, ap75)` by direct enumeration of the ranked list at each threshold.
pub fn brute_force_ap(dets: &[Vec<Detection>], gts: &[Vec<Instance>], mode: EvalMode) -> Option<(f64, f64, f64)> {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let groups: Vec<Option<usize>> = match mode {
        EvalMode::ClassAgnostic => vec![None],
        EvalMode::ClassAware => {
            let mut cats: Vec<usize> = gts.iter().flatten().map(|g| g.category_id).collect();
            cats.extend(dets.iter().flatten().map(|d| d.category));
            cats.sort_unstable();
            cats.dedup();
            cats.into_iter().map(Some).collect()
        }
    };
    let mut per_t = vec![Vec::new(); thresholds.len()];
    for g in groups {
        let d: Vec<Vec<&Detection>> = dets
            .iter()
            .map(|v| v.iter().filter(|x| g.is_none_or(|c| x.category == c)).collect())
            .collect();
        let gt: Vec<Vec<&Instance>> = gts
            .iter()
            .map(|v| v.iter().filter(|x| g.is_none_or(|c| x.category_id == c)).collect())
            .collect();
        for (k, &t) in thresholds.iter().enumerate() {
            if let Some(ap) = group_ap(&d, &gt, t, 100) {
                per_t[k].push(ap);
            }
        }
    }
    if per_t[0].is_empty() {
        return None;
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let per: Vec<f64> = per_t.iter().map(mean).collect();
    Some((per.iter().sum::<f64>() / per.len() as f64, per[0], per[5]))
}

pub fn random_rect(rng: &mut impl Rng, h: usize, w: usize) -> Mask {
    let y0 = rng.random_range(0..h);
    let x0 = rng.random_range(0..w);
    let y1 = rng.random_range(y0 + 1..=h);
    let x1 = rng.random_range(x0 + 1..=w);
    Mask::from_fn(h, w, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
}

/// Micro-case with at most 4 images and 5 ground-truth instances per image.
pub fn random_ap_case(rng: &mut impl Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Instance>>) {
    let (h, w) = (8, 8);
    let images = rng.random_range(1..=4);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<Instance> = (0..rng.random_range(0..=5))
            .map(|_| Instance {
                mask: random_rect(rng, h, w),
                category_id: rng.random_range(0..2),
                iscrowd: rng.random_bool(0.1),
            })
            .collect();
        let d: Vec<Detection> = (0..rng.random_range(0..=5))
            .map(|_| {
                let mask = if !g.is_empty() && rng.random_bool(0.6) {
                    let base = &g[rng.random_range(0..g.len())].mask;
                    let jitter = random_rect(rng, h, w);
                    if rng.random_bool(0.5) {
                        base.clone()
                    } else {
                        Mask::from_fn(h, w, |y, x| base.get(y, x) || (jitter.get(y, x) && rng_free_bit(y, x)))
                    }
                } else {
                    random_rect(rng, h, w)
                };
                Detection {
                    mask,
                    score: rng.random::<f64>(),
                    category: rng.random_range(0..2),
                }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

fn rng_free_bit(y: usize, x: usize) -> bool {
    (y * 7 + x * 3) % 4 == 0
}

/// Central finite-difference gradient.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Plain-loop BCE with logits, averaged.
pub fn loop_bce(logits: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &g) in logits.iter().zip(gt) {
        let p = 1.0 / (1.0 + (-x).exp());
        s += -(g * p.ln() + (1.0 - g) * (1.0 - p).ln());
    }
    s / logits.len() as f64
}

/// Plain-loop dice loss over one flattened mask.
pub fn loop_dice(probs: &[f64], gt: &[f64], smooth: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&p, &g) in probs.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    1.0 - (2.0 * inter + smooth) / (sp + sg + smooth)
}

/// Plain-loop softmax cross-entropy of `emb · class / tau`.
pub fn loop_ce(emb: &[Vec<f64>], classes: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (z, &label) in emb.iter().zip(labels) {
        let logits: Vec<f64> = classes
            .iter()
            .map(|c| c.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z_sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        total += -(logits[label] - m - z_sum.ln());
    }
    total / emb.len() as f64
}
