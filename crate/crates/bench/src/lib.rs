//! Seeded inputs shared by the benchmarks.

use camoseg::data::synth::{synth_samples, SynthConfig};
use camoseg::nn::named_rng;
use camoseg::{AnnotatedSample, Detection, Instance, Mask};
use rand::Rng;

/// `p × g` costs drawn uniformly from `[0, 1)`.
pub fn cost_matrix(p: usize, g: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = named_rng(seed, "bench-cost");
    (0..p).map(|_| (0..g).map(|_| rng.random::<f64>()).collect()).collect()
}

/// A random blocky mask; blocks of 8 pixels keep the runs long.
pub fn blocky_mask(h: usize, w: usize, seed: u64) -> Mask {
    let mut rng = named_rng(seed, "bench-mask");
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let cells: Vec<bool> = (0..bh * bw).map(|_| rng.random_bool(0.4)).collect();
    Mask::from_fn(h, w, |y, x| cells[(y / 8) * bw + x / 8])
}

pub fn synth(n: usize, seed: u64) -> Vec<AnnotatedSample> {
    synth_samples(&SynthConfig::default(), n, seed).expect("default synth config is valid")
}

/// Ground truth plus jittered detections (each ground-truth mask with one
/// row dropped, scored at random) and a few distractors per image.
pub fn eval_case(samples: &[AnnotatedSample], seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Instance>>) {
    let mut rng = named_rng(seed, "bench-eval");
    let mut dets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut d: Vec<Detection> = s
            .instances
            .iter()
            .map(|g| {
                let drop = rng.random_range(0..g.mask.height);
                Detection {
                    mask: Mask::from_fn(g.mask.height, g.mask.width, |y, x| y != drop && g.mask.get(y, x)),
                    score: rng.random(),
                    category: g.category_id,
                }
            })
            .collect();
        for k in 0..3 {
            let m = blocky_mask(s.image.height, s.image.width, (i * 3 + k) as u64);
            d.push(Detection {
                mask: m,
                score: rng.random::<f64>() * 0.5,
                category: k,
            });
        }
        dets.push(d);
    }
    let gts = samples.iter().map(|s| s.instances.clone()).collect();
    (dets, gts)
}
