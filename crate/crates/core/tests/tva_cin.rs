mod common;

use camoseg::cin::{instance_normalize, score_and_select, Cin, CinConfig, NORM_EPS};
use camoseg::maskgen::InstancePredictions;
use camoseg::nn::{tensor_from, to_f64_vec, ParamStore};
use camoseg::tva::{filter_attention, mask_pool, mask_pool_vec, TextualVisualRepresentation, Tva};
use candle_core::{DType, Tensor};
use common::{rng, uniform_vec};
use rand::Rng;

fn t(v: Vec<f64>, s: &[usize]) -> Tensor {
    tensor_from(v, s, DType::F64).unwrap()
}

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    to_f64_vec(store.vars()[name].as_tensor()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Random aggregation inputs: `(embeddings (1,N,D), text (C,D), features (1,Ct,h,w))`.
fn tva_inputs(r: &mut impl Rng, n: usize, c: usize, d: usize, ct: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        uniform_vec(r, n * d, -1.0, 1.0),
        uniform_vec(r, c * d, -1.0, 1.0),
        uniform_vec(r, ct * h * w, -1.0, 1.0),
    )
}

#[test]
fn tva_matches_straight_line_oracle() {
    let mut r = rng(61);
    let (n, c, d, ct, h, w) = (5, 4, 6, 3, 4, 5);
    let mut store = ParamStore::new(7, DType::F64);
    let tva = Tva::new(&mut store, d, ct).unwrap();
    let (z, tx, f) = tva_inputs(&mut r, n, c, d, ct, h, w);
    let out = tva
        .aggregate(&t(z.clone(), &[1, n, d]), &t(tx.clone(), &[c, d]), &t(f.clone(), &[1, ct, h, w]))
        .unwrap();
    let wp = param(&store, "tva.proj.weight");
    let bp = param(&store, "tva.proj.bias");
    let got_w = to_f64_vec(&out.weights).unwrap();
    let got_raw = to_f64_vec(&out.attention_raw).unwrap();
    let got_f = to_f64_vec(&out.attention_filtered).unwrap();
    let p = h * w;
    for i in 0..n {
        let scores: Vec<f64> = (0..c)
            .map(|k| (0..d).map(|j| z[i * d + j] * tx[k * d + j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let zsum: f64 = e.iter().sum();
        let wts: Vec<f64> = e.iter().map(|v| v / zsum).collect();
        for k in 0..c {
            assert!((got_w[i * c + k] - wts[k]).abs() < 1e-9);
        }
        let u: Vec<f64> = (0..d).map(|j| (0..c).map(|k| wts[k] * tx[k * d + j]).sum()).collect();
        let key: Vec<f64> = (0..ct).map(|o| bp[o] + (0..d).map(|j| wp[o * d + j] * u[j]).sum::<f64>()).collect();
        let raw: Vec<f64> = (0..p).map(|q| (0..ct).map(|o| key[o] * f[o * p + q]).sum()).collect();
        let mean = raw.iter().sum::<f64>() / p as f64;
        for q in 0..p {
            assert!((got_raw[i * p + q] - raw[q]).abs() < 1e-9);
            let filt = if raw[q] - mean > 0.0 { raw[q] - mean } else { 0.0 };
            assert!((got_f[i * p + q] - filt).abs() < 1e-9);
        }
    }
}

#[test]
fn single_category_weight_is_one() {
    let mut r = rng(62);
    let mut store = ParamStore::new(1, DType::F64);
    let tva = Tva::new(&mut store, 4, 2).unwrap();
    let (z, tx, f) = tva_inputs(&mut r, 3, 1, 4, 2, 2, 2);
    let text = t(tx, &[1, 4]);
    let out = tva.aggregate(&t(z, &[1, 3, 4]), &text, &t(f.clone(), &[1, 2, 2, 2])).unwrap();
    assert!(to_f64_vec(&out.weights).unwrap().iter().all(|&v| v == 1.0));
    let key = tva.proj.forward(&text).unwrap();
    let expect = to_f64_vec(&key.matmul(&t(f, &[2, 4])).unwrap()).unwrap();
    let raw = to_f64_vec(&out.attention_raw).unwrap();
    for i in 0..3 {
        for q in 0..4 {
            assert!((raw[i * 4 + q] - expect[q]).abs() < 1e-12);
        }
    }
}

#[test]
fn filtering_constant_map_gives_zero() {
    let raw = t(vec![-2.5; 8], &[1, 1, 8]);
    assert!(to_f64_vec(&filter_attention(&raw).unwrap()).unwrap().iter().all(|&v| v == 0.0));
    // Values whose naive mean rounds away from the value itself.
    let mut r = rng(64);
    for _ in 0..500 {
        let p = r.random_range(2..80);
        let raw = t(vec![r.random_range(-5.0..5.0); 3 * p], &[1, 3, p]);
        assert!(to_f64_vec(&filter_attention(&raw).unwrap()).unwrap().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mask_pool_against_loop() {
    let mut r = rng(63);
    let (p, c) = (49, 4);
    let feats = uniform_vec(&mut r, p * c, -3.0, 3.0);
    let mask: Vec<bool> = (0..p).map(|_| r.random_bool(0.4)).collect();
    let m: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
    let got = to_f64_vec(&mask_pool(&t(feats.clone(), &[1, p, c]), &t(m, &[1, 1, p])).unwrap()).unwrap();
    let expect = mask_pool_vec(&feats, c, &mask).unwrap();
    for k in 0..c {
        assert!((got[k] - expect[k]).abs() < 1e-12);
    }
    let all = to_f64_vec(&mask_pool(&t(feats.clone(), &[1, p, c]), &t(vec![1.0; p], &[1, 1, p])).unwrap()).unwrap();
    for k in 0..c {
        let mean = (0..p).map(|q| feats[q * c + k]).sum::<f64>() / p as f64;
        assert!((all[k] - mean).abs() < 1e-12);
    }
}

struct CinCase {
    store: ParamStore,
    cin: Cin,
    tvr: TextualVisualRepresentation,
    coarse: Tensor,
    a_hat: Vec<f64>,
    feats: Vec<f64>,
    coarse_v: Vec<f64>,
    n: usize,
    ct: usize,
    h: usize,
    w: usize,
}

fn cin_case(seed: u64, randomise_residual: bool) -> CinCase {
    let mut r = rng(seed);
    let (n, c, d, ct, h, w) = (4, 3, 5, 3, 4, 4);
    let mut store = ParamStore::new(seed, DType::F64);
    let tva = Tva::new(&mut store, d, ct).unwrap();
    let cin = Cin::new(&mut store, ct, &CinConfig::default(), false).unwrap();
    if randomise_residual {
        let c_h = cin.hidden_dim();
        store.set("cin.residual.weight", &t(uniform_vec(&mut r, c_h, -1.0, 1.0), &[1, c_h])).unwrap();
        store.set("cin.residual.bias", &t(vec![0.3], &[1])).unwrap();
    }
    let (z, tx, f) = tva_inputs(&mut r, n, c, d, ct, h, w);
    let tvr = tva.aggregate(&t(z, &[1, n, d]), &t(tx, &[c, d]), &t(f.clone(), &[1, ct, h, w])).unwrap();
    let mut coarse_v = uniform_vec(&mut r, n * 4 * h * w, -1.0, 1.0);
    // One instance with an empty coarse mask.
    coarse_v[..4 * h * w].iter_mut().for_each(|v| *v = -1.0);
    let coarse = t(coarse_v.clone(), &[1, n, 2 * h, 2 * w]);
    let a_hat = to_f64_vec(&tvr.attention_filtered).unwrap();
    CinCase {
        store,
        cin,
        tvr,
        coarse,
        a_hat,
        feats: f,
        coarse_v,
        n,
        ct,
        h,
        w,
    }
}

fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: usize, x: usize, oh: usize, ow: usize) -> f64 {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let (y0, y1, fy) = coord(y, h, oh);
    let (x0, x1, fx) = coord(x, w, ow);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

#[test]
fn cin_matches_straight_line_oracle() {
    for seed in 0..5 {
        let case = cin_case(100 + seed, true);
        let out = case.cin.forward(&case.tvr, &case.coarse).unwrap();
        let (n, ct, h, w) = (case.n, case.ct, case.h, case.w);
        let p = h * w;
        let s = &case.store;
        let (wh, bh) = (param(s, "cin.proj.weight"), param(s, "cin.proj.bias"));
        let (wa, ba) = (param(s, "cin.affine_a.weight"), param(s, "cin.affine_a.bias"));
        let (wb, bb) = (param(s, "cin.affine_b.weight"), param(s, "cin.affine_b.bias"));
        let (wr, br) = (param(s, "cin.residual.weight"), param(s, "cin.residual.bias"));
        let (wc, bc) = (param(s, "cin.confidence.weight"), param(s, "cin.confidence.bias"));
        let c_h = bh.len();
        let gamma = to_f64_vec(&out.gamma).unwrap();
        let beta = to_f64_vec(&out.beta).unwrap();
        let conf = to_f64_vec(&out.confidence).unwrap();
        let residual = to_f64_vec(&out.residual).unwrap();
        let fin = to_f64_vec(&out.final_logits).unwrap();
        for i in 0..n {
            // (1) coarse mask at the attention grid.
            let cplane = &case.coarse_v[i * 4 * p..(i + 1) * 4 * p];
            let mask: Vec<bool> = (0..p)
                .map(|q| {
                    let (y, x) = (q / w, q % w);
                    let avg = (cplane[(2 * y) * 2 * w + 2 * x]
                        + cplane[(2 * y) * 2 * w + 2 * x + 1]
                        + cplane[(2 * y + 1) * 2 * w + 2 * x]
                        + cplane[(2 * y + 1) * 2 * w + 2 * x + 1])
                        / 4.0;
                    avg > 0.0
                })
                .collect();
            // (2) projected per-instance map.
            let y: Vec<Vec<f64>> = (0..p)
                .map(|q| {
                    (0..c_h)
                        .map(|k| bh[k] + (0..ct).map(|c| wh[k * ct + c] * case.a_hat[i * p + q] * case.feats[c * p + q]).sum::<f64>())
                        .collect()
                })
                .collect();
            // (3) pooled instance vector.
            let area = mask.iter().filter(|&&m| m).count();
            let v: Vec<f64> = (0..c_h)
                .map(|k| {
                    if area == 0 {
                        0.0
                    } else {
                        (0..p).filter(|&q| mask[q]).map(|q| y[q][k]).sum::<f64>() / area as f64
                    }
                })
                .collect();
            // (4) modulation parameters.
            let g: Vec<f64> = (0..c_h).map(|k| ba[k] + (0..c_h).map(|j| wa[k * c_h + j] * v[j]).sum::<f64>()).collect();
            let b: Vec<f64> = (0..c_h).map(|k| bb[k] + (0..c_h).map(|j| wb[k * c_h + j] * v[j]).sum::<f64>()).collect();
            for k in 0..c_h {
                assert!((gamma[i * c_h + k] - g[k]).abs() < 1e-9);
                assert!((beta[i * c_h + k] - b[k]).abs() < 1e-9);
            }
            // (5) normalised, modulated map through the residual head.
            let mut r = vec![br[0]; p];
            for k in 0..c_h {
                let mean = (0..p).map(|q| y[q][k]).sum::<f64>() / p as f64;
                let var = (0..p).map(|q| (y[q][k] - mean).powi(2)).sum::<f64>() / p as f64;
                for q in 0..p {
                    r[q] += wr[k] * (g[k] * (y[q][k] - mean) / (var + NORM_EPS).sqrt() + b[k]);
                }
            }
            for q in 0..p {
                assert!((residual[i * p + q] - r[q]).abs() < 1e-8, "seed {seed} i {i} q {q}");
            }
            // (6) confidence and refined logits.
            let cl = bc[0] + (0..c_h).map(|k| wc[k] * v[k]).sum::<f64>();
            assert!((conf[i] - sigmoid(cl)).abs() < 1e-12);
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    let expect = cplane[yy * 2 * w + xx] + bilinear_sample(&r, h, w, yy, xx, 2 * h, 2 * w);
                    assert!((fin[i * 4 * p + yy * 2 * w + xx] - expect).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn factorised_and_dense_routes_agree() {
    for seed in 0..10 {
        let case = cin_case(200 + seed, true);
        let a = case.cin.forward(&case.tvr, &case.coarse).unwrap();
        let b = case.cin.forward_dense(&case.tvr, &case.coarse).unwrap();
        for (x, y) in [
            (&a.final_logits, &b.final_logits),
            (&a.gamma, &b.gamma),
            (&a.beta, &b.beta),
            (&a.confidence, &b.confidence),
            (&a.residual, &b.residual),
        ] {
            let (x, y) = (to_f64_vec(x).unwrap(), to_f64_vec(y).unwrap());
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() < 1e-9 * (1.0 + q.abs()), "seed {seed}: {p} vs {q}");
            }
        }
    }
}

#[test]
fn warm_start_passes_coarse_through() {
    let case = cin_case(300, false);
    let out = case.cin.forward(&case.tvr, &case.coarse).unwrap();
    let a = to_f64_vec(&out.final_logits).unwrap();
    assert!(a.iter().zip(&case.coarse_v).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn identity_modulation_and_zero_residual() {
    let case = cin_case(301, false);
    let c_h = case.cin.hidden_dim();
    for name in ["cin.affine_a.weight", "cin.affine_b.weight"] {
        case.store.set(name, &t(vec![0.0; c_h * c_h], &[c_h, c_h])).unwrap();
    }
    case.store.set("cin.affine_a.bias", &t(vec![1.0; c_h], &[c_h])).unwrap();
    let out = case.cin.forward_dense(&case.tvr, &case.coarse).unwrap();
    assert!(to_f64_vec(&out.gamma).unwrap().iter().all(|&v| v == 1.0));
    assert!(to_f64_vec(&out.beta).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(to_f64_vec(&out.final_logits).unwrap(), case.coarse_v);
}

#[test]
fn normalisation_statistics() {
    let mut r = rng(64);
    for _ in 0..50 {
        let scale = r.random_range(0.5..5.0);
        let x: Vec<f64> = uniform_vec(&mut r, 3 * 40, -2.0, 2.0).iter().map(|v| v * scale).collect();
        let y = to_f64_vec(&instance_normalize(&t(x, &[3, 40]), NORM_EPS).unwrap()).unwrap();
        for row in y.chunks(40) {
            let mean = row.iter().sum::<f64>() / 40.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
    let flat = to_f64_vec(&instance_normalize(&t(vec![0.5; 8], &[1, 8]), NORM_EPS).unwrap()).unwrap();
    assert!(flat.iter().all(|&v| v == 0.0));
}

fn preds(conf: Vec<f64>) -> InstancePredictions {
    let n = conf.len();
    InstancePredictions {
        height: 2,
        width: 2,
        logit_height: 1,
        logit_width: 1,
        mask_logits: vec![vec![1.0]; n],
        embeddings: vec![vec![1.0]; n],
        confidences: conf,
    }
}

#[test]
fn selection_rules() {
    let kept: Vec<usize> = score_and_select(&preds(vec![0.9, 0.4, 0.9]), 0.5).unwrap().iter().map(|s| s.index).collect();
    assert_eq!(kept, vec![0, 2]);
    assert_eq!(score_and_select(&preds(vec![0.1, 0.0, 0.7]), 0.0).unwrap().len(), 3);
    let top: Vec<usize> = score_and_select(&preds(vec![1.0, 0.99, 1.0]), 1.0).unwrap().iter().map(|s| s.index).collect();
    assert_eq!(top, vec![0, 2]);
    assert!(score_and_select(&preds(vec![0.5]), 1.0 + 1e-9).is_err());
    assert_eq!(score_and_select(&preds(vec![0.6]), 0.5).unwrap()[0].mask.area(), 4);
}
