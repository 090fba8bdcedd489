mod common;

use camoseg::backbone::Scale;
use camoseg::maskgen::{
    layer_scale, mask_logits, sine_position_encoding, MaskgenConfig, PixelDecoder, PixelDecoderOutput, TransformerDecoder,
};
use camoseg::nn::{tensor_from, to_f64_vec, ParamStore};
use candle_core::{DType, Tensor};
use common::{rng, uniform_vec};
use rand::Rng;

fn t(v: Vec<f64>, s: &[usize]) -> Tensor {
    tensor_from(v, s, DType::F64).unwrap()
}

fn cfg(n: usize, layers: usize) -> MaskgenConfig {
    MaskgenConfig {
        num_queries: n,
        layers,
        heads: 1,
        hidden_dim: 8,
        embed_dim: 6,
        ffn_dim: 12,
    }
}

/// Overwrites every parameter with seeded uniform values in `[-s, s]`.
fn randomise(store: &ParamStore, r: &mut impl Rng, s: f64) {
    for (name, var) in store.vars() {
        let dims = var.as_tensor().dims().to_vec();
        let n = dims.iter().product();
        store.set(name, &t(uniform_vec(r, n, -s, s), &dims)).unwrap();
    }
}

fn pixel_output(r: &mut impl Rng, d: usize, e: usize, side: usize, zero_pixels: bool) -> PixelDecoderOutput {
    let mut map = |s: usize| t(uniform_vec(r, d * s * s, -1.0, 1.0), &[1, d, s, s]);
    let intermediate = [map(side / 32), map(side / 16), map(side / 8)];
    let n = e * (side / 4) * (side / 4);
    let pp = if zero_pixels { vec![0.0; n] } else { uniform_vec(r, n, -1.0, 1.0) };
    PixelDecoderOutput {
        intermediate,
        per_pixel: t(pp, &[1, e, side / 4, side / 4]),
    }
}

#[test]
fn pixel_decoder_scale_arithmetic() {
    let mut store = ParamStore::new(3, DType::F64);
    let pd = PixelDecoder::new(&mut store, 5, &cfg(4, 1), 32).unwrap();
    let fused = Tensor::zeros((1, 5, 16, 16), DType::F64, &candle_core::Device::Cpu).unwrap();
    let out = pd.forward(&fused).unwrap();
    let sides: Vec<usize> = out.intermediate.iter().map(|m| m.dims()[2]).collect();
    assert_eq!(sides, vec![16, 32, 64]);
    assert_eq!(out.per_pixel.dims(), &[1, 6, 128, 128]);
}

#[test]
fn zero_input_gives_bias_only_outputs() {
    let mut store = ParamStore::new(4, DType::F64);
    let pd = PixelDecoder::new(&mut store, 3, &cfg(2, 1), 8).unwrap();
    for (name, var) in store.vars() {
        if name.ends_with("weight") {
            store.set(name, &var.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }
    let fused = Tensor::zeros((1, 3, 4, 4), DType::F64, &candle_core::Device::Cpu).unwrap();
    let out = to_f64_vec(&pd.forward(&fused).unwrap().per_pixel).unwrap();
    let bias = to_f64_vec(store.vars()["pixel.out.bias"].as_tensor()).unwrap();
    for (k, chunk) in out.chunks(64).enumerate() {
        assert!(chunk.iter().all(|&v| v == bias[k]));
    }
}

#[test]
fn per_pixel_golden_values() {
    let mut r = rng(91);
    let mut store = ParamStore::new(91, DType::F64);
    let pd = PixelDecoder::new(&mut store, 4, &cfg(2, 1), 8).unwrap();
    let fused = t(uniform_vec(&mut r, 4 * 8 * 8, -1.0, 1.0), &[1, 4, 8, 8]);
    let out = to_f64_vec(&pd.forward(&fused).unwrap().per_pixel).unwrap();
    assert_eq!(out.len(), 6 * 16 * 16);
    let sum: f64 = out.iter().sum();
    let golden = [GOLDEN_FIRST, GOLDEN_MID, GOLDEN_LAST, GOLDEN_SUM];
    let got = [out[0], out[out.len() / 2], out[out.len() - 1], sum];
    for (g, w) in got.iter().zip(golden) {
        assert!((g - w).abs() < 1e-9, "{got:?}");
    }
}

// Pinned from the first seeded run.
const GOLDEN_FIRST: f64 = -0.03694683526453657;
const GOLDEN_MID: f64 = 0.05150077924683627;
const GOLDEN_LAST: f64 = -0.09967195059419756;
const GOLDEN_SUM: f64 = -38.70526409235778;

#[test]
fn layers_rotate_through_scales() {
    let scales: Vec<Scale> = (0..6).map(layer_scale).collect();
    use Scale::*;
    assert_eq!(scales, vec![ThirtySecond, Sixteenth, Eighth, ThirtySecond, Sixteenth, Eighth]);
    let mut r = rng(92);
    let mut store = ParamStore::new(92, DType::F64);
    let dec = TransformerDecoder::new(&mut store, &cfg(3, 6)).unwrap();
    let out = dec.decode(&pixel_output(&mut r, 8, 6, 64, false)).unwrap();
    assert_eq!(out.layer_scales, scales);
    assert_eq!(out.mask_logits.dims(), &[1, 3, 16, 16]);
    assert_eq!(out.embeddings.dims(), &[1, 3, 6]);
}

#[test]
fn orthogonal_and_delta_logits() {
    // Pixel embeddings along e0, query along e1: all logits zero.
    let mut pp = vec![0.0; 3 * 4];
    for p in 0..4 {
        pp[p] = 1.0;
    }
    let pixels = t(pp, &[1, 3, 2, 2]);
    let zero = to_f64_vec(&mask_logits(&t(vec![0.0, 1.0, 0.0], &[1, 1, 3]), &pixels).unwrap()).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
    // Unit pixel embeddings e0 at pixel 2, e1 elsewhere; query e0.
    let mut pp = vec![0.0; 3 * 4];
    for p in 0..4 {
        pp[if p == 2 { p } else { 4 + p }] = 1.0;
    }
    let delta = to_f64_vec(&mask_logits(&t(vec![1.0, 0.0, 0.0], &[1, 1, 3]), &t(pp, &[1, 3, 2, 2])).unwrap()).unwrap();
    assert_eq!(delta, vec![0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn queries_are_permutation_equivariant() {
    let mut r = rng(93);
    let mut store = ParamStore::new(93, DType::F64);
    let dec = TransformerDecoder::new(&mut store, &cfg(5, 3)).unwrap();
    let pdo = pixel_output(&mut r, 8, 6, 64, false);
    let q = uniform_vec(&mut r, 5 * 8, -1.0, 1.0);
    let perm = [3, 0, 4, 1, 2];
    let qp: Vec<f64> = perm.iter().flat_map(|&i| q[i * 8..(i + 1) * 8].to_vec()).collect();
    let a = dec.decode_from(&t(q, &[1, 5, 8]), &pdo).unwrap();
    let b = dec.decode_from(&t(qp, &[1, 5, 8]), &pdo).unwrap();
    let (ae, be) = (to_f64_vec(&a.embeddings).unwrap(), to_f64_vec(&b.embeddings).unwrap());
    let (al, bl) = (to_f64_vec(&a.mask_logits).unwrap(), to_f64_vec(&b.mask_logits).unwrap());
    for (j, &i) in perm.iter().enumerate() {
        for k in 0..6 {
            assert!((be[j * 6 + k] - ae[i * 6 + k]).abs() < 1e-12);
        }
        for p in 0..256 {
            assert!((bl[j * 256 + p] - al[i * 256 + p]).abs() < 1e-10);
        }
    }
}

fn erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = to_f64_vec(store.vars()[&format!("{name}.weight")].as_tensor()).unwrap();
    let b = to_f64_vec(store.vars()[&format!("{name}.bias")].as_tensor()).unwrap();
    (0..b.len()).map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>()).collect()
}

fn layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let g = to_f64_vec(store.vars()[&format!("{name}.gain")].as_tensor()).unwrap();
    let s = to_f64_vec(store.vars()[&format!("{name}.shift")].as_tensor()).unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + s[i]).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One query, one layer, no foreground in the initial mask: plain
/// cross-attention over the coarsest map, then self-attention and the FFN.
#[test]
fn single_layer_matches_scalar_oracle() {
    let mut r = rng(94);
    let mut store = ParamStore::new(94, DType::F64);
    let dec = TransformerDecoder::new(&mut store, &cfg(1, 1)).unwrap();
    randomise(&store, &mut r, 0.4);
    let d = 8;
    let pdo = pixel_output(&mut r, d, 6, 64, true);
    let out = dec.decode(&pdo).unwrap();
    let q0 = to_f64_vec(store.vars()["decoder.query_feat"].as_tensor()).unwrap();
    let mem = to_f64_vec(&pdo.intermediate[0]).unwrap();
    let p = 4;
    let pos = to_f64_vec(&sine_position_encoding(2, 2, d, DType::F64).unwrap()).unwrap();
    let tokens: Vec<Vec<f64>> = (0..p).map(|i| (0..d).map(|c| mem[c * p + i]).collect()).collect();
    let l = "decoder.layer0";
    let query = linear(&store, &format!("{l}.cross.q"), &q0);
    let keys: Vec<Vec<f64>> = (0..p)
        .map(|i| linear(&store, &format!("{l}.cross.k"), &add(&tokens[i], &pos[i * d..(i + 1) * d])))
        .collect();
    let vals: Vec<Vec<f64>> = (0..p).map(|i| linear(&store, &format!("{l}.cross.v"), &tokens[i])).collect();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
    let mut ctx = vec![0.0; d];
    for i in 0..p {
        let a = (scores[i] - mx).exp() / z;
        for c in 0..d {
            ctx[c] += a * vals[i][c];
        }
    }
    let x1 = layer_norm(&store, &format!("{l}.norm_cross"), &add(&q0, &linear(&store, &format!("{l}.cross.o"), &ctx)));
    let sa = linear(&store, &format!("{l}.self.o"), &linear(&store, &format!("{l}.self.v"), &x1));
    let x2 = layer_norm(&store, &format!("{l}.norm_self"), &add(&x1, &sa));
    let hidden: Vec<f64> = linear(&store, &format!("{l}.ffn_in"), &x2)
        .iter()
        .map(|&v| {
            assert!(v.abs() < 4.0);
            0.5 * v * (1.0 + erf(v / std::f64::consts::SQRT_2))
        })
        .collect();
    let x3 = layer_norm(&store, &format!("{l}.norm_ffn"), &add(&x2, &linear(&store, &format!("{l}.ffn_out"), &hidden)));
    let emb = linear(&store, "decoder.mask_embed", &layer_norm(&store, "decoder.head_norm", &x3));
    let got_q = to_f64_vec(&out.queries).unwrap();
    let got_e = to_f64_vec(&out.embeddings).unwrap();
    for c in 0..d {
        assert!((got_q[c] - x3[c]).abs() < 1e-9, "{c}: {} vs {}", got_q[c], x3[c]);
    }
    for c in 0..6 {
        assert!((got_e[c] - emb[c]).abs() < 1e-9);
    }
    assert!(to_f64_vec(&out.mask_logits).unwrap().iter().all(|&v| v == 0.0));
}
