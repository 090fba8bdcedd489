mod common;

use std::collections::BTreeMap;

use camoseg::backbone::{ChannelSpec, FeaturePyramid, Scale};
use camoseg::msff::{Msff, MsffConfig};
use camoseg::nn::{tensor_from, to_f64_vec, ParamStore};
use candle_core::{DType, Tensor};
use common::{rng, uniform_vec};

const SPEC: ChannelSpec = ChannelSpec {
    levels: [2, 3, 4],
    decoder: 3,
};

/// Raw values of a 64×64-input pyramid: levels at 8×8, 4×4, 2×2 and the decoder map at 8×8.
struct Raw {
    levels: Vec<Vec<f64>>,
    decoder: Vec<f64>,
}

fn pyramid(seed: u64) -> (Raw, FeaturePyramid) {
    let mut r = rng(seed);
    let sides = [8, 4, 2];
    let levels: Vec<Vec<f64>> = (0..3).map(|k| uniform_vec(&mut r, SPEC.levels[k] * sides[k] * sides[k], -2.0, 2.0)).collect();
    let decoder = uniform_vec(&mut r, SPEC.decoder * 64, -2.0, 2.0);
    let mut map = BTreeMap::new();
    for (k, s) in Scale::ALL.iter().enumerate() {
        let t = tensor_from(levels[k].clone(), &[1, SPEC.levels[k], sides[k], sides[k]], DType::F64).unwrap();
        map.insert(*s, t);
    }
    let p = FeaturePyramid {
        levels: map,
        decoder_final: tensor_from(decoder.clone(), &[1, SPEC.decoder, 8, 8], DType::F64).unwrap(),
    };
    (Raw { levels, decoder }, p)
}

fn msff(fusion_scale: usize) -> (ParamStore, Msff) {
    let mut store = ParamStore::new(5, DType::F64);
    let cfg = MsffConfig {
        fusion_scale,
        ..MsffConfig::default()
    };
    let m = Msff::new(&mut store, &SPEC, &cfg).unwrap();
    (store, m)
}

fn set(store: &ParamStore, name: &str, v: f64, shape: &[usize]) {
    let n = shape.iter().product();
    store.set(name, &tensor_from(vec![v; n], shape, DType::F64).unwrap()).unwrap();
}

fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    to_f64_vec(store.vars()[name].as_tensor()).unwrap()
}

/// Block average of a `(C, side, side)` map down to `(C, 2, 2)`.
fn pool_to_two(v: &[f64], c: usize, side: usize) -> Vec<f64> {
    let b = side / 2;
    let mut out = vec![0.0; c * 4];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                out[ch * 4 + (y / b) * 2 + x / b] += v[ch * side * side + y * side + x] / (b * b) as f64;
            }
        }
    }
    out
}

#[test]
fn matches_straight_line_oracle_at_coarsest_scale() {
    let (raw, p) = pyramid(71);
    let (store, m) = msff(32);
    let out = to_f64_vec(&m.fuse(&p).unwrap().features).unwrap();
    let c = SPEC.concat();
    // Concatenated levels at 2×2, channel-major.
    let mut x = pool_to_two(&raw.levels[0], 2, 8);
    x.extend(pool_to_two(&raw.levels[1], 3, 4));
    x.extend(raw.levels[2].iter().copied());
    let dpool = pool_to_two(&raw.decoder, SPEC.decoder, 8);
    let (wg, bg) = (param(&store, "msff.gate.weight"), param(&store, "msff.gate.bias"));
    let (wd, bd) = (param(&store, "msff.decoder_proj.weight"), param(&store, "msff.decoder_proj.bias"));
    for q in 0..4 {
        for o in 0..c {
            let g = bg[o] + (0..c).map(|i| wg[o * c + i] * x[i * 4 + q]).sum::<f64>();
            let g = 1.0 / (1.0 + (-g).exp());
            let d = bd[o] + (0..SPEC.decoder).map(|i| wd[o * SPEC.decoder + i] * dpool[i * 4 + q]).sum::<f64>();
            let expect = g * x[o * 4 + q] + d;
            assert!((out[o * 4 + q] - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn open_gate_passes_levels_through() {
    let (raw, p) = pyramid(72);
    let (store, m) = msff(8);
    let c = SPEC.concat();
    set(&store, "msff.gate.weight", 0.0, &[c, c]);
    set(&store, "msff.gate.bias", 40.0, &[c]);
    set(&store, "msff.decoder_proj.weight", 0.0, &[c, SPEC.decoder]);
    set(&store, "msff.decoder_proj.bias", 0.0, &[c]);
    let out = m.fuse(&p).unwrap().features;
    assert_eq!(out.dims(), &[1, c, 8, 8]);
    let out = to_f64_vec(&out).unwrap();
    assert_eq!(&out[..2 * 64], &raw.levels[0][..]);
}

#[test]
fn closed_gate_leaves_decoder_projection() {
    let (_, p) = pyramid(73);
    let (store, m) = msff(8);
    let c = SPEC.concat();
    set(&store, "msff.gate.weight", 0.0, &[c, c]);
    set(&store, "msff.gate.bias", -40.0, &[c]);
    let out = to_f64_vec(&m.fuse(&p).unwrap().features).unwrap();
    let d = to_f64_vec(&m.decoder_proj.forward_channels(&p.decoder_final).unwrap()).unwrap();
    assert_eq!(out, d);
}

#[test]
fn skip_variant_uses_decoder_only() {
    let (_, p) = pyramid(74);
    let (_store, mut m) = msff(16);
    m.skip = true;
    let out = m.fuse(&p).unwrap().features;
    assert_eq!(out.dims(), &[1, SPEC.concat(), 4, 4]);
}

#[test]
fn mismatched_channels_error() {
    let (_, mut p) = pyramid(75);
    let (_store, m) = msff(8);
    p.levels.insert(Scale::Eighth, Tensor::zeros((1, 5, 8, 8), DType::F64, &candle_core::Device::Cpu).unwrap());
    assert!(m.fuse(&p).is_err());
}
