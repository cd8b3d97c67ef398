mod common;

use common::*;
use po2quant::fpsim::{first_mismatch, int_forward, shift_round, QuantizedLayer};
use po2quant::quant::{Po2Scale, QuantConfig};
use po2quant::IntTensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_layer(r: &mut ChaCha8Rng) -> (QuantizedLayer, IntTensor) {
    let out = r.random_range(1..=64);
    let inp = r.random_range(1..=64);
    let wcfg = QuantConfig::signed(r.random_range(2..=8)).unwrap();
    let icfg = QuantConfig::new(r.random_range(2..=8), r.random::<bool>()).unwrap();
    let ocfg = QuantConfig::new(r.random_range(2..=8), r.random::<bool>()).unwrap();
    let we = r.random_range(-8..=4);
    let ie = r.random_range(-8..=4);
    let oe = r.random_range(-8..=4);
    let codes = |n: usize, c: &QuantConfig, r: &mut ChaCha8Rng| -> Vec<i64> {
        (0..n).map(|_| r.random_range(c.q_min()..=c.q_max())).collect()
    };
    let w = codes(out * inp, &wcfg, r);
    let b: Vec<i64> = (0..out).map(|_| r.random_range(-127..=127)).collect();
    let x = codes(inp, &icfg, r);
    let layer = QuantizedLayer::new(
        IntTensor::new(w, vec![out, inp]).unwrap(),
        Po2Scale::new(we).unwrap(),
        wcfg,
        IntTensor::from_vec(b),
        Po2Scale::new(we + ie).unwrap(),
        Po2Scale::new(ie).unwrap(),
        icfg,
        Po2Scale::new(oe).unwrap(),
        ocfg,
    )
    .unwrap();
    (layer, IntTensor::from_vec(x))
}

#[test]
fn integer_path_is_bit_exact() {
    let mut r = rng(2024);
    for case in 0..10_000 {
        let (layer, x) = random_layer(&mut r);
        assert_eq!(first_mismatch(&layer, &x).unwrap(), None, "case {case}");
    }
}

/// Independent evaluation of the integer layer from dequantized reals.
#[test]
fn integer_path_matches_hand_reference() {
    let mut r = rng(7);
    for _ in 0..500 {
        let (layer, x) = random_layer(&mut r);
        let got = int_forward(&layer, &x).unwrap();
        let inp = layer.in_features();
        let (lo, hi) = layer.output_cfg().range();
        for (o, &g) in got.data().iter().enumerate() {
            let acc: i64 = (0..inp)
                .map(|i| layer.weight_codes().data()[o * inp + i] * x.data()[i])
                .sum::<i64>()
                + layer.bias_codes().data()[o];
            let real = acc as f64 * 2f64.powi(layer.shift());
            assert_eq!(g, (round_ref(real) as i64).clamp(lo, hi));
        }
    }
}

#[test]
fn shift_equals_power_of_two_scaling() {
    for k in -12i32..=12 {
        let factor = 2f64.powi(k);
        for acc in -(1i64 << 20)..=(1i64 << 20) {
            let expected = round_ref(acc as f64 * factor) as i64;
            assert_eq!(shift_round(acc, k).unwrap(), expected, "acc {acc} k {k}");
        }
    }
}

#[test]
fn oversized_layer_is_rejected() {
    let cfg = QuantConfig::signed(32).unwrap();
    let big = cfg.q_max();
    let n = 4;
    let res = QuantizedLayer::new(
        IntTensor::new(vec![big; n], vec![1, n]).unwrap(),
        Po2Scale::unit(),
        cfg,
        IntTensor::from_vec(vec![0]),
        Po2Scale::unit(),
        Po2Scale::unit(),
        cfg,
        Po2Scale::unit(),
        cfg,
    );
    assert!(res.is_err());
}
