//! The closed-form swap predictors agree with direct substitution followed
//! by an eval-mode forward pass.

use std::time::Instant;

use prrm::analytics::predict_bn_swap;
use prrm::ops::{bn_forward_eval, BnState};
use prrm::{ParamKind, Rng, Tensor};

const TRIPLES: u64 = 1000;
const TOL: f32 = 1e-5;

fn vec_in(rng: &mut Rng, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(&[c], |_| rng.uniform(lo, hi) as f32)
}

/// Weights bounded away from zero, either sign.
fn weights(rng: &mut Rng, c: usize) -> Tensor {
    Tensor::from_fn(&[c], |_| {
        let v = rng.uniform(0.2, 2.0) as f32;
        if rng.bernoulli(0.5) {
            v
        } else {
            -v
        }
    })
}

fn random_state(rng: &mut Rng, c: usize) -> BnState {
    let mut s = BnState::new(c);
    s.gamma = weights(rng, c);
    s.beta = vec_in(rng, c, -1.0, 1.0);
    s.run_mean = vec_in(rng, c, -1.0, 1.0);
    s.run_var = vec_in(rng, c, 0.2, 2.0);
    s
}

fn substitute(target: &BnState, source: &BnState, kind: ParamKind) -> BnState {
    let mut s = target.clone();
    match kind {
        ParamKind::BnRM => s.run_mean = source.run_mean.clone(),
        ParamKind::BnRV => s.run_var = source.run_var.clone(),
        ParamKind::BnRW => s.gamma = source.gamma.clone(),
        ParamKind::BnRB => s.beta = source.beta.clone(),
        _ => unreachable!(),
    }
    s
}

#[test]
fn predictors_match_substitution() {
    let start = Instant::now();
    let mut worst = 0.0f32;
    for t in 0..TRIPLES {
        let mut rng = Rng::derive(77, t);
        let c = 1 + rng.below(6) as usize;
        let (n, h, w) = (1 + rng.below(3) as usize, 1 + rng.below(5) as usize, 1 + rng.below(5) as usize);
        let x = Tensor::from_fn(&[n, c, h, w], |_| rng.uniform(-2.0, 2.0) as f32);
        let target = random_state(&mut rng, c);
        let source = random_state(&mut rng, c);
        for kind in [ParamKind::BnRM, ParamKind::BnRV, ParamKind::BnRW, ParamKind::BnRB] {
            let predicted = predict_bn_swap(&x, &target, &source, kind).unwrap();
            let direct = bn_forward_eval(&x, &substitute(&target, &source, kind)).unwrap();
            let err = predicted.max_abs_diff(&direct);
            worst = worst.max(err);
            assert!(err <= TOL, "triple {t} {kind}: {err:e}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    println!("worst abs diff {worst:e} in {secs:.2}s");
    assert!(secs < 30.0);
}

#[test]
fn zero_weight_channel_uses_source_weight() {
    let mut rng = Rng::new(3);
    let x = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut target = random_state(&mut rng, 2);
    target.gamma = Tensor::new(&[2], vec![0.0, 1.5]).unwrap();
    let source = random_state(&mut rng, 2);
    let predicted = predict_bn_swap(&x, &target, &source, ParamKind::BnRW).unwrap();
    let direct = bn_forward_eval(&x, &substitute(&target, &source, ParamKind::BnRW)).unwrap();
    assert!(predicted.max_abs_diff(&direct) <= TOL);
}

#[test]
fn rejects_conv_kinds_and_channel_mismatch() {
    let x = Tensor::zeros(&[1, 2, 2, 2]);
    let s = BnState::new(2);
    assert!(predict_bn_swap(&x, &s, &s, ParamKind::ConvW).is_err());
    assert!(predict_bn_swap(&x, &s, &BnState::new(3), ParamKind::BnRM).is_err());
}
