mod common;

use common::{check_params, random, rng};
use rand::Rng;
use strl::nn::NormCtx;
use strl::stae::{loss_ae, loss_gradient, loss_intensity, Stae, StaeConfig, StaePrediction};
use strl::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};

fn model(config: StaeConfig, seed: u64) -> (Stae, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let stae = Stae::new(&mut store, config, &mut rng(seed));
    (stae, store)
}

fn toy() -> StaeConfig {
    StaeConfig { k: 2, channels: [4, 4, 8] }
}

/// Textured square moving right by `speed` pixels per frame, values in [-1, 1].
fn moving_square(k: usize, size: usize, speed: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let frame = |t: usize| {
        Tensor::from_fn(&[1, 3, size, size], |i| {
            let x = i % size;
            let y = (i / size) % size;
            let x0 = 2 + speed * t;
            if (x0..x0 + 5).contains(&x) && (4..9).contains(&y) {
                if (x + y) % 2 == 0 {
                    0.8
                } else {
                    0.2
                }
            } else {
                -0.5
            }
        })
    };
    let frames: Vec<Tensor<f64>> = (0..k).map(frame).collect();
    let mut clip = Vec::new();
    for f in &frames {
        clip.extend_from_slice(f.data());
    }
    let clip = Tensor::new(&[1, 3 * k, size, size], clip).unwrap();
    (clip, frames[k - 1].clone(), frame(k))
}

#[test]
fn encoder_downsamples_by_eight() {
    let (stae, store) = model(StaeConfig::default(), 1);
    let mut g = Graph::new();
    let x = g.input(random(&[1, 12, 64, 64], &mut rng(2)));
    let enc = stae.encode(&mut g, &store, &mut NormCtx::train(), x).unwrap();
    assert_eq!(g.shape(enc.scene), &[1, 64, 8, 8]);
    let skips: Vec<&[usize]> = enc.skips.iter().map(|s| g.shape(*s)).collect();
    assert_eq!(skips, vec![&[1, 16, 64, 64][..], &[1, 32, 32, 32], &[1, 64, 16, 16]]);
}

#[test]
fn shape_contracts_hold_for_sizes_divisible_by_eight() {
    let (stae, store) = model(toy(), 3);
    for (h, w) in [(8, 8), (16, 24), (40, 32)] {
        let mut g = Graph::new();
        let x = g.input(random(&[2, 6, h, w], &mut rng(4)));
        let last = g.input(random(&[2, 3, h, w], &mut rng(5)));
        let p = stae.forward(&mut g, &store, &mut NormCtx::train(), x, last).unwrap();
        assert_eq!(g.shape(p.frame), &[2, 3, h, w]);
        assert_eq!(g.shape(p.flow), &[2, 2, h, w]);
        assert_eq!(g.shape(p.warped), &[2, 3, h, w]);
        assert_eq!(g.shape(p.scene), &[2, 8, h / 8, w / 8]);
    }
}

#[test]
fn encoder_rejects_bad_inputs() {
    let (stae, store) = model(toy(), 3);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 6, 12, 16]));
    assert!(stae.encode(&mut g, &store, &mut NormCtx::train(), x).is_err());
    let x = g.input(Tensor::zeros(&[1, 9, 16, 16]));
    assert!(stae.encode(&mut g, &store, &mut NormCtx::train(), x).is_err());
}

#[test]
fn zero_input_gives_finite_output() {
    let (stae, store) = model(StaeConfig::default(), 6);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 12, 32, 32]));
    let last = g.input(Tensor::zeros(&[2, 3, 32, 32]));
    let p = stae.forward(&mut g, &store, &mut NormCtx::train(), x, last).unwrap();
    for v in [p.frame, p.flow, p.warped, p.scene] {
        assert!(g.value(v).all_finite());
    }
}

#[test]
fn inference_is_batch_independent() {
    let (stae, mut store) = model(toy(), 7);
    // move the running statistics away from their initial values
    let mut g = Graph::new();
    let warm = g.input(random(&[3, 6, 16, 16], &mut rng(8)));
    let mut norms = NormCtx::train();
    stae.encode(&mut g, &store, &mut norms, warm).unwrap();
    norms.update_running(&mut store).unwrap();

    let a = random(&[1, 6, 16, 16], &mut rng(9));
    let b = random(&[1, 6, 16, 16], &mut rng(10));
    let run = |clip: Tensor<f64>| {
        let mut g = Graph::inference();
        let x = g.input(clip);
        let enc = stae.encode(&mut g, &store, &mut NormCtx::infer(), x).unwrap();
        let frame = stae.decode_appearance(&mut g, &store, &mut NormCtx::infer(), &enc).unwrap();
        g.value(frame).clone()
    };
    let single = run(a.clone());
    let pair = run(Tensor::stack_batch(&[a, b]).unwrap());
    let first = pair.batch_item(0);
    for (x, y) in single.data().iter().zip(first.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn appearance_matches_frame_shape_and_range() {
    let (stae, store) = model(StaeConfig::default(), 11);
    let mut g = Graph::new();
    // large inputs push the head towards saturation
    let x = g.input(random(&[1, 12, 32, 32], &mut rng(12)));
    let x = g.scale(x, 50.0).unwrap();
    let enc = stae.encode(&mut g, &store, &mut NormCtx::train(), x).unwrap();
    let frame = stae.decode_appearance(&mut g, &store, &mut NormCtx::train(), &enc).unwrap();
    assert_eq!(g.shape(frame), &[1, 3, 32, 32]);
    assert!(g.value(frame).data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn appearance_loss_reaches_every_encoder_parameter() {
    let (stae, store) = model(toy(), 13);
    let clip = random(&[2, 6, 16, 16], &mut rng(14));
    let target = random(&[2, 3, 16, 16], &mut rng(15));
    let grads = |mut norms: NormCtx<f64>| {
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let t = g.input(target.clone());
        let enc = stae.encode(&mut g, &store, &mut norms, x).unwrap();
        let frame = stae.decode_appearance(&mut g, &store, &mut norms, &enc).unwrap();
        let loss = strl::stae::loss_prediction(&mut g, t, frame, 1.0).unwrap();
        g.backward(loss).unwrap()
    };
    let norm = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let train = grads(NormCtx::train());
    let infer = grads(NormCtx::infer());
    let mut checked = 0;
    for id in store.ids() {
        let name = store.name(id);
        if !name.starts_with("encoder.") {
            continue;
        }
        // a bias feeding batch norm cancels against the batch mean, so it is
        // probed with fixed statistics instead
        let g = if name.ends_with(".bias") { &infer } else { &train };
        let n = norm(g.param(id).unwrap_or(&[]));
        assert!(n > 1e-8, "{name} gradient norm {n}");
        checked += 1;
    }
    assert_eq!(checked, 3 * 2 * 4);
}

#[test]
fn zero_motion_head_gives_zero_flow() {
    let (stae, mut store) = model(toy(), 16);
    let head = stae.motion_head().clone();
    for id in [head.weight, head.bias] {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let x = g.input(random(&[1, 6, 16, 16], &mut rng(17)));
    let last = random(&[1, 3, 16, 16], &mut rng(18));
    let l = g.input(last.clone());
    let p = stae.forward(&mut g, &store, &mut NormCtx::train(), x, l).unwrap();
    assert!(g.value(p.flow).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(p.warped).data(), last.data());
}

#[test]
fn motion_loss_reaches_motion_decoder_weights() {
    let (stae, store) = model(toy(), 19);
    let (clip, last, next) = moving_square(2, 16, 2);
    let mut g = Graph::new();
    let x = g.input(clip);
    let l = g.input(last);
    let t = g.input(next);
    let p = stae.forward(&mut g, &store, &mut NormCtx::train(), x, l).unwrap();
    let loss = loss_ae(&mut g, t, &p, 1.0, 1.0).unwrap();
    let grads = g.backward(loss.motion).unwrap();
    let mut checked = 0;
    for id in store.ids() {
        let name = store.name(id);
        if name.starts_with("motion.") && name.ends_with(".weight") {
            let n: f64 = grads.param(id).unwrap_or(&[]).iter().map(|v| v * v).sum();
            assert!(n > 0.0, "{name}");
            checked += 1;
        }
    }
    assert_eq!(checked, 3 * 2 + 1);
}

#[test]
fn warp_shifts_a_ramp() {
    let (h, w, s) = (6, 10, 0.25);
    let ramp = Tensor::from_fn(&[1, 3, h, w], |i| s * (i % w) as f64);
    let mut g = Graph::new();
    let img = g.input(ramp.clone());
    let flow = g.input(Tensor::from_fn(&[1, 2, h, w], |i| if i < h * w { 1.0 } else { 0.0 }));
    let out = g.warp(img, flow).unwrap();
    let out = g.value(out);
    for c in 0..3 {
        for y in 0..h {
            for x in 1..w {
                let i = (c * h + y) * w + x;
                assert!((out.data()[i] - (ramp.data()[i] - s)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_flow_warp_is_exact() {
    let img = random(&[2, 3, 8, 8], &mut rng(20));
    let mut g = Graph::new();
    let i = g.input(img.clone());
    let f = g.input(Tensor::zeros(&[2, 2, 8, 8]));
    let out = g.warp(i, f).unwrap();
    assert_eq!(g.value(out).data(), img.data());
}

fn scalar(f: impl FnOnce(&mut Graph<f64>) -> strl::tensor::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

#[test]
fn intensity_loss_closed_forms() {
    let a = random(&[1, 3, 8, 8], &mut rng(21));
    let same = scalar(|g| {
        let x = g.input(a.clone());
        let y = g.input(a.clone());
        loss_intensity(g, x, y).unwrap()
    });
    assert_eq!(same, 0.0);
    let shifted = Tensor::from_fn(a.shape(), |i| a.data()[i] + 0.3);
    let c2 = scalar(|g| {
        let x = g.input(a.clone());
        let y = g.input(shifted.clone());
        loss_intensity(g, x, y).unwrap()
    });
    assert!((c2 - 0.09).abs() < 1e-12);
}

#[test]
fn intensity_loss_matches_loop() {
    let a = random(&[1, 3, 8, 8], &mut rng(22));
    let b = random(&[1, 3, 8, 8], &mut rng(23));
    let got = scalar(|g| {
        let x = g.input(a.clone());
        let y = g.input(b.clone());
        loss_intensity(g, x, y).unwrap()
    });
    let mut sum = 0.0;
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                let i = (c * 8 + y) * 8 + x;
                sum += (a.data()[i] - b.data()[i]).powi(2);
            }
        }
    }
    assert!((got - sum / 192.0).abs() < 1e-6);
}

#[test]
fn gradient_loss_closed_forms() {
    let (h, w, s) = (5, 7, 0.2);
    let flat = Tensor::full(&[1, 3, h, w], 0.4);
    let ramp = Tensor::from_fn(&[1, 3, h, w], |i| s * (i % w) as f64);
    let got = scalar(|g| {
        let x = g.input(flat.clone());
        let y = g.input(ramp.clone());
        loss_gradient(g, x, y).unwrap()
    });
    assert!((got - s).abs() < 1e-12);
    let same = scalar(|g| {
        let x = g.input(ramp.clone());
        let y = g.input(ramp.clone());
        loss_gradient(g, x, y).unwrap()
    });
    assert_eq!(same, 0.0);
}

#[test]
fn gradient_loss_matches_loop() {
    let (c, h, w) = (3, 8, 8);
    let a = random(&[1, c, h, w], &mut rng(24));
    let b = random(&[1, c, h, w], &mut rng(25));
    let got = scalar(|g| {
        let x = g.input(a.clone());
        let y = g.input(b.clone());
        loss_gradient(g, x, y).unwrap()
    });
    let at = |t: &Tensor<f64>, ch: usize, y: usize, x: usize| t.data()[(ch * h + y) * w + x];
    let (mut horiz, mut vert) = (0.0, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let ga = (at(&a, ch, y, x + 1) - at(&a, ch, y, x)).abs();
                    let gb = (at(&b, ch, y, x + 1) - at(&b, ch, y, x)).abs();
                    horiz += (ga - gb).abs();
                }
                if y + 1 < h {
                    let ga = (at(&a, ch, y + 1, x) - at(&a, ch, y, x)).abs();
                    let gb = (at(&b, ch, y + 1, x) - at(&b, ch, y, x)).abs();
                    vert += (ga - gb).abs();
                }
            }
        }
    }
    let expected = horiz / (c * h * (w - 1)) as f64 + vert / (c * (h - 1) * w) as f64;
    assert!((got - expected).abs() < 1e-6);
}

#[test]
fn losses_are_non_negative_and_vanish_on_equal_images() {
    let mut r = rng(26);
    for _ in 0..20 {
        let scale = r.random_range(0.1..10.0);
        let a = Tensor::from_fn(&[1, 3, 6, 6], |_| scale * r.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[1, 3, 6, 6], |_| scale * r.random_range(-1.0..1.0));
        for (x, y, equal) in [(&a, &b, false), (&a, &a, true)] {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let yv = g.input(y.clone());
            let li = loss_intensity(&mut g, xv, yv).unwrap();
            let lg = loss_gradient(&mut g, xv, yv).unwrap();
            for l in [li, lg] {
                let v = g.value(l).item();
                assert!(v >= 0.0);
                if equal {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn losses_reject_shape_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::<f64>::zeros(&[1, 3, 4, 4]));
    let y = g.input(Tensor::<f64>::zeros(&[1, 3, 4, 5]));
    assert!(loss_intensity(&mut g, x, y).is_err());
    assert!(loss_gradient(&mut g, x, y).is_err());
}

fn prediction(g: &mut Graph<f64>, frame: &Tensor<f64>, warped: &Tensor<f64>) -> StaePrediction {
    StaePrediction {
        frame: g.input(frame.clone()),
        flow: g.input(Tensor::zeros(&[1, 2, 8, 8])),
        warped: g.input(warped.clone()),
        scene: g.input(Tensor::zeros(&[1, 1, 1, 1])),
    }
}

#[test]
fn perfect_predictions_have_zero_loss() {
    let target = random(&[1, 3, 8, 8], &mut rng(27));
    let mut g = Graph::new();
    let t = g.input(target.clone());
    let p = prediction(&mut g, &target, &target);
    let l = loss_ae(&mut g, t, &p, 1.0, 1.0).unwrap();
    assert_eq!(g.value(l.total).item(), 0.0);
}

#[test]
fn zero_motion_weight_leaves_appearance_loss() {
    let target = random(&[1, 3, 8, 8], &mut rng(28));
    let frame = random(&[1, 3, 8, 8], &mut rng(29));
    let warped = random(&[1, 3, 8, 8], &mut rng(30));
    let mut g = Graph::new();
    let t = g.input(target);
    let p = prediction(&mut g, &frame, &warped);
    let l = loss_ae(&mut g, t, &p, 1.0, 0.0).unwrap();
    assert_eq!(g.value(l.total).item(), g.value(l.appearance).item());
    let l = loss_ae(&mut g, t, &p, 1.0, 1.0).unwrap();
    let sum = g.value(l.appearance).item() + g.value(l.motion).item();
    assert!((g.value(l.total).item() - sum).abs() < 1e-12);
}

#[test]
fn overfits_a_static_clip() {
    let config = StaeConfig { k: 2, channels: [8, 8, 16] };
    let mut store = ParamStore::<f32>::new();
    let stae = Stae::new(&mut store, config, &mut rng(31));
    let (clip, last, _) = moving_square(2, 16, 0);
    let (clip, last) = (clip.cast::<f32>(), last.cast::<f32>());
    let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &store);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let l = g.input(last.clone());
        let p = stae.forward(&mut g, &store, &mut NormCtx::train(), x, l).unwrap();
        let loss = loss_ae(&mut g, l, &p, 1.0, 1.0).unwrap();
        losses.push(g.value(loss.total).item());
        store.zero_grad();
        g.backward_into(loss.total, &mut store).unwrap();
        adam.step(&mut store).unwrap();
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.1 * first, "loss went from {first} to {last}");
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (stae, store) = model(toy(), 32);
    let (clip, last, next) = moving_square(2, 16, 1);
    let (worst, count) = check_params(&store, 1e-6, |s, g| {
        let x = g.input(clip.clone());
        let l = g.input(last.clone());
        let t = g.input(next.clone());
        let p = stae.forward(g, s, &mut NormCtx::train(), x, l).unwrap();
        loss_ae(g, t, &p, 1.0, 1.0).unwrap().total
    });
    assert_eq!(count, store.num_scalars());
    assert!(worst < 1e-3, "worst relative error {worst}");
}
