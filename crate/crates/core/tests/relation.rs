mod common;

use common::{check_params, random, rng};
use proptest::prelude::*;
use rand::Rng;
use strl::nn::NormCtx;
use strl::relation::{
    cluster_relation_map, downsample_mask, gen_negative_order, gen_negative_speed, gen_negative_speed_bounded, loss_rl_clip,
    loss_total, object_embedding, relation_score, Relation, RegionTerms, RlLossForm,
};
use strl::stae::{loss_ae, Stae, StaeConfig};
use strl::tensor::{Graph, ParamStore, Tensor, Var};

#[test]
fn downsample_full_and_single_pixel() {
    let full = downsample_mask(&[1; 64 * 64], 64, 64, 8).unwrap();
    assert_eq!(full, vec![1; 64]);
    let mut one = vec![0u8; 64 * 64];
    one[8 * 64 + 8] = 1;
    let low = downsample_mask(&one, 64, 64, 8).unwrap();
    assert_eq!(low.iter().filter(|&&v| v == 1).count(), 1);
    assert_eq!(low[8 + 1], 1);
}

#[test]
fn downsample_rejects_bad_extents() {
    assert!(downsample_mask(&[0; 60 * 64], 60, 64, 8).is_err());
    assert!(downsample_mask(&[0; 10], 64, 64, 8).is_err());
}

proptest! {
    #[test]
    fn downsample_is_max_pooling(cells in proptest::collection::vec(0usize..256, 1..6)) {
        let mut mask = vec![0u8; 16 * 16];
        for c in &cells {
            mask[*c] = 1;
        }
        let low = downsample_mask(&mask, 16, 16, 8).unwrap();
        prop_assert!(low.contains(&1));
        for y in 0..2 {
            for x in 0..2 {
                let any = (0..8).any(|dy| (0..8).any(|dx| mask[(y * 8 + dy) * 16 + x * 8 + dx] == 1));
                prop_assert_eq!(low[y * 2 + x] == 1, any);
            }
        }
    }
}

fn mask_tensor(cells: &[u8], h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(&[1, 1, h, w], cells.iter().map(|&v| v as f64).collect()).unwrap()
}

fn pooled(scene: &Tensor<f64>, mask: &Tensor<f64>, by_area: bool) -> Vec<f64> {
    let mut g = Graph::new();
    let s = g.input(scene.clone());
    let e = object_embedding(&mut g, s, mask, by_area).unwrap();
    g.value(e).data().to_vec()
}

#[test]
fn embedding_of_constant_scene_is_the_constant() {
    let d = 5;
    let scene = Tensor::from_fn(&[1, d, 4, 4], |i| (i / 16) as f64 * 0.5 - 1.0);
    let mask = mask_tensor(&[0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0], 4, 4);
    let e = pooled(&scene, &mask, false);
    for (ch, v) in e.iter().enumerate() {
        assert!((v - (ch as f64 * 0.5 - 1.0)).abs() < 1e-12);
    }
}

#[test]
fn full_mask_embedding_is_global_average() {
    let scene = random(&[1, 6, 4, 4], &mut rng(1));
    let ones = mask_tensor(&[1; 16], 4, 4);
    let mut g = Graph::new();
    let s = g.input(scene.clone());
    let plain = g.global_average_pool(s, None, false).unwrap();
    let plain = g.value(plain).data().to_vec();
    for (a, b) in pooled(&scene, &ones, false).iter().zip(&plain) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn embedding_matches_loop() {
    let d = 7;
    let mut r = rng(2);
    let scene = random(&[1, d, 4, 4], &mut r);
    let cells: Vec<u8> = (0..16).map(|i| u8::from(i % 3 == 0 || r.random_bool(0.3))).collect();
    let mask = mask_tensor(&cells, 4, 4);
    let active = cells.iter().filter(|&&c| c == 1).count() as f64;
    for (by_area, denom) in [(false, active), (true, 16.0)] {
        let e = pooled(&scene, &mask, by_area);
        for ch in 0..d {
            let mut sum = 0.0;
            for i in 0..16 {
                if cells[i] == 1 {
                    sum += scene.data()[ch * 16 + i];
                }
            }
            assert!((e[ch] - sum / denom).abs() < 1e-6);
        }
    }
}

#[test]
fn embedding_rejects_empty_mask() {
    let mut g = Graph::new();
    let s = g.input(random(&[1, 3, 4, 4], &mut rng(3)));
    assert!(object_embedding(&mut g, s, &mask_tensor(&[0; 16], 4, 4), false).is_err());
}

fn relation(d: usize, h: usize, w: usize, seed: u64) -> (Relation, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let rel = Relation::new(&mut store, d, h, w, &mut rng(seed));
    (rel, store)
}

#[test]
fn zero_mixer_output_scores_one_half() {
    let (rel, mut store) = relation(4, 3, 3, 4);
    let (_, mix2) = rel.mixers();
    let (w, b) = (mix2.weight, mix2.bias);
    store.value_mut(w).data_mut().fill(0.0);
    store.value_mut(b).data_mut().fill(0.0);
    let mut g = Graph::new();
    let scene = g.input(random(&[2, 4, 3, 3], &mut rng(5)));
    let mixed = rel.mix(&mut g, &store, &mut NormCtx::train(), scene).unwrap();
    let e = g.input(random(&[2, 4], &mut rng(6)));
    let psi = relation_score(&mut g, mixed, e).unwrap();
    assert!(g.value(psi).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn zero_object_scores_one_half() {
    let (rel, store) = relation(4, 3, 3, 7);
    let mut g = Graph::new();
    let scene = g.input(random(&[1, 4, 3, 3], &mut rng(8)));
    let mixed = rel.mix(&mut g, &store, &mut NormCtx::train(), scene).unwrap();
    let e = g.input(Tensor::zeros(&[1, 4]));
    let psi = relation_score(&mut g, mixed, e).unwrap();
    assert_eq!(g.shape(psi), &[1, 1, 3, 3]);
    assert!(g.value(psi).data().iter().all(|&v| v == 0.5));
}

#[test]
fn relation_map_must_match_scene() {
    let (rel, store) = relation(4, 3, 3, 9);
    let mut g = Graph::new();
    let scene = g.input(random(&[1, 4, 4, 4], &mut rng(10)));
    assert!(rel.mix(&mut g, &store, &mut NormCtx::train(), scene).is_err());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn score_matches_loop() {
    let (d, h, w) = (3, 2, 3);
    let (rel, store) = relation(d, h, w, 11);
    let scene = random(&[1, d, h, w], &mut rng(12));
    let obj = random(&[1, d], &mut rng(13));
    let mut g = Graph::new();
    let s = g.input(scene.clone());
    // fixed statistics are the initial running buffers: mean 0, variance 1
    let mixed = rel.mix(&mut g, &store, &mut NormCtx::infer(), s).unwrap();
    let e = g.input(obj.clone());
    let psi = relation_score(&mut g, mixed, e).unwrap();
    let psi = g.value(psi).data().to_vec();

    let (mix1, mix2) = rel.mixers();
    let w1 = store.value(mix1.weight).data();
    let b1 = store.value(mix1.bias).data();
    let w2 = store.value(mix2.weight).data();
    let b2 = store.value(mix2.bias).data();
    let r = store.value(rel.map).data();
    let bn = |v: f64| v / (1.0 + 1e-5f64).sqrt();
    let n = h * w;
    for p in 0..n {
        let input: Vec<f64> = (0..d).map(|c| scene.data()[c * n + p]).chain((0..d).map(|c| r[c * n + p])).collect();
        let hidden: Vec<f64> = (0..d)
            .map(|o| bn((b1[o] + (0..2 * d).map(|i| w1[o * 2 * d + i] * input[i]).sum::<f64>()).max(0.0)))
            .collect();
        let gamma: Vec<f64> = (0..d)
            .map(|o| bn((b2[o] + (0..d).map(|i| w2[o * d + i] * hidden[i]).sum::<f64>()).max(0.0)))
            .collect();
        let dot: f64 = gamma.iter().zip(obj.data()).map(|(a, b)| a * b).sum();
        assert!((psi[p] - sigmoid(dot)).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn scores_lie_strictly_inside_unit_interval(seed in 0u64..500, scale in 0.1f64..5.0) {
        let (rel, store) = relation(4, 2, 2, seed);
        let mut r = rng(seed + 1);
        let mut g = Graph::new();
        let scene = Tensor::from_fn(&[2, 4, 2, 2], |_| scale * r.random_range(-1.0..1.0));
        let s = g.input(scene);
        let mixed = rel.mix(&mut g, &store, &mut NormCtx::train(), s).unwrap();
        let e = g.input(Tensor::from_fn(&[2, 4], |_| scale * r.random_range(-1.0..1.0)));
        let psi = relation_score(&mut g, mixed, e).unwrap();
        prop_assert!(g.value(psi).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn speed_negative_steps_are_bounded_and_not_all_one() {
    let mut r = rng(14);
    let mut seen = [false; 5];
    for _ in 0..500 {
        let idx = gen_negative_speed(40, 3, 4, &mut r).unwrap();
        assert_eq!(idx.len(), 4);
        assert_eq!(idx[0], 3);
        let steps: Vec<usize> = idx.windows(2).map(|p| p[1] - p[0]).collect();
        assert!(steps.iter().all(|s| (1..=4).contains(s)));
        assert!(steps.iter().any(|&s| s > 1));
        for s in steps {
            seen[s] = true;
        }
    }
    assert_eq!(seen, [false, true, true, true, true]);
    // with a single step the only rejected draw is 1
    for _ in 0..50 {
        let idx = gen_negative_speed(10, 0, 2, &mut r).unwrap();
        assert!(idx[1] >= 2);
    }
}

#[test]
fn speed_negative_needs_worst_case_span() {
    let mut r = rng(15);
    assert!(gen_negative_speed(13, 0, 4, &mut r).is_ok());
    assert!(gen_negative_speed(12, 0, 4, &mut r).is_err());
    assert!(gen_negative_speed(20, 8, 4, &mut r).is_err());
    assert!(gen_negative_speed(20, 0, 1, &mut r).is_err());
}

#[test]
fn speed_negative_is_seeded() {
    let a = gen_negative_speed(30, 2, 4, &mut rng(16)).unwrap();
    let b = gen_negative_speed(30, 2, 4, &mut rng(16)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bounded_speed_negative_fits_near_the_end() {
    let mut r = rng(17);
    for _ in 0..200 {
        let idx = gen_negative_speed_bounded(10, 4, 4, &mut r).unwrap();
        assert!(*idx.last().unwrap() < 10);
        assert!(idx.windows(2).any(|p| p[1] - p[0] > 1));
    }
    assert!(gen_negative_speed_bounded(8, 4, 4, &mut r).is_none());
}

#[test]
fn order_negative_for_two_frames_is_the_swap() {
    let mut r = rng(18);
    for _ in 0..20 {
        assert_eq!(gen_negative_order(2, &mut r).unwrap(), vec![1, 0]);
    }
    assert!(gen_negative_order(1, &mut r).is_err());
}

proptest! {
    #[test]
    fn order_negative_is_a_non_identity_permutation(k in 2usize..8, seed in 0u64..1000) {
        let p = gen_negative_order(k, &mut rng(seed)).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..k).collect::<Vec<_>>());
        prop_assert_ne!(p, (0..k).collect::<Vec<_>>());
    }
}

struct RlCase {
    mixed: Tensor<f64>,
    regions: Vec<(Tensor<f64>, [Tensor<f64>; 3])>,
}

fn rl_loss(case: &RlCase, order: &[usize], form: RlLossForm) -> f64 {
    let mut g = Graph::new();
    let m = g.input(case.mixed.clone());
    let terms: Vec<RegionTerms<f64>> = order
        .iter()
        .map(|&i| {
            let (mask, [p, s, o]) = &case.regions[i];
            RegionTerms {
                mask: mask.clone(),
                positive: g.input(p.clone()),
                speed: g.input(s.clone()),
                order: g.input(o.clone()),
            }
        })
        .collect();
    let l = loss_rl_clip(&mut g, m, &terms, form).unwrap();
    g.value(l).item()
}

fn random_case(d: usize, h: usize, w: usize, n: usize, seed: u64) -> RlCase {
    let mut r = rng(seed);
    let mixed = random(&[1, d, h, w], &mut r);
    let regions = (0..n)
        .map(|i| {
            let cells: Vec<u8> = (0..h * w).map(|c| u8::from(c == i || r.random_bool(0.4))).collect();
            let emb = [random(&[1, d], &mut r), random(&[1, d], &mut r), random(&[1, d], &mut r)];
            (mask_tensor(&cells, h, w), emb)
        })
        .collect();
    RlCase { mixed, regions }
}

fn rl_loop(case: &RlCase, form: RlLossForm) -> f64 {
    let s = case.mixed.shape();
    let (d, n) = (s[1], s[2] * s[3]);
    let psi = |e: &Tensor<f64>, p: usize| sigmoid((0..d).map(|c| case.mixed.data()[c * n + p] * e.data()[c]).sum());
    let mut total = 0.0;
    for (mask, [pos, speed, order]) in &case.regions {
        for p in 0..n {
            if mask.data()[p] == 0.0 {
                continue;
            }
            let ratio = psi(pos, p) / (psi(pos, p) + psi(speed, p) + psi(order, p));
            total += match form {
                RlLossForm::Literal => ratio,
                RlLossForm::PerLocation => ratio.ln(),
            };
        }
    }
    let inner = match form {
        RlLossForm::Literal => total.ln(),
        RlLossForm::PerLocation => total,
    };
    -inner / (n * case.regions.len()) as f64
}

#[test]
fn rl_loss_matches_loop() {
    for seed in 0..5 {
        let case = random_case(4, 3, 4, 3, 100 + seed);
        for form in [RlLossForm::Literal, RlLossForm::PerLocation] {
            let got = rl_loss(&case, &[0, 1, 2], form);
            assert!((got - rl_loop(&case, form)).abs() < 1e-6, "{form}");
        }
    }
}

#[test]
fn identical_embeddings_give_one_third_ratios() {
    let mut case = random_case(3, 2, 2, 2, 19);
    for (_, emb) in &mut case.regions {
        emb[1] = emb[0].clone();
        emb[2] = emb[0].clone();
    }
    let active: f64 = case.regions.iter().map(|(m, _)| m.data().iter().sum::<f64>()).sum();
    let expected = -(active / 3.0).ln() / (4 * 2) as f64;
    assert!((rl_loss(&case, &[0, 1], RlLossForm::Literal) - expected).abs() < 1e-12);
}

#[test]
fn per_location_loss_vanishes_when_positives_dominate() {
    let d = 4;
    let mixed = Tensor::full(&[1, d, 2, 2], 1.0);
    let pos = Tensor::full(&[1, d], 20.0);
    let neg = Tensor::full(&[1, d], -20.0);
    let case = RlCase {
        mixed,
        regions: vec![(mask_tensor(&[1, 1, 0, 1], 2, 2), [pos, neg.clone(), neg])],
    };
    assert!(rl_loss(&case, &[0], RlLossForm::PerLocation).abs() < 1e-12);
}

#[test]
fn rl_loss_without_masks_is_zero() {
    let mut g = Graph::new();
    let m = g.input(random(&[1, 3, 2, 2], &mut rng(20)));
    let l = loss_rl_clip(&mut g, m, &[], RlLossForm::Literal).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

proptest! {
    #[test]
    fn rl_loss_ignores_mask_order(seed in 0u64..500, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let case = random_case(3, 3, 3, 4, seed);
        for form in [RlLossForm::Literal, RlLossForm::PerLocation] {
            let a = rl_loss(&case, &[0, 1, 2, 3], form);
            let b = rl_loss(&case, &perm, form);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a.is_finite());
        }
    }
}

fn total(ae: f64, rl: f64, lambda: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.input(Tensor::scalar(ae));
    let r = g.input(Tensor::scalar(rl));
    let t = loss_total(&mut g, a, r, lambda).unwrap();
    g.value(t).item()
}

#[test]
fn total_loss_is_affine_in_lambda() {
    assert_eq!(total(1.25, 3.0, 0.0), 1.25);
    assert_eq!(total(0.0, 0.0, 0.5), 0.0);
    for lambda in [0.0, 0.5, 2.0] {
        assert!((total(1.25, 3.0, lambda) - (1.25 + 3.0 * lambda)).abs() < 1e-12);
    }
}

#[test]
fn rl_form_parses() {
    assert_eq!("literal".parse::<RlLossForm>().unwrap(), RlLossForm::Literal);
    assert_eq!("per_location".parse::<RlLossForm>().unwrap(), RlLossForm::PerLocation);
    assert!("infonce".parse::<RlLossForm>().is_err());
}

/// Toy clip of `frames` 16x16 frames with a textured square moving right.
fn toy_frames(frames: usize) -> Vec<Tensor<f64>> {
    (0..frames)
        .map(|t| {
            Tensor::from_fn(&[3, 16, 16], |i| {
                let (x, y) = (i % 16, (i / 16) % 16);
                if (2 + t..7 + t).contains(&x) && (4..9).contains(&y) {
                    if (x + y) % 2 == 0 {
                        0.8
                    } else {
                        0.1
                    }
                } else {
                    -0.5
                }
            })
        })
        .collect()
}

fn stack(frames: &[Tensor<f64>], idx: &[usize]) -> Tensor<f64> {
    let mut data = Vec::new();
    for &i in idx {
        data.extend_from_slice(frames[i].data());
    }
    Tensor::new(&[1, 3 * idx.len(), 16, 16], data).unwrap()
}

struct Toy {
    stae: Stae,
    rel: Relation,
    store: ParamStore<f64>,
    frames: Vec<Tensor<f64>>,
    mask: Tensor<f64>,
}

fn toy_model() -> Toy {
    let mut store = ParamStore::new();
    let mut r = rng(21);
    let stae = Stae::new(&mut store, StaeConfig { k: 2, channels: [4, 4, 6] }, &mut r);
    let rel = Relation::new(&mut store, 6, 2, 2, &mut r);
    let mut pixel = vec![0u8; 256];
    for y in 4..9 {
        for x in 2..9 {
            pixel[y * 16 + x] = 1;
        }
    }
    let low = downsample_mask(&pixel, 16, 16, 8).unwrap();
    Toy {
        stae,
        rel,
        store,
        frames: toy_frames(8),
        mask: mask_tensor(&low, 2, 2),
    }
}

/// `frozen` pins the statistics the negatives replay; by default they come
/// from this pass.
fn toy_objective(t: &Toy, s: &ParamStore<f64>, g: &mut Graph<f64>, lambda_rl: f64, frozen: Option<&NormCtx<f64>>) -> Var {
    let mut norms = NormCtx::train();
    let clip = g.input(stack(&t.frames, &[0, 1]));
    let last = g.input(stack(&t.frames, &[1]));
    let target = g.input(stack(&t.frames, &[2]));
    let p = t.stae.forward(g, s, &mut norms, clip, last).unwrap();
    let ae = loss_ae(g, target, &p, 1.0, 1.0).unwrap();
    let embed = |g: &mut Graph<f64>, norms: &mut NormCtx<f64>, idx: &[usize]| {
        let c = g.input(stack(&t.frames, idx));
        let enc = t.stae.encode(g, s, norms, c).unwrap();
        object_embedding(g, enc.scene, &t.mask, false).unwrap()
    };
    let positive = object_embedding(g, p.scene, &t.mask, false).unwrap();
    let mut replay = NormCtx::replay(frozen.unwrap_or(&norms));
    let speed = embed(g, &mut replay, &[0, 3]);
    let order = embed(g, &mut replay, &[1, 0]);
    let mixed = t.rel.mix(g, s, &mut norms, p.scene).unwrap();
    let regions = [RegionTerms {
        mask: t.mask.clone(),
        positive,
        speed,
        order,
    }];
    let rl = loss_rl_clip(g, mixed, &regions, RlLossForm::Literal).unwrap();
    loss_total(g, ae.total, rl, lambda_rl).unwrap()
}

#[test]
fn total_loss_reaches_relation_and_encoder_parameters() {
    let t = toy_model();
    let mut g = Graph::new();
    let loss = toy_objective(&t, &t.store, &mut g, 0.5, None);
    let grads = g.backward(loss).unwrap();
    let (m1, m2) = t.rel.mixers();
    let mut ids = vec![t.rel.map, m1.weight, m2.weight];
    ids.extend(t.store.ids().filter(|&id| {
        let n = t.store.name(id);
        n.starts_with("encoder.") && n.ends_with(".weight")
    }));
    assert_eq!(ids.len(), 3 + 6);
    for id in ids {
        let n: f64 = grads.param(id).unwrap_or(&[]).iter().map(|v| v * v).sum();
        assert!(n > 0.0, "{}", t.store.name(id));
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let t = toy_model();
    // the replayed statistics are constants, so the perturbed passes reuse
    // the ones the unperturbed positive pass observed
    let mut norms = NormCtx::train();
    let mut g = Graph::new();
    let clip = g.input(stack(&t.frames, &[0, 1]));
    t.stae.encode(&mut g, &t.store, &mut norms, clip).unwrap();
    let (worst, count) = check_params(&t.store, 1e-6, |s, g| toy_objective(&t, s, g, 0.5, Some(&norms)));
    assert_eq!(count, t.store.num_scalars());
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn default_model_fits_the_parameter_budget() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(22);
    let stae = Stae::new(&mut store, StaeConfig::default(), &mut r);
    let stae_only = store.num_scalars();
    Relation::new(&mut store, stae.config.depth(), 32, 32, &mut r);
    assert!(stae_only < 200_000, "{stae_only}");
    assert!(store.num_scalars() <= 300_000, "{}", store.num_scalars());
}

fn halves(d: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[d, h, w], |i| if i % w < w / 2 { 1.0 + (i / (h * w)) as f32 } else { -2.0 })
}

#[test]
fn clustering_splits_constant_halves() {
    let (h, w) = (4, 6);
    for seed in 0..10 {
        let c = cluster_relation_map(&halves(3, h, w), 2, &mut rng(seed)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let same_as_left = c.labels[y * w + x] == c.labels[0];
                assert_eq!(same_as_left, x < w / 2);
            }
        }
        assert!(c.distances.iter().all(|&d| d == 0.0));
    }
}

#[test]
fn singleton_clusters_have_zero_distance() {
    let map = random(&[3, 3, 3], &mut rng(23)).cast::<f32>();
    let c = cluster_relation_map(&map, 9, &mut rng(24)).unwrap();
    assert!(c.distances.iter().all(|&d| d < 1e-6));
    let mut labels = c.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, (0..9).collect::<Vec<_>>());
}

#[test]
fn clustering_rejects_degenerate_counts() {
    let map = halves(2, 2, 2);
    assert!(cluster_relation_map(&map, 1, &mut rng(25)).is_err());
    assert!(cluster_relation_map(&map, 5, &mut rng(25)).is_err());
}

proptest! {
    #[test]
    fn clustering_objective_never_increases(seed in 0u64..300, c in 2usize..6) {
        let map = random(&[4, 5, 5], &mut rng(seed)).cast::<f32>();
        let out = cluster_relation_map(&map, c, &mut rng(seed + 7)).unwrap();
        prop_assert!(!out.objective.is_empty());
        for pair in out.objective.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9);
        }
    }
}
