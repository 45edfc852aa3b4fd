mod common;

use common::{rng, tiny_bundle, tiny_config, tiny_samples};
use rand::Rng;
use silora::augment::AugmentPolicy;
use silora::backbone::unet::{LoraFactors, SiteFactors, SITES};
use silora::backbone::{build_toy_backbone, embed_prompt, encode, BackboneBundle, LatentGrid, SoftMask};
use silora::data::ImageSample;
use silora::error::Error;
use silora::lora::{init_adaptor_set, AdaptorSet};
use silora::maskops::{mask_to_rgb, rgb_to_mask};
use silora::optim::{AdamW, AdamWConfig};
use silora::tensor::Mat;
use silora::trainer::{
    load_checkpoint, objective, objective_with_factors, predict_mask, save_checkpoint, threshold_prediction, train,
    training_step, unet_output, Checkpoint, TrainConfig, TrainState, Trainer, FALLBACK_THRESHOLD,
};

fn tiny_cfg(policy: AugmentPolicy) -> TrainConfig {
    TrainConfig {
        rank: 4,
        alpha: 4.0,
        image_size: 16,
        epochs: 2,
        lr: 1e-3,
        augment: policy,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn as_mat(z: &LatentGrid) -> Mat {
    Mat::from_f32(z.tokens(), z.channels(), z.data())
}

fn latents(b: &BackboneBundle, samples: &[ImageSample]) -> (Vec<Mat>, Vec<Mat>) {
    samples
        .iter()
        .map(|s| {
            let z = encode(&s.image, b).unwrap();
            let t = encode(&mask_to_rgb(&SoftMask::from(&s.mask)), b).unwrap();
            (as_mat(&z), as_mat(&t))
        })
        .unzip()
}

type Rows = Vec<Vec<f64>>;

fn weight(b: &BackboneBundle, name: &str) -> Rows {
    let t = b.weight(name).unwrap();
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn vector(b: &BackboneBundle, name: &str) -> Vec<f64> {
    b.weight(name).unwrap().data().iter().map(|&v| f64::from(v)).collect()
}

/// `x · wᵀ` one scalar at a time.
fn lin(x: &Rows, w: &Rows) -> Rows {
    x.iter()
        .map(|row| {
            w.iter()
                .map(|wr| row.iter().zip(wr).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn add(a: &mut Rows, b: &Rows) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

fn to_rows(m: &Mat) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Base-weight projection plus an optional low-rank delta.
fn proj(x: &Rows, b: &BackboneBundle, site: usize, f: &SiteFactors) -> Rows {
    let mut y = lin(x, &weight(b, &format!("{}.weight", SITES[site])));
    if let Some(lf) = &f[site] {
        let mut d = lin(&lin(x, &to_rows(&lf.a)), &to_rows(&lf.b));
        for r in &mut d {
            for v in r.iter_mut() {
                *v *= lf.scale;
            }
        }
        add(&mut y, &d);
    }
    y
}

fn attend(xq: &Rows, xkv: &Rows, b: &BackboneBundle, first: usize, f: &SiteFactors) -> Rows {
    let q = proj(xq, b, first, f);
    let k = proj(xkv, b, first + 1, f);
    let v = proj(xkv, b, first + 2, f);
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let mixed: Rows = q
        .iter()
        .map(|qi| {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(&v).map(|(p, vj)| p / z * vj[c]).sum())
                .collect()
        })
        .collect();
    proj(&mixed, b, first + 3, f)
}

/// Independent scalar forward of the toy U-Net.
fn forward_oracle(b: &BackboneBundle, z: &Mat, prompt: &[f32], f: &SiteFactors) -> Rows {
    let dt = b.geometry().prompt_dim;
    let p: Rows = prompt
        .chunks(dt)
        .map(|c| c.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let bias = vector(b, "unet.in.bias");
    let mut h = lin(&to_rows(z), &weight(b, "unet.in.weight"));
    for r in &mut h {
        for (v, bi) in r.iter_mut().zip(&bias) {
            let a = *v + bi;
            *v = a / (1.0 + (-a).exp());
        }
    }
    let sa = attend(&h, &h, b, 0, f);
    add(&mut h, &sa);
    let ca = attend(&h, &p, b, 4, f);
    add(&mut h, &ca);
    let mut out = lin(&h, &weight(b, "unet.out.weight"));
    let ob = vector(b, "unet.out.bias");
    for r in &mut out {
        for (v, bi) in r.iter_mut().zip(&ob) {
            *v += bi;
        }
    }
    out
}

fn random_factors(b: &BackboneBundle, rank: usize, seed: u64) -> SiteFactors {
    let mut r = rng(seed);
    b.geometry()
        .sites
        .iter()
        .map(|s| {
            let mut m = |rows, cols, amp: f64| {
                Mat::from_vec(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| r.random_range(-amp..amp)).collect(),
                )
                .unwrap()
            };
            Some(LoraFactors {
                a: m(rank, s.d_in, 0.5),
                b: m(s.d_out, rank, 0.3),
                scale: 1.0,
            })
        })
        .collect()
}

#[test]
fn initial_loss_matches_scalar_forward() {
    let b = tiny_bundle();
    let samples = tiny_samples(3, 1);
    let (zs, ts) = latents(b, &samples);
    let p = embed_prompt("segmentation map", b).unwrap();
    let set = init_adaptor_set(b, 4, 4.0, 0).unwrap();
    let zl: Vec<LatentGrid> = samples.iter().map(|s| encode(&s.image, b).unwrap()).collect();
    let tl: Vec<LatentGrid> = samples
        .iter()
        .map(|s| encode(&mask_to_rgb(&SoftMask::from(&s.mask)), b).unwrap())
        .collect();
    let (loss, _) = objective(b, &set, &p, &zl, &tl).unwrap();

    let none: SiteFactors = vec![None; 8];
    let mut sum = 0.0;
    let mut n = 0usize;
    for (z, t) in zs.iter().zip(&ts) {
        let out = forward_oracle(b, z, p.data(), &none);
        for (i, row) in out.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                sum += (v - t[(i, c)]).powi(2);
                n += 1;
            }
        }
    }
    let oracle = sum / n as f64;
    assert!(((loss - oracle) / oracle).abs() < 1e-5, "{loss} vs {oracle}");
}

#[test]
fn adapted_forward_matches_scalar_forward() {
    let b = tiny_bundle();
    let (zs, _) = latents(b, &tiny_samples(1, 2));
    let p = embed_prompt("segmentation map", b).unwrap();
    let f = random_factors(b, 3, 4);
    let got = unet_output(b, &f, &p, &zs[0]).unwrap();
    let want = forward_oracle(b, &zs[0], p.data(), &f);
    for (i, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((got[(i, c)] - v).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}

#[test]
fn self_target_has_zero_loss_and_gradient() {
    let b = tiny_bundle();
    let (zs, _) = latents(b, &tiny_samples(2, 3));
    let p = embed_prompt("segmentation map", b).unwrap();
    let f = random_factors(b, 2, 5);
    let targets: Vec<Mat> = zs.iter().map(|z| unet_output(b, &f, &p, z).unwrap()).collect();
    let (loss, grads) = objective_with_factors(b, &f, &p, &zs, &targets).unwrap();
    assert_eq!(loss, 0.0);
    for g in grads.iter().flatten() {
        assert_eq!(g.a.max_abs(), 0.0);
        assert_eq!(g.b.max_abs(), 0.0);
    }
}

/// Relative error with an absolute floor for entries whose gradient is ~0.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-10
}

#[test]
fn gradients_match_central_differences() {
    let b = tiny_bundle();
    let (zs, ts) = latents(b, &tiny_samples(2, 4));
    let p = embed_prompt("segmentation map", b).unwrap();
    let f = random_factors(b, 2, 6);
    let (_, grads) = objective_with_factors(b, &f, &p, &zs, &ts).unwrap();
    let mut r = rng(8);
    let h = 1e-6;
    for site in 0..8 {
        for which in 0..2 {
            for _ in 0..3 {
                let (rows, cols) = {
                    let m = if which == 0 {
                        &f[site].as_ref().unwrap().a
                    } else {
                        &f[site].as_ref().unwrap().b
                    };
                    (m.rows(), m.cols())
                };
                let (i, j) = (r.random_range(0..rows), r.random_range(0..cols));
                let eval = |delta: f64| {
                    let mut g = f.clone();
                    let lf = g[site].as_mut().unwrap();
                    let m = if which == 0 { &mut lf.a } else { &mut lf.b };
                    m[(i, j)] += delta;
                    objective_with_factors(b, &g, &p, &zs, &ts).unwrap().0
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let g = grads[site].as_ref().unwrap();
                let analytic = if which == 0 { g.a[(i, j)] } else { g.b[(i, j)] };
                assert!(
                    grad_close(analytic, numeric),
                    "{} {which} ({i},{j}): {analytic} vs {numeric}",
                    SITES[site]
                );
            }
        }
    }
}

#[test]
fn batch_order_does_not_change_the_loss() {
    let b = tiny_bundle();
    let (mut zs, mut ts) = latents(b, &tiny_samples(4, 5));
    let p = embed_prompt("segmentation map", b).unwrap();
    let f = random_factors(b, 2, 7);
    let (l1, _) = objective_with_factors(b, &f, &p, &zs, &ts).unwrap();
    zs.reverse();
    ts.reverse();
    zs.swap(0, 2);
    ts.swap(0, 2);
    let (l2, _) = objective_with_factors(b, &f, &p, &zs, &ts).unwrap();
    assert!((l1 - l2).abs() <= 1e-6 * l1.abs());
}

#[test]
fn steps_move_only_the_factors() {
    let b = tiny_bundle();
    let before = b.to_bytes();
    let cfg = tiny_cfg(AugmentPolicy::dual());
    let samples = tiny_samples(4, 6);
    let p = embed_prompt(&cfg.prompt, b).unwrap();
    let mut state = TrainState::new(b, &cfg).unwrap();
    let init = state.adaptors.clone();
    for _ in 0..6 {
        let batch: Vec<&ImageSample> = samples.iter().take(2).collect();
        training_step(&batch, b, &p, &cfg, &mut state).unwrap();
    }
    assert_eq!(b.to_bytes(), before);
    let changed: Vec<String> = init
        .iter()
        .zip(state.adaptors.iter())
        .flat_map(|(x, y)| {
            let mut v = Vec::new();
            if x.a() != y.a() {
                v.push(format!("{}.lora_a", x.site()));
            }
            if x.b() != y.b() {
                v.push(format!("{}.lora_b", x.site()));
            }
            v
        })
        .collect();
    assert!(!changed.is_empty());
    let names: Vec<String> = silora::lora::trainable_parameters(&state.adaptors)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert!(changed.iter().all(|c| names.contains(c)));
}

#[test]
fn unfrozen_bundle_is_refused() {
    let frozen = tiny_bundle();
    let unfrozen = BackboneBundle::from_parts(
        frozen.geometry().clone(),
        frozen
            .weight_names()
            .map(|n| (n.to_string(), frozen.weight(n).unwrap().clone()))
            .collect(),
        false,
    )
    .unwrap();
    let cfg = tiny_cfg(AugmentPolicy::none());
    let samples = tiny_samples(2, 1);
    let p = embed_prompt(&cfg.prompt, &unfrozen).unwrap();
    let mut state = TrainState::new(&unfrozen, &cfg).unwrap();
    let batch: Vec<&ImageSample> = samples.iter().collect();
    assert!(matches!(
        training_step(&batch, &unfrozen, &p, &cfg, &mut state),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_lr_leaves_parameters_and_zero_gradient_only_decays() {
    let b = tiny_bundle();
    let (zs, ts) = latents(b, &tiny_samples(2, 9));
    let p = embed_prompt("segmentation map", b).unwrap();
    let mut set = init_adaptor_set(b, 4, 4.0, 1).unwrap();
    for a in set.iter_mut() {
        for (k, v) in a.b_mut().data_mut().iter_mut().enumerate() {
            *v = (k as f32 * 0.37).sin() * 0.2;
        }
    }
    let zl: Vec<LatentGrid> = zs
        .iter()
        .map(|m| LatentGrid::new(4, 4, 4, m.as_slice().iter().map(|&v| v as f32).collect()).unwrap())
        .collect();
    let tl: Vec<LatentGrid> = ts
        .iter()
        .map(|m| LatentGrid::new(4, 4, 4, m.as_slice().iter().map(|&v| v as f32).collect()).unwrap())
        .collect();
    let (_, grads) = objective(b, &set, &p, &zl, &tl).unwrap();
    assert!(grads.max_abs() > 0.0);

    let mut frozen_lr = set.clone();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.0,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    });
    for _ in 0..3 {
        opt.step(&mut frozen_lr, &grads).unwrap();
    }
    assert_eq!(frozen_lr, set);

    // Zero gradients leave only the decoupled decay: p ← p·(1 − lr·wd).
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut decayed = set.clone();
    let mut opt = AdamW::new(cfg.clone());
    let nothing = silora::lora::AdaptorGrads::zeros_like(&set);
    opt.step(&mut decayed, &nothing).unwrap();
    for (x, y) in set.iter().zip(decayed.iter()) {
        for (u, v) in x
            .a()
            .data()
            .iter()
            .chain(x.b().data())
            .zip(y.a().data().iter().chain(y.b().data()))
        {
            assert_eq!(*v, (f64::from(*u) * (1.0 - cfg.lr * cfg.weight_decay)) as f32);
        }
    }
}

#[test]
fn same_seed_same_losses() {
    let b = tiny_bundle();
    let samples = tiny_samples(6, 10);
    let cfg = tiny_cfg(AugmentPolicy::dual());
    let a = train(&samples, b, &cfg).unwrap();
    let c = train(&samples, b, &cfg).unwrap();
    assert_eq!(a.losses, c.losses);
    assert_eq!(a.to_bytes(), c.to_bytes());
    assert_eq!(a.losses.len(), 6);
}

#[test]
fn resume_equals_uninterrupted() {
    let b = tiny_bundle();
    let samples = tiny_samples(5, 11);
    let cfg = TrainConfig {
        epochs: 3,
        ..tiny_cfg(AugmentPolicy::dual())
    };
    let full = train(&samples, b, &cfg).unwrap();

    let mut t = Trainer::new(b, cfg.clone()).unwrap();
    t.run(&samples, Some(4), |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.silora");
    save_checkpoint(&t.checkpoint(), &path).unwrap();
    let mid = load_checkpoint(&path, b).unwrap();
    assert_eq!(mid.step, 4);
    let mut resumed = Trainer::resume(b, mid).unwrap();
    resumed.run(&samples, None, |_, _| Ok(())).unwrap();
    let end = resumed.checkpoint();
    assert_eq!(end.adaptors, full.adaptors);
    assert_eq!(end.to_bytes(), full.to_bytes());
}

#[test]
fn checkpoint_round_trip_and_hash_check() {
    let b = tiny_bundle();
    let ck = train(&tiny_samples(4, 12), b, &tiny_cfg(AugmentPolicy::none())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.silora");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path, b).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.adaptors.to_bytes(), ck.adaptors.to_bytes());
    assert!(std::fs::read(&path).unwrap().starts_with(b"SILORA-CK"));

    let other = build_toy_backbone(&tiny_config(), 99).unwrap();
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::Incompatible(_))));
    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], &path).is_err());
}

#[test]
fn empty_dataset_is_an_argument_error() {
    let b = tiny_bundle();
    assert!(matches!(
        train(&[], b, &tiny_cfg(AugmentPolicy::none())),
        Err(Error::Argument(_))
    ));
}

#[test]
fn defaults_follow_the_published_protocol() {
    let c = TrainConfig::default();
    assert_eq!(
        (c.lr, c.weight_decay, c.batch_size, c.epochs, c.rank),
        (1e-4, 1e-2, 2, 30, 8)
    );
    assert_eq!(c.prompt, "segmentation map");
    assert_eq!(c.alpha, 8.0);
    assert!(c.augment.mixup && c.augment.latent_noise);
}

#[test]
fn invalid_config_lists_every_problem() {
    let c = TrainConfig {
        lr: -1.0,
        batch_size: 0,
        prompt: String::new(),
        ..TrainConfig::default()
    };
    let keys: Vec<String> = c.problems().into_iter().map(|(k, _)| k).collect();
    assert_eq!(keys, ["train.lr", "train.batch_size", "prompt"]);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn replicated_ground_truth_is_recovered() {
    for (i, s) in tiny_samples(5, 13).iter().enumerate() {
        let decoded = mask_to_rgb(&SoftMask::from(&s.mask));
        assert_eq!(threshold_prediction(&rgb_to_mask(&decoded)), s.mask, "sample {i}");
    }
}

#[test]
fn flat_prediction_falls_back() {
    let flat = SoftMask::new(4, 4, vec![0.6; 16]).unwrap();
    assert!(threshold_prediction(&flat).data().iter().all(|&v| v == 1));
    let flat = SoftMask::new(4, 4, vec![FALLBACK_THRESHOLD; 16]).unwrap();
    assert!(threshold_prediction(&flat).data().iter().all(|&v| v == 0));
}

#[test]
fn prediction_is_deterministic() {
    let b = tiny_bundle();
    let x = &tiny_samples(1, 14)[0].image;
    let set = init_adaptor_set(b, 4, 4.0, 0).unwrap();
    assert_eq!(
        predict_mask(x, b, &set, "segmentation map").unwrap(),
        predict_mask(x, b, &set, "segmentation map").unwrap()
    );
    assert_eq!(
        predict_mask(x, b, &set, "segmentation map").unwrap(),
        predict_mask(x, b, &AdaptorSet::empty(), "segmentation map").unwrap()
    );
}
