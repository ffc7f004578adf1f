//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the verdict lines are always
//! printed; the process exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mvdiff::attention::{
    attention_tape, fba_attention, fba_block_tape, filter_guidance, xa_loss_tape, xa_tape, AttentionMap,
    FbaBlockParams, FbaSettings, LevelGeometry, XaParams,
};
use mvdiff::autograd::Tape;
use mvdiff::denoiser::train::{draw_fba_batch, fba_loss};
use mvdiff::denoiser::{
    collect_g_features, collect_noise_free_maps, forward, forward_tape, reverse_loop, train_fba, Architecture, Bound,
    DenoiserParams, ForwardCtx, GFeatures, Level, MultiViewExample, NetGeometry, OracleDenoiser, Partition, Phase,
    RunSettings, TrainConfig, TrainState,
};
use mvdiff::diffusion::{forward_sample, predict_z0};
use mvdiff::frequency::{fft2, hpf_mask, ifft2, FilterKind};
use mvdiff::geometry::{correspondence, overlap_mask, warp_features};
use mvdiff::harness::pipeline::{evaluate_samples, sample_into};
use mvdiff::harness::{gen_data, train_base_stage, train_fba_stage, ExperimentConfig};
use mvdiff::metrics::{
    band_correlation_sums, intra_distance, mean_ci95, overlap_psnr, psnr_from_mse, psnr_ratio, report_from_sums,
    Alignment, Pearson, PsnrOptions,
};
use mvdiff::noise_init::{coordinate_noise, init_latent, mixed_noise, sample_bundle, NoiseMode};
use mvdiff::rng::{randn, stream};
use mvdiff::{make_schedule, make_view_ring, Tensor, ViewSet};

fn noise(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, &mut stream(seed, 100, 0, 0))
}

fn within(elapsed: Duration, limit_s: f64) {
    assert!(
        elapsed.as_secs_f64() < limit_s,
        "took {:.1} s, limit {limit_s} s",
        elapsed.as_secs_f64()
    );
}

// 1. Diffusion identities.
fn diffusion_identities() -> String {
    let start = Instant::now();
    let s = make_schedule(50, 1e-4, 0.02).unwrap();
    let z0 = noise(&[3, 8, 8], 1).scale(0.5);
    let eps = noise(&[3, 8, 8], 2);
    assert_eq!(forward_sample(&z0, 0, &eps, &s).unwrap(), z0, "t = 0 is not the identity");
    let mut worst: f64 = 0.0;
    for t in 1..=50 {
        let zt = forward_sample(&z0, t, &eps, &s).unwrap();
        worst = worst.max(predict_z0(&zt, &eps, t, &s).unwrap().max_abs_diff(&z0));
    }
    assert!(worst < 1e-6, "predict_z0 round trip {worst:e}");
    let clean: Vec<Tensor> = (0..3).map(|i| noise(&[3, 8, 8], 10 + i).scale(0.5)).collect();
    let oracle = OracleDenoiser {
        z0: &clean,
        schedule: &s,
    };
    let start_z: Vec<Tensor> = (0..3).map(|i| noise(&[3, 8, 8], 20 + i)).collect();
    let out = reverse_loop(&oracle, start_z, &s, 7).unwrap();
    let rec = out.iter().zip(&clean).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    assert!(rec < 1e-3, "oracle reverse loop error {rec:e}");
    within(start.elapsed(), 5.0);
    format!("round trip {worst:.1e}, oracle recovery {rec:.1e}")
}

// 2. FFT suite.
fn fft_suite() -> String {
    let start = Instant::now();
    let mut worst_rt: f64 = 0.0;
    let mut worst_parseval: f64 = 0.0;
    for (k, (h, w)) in [(8, 8), (16, 16), (7, 10), (12, 5)].into_iter().enumerate() {
        let x = noise(&[3, h, w], 30 + k as u64);
        let s = fft2(&x).unwrap();
        worst_rt = worst_rt.max(ifft2(&s).unwrap().max_abs_diff(&x));
        let time = x.sum_sq();
        let freq = s.magnitude_sq_sum() / (h * w) as f64;
        worst_parseval = worst_parseval.max((time - freq).abs() / time);
    }
    assert!(worst_rt < 1e-6, "roundtrip {worst_rt:e}");
    assert!(worst_parseval < 1e-5, "Parseval {worst_parseval:e}");
    let (h, w) = (16, 16);
    for (ky, kx) in [(0i64, 3i64), (2, 5), (-3, 1), (4, 0)] {
        let x = Tensor::from_fn(&[h, w], |p| {
            let (r, c) = ((p / w) as f64, (p % w) as f64);
            (2.0 * PI * (ky as f64 * r / h as f64 + kx as f64 * c / w as f64)).cos()
        });
        let s = fft2(&x).unwrap();
        let bin = |dy: i64, dx: i64| ((h as i64 / 2 + dy) as usize) * w + (w as i64 / 2 + dx) as usize;
        let peaks = [bin(ky, kx), bin(-ky, -kx)];
        for p in 0..h * w {
            let mag = s.re.data()[p].hypot(s.im.data()[p]);
            let expect = if peaks.contains(&p) { (h * w) as f64 / 2.0 } else { 0.0 };
            assert!((mag - expect).abs() < 1e-9, "({ky},{kx}) bin {p}: {mag} vs {expect}");
        }
    }
    within(start.elapsed(), 5.0);
    format!("roundtrip {worst_rt:.1e}, Parseval {worst_parseval:.1e}, cosine peaks at forced bins")
}

// 3. Mask algebra.
fn mask_algebra() -> String {
    assert!(hpf_mask(0.0, 8, 8, FilterKind::BinaryHpf).is_all(1.0));
    assert!(hpf_mask(1.0, 8, 8, FilterKind::BinaryHpf).is_all(0.0));
    let mut r_state = stream(3, 100, 1, 0);
    use rand::Rng;
    for _ in 0..10 {
        let r: f64 = r_state.random_range(0.0..1.0);
        for (hk, lk) in [
            (FilterKind::BinaryHpf, FilterKind::BinaryLpf),
            (FilterKind::GaussianHpf, FilterKind::GaussianLpf),
        ] {
            let hp = hpf_mask(r, 8, 8, hk);
            let lp = hpf_mask(r, 8, 8, lk);
            assert!(hp.mask.iter().zip(&lp.mask).all(|(a, b)| (a + b - 1.0).abs() < 1e-12), "r = {r}");
        }
    }
    // Brute force: signed frequencies of an 8-point axis are -4..=3; the
    // stop square at r = 0.5 keeps |k| <= 0.5 * 8 / 2 on both axes.
    let mut brute = 0;
    for ky in -4i64..=3 {
        for kx in -4i64..=3 {
            if (ky.abs() as f64) <= 2.0 && (kx.abs() as f64) <= 2.0 {
                brute += 1;
            }
        }
    }
    let zeros = hpf_mask(0.5, 8, 8, FilterKind::BinaryHpf).zero_count();
    assert_eq!(zeros, brute);
    format!("endpoints exact, complements exact for 10 radii, zero count {zeros} = enumeration {brute}")
}

// 4. Noise-init equivalences.
fn noise_equivalences() -> String {
    let start = Instant::now();
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let vs = make_view_ring(4, 90.0, 16, 16).unwrap();
    let b = sample_bundle(&vs, &s, 3, 0.0, 5).unwrap();
    for i in 0..4 {
        assert_eq!(coordinate_noise(&b, i).unwrap(), b.eps_shared, "view {i}");
    }
    let half = b.eps_shared.lincomb(0.5, &b.eps_view[1], 0.5).unwrap();
    assert_eq!(mixed_noise(&b, 1, 1.0).unwrap(), half);
    // At w = 0 two views share sqrt(abar) eps_shared, so corr = abar_T.
    let ab = s.alpha_bar[100];
    let two = make_view_ring(2, 90.0, 16, 16).unwrap();
    let mut acc = Pearson::default();
    let mut seed = 0;
    while acc.count() < 100_000 {
        let b = sample_bundle(&two, &s, 3, 0.0, 1000 + seed).unwrap();
        let (z0, z1) = (init_latent(&b, 0).unwrap(), init_latent(&b, 1).unwrap());
        for (x, y) in z0.data().iter().zip(z1.data()) {
            acc.push(*x, *y);
        }
        seed += 1;
    }
    let n = acc.count() as f64;
    let rho = acc.rho();
    let sigma = (1.0 - ab * ab) / n.sqrt();
    assert!((rho - ab).abs() < 3.0 * sigma, "rho {rho} vs {ab} (3 sigma {})", 3.0 * sigma);
    within(start.elapsed(), 30.0);
    format!("w=0 bit-equal, half blend exact, rho {rho:.4} vs abar_T {ab:.4} (3 sigma {:.4}, n {n})", 3.0 * sigma)
}

// 5. Coordinate-noise spectral claim.
fn spectral_claim() -> String {
    let start = Instant::now();
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let vs = make_view_ring(8, 90.0, 32, 32).unwrap();
    let bands = 4;
    let mut pooled = vec![Pearson::default(); bands];
    for scene in 0..20 {
        let b = sample_bundle(&vs, &s, 3, 0.5, 500 + scene).unwrap();
        let z: Vec<Tensor> = (0..8).map(|i| init_latent(&b, i).unwrap()).collect();
        let sums = band_correlation_sums(&z, &vs, bands, Alignment::Correspondence).unwrap();
        for (p, q) in pooled.iter_mut().zip(&sums) {
            p.merge(q);
        }
    }
    let report = report_from_sums(&pooled, Alignment::Correspondence);
    let rhos: Vec<f64> = report.bands.iter().map(|b| b.rho).collect();
    assert!(rhos[0] > rhos[bands - 1], "band correlations {rhos:?}");
    within(start.elapsed(), 60.0);
    format!("band rho low->high {:?}", rhos.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>())
}

fn tiny_arch() -> Architecture {
    Architecture {
        image_size: 8,
        widths: [4, 8],
        time_dim: 8,
        pe_bands: 1,
        vocab: 16,
        token_dim: 4,
        key_dim: 4,
        fba_levels: vec![Level::Level1, Level::Level2],
        ..Architecture::default()
    }
}

// 6. FBA init-identity.
fn fba_init_identity() -> String {
    let arch = Architecture::default();
    let params = DenoiserParams::init(&arch, 11).unwrap();
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let vs = make_view_ring(4, 90.0, 16, 16).unwrap();
    let geometry = NetGeometry::build(&params, &vs).unwrap();
    let prompts: Vec<Vec<usize>> = (0..4).map(|i| vec![i, 5 + i, 9 + i]).collect();
    let full = RunSettings::default();
    let off = RunSettings::base_only();
    for k in 0..10u64 {
        let t = 1 + (k as usize * 37) % 100;
        let z: Vec<Tensor> = (0..4).map(|i| noise(&[3, 16, 16], 200 + 10 * k + i)).collect();
        let b = sample_bundle(&vs, &s, 3, 0.5, 300 + k).unwrap();
        let hat: Vec<Tensor> = (0..4).map(|i| coordinate_noise(&b, i).unwrap()).collect();
        let g = collect_g_features(&params, &hat, &b.eps_view, t, &s).unwrap();
        let with = ForwardCtx {
            t,
            t_max: 100,
            run: &full,
            geometry: Some(&geometry),
            prompts: Some(&prompts),
            g: Some(&g),
        };
        let without = ForwardCtx {
            run: &off,
            geometry: None,
            prompts: None,
            g: None,
            ..with
        };
        let (a, _) = forward(&params, &z, &with).unwrap();
        let (b, _) = forward(&params, &z, &without).unwrap();
        assert_eq!(a, b, "input {k} differs");
    }
    "10 random inputs bit-identical".into()
}

fn dense_attention(q_in: &Tensor, keys: &Tensor, p: &FbaBlockParams, scaled: bool) -> Tensor {
    let c = q_in.shape()[0];
    let nq = q_in.len() / c;
    let nk = keys.shape()[1];
    let proj = |w: &Tensor, x: &Tensor, n: usize, col: usize, row: usize| -> f64 {
        (0..c).map(|k| w.data()[row * c + k] * x.data()[k * n + col]).sum()
    };
    let mut out = vec![0.0; c * nq];
    for i in 0..nq {
        let logits: Vec<f64> = (0..nk)
            .map(|j| {
                let dot: f64 = (0..c).map(|r| proj(&p.wq, q_in, nq, i, r) * proj(&p.wk, keys, nk, j, r)).sum();
                if scaled {
                    dot / (c as f64).sqrt()
                } else {
                    dot
                }
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for r in 0..c {
            out[r * nq + i] = (0..nk).map(|j| e[j] / z * proj(&p.wv, keys, nk, j, r)).sum();
        }
    }
    Tensor::from_vec(q_in.shape(), out).unwrap()
}

// 7. Attention properties.
fn attention_properties() -> String {
    let c = 4;
    let p = FbaBlockParams::new(c, 1, &mut stream(7, 100, 2, 0));
    let f = noise(&[c, 3, 3], 40);
    let keys = noise(&[c, 11], 41);
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone().reshape(&[c, 9]).unwrap());
    let kv = tape.constant(keys.clone());
    let wq = tape.constant(p.wq.clone());
    let wk = tape.constant(p.wk.clone());
    let wv = tape.constant(p.wv.clone());
    let (_, weights) = attention_tape(&mut tape, fv, kv, wq, wk, wv, true);
    let wts = tape.value(weights);
    let row_err = wts
        .data()
        .chunks(11)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(row_err < 1e-5, "row sums off by {row_err:e}");
    assert!(wts.data().iter().all(|&v| v >= 0.0));
    let base = fba_attention(&f, &keys, &p, true).unwrap();
    let perm = [5, 2, 9, 0, 10, 7, 1, 3, 8, 6, 4];
    let shuffled = Tensor::from_fn(&[c, 11], |k| keys.data()[(k / 11) * 11 + perm[k % 11]]);
    let perm_err = fba_attention(&f, &shuffled, &p, true).unwrap().max_abs_diff(&base);
    assert!(perm_err < 1e-6, "permutation changed output by {perm_err:e}");
    // Hand case: 2 queries, 3 keys.
    let q2 = noise(&[c, 1, 2], 42);
    let k3 = noise(&[c, 3], 43);
    let hand_err = fba_attention(&q2, &k3, &p, true)
        .unwrap()
        .max_abs_diff(&dense_attention(&q2, &k3, &p, true));
    assert!(hand_err < 1e-12, "2x3 case differs by {hand_err:e}");
    format!("row sums {row_err:.1e}, permutation {perm_err:.1e}, 2x3 vs dense {hand_err:.1e}")
}

/// Central-difference check of a scalar loss against its tape gradient
/// over the given `(leaf, index)` probes.
fn fd_check(
    leaves: &[Tensor],
    build: &dyn Fn(&mut Tape, &[mvdiff::autograd::Var]) -> mvdiff::autograd::Var,
    probes: &[(usize, usize)],
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = leaves.iter().map(|l| tape.param(l.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    let eval = |leaf: usize, idx: usize, d: f64| {
        let mut t = Tape::new();
        let vs: Vec<_> = leaves
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let mut v = l.clone();
                if k == leaf {
                    v.data_mut()[idx] += d;
                }
                t.constant(v)
            })
            .collect();
        let r = build(&mut t, &vs);
        t.value(r).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(leaf, idx) in probes {
        let fd = (eval(leaf, idx, h) - eval(leaf, idx, -h)) / (2.0 * h);
        let a = grads.get(vars[leaf]).map_or(0.0, |g| g.data()[idx]);
        let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
        assert!(err <= 1e-3, "leaf {leaf} index {idx}: fd {fd:e} analytic {a:e}");
        worst = worst.max(err);
    }
    worst
}

fn every_index(leaves: &[Tensor], stride: usize) -> Vec<(usize, usize)> {
    leaves
        .iter()
        .enumerate()
        .flat_map(|(k, l)| (0..l.len()).step_by(stride).map(move |i| (k, i)))
        .collect()
}

fn weighted_sum(tape: &mut Tape, v: mvdiff::autograd::Var, seed: u64) -> mvdiff::autograd::Var {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(noise(&shape, seed));
    let prod = tape.mul(v, w);
    let n = tape.value(prod).len();
    let flat = tape.reshape(prod, &[1, n]);
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let s = tape.matmul(flat, ones);
    tape.reshape(s, &[])
}

fn randomize(params: &mut DenoiserParams, names: &[String], seed: u64) {
    for (k, name) in names.iter().enumerate() {
        let shape = params.get(name).unwrap().shape().to_vec();
        params.set(name, noise(&shape, seed + k as u64).scale(0.3)).unwrap();
    }
}

// 8. Gradient checks.
fn gradient_checks() -> String {
    let start = Instant::now();
    // Attention core over queries, targets and all three projections.
    let c = 4;
    let p = FbaBlockParams::new(c, 1, &mut stream(8, 100, 0, 0));
    let leaves = vec![noise(&[c, 6], 50), noise(&[c, 9], 51), p.wq.clone(), p.wk.clone(), p.wv.clone()];
    let attn = fd_check(
        &leaves,
        &|t, v| {
            let (out, _) = attention_tape(t, v[0], v[1], v[2], v[3], v[4], true);
            weighted_sum(t, out, 52)
        },
        &every_index(&leaves, 1),
    );
    // Whole FBA block: warp, displacement encoding, guidance fusion and the
    // residual convolution (made non-zero so every weight matters).
    let vs = make_view_ring(3, 90.0, 6, 6).unwrap();
    let geo = LevelGeometry::build(&vs, 6, 6, 1).unwrap();
    let settings = FbaSettings::default();
    let g: Vec<Tensor> = (0..3).map(|i| noise(&[c, 6, 6], 60 + i)).collect();
    let g_bar = filter_guidance(&g, 30, 100, &settings).unwrap();
    let mut blk = FbaBlockParams::new(c, 1, &mut stream(9, 100, 0, 0));
    blk.resid_w = noise(&[c, c, 1, 1], 61);
    blk.resid_b = noise(&[c], 62);
    let mut leaves: Vec<Tensor> = (0..3).map(|i| noise(&[c, 6, 6], 70 + i)).collect();
    leaves.extend([blk.wq, blk.wk, blk.wv, blk.pe_proj, blk.resid_w, blk.resid_b]);
    let block = fd_check(
        &leaves,
        &|t, v| {
            let vars = mvdiff::attention::FbaVars {
                wq: v[3],
                wk: v[4],
                wv: v[5],
                pe_proj: v[6],
                resid_w: v[7],
                resid_b: v[8],
            };
            let out = fba_block_tape(t, &v[..3], Some(&g_bar), &geo, &vars, &settings).unwrap();
            let parts: Vec<_> = out.iter().enumerate().map(|(k, &o)| weighted_sum(t, o, 80 + k as u64)).collect();
            let a = t.add(parts[0], parts[1]);
            t.add(a, parts[2])
        },
        &every_index(&leaves, 3),
    );
    // Prompt cross-attention loss against fixed reference maps.
    let xp = XaParams::new(c, 5, 3, &mut stream(10, 100, 0, 0));
    let tokens = noise(&[5, 3], 90);
    let feats: Vec<Tensor> = (0..2).map(|i| noise(&[c, 2, 2], 91 + i)).collect();
    let maps0 = vec![AttentionMap {
        weights: {
            let raw = noise(&[8, 3], 93).map(f64::exp);
            Tensor::from_fn(&[8, 3], |k| raw.data()[k] / raw.data()[(k / 3) * 3..(k / 3) * 3 + 3].iter().sum::<f64>())
        },
        layer_id: "mid".into(),
    }];
    let mut leaves = feats.clone();
    leaves.extend([tokens, xp.wq.clone(), xp.wk.clone(), xp.wv.clone(), noise(&[c, c, 1, 1], 94), xp.out_b.clone()]);
    let xa = fd_check(
        &leaves,
        &|t, v| {
            let vars = mvdiff::attention::XaVars {
                wq: v[3],
                wk: v[4],
                wv: v[5],
                out_w: v[6],
                out_b: v[7],
            };
            let (outs, map) = xa_tape(t, &v[..2], v[2], &vars, (2, 2)).unwrap();
            let loss = xa_loss_tape(t, &[("mid".into(), map)], &maps0).unwrap().unwrap();
            let extra = weighted_sum(t, outs[1], 95);
            let e = t.scale(extra, 0.1);
            t.add(loss, e)
        },
        &every_index(&leaves, 1),
    );
    // Full toy denoiser with every partition trainable.
    let arch = tiny_arch();
    let mut params = DenoiserParams::init(&arch, 12).unwrap();
    assert!(params.count(None) <= 5000, "{} parameters", params.count(None));
    let added: Vec<String> = params
        .entries()
        .iter()
        .filter(|e| e.name.ends_with("resid_w") || e.name.ends_with("out_w"))
        .map(|e| e.name.clone())
        .collect();
    randomize(&mut params, &added, 300);
    let s = make_schedule(20, 1e-3, 0.05).unwrap();
    let vs = make_view_ring(3, 90.0, 8, 8).unwrap();
    let geometry = NetGeometry::build(&params, &vs).unwrap();
    let b = sample_bundle(&vs, &s, 3, 0.5, 13).unwrap();
    let hat: Vec<Tensor> = (0..3).map(|i| coordinate_noise(&b, i).unwrap()).collect();
    let t = 9;
    let g = collect_g_features(&params, &hat, &b.eps_view, t, &s).unwrap();
    let g0 = collect_g_features(&params, &hat, &b.eps_view, 0, &s).unwrap();
    let z0: Vec<Tensor> = (0..3).map(|i| noise(&[3, 8, 8], 400 + i).scale(0.5)).collect();
    let prompts: Vec<Vec<usize>> = (0..3).map(|i| vec![i, 6, 10 + i]).collect();
    let run = RunSettings::default();
    let maps0 = collect_noise_free_maps(&params, &geometry, &z0, &prompts, &run, 20, Some(&g0)).unwrap();
    let zt: Vec<Tensor> = (0..3).map(|i| forward_sample(&z0[i], t, &b.eps_view[i], &s).unwrap()).collect();
    let loss = |p: &DenoiserParams, tape: &mut Tape, g: &GFeatures| {
        let bound = Bound::new(p, tape, &[Partition::Base, Partition::Fba, Partition::Xa]);
        let ctx = ForwardCtx {
            t,
            t_max: 20,
            run: &run,
            geometry: Some(&geometry),
            prompts: Some(&prompts),
            g: Some(g),
        };
        let z: Vec<_> = zt.iter().map(|x| tape.constant(x.clone())).collect();
        let out = forward_tape(p, &bound, tape, &z, &ctx).unwrap();
        let mut total = weighted_sum(tape, out.eps[0], 500);
        for (k, &e) in out.eps.iter().enumerate().skip(1) {
            let w = weighted_sum(tape, e, 500 + k as u64);
            total = tape.add(total, w);
        }
        let xa = xa_loss_tape(tape, &out.maps, &maps0).unwrap().unwrap();
        let xa = tape.scale(xa, 10.0);
        (tape.add(total, xa), bound)
    };
    let mut tape = Tape::new();
    let (root, bound) = loss(&params, &mut tape, &g);
    let grads = tape.backward(root);
    let mut probe_rng = stream(14, 100, 0, 0);
    use rand::Rng;
    let mut worst_net: f64 = 0.0;
    let mut probed = 0;
    for k in 0..params.len() {
        let n = params.entries()[k].value.len();
        for _ in 0..2 {
            let idx = probe_rng.random_range(0..n);
            let eval = |d: f64| {
                let mut q = params.clone();
                q.value_mut(k).data_mut()[idx] += d;
                let mut t = Tape::new();
                let (r, _) = loss(&q, &mut t, &g);
                t.value(r).item()
            };
            let h = 1e-5;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads.get(bound.vars[k]).map_or(0.0, |gr| gr.data()[idx]);
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
            assert!(err <= 1e-3, "{}[{idx}]: fd {fd:e} analytic {a:e}", params.entries()[k].name);
            worst_net = worst_net.max(err);
            probed += 1;
        }
    }
    within(start.elapsed(), 120.0);
    format!(
        "max rel err: attention {attn:.1e}, FBA block {block:.1e}, xa loss {xa:.1e}, denoiser {worst_net:.1e} ({probed} probes, {} params)",
        params.count(None)
    )
}

fn tiny_data(n_scenes: usize) -> Vec<MultiViewExample> {
    let vs = make_view_ring(8, 90.0, 8, 8).unwrap();
    (0..n_scenes)
        .map(|s| MultiViewExample {
            view_set: vs.clone(),
            images: (0..8).map(|i| noise(&[3, 8, 8], 600 + 8 * s as u64 + i).scale(0.5)).collect(),
            prompts: (0..8).map(|i| vec![i % 5, 5 + i % 4, 9 + i % 7]).collect(),
        })
        .collect()
}

// 9. Training paradigm.
fn training_paradigm() -> String {
    let arch = tiny_arch();
    let mut params = DenoiserParams::init(&arch, 15).unwrap();
    let base_before = params.partition_values(Partition::Base);
    let fba_before = params.partition_values(Partition::Fba);
    let s = make_schedule(20, 1e-3, 0.05).unwrap();
    let data = tiny_data(2);
    let run = RunSettings::default();
    let cfg = TrainConfig {
        steps: 4,
        batch: 1,
        lambda: 10.0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(Phase::Fba, &params, 16);
    train_fba(&mut params, &data, &s, &cfg, &run, &mut state, |_, _| {}).unwrap();
    assert_eq!(params.partition_values(Partition::Base), base_before, "base partition moved");
    assert_ne!(params.partition_values(Partition::Fba), fba_before, "FBA partition did not train");
    let mut worst: f64 = 0.0;
    for r in &state.history {
        worst = worst.max((r.total - (r.ldm + cfg.lambda * r.xa)).abs());
    }
    assert!(worst <= 1e-6, "decomposition off by {worst:e}");
    assert!(state.history.iter().any(|r| r.xa > 0.0), "cross-attention loss never active");
    let batch = draw_fba_batch(&params, &data, &s, &cfg, 17, 0).unwrap();
    let zero = fba_loss(&params, &batch, &s, &run, 0.0, Phase::Fba.trainable()).unwrap();
    let (ldm, total) = (zero.tape.value(zero.ldm).item(), zero.tape.value(zero.total).item());
    assert_eq!(ldm, total, "lambda = 0 total differs from ldm");
    format!("base bit-unchanged over {} steps, decomposition {worst:.1e}, lambda=0 total == ldm", cfg.steps)
}

// 10. Geometry oracles.
fn geometry_oracles() -> String {
    let n = 8;
    let size = 32;
    let vs = make_view_ring(n, 90.0, size, size).unwrap();
    // Ray-cast oracle: rotate each pixel ray by the yaw difference and test
    // whether it lands inside the other image.
    let f = 0.5 / (45f64.to_radians()).tan();
    let visible = |i: usize, j: usize, r: usize, c: usize| {
        let (x, y) = ((c as f64 + 0.5) / size as f64 - 0.5, (r as f64 + 0.5) / size as f64 - 0.5);
        let d = [x / f, y / f, 1.0];
        let a = ((i as f64 - j as f64) * 360.0 / n as f64).to_radians();
        let (sa, ca) = a.sin_cos();
        let dj = [ca * d[0] + sa * d[2], d[1], -sa * d[0] + ca * d[2]];
        if dj[2] <= 0.0 {
            return false;
        }
        let (u, v) = (dj[0] / dj[2] * f + 0.5, dj[1] / dj[2] * f + 0.5);
        (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)
    };
    for i in 0..n {
        let j = (i + 1) % n;
        let corr = correspondence(&vs, i, j).unwrap();
        let mask = overlap_mask(&corr, size, size).unwrap();
        for c in 0..size {
            let oracle = (0..size).filter(|&r| visible(i, j, r, c)).count();
            let got = (0..size).filter(|&r| corr.valid[r * size + c]).count();
            let m = (0..size).map(|r| mask.mask[r * size + c]).sum::<f64>();
            assert_eq!(got, oracle, "pair ({i},{j}) column {c}");
            assert_eq!(m, oracle as f64, "mask ({i},{j}) column {c}");
        }
        let opposite = correspondence(&vs, i, (i + n / 2) % n).unwrap();
        assert_eq!(opposite.valid_fraction(), 0.0, "view {i} sees its opposite");
    }
    // Warp composition on a smooth input.
    let hi = make_view_ring(n, 90.0, 64, 64).unwrap();
    let smooth = |i: usize| {
        Tensor::from_fn(&[1, 64, 64], |p| {
            let d = hi.world_ray(i, (p % 64) as f64 / 64.0 + 0.5 / 64.0, (p / 64) as f64 / 64.0 + 0.5 / 64.0);
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            0.5 + 0.2 * d[0] / len + 0.1 * d[1] / len
        })
    };
    let (i, j) = (2, 3);
    let fwd = correspondence(&hi, i, j).unwrap();
    let back = correspondence(&hi, j, i).unwrap();
    let img_i = smooth(i);
    let in_j = warp_features(&img_i, &back).unwrap();
    let round = warp_features(&in_j, &fwd).unwrap();
    let interior = |corr: &mvdiff::Correspondence, p: usize| {
        let [x, y] = corr.map_u[p];
        corr.valid[p] && (x * 64.0 - 0.5) >= 0.0 && (x * 64.0 - 0.5) <= 63.0 && (y * 64.0 - 0.5) >= 0.0 && (y * 64.0 - 0.5) <= 63.0
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for p in 0..64 * 64 {
        if !interior(&fwd, p) {
            continue;
        }
        let [x, y] = fwd.map_u[p];
        let q0 = ((y * 64.0 - 0.5).floor() as usize, (x * 64.0 - 0.5).floor() as usize);
        let taps_ok = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .all(|(dr, dc)| {
                let (r, c) = ((q0.0 + dr).min(63), (q0.1 + dc).min(63));
                interior(&back, r * 64 + c)
            });
        if !taps_ok {
            continue;
        }
        worst = worst.max((round.data()[p] - img_i.data()[p]).abs());
        count += 1;
    }
    assert!(count > 500, "only {count} interior pixels");
    assert!(worst < 1e-4, "warp composition error {worst:e}");
    format!("per-column overlap matches ray casting, opposite overlap empty, i->j->i error {worst:.1e} over {count} px")
}

fn ratio_stats(values: &[f64]) -> (f64, f64) {
    mean_ci95(values)
}

// 11. Directional ablation reproduction.
fn ablation_reproduction(root: &Path) -> String {
    let start = Instant::now();
    let methods = [NoiseMode::Coordinate, NoiseMode::Shared, NoiseMode::Independent];
    let mut per_method: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut seed_means: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut train_time = Duration::ZERO;
    for seed in 0..3u64 {
        let mut cfg = ablation_config();
        cfg.seed = seed;
        cfg.out_dir = root.join(format!("seed_{seed}"));
        assert!(cfg.dataset.scenes >= 32 && cfg.t_max == 100);
        gen_data(&cfg).unwrap();
        let t0 = Instant::now();
        train_base_stage(&cfg, |_, _| {}).unwrap();
        let params = train_fba_stage(&cfg, |_, _| {}).unwrap();
        train_time += t0.elapsed();
        for (k, m) in methods.iter().enumerate() {
            let mut c = cfg.clone();
            c.noise.mode = *m;
            let dir = cfg.out_dir.join("samples").join(m.name());
            sample_into(&c, &params, &dir, m.name()).unwrap();
            let ratios: Vec<f64> = evaluate_samples(&c, &dir).unwrap().iter().map(|r| r.psnr_ratio).collect();
            seed_means[k].push(ratios.iter().sum::<f64>() / ratios.len() as f64);
            per_method[k].extend(ratios);
        }
    }
    let stats: Vec<(f64, f64)> = per_method.iter().map(|v| ratio_stats(v)).collect();
    let mut lines = Vec::new();
    for (k, m) in methods.iter().enumerate() {
        lines.push(format!(
            "{} {:.4} ± {:.4} (seeds {:?})",
            m.name(),
            stats[k].0,
            stats[k].1,
            seed_means[k].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ));
    }
    let mut verdicts = Vec::new();
    for (a, b) in [(0, 1), (1, 2)] {
        let (ma, ca) = stats[a];
        let (mb, cb) = stats[b];
        let name = format!("{} >= {}", methods[a].name(), methods[b].name());
        if ma >= mb {
            verdicts.push(format!("{name} holds"));
        } else if mb - ma <= ca + cb {
            verdicts.push(format!("{name} tied within 95% CI (diff {:.4} <= {:.4})", mb - ma, ca + cb));
        } else {
            panic!("{name} reversed beyond CI: {}", lines.join("; "));
        }
    }
    format!(
        "{}; {}; training {:.0} s for 3 seeds, total {:.0} s",
        lines.join("; "),
        verdicts.join("; "),
        train_time.as_secs_f64(),
        start.elapsed().as_secs_f64()
    )
}

fn ablation_config() -> ExperimentConfig {
    let text = r#"
T = 100
[dataset]
scenes = 40
eval_scenes = 8
[fba]
layers = ["level2"]
[train]
base_steps = 1500
fba_steps = 300
"#;
    ExperimentConfig::from_toml(text).unwrap()
}

// 12. Metric sanity.
fn metric_sanity() -> String {
    let vs: ViewSet = make_view_ring(8, 90.0, 16, 16).unwrap();
    let gt: Vec<Tensor> = (0..8).map(|i| noise(&[3, 16, 16], 700 + i).map(|v| 0.5 + 0.2 * v)).collect();
    let opts = PsnrOptions::default();
    let ratio = psnr_ratio(&gt, &gt, &vs, &opts).unwrap();
    assert_eq!(ratio, 1.0);
    let same = vec![gt[0].clone(); 4];
    assert_eq!(intra_distance(&same).unwrap(), 0.0);
    let a = Tensor::full(&[3, 16, 16], 0.1);
    let b = Tensor::full(&[3, 16, 16], 0.2);
    let mse = a.sub(&b).unwrap().sum_sq() / a.len() as f64;
    let db = psnr_from_mse(mse, 100.0);
    assert!((db - 20.0).abs() < 1e-12, "{db}");
    // The same offset between every pair of neighbours on the ring.
    let alternating: Vec<Tensor> = (0..8).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
    let psnr = overlap_psnr(&alternating, &vs, &opts).unwrap();
    assert!((psnr.mean_db - 20.0).abs() < 1e-12, "{}", psnr.mean_db);
    format!("ratio {ratio}, intra 0, offset PSNR {db:.12} dB")
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let root = scratch.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> String>)> = vec![
        ("diffusion identities", Box::new(diffusion_identities)),
        ("FFT suite", Box::new(fft_suite)),
        ("mask algebra", Box::new(mask_algebra)),
        ("noise-init equivalences", Box::new(noise_equivalences)),
        ("coordinate-noise spectral claim", Box::new(spectral_claim)),
        ("FBA init-identity", Box::new(fba_init_identity)),
        ("attention properties", Box::new(attention_properties)),
        ("gradient checks", Box::new(gradient_checks)),
        ("training paradigm", Box::new(training_paradigm)),
        ("geometry oracles", Box::new(geometry_oracles)),
        ("directional ablation reproduction", Box::new(move || ablation_reproduction(&root))),
        ("metric sanity", Box::new(metric_sanity)),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name} ({secs:.1} s): {detail}"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("FAIL criterion {id:>2} {name} ({secs:.1} s): {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
