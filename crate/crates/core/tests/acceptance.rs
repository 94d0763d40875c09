//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use msdftvnet::aggregate::{aggregate, ScaleWeightSet};
use msdftvnet::autodiff::Tape;
use msdftvnet::data::{generate_synthetic, split_normalize, window_dataset, Dataset, Split, SyntheticSpec};
use msdftvnet::deform::{deform_conv3d, gen_alpha, gen_offsets, offset_bound, pool_context, DeformableKernel};
use msdftvnet::gradcheck::{check_model, random_tensor, randomize_zero_params, Tolerance};
use msdftvnet::model::{ModelConfig, ModelState};
use msdftvnet::params::ParamStore;
use msdftvnet::patching::{patch_len_for, reshape_3d, split_patches, unpatchify};
use msdftvnet::pipeline::{fit, Forecaster, DEFAULT_SPLIT};
use msdftvnet::spectral::{dft_amplitudes, topk_periods, SpectralProfile};
use msdftvnet::train::{evaluate, forecasts, metrics, train, TrainOptions};
use msdftvnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_correctness() -> Outcome {
    let cfg = ModelConfig {
        lookback: 16,
        horizon: 4,
        channels: 2,
        embed_dim: 4,
        scales: 2,
        taps: 3,
        hidden: 16,
        patch_taps: 4,
        seed: 42,
    };
    let start = Instant::now();
    let r = check_model(&cfg, 2, 42, &Tolerance::default()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(r.checked == cfg.param_count(), || {
        format!("checked {} of {} parameters", r.checked, cfg.param_count())
    })?;
    ensure(r.passed(), || {
        format!("{} mismatches, first {:?}", r.mismatches.len(), r.mismatches.first())
    })?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} gradients, max rel error {:.2e}, {secs:.1}s",
        r.checked, r.max_error
    ))
}

/// Direct O(L²) DFT amplitude of bins 1..=L/2 averaged over channels.
fn naive_amplitudes(x: &[f64], len: usize, channels: usize) -> Vec<f64> {
    (1..=len / 2)
        .map(|f| {
            let mut total = 0.0;
            for c in 0..channels {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..len {
                    let ang = -2.0 * PI * (f * t % len) as f64 / len as f64;
                    re += x[t * channels + c] * ang.cos();
                    im += x[t * channels + c] * ang.sin();
                }
                total += (re * re + im * im).sqrt();
            }
            total / channels as f64
        })
        .collect()
}

fn spectral_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.gen_range(8..=128);
        let channels = rng.gen_range(1..=3);
        let x = random_tensor(&mut rng, &[len, channels]);
        let fast = dft_amplitudes(&x).map_err(err)?;
        let slow = naive_amplitudes(x.data(), len, channels);
        for (a, b) in fast.data().iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let sine = Tensor::new(&[96, 1], (0..96).map(|t| (2.0 * PI * t as f64 / 24.0).sin()).collect()).map_err(err)?;
    let p = topk_periods(&dft_amplitudes(&sine).map_err(err)?, 1, 96).map_err(err)?;
    ensure(p.periods == [24], || format!("sine period detected as {:?}", p.periods))?;
    Ok(format!("max deviation {worst:.2e}; sine period {}", p.periods[0]))
}

/// Static convolution over the sub-patch axis with clamped borders.
fn static_conv(x: &Tensor, w: &Tensor, shift: f64) -> Vec<f64> {
    let (n, two, half, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let taps = w.shape()[0];
    let mut out = vec![0.0; n * two * half * c];
    for a in 0..n {
        for s in 0..two {
            for t in 0..half {
                let mut acc: Option<Vec<f64>> = None;
                for k in 0..taps {
                    let pos = t as f64 + k as f64 - (taps / 2) as f64 + shift;
                    let src = pos.clamp(0.0, (half - 1) as f64) as usize;
                    let mut term = vec![0.0; c];
                    for (j, tj) in term.iter_mut().enumerate() {
                        for i in 0..c {
                            *tj += x.at(&[a, s, src, i]) * w.at(&[k, i, j]);
                        }
                    }
                    acc = Some(match acc {
                        Some(prev) => prev.iter().zip(&term).map(|(p, q)| p + q).collect(),
                        None => term,
                    });
                }
                let base = ((a * two + s) * half + t) * c;
                out[base..base + c].copy_from_slice(&acc.unwrap());
            }
        }
    }
    out
}

fn deformable_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for (len, p, cm) in [(24usize, 8usize, 3usize), (30, 6, 4), (16, 16, 2), (40, 12, 5)] {
        let mut store = ParamStore::new();
        DeformableKernel::init(&mut store, &mut rng, "k", 3, cm, cm);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let kern = DeformableKernel::bind(&bound, "k", &tape).map_err(err)?;
        let x = tape.constant(random_tensor(&mut rng, &[len, cm]));
        let patches = split_patches(&mut tape, x, p).map_err(err)?;
        let pt = reshape_3d(&mut tape, patches).map_err(err)?;
        let (vi, vo) = pool_context(&mut tape, &pt).map_err(err)?;
        let alpha = gen_alpha(&mut tape, vi, vo, &kern).map_err(err)?;
        let delta = gen_offsets(&mut tape, vi, vo, &kern, offset_bound(p)).map_err(err)?;
        let out = deform_conv3d(&mut tape, &pt, kern.base, alpha, delta).map_err(err)?;
        let expect = static_conv(tape.value(pt.data), store.get("k.base").unwrap(), 0.0);
        ensure(tape.value(out.data).data() == expect.as_slice(), || {
            format!("zero heads differ from static conv at L={len}, P={p}")
        })?;

        // Δ = +1 with identity centre tap shifts by one step, clamped at the border
        let mut ident = Tensor::zeros(&[3, cm, cm]);
        for i in 0..cm {
            ident.data_mut()[(cm + i) * cm + i] = 1.0;
        }
        let n = pt.num_patches(&tape);
        let w = tape.constant(ident.clone());
        let ones = tape.constant(Tensor::full(&[n, 3], 1.0));
        let out = deform_conv3d(&mut tape, &pt, w, ones, ones).map_err(err)?;
        let xin = tape.value(pt.data);
        let half = xin.shape()[2];
        let mut shifted = Vec::with_capacity(xin.numel());
        for a in 0..n {
            for s in 0..2 {
                for t in 0..half {
                    for i in 0..cm {
                        shifted.push(xin.at(&[a, s, (t + 1).min(half - 1), i]));
                    }
                }
            }
        }
        ensure(tape.value(out.data).data() == shifted.as_slice(), || {
            format!("Δ=+1 is not a one-step shift at L={len}, P={p}")
        })?;
        ensure(static_conv(xin, &ident, 1.0) == shifted, || "oracle self-check".into())?;
        cases += 1;
    }
    Ok(format!("{cases} configurations bit-exact"))
}

fn random_window(rng: &mut ChaCha8Rng, len: usize, channels: usize) -> Tensor {
    let periods: Vec<f64> = (0..rng.gen_range(1..=3))
        .map(|_| rng.gen_range(2.0..len as f64))
        .collect();
    let data = (0..len * channels)
        .map(|i| {
            let t = (i / channels) as f64;
            periods.iter().map(|p| (2.0 * PI * t / p + i as f64).sin()).sum::<f64>() + rng.gen_range(-0.3..0.3)
        })
        .collect();
    Tensor::new(&[len, channels], data).unwrap()
}

fn offset_bound_holds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut passes = 0;
    let mut saturation: f64 = 0.0;
    let mut periods_seen = std::collections::BTreeSet::new();
    for (variant, len) in [32usize, 48, 64, 96].into_iter().enumerate() {
        let mut cfg = ModelConfig::new(len, 8, 2).with_embed_dim(4);
        cfg.hidden = 8;
        cfg.scales = 3;
        cfg.seed = variant as u64;
        let mut state = ModelState::new(cfg.clone()).map_err(err)?;
        randomize_zero_params(&mut state, 100 + variant as u64, 4.0);
        for _ in 0..250 {
            let x = random_window(&mut rng, len, 2).reshape(&[1, len, 2]).map_err(err)?;
            let mut tape = Tape::new();
            let bound = state.params.bind(&mut tape);
            let trace = state.forward_traced(&mut tape, &bound, &x).map_err(err)?;
            for sc in &trace.scales[0] {
                let limit = (sc.period / 4) as f64;
                ensure(sc.offset_bound == sc.period / 4, || {
                    format!("bound {} for period {}", sc.offset_bound, sc.period)
                })?;
                for &d in tape.value(sc.delta).data() {
                    ensure(d.abs() <= limit, || {
                        format!("|Δ|={} exceeds {limit} (period {})", d.abs(), sc.period)
                    })?;
                    if limit > 0.0 {
                        saturation = saturation.max(d.abs() / limit);
                    }
                }
                periods_seen.insert(sc.period);
            }
            passes += 1;
        }
    }
    ensure(passes == 1000, || format!("{passes} passes"))?;
    Ok(format!(
        "{passes} passes, {} distinct periods, max |Δ|/bound {saturation:.4}",
        periods_seen.len()
    ))
}

fn reshape_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    for len in 2..=64 {
        for p in 2..=len {
            let x = random_tensor(&mut rng, &[len, 3]);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let patches = split_patches(&mut tape, xv, patch_len_for(p)).map_err(err)?;
            let pt = reshape_3d(&mut tape, patches).map_err(err)?;
            let back = unpatchify(&mut tape, &pt, len).map_err(err)?;
            ensure(tape.value(back) == &x, || {
                format!("round trip differs at L={len}, P={p}")
            })?;
            pairs += 1;
        }
    }
    Ok(format!("{pairs} (L, P) pairs bit-exact"))
}

fn synthetic(noise: f64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        periods: vec![24.0, 12.0],
        amplitudes: vec![1.0, 1.0],
        noise_std: noise,
        len: 400,
        channels: 2,
        seed: 42,
    })
    .unwrap()
}

fn overfit_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(96, 24, 2).with_embed_dim(32);
    cfg.scales = 2;
    cfg.seed = 42;
    cfg
}

fn overfit() -> Outcome {
    let cfg = overfit_config();
    let ds = split_normalize(synthetic(0.0), DEFAULT_SPLIT, 96, 24).map_err(err)?;
    let opts = TrainOptions {
        epochs: 200,
        batch_size: 16,
        seed: 42,
        ..TrainOptions::default()
    };
    let start = Instant::now();
    let out = train(&cfg, &ds, &opts).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(out.diverged.is_none(), || format!("diverged: {:?}", out.diverged))?;
    let tw = window_dataset(&ds, Split::Train, 96, 24, 1).map_err(err)?;
    let sw = window_dataset(&ds, Split::Test, 96, 24, 1).map_err(err)?;
    let train_mse = evaluate(&out.best, &ds, &tw, 64).map_err(err)?.mse;
    let test_mse = evaluate(&out.best, &ds, &sw, 64).map_err(err)?.mse;
    let first = out.log.first().map(|e| e.train_mse).unwrap_or(f64::NAN);
    let at50 = out.log.get(49).map(|e| e.train_mse).unwrap_or(f64::NAN);
    ensure(at50 < first, || {
        format!("epoch-50 loss {at50:e} not below epoch-1 loss {first:e}")
    })?;
    ensure(train_mse < 1e-2 && test_mse < 5e-2, || {
        format!("train {train_mse:.3e} (<1e-2), test {test_mse:.3e} (<5e-2)")
    })?;
    ensure(secs < 600.0, || format!("took {secs:.0}s"))?;
    Ok(format!("train {train_mse:.3e}, test {test_mse:.3e}, {secs:.0}s"))
}

fn beats_persistence() -> Outcome {
    let cfg = overfit_config();
    let ds = split_normalize(synthetic(0.1), DEFAULT_SPLIT, 96, 24).map_err(err)?;
    let opts = TrainOptions {
        epochs: 40,
        batch_size: 16,
        seed: 42,
        ..TrainOptions::default()
    };
    let out = train(&cfg, &ds, &opts).map_err(err)?;
    let sw = window_dataset(&ds, Split::Test, 96, 24, 1).map_err(err)?;
    let model = evaluate(&out.best, &ds, &sw, 64).map_err(err)?.mse;

    // repeat the last observed row over the horizon
    let (mut sq, mut n) = (0.0, 0usize);
    for &s in &sw.starts {
        let last = ds.row(s + 95);
        for h in 0..24 {
            for (v, l) in ds.row(s + 96 + h).iter().zip(last) {
                sq += (v - l) * (v - l);
                n += 1;
            }
        }
    }
    let persistence = sq / n as f64;
    ensure(model < persistence, || {
        format!("model {model:.3e} vs persistence {persistence:.3e}")
    })?;
    Ok(format!("model {model:.3e} < persistence {persistence:.3e}"))
}

fn aggregation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let k = rng.gen_range(1..=6);
        let amps: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..500.0)).collect();
        let w = ScaleWeightSet::from_amplitudes(&amps).map_err(err)?;
        let total: f64 = w.weights.data().iter().sum();
        ensure((total - 1.0).abs() <= 1e-9, || format!("weights sum to {total}"))?;
    }
    let rep = random_tensor(&mut rng, &[12, 4]);
    let one = SpectralProfile {
        frequencies: vec![3],
        periods: vec![4],
        amplitudes: vec![7.5],
    };
    let mut tape = Tape::new();
    let r = tape.constant(rep.clone());
    let agg = aggregate(&mut tape, &[r], &one).map_err(err)?;
    ensure(tape.value(agg) == &rep, || "k=1 aggregation is not the identity".into())?;

    let rep2 = random_tensor(&mut rng, &[12, 4]);
    let two = SpectralProfile {
        frequencies: vec![2, 4],
        periods: vec![6, 3],
        amplitudes: vec![2.0, 2.0],
    };
    let r2 = tape.constant(rep2.clone());
    let agg = aggregate(&mut tape, &[r, r2], &two).map_err(err)?;
    let worst = tape
        .value(agg)
        .data()
        .iter()
        .zip(rep.data().iter().zip(rep2.data()))
        .map(|(g, (a, b))| (g - (a + b) / 2.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-12, || format!("equal-amplitude mean off by {worst:e}"))?;
    Ok(format!(
        "weights sum to 1, k=1 identity, equal-amplitude mean within {worst:.1e}"
    ))
}

/// Two-pass reference: collect every error, then average.
fn reference_metrics(preds: &[Tensor], targets: &[Tensor]) -> (f64, f64) {
    let diffs: Vec<f64> = preds
        .iter()
        .zip(targets)
        .flat_map(|(p, y)| p.data().iter().zip(y.data()).map(|(a, b)| a - b).collect::<Vec<_>>())
        .collect();
    let n = diffs.len() as f64;
    (
        diffs.iter().map(|d| d * d).sum::<f64>() / n,
        diffs.iter().map(|d| d.abs()).sum::<f64>() / n,
    )
}

fn metric_definitions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let w = rng.gen_range(1..20);
        let (h, c) = (rng.gen_range(1..30), rng.gen_range(1..5));
        let preds: Vec<Tensor> = (0..w).map(|_| random_tensor(&mut rng, &[h, c])).collect();
        let targets: Vec<Tensor> = (0..w).map(|_| random_tensor(&mut rng, &[h, c])).collect();
        let r = metrics(&preds, &targets).map_err(err)?;
        let (mse, mae) = reference_metrics(&preds, &targets);
        worst = worst.max((r.mse - mse).abs()).max((r.mae - mae).abs());
        let perfect = metrics(&targets, &targets).map_err(err)?;
        ensure(perfect.mse == 0.0 && perfect.mae == 0.0, || {
            "perfect predictions not (0,0)".into()
        })?;
    }

    // evaluate() on a real model agrees with the reference on its own forecasts
    let mut cfg = ModelConfig::new(16, 4, 2).with_embed_dim(4);
    cfg.hidden = 16;
    let state = ModelState::new(cfg).map_err(err)?;
    let ds = split_normalize(synthetic(0.1), DEFAULT_SPLIT, 16, 4).map_err(err)?;
    let tw = window_dataset(&ds, Split::Test, 16, 4, 1).map_err(err)?;
    let r = evaluate(&state, &ds, &tw, 7).map_err(err)?;
    let (p, y) = forecasts(&state, &ds, &tw, 64).map_err(err)?;
    let (mse, mae) = reference_metrics(&p, &y);
    worst = worst.max((r.mse - mse).abs()).max((r.mae - mae).abs());
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    ensure(r.mae * r.mae <= r.mse, || "mae² exceeds mse".into())?;
    Ok(format!("max deviation {worst:.1e}; perfect predictions give (0, 0)"))
}

fn determinism_and_persistence() -> Outcome {
    let mut cfg = ModelConfig::new(32, 8, 2).with_embed_dim(8);
    cfg.hidden = 32;
    cfg.seed = 42;
    let opts = TrainOptions {
        epochs: 4,
        batch_size: 16,
        seed: 42,
        ..TrainOptions::default()
    };
    let (a, log_a) = fit(synthetic(0.1), &cfg, DEFAULT_SPLIT, &opts, |_| {}).map_err(err)?;
    let (b, log_b) = fit(synthetic(0.1), &cfg, DEFAULT_SPLIT, &opts, |_| {}).map_err(err)?;
    let bits = |l: &[msdftvnet::train::EpochLog]| -> Vec<[u64; 3]> {
        l.iter()
            .map(|e| [e.train_mse.to_bits(), e.val_mse.to_bits(), e.lr.to_bits()])
            .collect()
    };
    ensure(bits(&log_a.log) == bits(&log_b.log), || "epoch logs differ".into())?;
    ensure(a == b, || "trained parameters differ".into())?;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.ckpt");
    a.save(&path).map_err(err)?;
    let loaded = Forecaster::load(&path).map_err(err)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let before = a.evaluate_split(synthetic(0.1), split).map_err(err)?;
        let after = loaded.evaluate_split(synthetic(0.1), split).map_err(err)?;
        ensure(
            before.mse.to_bits() == after.mse.to_bits() && before.mae.to_bits() == after.mae.to_bits(),
            || format!("{split} metrics changed after reload"),
        )?;
    }
    Ok(format!(
        "{} identical epochs; reload preserves metrics bit-exactly",
        log_a.log.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 spectral oracle", spectral_oracle),
        ("3 deformable reduction", deformable_reduction),
        ("4 offset bound", offset_bound_holds),
        ("5 reshape round trip", reshape_roundtrip),
        ("6 overfit", overfit),
        ("7 beats persistence", beats_persistence),
        ("8 aggregation properties", aggregation_properties),
        ("9 metric definitions", metric_definitions),
        ("10 determinism and persistence", determinism_and_persistence),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
