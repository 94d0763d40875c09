//! Finite-difference checks for every differentiable operation and for the
//! assembled model.

use msdftvnet::autodiff::{Tape, Var};
use msdftvnet::deform::{deform_conv3d, gen_alpha, gen_offsets, pool_context, DeformableKernel};
use msdftvnet::gradcheck::{check_function, check_model, random_tensor, Report, Tolerance};
use msdftvnet::model::ModelConfig;
use msdftvnet::params::{ParamStore, TwoLayer};
use msdftvnet::patching::{patchify, resample_kernel, reshape_3d, PatchTensor3D, Patches};
use msdftvnet::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Operation-level tolerance.
fn op_tol() -> Tolerance {
    Tolerance {
        relative: 1e-4,
        ..Tolerance::default()
    }
}

fn assert_passed(what: &str, r: &Report) {
    assert!(
        r.passed(),
        "{what}: {} of {} mismatched, first {:?}",
        r.mismatches.len(),
        r.checked,
        r.mismatches.first()
    );
}

fn rand_inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random_tensor(&mut rng, s)).collect()
}

#[test]
fn elementwise_ops() {
    let inputs = rand_inputs(1, &[&[3, 4], &[4]]);
    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
    let cases: [(&str, Build); 8] = [
        ("add", |t, v| t.add(v[0], v[1])),
        ("sub", |t, v| t.sub(v[0], v[1])),
        ("mul", |t, v| t.mul(v[0], v[1])),
        ("relu", |t, v| Ok(t.relu(v[0]))),
        ("tanh", |t, v| Ok(t.tanh(v[0]))),
        ("sum", |t, v| Ok(t.sum(v[0]))),
        ("mean", |t, v| Ok(t.mean(v[0]))),
        ("mean_axis", |t, v| t.mean_axis(v[0], 0)),
    ];
    for (name, f) in cases {
        let r = check_function(&inputs, &op_tol(), 9, f).unwrap();
        assert_passed(name, &r);
    }
}

#[test]
fn matmul_broadcast_batch() {
    let inputs = rand_inputs(2, &[&[2, 3, 4], &[4, 5]]);
    let r = check_function(&inputs, &op_tol(), 3, |t, v| t.matmul(v[0], v[1])).unwrap();
    assert_passed("matmul", &r);
}

#[test]
fn conv1d_with_stride_and_padding() {
    let inputs = rand_inputs(3, &[&[2, 9, 3], &[4, 3, 2]]);
    for (stride, pad) in [(1, 0), (2, 1), (4, 0)] {
        let r = check_function(&inputs, &op_tol(), 4, |t, v| t.conv1d(v[0], v[1], stride, pad)).unwrap();
        assert_passed("conv1d", &r);
    }
}

#[test]
fn softmax_both_axes() {
    let inputs = rand_inputs(4, &[&[3, 5]]);
    for axis in [0, 1] {
        let r = check_function(&inputs, &op_tol(), 5, |t, v| t.softmax(v[0], axis)).unwrap();
        assert_passed("softmax", &r);
    }
}

#[test]
fn sample_linear_input_and_positions() {
    let x = rand_inputs(5, &[&[2, 6, 3]]).remove(0);
    // interior, non-integer positions; some outside the range to exercise clamping
    let pos = Tensor::new(&[2, 4, 1], vec![0.3, 1.7, 4.2, 6.6, -0.4, 2.5, 3.1, 4.9]).unwrap();
    let r = check_function(&[x, pos], &op_tol(), 6, |t, v| t.sample_linear(v[0], v[1], 1)).unwrap();
    assert_passed("sample_linear", &r);
}

#[test]
fn reshape_slice_concat() {
    let inputs = rand_inputs(6, &[&[2, 6], &[2, 3]]);
    let r = check_function(&inputs, &op_tol(), 7, |t, v| {
        let a = t.slice(v[0], 1, 1, 4)?;
        let c = t.concat(&[a, v[1]], 1)?;
        t.reshape(c, &[7, 2])
    })
    .unwrap();
    assert_passed("reshape/slice/concat", &r);
}

#[test]
fn patchify_with_resampled_kernel() {
    let inputs = rand_inputs(7, &[&[10, 3], &[4, 3, 3]]);
    let r = check_function(&inputs, &op_tol(), 8, |t, v| {
        let k = resample_kernel(t, v[1], 6)?;
        Ok(patchify(t, v[0], 6, k)?.data)
    })
    .unwrap();
    assert_passed("patchify", &r);
}

/// Deformable convolution with every generator parameter randomised.
#[test]
fn deformable_block_all_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (n, p, cm) in [(1usize, 4usize, 2usize), (2, 8, 3), (3, 6, 4)] {
        let mut store = ParamStore::new();
        DeformableKernel::init(&mut store, &mut rng, "k", 3, cm, cm);
        let names: Vec<String> = store.names().to_vec();
        let mut inputs: Vec<Tensor> = names
            .iter()
            .map(|name| random_tensor(&mut rng, store.get(name).unwrap().shape()))
            .collect();
        inputs.push(random_tensor(&mut rng, &[n * p, cm]));
        let bound_r = (p + 1) / 4 + 1;
        let r = check_function(&inputs, &Tolerance::default(), 10, |t, v| {
            // parameter order follows DeformableKernel::init
            let kern = DeformableKernel {
                base: v[0],
                alpha_intra: TwoLayer {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                },
                alpha_inter: TwoLayer {
                    w1: v[5],
                    b1: v[6],
                    w2: v[7],
                    b2: v[8],
                },
                offset: TwoLayer {
                    w1: v[9],
                    b1: v[10],
                    w2: v[11],
                    b2: v[12],
                },
                taps: 3,
            };
            let x = v[names.len()];
            let data = t.reshape(x, &[n, p, cm])?;
            let pt = reshape_3d(
                t,
                Patches {
                    data,
                    patch_len: p,
                    pad_len: 0,
                },
            )?;
            let (vi, vo) = pool_context(t, &pt)?;
            let alpha = gen_alpha(t, vi, vo, &kern)?;
            let delta = gen_offsets(t, vi, vo, &kern, bound_r)?;
            let out: PatchTensor3D = deform_conv3d(t, &pt, kern.base, alpha, delta)?;
            Ok(out.data)
        })
        .unwrap();
        assert_passed("deformable block", &r);
    }
}

#[test]
fn whole_model_small_config() {
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
    let r = check_model(&cfg, 2, 42, &Tolerance::default()).unwrap();
    assert_passed("model", &r);
    assert_eq!(r.checked, cfg.param_count());
}
