//! Finite-difference gradient checks over every differentiable primitive and
//! every composite network block, at randomized parameters.

use depthdiff_tensor::{grad_check, GradReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserConfig, DownBlock, UpBlock};
use crate::diffusion::{diffusion_loss, forward_diffuse, NoiseSchedule};
use crate::error::Result;
use crate::guidance::{DeformAttn, DepthPyramid, GuidanceConfig, GuidanceExtractor, ImageEncoder};
use crate::loss::map_loss;
use crate::nn::{Module, ParamVisitor};
use crate::refiner::{anchor_sparse, propagate_step, sampling_coords, DepthRefiner, KernelParams, RefineConfig};
use crate::depth::DepthMap;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("finite")
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.3..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("finite")
}

fn params_of<M: Module>(m: &mut M) -> Vec<Tensor> {
    let mut out = Vec::new();
    m.visit_params(&mut ParamVisitor::new(&mut |_, t| out.push(t.detach())));
    out
}

fn set_params<M: Module>(m: &mut M, values: &[Tensor]) {
    let mut i = 0;
    m.visit_params(&mut ParamVisitor::new(&mut |_, t| {
        *t = values[i].clone();
        i += 1;
    }));
}

/// Moves every parameter off its initialization (zero-initialized heads
/// would otherwise leave sampling points on grid lines).
fn perturb<M: Module>(m: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
    m.visit_params(&mut ParamVisitor::new(&mut |_, t| {
        let d: Vec<f64> = t.data().iter().map(|v| v + rng.random_range(-scale..scale)).collect();
        *t = Tensor::param(t.shape(), d).expect("finite");
    }));
}

/// Checks a module's forward with respect to both `inputs` and all of its
/// parameters.
fn check_module<M, F>(name: &str, module: &M, inputs: Vec<Tensor>, tol: f64, f: F) -> GradReport
where
    M: Module + Clone,
    F: Fn(&M, &[Tensor]) -> Result<Tensor>,
{
    let mut probe = module.clone();
    let params = params_of(&mut probe);
    let k = inputs.len();
    let mut all = inputs;
    all.extend(params);
    grad_check(
        name,
        |a| {
            let mut m = module.clone();
            set_params(&mut m, &a[k..]);
            f(&m, &a[..k]).map_err(|e| depthdiff_tensor::TensorError::Numeric(e.to_string()))
        },
        &all,
        tol,
    )
}

type Op = Box<dyn Fn(&[Tensor]) -> depthdiff_tensor::Result<Tensor>>;

/// Every differentiable tensor primitive at inputs drawn from `seed`.
pub fn primitive_checks(seed: u64, tol: f64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let y = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let away = rand_away(&mut rng, &[2, 3, 4]);
    let z = rand_tensor(&mut rng, &[2, 1, 4], -1.0, 1.0);
    let m = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let img = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let k3 = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b4 = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let kt = rand_tensor(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
    let b2 = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    let s3 = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let b3 = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let feat = rand_tensor(&mut rng, &[3, 5, 6], -1.0, 1.0);
    // Sample inside cells so the bilinear derivative is two-sided.
    let coords: Vec<f64> = (0..12)
        .flat_map(|_| {
            let cx = rng.random_range(0..5) as f64 + rng.random_range(0.05..0.95);
            let cy = rng.random_range(0..4) as f64 + rng.random_range(0.05..0.95);
            [cx, cy]
        })
        .collect();
    let coords = Tensor::from_vec(&[12, 2], coords).expect("finite");

    let checks: Vec<(&str, Op, Vec<Tensor>)> = vec![
        ("add", Box::new(|a| a[0].add(&a[1])), vec![x.clone(), y.clone()]),
        ("sub", Box::new(|a| a[0].sub(&a[1])), vec![x.clone(), y.clone()]),
        ("mul", Box::new(|a| a[0].mul(&a[1])), vec![x.clone(), y.clone()]),
        ("neg", Box::new(|a| a[0].neg()), vec![x.clone()]),
        ("mul_scalar", Box::new(|a| a[0].mul_scalar(-1.7)), vec![x.clone()]),
        ("add_scalar", Box::new(|a| a[0].add_scalar(0.4)), vec![x.clone()]),
        ("sigmoid", Box::new(|a| a[0].sigmoid()), vec![x.clone()]),
        ("relu", Box::new(|a| a[0].relu()), vec![away.clone()]),
        ("silu", Box::new(|a| a[0].silu()), vec![x.clone()]),
        ("exp", Box::new(|a| a[0].exp()), vec![x.clone()]),
        ("recip", Box::new(|a| a[0].recip()), vec![away.clone()]),
        ("square", Box::new(|a| a[0].square()), vec![x.clone()]),
        ("abs", Box::new(|a| a[0].abs()), vec![away.clone()]),
        ("sum", Box::new(|a| a[0].sum()), vec![x.clone()]),
        ("mean", Box::new(|a| a[0].mean()), vec![x.clone()]),
        ("sum_axis", Box::new(|a| a[0].sum_axis(1)), vec![x.clone()]),
        ("softmax", Box::new(|a| a[0].softmax(2)), vec![x.clone()]),
        ("matmul", Box::new(|a| a[0].reshape(&[6, 4])?.matmul(&a[1])), vec![x.clone(), m]),
        ("reshape", Box::new(|a| a[0].reshape(&[4, 6])), vec![x.clone()]),
        ("permute", Box::new(|a| a[0].permute(&[2, 0, 1])), vec![x.clone()]),
        ("narrow", Box::new(|a| a[0].narrow(1, 1, 2)), vec![x.clone()]),
        ("concat", Box::new(|a| Tensor::concat(&[&a[0], &a[1]], 1)), vec![x.clone(), z.clone()]),
        ("expand", Box::new(|a| a[0].expand(&[2, 3, 4])), vec![z]),
        ("upsample_nearest2x", Box::new(|a| a[0].upsample_nearest2x()), vec![img.clone()]),
        ("conv2d", Box::new(|a| a[0].conv2d(&a[1], Some(&a[2]), 1, 1)), vec![img.clone(), k3.clone(), b4.clone()]),
        ("conv2d_stride2", Box::new(|a| a[0].conv2d(&a[1], Some(&a[2]), 2, 1)), vec![img.clone(), k3, b4]),
        (
            "conv_transpose2d",
            Box::new(|a| a[0].conv_transpose2d(&a[1], Some(&a[2]), 2)),
            vec![img.narrow(2, 0, 3).expect("in range"), kt, b2],
        ),
        ("group_norm", Box::new(|a| a[0].group_norm(3, 1e-5)), vec![img.clone()]),
        ("channel_affine", Box::new(|a| a[0].channel_affine(&a[1], &a[2])), vec![img, s3, b3]),
        ("bilinear_sample", Box::new(|a| a[0].bilinear_sample(&a[1])), vec![feat, coords]),
    ];
    checks.into_iter().map(|(name, f, inputs)| grad_check(name, f, &inputs, tol)).collect()
}

fn tiny_guidance() -> GuidanceConfig {
    GuidanceConfig {
        levels: 2,
        image_channels: 2,
        depth_channels: 2,
        d_model: 4,
        n_heads: 2,
        n_points: 2,
        cond_channels: 2,
        fill_channel: true,
    }
}

/// Every composite block with inputs and parameters drawn from `seed`.
pub fn block_checks(seed: u64, tol: f64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x626c_6f63_6b73);
    let mut out = Vec::new();

    let mut enc = ImageEncoder::new(&mut rng, 2, 2);
    perturb(&mut enc, &mut rng, 0.2);
    let img = rand_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    out.push(check_module("image_encoder", &enc, vec![img.clone()], tol, |m, a| {
        let levels = m.forward(&a[0])?;
        Ok(levels[0].sum()?.add(&levels[1].mul_scalar(0.7)?.sum()?)?)
    }));

    let mut pyr = DepthPyramid::new(&mut rng, 2, 2, 10.0, true);
    perturb(&mut pyr, &mut rng, 0.2);
    let dep = rand_tensor(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
    out.push(check_module("depth_pyramid", &pyr, vec![dep.clone()], tol, |m, a| {
        let levels = m.forward(&a[0])?;
        Ok(Tensor::concat(&[&levels[0].reshape(&[32])?, &levels[1].reshape(&[8])?], 0)?)
    }));

    let mut attn = DeformAttn::new(&mut rng, 4, 2, 2, 2);
    perturb(&mut attn, &mut rng, 0.5);
    let q = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let v0 = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let v1 = rand_tensor(&mut rng, &[1, 4, 2, 2], -1.0, 1.0);
    out.push(check_module("deform_attn", &attn, vec![q, v0, v1], tol, |m, a| {
        Ok(m.forward(&a[0], &a[1..])?.out)
    }));

    let mut rng_g = ChaCha8Rng::seed_from_u64(rng.random());
    let mut ext = GuidanceExtractor::new(&mut rng_g, &tiny_guidance(), 10.0).expect("valid config");
    perturb(&mut ext, &mut rng, 0.2);
    out.push(check_module("guidance_extractor", &ext, vec![img, dep], tol, |m, a| {
        Ok(m.forward(&a[0], &a[1])?.cond)
    }));

    let mut down = DownBlock::new(&mut rng, 2, 2, 4);
    perturb(&mut down, &mut rng, 0.2);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    let temb = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    out.push(check_module("down_block", &down, vec![x.clone(), temb.clone()], tol, |m, a| m.forward(&a[0], &a[1])));

    let mut up = UpBlock::new(&mut rng, 4, 2, 4);
    perturb(&mut up, &mut rng, 0.2);
    let xu = rand_tensor(&mut rng, &[2, 4, 2, 2], -1.0, 1.0);
    out.push(check_module("up_block", &up, vec![xu, x, temb], tol, |m, a| m.forward(&a[0], &a[1], &a[2])));

    let dcfg = DenoiserConfig { depth_levels: 1, base_channels: 2, groups: 2, t_embed_dim: 4 };
    let mut rng_d = ChaCha8Rng::seed_from_u64(rng.random());
    let mut den = Denoiser::new(&mut rng_d, &dcfg, 2).expect("valid config");
    perturb(&mut den, &mut rng, 0.2);
    let zt = rand_tensor(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
    let cond = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    let ts = [rng.random_range(0..1000), rng.random_range(0..1000)];
    out.push(check_module("denoiser", &den, vec![zt, cond.clone()], tol, move |m, a| {
        m.predict_noise(&a[0], &ts, &a[1])
    }));

    // Propagation with every per-step quantity as an input.
    let k = 3;
    let d = rand_tensor(&mut rng, &[1, 1, 4, 4], 1.0, 5.0);
    let offsets = rand_tensor(&mut rng, &[1, 2 * (k * k - 1), 4, 4], -0.45, 0.45);
    let weights = rand_tensor(&mut rng, &[1, k * k, 4, 4], 0.05, 0.9);
    let lambda = rand_tensor(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
    for normalize in [false, true] {
        let name = if normalize { "propagate_step_normalized" } else { "propagate_step" };
        out.push(grad_check(
            name,
            |a| {
                let kp = KernelParams { k, offsets: a[1].clone(), weights: a[2].clone(), lambda: a[3].clone() };
                let c = sampling_coords(&kp.offsets, 0, k).map_err(to_tensor_err)?;
                propagate_step(&a[0], &kp, &[c], normalize).map_err(to_tensor_err)
            },
            &[d.clone(), offsets.clone(), weights.clone(), lambda.clone()],
            tol,
        ));
    }
    let sparse = rand_tensor(&mut rng, &[1, 1, 4, 4], 1.0, 5.0);
    let mask = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect())
        .expect("finite");
    out.push(grad_check(
        "anchor_sparse",
        |a| anchor_sparse(&a[0], &a[1], &mask, &a[2]).map_err(to_tensor_err),
        &[d.clone(), sparse.clone(), lambda],
        tol,
    ));

    let rcfg = RefineConfig { kernels: vec![3, 5], steps: 3, instants: vec![1, 3], normalize_weights: false };
    let mut rng_r = ChaCha8Rng::seed_from_u64(rng.random());
    let mut refiner = DepthRefiner::new(&mut rng_r, &rcfg, 2).expect("valid config");
    let cond0 = cond.narrow(0, 0, 1).expect("in range");
    // Redraw until no sampling point sits on a bilinear grid line.
    let base = refiner.clone();
    loop {
        refiner = base.clone();
        perturb(&mut refiner, &mut rng, 0.1);
        let params = refiner.predict_params(&cond0).expect("valid shapes");
        let clear = params.kernels.iter().flat_map(|kp| kp.offsets.data().to_vec()).all(|v| {
            let f = v - v.floor();
            f.min(1.0 - f) > 1e-4
        });
        if clear {
            break;
        }
    }
    out.push(check_module("refiner", &refiner, vec![d.clone(), cond0], tol, move |m, a| {
        let params = m.predict_params(&a[1])?;
        m.refine_with(&a[0], &sparse, &mask, &params)
    }));

    let sched = NoiseSchedule::build(1000, 1e-4, 2e-2).expect("valid schedule");
    let z0 = rand_tensor(&mut rng, &[2, 1, 2, 2], -1.0, 1.0);
    let eps = rand_tensor(&mut rng, &[2, 1, 2, 2], -2.0, 2.0);
    let tt = [rng.random_range(0..1000), rng.random_range(0..1000)];
    out.push(grad_check(
        "forward_diffuse",
        move |a| forward_diffuse(&a[0], &tt, &a[1], &sched).map_err(to_tensor_err),
        &[z0, eps.clone()],
        tol,
    ));
    let pred = rand_tensor(&mut rng, &[2, 1, 2, 2], -2.0, 2.0);
    out.push(grad_check(
        "diffusion_loss",
        |a| diffusion_loss(&a[0], &a[1]).map_err(to_tensor_err),
        &[eps, pred],
        tol,
    ));
    let gt_vals: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { rng.random_range(1.0..5.0) }).collect();
    let gt = DepthMap::from_sparse_values(4, 4, gt_vals).expect("valid depth");
    out.push(grad_check("map_loss", |a| map_loss(&a[0], &[&gt]).map_err(to_tensor_err), &[d], tol));
    out
}

fn to_tensor_err(e: crate::error::Error) -> depthdiff_tensor::TensorError {
    depthdiff_tensor::TensorError::Numeric(e.to_string())
}

/// Primitives and blocks for each seed in `seeds`.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, tol: f64) -> Vec<(u64, GradReport)> {
    let mut out = Vec::new();
    for s in seeds {
        out.extend(primitive_checks(s, tol).into_iter().map(|r| (s, r)));
        out.extend(block_checks(s, tol).into_iter().map(|r| (s, r)));
    }
    out
}
