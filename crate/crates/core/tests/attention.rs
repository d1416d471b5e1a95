mod oracles;

use depthdiff::guidance::{DeformAttn, DepthPyramid, GuidanceConfig, GuidanceExtractor, ImageEncoder};
use depthdiff::nn::{Conv2d, Module, ParamVisitor};
use depthdiff::DepthMap;
use depthdiff_tensor::Tensor;
use oracles::{conv1x1_pixel, max_abs_diff, naive_deform_attn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn randomize(conv: &mut Conv2d, rng: &mut ChaCha8Rng, scale: f64) {
    conv.weight = rand_tensor(rng, conv.weight.shape(), -scale, scale);
    conv.bias = rand_tensor(rng, conv.bias.shape(), -scale, scale);
}

fn random_attn(seed: u64) -> (DeformAttn, Tensor, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attn = DeformAttn::new(&mut rng, 4, 2, 2, 2);
    randomize(&mut attn.offset_proj, &mut rng, 1.0);
    randomize(&mut attn.weight_proj, &mut rng, 1.0);
    randomize(&mut attn.value_proj, &mut rng, 0.7);
    randomize(&mut attn.out_proj, &mut rng, 0.7);
    let q = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let v = vec![rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0), rand_tensor(&mut rng, &[1, 4, 2, 2], -1.0, 1.0)];
    (attn, q, v)
}

#[test]
fn deformable_attention_matches_naive_loop() {
    for seed in 0..5 {
        let (attn, q, v) = random_attn(seed);
        let got = attn.forward(&q, &v).unwrap();
        let want = naive_deform_attn(&attn, &q, &v);
        let diff = max_abs_diff(got.out.data(), &want);
        assert!(diff < 1e-10, "seed {seed}: {diff}");
    }
}

#[test]
fn attention_weights_lie_on_simplex() {
    let (attn, q, v) = random_attn(7);
    let w = attn.forward(&q, &v).unwrap().weights;
    let (slots, plane) = (attn.n_levels * attn.n_points, 16);
    for h in 0..attn.n_heads {
        for p in 0..plane {
            let s: f64 = (0..slots).map(|j| w.data()[(h * slots + j) * plane + p]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_offsets_uniform_weights_average_reference_samples() {
    let (mut attn, q, v) = random_attn(3);
    attn.offset_proj = Conv2d::zeros(4, attn.offset_proj.out_channels(), 1);
    attn.weight_proj = Conv2d::zeros(4, attn.weight_proj.out_channels(), 1);
    let got = attn.forward(&q, &v).unwrap().out;
    assert!(max_abs_diff(got.data(), &naive_deform_attn(&attn, &q, &v)) < 1e-10);
    // Level 0 is sampled at integer reference pixels, level 1 at cell centres
    // of the coarse grid, i.e. the mean of its 2x2 neighbourhood where it lies.
    let proj0 = attn.value_proj.forward(&v[0]).unwrap();
    let proj1 = attn.value_proj.forward(&v[1]).unwrap();
    let (y, x) = (1, 1);
    let mut pre = vec![0.0; 4];
    for (c, p) in pre.iter_mut().enumerate() {
        let a = proj0.data()[(c * 4 + y) * 4 + x];
        // (1.5*2/4 - 0.5) = 0.25 on the 2x2 grid.
        let l1 = |yy: usize, xx: usize| proj1.data()[(c * 2 + yy) * 2 + xx];
        let b = 0.75 * 0.75 * l1(0, 0) + 0.25 * 0.75 * l1(0, 1) + 0.75 * 0.25 * l1(1, 0) + 0.25 * 0.25 * l1(1, 1);
        *p = 0.5 * (a + b);
    }
    let want = conv1x1_pixel(&attn.out_proj, &pre);
    for c in 0..4 {
        assert!((got.data()[(c * 4 + y) * 4 + x] - want[c]).abs() < 1e-12);
    }
}

#[test]
fn single_level_point_samples_projected_value_at_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut attn = DeformAttn::new(&mut rng, 4, 1, 1, 1);
    attn.out_proj.weight = Tensor::from_vec(&[4, 4, 1, 1], (0..16).map(|i| f64::from(i % 5 == 0)).collect()).unwrap();
    let q = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let v = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let got = attn.forward(&q, std::slice::from_ref(&v)).unwrap().out;
    let want = attn.value_proj.forward(&v).unwrap();
    assert!(max_abs_diff(got.data(), want.data()) < 1e-12);
}

#[test]
fn empty_value_levels_are_rejected() {
    let (attn, q, _) = random_attn(0);
    assert!(matches!(attn.forward(&q, &[]), Err(depthdiff::Error::Usage(_))));
}

#[test]
fn zero_offsets_translate_with_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut attn = DeformAttn::new(&mut rng, 4, 2, 1, 2);
    randomize(&mut attn.weight_proj, &mut rng, 1.0);
    let (h, w) = (8, 8);
    let base = rand_tensor(&mut rng, &[1, 4, h, w + 1], -1.0, 1.0);
    let a = base.narrow(3, 0, w).unwrap();
    let b = base.narrow(3, 1, w).unwrap();
    let oa = attn.forward(&a, std::slice::from_ref(&a)).unwrap().out;
    let ob = attn.forward(&b, std::slice::from_ref(&b)).unwrap().out;
    for c in 0..4 {
        for y in 0..h {
            for x in 1..w - 1 {
                let va = oa.data()[(c * h + y) * w + x + 1];
                let vb = ob.data()[(c * h + y) * w + x];
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }
}

fn tiny_config() -> GuidanceConfig {
    GuidanceConfig {
        levels: 2,
        image_channels: 4,
        depth_channels: 4,
        d_model: 4,
        n_heads: 2,
        n_points: 2,
        cond_channels: 4,
        fill_channel: false,
    }
}

#[test]
fn cross_attention_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ext = GuidanceExtractor::new(&mut rng, &tiny_config(), 10.0).unwrap();
    randomize(&mut ext.cross_attn.offset_proj, &mut rng, 1.0);
    randomize(&mut ext.cross_attn.weight_proj, &mut rng, 1.0);
    let depth = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let enhanced = vec![rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0), rand_tensor(&mut rng, &[1, 4, 2, 2], -1.0, 1.0)];
    let q = ext.depth_proj.forward(&depth).unwrap();
    let got = ext.cross_attn.forward(&q, &enhanced).unwrap().out;
    assert!(max_abs_diff(got.data(), &naive_deform_attn(&ext.cross_attn, &q, &enhanced)) < 1e-10);
    let fused = ext.cross_attention_fuse(&depth, &enhanced).unwrap();
    assert_eq!(fused.shape(), &[1, 4, 4, 4]);
}

#[test]
fn self_attention_zero_offsets_match_oracle_per_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let ext = GuidanceExtractor::new(&mut rng, &tiny_config(), 10.0).unwrap();
    let img = rand_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let scales = ext.image_encoder.forward(&img).unwrap();
    let projected: Vec<Tensor> = scales.iter().zip(&ext.input_proj).map(|(x, p)| p.forward(x).unwrap()).collect();
    for q in &projected {
        let got = ext.self_attn.forward(q, &projected).unwrap().out;
        assert!(max_abs_diff(got.data(), &naive_deform_attn(&ext.self_attn, q, &projected)) < 1e-10);
    }
    let (enhanced, f_self) = ext.self_attention_enhance(&scales).unwrap();
    assert_eq!(enhanced[1].shape(), &[1, 4, 4, 4]);
    assert_eq!(f_self.shape(), &[1, 4, 8, 8]);
}

#[test]
fn constant_query_gives_spatially_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ext = GuidanceExtractor::new(&mut rng, &tiny_config(), 10.0).unwrap();
    randomize(&mut ext.cross_attn.offset_proj, &mut rng, 1.0);
    randomize(&mut ext.cross_attn.weight_proj, &mut rng, 1.0);
    ext.depth_proj.bias = Tensor::zeros(&[4]);
    let q = ext.depth_proj.forward(&Tensor::zeros(&[1, 4, 8, 8])).unwrap();
    let values = vec![rand_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0), rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0)];
    let a = ext.cross_attn.forward(&q, &values).unwrap();
    for t in [&a.weights, &a.offsets] {
        for plane in t.data().chunks(64) {
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-15));
        }
    }
}

#[test]
fn encoder_shapes_and_gradient_reach() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut enc = ImageEncoder::new(&mut rng, 3, 16);
    let img = rand_tensor(&mut rng, &[1, 3, 64, 64], 0.0, 1.0);
    let out = enc.forward(&img).unwrap();
    let shapes: Vec<&[usize]> = out.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, [&[1, 16, 64, 64][..], &[1, 32, 32, 32], &[1, 64, 16, 16]]);
    let loss = out.iter().map(|t| t.mean().unwrap()).reduce(|a, b| a.add(&b).unwrap()).unwrap();
    loss.backward().unwrap();
    enc.visit_params(&mut ParamVisitor::new(&mut |name, t| {
        let g = t.grad().unwrap_or_default();
        assert!(g.iter().any(|v| *v != 0.0), "{name} got no gradient");
    }));
}

#[test]
fn zero_image_gives_zero_activations_with_zero_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let enc = ImageEncoder::new(&mut rng, 2, 4);
    for t in enc.forward(&Tensor::zeros(&[1, 3, 8, 8])).unwrap() {
        assert!(t.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn depth_pyramid_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut pyr = DepthPyramid::new(&mut rng, 3, 4, 10.0, false);
    let mut vals = vec![0.0; 64];
    for i in (0..64).step_by(5) {
        vals[i] = 1.0 + i as f64 * 0.1;
    }
    let sparse = DepthMap::from_sparse_values(8, 8, vals.clone()).unwrap();
    let out = |p: &DepthPyramid, m: &DepthMap| p.forward(&p.input_tensor(&[m]).unwrap()).unwrap();
    let base = out(&pyr, &sparse);
    assert_eq!(base[0].shape(), &[1, 4, 8, 8]);

    // All-invalid input is a constant-free deterministic field: zero input.
    let empty = DepthMap::empty(8, 8);
    let e = out(&pyr, &empty);
    let zero = pyr.forward(&Tensor::zeros(&[1, 2, 8, 8])).unwrap();
    assert_eq!(e[0].data(), zero[0].data());

    let doubled = DepthMap::from_sparse_values(8, 8, vals.iter().map(|v| 2.0 * v).collect()).unwrap();
    assert!(max_abs_diff(out(&pyr, &doubled)[0].data(), base[0].data()) > 1e-6);

    // Without weights on the mask channel the output ignores the mask.
    let w = pyr.bottom_up[0].weight.to_vec();
    let (c_out, c_in) = (4, 2);
    let masked: Vec<f64> = w.iter().enumerate().map(|(i, v)| if (i / 9) % c_in == 1 { 0.0 } else { *v }).collect();
    pyr.bottom_up[0].weight = Tensor::from_vec(&[c_out, c_in, 3, 3], masked).unwrap();
    let a = pyr.forward(&pyr.input_tensor(&[&sparse]).unwrap()).unwrap();
    let mut input = pyr.input_tensor(&[&sparse]).unwrap().to_vec();
    for v in &mut input[64..128] {
        *v = 1.0 - *v;
    }
    let b = pyr.forward(&Tensor::from_vec(&[1, 2, 8, 8], input).unwrap()).unwrap();
    assert_eq!(a[0].data(), b[0].data());
}

#[test]
fn fuse_guidance_shape_and_branch_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let ext = GuidanceExtractor::new(&mut rng, &tiny_config(), 10.0).unwrap();
    let a = rand_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0).with_requires_grad(true);
    let b = rand_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0).with_requires_grad(true);
    let cond = ext.fuse_guidance(&a, &b).unwrap();
    assert_eq!(cond.shape(), &[1, 4, 8, 8]);
    assert!(cond.data().iter().all(|v| v.is_finite()));
    cond.square().unwrap().sum().unwrap().backward().unwrap();
    assert!(a.grad().unwrap().iter().any(|v| *v != 0.0));
    assert!(b.grad().unwrap().iter().any(|v| *v != 0.0));
    let small = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    assert!(ext.fuse_guidance(&a, &small).is_err());
}

#[test]
fn extraction_is_deterministic_and_full_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let cfg = GuidanceConfig { fill_channel: true, ..tiny_config() };
    let ext = GuidanceExtractor::new(&mut rng, &cfg, 10.0).unwrap();
    let img = rand_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let dep = rand_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let a = ext.forward(&img, &dep).unwrap();
    let b = ext.forward(&img, &dep).unwrap();
    assert_eq!(a.cond.shape(), &[2, 4, 8, 8]);
    assert_eq!(a.cond.data(), b.cond.data());
}
