mod oracles;

use depthdiff::refiner::{
    anchor_sparse, propagate_step, sampling_coords, DepthRefiner, KernelParams, RefineConfig, RefinementParams,
};
use depthdiff::DepthMap;
use depthdiff_tensor::Tensor;
use oracles::{dense_operator_refine, explicit_refine, max_abs_diff};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn softmax_channels(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    rand_tensor(rng, &[n, c, h, w], -2.0, 2.0).softmax(1).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, cfg: &RefineConfig, n: usize, h: usize, w: usize) -> RefinementParams {
    RefinementParams {
        kernels: cfg
            .kernels
            .iter()
            .map(|&k| KernelParams {
                k,
                offsets: rand_tensor(rng, &[n, 2 * (k * k - 1), h, w], -1.5, 1.5),
                weights: rand_tensor(rng, &[n, k * k, h, w], 0.01, 0.99),
                lambda: rand_tensor(rng, &[n, 1, h, w], 0.01, 0.99),
            })
            .collect(),
        mu: softmax_channels(rng, n, cfg.kernels.len(), h, w),
        phi: softmax_channels(rng, n, cfg.instants.len(), h, w),
    }
}

fn refiner(cfg: &RefineConfig) -> DepthRefiner {
    DepthRefiner::new(&mut ChaCha8Rng::seed_from_u64(0), cfg, 4).unwrap()
}

fn sparse_inputs(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    let mask: Vec<f64> = (0..n * h * w).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect();
    let vals: Vec<f64> = mask.iter().map(|m| if *m > 0.0 { rng.random_range(1.0..9.0) } else { 0.0 }).collect();
    (Tensor::from_vec(&[n, 1, h, w], vals).unwrap(), Tensor::from_vec(&[n, 1, h, w], mask).unwrap())
}

#[test]
fn single_step_matches_dense_operator_on_6x6() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = RefineConfig { kernels: vec![3], steps: 1, instants: vec![1], normalize_weights: false };
    let mut p = random_params(&mut rng, &cfg, 1, 6, 6);
    // No anchoring, so the oracle reduces to the propagation operator.
    p.kernels[0].lambda = Tensor::zeros(&[1, 1, 6, 6]);
    let d = rand_tensor(&mut rng, &[1, 1, 6, 6], 1.0, 9.0);
    let zeros = Tensor::zeros(&[1, 1, 6, 6]);
    let coords = sampling_coords(&p.kernels[0].offsets, 0, 3).unwrap();
    let got = propagate_step(&d, &p.kernels[0], &[coords], false).unwrap();
    let want = dense_operator_refine(&cfg, &p, &d, &zeros, &zeros);
    assert!(max_abs_diff(got.data(), &want) < 1e-10);
}

#[test]
fn full_refine_matches_dense_operator() {
    for (seed, normalize) in [(2, false), (3, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = RefineConfig { kernels: vec![3, 5], steps: 4, instants: vec![1, 2, 4], normalize_weights: normalize };
        let (n, h, w) = (2, 6, 6);
        let p = random_params(&mut rng, &cfg, n, h, w);
        let d0 = rand_tensor(&mut rng, &[n, 1, h, w], 1.0, 9.0);
        let (s, m) = sparse_inputs(&mut rng, n, h, w);
        let got = refiner(&cfg).refine_with(&d0, &s, &m, &p).unwrap();
        let want = dense_operator_refine(&cfg, &p, &d0, &s, &m);
        assert!(max_abs_diff(got.data(), &want) < 1e-10, "normalize={normalize}");
    }
}

#[test]
fn full_refine_matches_explicit_reimplementation_on_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = RefineConfig { kernels: vec![3, 5], steps: 6, instants: vec![1, 3, 6], normalize_weights: false };
    let (n, h, w) = (1, 8, 8);
    let mut p = random_params(&mut rng, &cfg, n, h, w);
    // Keep the unnormalized chains from growing by ~k^2 per step.
    for kp in &mut p.kernels {
        kp.weights = kp.weights.mul_scalar(2.0 / (kp.k * kp.k) as f64).unwrap();
    }
    let d0 = rand_tensor(&mut rng, &[n, 1, h, w], 1.0, 9.0);
    let (s, m) = sparse_inputs(&mut rng, n, h, w);
    let got = refiner(&cfg).refine_with(&d0, &s, &m, &p).unwrap();
    let (want, _) = explicit_refine(&cfg, &p, &d0, &s, &m);
    let diff = max_abs_diff(got.data(), &want);
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn module_refine_uses_predicted_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RefineConfig { kernels: vec![3], steps: 2, instants: vec![1, 2], normalize_weights: false };
    let r = refiner(&cfg);
    let cond = rand_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0);
    let d0 = rand_tensor(&mut rng, &[1, 1, 8, 8], 1.0, 9.0);
    let mut vals = vec![0.0; 64];
    vals[9] = 3.5;
    vals[40] = 7.25;
    let sparse = DepthMap::from_sparse_values(8, 8, vals).unwrap();
    let got = r.refine(&d0, &cond, &[&sparse]).unwrap();
    let p = r.predict_params(&cond).unwrap();
    let (s, m) = (sparse.to_tensor().reshape(&[1, 1, 8, 8]).unwrap(), Tensor::from_vec(&[1, 1, 8, 8], sparse.mask_f64()).unwrap());
    let (want, _) = explicit_refine(&cfg, &p, &d0, &s, &m);
    assert!(max_abs_diff(got.data(), &want) < 1e-10);
    assert_eq!(r.call_count(), 1);
}

#[test]
fn predicted_parameters_satisfy_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = refiner(&RefineConfig::default());
    let cond = rand_tensor(&mut rng, &[2, 4, 8, 8], -3.0, 3.0);
    let p = r.predict_params(&cond).unwrap();
    for kp in &p.kernels {
        assert_eq!(kp.offsets.shape()[1], 2 * (kp.k * kp.k - 1));
        assert_eq!(kp.weights.shape()[1], kp.k * kp.k);
        assert!(kp.offsets.data().iter().all(|v| *v == 0.0));
        assert!(kp.weights.data().iter().chain(kp.lambda.data()).all(|v| *v > 0.0 && *v < 1.0));
    }
    for (t, c) in [(&p.mu, 3), (&p.phi, 3)] {
        for b in 0..2 {
            for i in 0..64 {
                let s: f64 = (0..c).map(|j| t.data()[(b * c + j) * 64 + i]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}

fn one_hot_params(cfg: &RefineConfig, n: usize, h: usize, w: usize, lambda: f64, rng: &mut ChaCha8Rng) -> RefinementParams {
    let mut p = random_params(rng, cfg, n, h, w);
    for kp in &mut p.kernels {
        let kk = kp.k * kp.k;
        let mut wts = vec![0.0; n * kk * h * w];
        for b in 0..n {
            for i in 0..h * w {
                wts[b * kk * h * w + i] = 1.0;
            }
        }
        kp.weights = Tensor::from_vec(&[n, kk, h, w], wts).unwrap();
        kp.lambda = Tensor::full(&[n, 1, h, w], lambda);
    }
    p.mu = one_hot(n, cfg.kernels.len(), h, w, 0);
    p.phi = one_hot(n, cfg.instants.len(), h, w, cfg.instants.len() - 1);
    p
}

fn one_hot(n: usize, c: usize, h: usize, w: usize, hot: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_vec(&[n, c, h, w], (0..n * c * plane).map(|i| f64::from((i / plane) % c == hot)).collect()).unwrap()
}

#[test]
fn degenerate_cases_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = RefineConfig { kernels: vec![3, 5], steps: 4, instants: vec![1, 2, 4], normalize_weights: false };
    let (n, h, w) = (1, 6, 6);
    let d0 = rand_tensor(&mut rng, &[n, 1, h, w], 1.0, 9.0);
    let (s, m) = sparse_inputs(&mut rng, n, h, w);
    let r = refiner(&cfg);

    // Identity chains with no anchoring.
    let p = one_hot_params(&cfg, n, h, w, 0.0, &mut rng);
    assert_eq!(r.refine_with(&d0, &s, &m, &p).unwrap().data(), d0.data());

    // Full anchoring pins measured pixels and leaves the rest alone.
    let p = one_hot_params(&cfg, n, h, w, 1.0, &mut rng);
    let out = r.refine_with(&d0, &s, &m, &p).unwrap();
    for i in 0..h * w {
        let want = if m.data()[i] > 0.0 { s.data()[i] } else { d0.data()[i] };
        assert_eq!(out.data()[i], want);
    }

    // Convex mu/phi around identity chains: D0 up to the rounding of sum(mu phi).
    let mut p = one_hot_params(&cfg, n, h, w, 0.0, &mut rng);
    p.mu = softmax_channels(&mut rng, n, 2, h, w);
    p.phi = softmax_channels(&mut rng, n, 3, h, w);
    let out = r.refine_with(&d0, &s, &m, &p).unwrap();
    assert!(max_abs_diff(out.data(), d0.data()) <= 1e-14 * 9.0);

    // Anchored fixed point: D0 equal to D_s on valid pixels, any lambda.
    let pinned: Vec<f64> = (0..h * w).map(|i| if m.data()[i] > 0.0 { s.data()[i] } else { d0.data()[i] }).collect();
    let pinned = Tensor::from_vec(&[n, 1, h, w], pinned).unwrap();
    let mut p = one_hot_params(&cfg, n, h, w, 0.0, &mut rng);
    for kp in &mut p.kernels {
        kp.lambda = rand_tensor(&mut rng, &[n, 1, h, w], 0.0, 1.0);
    }
    let out = r.refine_with(&pinned, &s, &m, &p).unwrap();
    assert_eq!(out.data(), pinned.data());

    // One-hot mu on k=3 and phi on the final instant: the k=3 chain's end state.
    let mut p = random_params(&mut rng, &cfg, n, h, w);
    p.mu = one_hot(n, 2, h, w, 0);
    p.phi = one_hot(n, 3, h, w, 2);
    let out = r.refine_with(&d0, &s, &m, &p).unwrap();
    let (_, iterates) = explicit_refine(&cfg, &p, &d0, &s, &m);
    assert!(max_abs_diff(out.data(), &iterates[0][4]) < 1e-10);
}

#[test]
fn anchoring_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = rand_tensor(&mut rng, &[1, 1, 4, 4], 1.0, 9.0);
    let (s, m) = sparse_inputs(&mut rng, 1, 4, 4);
    let lam = rand_tensor(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
    assert_eq!(anchor_sparse(&d, &s, &m, &Tensor::zeros(&[1, 1, 4, 4])).unwrap().data(), d.data());
    let none = Tensor::zeros(&[1, 1, 4, 4]);
    assert_eq!(anchor_sparse(&d, &s, &none, &lam).unwrap().data(), d.data());
}

#[test]
fn constant_field_is_preserved_by_uniform_weights() {
    let k = 5;
    let kp = KernelParams {
        k,
        offsets: Tensor::zeros(&[1, 2 * (k * k - 1), 6, 6]),
        weights: Tensor::full(&[1, k * k, 6, 6], 1.0 / (k * k) as f64),
        lambda: Tensor::zeros(&[1, 1, 6, 6]),
    };
    let d = Tensor::full(&[1, 1, 6, 6], 4.2);
    let c = sampling_coords(&kp.offsets, 0, k).unwrap();
    let out = propagate_step(&d, &kp, &[c], false).unwrap();
    assert!(out.data().iter().all(|v| (v - 4.2).abs() < 1e-12));
}

#[test]
fn missing_kernel_is_usage_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = RefineConfig { kernels: vec![3], steps: 1, instants: vec![1], normalize_weights: false };
    let p = random_params(&mut rng, &cfg, 1, 4, 4);
    assert!(matches!(p.kernel(5), Err(depthdiff::Error::Usage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn normalized_iterates_stay_within_sampled_range(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = RefineConfig { kernels: vec![3], steps: 3, instants: vec![3], normalize_weights: true };
        let (n, h, w) = (1, 5, 5);
        let p = random_params(&mut rng, &cfg, n, h, w);
        let d0 = rand_tensor(&mut rng, &[n, 1, h, w], 1.0, 9.0);
        let (s, m) = sparse_inputs(&mut rng, n, h, w);
        let (_, it) = explicit_refine(&cfg, &p, &d0, &s, &m);
        for step in 1..=cfg.steps {
            let prev = &it[0][step - 1];
            let (lo, hi) = prev.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
            for i in 0..h * w {
                let (mut lo_i, mut hi_i) = (lo, hi);
                if m.data()[i] > 0.0 {
                    lo_i = lo_i.min(s.data()[i]);
                    hi_i = hi_i.max(s.data()[i]);
                }
                let v = it[0][step][i];
                prop_assert!(v >= lo_i - 1e-12 && v <= hi_i + 1e-12);
            }
        }
    }
}
