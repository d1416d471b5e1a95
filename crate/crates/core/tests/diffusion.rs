use depthdiff::diffusion::{
    ddim_step, diffusion_loss, forward_diffuse, mean_from_noise, sample, sample_latent, step_grid, NoiseSchedule,
};
use depthdiff::rng::{normal_vec, stream};
use depthdiff::DepthNormalizer;
use depthdiff_tensor::Tensor;
use proptest::prelude::*;

fn sched() -> NoiseSchedule {
    NoiseSchedule::build(1000, 1e-4, 2e-2).unwrap()
}

#[test]
fn alpha_bar_matches_log_space_sum() {
    let s = sched();
    let log_sum: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).ln()).sum();
    assert!((s.alpha_bars[999] / log_sum.exp() - 1.0).abs() < 1e-10);
    assert_eq!(s.alpha_bars[0], 1.0 - 1e-4);
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn monte_carlo_forward_statistics() {
    let s = sched();
    let z0 = [0.7, -0.4];
    let draws = 10_000;
    for t in [100usize, 500, 900] {
        let ab = s.alpha_bars[t];
        let mut rng = stream(42, &[t as u64]);
        let eps = normal_vec(&mut rng, 2 * draws);
        let z0_t = Tensor::from_vec(&[draws, 2], (0..draws).flat_map(|_| z0).collect()).unwrap();
        let eps_t = Tensor::from_vec(&[draws, 2], eps).unwrap();
        let zt = forward_diffuse(&z0_t, &[t], &eps_t, &s).unwrap();
        for (c, &z) in z0.iter().enumerate() {
            let xs: Vec<f64> = zt.data().iter().skip(c).step_by(2).copied().collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let stderr = ((1.0 - ab) / n).sqrt();
            assert!((mean - ab.sqrt() * z).abs() < 3.0 * stderr, "t={t}: mean {mean}");
            assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t}: var {var}");
        }
    }
}

#[test]
fn forward_degenerate_cases() {
    let s = sched();
    let z0 = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, -0.2, 0.3, 0.9]).unwrap();
    let eps = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -1.5, 0.2, 0.4]).unwrap();
    let a = forward_diffuse(&Tensor::zeros(&[1, 1, 2, 2]), &[300], &eps, &s).unwrap();
    let b = forward_diffuse(&z0, &[300], &Tensor::zeros(&[1, 1, 2, 2]), &s).unwrap();
    for i in 0..4 {
        assert_eq!(a.data()[i], (1.0 - s.alpha_bars[300]).sqrt() * eps.data()[i]);
        assert_eq!(b.data()[i], s.alpha_bars[300].sqrt() * z0.data()[i]);
    }
    assert!(forward_diffuse(&z0, &[300], &Tensor::zeros(&[1, 1, 4]), &s).is_err());
}

#[test]
fn ddim_step_matches_scalar_formula() {
    let mut s = sched();
    s.set_eta(0.5).unwrap();
    let z = [0.3, -1.2, 0.8, 2.0];
    let e = [0.1, 0.5, -0.7, 1.1];
    let xi = [0.2, -0.3, 0.9, -1.0];
    let (t, tp) = (600usize, 400usize);
    let (ab, abp) = (s.alpha_bars[t], s.alpha_bars[tp]);
    let sigma = 0.5 * ((1.0 - abp) / (1.0 - ab)).sqrt() * (1.0 - ab / abp).sqrt();
    let tz = Tensor::from_vec(&[1, 1, 2, 2], z.to_vec()).unwrap();
    let te = Tensor::from_vec(&[1, 1, 2, 2], e.to_vec()).unwrap();
    let tx = Tensor::from_vec(&[1, 1, 2, 2], xi.to_vec()).unwrap();
    let got = ddim_step(&tz, &te, t, Some(tp), &s, 0.5, Some(&tx)).unwrap();
    for i in 0..4 {
        let x0 = (z[i] - (1.0 - ab).sqrt() * e[i]) / ab.sqrt();
        let want = abp.sqrt() * x0 + (1.0 - abp - sigma * sigma).sqrt() * e[i] + sigma * xi[i];
        assert!((got.data()[i] / want - 1.0).abs() < 1e-12);
    }
    assert!(ddim_step(&tz, &te, 400, Some(400), &s, 0.0, None).is_err());
}

#[test]
fn true_noise_recovers_signal_through_chained_steps() {
    let s = sched();
    let n = 16;
    let z0 = Tensor::from_vec(&[1, 1, 4, 4], normal_vec(&mut stream(1, &[0]), n).iter().map(|v| v.tanh()).collect()).unwrap();
    let eps = Tensor::from_vec(&[1, 1, 4, 4], normal_vec(&mut stream(1, &[1]), n)).unwrap();
    let grid = step_grid(1000, 20).unwrap();
    let mut z = forward_diffuse(&z0, &[grid[0]], &eps, &s).unwrap();
    for (i, &t) in grid.iter().enumerate() {
        let tp = grid.get(i + 1).copied();
        z = ddim_step(&z, &eps, t, tp, &s, 0.0, None).unwrap();
        if let Some(tp) = tp {
            let want = forward_diffuse(&z0, &[tp], &eps, &s).unwrap();
            let d = z.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-10);
        }
    }
    let d = z.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 1e-10, "{d}");
}

#[test]
fn step_grid_enumeration() {
    let g = step_grid(1000, 20).unwrap();
    let want: Vec<usize> = (0..20).rev().map(|k| (k as f64 * 999.0 / 19.0).floor() as usize).collect();
    assert_eq!(g, want);
    assert_eq!(&g[..2], &[999, 946]);
    assert_eq!(&g[18..], &[52, 0]);
}

#[test]
fn zero_denoiser_matches_scalar_contraction() {
    let s = sched();
    let shape = [1, 1, 2, 2];
    let z = sample_latent(|z, _| Ok(Tensor::zeros(z.shape())), &shape, 5, 9, &s).unwrap();
    let mut want = normal_vec(&mut stream(9, &[depthdiff::rng::purpose::SAMPLE_NOISE]), 4);
    let grid = step_grid(1000, 5).unwrap();
    for (i, &t) in grid.iter().enumerate() {
        let abp = grid.get(i + 1).map_or(1.0, |&tp| s.alpha_bars[tp]);
        let x0s: Vec<f64> = want.iter().map(|v| v / s.alpha_bars[t].sqrt()).collect();
        want = x0s.iter().map(|x| abp.sqrt() * x).collect();
    }
    for (a, b) in z.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }
}

#[test]
fn eta_zero_sampling_is_bitwise_deterministic() {
    let s = sched();
    let norm = DepthNormalizer::new(10.0).unwrap();
    let predict = |z: &Tensor, t: usize| z.mul_scalar(0.3 + t as f64 * 1e-4).map_err(Into::into);
    let a = sample(predict, 2, (4, 4), 20, 3, &s, &norm, 0.1).unwrap();
    let b = sample(predict, 2, (4, 4), 20, 3, &s, &norm, 0.1).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.meters().iter().zip(y.meters()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn loss_and_reverse_mean() {
    let e = Tensor::zeros(&[4]);
    let p = Tensor::full(&[4], 2.0);
    assert_eq!(diffusion_loss(&e, &e).unwrap().item(), 0.0);
    assert_eq!(diffusion_loss(&e, &p).unwrap().item(), 4.0);
    let s = sched();
    let (z, eps, t) = (0.37, -0.81, 250);
    let mu = mean_from_noise(&Tensor::scalar(z), &Tensor::scalar(eps), t, &s).unwrap().item();
    let want = (z - s.betas[t] / (1.0 - s.alpha_bars[t]).sqrt() * eps) / s.alphas[t].sqrt();
    assert!((mu / want - 1.0).abs() < 1e-12);
}

#[test]
fn schedule_text_round_trip() {
    let s = sched();
    let back = NoiseSchedule::from_json(&s.to_json()).unwrap();
    assert_eq!(s, back);
    assert!(NoiseSchedule::build(1000, 0.02, 0.01).is_err());
}

proptest! {
    #[test]
    fn normalization_round_trips(d in 0.0f64..10.0) {
        let n = DepthNormalizer::new(10.0).unwrap();
        prop_assert!((n.denormalize(n.normalize(d)) - d).abs() < 1e-9);
    }

    #[test]
    fn exact_noise_step_identity(t in 1usize..1000, frac in 0.0f64..1.0, z0 in -1.0f64..1.0, e in -3.0f64..3.0) {
        let s = sched();
        let tp = ((t as f64) * frac) as usize;
        let zt = forward_diffuse(&Tensor::scalar(z0), &[t], &Tensor::scalar(e), &s).unwrap();
        let got = ddim_step(&zt, &Tensor::scalar(e), t, Some(tp), &s, 0.0, None).unwrap().item();
        let want = s.alpha_bars[tp].sqrt() * z0 + (1.0 - s.alpha_bars[tp]).sqrt() * e;
        prop_assert!((got - want).abs() < 1e-9);
    }
}
