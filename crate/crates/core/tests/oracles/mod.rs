//! Independent scalar-loop re-implementations used as test oracles.
#![allow(dead_code)]

use depthdiff::guidance::DeformAttn;
use depthdiff::nn::Conv2d;
use depthdiff::refiner::{RefineConfig, RefinementParams};
use depthdiff_tensor::Tensor;

/// Tent-function form of clamped bilinear interpolation: every grid pixel
/// contributes `max(0, 1-|cx-j|) max(0, 1-|cy-i|)`.
pub fn tent_weight(cx: f64, cy: f64, i: usize, j: usize, h: usize, w: usize) -> f64 {
    let cx = cx.clamp(0.0, (w - 1) as f64);
    let cy = cy.clamp(0.0, (h - 1) as f64);
    (1.0 - (cx - j as f64).abs()).max(0.0) * (1.0 - (cy - i as f64).abs()).max(0.0)
}

pub fn tent_sample(plane: &[f64], h: usize, w: usize, cx: f64, cy: f64) -> f64 {
    let mut v = 0.0;
    for i in 0..h {
        for j in 0..w {
            v += tent_weight(cx, cy, i, j, h, w) * plane[i * w + j];
        }
    }
    v
}

/// Four-corner form with explicit clamping.
pub fn corner_sample(plane: &[f64], h: usize, w: usize, cx: f64, cy: f64) -> f64 {
    let cx = cx.max(0.0).min((w - 1) as f64);
    let cy = cy.max(0.0).min((h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    let at = |y: usize, x: usize| plane[y * w + x];
    at(y0, x0) * (1.0 - fx) * (1.0 - fy) + at(y0, x1) * fx * (1.0 - fy) + at(y1, x0) * (1.0 - fx) * fy + at(y1, x1) * fx * fy
}

/// 1x1 convolution of one pixel's channel vector.
pub fn conv1x1_pixel(conv: &Conv2d, x: &[f64]) -> Vec<f64> {
    let ws = conv.weight.shape();
    let (c_out, c_in) = (ws[0], ws[1]);
    assert_eq!((ws[2], ws[3]), (1, 1));
    let wd = conv.weight.data();
    let bd = conv.bias.data();
    (0..c_out).map(|o| bd[o] + (0..c_in).map(|i| wd[o * c_in + i] * x[i]).sum::<f64>()).collect()
}

fn pixel(t: &[f64], c: usize, h: usize, w: usize, y: usize, x: usize) -> Vec<f64> {
    (0..c).map(|ch| t[(ch * h + y) * w + x]).collect()
}

/// Per-query loop over heads, levels and points. `query[1,D,Hq,Wq]`,
/// `values[l][1,D,Hl,Wl]`; returns `[D,Hq,Wq]` row-major.
pub fn naive_deform_attn(attn: &DeformAttn, query: &Tensor, values: &[Tensor]) -> Vec<f64> {
    let qs = query.shape();
    let (d, hq, wq) = (qs[1], qs[2], qs[3]);
    let (heads, levels, points) = (attn.n_heads, attn.n_levels, attn.n_points);
    let dh = d / heads;
    // Projected value planes per level: [D][Hl*Wl].
    let projected: Vec<(usize, usize, Vec<Vec<f64>>)> = values
        .iter()
        .map(|v| {
            let s = v.shape();
            let (hl, wl) = (s[2], s[3]);
            let mut planes = vec![vec![0.0; hl * wl]; d];
            for y in 0..hl {
                for x in 0..wl {
                    let p = conv1x1_pixel(&attn.value_proj, &pixel(v.data(), d, hl, wl, y, x));
                    for c in 0..d {
                        planes[c][y * wl + x] = p[c];
                    }
                }
            }
            (hl, wl, planes)
        })
        .collect();
    let mut out = vec![0.0; d * hq * wq];
    for y in 0..hq {
        for x in 0..wq {
            let qv = pixel(query.data(), d, hq, wq, y, x);
            let off = conv1x1_pixel(&attn.offset_proj, &qv);
            let logit = conv1x1_pixel(&attn.weight_proj, &qv);
            let mut pre = vec![0.0; d];
            for h in 0..heads {
                let slots: Vec<usize> = (0..levels * points).map(|lp| h * levels * points + lp).collect();
                let m = slots.iter().map(|&s| logit[s]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = slots.iter().map(|&s| (logit[s] - m).exp()).sum();
                for l in 0..levels {
                    let (hl, wl, planes) = &projected[l];
                    let rx = (x as f64 + 0.5) * *wl as f64 / wq as f64 - 0.5;
                    let ry = (y as f64 + 0.5) * *hl as f64 / hq as f64 - 0.5;
                    for p in 0..points {
                        let s = (h * levels + l) * points + p;
                        let a = (logit[s] - m).exp() / z;
                        let (cx, cy) = (rx + off[2 * s], ry + off[2 * s + 1]);
                        for c in 0..dh {
                            pre[h * dh + c] += a * tent_sample(&planes[h * dh + c], *hl, *wl, cx, cy);
                        }
                    }
                }
            }
            let o = conv1x1_pixel(&attn.out_proj, &pre);
            for c in 0..d {
                out[(c * hq + y) * wq + x] = o[c];
            }
        }
    }
    out
}

/// Regular k x k neighbourhood without the centre, row-major.
fn grid(k: usize) -> Vec<(f64, f64)> {
    let r = (k / 2) as i64;
    let mut g = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx, dy) != (0, 0) {
                g.push((dx as f64, dy as f64));
            }
        }
    }
    g
}

/// Sampling location of slot `j` (0 = reference) at pixel `(y, x)`.
fn slot_coord(params_off: &[f64], k: usize, h: usize, w: usize, b: usize, y: usize, x: usize, j: usize) -> (f64, f64) {
    if j == 0 {
        return (x as f64, y as f64);
    }
    let nb = k * k - 1;
    let (dx, dy) = grid(k)[j - 1];
    let at = |ch: usize| params_off[((b * 2 * nb + ch) * h + y) * w + x];
    (x as f64 + dx + at(2 * (j - 1)), y as f64 + dy + at(2 * (j - 1) + 1))
}

/// Refinement through explicit dense propagation matrices: for each kernel
/// `D <- A D` then the anchoring blend, snapshots combined by `mu`, `phi`.
/// Inputs are `[N,1,H,W]`; returns `[N*H*W]`.
pub fn dense_operator_refine(
    cfg: &RefineConfig,
    params: &RefinementParams,
    d0: &Tensor,
    sparse: &Tensor,
    mask: &Tensor,
) -> Vec<f64> {
    let s = d0.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let q = h * w;
    let mut out = vec![0.0; n * q];
    for b in 0..n {
        for (ki, &k) in cfg.kernels.iter().enumerate() {
            let kp = params.kernel(k).unwrap();
            let kk = k * k;
            let wts = kp.weights.data();
            let mut a = vec![0.0; q * q];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let mut row_sum = 0.0;
                    for j in 0..kk {
                        let wij = wts[((b * kk + j) * h + y) * w + x];
                        row_sum += wij;
                        let (cx, cy) = slot_coord(kp.offsets.data(), k, h, w, b, y, x, j);
                        for py in 0..h {
                            for px in 0..w {
                                a[i * q + py * w + px] += wij * tent_weight(cx, cy, py, px, h, w);
                            }
                        }
                    }
                    if cfg.normalize_weights {
                        for p in 0..q {
                            a[i * q + p] /= row_sum;
                        }
                    }
                }
            }
            let mut d: Vec<f64> = d0.data()[b * q..(b + 1) * q].to_vec();
            for step in 1..=cfg.steps {
                let prop: Vec<f64> = (0..q).map(|i| (0..q).map(|p| a[i * q + p] * d[p]).sum()).collect();
                d = (0..q)
                    .map(|i| {
                        let lm = kp.lambda.data()[b * q + i] * mask.data()[b * q + i];
                        prop[i] + lm * (sparse.data()[b * q + i] - prop[i])
                    })
                    .collect();
                if let Some(ti) = cfg.instants.iter().position(|t| *t == step) {
                    let nt = cfg.instants.len();
                    let nk = cfg.kernels.len();
                    for i in 0..q {
                        let mu = params.mu.data()[(b * nk + ki) * q + i];
                        let phi = params.phi.data()[(b * nt + ti) * q + i];
                        out[b * q + i] += mu * phi * d[i];
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel gather loops keeping every intermediate iterate `D_{i,k,t}`.
/// Returns the combined output and the iterates indexed `[kernel][step]`.
pub fn explicit_refine(
    cfg: &RefineConfig,
    params: &RefinementParams,
    d0: &Tensor,
    sparse: &Tensor,
    mask: &Tensor,
) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let s = d0.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let q = h * w;
    let mut out = vec![0.0; n * q];
    let mut iterates = vec![vec![Vec::new(); cfg.steps + 1]; cfg.kernels.len()];
    for (ki, &k) in cfg.kernels.iter().enumerate() {
        let kp = params.kernel(k).unwrap();
        let kk = k * k;
        let mut d = d0.data().to_vec();
        iterates[ki][0] = d.clone();
        for step in 1..=cfg.steps {
            let mut next = vec![0.0; n * q];
            for b in 0..n {
                let plane = &d[b * q..(b + 1) * q];
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let mut acc = 0.0;
                        let mut wsum = 0.0;
                        for j in 0..kk {
                            let wij = kp.weights.data()[((b * kk + j) * h + y) * w + x];
                            let (cx, cy) = slot_coord(kp.offsets.data(), k, h, w, b, y, x, j);
                            acc += wij * corner_sample(plane, h, w, cx, cy);
                            wsum += wij;
                        }
                        if cfg.normalize_weights {
                            acc /= wsum;
                        }
                        let m = mask.data()[b * q + i];
                        let lam = kp.lambda.data()[b * q + i];
                        next[b * q + i] = (1.0 - lam * m) * acc + lam * m * sparse.data()[b * q + i];
                    }
                }
            }
            d = next;
            iterates[ki][step] = d.clone();
            if let Some(ti) = cfg.instants.iter().position(|t| *t == step) {
                let (nt, nk) = (cfg.instants.len(), cfg.kernels.len());
                for b in 0..n {
                    for i in 0..q {
                        let mu = params.mu.data()[(b * nk + ki) * q + i];
                        let phi = params.phi.data()[(b * nt + ti) * q + i];
                        out[b * q + i] += mu * phi * d[b * q + i];
                    }
                }
            }
        }
    }
    (out, iterates)
}

/// `(rmse_mm, mae_mm, irmse_per_km, imae_per_km)` over pixels where `valid`.
pub fn scalar_metrics(pred: &[f64], gt: &[f64], valid: &[bool]) -> (f64, f64, f64, f64) {
    let (mut se, mut ae, mut ise, mut iae, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let e = (pred[i] - gt[i]) * 1000.0;
        let ie = (1.0 / pred[i] - 1.0 / gt[i]) * 1000.0;
        se += e * e;
        ae += e.abs();
        ise += ie * ie;
        iae += ie.abs();
        n += 1.0;
    }
    ((se / n).sqrt(), ae / n, (ise / n).sqrt(), iae / n)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
