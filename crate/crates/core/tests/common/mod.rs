//! Loop-based reference implementations used by the integration tests.
//! Everything here is written for clarity in f64, not speed.

#![allow(dead_code)]

use hazard_core::evaluation;
use hazard_core::rng::Stream;
use hazard_core::tensor::{conv2d, conv2d_transpose, dense, mae, mse_loss, Graph};
use hazard_core::Tensor;

pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

pub fn random_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(-1.0, 1.0) as f32)
}

pub fn conv_out(extent: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - 3) / stride + 1
}

pub fn conv2d_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[0];
    let (oh, ow) = (conv_out(h, stride, padding), conv_out(wd, stride, padding));
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o] as f64;
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[o, c, ky, kx]) as f64 * x.at(&[c, iy as usize, ix as usize]) as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Scatter form: every input pixel adds its kernel-weighted copy into the
/// output, which is `stride * H` when `padding = 1`.
pub fn conv2d_transpose_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> (Vec<f64>, [usize; 2]) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[1];
    let oh = (h - 1) * stride + 3 + (stride - 1) - 2 * padding;
    let ow = (wd - 1) * stride + 3 + (stride - 1) - 2 * padding;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for p in &mut out[o * oh * ow..(o + 1) * oh * ow] {
            *p = b.data()[o] as f64;
        }
    }
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                let v = x.at(&[c, iy, ix]) as f64;
                for o in 0..co {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let oy = (iy * stride + ky) as isize - padding as isize;
                            let ox = (ix * stride + kx) as isize - padding as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            out[(o * oh + oy as usize) * ow + ox as usize] += v * w.at(&[c, o, ky, kx]) as f64;
                        }
                    }
                }
            }
        }
    }
    (out, [oh, ow])
}

pub fn dense_reference(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|i| b.data()[i] as f64 + (0..n).map(|j| w.at(&[i, j]) as f64 * x.data()[j] as f64).sum::<f64>())
        .collect()
}

pub fn mse_reference(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn mae_reference(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum::<f64>() / a.len() as f64
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of the op-set from the loop references over `seeds`
/// random small problems (shapes up to 3x8x8).
pub fn forward_oracle_error(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Stream::new(seed);
        let ci = 1 + rng.below_incl(2);
        let co = 1 + rng.below_incl(2);
        let h = 3 + rng.below_incl(5);
        let w = 3 + rng.below_incl(5);
        let stride = 1 + rng.below_incl(1);
        let padding = rng.below_incl(1);

        let x = random_tensor(&mut rng, &[ci, h, w]);
        let k = random_tensor(&mut rng, &[co, ci, 3, 3]);
        let b = random_tensor(&mut rng, &[co]);
        let got = conv2d(&x, &k, &b, stride, padding).unwrap();
        let want = conv2d_reference(&x, &k, &b, stride, padding);
        assert_eq!(got.shape(), &[co, conv_out(h, stride, padding), conv_out(w, stride, padding)]);
        worst = worst.max(max_abs_diff(got.data(), &want));

        let kt = random_tensor(&mut rng, &[ci, co, 3, 3]);
        let bt = random_tensor(&mut rng, &[co]);
        let got = conv2d_transpose(&x, &kt, &bt, stride, 1).unwrap();
        let (want, [oh, ow]) = conv2d_transpose_reference(&x, &kt, &bt, stride, 1);
        assert_eq!(got.shape(), &[co, oh, ow]);
        worst = worst.max(max_abs_diff(got.data(), &want));

        let n = 1 + rng.below_incl(15);
        let m = 1 + rng.below_incl(7);
        let v = random_tensor(&mut rng, &[n]);
        let dw = random_tensor(&mut rng, &[m, n]);
        let db = random_tensor(&mut rng, &[m]);
        worst = worst.max(max_abs_diff(dense(&v, &dw, &db).unwrap().data(), &dense_reference(&v, &dw, &db)));

        let p = random_tensor(&mut rng, &[ci, h, w]);
        worst = worst.max((mse_loss(&p, &x).unwrap() - mse_reference(&p, &x)).abs());
        worst = worst.max((mae(&p, &x).unwrap() - mae_reference(&p, &x)).abs());
    }
    worst
}

/// `<conv(x), y> - <x, conv_t(y)>` relative to the product magnitude; the
/// transposed op must be the exact adjoint of the strided convolution.
pub fn adjoint_error(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Stream::new(1_000 + seed);
        let ci = 1 + rng.below_incl(2);
        let co = 1 + rng.below_incl(2);
        let h = 2 * (1 + rng.below_incl(3));
        let x = random_tensor(&mut rng, &[ci, h, h]);
        let k = random_tensor(&mut rng, &[co, ci, 3, 3]);
        let y = random_tensor(&mut rng, &[co, h / 2, h / 2]);
        let zero_o = Tensor::zeros([co]);
        let zero_i = Tensor::zeros([ci]);
        let lhs = conv2d(&x, &k, &zero_o, 2, 1).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv2d_transpose(&y, &k, &zero_i, 2, 1).unwrap()).unwrap();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    worst
}

/// f64 array used by the finite-difference reference forward pass.
#[derive(Clone)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    fn at4(&self, a: usize, b: usize, y: usize, x: usize) -> f64 {
        self.data[((a * self.shape[1] + b) * 3 + y) * 3 + x]
    }
}

fn conv_f64(x: &Arr, w: &Arr, b: &Arr, stride: usize, padding: usize) -> Arr {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let co = w.shape[0];
    let (oh, ow) = (conv_out(h, stride, padding), conv_out(wd, stride, padding));
    let mut data = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data[o];
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                acc += w.at4(o, c, ky, kx) * x.at3(c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                data[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Arr { shape: vec![co, oh, ow], data }
}

fn conv_t_f64(x: &Arr, w: &Arr, b: &Arr, stride: usize, padding: usize) -> Arr {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let co = w.shape[1];
    let oh = (h - 1) * stride + 3 + (stride - 1) - 2 * padding;
    let ow = (wd - 1) * stride + 3 + (stride - 1) - 2 * padding;
    let mut data = vec![0.0; co * oh * ow];
    for o in 0..co {
        for v in &mut data[o * oh * ow..(o + 1) * oh * ow] {
            *v = b.data[o];
        }
    }
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                for o in 0..co {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let oy = (iy * stride + ky) as isize - padding as isize;
                            let ox = (ix * stride + kx) as isize - padding as isize;
                            if oy >= 0 && ox >= 0 && oy < oh as isize && ox < ow as isize {
                                data[(o * oh + oy as usize) * ow + ox as usize] += x.at3(c, iy, ix) * w.at4(c, o, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    Arr { shape: vec![co, oh, ow], data }
}

/// Loss of a small conv -> leaky -> transposed conv -> dense chain, in f64.
fn chain_loss_f64(p: &[Arr], input: &Arr, target: &Arr, use_mae: bool) -> f64 {
    let mut h = conv_f64(input, &p[0], &p[1], 2, 1);
    for v in &mut h.data {
        if *v < 0.0 {
            *v *= 0.01;
        }
    }
    let h = conv_t_f64(&h, &p[2], &p[3], 2, 1);
    let (m, n) = (p[4].shape[0], p[4].shape[1]);
    let out: Vec<f64> = (0..m)
        .map(|i| p[5].data[i] + (0..n).map(|j| p[4].data[i * n + j] * h.data[j]).sum::<f64>())
        .collect();
    let d = out.iter().zip(&target.data).map(|(o, t)| o - t);
    if use_mae {
        d.map(f64::abs).sum::<f64>() / m as f64
    } else {
        d.map(|v| v * v).sum::<f64>() / m as f64
    }
}

/// The same chain on the tape; returns the gradient of every parameter.
fn chain_gradients(params: &[Tensor], input: &Tensor, target: &Tensor, use_mae: bool) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.param(p)).collect();
    let x = g.constant(input);
    let t = g.constant(target);
    let h = g.conv2d(x, vars[0], vars[1], 2, 1).unwrap();
    let h = g.leaky_relu(h, 0.01);
    let h = g.conv2d_transpose(h, vars[2], vars[3], 2, 1).unwrap();
    let n = g.value(h).len();
    let h = g.reshape(h, [n]).unwrap();
    let h = g.dense(h, vars[4], vars[5]).unwrap();
    let loss = if use_mae { g.mae(h, t).unwrap() } else { g.mse_loss(h, t).unwrap() };
    let grads = g.gradients(loss, &vars).unwrap();
    vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect()
}

/// Relative error `|g - g_fd| / |g_fd|` (vector norms, per parameter
/// tensor) between tape gradients and f64 central differences, h = 1e-4.
pub fn gradient_error(seeds: u64) -> f64 {
    const H: f64 = 1e-4;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Stream::new(2_000 + seed);
        let (c, f, h, m) = (1 + rng.below_incl(1), 2, 4, 3);
        let params = vec![
            random_tensor(&mut rng, &[f, c, 3, 3]),
            random_tensor(&mut rng, &[f]),
            random_tensor(&mut rng, &[f, c, 3, 3]),
            random_tensor(&mut rng, &[c]),
            random_tensor(&mut rng, &[m, c * h * h]),
            random_tensor(&mut rng, &[m]),
        ];
        let input = random_tensor(&mut rng, &[c, h, h]);
        let target = random_tensor(&mut rng, &[m]);
        let use_mae = seed % 2 == 1;
        let analytic = chain_gradients(&params, &input, &target, use_mae);
        let base: Vec<Arr> = params.iter().map(Arr::from_tensor).collect();
        let (x, t) = (Arr::from_tensor(&input), Arr::from_tensor(&target));
        for (pi, grad) in analytic.iter().enumerate() {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for i in 0..base[pi].data.len() {
                let mut plus = base.clone();
                plus[pi].data[i] += H;
                let mut minus = base.clone();
                minus[pi].data[i] -= H;
                let fd = (chain_loss_f64(&plus, &x, &t, use_mae) - chain_loss_f64(&minus, &x, &t, use_mae)) / (2.0 * H);
                num += (grad.data()[i] as f64 - fd).powi(2);
                den += fd * fd;
            }
            if den > 1e-12 {
                worst = worst.max((num / den).sqrt());
            }
        }
    }
    worst
}

/// Pairwise-counting AUC: P(positive > negative) + 0.5 P(tie).
pub fn pairwise_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (positives.len() * negatives.len()) as f64
}

/// Random score set with deliberate ties (scores on a coarse grid half the time).
pub fn random_score_set(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Stream::new(3_000 + seed);
    let n = 2 + rng.below_incl(198);
    let n_pos = 1 + rng.below_incl(n - 2);
    let coarse = rng.uniform() < 0.5;
    let shift = rng.range(-1.0, 2.0);
    let mut draw = |shift: f64| {
        let v = rng.normal() + shift;
        if coarse {
            (v * 2.0).round() / 2.0
        } else {
            v
        }
    };
    let pos = (0..n_pos).map(|_| draw(shift)).collect();
    let neg = (0..n - n_pos).map(|_| draw(0.0)).collect();
    (pos, neg)
}

pub fn auc_oracle_error(sets: u64) -> f64 {
    (0..sets)
        .map(|s| {
            let (p, n) = random_score_set(s);
            let want = pairwise_auc(&p, &n);
            let roc = evaluation::trapezoid_area(&evaluation::roc_from_scores(&p, &n));
            (roc - want).abs().max((evaluation::auc_from_scores(&p, &n) - want).abs())
        })
        .fold(0.0, f64::max)
}
