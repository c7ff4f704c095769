use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::BadParam("stride must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::KernelTooLarge {
            kernel,
            input: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    input_shape: [usize; 3],
    out_hw: (usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
    /// im2col matrix, `(cin·k·k) × (h'·w')`
    cols: Vec<f64>,
    weight: Tensor,
}

fn im2col(x: &Tensor, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = oh * ow;
    let mut cols = vec![0.0; cin * k * k * n];
    let xd = x.data();
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * n;
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = xd[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], shape: [usize; 3], k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Tensor {
    let [cin, h, w] = shape;
    let n = oh * ow;
    let mut out = Tensor::zeros(&shape);
    let xd = out.data_mut();
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * n;
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            xd[dst + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2D cross-correlation with zero padding. `x: Cin×H×W`, `w: Cout×Cin×k×k`, `b: Cout`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Conv2dCache)> {
    if x.rank() != 3 || w.rank() != 4 || w.shape()[1] != x.shape()[0] || w.shape()[2] != w.shape()[3]
    {
        return Err(shape_mismatch(x.shape(), w.shape()));
    }
    let cout = w.shape()[0];
    if b.shape() != [cout] {
        return Err(shape_mismatch(b.shape(), &[cout]));
    }
    let k = w.shape()[2];
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_output_size(h, k, stride, padding)?;
    let ow = conv_output_size(wd, k, stride, padding)?;
    let n = oh * ow;
    let cols = im2col(x, k, stride, padding, oh, ow);
    let mut out = vec![0.0; cout * n];
    for (o, row) in out.chunks_exact_mut(n).enumerate() {
        row.fill(b.data()[o]);
    }
    gemm(cout, cin * k * k, n, w.data(), &cols, &mut out);
    Ok((
        Tensor::new(&[cout, oh, ow], out)?,
        Conv2dCache {
            input_shape: [cin, h, wd],
            out_hw: (oh, ow),
            kernel: k,
            stride,
            padding,
            cols,
            weight: w.clone(),
        },
    ))
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward(cache: &Conv2dCache, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (gx, gw, gb) = cache.backward(grad_out, true)?;
    Ok((gx.expect("input grad requested"), gw, gb))
}

impl Conv2dCache {
    pub fn output_shape(&self) -> [usize; 3] {
        [self.weight.shape()[0], self.out_hw.0, self.out_hw.1]
    }

    /// Backward that can skip the input gradient (first layer of a network).
    pub fn backward(
        &self,
        grad_out: &Tensor,
        input_grad: bool,
    ) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let out_shape = self.output_shape();
        if grad_out.shape() != out_shape {
            return Err(shape_mismatch(grad_out.shape(), &out_shape));
        }
        let [cin, _, _] = self.input_shape;
        let cout = out_shape[0];
        let k = self.kernel;
        let (oh, ow) = self.out_hw;
        let n = oh * ow;
        let kk = cin * k * k;
        let g = grad_out.data();

        let gb: Vec<f64> = g.chunks_exact(n).map(|row| row.iter().sum()).collect();
        let mut gw = vec![0.0; cout * kk];
        gemm_nt(cout, n, kk, g, &self.cols, &mut gw);

        let gx = if input_grad {
            let mut gcols = vec![0.0; kk * n];
            gemm_tn(kk, cout, n, self.weight.data(), g, &mut gcols);
            Some(col2im(
                &gcols,
                self.input_shape,
                k,
                self.stride,
                self.padding,
                oh,
                ow,
            ))
        } else {
            None
        };
        Ok((
            gx,
            Tensor::new(self.weight.shape(), gw)?,
            Tensor::new(&[cout], gb)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_err};
    use crate::rng::Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.get(&[o, c, ki, kj])
                                        * x.get(&[c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[o, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_1x1() {
        let x = Rng::new(1).normal(0.0, 1.0, &[4, 5, 6]).unwrap();
        let mut w = Tensor::zeros(&[4, 4, 1, 1]);
        for i in 0..4 {
            w.set(&[i, i, 0, 0], 1.0);
        }
        let (y, _) = conv2d(&x, &w, &Tensor::zeros(&[4]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Rng::new(2).normal(0.0, 1.0, &[2, 4, 4]).unwrap();
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let (y, _) = conv2d(&x, &w, &b, 1, 1).unwrap();
        for o in 0..3 {
            for i in 0..16 {
                assert_eq!(y.data()[o * 16 + i], b.data()[o]);
            }
        }
    }

    #[test]
    fn strided_matches_naive() {
        let mut rng = Rng::new(3);
        let x = rng.normal(0.0, 1.0, &[3, 7, 7]).unwrap();
        let w = rng.normal(0.0, 1.0, &[3, 3, 3, 3]).unwrap();
        let b = rng.normal(0.0, 1.0, &[3]).unwrap();
        let (y, _) = conv2d(&x, &w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        let r = naive_conv(&x, &w, &b, 2, 0);
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (y, _) = conv2d(&x, &w, &b, 1, 1).unwrap();
        let r = naive_conv(&x, &w, &b, 1, 1);
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_too_large() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn zero_grad_and_bias_identity() {
        let mut rng = Rng::new(4);
        let x = rng.normal(0.0, 1.0, &[2, 5, 5]).unwrap();
        let w = rng.normal(0.0, 1.0, &[3, 2, 3, 3]).unwrap();
        let (y, cache) = conv2d(&x, &w, &Tensor::zeros(&[3]), 1, 1).unwrap();
        let (gx, gw, gb) = conv2d_backward(&cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(gx.data().iter().chain(gw.data()).chain(gb.data()).all(|&v| v == 0.0));
        let g = rng.normal(0.0, 1.0, y.shape()).unwrap();
        let (_, _, gb) = conv2d_backward(&cache, &g).unwrap();
        for o in 0..3 {
            let s: f64 = g.data()[o * 25..(o + 1) * 25].iter().sum();
            assert!((gb.data()[o] - s).abs() < 1e-12);
        }
        assert!(conv2d_backward(&cache, &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let (s, p) = [(1, 1), (2, 0), (1, 0)][seed as usize % 3];
            let x = rng.normal(0.0, 1.0, &[2, 6, 5]).unwrap();
            let w = rng.normal(0.0, 1.0, &[3, 2, 3, 3]).unwrap();
            let b = rng.normal(0.0, 1.0, &[3]).unwrap();
            let (y, cache) = conv2d(&x, &w, &b, s, p).unwrap();
            let probe = rng.normal(0.0, 1.0, y.shape()).unwrap();
            let (gx, gw, gb) = conv2d_backward(&cache, &probe).unwrap();
            let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
                conv2d(x, w, b, s, p).unwrap().0.dot(&probe)
            };
            let fx = central_difference(&x, 1e-5, |t| loss(t, &w, &b));
            let fw = central_difference(&w, 1e-5, |t| loss(&x, t, &b));
            let fb = central_difference(&b, 1e-5, |t| loss(&x, &w, t));
            assert!(rel_err(&gx, &fx) < 1e-5);
            assert!(rel_err(&gw, &fw) < 1e-5);
            assert!(rel_err(&gb, &fb) < 1e-5);
        }
    }
}
