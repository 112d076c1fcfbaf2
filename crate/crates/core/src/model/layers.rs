//! Per-sequence convolution kernels and batch-level normalization with their
//! backward passes. Activations are `frames x channels` matrices; weights
//! are stored `[kernel][in][out]` so the inner loops run over output
//! channels.

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[inline]
pub(crate) fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().copied().sum::<S>() + tail
}

/// Geometry of one convolution; offsets index the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// Stride-2 transposed convolution producing `2T` frames.
    pub transposed: bool,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.kernel * self.in_ch * self.out_ch
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_frames(&self, in_frames: usize) -> usize {
        if self.transposed {
            2 * in_frames
        } else {
            in_frames
        }
    }

    // (output frame, input frame) pairs connected through kernel tap k
    #[inline]
    fn taps(&self, in_frames: usize, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let out_frames = self.out_frames(in_frames);
        let pad = self.pad() as isize;
        let offset = (k * self.dilation) as isize - pad;
        let transposed = self.transposed;
        (0..in_frames).filter_map(move |s| {
            let t = if transposed {
                2 * s as isize + offset
            } else {
                s as isize - offset
            };
            (t >= 0 && (t as usize) < out_frames).then_some((t as usize, s))
        })
    }

    pub fn forward<S: Scalar>(&self, params: &[S], x: &Matrix<S>) -> Matrix<S> {
        debug_assert_eq!(x.cols(), self.in_ch);
        let frames = x.rows();
        let mut y = Matrix::zeros(self.out_frames(frames), self.out_ch);
        if let Some(b) = self.bias {
            let bias = &params[b..b + self.out_ch];
            for t in 0..y.rows() {
                y.row_mut(t).copy_from_slice(bias);
            }
        }
        let w = &params[self.weight..self.weight + self.weight_len()];
        for k in 0..self.kernel {
            let wk = &w[k * self.in_ch * self.out_ch..(k + 1) * self.in_ch * self.out_ch];
            for (t, s) in self.taps(frames, k) {
                let xrow = x.row(s);
                let yrow = y.row_mut(t);
                for (i, &a) in xrow.iter().enumerate() {
                    if a != S::zero() {
                        axpy(yrow, a, &wk[i * self.out_ch..(i + 1) * self.out_ch]);
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight (and bias) gradients into `grad`, a buffer laid out
    /// like this layer's parameters starting at offset 0, and returns the
    /// input gradient.
    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        x: &Matrix<S>,
        dy: &Matrix<S>,
        grad_w: &mut [S],
        grad_b: Option<&mut [S]>,
    ) -> Matrix<S> {
        let frames = x.rows();
        let mut dx = Matrix::zeros(frames, self.in_ch);
        let w = &params[self.weight..self.weight + self.weight_len()];
        let block = self.in_ch * self.out_ch;
        for k in 0..self.kernel {
            let wk = &w[k * block..(k + 1) * block];
            let gk = &mut grad_w[k * block..(k + 1) * block];
            for (t, s) in self.taps(frames, k) {
                let dyrow = dy.row(t);
                let xrow = x.row(s);
                let dxrow = dx.row_mut(s);
                for i in 0..self.in_ch {
                    let wrow = &wk[i * self.out_ch..(i + 1) * self.out_ch];
                    dxrow[i] += dot(dyrow, wrow);
                    let a = xrow[i];
                    if a != S::zero() {
                        axpy(&mut gk[i * self.out_ch..(i + 1) * self.out_ch], a, dyrow);
                    }
                }
            }
        }
        if let Some(gb) = grad_b {
            for t in 0..dy.rows() {
                axpy(gb, S::one(), dy.row(t));
            }
        }
        dx
    }
}

/// Per-channel batch normalization; statistics pool every frame of every
/// sequence in the batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    /// Offset of the running mean in the statistics vector; variance follows.
    pub stats: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache<S> {
    pub xhat: Vec<Matrix<S>>,
    pub inv_std: Vec<S>,
    /// Batch statistics, present in training mode.
    pub batch_mean: Option<Vec<S>>,
    pub batch_var: Option<Vec<S>>,
}

impl Norm {
    pub fn forward<S: Scalar>(
        &self,
        params: &[S],
        running: &[S],
        xs: Vec<Matrix<S>>,
        train: bool,
        eps: S,
    ) -> (Vec<Matrix<S>>, NormCache<S>) {
        let c = self.channels;
        let gamma = &params[self.gamma..self.gamma + c];
        let beta = &params[self.beta..self.beta + c];
        let (mean, var) = if train {
            let count = S::from_usize_lossy(xs.iter().map(Matrix::rows).sum::<usize>().max(1));
            let mut mean = vec![S::zero(); c];
            for x in &xs {
                for row in x.iter_rows() {
                    axpy(&mut mean, S::one(), row);
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![S::zero(); c];
            for x in &xs {
                for row in x.iter_rows() {
                    for ((v, &m), &a) in var.iter_mut().zip(&mean).zip(row) {
                        *v += (a - m) * (a - m);
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (mean, var)
        } else {
            (
                running[self.stats..self.stats + c].to_vec(),
                running[self.stats + c..self.stats + 2 * c].to_vec(),
            )
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();

        let mut xhat = xs;
        let mut ys = Vec::with_capacity(xhat.len());
        for x in xhat.iter_mut() {
            let mut y = Matrix::zeros(x.rows(), c);
            for t in 0..x.rows() {
                let xr = x.row_mut(t);
                let yr = y.row_mut(t);
                for ch in 0..c {
                    let h = (xr[ch] - mean[ch]) * inv_std[ch];
                    xr[ch] = h;
                    yr[ch] = gamma[ch] * h + beta[ch];
                }
            }
            ys.push(y);
        }
        let cache = NormCache {
            xhat,
            inv_std,
            batch_mean: train.then_some(mean),
            batch_var: train.then_some(var),
        };
        (ys, cache)
    }

    /// Writes gamma/beta gradients into `grad` (full parameter layout) and
    /// returns input gradients.
    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        cache: &NormCache<S>,
        dys: &[Matrix<S>],
        grad: &mut [S],
    ) -> Vec<Matrix<S>> {
        let c = self.channels;
        let gamma = &params[self.gamma..self.gamma + c];
        let mut d_gamma = vec![S::zero(); c];
        let mut d_beta = vec![S::zero(); c];
        for (dy, xhat) in dys.iter().zip(&cache.xhat) {
            for t in 0..dy.rows() {
                let (dr, hr) = (dy.row(t), xhat.row(t));
                for ch in 0..c {
                    d_gamma[ch] += dr[ch] * hr[ch];
                    d_beta[ch] += dr[ch];
                }
            }
        }
        axpy(&mut grad[self.gamma..self.gamma + c], S::one(), &d_gamma);
        axpy(&mut grad[self.beta..self.beta + c], S::one(), &d_beta);

        let train = cache.batch_mean.is_some();
        let count = S::from_usize_lossy(dys.iter().map(Matrix::rows).sum::<usize>().max(1));
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, xhat)| {
                let mut dx = Matrix::zeros(dy.rows(), c);
                for t in 0..dy.rows() {
                    let (dr, hr) = (dy.row(t), xhat.row(t));
                    let out = dx.row_mut(t);
                    for ch in 0..c {
                        let scale = gamma[ch] * cache.inv_std[ch];
                        out[ch] = if train {
                            scale * (dr[ch] - (d_beta[ch] + hr[ch] * d_gamma[ch]) / count)
                        } else {
                            scale * dr[ch]
                        };
                    }
                }
                dx
            })
            .collect()
    }
}
