use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ModelConfig;
use super::layers::{axpy, Conv, Norm, NormCache};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Convolution, batch norm, then (unless it closes a residual block) ReLU
/// and dropout.
#[derive(Clone, Debug)]
struct Unit {
    conv: Conv,
    norm: Norm,
    dropout: f64,
}

#[derive(Clone, Debug)]
struct Block {
    units: Vec<Unit>,
    /// 1x1 projection of the block input when the channel count changes.
    projection: Option<Conv>,
}

/// Offsets of every layer inside the flat parameter and statistics vectors,
/// in declaration order.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    stem: Unit,
    blocks: Vec<Block>,
    dilated: Unit,
    head: Unit,
    output: Conv,
    num_params: usize,
    num_stats: usize,
    /// Ranges of convolution weights (the parameters subject to weight decay).
    weight_ranges: Vec<(usize, usize)>,
}

struct LayoutBuilder {
    params: usize,
    stats: usize,
    weight_ranges: Vec<(usize, usize)>,
}

impl LayoutBuilder {
    fn conv(
        &mut self,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        transposed: bool,
        bias: bool,
    ) -> Conv {
        let weight = self.params;
        let len = kernel * in_ch * out_ch;
        self.weight_ranges.push((weight, weight + len));
        self.params += len;
        let bias = bias.then(|| {
            let b = self.params;
            self.params += out_ch;
            b
        });
        Conv {
            in_ch,
            out_ch,
            kernel,
            dilation,
            transposed,
            weight,
            bias,
        }
    }

    fn norm(&mut self, channels: usize) -> Norm {
        let gamma = self.params;
        let beta = gamma + channels;
        self.params += 2 * channels;
        let stats = self.stats;
        self.stats += 2 * channels;
        Norm {
            channels,
            gamma,
            beta,
            stats,
        }
    }

    fn unit(
        &mut self,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        transposed: bool,
        dropout: f64,
    ) -> Unit {
        let conv = self.conv(in_ch, out_ch, kernel, dilation, transposed, false);
        let norm = self.norm(out_ch);
        Unit { conv, norm, dropout }
    }
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let mut b = LayoutBuilder {
            params: 0,
            stats: 0,
            weight_ranges: Vec::new(),
        };
        let up = &config.upsample;
        let stem = b.unit(config.input_dim, up.channels, up.kernel, 1, true, up.dropout);
        let mut channels = up.channels;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for spec in &config.blocks {
            let mut units = Vec::with_capacity(spec.sub_blocks);
            for j in 0..spec.sub_blocks {
                let in_ch = if j == 0 { channels } else { spec.channels };
                units.push(b.unit(in_ch, spec.channels, spec.kernel, 1, false, spec.dropout));
            }
            let projection = (channels != spec.channels).then(|| b.conv(channels, spec.channels, 1, 1, false, true));
            blocks.push(Block { units, projection });
            channels = spec.channels;
        }
        let d = &config.dilated;
        let dilated = b.unit(channels, d.channels, d.kernel, d.dilation, false, d.dropout);
        let h = &config.head;
        let head = b.unit(d.channels, h.channels, h.kernel, h.dilation, false, h.dropout);
        let output = b.conv(h.channels, config.num_symbols, 1, 1, false, true);
        Layout {
            stem,
            blocks,
            dilated,
            head,
            output,
            num_params: b.params,
            num_stats: b.stats,
            weight_ranges: b.weight_ranges,
        }
    }

    fn norms(&self) -> Vec<Norm> {
        let mut out = vec![self.stem.norm];
        for block in &self.blocks {
            out.extend(block.units.iter().map(|u| u.norm));
        }
        out.push(self.dilated.norm);
        out.push(self.head.norm);
        out
    }

    fn convs(&self) -> Vec<Conv> {
        let mut out = vec![self.stem.conv];
        for block in &self.blocks {
            out.extend(block.units.iter().map(|u| u.conv));
            out.extend(block.projection);
        }
        out.push(self.dilated.conv);
        out.push(self.head.conv);
        out.push(self.output);
        out
    }
}

/// Student weights (flat, declaration order) plus batch-norm running
/// statistics (mean then variance per normalization layer).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    config: ModelConfig,
    weights: Vec<S>,
    running: Vec<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; masks are drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Clone, Debug)]
struct UnitCache<S> {
    input: Vec<Matrix<S>>,
    norm: NormCache<S>,
    /// Combined ReLU/dropout multiplier per element; absent for the last
    /// unit of a block, whose activation follows the residual sum.
    gate: Option<Vec<Matrix<S>>>,
}

#[derive(Clone, Debug)]
struct BlockCache<S> {
    input: Vec<Matrix<S>>,
    units: Vec<UnitCache<S>>,
    gate: Vec<Matrix<S>>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    mode: Mode,
    input_frames: Vec<usize>,
    stem: UnitCache<S>,
    blocks: Vec<BlockCache<S>>,
    dilated: UnitCache<S>,
    head: UnitCache<S>,
    output_input: Vec<Matrix<S>>,
}

impl<S> ForwardCache<S> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn stage_rng(seed: u64, stage: usize, sequence: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | sequence as u64);
    rng
}

/// ReLU followed by inverted dropout, in place; returns the multiplier
/// applied to each element.
fn gate<S: Scalar>(xs: &mut [Matrix<S>], dropout: f64, mode: Mode, stage: usize) -> Vec<Matrix<S>> {
    let keep = 1.0 - dropout;
    let scale = S::from_f64_lossy(1.0 / keep);
    xs.iter_mut()
        .enumerate()
        .map(|(n, x)| {
            let mut rng = match mode {
                Mode::Train { dropout_seed } if dropout > 0.0 => Some(stage_rng(dropout_seed, stage, n)),
                _ => None,
            };
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for (v, m) in x.as_mut_slice().iter_mut().zip(g.as_mut_slice()) {
                let kept = rng.as_mut().is_none_or(|r| r.random::<f64>() < keep);
                let factor = if *v > S::zero() && kept {
                    if rng.is_some() {
                        scale
                    } else {
                        S::one()
                    }
                } else {
                    S::zero()
                };
                *v *= factor;
                *m = factor;
            }
            g
        })
        .collect()
}

struct UnitRunner<'a, S> {
    params: &'a [S],
    running: &'a [S],
    train: bool,
    eps: S,
    mode: Mode,
    /// Counts activation stages so each gets its own dropout stream.
    stage: usize,
}

impl<S: Scalar> UnitRunner<'_, S> {
    fn gate(&mut self, xs: &mut [Matrix<S>], dropout: f64) -> Vec<Matrix<S>> {
        self.stage += 1;
        gate(xs, dropout, self.mode, self.stage)
    }

    fn run(&mut self, unit: &Unit, input: Vec<Matrix<S>>, activate: bool) -> (Vec<Matrix<S>>, UnitCache<S>) {
        let z = conv_batch(&unit.conv, self.params, &input);
        let (mut y, norm) = unit.norm.forward(self.params, self.running, z, self.train, self.eps);
        let gate = activate.then(|| self.gate(&mut y, unit.dropout));
        (y, UnitCache { input, norm, gate })
    }
}

fn apply_gate<S: Scalar>(dys: &mut [Matrix<S>], gates: &[Matrix<S>]) {
    for (dy, g) in dys.iter_mut().zip(gates) {
        for (d, &m) in dy.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *d *= m;
        }
    }
}

fn conv_batch<S: Scalar>(conv: &Conv, params: &[S], xs: &[Matrix<S>]) -> Vec<Matrix<S>> {
    xs.par_iter().map(|x| conv.forward(params, x)).collect()
}

/// Per-sequence backward with per-sequence gradient buffers, reduced in
/// sequence order so the result does not depend on the thread count.
fn conv_batch_backward<S: Scalar>(
    conv: &Conv,
    params: &[S],
    xs: &[Matrix<S>],
    dys: &[Matrix<S>],
    grad: &mut [S],
) -> Vec<Matrix<S>> {
    let wl = conv.weight_len();
    let parts: Vec<(Matrix<S>, Vec<S>, Vec<S>)> = xs
        .par_iter()
        .zip(dys.par_iter())
        .map(|(x, dy)| {
            let mut gw = vec![S::zero(); wl];
            let mut gb = vec![S::zero(); if conv.bias.is_some() { conv.out_ch } else { 0 }];
            let gb_ref = conv.bias.map(|_| gb.as_mut_slice());
            let dx = conv.backward(params, x, dy, &mut gw, gb_ref);
            (dx, gw, gb)
        })
        .collect();
    let mut dxs = Vec::with_capacity(parts.len());
    for (dx, gw, gb) in parts {
        axpy(&mut grad[conv.weight..conv.weight + wl], S::one(), &gw);
        if let Some(b) = conv.bias {
            axpy(&mut grad[b..b + conv.out_ch], S::one(), &gb);
        }
        dxs.push(dx);
    }
    dxs
}

fn add_into<S: Scalar>(dst: &mut [Matrix<S>], src: &[Matrix<S>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        axpy(d.as_mut_slice(), S::one(), s.as_slice());
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Uniform weights in `+-1/sqrt(fan_in)`; norm scale 1, shift 0; running
    /// mean 0 and variance 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![S::zero(); layout.num_params];
        for conv in layout.convs() {
            let bound = 1.0 / ((conv.in_ch * conv.kernel) as f64).sqrt();
            let end = conv.weight + conv.weight_len();
            for w in &mut weights[conv.weight..end] {
                *w = S::from_f64_lossy(rng.random_range(-bound..bound));
            }
            if let Some(b) = conv.bias {
                for w in &mut weights[b..b + conv.out_ch] {
                    *w = S::from_f64_lossy(rng.random_range(-bound..bound));
                }
            }
        }
        let mut running = vec![S::zero(); layout.num_stats];
        for norm in layout.norms() {
            for g in &mut weights[norm.gamma..norm.gamma + norm.channels] {
                *g = S::one();
            }
            for v in &mut running[norm.stats + norm.channels..norm.stats + 2 * norm.channels] {
                *v = S::one();
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            weights,
            running,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, weights: Vec<S>, running: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if weights.len() != layout.num_params || running.len() != layout.num_stats {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters and {} statistics, got {} and {}",
                layout.num_params,
                layout.num_stats,
                weights.len(),
                running.len()
            )));
        }
        if running.iter().any(|v| !v.is_finite()) || weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite parameter values".into()));
        }
        Ok(ModelParams {
            config,
            weights,
            running,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [S] {
        &mut self.weights
    }

    pub fn running_stats(&self) -> &[S] {
        &self.running
    }

    /// `true` for convolution weights, `false` for biases and norm affine
    /// parameters.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.weights.len()];
        for (start, end) in self.layout().weight_ranges {
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let conv = |v: &[S]| v.iter().map(|&x| T::from_f64_lossy(x.to_f64_lossy())).collect();
        ModelParams {
            config: self.config.clone(),
            weights: conv(&self.weights),
            running: conv(&self.running),
        }
    }

    /// Runs the network over a batch of `frames x input_dim` feature
    /// matrices. Each output has twice the input's frames.
    pub fn forward_batch(&self, inputs: &[&Matrix<S>], mode: Mode) -> Result<(Vec<Matrix<S>>, ForwardCache<S>)> {
        let layout = self.layout();
        for (n, x) in inputs.iter().enumerate() {
            if x.cols() != self.config.input_dim || x.rows() == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "input {n} is {}x{}, expected at least one frame of {} features",
                    x.rows(),
                    x.cols(),
                    self.config.input_dim
                )));
            }
        }
        let mut ctx = UnitRunner {
            params: &self.weights,
            running: &self.running,
            train: matches!(mode, Mode::Train { .. }),
            eps: S::from_f64_lossy(self.config.bn_eps),
            mode,
            stage: 0,
        };
        let p = &self.weights;

        let xs: Vec<Matrix<S>> = inputs.iter().map(|x| (*x).clone()).collect();
        let (mut h, stem) = ctx.run(&layout.stem, xs, true);

        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for block in &layout.blocks {
            let block_input = h;
            let mut units = Vec::with_capacity(block.units.len());
            let mut cur = block_input.clone();
            for (j, unit) in block.units.iter().enumerate() {
                let last = j + 1 == block.units.len();
                let (y, cache) = ctx.run(unit, cur, !last);
                units.push(cache);
                cur = y;
            }
            match &block.projection {
                Some(proj) => add_into(&mut cur, &conv_batch(proj, p, &block_input)),
                None => add_into(&mut cur, &block_input),
            }
            let dropout = block.units.last().expect("blocks have units").dropout;
            let g = ctx.gate(&mut cur, dropout);
            blocks.push(BlockCache {
                input: block_input,
                units,
                gate: g,
            });
            h = cur;
        }

        let (h, dilated) = ctx.run(&layout.dilated, h, true);
        let (h, head) = ctx.run(&layout.head, h, true);
        let logits = conv_batch(&layout.output, p, &h);
        let cache = ForwardCache {
            mode,
            input_frames: inputs.iter().map(|x| x.rows()).collect(),
            stem,
            blocks,
            dilated,
            head,
            output_input: h,
        };
        Ok((logits, cache))
    }

    /// Single-sequence convenience wrapper around [`Self::forward_batch`].
    pub fn forward(&self, features: &Matrix<S>, mode: Mode) -> Result<(Matrix<S>, ForwardCache<S>)> {
        let (mut logits, cache) = self.forward_batch(&[features], mode)?;
        Ok((logits.pop().expect("one output per input"), cache))
    }

    /// Exact gradients of `sum(grad_logits * logits)` with respect to the
    /// weights and the inputs of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_logits: &[Matrix<S>]) -> Result<(Vec<S>, Vec<Matrix<S>>)> {
        let layout = self.layout();
        if grad_logits.len() != cache.input_frames.len() {
            return Err(Error::StaleCache(format!(
                "{} gradients for a batch of {}",
                grad_logits.len(),
                cache.input_frames.len()
            )));
        }
        for (g, &frames) in grad_logits.iter().zip(&cache.input_frames) {
            if g.shape() != (2 * frames, self.config.num_symbols) {
                return Err(Error::StaleCache(format!(
                    "gradient of shape {:?} for an output of shape {:?}",
                    g.shape(),
                    (2 * frames, self.config.num_symbols)
                )));
            }
        }
        let p = &self.weights;
        let mut grad = vec![S::zero(); p.len()];

        let unit_backward = |unit: &Unit, cache: &UnitCache<S>, mut dy: Vec<Matrix<S>>, grad: &mut [S]| {
            if let Some(g) = &cache.gate {
                apply_gate(&mut dy, g);
            }
            let dz = unit.norm.backward(p, &cache.norm, &dy, grad);
            conv_batch_backward(&unit.conv, p, &cache.input, &dz, grad)
        };

        let mut dh = conv_batch_backward(&layout.output, p, &cache.output_input, grad_logits, &mut grad);
        dh = unit_backward(&layout.head, &cache.head, dh, &mut grad);
        dh = unit_backward(&layout.dilated, &cache.dilated, dh, &mut grad);

        for (block, bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
            apply_gate(&mut dh, &bc.gate);
            let mut d_input = match &block.projection {
                Some(proj) => conv_batch_backward(proj, p, &bc.input, &dh, &mut grad),
                None => dh.clone(),
            };
            let mut d = dh;
            for (unit, uc) in block.units.iter().zip(&bc.units).rev() {
                d = unit_backward(unit, uc, d, &mut grad);
            }
            add_into(&mut d_input, &d);
            dh = d_input;
        }

        let dx = unit_backward(&layout.stem, &cache.stem, dh, &mut grad);
        Ok((grad, dx))
    }

    /// Moves running statistics toward the batch statistics recorded in a
    /// training-mode cache: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<S>) -> Result<()> {
        let layout = self.layout();
        let mut caches: Vec<&NormCache<S>> = vec![&cache.stem.norm];
        for b in &cache.blocks {
            caches.extend(b.units.iter().map(|u| &u.norm));
        }
        caches.push(&cache.dilated.norm);
        caches.push(&cache.head.norm);
        let norms = layout.norms();
        if caches.len() != norms.len() {
            return Err(Error::StaleCache("cache comes from a different architecture".into()));
        }
        let momentum = S::from_f64_lossy(self.config.bn_momentum);
        let rest = S::one() - momentum;
        for (norm, nc) in norms.iter().zip(caches) {
            let (Some(mean), Some(var)) = (&nc.batch_mean, &nc.batch_var) else {
                return Err(Error::StaleCache(
                    "running statistics need a training-mode cache".into(),
                ));
            };
            let c = norm.channels;
            if mean.len() != c {
                return Err(Error::StaleCache("normalization width mismatch".into()));
            }
            let stats = &mut self.running[norm.stats..norm.stats + 2 * c];
            for ch in 0..c {
                stats[ch] = momentum * stats[ch] + rest * mean[ch];
                stats[c + ch] = momentum * stats[c + ch] + rest * var[ch];
            }
        }
        Ok(())
    }
}
