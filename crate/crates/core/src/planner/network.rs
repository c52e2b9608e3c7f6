use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::dist::PlanDistribution;
use super::tensor::{
    avg_pool2, avg_pool2_backward, conv1_backward, conv1_forward, conv3_backward, conv3_forward,
    relu_backward, relu_inplace, upsample2, upsample2_backward, Float,
};
use super::{Objective, PlannerConfig};
use crate::error::{Error, Result};
use crate::raster::{BevInput, N_CHANNELS};
use crate::rng::{seeded, SplitMix64};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Derived from the spatial bias map; rebuilt by [`Network::refresh`].
#[derive(Debug, Clone)]
struct Spatial {
    /// Log-sum-exp of the bias map inside each block, `[h][block]`.
    beta: Vec<f64>,
    log_within: Arc<Vec<f64>>,
    q_within: Vec<f64>,
    zero_within: Arc<Vec<f64>>,
}

/// The planner network, generic over its scalar type.
#[derive(Debug, Clone)]
pub struct Network<T: Float> {
    config: PlannerConfig,
    params: Vec<Tensor<T>>,
    spatial: Spatial,
}

pub type Planner = Network<f32>;

/// One training sample: pooled input plus the flat target cell per timestep.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub input: Vec<T>,
    pub targets: Vec<Option<usize>>,
    pub id: String,
}

/// Mean-loss gradient of a batch.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    pub grads: Vec<Vec<T>>,
    /// Mean unclipped loss.
    pub loss_raw: f64,
    /// Mean clipped loss.
    pub loss_reported: f64,
    pub n_valid: usize,
}

enum SpatialGrad {
    /// Scaled block probabilities, `[h][block]`; the gradient with respect
    /// to the bias map follows from the shared within-block factor.
    Blocks(Vec<f64>),
    Dense(Vec<f64>),
}

struct SampleGrad<T> {
    loss_raw: f64,
    loss_reported: f64,
    scale: f64,
    grads: Vec<Vec<T>>,
    spatial: SpatialGrad,
}

struct Activations<T> {
    enc_in: Vec<Vec<T>>,
    enc_out: Vec<Vec<T>>,
    mask: Option<Vec<T>>,
    deep: Vec<T>,
    dec_in: Vec<Vec<T>>,
    dec_out: Vec<Vec<T>>,
    z: Vec<T>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Float> Network<T> {
    /// Fresh network: fan-in-scaled uniform convolution weights drawn from
    /// `seeded(config.seed)`, zero biases, zero head and bias map.
    pub fn new(config: PlannerConfig) -> Result<Self> {
        let mut rng = seeded(config.seed);
        Self::init(config, &mut rng)
    }

    pub fn init(config: PlannerConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if (name.starts_with("enc") || name.starts_with("dec"))
                    && name.ends_with(".weight")
                {
                    let fan_in = shape[1] * shape[2] * shape[3];
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64(bound * (2.0 * rng.random::<f64>() - 1.0)))
                        .collect()
                } else {
                    vec![T::ZERO; n]
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    /// Rebuilds a network from named tensors, checking names and shapes.
    pub fn from_params(config: PlannerConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.len() != params.len() {
            return Err(Error::dimension(
                "parameter count",
                shapes.len(),
                params.len(),
            ));
        }
        for ((name, shape), t) in shapes.iter().zip(&params) {
            if *name != t.name
                || *shape != t.shape
                || t.data.len() != shape.iter().product::<usize>()
            {
                return Err(Error::dimension(
                    format!("tensor {name}"),
                    format!("{name} {shape:?}"),
                    format!("{} {:?} ({} values)", t.name, t.shape, t.data.len()),
                ));
            }
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: PlannerConfig, params: Vec<Tensor<T>>) -> Self {
        let n = config.horizon_steps * config.grid.n_cells();
        let mut net = Self {
            config,
            params,
            spatial: Spatial {
                beta: Vec::new(),
                log_within: Arc::new(Vec::new()),
                q_within: Vec::new(),
                zero_within: Arc::new(vec![0.0; n]),
            },
        };
        net.refresh();
        net
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Mutable parameters; call [`Network::refresh`] after changing the
    /// spatial bias map.
    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    fn n_stages(&self) -> usize {
        self.config.widths.len()
    }

    fn enc_idx(&self, k: usize) -> usize {
        2 * k
    }

    fn dec_idx(&self, k: usize) -> usize {
        2 * self.n_stages() + 2 * k
    }

    fn head_idx(&self) -> usize {
        4 * self.n_stages() - 2
    }

    fn spatial_idx(&self) -> usize {
        4 * self.n_stages()
    }

    fn res(&self, k: usize) -> (usize, usize) {
        let (r, c) = self.config.base_resolution();
        (r >> k, c >> k)
    }

    fn n_blocks(&self) -> usize {
        let (r, c) = self.config.base_resolution();
        r * c
    }

    /// Block index of every full-resolution cell.
    fn block_of(&self, cell: usize) -> usize {
        let g = &self.config.grid;
        let p = self.config.input_pool;
        let (r, c) = (cell / g.n_cols, cell % g.n_cols);
        (r / p) * (g.n_cols / p) + c / p
    }

    pub fn refresh(&mut self) {
        let h_n = self.config.horizon_steps;
        let cells = self.config.grid.n_cells();
        let nb = self.n_blocks();
        let bias = &self.params[self.spatial_idx()].data;
        let mut beta = vec![f64::NEG_INFINITY; h_n * nb];
        // running max per block, then sum of exponentials
        for h in 0..h_n {
            for cell in 0..cells {
                let b = self.block_of(cell);
                let v = bias[h * cells + cell].to_f64();
                if v > beta[h * nb + b] {
                    beta[h * nb + b] = v;
                }
            }
        }
        let mut sums = vec![0.0; h_n * nb];
        for h in 0..h_n {
            for cell in 0..cells {
                let b = h * nb + self.block_of(cell);
                sums[b] += (bias[h * cells + cell].to_f64() - beta[b]).exp();
            }
        }
        for (bt, s) in beta.iter_mut().zip(&sums) {
            *bt += s.ln();
        }
        let mut log_within = vec![0.0; h_n * cells];
        for h in 0..h_n {
            for cell in 0..cells {
                log_within[h * cells + cell] =
                    bias[h * cells + cell].to_f64() - beta[h * nb + self.block_of(cell)];
            }
        }
        self.spatial.q_within = log_within.iter().map(|v| v.exp()).collect();
        self.spatial.log_within = Arc::new(log_within);
        self.spatial.beta = beta;
    }

    /// Average-pools the binary raster to the encoder resolution.
    pub fn prepare(&self, input: &BevInput) -> Result<Vec<T>> {
        if input.spec != self.config.grid {
            return Err(Error::dimension(
                "planner input grid",
                format!("{:?}", self.config.grid),
                format!("{:?}", input.spec),
            ));
        }
        if self.config.in_channels != N_CHANNELS {
            return Err(Error::dimension(
                "planner input channels",
                self.config.in_channels,
                N_CHANNELS,
            ));
        }
        let g = &self.config.grid;
        let p = self.config.input_pool;
        let (rr, rc) = self.config.base_resolution();
        let mut out = vec![T::ZERO; N_CHANNELS * rr * rc];
        let mut counts = vec![0u32; rr * rc];
        let inv = T::from_f64(1.0 / (p * p) as f64);
        for k in 0..N_CHANNELS {
            counts.fill(0);
            let ch = input.channel(k);
            for r in 0..g.n_rows {
                let row = &ch[r * g.n_cols..(r + 1) * g.n_cols];
                let dst = &mut counts[(r / p) * rc..(r / p + 1) * rc];
                for (c, v) in row.iter().enumerate() {
                    dst[c / p] += *v as u32;
                }
            }
            for (o, cnt) in out[k * rr * rc..(k + 1) * rr * rc].iter_mut().zip(&counts) {
                *o = T::from_f64(*cnt as f64) * inv;
            }
        }
        Ok(out)
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        let (rr, rc) = self.config.base_resolution();
        let expected = self.config.in_channels * rr * rc;
        if x.len() != expected {
            return Err(Error::dimension(
                "planner input",
                format!(
                    "{} values ({}×{}×{})",
                    expected, self.config.in_channels, rr, rc
                ),
                format!("{} values", x.len()),
            ));
        }
        Ok(())
    }

    fn run(&self, x: &[T], dropout: Option<&mut SplitMix64>) -> Activations<T> {
        let s_n = self.n_stages();
        let w = &self.config.widths;
        let mut enc_in = Vec::with_capacity(s_n);
        let mut enc_out: Vec<Vec<T>> = Vec::with_capacity(s_n);
        for k in 0..s_n {
            let (h, wd) = self.res(k);
            let (cin, input) = if k == 0 {
                (self.config.in_channels, x.to_vec())
            } else {
                let (ph, pw) = self.res(k - 1);
                (w[k - 1], avg_pool2(&enc_out[k - 1], w[k - 1], ph, pw))
            };
            let wi = self.enc_idx(k);
            let mut y = conv3_forward(
                &input,
                cin,
                h,
                wd,
                &self.params[wi].data,
                &self.params[wi + 1].data,
                w[k],
            );
            relu_inplace(&mut y);
            enc_in.push(input);
            enc_out.push(y);
        }
        let mut deep = enc_out[s_n - 1].clone();
        let rate = self.config.dropout_rate;
        let mask = match dropout {
            Some(rng) if rate > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - rate));
                let m: Vec<T> = (0..deep.len())
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            T::ZERO
                        } else {
                            keep
                        }
                    })
                    .collect();
                for (v, mk) in deep.iter_mut().zip(&m) {
                    *v *= *mk;
                }
                Some(m)
            }
            _ => None,
        };
        let mut dec_in: Vec<Vec<T>> = vec![Vec::new(); s_n.saturating_sub(1)];
        let mut dec_out: Vec<Vec<T>> = vec![Vec::new(); s_n.saturating_sub(1)];
        let mut d = deep.clone();
        for k in (0..s_n.saturating_sub(1)).rev() {
            let (h, wd) = self.res(k);
            let (sh, sw) = self.res(k + 1);
            let cu = w[k + 1];
            let mut cat = vec![T::ZERO; (cu + w[k]) * h * wd];
            upsample2(&d, cu, sh, sw, &mut cat[..cu * h * wd]);
            cat[cu * h * wd..].copy_from_slice(&enc_out[k]);
            let wi = self.dec_idx(k);
            let mut y = conv3_forward(
                &cat,
                cu + w[k],
                h,
                wd,
                &self.params[wi].data,
                &self.params[wi + 1].data,
                w[k],
            );
            relu_inplace(&mut y);
            dec_in[k] = cat;
            d = y.clone();
            dec_out[k] = y;
        }
        let (h, wd) = self.res(0);
        let hi = self.head_idx();
        let z = conv1_forward(
            &d,
            w[0],
            h * wd,
            &self.params[hi].data,
            &self.params[hi + 1].data,
            self.config.horizon_steps,
        );
        Activations {
            enc_in,
            enc_out,
            mask,
            deep,
            dec_in,
            dec_out,
            z,
        }
    }

    /// Backpropagates `dz` (gradient with respect to the head output) into
    /// per-parameter gradients. The bias-map slot is left empty.
    fn backprop(&self, act: &Activations<T>, dz: &[T]) -> Vec<Vec<T>> {
        let s_n = self.n_stages();
        let w = &self.config.widths;
        let si = self.spatial_idx();
        let mut grads: Vec<Vec<T>> = self
            .params
            .iter()
            .enumerate()
            .map(|(k, t)| {
                if k == si {
                    Vec::new()
                } else {
                    vec![T::ZERO; t.data.len()]
                }
            })
            .collect();
        let (h0, w0) = self.res(0);
        let hi = self.head_idx();
        let head_in = if s_n > 1 { &act.dec_out[0] } else { &act.deep };
        let (gw, rest) = grads.split_at_mut(hi + 1);
        let mut dd = conv1_backward(
            head_in,
            w[0],
            h0 * w0,
            &self.params[hi].data,
            self.config.horizon_steps,
            dz,
            &mut gw[hi],
            &mut rest[0],
        );
        let mut d_enc: Vec<Vec<T>> = act.enc_out.iter().map(|e| vec![T::ZERO; e.len()]).collect();
        for k in 0..s_n.saturating_sub(1) {
            let (h, wd) = self.res(k);
            let (sh, sw) = self.res(k + 1);
            let cu = w[k + 1];
            relu_backward(&act.dec_out[k], &mut dd);
            let wi = self.dec_idx(k);
            let (gw, gb) = grads.split_at_mut(wi + 1);
            let dcat = conv3_backward(
                &act.dec_in[k],
                cu + w[k],
                h,
                wd,
                &self.params[wi].data,
                w[k],
                &dd,
                &mut gw[wi],
                &mut gb[0],
                true,
            )
            .expect("input gradient requested");
            for (a, b) in d_enc[k].iter_mut().zip(&dcat[cu * h * wd..]) {
                *a += *b;
            }
            dd = upsample2_backward(&dcat[..cu * h * wd], cu, sh, sw);
        }
        if let Some(m) = &act.mask {
            for (g, mk) in dd.iter_mut().zip(m) {
                *g *= *mk;
            }
        }
        for (a, b) in d_enc[s_n - 1].iter_mut().zip(&dd) {
            *a += *b;
        }
        for k in (0..s_n).rev() {
            let (h, wd) = self.res(k);
            let cin = if k == 0 {
                self.config.in_channels
            } else {
                w[k - 1]
            };
            let mut dy = std::mem::take(&mut d_enc[k]);
            relu_backward(&act.enc_out[k], &mut dy);
            let wi = self.enc_idx(k);
            let (gw, gb) = grads.split_at_mut(wi + 1);
            let dx = conv3_backward(
                &act.enc_in[k],
                cin,
                h,
                wd,
                &self.params[wi].data,
                w[k],
                &dy,
                &mut gw[wi],
                &mut gb[0],
                k > 0,
            );
            if let Some(dx) = dx {
                let (ph, pw) = self.res(k - 1);
                avg_pool2_backward(&dx, w[k - 1], ph, pw, &mut d_enc[k - 1]);
            }
        }
        grads
    }

    /// Planner output for a rasterized input. Dropout is applied only when an
    /// RNG is supplied (train mode).
    pub fn forward(
        &self,
        input: &BevInput,
        dropout: Option<&mut SplitMix64>,
    ) -> Result<PlanDistribution> {
        let x = self.prepare(input)?;
        self.forward_raw(&x, dropout)
    }

    /// Like [`Network::forward`] on an already pooled input.
    pub fn forward_raw(
        &self,
        x: &[T],
        dropout: Option<&mut SplitMix64>,
    ) -> Result<PlanDistribution> {
        self.check_input(x)?;
        let act = self.run(x, dropout);
        Ok(self.distribution(&act.z))
    }

    fn distribution(&self, z: &[T]) -> PlanDistribution {
        let g = &self.config.grid;
        let h_n = self.config.horizon_steps;
        let nb = self.n_blocks();
        match self.config.objective {
            Objective::SoftmaxCe => {
                let mut log_block = vec![0.0; h_n * nb];
                for h in 0..h_n {
                    let a = &mut log_block[h * nb..(h + 1) * nb];
                    for (b, v) in a.iter_mut().enumerate() {
                        *v = z[h * nb + b].to_f64() + self.spatial.beta[h * nb + b];
                    }
                    let lse = log_sum_exp(a.iter().copied());
                    for v in a.iter_mut() {
                        *v -= lse;
                    }
                }
                PlanDistribution {
                    horizon: h_n,
                    n_rows: g.n_rows,
                    n_cols: g.n_cols,
                    pool: self.config.input_pool,
                    log_block,
                    log_within: Arc::clone(&self.spatial.log_within),
                }
            }
            Objective::BinaryCePosWeighted => {
                let cells = g.n_cells();
                let bias = &self.params[self.spatial_idx()].data;
                let mut dense = vec![0.0; h_n * cells];
                for h in 0..h_n {
                    let d = &mut dense[h * cells..(h + 1) * cells];
                    for (cell, v) in d.iter_mut().enumerate() {
                        let l = z[h * nb + self.block_of(cell)].to_f64()
                            + bias[h * cells + cell].to_f64();
                        *v = -softplus(-l);
                    }
                    let lse = log_sum_exp(d.iter().copied());
                    for v in d.iter_mut() {
                        *v -= lse;
                    }
                }
                PlanDistribution {
                    horizon: h_n,
                    n_rows: g.n_rows,
                    n_cols: g.n_cols,
                    pool: 1,
                    log_block: dense,
                    log_within: Arc::clone(&self.spatial.zero_within),
                }
            }
        }
    }

    fn clip_scale(&self, raw: f64) -> (f64, f64) {
        match self.config.loss_clip {
            Some(c) if raw > c => (c, c / raw),
            _ => (raw, 1.0),
        }
    }

    fn sample_grad(
        &self,
        item: &TrainItem<T>,
        dropout: Option<&mut SplitMix64>,
    ) -> Option<SampleGrad<T>> {
        if item.targets.iter().all(|t| t.is_none()) {
            return None;
        }
        let act = self.run(&item.input, dropout);
        let h_n = self.config.horizon_steps;
        let nb = self.n_blocks();
        let cells = self.config.grid.n_cells();
        let mut dz = vec![0.0f64; h_n * nb];
        let mut raw = 0.0;
        let spatial = match self.config.objective {
            Objective::SoftmaxCe => {
                let mut pblock = vec![0.0; h_n * nb];
                for (h, t) in item.targets.iter().enumerate().take(h_n) {
                    let Some(cell) = *t else { continue };
                    let a: Vec<f64> = (0..nb)
                        .map(|b| act.z[h * nb + b].to_f64() + self.spatial.beta[h * nb + b])
                        .collect();
                    let lse = log_sum_exp(a.iter().copied());
                    let tb = self.block_of(cell);
                    raw -= a[tb] - lse + self.spatial.log_within[h * cells + cell];
                    for b in 0..nb {
                        let p = (a[b] - lse).exp();
                        pblock[h * nb + b] = p;
                        dz[h * nb + b] = p;
                    }
                    dz[h * nb + tb] -= 1.0;
                }
                SpatialGrad::Blocks(pblock)
            }
            Objective::BinaryCePosWeighted => {
                let bias = &self.params[self.spatial_idx()].data;
                let pw = self.config.pos_weight;
                let mut dl = vec![0.0; h_n * cells];
                for (h, t) in item.targets.iter().enumerate().take(h_n) {
                    let Some(target) = *t else { continue };
                    for cell in 0..cells {
                        let b = self.block_of(cell);
                        let l = act.z[h * nb + b].to_f64() + bias[h * cells + cell].to_f64();
                        let g = if cell == target {
                            raw += pw * softplus(-l);
                            pw * (sigmoid(l) - 1.0)
                        } else {
                            raw += softplus(l);
                            sigmoid(l)
                        };
                        dl[h * cells + cell] = g;
                        dz[h * nb + b] += g;
                    }
                }
                SpatialGrad::Dense(dl)
            }
        };
        let (reported, scale) = self.clip_scale(raw);
        let dz_t: Vec<T> = dz.iter().map(|v| T::from_f64(v * scale)).collect();
        let grads = self.backprop(&act, &dz_t);
        let spatial = match spatial {
            SpatialGrad::Blocks(mut p) => {
                p.iter_mut().for_each(|v| *v *= scale);
                SpatialGrad::Blocks(p)
            }
            SpatialGrad::Dense(mut d) => {
                d.iter_mut().for_each(|v| *v *= scale);
                SpatialGrad::Dense(d)
            }
        };
        Some(SampleGrad {
            loss_raw: raw,
            loss_reported: reported,
            scale,
            grads,
            spatial,
        })
    }

    /// Gradient of the mean batch loss. Samples without any in-grid target
    /// are skipped. With `dropout_seeds`, sample `i` draws its dropout mask
    /// from `seeded(dropout_seeds[i])`. Per-sample work may run in parallel;
    /// the reduction is always in sample order.
    pub fn batch_gradient(
        &self,
        items: &[TrainItem<T>],
        dropout_seeds: Option<&[u64]>,
        step: usize,
        parallel: bool,
    ) -> Result<Option<BatchGrad<T>>> {
        for item in items {
            self.check_input(&item.input)?;
        }
        let work = |i: usize| {
            let mut rng = dropout_seeds.map(|s| seeded(s[i]));
            self.sample_grad(&items[i], rng.as_mut())
        };
        let results: Vec<Option<SampleGrad<T>>> = if parallel {
            (0..items.len()).into_par_iter().map(work).collect()
        } else {
            (0..items.len()).map(work).collect()
        };
        let valid: Vec<(usize, SampleGrad<T>)> = results
            .into_iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|g| (i, g)))
            .collect();
        if valid.is_empty() {
            return Ok(None);
        }
        for (i, g) in &valid {
            if !g.loss_raw.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    sample: items[*i].id.clone(),
                    message: format!("loss is {}", g.loss_raw),
                });
            }
        }
        let n = valid.len() as f64;
        let inv = T::from_f64(1.0 / n);
        let si = self.spatial_idx();
        let mut grads: Vec<Vec<T>> = self
            .params
            .iter()
            .enumerate()
            .map(|(k, t)| {
                if k == si {
                    Vec::new()
                } else {
                    vec![T::ZERO; t.data.len()]
                }
            })
            .collect();
        let h_n = self.config.horizon_steps;
        let nb = self.n_blocks();
        let cells = self.config.grid.n_cells();
        let mut pblock_sum = vec![0.0f64; h_n * nb];
        let mut spatial_dense = vec![0.0f64; h_n * cells];
        let mut has_blocks = false;
        let (mut loss_raw, mut loss_reported) = (0.0, 0.0);
        for (i, g) in &valid {
            loss_raw += g.loss_raw;
            loss_reported += g.loss_reported;
            for (k, (acc, gk)) in grads.iter_mut().zip(&g.grads).enumerate() {
                if k == si {
                    continue;
                }
                for (a, v) in acc.iter_mut().zip(gk) {
                    *a += *v * inv;
                }
            }
            match &g.spatial {
                SpatialGrad::Blocks(p) => {
                    has_blocks = true;
                    for (a, v) in pblock_sum.iter_mut().zip(p) {
                        *a += v;
                    }
                    for (h, t) in items[*i].targets.iter().enumerate().take(h_n) {
                        if let Some(cell) = t {
                            spatial_dense[h * cells + cell] -= g.scale;
                        }
                    }
                }
                SpatialGrad::Dense(d) => {
                    for (a, v) in spatial_dense.iter_mut().zip(d) {
                        *a += v;
                    }
                }
            }
        }
        if has_blocks {
            for h in 0..h_n {
                for cell in 0..cells {
                    let b = self.block_of(cell);
                    spatial_dense[h * cells + cell] +=
                        pblock_sum[h * nb + b] * self.spatial.q_within[h * cells + cell];
                }
            }
        }
        grads[si] = spatial_dense.iter().map(|v| T::from_f64(v / n)).collect();
        Ok(Some(BatchGrad {
            grads,
            loss_raw: loss_raw / n,
            loss_reported: loss_reported / n,
            n_valid: valid.len(),
        }))
    }

    /// Mean clipped loss of a batch in eval mode, computed from the forward
    /// pass alone.
    pub fn batch_loss(&self, items: &[TrainItem<T>]) -> Result<Option<f64>> {
        let mut total = 0.0;
        let mut n = 0usize;
        let g = &self.config.grid;
        for item in items {
            if item.targets.iter().all(|t| t.is_none()) {
                continue;
            }
            let dist = self.forward_raw(&item.input, None)?;
            let raw: f64 = match self.config.objective {
                Objective::SoftmaxCe => item
                    .targets
                    .iter()
                    .enumerate()
                    .filter_map(|(h, t)| t.map(|cell| -dist.log_prob(h, cell)))
                    .sum(),
                Objective::BinaryCePosWeighted => {
                    let act = self.run(&item.input, None);
                    let bias = &self.params[self.spatial_idx()].data;
                    let nb = self.n_blocks();
                    let cells = g.n_cells();
                    let mut s = 0.0;
                    for (h, t) in item.targets.iter().enumerate() {
                        let Some(target) = *t else { continue };
                        for cell in 0..cells {
                            let l = act.z[h * nb + self.block_of(cell)].to_f64()
                                + bias[h * cells + cell].to_f64();
                            s += if cell == target {
                                self.config.pos_weight * softplus(-l)
                            } else {
                                softplus(l)
                            };
                        }
                    }
                    s
                }
            };
            total += self.clip_scale(raw).0;
            n += 1;
        }
        Ok((n > 0).then(|| total / n as f64))
    }
}

/// Parameter names and shapes in storage order.
pub(crate) fn param_shapes(config: &PlannerConfig) -> Vec<(String, Vec<usize>)> {
    let w = &config.widths;
    let s_n = w.len();
    let mut out = Vec::new();
    for k in 0..s_n {
        let cin = if k == 0 { config.in_channels } else { w[k - 1] };
        out.push((format!("enc{k}.weight"), vec![w[k], cin, 3, 3]));
        out.push((format!("enc{k}.bias"), vec![w[k]]));
    }
    for k in 0..s_n - 1 {
        out.push((format!("dec{k}.weight"), vec![w[k], w[k + 1] + w[k], 3, 3]));
        out.push((format!("dec{k}.bias"), vec![w[k]]));
    }
    out.push(("head.weight".into(), vec![config.horizon_steps, w[0], 1, 1]));
    out.push(("head.bias".into(), vec![config.horizon_steps]));
    out.push((
        "spatial_bias".into(),
        vec![config.horizon_steps, config.grid.n_rows, config.grid.n_cols],
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2D;
    use crate::raster::GridSpec;

    fn small() -> PlannerConfig {
        PlannerConfig {
            grid: GridSpec {
                n_rows: 32,
                n_cols: 32,
                ..GridSpec::default()
            },
            horizon_steps: 3,
            input_pool: 2,
            widths: vec![4, 6, 8],
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let net = Planner::new(small()).unwrap();
        let mut bev = BevInput::zeros(small().grid, Pose2D::IDENTITY);
        bev.data.iter_mut().step_by(7).for_each(|v| *v = 1);
        let d = net.forward(&bev, None).unwrap();
        let expected = -(1024f64).ln();
        for h in 0..3 {
            for cell in 0..1024 {
                assert!((d.log_prob(h, cell) - expected).abs() < 1e-12);
            }
            assert!((d.prob_sum(h) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_grid_is_a_dimension_error() {
        let net = Planner::new(small()).unwrap();
        let bev = BevInput::zeros(GridSpec::default(), Pose2D::IDENTITY);
        let err = net.forward(&bev, None).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
        assert!(net.forward_raw(&[0.0; 5], None).is_err());
    }

    #[test]
    fn shapes_follow_widths() {
        let shapes = param_shapes(&small());
        let names: Vec<&str> = shapes.iter().map(|s| s.0.as_str()).collect();
        assert_eq!(
            names,
            [
                "enc0.weight",
                "enc0.bias",
                "enc1.weight",
                "enc1.bias",
                "enc2.weight",
                "enc2.bias",
                "dec0.weight",
                "dec0.bias",
                "dec1.weight",
                "dec1.bias",
                "head.weight",
                "head.bias",
                "spatial_bias"
            ]
        );
        assert_eq!(shapes[8].1, vec![6, 14, 3, 3]);
    }
}
