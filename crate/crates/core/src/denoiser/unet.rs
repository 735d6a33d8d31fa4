//! A small conditional encoder–decoder.
//!
//! Input channels are `[c_in·x̂, condition, ln(σ)/4]`. Each resolution level
//! runs two conv+SiLU blocks at `base_channels`; levels are joined by 2×2
//! average pooling on the way down and nearest upsampling plus a skip
//! concatenation on the way up. The raw output `F` is wrapped with the usual
//! preconditioning `D = c_skip·x̂ + c_out·F`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{self, Conv3x3, Tensor};
use super::{check_pair, check_sigma, DenoiserModel, Trainable};
use crate::error::{ensure_len, Error, Result};
use crate::image::ImageGrid;
use crate::scalar::Real;

const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyNetConfig {
    pub base_channels: usize,
    /// Number of downsampling steps; there are `depth + 1` resolution levels.
    pub depth: usize,
    /// Training patch edge in pixels.
    pub patch: usize,
    /// The condition is always concatenated to the input channels.
    pub condition_injection: bool,
}

impl Default for TinyNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 1,
            patch: 32,
            condition_injection: true,
        }
    }
}

impl TinyNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |r: String| Err(Error::invalid("network config", r));
        if self.base_channels < 4 {
            return fail(format!("base_channels {} < 4", self.base_channels));
        }
        if self.depth < 1 {
            return fail("depth must be at least 1".into());
        }
        if self.patch == 0 || self.patch % (1 << self.depth) != 0 {
            return fail(format!(
                "patch {} must be a positive multiple of {}",
                self.patch,
                1 << self.depth
            ));
        }
        if !self.condition_injection {
            return fail("condition_injection must be enabled".into());
        }
        Ok(())
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Preconditioning coefficients `(c_in, c_skip, c_out, c_noise)`.
pub fn preconditioning(sigma: f64, sigma_data: f64) -> (f64, f64, f64, f64) {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    (
        1.0 / s2.sqrt(),
        sigma_data * sigma_data / s2,
        sigma * sigma_data / s2.sqrt(),
        sigma.ln() / 4.0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyUNet<T> {
    config: TinyNetConfig,
    sigma_data: f64,
    convs: Vec<Conv3x3>,
    params: Vec<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetTape<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    c_out: T,
}

impl<T: Real> TinyUNet<T> {
    fn layout(config: &TinyNetConfig) -> Vec<Conv3x3> {
        let c = config.base_channels;
        let mut shapes = vec![(INPUT_CHANNELS, c), (c, c)];
        for _ in 0..config.depth {
            shapes.extend([(c, c), (c, c)]);
        }
        for _ in 0..config.depth {
            shapes.extend([(2 * c, c), (c, c)]);
        }
        shapes.push((c, 1));
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(i, o)| {
                let conv = Conv3x3 {
                    in_channels: i,
                    out_channels: o,
                    offset,
                };
                offset += conv.param_len();
                conv
            })
            .collect()
    }

    /// Fresh network with variance-`1/fan_in` uniform weights and zero biases.
    pub fn new(config: TinyNetConfig, sigma_data: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let convs = Self::layout(&config);
        let total = convs.last().map(|c| c.offset + c.param_len()).unwrap_or(0);
        let mut params = vec![T::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = convs.len() - 1;
        for (k, conv) in convs.iter().enumerate() {
            let fan_in = (conv.in_channels * 9) as f64;
            let mut bound = (3.0 / fan_in).sqrt();
            if k == last {
                bound *= 0.1;
            }
            for w in &mut params[conv.offset..conv.offset + conv.weight_len()] {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            config,
            sigma_data,
            convs,
            params,
        })
    }

    pub fn from_params(config: TinyNetConfig, sigma_data: f64, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let convs = Self::layout(&config);
        let total = convs.last().map(|c| c.offset + c.param_len()).unwrap_or(0);
        ensure_len("network parameters", total, params.len())?;
        Ok(Self {
            config,
            sigma_data,
            convs,
            params,
        })
    }

    pub fn config(&self) -> &TinyNetConfig {
        &self.config
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    fn enc(&self, level: usize) -> (usize, usize) {
        (2 * level, 2 * level + 1)
    }

    fn dec(&self, level: usize) -> (usize, usize) {
        let base = 2 * self.config.depth + 2 + 2 * (self.config.depth - level);
        (base, base + 1)
    }

    fn block(&self, idx: usize, input: Tensor<T>, tape: &mut UNetTape<T>) -> Tensor<T> {
        let pre = self.convs[idx].forward(&self.params, &input);
        let post = nn::silu(&pre);
        tape.inputs[idx] = input;
        tape.pre[idx] = pre;
        post
    }

    fn block_back(&self, idx: usize, g_post: &Tensor<T>, tape: &UNetTape<T>, grads: &mut [T], want: bool) -> Option<Tensor<T>> {
        let g_pre = nn::silu_backward(&tape.pre[idx], g_post);
        self.convs[idx].backward(&self.params, &tape.inputs[idx], &g_pre, grads, want)
    }

    fn check_input(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<()> {
        check_sigma(sigma)?;
        check_pair(x, condition)?;
        let m = self.config.multiple();
        if x.width() % m != 0 || x.height() % m != 0 {
            return Err(Error::invalid(
                "network input",
                format!("{}x{} is not a multiple of {m}", x.width(), x.height()),
            ));
        }
        Ok(())
    }

    fn run(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<(ImageGrid<T>, UNetTape<T>)> {
        self.check_input(x, sigma, condition)?;
        let (c_in, c_skip, c_out, c_noise) = preconditioning(sigma.as_f64(), self.sigma_data);
        let (h, w) = (x.height(), x.width());
        let scaled: Vec<T> = x.values().iter().map(|&v| v * T::lit(c_in)).collect();
        let noise = vec![T::lit(c_noise); h * w];
        let input = Tensor::from_planes(h, w, &[&scaled, condition.values(), &noise]);

        let n = self.convs.len();
        let mut tape = UNetTape {
            inputs: vec![Tensor::zeros(0, 0, 0); n],
            pre: vec![Tensor::zeros(0, 0, 0); n],
            c_out: T::lit(c_out),
        };
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let (a, b) = self.enc(0);
        let mut hcur = self.block(a, input, &mut tape);
        hcur = self.block(b, hcur, &mut tape);
        for level in 1..=depth {
            skips.push(hcur.clone());
            let (a, b) = self.enc(level);
            hcur = self.block(a, nn::avg_pool2(&hcur), &mut tape);
            hcur = self.block(b, hcur, &mut tape);
        }
        for level in (1..=depth).rev() {
            let up = nn::upsample2(&hcur);
            let (a, b) = self.dec(level);
            hcur = self.block(a, nn::concat(&up, &skips[level - 1]), &mut tape);
            hcur = self.block(b, hcur, &mut tape);
        }
        let out_idx = n - 1;
        let raw = self.convs[out_idx].forward(&self.params, &hcur);
        tape.inputs[out_idx] = hcur;

        let cs = T::lit(c_skip);
        let co = T::lit(c_out);
        let denoised = x
            .values()
            .iter()
            .zip(&raw.data)
            .map(|(&u, &f)| cs * u + co * f)
            .collect();
        Ok((x.with_values(denoised), tape))
    }
}

impl<T: Real> DenoiserModel<T> for TinyUNet<T> {
    fn denoise(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<ImageGrid<T>> {
        self.run(x, sigma, condition).map(|(out, _)| out)
    }
}

impl<T: Real> Trainable<T> for TinyUNet<T> {
    type Tape = UNetTape<T>;

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn forward_taped(&self, x: &ImageGrid<T>, sigma: T, condition: &ImageGrid<T>) -> Result<(ImageGrid<T>, Self::Tape)> {
        self.run(x, sigma, condition)
    }

    fn backward(&self, tape: &Self::Tape, grad_out: &[T], grads: &mut [T]) {
        let depth = self.config.depth;
        let out_idx = self.convs.len() - 1;
        let top = &tape.inputs[out_idx];
        let g_raw = grad_out.iter().map(|&g| g * tape.c_out).collect();
        let g_raw = Tensor {
            channels: 1,
            height: top.height,
            width: top.width,
            data: g_raw,
        };
        let mut g = self.convs[out_idx]
            .backward(&self.params, top, &g_raw, grads, true)
            .expect("input grad requested");
        let c = self.config.base_channels;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for level in 1..=depth {
            let (a, b) = self.dec(level);
            g = self.block_back(b, &g, tape, grads, true).expect("input grad");
            let g_cat = self.block_back(a, &g, tape, grads, true).expect("input grad");
            let (g_up, g_skip) = nn::split(&g_cat, c);
            skip_grads[level - 1] = Some(g_skip);
            g = nn::upsample2_backward(&g_up);
        }
        for level in (1..=depth).rev() {
            let (a, b) = self.enc(level);
            g = self.block_back(b, &g, tape, grads, true).expect("input grad");
            g = self.block_back(a, &g, tape, grads, true).expect("input grad");
            g = nn::avg_pool2_backward(&g);
            if let Some(s) = &skip_grads[level - 1] {
                nn::add_assign(&mut g, s);
            }
        }
        let (a, b) = self.enc(0);
        g = self.block_back(b, &g, tape, grads, true).expect("input grad");
        self.block_back(a, &g, tape, grads, false);
    }
}
