//! The multi-scale forecaster.
//!
//! Scale `m` sees the input averaged down by `2^(m-1)`. Every scale splits its
//! input into a moving-average trend and a seasonal remainder, encodes both
//! to the horizon and sums them. Scale 1 runs first; its prediction and its
//! seasonal branch, resampled to each coarser scale's length, key the
//! cross-patch attention that refines that scale's input. Gated scale
//! outputs are concatenated along the horizon and fused per channel.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{CrossScaleNetParams, EncoderWeights, FusionWeights, ScaleParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_patch_attention, AttentionConfig, AttentionRecord, AttentionVariant, CrossPatchOutput,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_features: usize,
    pub n_scales: usize,
    pub patch_len: usize,
    pub decomp_kernel: usize,
    pub hidden_dim: usize,
    pub variant: AttentionVariant,
    pub instance_norm: bool,
}

impl ModelConfig {
    /// Defaults for everything except the data-dependent extents.
    pub fn new(lookback: usize, horizon: usize, n_features: usize) -> Self {
        Self {
            lookback,
            horizon,
            n_features,
            n_scales: 3,
            patch_len: 16,
            decomp_kernel: 25,
            hidden_dim: 64,
            variant: AttentionVariant::CrossDualKey,
            instance_norm: true,
        }
    }

    /// Sequence length at each scale, finest first.
    pub fn scale_lengths(&self) -> Vec<usize> {
        (0..self.n_scales)
            .map(|m| self.lookback.div_ceil(1 << m))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.lookback == 0 || self.horizon == 0 || self.n_features == 0 || self.hidden_dim == 0 {
            return fail("lookback, horizon, n_features and hidden_dim must be positive".into());
        }
        if self.n_scales < 1 {
            return fail("n_scales must be at least 1".into());
        }
        if self.n_scales > 16 {
            return fail(format!("n_scales {} is unreasonably large", self.n_scales));
        }
        if self.patch_len < 1 {
            return fail("patch_len must be at least 1".into());
        }
        if self.decomp_kernel % 2 == 0 {
            return fail(format!(
                "decomp_kernel must be odd, got {}",
                self.decomp_kernel
            ));
        }
        let lengths = self.scale_lengths();
        let coarsest = *lengths.last().expect("n_scales >= 1");
        if self.lookback < self.patch_len << (self.n_scales - 1) {
            return fail(format!(
                "lookback {} over {} scales leaves fewer than patch_len {} steps at the coarsest scale",
                self.lookback, self.n_scales, self.patch_len
            ));
        }
        if lengths.windows(2).any(|w| w[1] >= w[0]) {
            return fail(format!("scale lengths {lengths:?} must strictly decrease"));
        }
        if self.decomp_kernel > 2 * coarsest - 1 {
            return fail(format!(
                "decomp_kernel {} too wide for the coarsest scale length {coarsest}",
                self.decomp_kernel
            ));
        }
        Ok(())
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            patch_len: self.patch_len,
            variant: self.variant,
            model_dim: self.n_features,
        }
    }
}

/// Trend and seasonal parts of `x` along the time axis (axis 1).
pub fn decompose<'t>(x: Var<'t>, kernel: usize) -> Result<(Var<'t>, Var<'t>)> {
    let trend = x.moving_average(1, kernel)?;
    let seasonal = x.sub(trend)?;
    Ok((seasonal, trend))
}

/// `[B, T_m, D] -> [B, H, D]`.
pub fn encoder_forward<'t>(x: Var<'t>, w: &EncoderWeights<Var<'t>>) -> Result<Var<'t>> {
    let z = x
        .transpose()?
        .matmul(w.temporal_in)?
        .add(w.temporal_in_bias)?
        .gelu()?
        .matmul(w.temporal_out)?
        .add(w.temporal_out_bias)?
        .transpose()?;
    let mixed = z.matmul(w.channel)?.add(w.channel_bias)?;
    Ok(z.add(mixed)?)
}

/// Outputs of one scale, all on the horizon grid `[B, H, D]`.
#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput<'t> {
    /// 1-based.
    pub scale: usize,
    pub seq_len: usize,
    /// Ungated `y^m`.
    pub prediction: Var<'t>,
    pub seasonal: Var<'t>,
    pub trend: Var<'t>,
    pub attention: Option<CrossPatchOutput<'t>>,
}

pub struct ForwardOutput<'t> {
    /// `[B, H, D]`, de-normalized when instance normalization is on.
    pub prediction: Var<'t>,
    pub scales: Vec<ScaleOutput<'t>>,
}

impl ForwardOutput<'_> {
    /// Attention records for scales 2..M.
    pub fn capture_attention(&self, batch_mean: bool) -> Vec<AttentionRecord> {
        self.scales
            .iter()
            .filter_map(|s| s.attention.map(|a| a.record(s.scale)))
            .map(|r| if batch_mean { r.batch_mean() } else { r })
            .collect()
    }
}

/// Runs one scale. `keys` must be present exactly when `scale > 1`.
pub fn scale_forward<'t>(
    config: &ModelConfig,
    scale: usize,
    x: Var<'t>,
    keys: Option<(Var<'t>, Var<'t>)>,
    params: &ScaleParams<Var<'t>>,
) -> Result<ScaleOutput<'t>> {
    let seq_len = x.shape()[1];
    let (refined, attention) = match (scale, keys, &params.attention) {
        (1, _, _) => (x, None),
        (_, Some((k1, k2)), Some(w)) => {
            let out = cross_patch_attention(x, k1, k2, &config.attention_config(), w)?;
            (x.add(out.context)?, Some(out))
        }
        (_, None, _) => {
            return Err(Error::Config(format!(
                "scale {scale} needs first-scale keys"
            )))
        }
        (_, _, None) => {
            return Err(Error::Config(format!(
                "scale {scale} has no attention weights"
            )))
        }
    };
    let (seasonal_in, trend_in) = decompose(refined, config.decomp_kernel)?;
    let seasonal = encoder_forward(seasonal_in, &params.seasonal)?;
    let trend = encoder_forward(trend_in, &params.trend)?;
    Ok(ScaleOutput {
        scale,
        seq_len,
        prediction: seasonal.add(trend)?,
        seasonal,
        trend,
        attention,
    })
}

/// Per-window, per-channel statistics along time, broadcast back to `len`.
struct InstanceStats<'t> {
    mean: Var<'t>,
    std: Var<'t>,
}

impl<'t> InstanceStats<'t> {
    fn of(x: Var<'t>) -> Result<(Self, Var<'t>)> {
        let [b, t, d] = x.shape()[..] else {
            return Err(Error::Config("expected [B, T, D] input".into()));
        };
        let mean = x.mean_axis(1)?.reshape(&[b, 1, d])?;
        let centered = x.sub(mean.expand(1, t)?)?;
        let std = centered
            .square()?
            .mean_axis(1)?
            .add_scalar(NORM_EPS)?
            .sqrt()?
            .reshape(&[b, 1, d])?;
        let normalized = centered.div(std.expand(1, t)?)?;
        Ok((Self { mean, std }, normalized))
    }

    fn restore(&self, y: Var<'t>) -> Result<Var<'t>> {
        let h = y.shape()[1];
        Ok(y.mul(self.std.expand(1, h)?)?
            .add(self.mean.expand(1, h)?)?)
    }
}

/// Full forward pass over `x: [B, T, D]`.
pub fn model_forward<'t>(
    config: &ModelConfig,
    params: &CrossScaleNetParams<Var<'t>>,
    x: Var<'t>,
) -> Result<ForwardOutput<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != config.lookback || shape[2] != config.n_features {
        return Err(Error::Config(format!(
            "input shape {shape:?} does not match [B, {}, {}]",
            config.lookback, config.n_features
        )));
    }
    if params.scales.len() != config.n_scales {
        return Err(Error::Config(
            "parameter scales do not match n_scales".into(),
        ));
    }
    let (stats, x) = if config.instance_norm {
        let (s, xn) = InstanceStats::of(x)?;
        (Some(s), xn)
    } else {
        (None, x)
    };

    let mut outputs = Vec::with_capacity(config.n_scales);
    let first = scale_forward(config, 1, x, None, &params.scales[0])?;
    outputs.push(first);
    for (m, p) in params.scales.iter().enumerate().skip(1) {
        let x_m = x.avg_downsample(1, 1 << m)?;
        let t_m = x_m.shape()[1];
        let k1 = first.prediction.linear_interp(1, t_m)?;
        let k2 = first.seasonal.linear_interp(1, t_m)?;
        outputs.push(scale_forward(config, m + 1, x_m, Some((k1, k2)), p)?);
    }

    let gated = outputs
        .iter()
        .zip(&params.scales)
        .map(|(o, p)| o.prediction.mul(p.gate_logit.sigmoid()?))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stacked = x.tape().concat(&gated, 1)?;
    let fused = stacked
        .transpose()?
        .matmul(params.fusion.weight)?
        .add(params.fusion.bias)?
        .transpose()?;
    let prediction = match &stats {
        Some(s) => s.restore(fused)?,
        None => fused,
    };
    Ok(ForwardOutput {
        prediction,
        scales: outputs,
    })
}

/// Anything that maps `[B, T, D]` windows to `[B, H, D]` forecasts on a tape.
pub trait Forecaster {
    fn forecast<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>>;

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        Ok((*self.forecast(&tape, v)?.value()).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossScaleNet {
    pub config: ModelConfig,
    pub params: CrossScaleNetParams,
}

impl CrossScaleNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CrossScaleNetParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: CrossScaleNetParams) -> Result<Self> {
        config.validate()?;
        let expected =
            CrossScaleNetParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).shapes();
        if expected != params.shapes() {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        trainable: bool,
    ) -> Result<(ForwardOutput<'t>, CrossScaleNetParams<Var<'t>>)> {
        let bound = self.params.bind(tape, trainable);
        let out = model_forward(&self.config, &bound, x)?;
        Ok((out, bound))
    }

    /// Forecast plus the batch-averaged attention records.
    pub fn predict_with_attention(&self, x: &Tensor) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let (out, _) = self.forward(&tape, v, false)?;
        let records = out.capture_attention(true);
        Ok(((*out.prediction.value()).clone(), records))
    }
}

impl Forecaster for CrossScaleNet {
    fn forecast<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward(tape, x, false)?.0.prediction)
    }
}
