use std::convert::Infallible;

use rand::Rng;

use super::ModelConfig;
use crate::attention::AttentionWeights;
use crate::tensor::{Tape, Tensor, Var};

type MapFn<'a, T, U, E> = &'a mut dyn FnMut(&str, &T) -> Result<U, E>;

/// Temporal FC `T_m -> hidden -> H` followed by a residual channel FC.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub temporal_in: T,
    pub temporal_in_bias: T,
    pub temporal_out: T,
    pub temporal_out_bias: T,
    pub channel: T,
    pub channel_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams<T> {
    pub seasonal: EncoderWeights<T>,
    pub trend: EncoderWeights<T>,
    /// Present for scales 2..M only.
    pub attention: Option<AttentionWeights<T>>,
    /// Logit of the scale gate, shape `[1]`.
    pub gate_logit: T,
}

/// Per-channel FC from the concatenated scale outputs `M*H` to `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T> {
    pub weight: T,
    pub bias: T,
}

/// Every learnable tensor of the network. `T` is [`Tensor`] for stored
/// parameters and [`Var`] once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossScaleNetParams<T = Tensor> {
    pub scales: Vec<ScaleParams<T>>,
    pub fusion: FusionWeights<T>,
}

impl<T> EncoderWeights<T> {
    fn try_map<U, E>(&self, prefix: &str, f: MapFn<'_, T, U, E>) -> Result<EncoderWeights<U>, E> {
        Ok(EncoderWeights {
            temporal_in: f(&format!("{prefix}.temporal_in.weight"), &self.temporal_in)?,
            temporal_in_bias: f(
                &format!("{prefix}.temporal_in.bias"),
                &self.temporal_in_bias,
            )?,
            temporal_out: f(&format!("{prefix}.temporal_out.weight"), &self.temporal_out)?,
            temporal_out_bias: f(
                &format!("{prefix}.temporal_out.bias"),
                &self.temporal_out_bias,
            )?,
            channel: f(&format!("{prefix}.channel.weight"), &self.channel)?,
            channel_bias: f(&format!("{prefix}.channel.bias"), &self.channel_bias)?,
        })
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(
            &format!("{prefix}.temporal_in.weight"),
            &mut self.temporal_in,
        );
        f(
            &format!("{prefix}.temporal_in.bias"),
            &mut self.temporal_in_bias,
        );
        f(
            &format!("{prefix}.temporal_out.weight"),
            &mut self.temporal_out,
        );
        f(
            &format!("{prefix}.temporal_out.bias"),
            &mut self.temporal_out_bias,
        );
        f(&format!("{prefix}.channel.weight"), &mut self.channel);
        f(&format!("{prefix}.channel.bias"), &mut self.channel_bias);
    }
}

impl<T> CrossScaleNetParams<T> {
    /// Maps every tensor, visiting them in a fixed order with stable dotted
    /// names such as `scale2.attention.local.key`.
    pub fn try_map<U, E>(&self, f: MapFn<'_, T, U, E>) -> Result<CrossScaleNetParams<U>, E> {
        let mut scales = Vec::with_capacity(self.scales.len());
        for (i, s) in self.scales.iter().enumerate() {
            let p = format!("scale{}", i + 1);
            scales.push(ScaleParams {
                seasonal: s.seasonal.try_map(&format!("{p}.seasonal"), f)?,
                trend: s.trend.try_map(&format!("{p}.trend"), f)?,
                attention: match &s.attention {
                    Some(a) => Some(a.try_map(&format!("{p}.attention"), f)?),
                    None => None,
                },
                gate_logit: f(&format!("{p}.gate"), &s.gate_logit)?,
            });
        }
        Ok(CrossScaleNetParams {
            scales,
            fusion: FusionWeights {
                weight: f("fusion.weight", &self.fusion.weight)?,
                bias: f("fusion.bias", &self.fusion.bias)?,
            },
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> CrossScaleNetParams<U> {
        self.try_map::<U, Infallible>(&mut |n, t| Ok(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        for (i, s) in self.scales.iter_mut().enumerate() {
            let p = format!("scale{}", i + 1);
            s.seasonal.visit_mut(&format!("{p}.seasonal"), f);
            s.trend.visit_mut(&format!("{p}.trend"), f);
            if let Some(a) = &mut s.attention {
                a.visit_mut(&format!("{p}.attention"), f);
            }
            f(&format!("{p}.gate"), &mut s.gate_logit);
        }
        f("fusion.weight", &mut self.fusion.weight);
        f("fusion.bias", &mut self.fusion.bias);
    }

    /// `(name, tensor)` pairs in visiting order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut refs = Vec::new();
        for s in &self.scales {
            for e in [&s.seasonal, &s.trend] {
                refs.extend([
                    &e.temporal_in,
                    &e.temporal_in_bias,
                    &e.temporal_out,
                    &e.temporal_out_bias,
                    &e.channel,
                    &e.channel_bias,
                ]);
            }
            if let Some(a) = &s.attention {
                refs.extend([&a.patch.query, &a.patch.key, &a.patch.value]);
                if let Some(l) = &a.local {
                    refs.extend([&l.query, &l.key, &l.value]);
                }
            }
            refs.push(&s.gate_logit);
        }
        refs.extend([&self.fusion.weight, &self.fusion.bias]);
        self.names().into_iter().zip(refs).collect()
    }

    /// Mutable references in visiting order.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut refs = Vec::new();
        for s in &mut self.scales {
            for e in [&mut s.seasonal, &mut s.trend] {
                refs.extend([
                    &mut e.temporal_in,
                    &mut e.temporal_in_bias,
                    &mut e.temporal_out,
                    &mut e.temporal_out_bias,
                    &mut e.channel,
                    &mut e.channel_bias,
                ]);
            }
            if let Some(a) = &mut s.attention {
                refs.extend([&mut a.patch.query, &mut a.patch.key, &mut a.patch.value]);
                if let Some(l) = &mut a.local {
                    refs.extend([&mut l.query, &mut l.key, &mut l.value]);
                }
            }
            refs.push(&mut s.gate_logit);
        }
        refs.extend([&mut self.fusion.weight, &mut self.fusion.bias]);
        refs
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.try_map::<(), Infallible>(&mut |n, _| {
            names.push(n.to_string());
            Ok(())
        })
        .unwrap_or_else(|e| match e {});
        names
    }
}

impl CrossScaleNetParams<Tensor> {
    /// Fresh parameters: uniform `+-1/sqrt(fan_in)` for weights and biases,
    /// gate logits at zero.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (h, d, hid) = (config.horizon, config.n_features, config.hidden_dim);
        let linear = |fan_in: usize, shape: &[usize], rng: &mut R| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::uniform(shape, -b, b, rng)
        };
        let encoder = |t_m: usize, rng: &mut R| EncoderWeights {
            temporal_in: linear(t_m, &[t_m, hid], rng),
            temporal_in_bias: linear(t_m, &[hid], rng),
            temporal_out: linear(hid, &[hid, h], rng),
            temporal_out_bias: linear(hid, &[h], rng),
            channel: linear(d, &[d, d], rng),
            channel_bias: linear(d, &[d], rng),
        };
        let scales = config
            .scale_lengths()
            .into_iter()
            .enumerate()
            .map(|(i, t_m)| ScaleParams {
                seasonal: encoder(t_m, rng),
                trend: encoder(t_m, rng),
                attention: (i > 0).then(|| AttentionWeights::init(config.variant, d, rng)),
                gate_logit: Tensor::zeros(&[1]),
            })
            .collect();
        let mh = config.n_scales * h;
        let fusion = FusionWeights {
            weight: linear(mh, &[mh, h], rng),
            bias: linear(mh, &[h], rng),
        };
        Self { scales, fusion }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> CrossScaleNetParams<Var<'t>> {
        self.map(|_, t| tape.leaf(t.clone(), requires_grad))
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }
}
