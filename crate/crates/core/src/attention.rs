//! Cross-patch attention.
//!
//! Patch attention mean-pools each patch and attends across patches; local
//! attention attends among the positions inside every patch. The two
//! contexts are summed after the patch context is broadcast back over its
//! positions. Keys may come from a different stream than queries and values,
//! which is how the model wires in the first scale's predictions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Full-sequence attention with queries, keys and values from the input.
    SelfAttention,
    /// Patch + local attention with keys from the input.
    PatchAttention,
    /// Patch + local attention, both keyed by the first-scale prediction.
    CrossSharedKey,
    /// Patch attention keyed by the first-scale prediction, local attention
    /// keyed by its seasonal branch.
    CrossDualKey,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::SelfAttention,
        AttentionVariant::PatchAttention,
        AttentionVariant::CrossSharedKey,
        AttentionVariant::CrossDualKey,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::SelfAttention => "self_attention",
            AttentionVariant::PatchAttention => "patch_attention",
            AttentionVariant::CrossSharedKey => "cross_shared_key",
            AttentionVariant::CrossDualKey => "cross_dual_key",
        }
    }

    pub fn is_patched(self) -> bool {
        self != AttentionVariant::SelfAttention
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "attention variant",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub patch_len: usize,
    pub variant: AttentionVariant,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len < 1 {
            return Err(Error::Config("patch_len must be at least 1".into()));
        }
        if self.model_dim < 1 {
            return Err(Error::Config("model_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Square `D x D` projections, applied as `x @ W` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvWeights<T> {
    pub query: T,
    pub key: T,
    pub value: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    /// Patch-level projections; the self-attention variant uses these over
    /// the full sequence.
    pub patch: QkvWeights<T>,
    /// Within-patch projections, absent for self-attention.
    pub local: Option<QkvWeights<T>>,
}

impl<T> QkvWeights<T> {
    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<QkvWeights<U>, E> {
        Ok(QkvWeights {
            query: f(&format!("{prefix}.query"), &self.query)?,
            key: f(&format!("{prefix}.key"), &self.key)?,
            value: f(&format!("{prefix}.value"), &self.value)?,
        })
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.query"), &mut self.query);
        f(&format!("{prefix}.key"), &mut self.key);
        f(&format!("{prefix}.value"), &mut self.value);
    }
}

impl<T> AttentionWeights<T> {
    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<AttentionWeights<U>, E> {
        Ok(AttentionWeights {
            patch: self.patch.try_map(&format!("{prefix}.patch"), f)?,
            local: match &self.local {
                Some(l) => Some(l.try_map(&format!("{prefix}.local"), f)?),
                None => None,
            },
        })
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.patch.visit_mut(&format!("{prefix}.patch"), f);
        if let Some(l) = &mut self.local {
            l.visit_mut(&format!("{prefix}.local"), f);
        }
    }
}

impl AttentionWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(variant: AttentionVariant, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let qkv = |rng: &mut R| QkvWeights {
            query: Tensor::uniform(&[dim, dim], -bound, bound, rng),
            key: Tensor::uniform(&[dim, dim], -bound, bound, rng),
            value: Tensor::uniform(&[dim, dim], -bound, bound, rng),
        };
        let patch = qkv(rng);
        let local = variant.is_patched().then(|| qkv(rng));
        Self { patch, local }
    }

    pub fn identity(variant: AttentionVariant, dim: usize) -> Self {
        let eye = || {
            let mut t = Tensor::zeros(&[dim, dim]);
            for i in 0..dim {
                t.data_mut()[i * dim + i] = 1.0;
            }
            t
        };
        let qkv = || QkvWeights {
            query: eye(),
            key: eye(),
            value: eye(),
        };
        Self {
            patch: qkv(),
            local: variant.is_patched().then(qkv),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> AttentionWeights<Var<'t>> {
        self.try_map::<_, std::convert::Infallible>("", &mut |_, t| {
            Ok(tape.leaf(t.clone(), requires_grad))
        })
        .unwrap_or_else(|e| match e {})
    }
}

/// Attention weights captured from one scale, detached from the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// 1-based scale index.
    pub scale: usize,
    pub patch_len: usize,
    /// Sequence length `T_m` at this scale (before patch padding).
    pub seq_len: usize,
    /// Patch attention `[B, N, N]`.
    pub patch: Tensor,
    /// Local attention `[B, N, P, P]`.
    pub local: Tensor,
}

impl AttentionRecord {
    pub fn batch_size(&self) -> usize {
        self.patch.shape()[0]
    }

    pub fn n_patches(&self) -> usize {
        self.patch.shape()[1]
    }

    /// Averages over the batch axis, keeping a batch of one.
    pub fn batch_mean(&self) -> AttentionRecord {
        let mean0 = |t: &Tensor| {
            let b = t.shape()[0];
            let inner = t.numel() / b.max(1);
            let mut data = vec![0.0; inner];
            for chunk in t.data().chunks(inner) {
                for (d, v) in data.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            for d in &mut data {
                *d /= b as f64;
            }
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            Tensor::new(shape, data).expect("shape preserved")
        };
        AttentionRecord {
            patch: mean0(&self.patch),
            local: mean0(&self.local),
            ..self.clone()
        }
    }

    /// Largest deviation of any attention row sum from 1, and whether every
    /// weight lies in `[0, 1]`.
    pub fn normalization_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut in_range = true;
        for (t, n) in [
            (&self.patch, self.n_patches()),
            (&self.local, self.patch_len),
        ] {
            for row in t.data().chunks(n) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                in_range &= row.iter().all(|&w| (0.0..=1.0).contains(&w));
            }
        }
        (worst, in_range)
    }
}

/// Tape-attached result of [`cross_patch_attention`].
#[derive(Clone, Copy, Debug)]
pub struct CrossPatchOutput<'t> {
    /// Context `[B, T, D]`.
    pub context: Var<'t>,
    /// `[B, N, N]`.
    pub patch_weights: Var<'t>,
    /// `[B, N, P, P]`.
    pub local_weights: Var<'t>,
    pub patch_len: usize,
    pub seq_len: usize,
}

impl CrossPatchOutput<'_> {
    pub fn record(&self, scale: usize) -> AttentionRecord {
        AttentionRecord {
            scale,
            patch_len: self.patch_len,
            seq_len: self.seq_len,
            patch: (*self.patch_weights.value()).clone(),
            local: (*self.local_weights.value()).clone(),
        }
    }
}

fn shape3(v: Var<'_>) -> Result<[usize; 3]> {
    match v.shape()[..] {
        [b, t, d] => Ok([b, t, d]),
        ref s => Err(Error::Config(format!(
            "attention expects [B, T, D], got {s:?}"
        ))),
    }
}

fn same_shape(a: Var<'_>, b: Var<'_>) -> Result<[usize; 3]> {
    let sa = shape3(a)?;
    let sb = shape3(b)?;
    if sa != sb {
        return Err(Error::Config(format!(
            "query and key streams must share [B, T, D]: {sa:?} vs {sb:?}"
        )));
    }
    Ok(sa)
}

/// `softmax(q k^T / sqrt(D))` over the last axis.
fn attention_weights<'t>(q: Var<'t>, k: Var<'t>, dim: usize) -> Result<Var<'t>> {
    Ok(q.matmul(k.transpose()?)?
        .scale(1.0 / (dim as f64).sqrt())?
        .softmax()?)
}

/// Attention across mean-pooled patches. Queries and values are pooled from
/// `xq`, keys from `xk`. Returns the context broadcast to `[B, N, P, D]` and
/// the `[B, N, N]` weights.
pub fn patch_attention<'t>(
    xq: Var<'t>,
    xk: Var<'t>,
    weights: &QkvWeights<Var<'t>>,
    patch_len: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let [b, _, d] = same_shape(xq, xk)?;
    let pooled_q = xq.patchify(patch_len)?.mean_axis(2)?;
    let pooled_k = xk.patchify(patch_len)?.mean_axis(2)?;
    let n = pooled_q.shape()[1];
    let q = pooled_q.matmul(weights.query)?;
    let k = pooled_k.matmul(weights.key)?;
    let v = pooled_q.matmul(weights.value)?;
    let a = attention_weights(q, k, d)?;
    let context = a.matmul(v)?.reshape(&[b, n, 1, d])?.expand(2, patch_len)?;
    Ok((context, a))
}

/// Attention among the positions of each patch. Returns the `[B, N, P, D]`
/// context and `[B, N, P, P]` weights.
pub fn local_attention<'t>(
    xq: Var<'t>,
    xk: Var<'t>,
    weights: &QkvWeights<Var<'t>>,
    patch_len: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let [b, _, d] = same_shape(xq, xk)?;
    let patches_q = xq.patchify(patch_len)?;
    let n = patches_q.shape()[1];
    let local_q = patches_q.reshape(&[b * n, patch_len, d])?;
    let local_k = xk.patchify(patch_len)?.reshape(&[b * n, patch_len, d])?;
    let q = local_q.matmul(weights.query)?;
    let k = local_k.matmul(weights.key)?;
    let v = local_q.matmul(weights.value)?;
    let a = attention_weights(q, k, d)?;
    let context = a.matmul(v)?.reshape(&[b, n, patch_len, d])?;
    Ok((context, a.reshape(&[b, n, patch_len, patch_len])?))
}

/// Full-sequence attention; reported as `T` patches of length one so the
/// record layout matches the patched variants.
fn self_attention<'t>(x: Var<'t>, weights: &QkvWeights<Var<'t>>) -> Result<CrossPatchOutput<'t>> {
    let [b, t, d] = shape3(x)?;
    let q = x.matmul(weights.query)?;
    let k = x.matmul(weights.key)?;
    let v = x.matmul(weights.value)?;
    let a = attention_weights(q, k, d)?;
    let context = a.matmul(v)?;
    let local = x.tape().constant(Tensor::full(&[b, t, 1, 1], 1.0));
    Ok(CrossPatchOutput {
        context,
        patch_weights: a,
        local_weights: local,
        patch_len: 1,
        seq_len: t,
    })
}

/// Refinement context for one scale.
///
/// `x` supplies queries and values; `key1` and `key2` are the first-scale
/// prediction and its seasonal branch, already resampled to `x`'s length.
/// Which stream keys which path depends on the variant.
pub fn cross_patch_attention<'t>(
    x: Var<'t>,
    key1: Var<'t>,
    key2: Var<'t>,
    config: &AttentionConfig,
    weights: &AttentionWeights<Var<'t>>,
) -> Result<CrossPatchOutput<'t>> {
    config.validate()?;
    let [_, t, d] = same_shape(x, key1)?;
    same_shape(x, key2)?;
    if d != config.model_dim {
        return Err(Error::Config(format!(
            "input has {d} features, attention configured for {}",
            config.model_dim
        )));
    }
    let (patch_key, local_key) = match config.variant {
        AttentionVariant::SelfAttention => return self_attention(x, &weights.patch),
        AttentionVariant::PatchAttention => (x, x),
        AttentionVariant::CrossSharedKey => (key1, key1),
        AttentionVariant::CrossDualKey => (key1, key2),
    };
    let local_weights = weights.local.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "variant {} needs local attention weights",
            config.variant
        ))
    })?;
    let p = config.patch_len;
    let (patch_ctx, a_patch) = patch_attention(x, patch_key, &weights.patch, p)?;
    let (local_ctx, a_local) = local_attention(x, local_key, local_weights, p)?;
    let context = patch_ctx.add(local_ctx)?.unpatchify(t)?;
    Ok(CrossPatchOutput {
        context,
        patch_weights: a_patch,
        local_weights: a_local,
        patch_len: p,
        seq_len: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: AttentionVariant, p: usize, d: usize) -> AttentionConfig {
        AttentionConfig {
            patch_len: p,
            variant,
            model_dim: d,
        }
    }

    #[test]
    fn variant_round_trips_through_str() {
        for v in AttentionVariant::ALL {
            assert_eq!(v.as_str().parse::<AttentionVariant>().unwrap(), v);
        }
        assert!("multi_head".parse::<AttentionVariant>().is_err());
    }

    #[test]
    fn single_patch_has_unit_patch_attention() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(Tensor::uniform(&[1, 4, 2], -1.0, 1.0, &mut rng));
        let w = AttentionWeights::init(AttentionVariant::PatchAttention, 2, &mut rng)
            .bind(&tape, false);
        let (_, a) = patch_attention(x, x, &w.patch, 4).unwrap();
        assert_eq!(a.value().data(), &[1.0]);
    }

    #[test]
    fn constant_keys_give_uniform_rows() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.constant(Tensor::uniform(&[1, 6, 1], -1.0, 1.0, &mut rng));
        let k = tape.constant(Tensor::full(&[1, 6, 1], 0.7));
        let w = AttentionWeights::identity(AttentionVariant::PatchAttention, 1).bind(&tape, false);
        let (_, a) = patch_attention(x, k, &w.patch, 2).unwrap();
        assert!(a
            .value()
            .data()
            .iter()
            .all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let (_, l) = local_attention(x, k, w.local.as_ref().unwrap(), 3).unwrap();
        assert!(l
            .value()
            .data()
            .iter()
            .all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn unit_patch_local_attention_copies_values() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = tape.constant(Tensor::uniform(&[2, 3, 2], -1.0, 1.0, &mut rng));
        let w = AttentionWeights::init(AttentionVariant::PatchAttention, 2, &mut rng)
            .bind(&tape, false);
        let lw = w.local.as_ref().unwrap();
        let (ctx, a) = local_attention(x, x, lw, 1).unwrap();
        assert!(a.value().data().iter().all(|&v| v == 1.0));
        let v = x.matmul(lw.value).unwrap().value();
        assert!(ctx
            .value()
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn mismatched_key_length_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 1]));
        let k = tape.constant(Tensor::zeros(&[1, 6, 1]));
        let w = AttentionWeights::identity(AttentionVariant::CrossDualKey, 1).bind(&tape, false);
        let c = cfg(AttentionVariant::CrossDualKey, 2, 1);
        assert!(cross_patch_attention(x, k, k, &c, &w).is_err());
    }

    #[test]
    fn self_attention_record_layout() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::uniform(&[2, 5, 3], -1.0, 1.0, &mut rng));
        let w =
            AttentionWeights::init(AttentionVariant::SelfAttention, 3, &mut rng).bind(&tape, false);
        let out = cross_patch_attention(x, x, x, &cfg(AttentionVariant::SelfAttention, 2, 3), &w)
            .unwrap();
        let rec = out.record(2);
        assert_eq!(rec.patch.shape(), &[2, 5, 5]);
        assert_eq!(rec.local.shape(), &[2, 5, 1, 1]);
        assert_eq!(out.context.shape(), vec![2, 5, 3]);
        let (err, in_range) = rec.normalization_error();
        assert!(err < 1e-12 && in_range);
    }

    #[test]
    fn patched_variant_without_local_weights_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 1]));
        let w = AttentionWeights::identity(AttentionVariant::SelfAttention, 1).bind(&tape, false);
        let c = cfg(AttentionVariant::PatchAttention, 2, 1);
        assert!(cross_patch_attention(x, x, x, &c, &w).is_err());
    }
}
