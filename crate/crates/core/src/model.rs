//! Full forward pass: spectral profile → embedding → per-scale patching and
//! deformable convolution → amplitude-weighted aggregation → residual MLP head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{aggregate, forecast_head};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::deform::{deform_conv3d, gen_alpha, gen_offsets, offset_bound, pool_context, DeformableKernel};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamStore, TwoLayer};
use crate::patching::{embed_channels, patch_len_for, patchify, resample_kernel, reshape_3d, unpatchify};
use crate::spectral::{self, SpectralProfile};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input window length `L`.
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Embedding width `C_m`.
    pub embed_dim: usize,
    /// Number of spectral scales `k`.
    pub scales: usize,
    /// Deformable kernel taps `K_t`.
    pub taps: usize,
    /// Head MLP hidden width.
    pub hidden: usize,
    /// Length of the base kernel resampled into each patch convolution.
    pub patch_taps: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for everything but the data-determined extents.
    pub fn new(lookback: usize, horizon: usize, channels: usize) -> Self {
        let embed_dim = 32;
        ModelConfig {
            lookback,
            horizon,
            channels,
            embed_dim,
            scales: 2,
            taps: 3,
            hidden: 4 * embed_dim,
            patch_taps: 4,
            seed: 42,
        }
    }

    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self.hidden = 4 * embed_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("taps", self.taps),
            ("hidden", self.hidden),
            ("patch_taps", self.patch_taps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.lookback < 8 {
            return Err(Error::Config(format!("lookback {} < 8", self.lookback)));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.scales < 1 || self.scales > self.lookback / 2 {
            return Err(Error::Config(format!(
                "scales {} outside 1..={}",
                self.scales,
                self.lookback / 2
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters a model with this configuration holds.
    pub fn param_count(&self) -> usize {
        let (c, cm, k, t, h, g) = (
            self.channels,
            self.embed_dim,
            self.scales,
            self.taps,
            self.hidden,
            self.patch_taps,
        );
        let two_layer = |i: usize, hid: usize, o: usize| i * hid + hid + hid * o + o;
        let embed = c * cm + cm;
        let per_scale = g * cm * cm + t * cm * cm + 2 * two_layer(cm, cm, t) + two_layer(2 * cm, cm, t);
        let head = two_layer(self.lookback * cm, h, self.horizon * c);
        embed + k * per_scale + head
    }

    fn to_meta(&self, ck: &mut Checkpoint) {
        for (k, v) in [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("scales", self.scales),
            ("taps", self.taps),
            ("hidden", self.hidden),
            ("patch_taps", self.patch_taps),
        ] {
            ck.meta.insert(format!("config.{k}"), v.to_string());
        }
        ck.meta.insert("config.seed".into(), self.seed.to_string());
    }

    fn from_meta(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            let v = ck.meta_value(&format!("config.{k}"))?;
            v.parse()
                .map_err(|_| Error::Format(format!("config.{k} = `{v}` is not an integer")))
        };
        Ok(ModelConfig {
            lookback: get("lookback")?,
            horizon: get("horizon")?,
            channels: get("channels")?,
            embed_dim: get("embed_dim")?,
            scales: get("scales")?,
            taps: get("taps")?,
            hidden: get("hidden")?,
            patch_taps: get("patch_taps")?,
            seed: get("seed")? as u64,
        })
    }
}

/// Per-scale quantities recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct ScaleTrace {
    pub period: usize,
    pub patch_len: usize,
    pub offset_bound: usize,
    pub alpha: Var,
    pub delta: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[B, horizon, C]`.
    pub output: Var,
    pub profiles: Vec<SpectralProfile>,
    /// `scales[b][i]` for sample `b`, scale `i`.
    pub scales: Vec<Vec<ScaleTrace>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn scale_prefix(i: usize) -> String {
    format!("scale{i}")
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (c, cm) = (config.channels, config.embed_dim);
        params.insert("embed.weight", uniform(&mut rng, &[c, cm], (1.0 / c as f64).sqrt()));
        params.insert("embed.bias", Tensor::zeros(&[cm]));
        for i in 0..config.scales {
            let p = scale_prefix(i);
            params.insert(
                format!("{p}.patch"),
                uniform(&mut rng, &[config.patch_taps, cm, cm], (1.0 / cm as f64).sqrt()),
            );
            DeformableKernel::init(&mut params, &mut rng, &format!("{p}.deform"), config.taps, cm, cm);
        }
        TwoLayer::init(
            &mut params,
            &mut rng,
            "head",
            (config.lookback * cm, config.hidden, config.horizon * c),
            false,
        );
        Ok(ModelState { config, params })
    }

    /// Zero the head's output layer, making the forecast equal to its bias.
    pub fn zero_head_output(&mut self) {
        for name in ["head.w2", "head.b2"] {
            let t = self.params.get_mut(name).expect("head parameters");
            t.data_mut().fill(0.0);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let cfg = &self.config;
        let s = x.shape();
        if s.len() != 3 || s[1] != cfg.lookback || s[2] != cfg.channels {
            return Err(Error::dim(
                "forward",
                format!("input {s:?}, expected [B, {}, {}]", cfg.lookback, cfg.channels),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite value in model input".into()));
        }
        Ok(())
    }

    /// Record the forward pass of `x: [B, L, C]` on `tape` using bound parameters.
    pub fn forward_traced(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let cfg = &self.config;
        let batch = x.shape()[0];
        let (we, be) = (bound.var("embed.weight")?, bound.var("embed.bias")?);
        let kernels = (0..cfg.scales)
            .map(|i| {
                let p = scale_prefix(i);
                Ok((
                    bound.var(&format!("{p}.patch"))?,
                    DeformableKernel::bind(bound, &format!("{p}.deform"), tape)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = TwoLayer::bind(bound, "head")?;

        let mut aggs = Vec::with_capacity(batch);
        let mut embs = Vec::with_capacity(batch);
        let mut profiles = Vec::with_capacity(batch);
        let mut traces = Vec::with_capacity(batch);
        for b in 0..batch {
            let window = x.index_first(b);
            let profile = spectral::profile(&window, cfg.scales)?;
            let xv = tape.constant(window);
            let emb = embed_channels(tape, xv, we, be)?;
            let mut reps = Vec::with_capacity(cfg.scales);
            let mut scale_traces = Vec::with_capacity(cfg.scales);
            for (i, (patch_base, kern)) in kernels.iter().enumerate() {
                let period = profile.periods[i];
                let patch_len = patch_len_for(period);
                let conv = resample_kernel(tape, *patch_base, patch_len)?;
                let patches = patchify(tape, emb, patch_len, conv)?;
                let pt = reshape_3d(tape, patches)?;
                let (v_intra, v_inter) = pool_context(tape, &pt)?;
                let alpha = gen_alpha(tape, v_intra, v_inter, kern)?;
                let bound_r = offset_bound(period);
                let delta = gen_offsets(tape, v_intra, v_inter, kern, bound_r)?;
                let out = deform_conv3d(tape, &pt, kern.base, alpha, delta)?;
                reps.push(unpatchify(tape, &out, cfg.lookback)?);
                scale_traces.push(ScaleTrace {
                    period,
                    patch_len,
                    offset_bound: bound_r,
                    alpha,
                    delta,
                });
            }
            let agg = aggregate(tape, &reps, &profile)?;
            aggs.push(tape.reshape(agg, &[1, cfg.lookback, cfg.embed_dim])?);
            embs.push(tape.reshape(emb, &[1, cfg.lookback, cfg.embed_dim])?);
            profiles.push(profile);
            traces.push(scale_traces);
        }
        let agg = if batch == 1 { aggs[0] } else { tape.concat(&aggs, 0)? };
        let emb = if batch == 1 { embs[0] } else { tape.concat(&embs, 0)? };
        let output = forecast_head(tape, agg, emb, &head, cfg.horizon, cfg.channels)?;
        Ok(ForwardTrace {
            output,
            profiles,
            scales: traces,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
        Ok(self.forward_traced(tape, bound, x)?.output)
    }

    /// Forecast `[B, horizon, C]` for `x: [B, L, C]` on a throwaway tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// MSE loss and its gradient for every parameter, in store order.
    pub fn loss_and_grads(&self, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pred = self.forward(&mut tape, &bound, x)?;
        let target = tape.constant(y.clone());
        let loss = loss_mse(&mut tape, pred, target)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), bound.grads(&tape)))
    }

    /// MSE loss only, without back-propagation.
    pub fn loss_value(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pred = self.forward(&mut tape, &bound, x)?;
        let target = tape.constant(y.clone());
        let loss = loss_mse(&mut tape, pred, target)?;
        Ok(tape.value(loss).item())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.config.to_meta(&mut ck);
        for (name, t) in self.params.iter() {
            ck.tensors.push((format!("param.{name}"), t.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(ck)?;
        let mut state = ModelState::new(config)?;
        let names: Vec<String> = state.params.names().to_vec();
        for name in names {
            let t = ck
                .tensor(&format!("param.{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing parameter `{name}`")))?;
            let slot = state.params.get_mut(&name).expect("own parameter");
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(state)
    }
}

/// Mean of squared errors over every element.
pub fn loss_mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(
            "loss_mse",
            format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}
