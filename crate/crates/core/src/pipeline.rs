//! Full agent: audio and visual encoders, optional stereo attention on the
//! audio feature map, audio-guided fusion (or a plain concat head) and the
//! recurrent actor-critic.

use serde::{Deserialize, Serialize};

use crate::agdf::{Agdf, AgdfConfig};
use crate::autodiff::{Tensor, Var};
use crate::envsim::Observation;
use crate::error::{Error, Result};
use crate::nn::{hwc_to_chw, module_rng, CnnEncoder, CnnSpec, Graph, Linear, ParamStore};
use crate::policy::{ActorCritic, PolicyHead, SequenceBatch, NUM_ACTIONS};
use crate::sam::{Sam, SamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualKind {
    Depth,
    Rgb,
}

impl VisualKind {
    pub fn channels(self) -> usize {
        match self {
            VisualKind::Depth => 1,
            VisualKind::Rgb => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub profile: Profile,
    /// Encoder output size.
    pub feature_dim: usize,
    /// Fusion width.
    pub model_dim: usize,
    /// Heads of the fusion attention.
    pub heads: usize,
    pub use_sam: bool,
    pub use_agdf: bool,
    /// Replace the visual feature by zeros.
    pub blind: bool,
    pub visual: VisualKind,
    pub visual_height: usize,
    pub visual_width: usize,
    pub audio_bands: usize,
    pub audio_frames: usize,
    pub visual_channels: [usize; 3],
    /// The last entry is the channel count seen by stereo attention.
    pub audio_channels: [usize; 3],
    pub sam_heads: usize,
    pub hidden_dim: usize,
    /// Multiplier on the actor's initial weights.
    pub actor_scale: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            profile: Profile::Desk,
            feature_dim: 64,
            model_dim: 96,
            heads: 4,
            use_sam: true,
            use_agdf: true,
            blind: false,
            visual: VisualKind::Depth,
            visual_height: 16,
            visual_width: 16,
            audio_bands: 16,
            audio_frames: 16,
            visual_channels: [8, 16, 8],
            audio_channels: [8, 16, 8],
            sam_heads: 1,
            hidden_dim: 128,
            actor_scale: 0.01,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            profile: Profile::Paper,
            feature_dim: 512,
            model_dim: 768,
            visual_height: 128,
            visual_width: 128,
            audio_bands: 65,
            audio_frames: 65,
            visual_channels: [32, 64, 64],
            audio_channels: [32, 64, 64],
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn visual_spec(&self) -> Result<CnnSpec> {
        CnnSpec::new(
            self.visual.channels(),
            self.visual_height,
            self.visual_width,
            self.visual_channels,
            self.feature_dim,
        )
    }

    pub fn audio_spec(&self) -> Result<CnnSpec> {
        CnnSpec::new(2, self.audio_bands, self.audio_frames, self.audio_channels, self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.model_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("feature, model and hidden sizes must be positive".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !self.actor_scale.is_finite() {
            return Err(Error::Config("actor_scale must be finite".into()));
        }
        if self.use_sam {
            let c = self.audio_channels[2];
            if c % 2 != 0 || self.sam_heads == 0 || (c / 2) % self.sam_heads != 0 {
                return Err(Error::Config(format!(
                    "stereo attention over {c} channels with {} heads",
                    self.sam_heads
                )));
            }
        }
        self.visual_spec()?;
        self.audio_spec()?;
        Ok(())
    }

    /// Fit an environment observation to the visual input kind; RGB models
    /// see the depth image as grey.
    pub fn prepare(&self, mut obs: Observation) -> Observation {
        if self.visual == VisualKind::Rgb && obs.depth.shape().last() == Some(&1) {
            let s = obs.depth.shape().to_vec();
            let data = obs.depth.data().iter().flat_map(|&v| [v, v, v]).collect();
            obs.depth = Tensor::new([s[0], s[1], 3], data).expect("three channels per pixel");
        }
        obs
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Agdf(Agdf),
    /// `[f_a; f_v] -> d_m`.
    Concat(Linear),
}

#[derive(Clone, Debug)]
pub struct AgentModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: CnnEncoder,
    pub audio: CnnEncoder,
    pub sam: Option<Sam>,
    pub fusion: Fusion,
    pub head: PolicyHead,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `(B, 4)`
    pub logits: Var,
    /// `(B)`
    pub value: Var,
    /// `(B, hidden)`
    pub hidden: Var,
    /// `(B, d_m)`
    pub fused: Var,
    /// Fusion gate when fusion is audio-guided.
    pub gate: Option<Var>,
}

/// Plain values of one batched inference step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Row-major `(B, 4)`.
    pub logits: Vec<f64>,
    pub values: Vec<f64>,
    /// `(B, hidden)`
    pub hidden: Tensor,
}

impl StepOutput {
    pub fn logits_row(&self, i: usize) -> &[f64] {
        &self.logits[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS]
    }
}

/// Stack `H x W x C` images into `(B, C, H, W)`.
fn stack_images<'a>(
    images: impl ExactSizeIterator<Item = &'a Tensor>,
    what: &str,
    (h, w, c): (usize, usize, usize),
) -> Result<Tensor> {
    let b = images.len();
    let mut data = Vec::with_capacity(b * h * w * c);
    for img in images {
        if img.shape() != [h, w, c] {
            return Err(Error::Config(format!(
                "{what} observation {:?} does not match the model's {h}x{w}x{c}",
                img.shape()
            )));
        }
        data.extend(hwc_to_chw(img.data(), h, w, c)?);
    }
    Tensor::new([b, c, h, w], data)
}

impl AgentModel {
    /// Every module draws its weights from its own stream of `seed`, so
    /// toggling one module leaves the others' weights untouched.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let visual = CnnEncoder::new(&mut store, "visual", config.visual_spec()?, &mut module_rng(seed, "visual"))?;
        let audio = CnnEncoder::new(&mut store, "audio", config.audio_spec()?, &mut module_rng(seed, "audio"))?;
        let sam = if config.use_sam {
            let sc = SamConfig {
                heads: config.sam_heads,
                ..SamConfig::new(config.audio_channels[2])
            };
            Some(Sam::new(&mut store, "sam", sc, &mut module_rng(seed, "sam"))?)
        } else {
            None
        };
        let (d, dm) = (config.feature_dim, config.model_dim);
        let fusion = if config.use_agdf {
            let ac = AgdfConfig::new(d, dm, config.heads);
            Fusion::Agdf(Agdf::new(&mut store, "agdf", ac, &mut module_rng(seed, "agdf"))?)
        } else {
            Fusion::Concat(Linear::new(&mut store, "concat", 2 * d, dm, true, &mut module_rng(seed, "concat")))
        };
        let head = PolicyHead::new(
            &mut store,
            "policy",
            dm,
            config.hidden_dim,
            config.actor_scale,
            &mut module_rng(seed, "policy"),
        );
        Ok(AgentModel {
            config,
            store,
            visual,
            audio,
            sam,
            fusion,
            head,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn audio_input(&self, obs: &[&Observation]) -> Result<Tensor> {
        let c = &self.config;
        stack_images(obs.iter().map(|o| &o.spectrogram), "audio", (c.audio_bands, c.audio_frames, 2))
    }

    pub fn visual_input(&self, obs: &[&Observation]) -> Result<Tensor> {
        let c = &self.config;
        stack_images(
            obs.iter().map(|o| &o.depth),
            "visual",
            (c.visual_height, c.visual_width, c.visual.channels()),
        )
    }

    /// Audio feature `(B, d)`: conv stack, stereo attention, projection.
    pub fn audio_features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut fmap = self.audio.conv_stack(g, x)?;
        if let Some(sam) = &self.sam {
            fmap = sam.forward(g, fmap)?;
        }
        self.audio.head(g, fmap)
    }

    /// Fused feature `(B, d_m)` and the gate, if any.
    pub fn fuse(&self, g: &mut Graph, f_a: Var, f_v: Var) -> Result<(Var, Option<Var>)> {
        match &self.fusion {
            Fusion::Agdf(agdf) => {
                let out = agdf.forward(g, f_a, f_v)?;
                Ok((out.fused, Some(out.gate)))
            }
            Fusion::Concat(linear) => {
                let av = g.concat(&[f_a, f_v], 1)?;
                Ok((linear.forward(g, av)?, None))
            }
        }
    }

    /// Encode and fuse a batch of observations.
    pub fn features(&self, g: &mut Graph, obs: &[&Observation]) -> Result<(Var, Option<Var>)> {
        if obs.is_empty() {
            return Err(Error::Contract("empty observation batch".into()));
        }
        let xa = g.input(self.audio_input(obs)?);
        let f_a = self.audio_features(g, xa)?;
        let f_v = if self.config.blind {
            // still validate what the caller passed
            self.visual_input(obs)?;
            g.input(Tensor::zeros([obs.len(), self.config.feature_dim]))
        } else {
            let xv = g.input(self.visual_input(obs)?);
            self.visual.forward(g, xv)?
        };
        self.fuse(g, f_a, f_v)
    }

    pub fn forward(&self, g: &mut Graph, obs: &[&Observation], h_prev: Var) -> Result<ModelOutput> {
        let hs = g.shape(h_prev);
        if hs != [obs.len(), self.hidden_dim()] {
            return Err(Error::Config(format!(
                "hidden state {hs:?} for {} observations of a {}-unit model",
                obs.len(),
                self.hidden_dim()
            )));
        }
        let (fused, gate) = self.features(g, obs)?;
        let out = self.head.forward(g, fused, h_prev)?;
        Ok(ModelOutput {
            logits: out.logits,
            value: out.value,
            hidden: out.hidden,
            fused,
            gate,
        })
    }

    /// One untracked step for a batch of agents.
    pub fn step(&self, obs: &[&Observation], hidden: &Tensor) -> Result<StepOutput> {
        let mut g = Graph::inference(&self.store);
        let h = g.input(hidden.clone());
        let out = self.forward(&mut g, obs, h)?;
        Ok(StepOutput {
            logits: g.value(out.logits).data().to_vec(),
            values: g.value(out.value).data().to_vec(),
            hidden: g.value(out.hidden).clone(),
        })
    }

    pub fn initial_hidden(&self, batch: usize) -> Tensor {
        Tensor::zeros([batch, self.hidden_dim()])
    }
}

pub fn count_parameters(model: &AgentModel) -> usize {
    model.store.num_scalars()
}

impl ActorCritic for AgentModel {
    type Obs = Observation;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Encodes all rows at once, then unrolls the recurrence over time,
    /// zeroing the state wherever an episode ended on the previous step.
    fn evaluate(&self, g: &mut Graph, batch: &SequenceBatch<'_, Observation>) -> Result<(Var, Var)> {
        let m = batch.seqs;
        let hd = self.hidden_dim();
        if batch.obs.len() != batch.steps * m || batch.keep.len() != batch.obs.len() {
            return Err(Error::Contract("sequence batch is not steps x seqs".into()));
        }
        let (fused, _) = self.features(g, &batch.obs)?;
        let mut h = g.input(batch.hidden0.clone());
        let (mut logits, mut values) = (Vec::with_capacity(batch.steps), Vec::with_capacity(batch.steps));
        for t in 0..batch.steps {
            let x = g.narrow(fused, 0, t * m, m)?;
            let keep = &batch.keep[t * m..(t + 1) * m];
            if keep.iter().any(|&k| k != 1.0) {
                let mask = keep.iter().flat_map(|&k| std::iter::repeat(k).take(hd)).collect();
                let mask = g.input(Tensor::new([m, hd], mask)?);
                h = g.mul(h, mask)?;
            }
            let out = self.head.forward(g, x, h)?;
            logits.push(out.logits);
            values.push(out.value);
            h = out.hidden;
        }
        Ok((g.concat(&logits, 0)?, g.concat(&values, 0)?))
    }
}
