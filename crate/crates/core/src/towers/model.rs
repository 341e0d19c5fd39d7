use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::config::{ModelConfig, TowerConfig, TowerInput, TowerKind};
use super::forward::{block_param, tower_forward, ForwardOpts, TokenBatch, TowerBatch, TowerMaskVars, TowerRun};
use super::params::{Bound, Params};

/// Initial contrastive logit scale, `ln(1 / 0.07)`.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778;
/// Upper clamp on the contrastive logit scale, `ln 100`.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

/// Gate values of one tower's masks, flattened across layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerMasks<T> {
    pub head: Vec<T>,
    pub int: Vec<T>,
    pub embed: Vec<T>,
}

impl<T: Real> TowerMasks<T> {
    pub fn ones(cfg: &TowerConfig) -> Self {
        Self::filled(cfg, T::one())
    }

    pub fn filled(cfg: &TowerConfig, v: T) -> Self {
        TowerMasks { head: vec![v; cfg.total_heads()], int: vec![v; cfg.total_ffn()], embed: vec![v; cfg.hidden] }
    }

    pub fn check(&self, cfg: &TowerConfig, kind: TowerKind) -> Result<()> {
        let p = kind.prefix();
        for (what, v, want) in
            [("head", &self.head, cfg.total_heads()), ("intermediate", &self.int, cfg.total_ffn()), ("embedding", &self.embed, cfg.hidden)]
        {
            if v.len() != want {
                return Err(Error::Mask(format!("{p} {what} mask has {} entries, tower needs {want}", v.len())));
            }
            if let Some(bad) = v.iter().find(|x| !(**x >= T::zero() && **x <= T::one())) {
                return Err(Error::Mask(format!("{p} {what} mask entry {bad} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape<T>) -> TowerMaskVars {
        let mut c = |v: &Vec<T>| tape.constant(Tensor::new(&[v.len()], v.clone()).expect("rank-1 mask"));
        TowerMaskVars { head: c(&self.head), int: c(&self.int), embed: c(&self.embed) }
    }
}

/// Gate values for both towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskValues<T> {
    pub image: TowerMasks<T>,
    pub text: TowerMasks<T>,
}

impl<T: Real> MaskValues<T> {
    pub fn ones(cfg: &ModelConfig) -> Self {
        MaskValues { image: TowerMasks::ones(&cfg.image), text: TowerMasks::ones(&cfg.text) }
    }

    pub fn tower(&self, kind: TowerKind) -> &TowerMasks<T> {
        match kind {
            TowerKind::Image => &self.image,
            TowerKind::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, kind: TowerKind) -> &mut TowerMasks<T> {
        match kind {
            TowerKind::Image => &mut self.image,
            TowerKind::Text => &mut self.text,
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        self.image.check(&cfg.image, TowerKind::Image)?;
        self.text.check(&cfg.text, TowerKind::Text)
    }
}

/// Image and text transformer towers sharing a projection width, plus the
/// trainable contrastive logit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerModel<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Real> TwoTowerModel<T> {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for kind in TowerKind::BOTH {
            init_tower(&mut params, config.tower(kind), kind, config.projection, &mut rng);
        }
        params.insert("logit_scale", Tensor::scalar(T::c(INIT_LOGIT_SCALE)));
        Ok(TwoTowerModel { config, params })
    }

    /// Wraps existing parameters after checking every expected tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = Self::init_shapes(&config);
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("from_params", format!("{name} is {:?}, config implies {shape:?}", t.shape())));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::invalid(format!("{} tensors given, config implies {}", params.len(), expected.len())));
        }
        Ok(TwoTowerModel { config, params })
    }

    fn init_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let m: TwoTowerModel<f32> = TwoTowerModel::init(config.clone(), 0).expect("validated config");
        m.params.iter().map(|(k, v)| (k.to_string(), v.shape().to_vec())).collect()
    }

    pub fn logit_scale(&self) -> T {
        self.params.get("logit_scale").map(|t| t.item()).unwrap_or_else(|_| T::c(INIT_LOGIT_SCALE))
    }

    pub fn cast<U: Real>(&self) -> TwoTowerModel<U> {
        TwoTowerModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Parameters of the MHA and FFN weights (the census compression rates refer to).
    pub fn maskable_params(&self) -> usize {
        self.config.maskable_params()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        self.params.bind(tape, requires_grad)
    }

    /// Runs one tower on an existing tape.
    pub fn run_tower(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        kind: TowerKind,
        input: TowerBatch<'_, T>,
        masks: Option<&TowerMaskVars>,
        opts: &ForwardOpts,
    ) -> Result<TowerRun> {
        tower_forward(tape, bound, self.config.tower(kind), kind, input, masks, opts)
    }

    /// Both towers on one tape; returns `(image, text)` embeddings.
    pub fn forward_pair(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &Tensor<T>,
        tokens: &TokenBatch,
        masks: Option<(&TowerMaskVars, &TowerMaskVars)>,
    ) -> Result<(Var, Var)> {
        let opts = ForwardOpts::default();
        let i = self.run_tower(tape, bound, TowerKind::Image, TowerBatch::Image(images), masks.map(|m| m.0), &opts)?;
        let t = self.run_tower(tape, bound, TowerKind::Text, TowerBatch::Text(tokens), masks.map(|m| m.1), &opts)?;
        Ok((i.embedding, t.embedding))
    }

    fn encode(&self, kind: TowerKind, input: TowerBatch<'_, T>, masks: Option<&MaskValues<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mv = match masks {
            Some(m) => {
                m.tower(kind).check(self.config.tower(kind), kind)?;
                Some(m.tower(kind).record(&mut tape))
            }
            None => None,
        };
        let run = self.run_tower(&mut tape, &bound, kind, input, mv.as_ref(), &ForwardOpts::default())?;
        Ok(tape.value(run.embedding).clone())
    }

    /// `[N, channels, grid, grid]` pixels to `[N, projection]` unit embeddings.
    pub fn encode_image(&self, images: &Tensor<T>, masks: Option<&MaskValues<T>>) -> Result<Tensor<T>> {
        self.encode(TowerKind::Image, TowerBatch::Image(images), masks)
    }

    pub fn encode_text(&self, tokens: &TokenBatch, masks: Option<&MaskValues<T>>) -> Result<Tensor<T>> {
        self.encode(TowerKind::Text, TowerBatch::Text(tokens), masks)
    }
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::c(dist.sample(rng)))
}

fn init_tower<T: Real>(params: &mut Params<T>, cfg: &TowerConfig, kind: TowerKind, proj: usize, rng: &mut ChaCha8Rng) {
    let p = kind.prefix();
    let d = cfg.hidden;
    let inv = |n: usize| 1.0 / (n.max(1) as f64).sqrt();
    let depth = inv(2 * cfg.layers().max(1));
    match cfg.input {
        TowerInput::Image { patch, channels, .. } => {
            let feat = channels * patch * patch;
            params.insert(format!("{p}.patch"), normal(rng, &[feat, d], inv(feat)));
            params.insert(format!("{p}.cls"), normal(rng, &[1, d], inv(d)));
            params.insert(format!("{p}.pos"), normal(rng, &[cfg.tokens(), d], 0.02));
        }
        TowerInput::Text { vocab, max_len } => {
            params.insert(format!("{p}.tok"), normal(rng, &[vocab, d], 0.02));
            params.insert(format!("{p}.pos"), normal(rng, &[max_len, d], 0.01));
        }
    }
    for l in 0..cfg.layers() {
        let w = cfg.heads[l] * cfg.head_dim;
        let f = cfg.ffn[l];
        let name = |s: &str| block_param(kind, l, s);
        params.insert(name("ln1.g"), Tensor::ones(&[d]));
        params.insert(name("ln1.b"), Tensor::zeros(&[d]));
        for q in ["attn.wq", "attn.wk", "attn.wv"] {
            params.insert(name(q), normal(rng, &[d, w], inv(d)));
        }
        params.insert(name("attn.wo"), normal(rng, &[w, d], inv(w) * depth));
        params.insert(name("ln2.g"), Tensor::ones(&[d]));
        params.insert(name("ln2.b"), Tensor::zeros(&[d]));
        params.insert(name("ffn.up"), normal(rng, &[d, f], inv(d)));
        params.insert(name("ffn.down"), normal(rng, &[f, d], inv(f) * depth));
    }
    params.insert(format!("{p}.ln_post.g"), Tensor::ones(&[d]));
    params.insert(format!("{p}.ln_post.b"), Tensor::zeros(&[d]));
    params.insert(format!("{p}.proj"), normal(rng, &[d, proj], inv(d)));
}
