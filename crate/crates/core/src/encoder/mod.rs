//! The four-stage divided-attention encoder, projector and classification
//! head, their configuration and checkpoints.

mod checkpoint;

pub use checkpoint::{Checkpoint, LoadScope};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    rel_bias_table_len, stda_block_pair, AttnWeights, LayerNormWeights, MlpWeights,
    StdaBlockWeights,
};
use crate::config::{join_list, KvMap};
use crate::error::{Error, Result};
use crate::patching::{global_pool, pad_to_even, patch_embed, patch_merge, PatchGrid};
use crate::tensor::ops;
use crate::tensor::{ParamStore, Tensor, Var};

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub window: usize,
    /// Block pairs per stage.
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub frames: usize,
    /// Spatial input extent, equal on all three axes.
    pub extent: usize,
    pub pos_embed: bool,
    pub rel_bias: bool,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    pub n_classes: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 6,
            embed_dim: 36,
            window: 6,
            depths: [1, 1, 3, 1],
            heads: [3, 6, 12, 24],
            frames: 15,
            extent: 96,
            pos_embed: true,
            rel_bias: false,
            mlp_ratio: 4,
            proj_dim: 128,
            n_classes: 5,
            init_std: 0.02,
        }
    }
}

/// Keys that fix the encoder's parameter set.
const ENCODER_KEYS: &[&str] = &[
    "model.patch_size",
    "model.embed_dim",
    "model.window",
    "model.depths",
    "model.heads",
    "model.frames",
    "model.extent",
    "model.pos_embed",
    "model.rel_bias",
    "model.mlp_ratio",
];

impl ModelConfig {
    /// Small configuration for gradient checks: 24^3 voxels, 4^3 patches.
    pub fn toy() -> Self {
        Self {
            patch_size: 6,
            embed_dim: 8,
            window: 2,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            frames: 3,
            extent: 24,
            proj_dim: 16,
            ..Self::default()
        }
    }

    /// Encoder output width `d_e = 8C`.
    pub fn feature_dim(&self) -> usize {
        self.embed_dim << (STAGES - 1)
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token-grid extent at each stage; odd extents are padded before merging.
    pub fn stage_extents(&self) -> [usize; STAGES] {
        let mut e = [self.extent / self.patch_size.max(1); STAGES];
        for s in 1..STAGES {
            e[s] = e[s - 1].div_ceil(2);
        }
        e
    }

    pub fn num_patches(&self) -> usize {
        self.frames * (self.extent / self.patch_size).pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [
            self.patch_size,
            self.embed_dim,
            self.window,
            self.frames,
            self.extent,
        ]
        .contains(&0)
            || self.mlp_ratio == 0
            || self.proj_dim == 0
            || self.n_classes == 0
        {
            return bad(format!("model sizes must be positive: {self:?}"));
        }
        if !self.extent.is_multiple_of(self.patch_size) {
            return bad(format!(
                "extent {} not divisible by patch size {}",
                self.extent, self.patch_size
            ));
        }
        for s in 0..STAGES {
            let c = self.stage_channels(s);
            if self.heads[s] == 0 || !c.is_multiple_of(self.heads[s]) {
                return bad(format!(
                    "stage {} has {c} channels, not divisible by {} heads",
                    s + 1,
                    self.heads[s]
                ));
            }
            if self.depths[s] == 0 {
                return bad(format!("stage {} depth must be >= 1", s + 1));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("model.patch_size", self.patch_size);
        kv.set("model.embed_dim", self.embed_dim);
        kv.set("model.window", self.window);
        kv.set("model.depths", join_list(&self.depths));
        kv.set("model.heads", join_list(&self.heads));
        kv.set("model.frames", self.frames);
        kv.set("model.extent", self.extent);
        kv.set("model.pos_embed", self.pos_embed);
        kv.set("model.rel_bias", self.rel_bias);
        kv.set("model.mlp_ratio", self.mlp_ratio);
        kv.set("model.proj_dim", self.proj_dim);
        kv.set("model.n_classes", self.n_classes);
        kv.set("model.init_std", self.init_std);
        kv
    }

    /// Overrides fields of `base` with any `model.*` keys present in `kv`.
    pub fn from_kv(kv: &KvMap, base: &ModelConfig) -> Result<Self> {
        let mut c = base.clone();
        kv.read_into("model.patch_size", &mut c.patch_size)?;
        kv.read_into("model.embed_dim", &mut c.embed_dim)?;
        kv.read_into("model.window", &mut c.window)?;
        for (key, slot) in [
            ("model.depths", &mut c.depths),
            ("model.heads", &mut c.heads),
        ] {
            if let Some(v) = kv.list::<usize>(key)? {
                *slot = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} needs {STAGES} entries")))?;
            }
        }
        kv.read_into("model.frames", &mut c.frames)?;
        kv.read_into("model.extent", &mut c.extent)?;
        kv.read_into("model.pos_embed", &mut c.pos_embed)?;
        kv.read_into("model.rel_bias", &mut c.rel_bias)?;
        kv.read_into("model.mlp_ratio", &mut c.mlp_ratio)?;
        kv.read_into("model.proj_dim", &mut c.proj_dim)?;
        kv.read_into("model.n_classes", &mut c.n_classes)?;
        kv.read_into("model.init_std", &mut c.init_std)?;
        c.validate()?;
        Ok(c)
    }
}

/// Encoder, projector and head parameters for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("encoder.stage{}.block{}", stage + 1, block + 1)
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    std: f64,
}

impl Init {
    /// Normal draws truncated to two standard deviations.
    fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v = self.normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * self.std {
                data.push(v);
            }
        }
        Tensor::new(shape.to_vec(), data).expect("sized buffer")
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?,
            std: config.init_std,
        };
        let mut p = ParamStore::new();
        let c0 = config.embed_dim;
        let p3 = config.patch_size.pow(3);
        p.add("encoder.patch_embed.weight", init.trunc_normal(&[p3, c0]))?;
        p.add("encoder.patch_embed.bias", Tensor::zeros(&[c0]))?;
        let ext = config.stage_extents();
        if config.pos_embed {
            let e = ext[0];
            p.add(
                "encoder.pos_embed",
                init.trunc_normal(&[config.frames, e, e, e, c0]),
            )?;
        }
        for s in 0..STAGES {
            let c = config.stage_channels(s);
            let hidden = c * config.mlp_ratio;
            let win = config.window.min(ext[s]);
            for k in 0..2 * config.depths[s] {
                let pre = block_prefix(s, k);
                for ln in ["ln_spatial", "ln_mlp1", "ln_temporal", "ln_mlp2"] {
                    p.add(format!("{pre}.{ln}.gamma"), Tensor::ones(&[c]))?;
                    p.add(format!("{pre}.{ln}.beta"), Tensor::zeros(&[c]))?;
                }
                for attn in ["spatial", "temporal"] {
                    for m in ["wq", "wk", "wv", "wo"] {
                        p.add(format!("{pre}.{attn}.{m}"), init.trunc_normal(&[c, c]))?;
                    }
                    p.add(format!("{pre}.{attn}.bo"), Tensor::zeros(&[c]))?;
                }
                if config.rel_bias {
                    let r = rel_bias_table_len(&[win; 3]);
                    p.add(
                        format!("{pre}.spatial.rel_bias"),
                        init.trunc_normal(&[config.heads[s], r]),
                    )?;
                }
                for mlp in ["mlp1", "mlp2"] {
                    p.add(format!("{pre}.{mlp}.w1"), init.trunc_normal(&[c, hidden]))?;
                    p.add(format!("{pre}.{mlp}.b1"), Tensor::zeros(&[hidden]))?;
                    p.add(format!("{pre}.{mlp}.w2"), init.trunc_normal(&[hidden, c]))?;
                    p.add(format!("{pre}.{mlp}.b2"), Tensor::zeros(&[c]))?;
                }
            }
            if s + 1 < STAGES {
                p.add(
                    format!("encoder.merge{}.weight", s + 1),
                    init.trunc_normal(&[8 * c, 2 * c]),
                )?;
            }
        }
        let de = config.feature_dim();
        p.add(
            "projector.weight",
            init.trunc_normal(&[de, config.proj_dim]),
        )?;
        p.add("projector.bias", Tensor::zeros(&[config.proj_dim]))?;
        p.add("head.weight", init.trunc_normal(&[de, config.n_classes]))?;
        p.add("head.bias", Tensor::zeros(&[config.n_classes]))?;
        Ok(Model { config, params: p })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .id(name)
            .map(|id| self.params.var(id).clone())
            .ok_or_else(|| Error::Schema(format!("no parameter named {name}")))
    }

    fn ln(&self, pre: &str) -> Result<LayerNormWeights> {
        Ok(LayerNormWeights {
            gamma: self.var(&format!("{pre}.gamma"))?,
            beta: self.var(&format!("{pre}.beta"))?,
        })
    }

    fn attn(&self, pre: &str, heads: usize) -> Result<AttnWeights> {
        Ok(AttnWeights {
            wq: self.var(&format!("{pre}.wq"))?,
            wk: self.var(&format!("{pre}.wk"))?,
            wv: self.var(&format!("{pre}.wv"))?,
            wo: self.var(&format!("{pre}.wo"))?,
            bo: Some(self.var(&format!("{pre}.bo"))?),
            rel_bias: self.var(&format!("{pre}.rel_bias")).ok(),
            heads,
        })
    }

    fn mlp(&self, pre: &str) -> Result<MlpWeights> {
        Ok(MlpWeights {
            w1: self.var(&format!("{pre}.w1"))?,
            b1: self.var(&format!("{pre}.b1"))?,
            w2: self.var(&format!("{pre}.w2"))?,
            b2: self.var(&format!("{pre}.b2"))?,
        })
    }

    pub fn block_weights(&self, stage: usize, block: usize) -> Result<StdaBlockWeights> {
        let pre = block_prefix(stage, block);
        let h = self.config.heads[stage];
        Ok(StdaBlockWeights {
            ln_spatial: self.ln(&format!("{pre}.ln_spatial"))?,
            spatial: self.attn(&format!("{pre}.spatial"), h)?,
            ln_mlp1: self.ln(&format!("{pre}.ln_mlp1"))?,
            mlp1: self.mlp(&format!("{pre}.mlp1"))?,
            ln_temporal: self.ln(&format!("{pre}.ln_temporal"))?,
            temporal: self.attn(&format!("{pre}.temporal"), h)?,
            ln_mlp2: self.ln(&format!("{pre}.ln_mlp2"))?,
            mlp2: self.mlp(&format!("{pre}.mlp2"))?,
        })
    }

    /// `[B, T, H, W, D]` voxels to `[B, d_e]` features.
    pub fn encode(&self, x: &Var) -> Result<Var> {
        let cfg = &self.config;
        let e = cfg.extent;
        match *x.shape() {
            [_, t, h, w, d] if t == cfg.frames && [h, w, d] == [e, e, e] => {}
            _ => {
                return Err(Error::Shape {
                    op: "encode",
                    lhs: x.shape().to_vec(),
                    rhs: vec![0, cfg.frames, e, e, e],
                })
            }
        }
        let mut g = patch_embed(
            x,
            cfg.patch_size,
            &self.var("encoder.patch_embed.weight")?,
            &self.var("encoder.patch_embed.bias")?,
        )?;
        if cfg.pos_embed {
            g.tokens = ops::add_trailing(&g.tokens, &self.var("encoder.pos_embed")?)?;
        }
        for s in 0..STAGES {
            if s > 0 {
                let padded = PatchGrid {
                    tokens: pad_to_even(&g.tokens)?,
                    ..g
                };
                g = patch_merge(&padded, &self.var(&format!("encoder.merge{s}.weight"))?)?;
            }
            for pair in 0..cfg.depths[s] {
                let weights = [
                    self.block_weights(s, 2 * pair)?,
                    self.block_weights(s, 2 * pair + 1)?,
                ];
                g.tokens = stda_block_pair(&g.tokens, &weights, cfg.window)?;
            }
        }
        global_pool(&g.tokens)
    }

    /// Dense projection to `d_p` followed by row L2 normalization. Returns the
    /// number of rows whose norm was too small to normalize (set to zero).
    pub fn project(&self, h: &Var) -> Result<(Var, usize)> {
        self.check_width(h, "project")?;
        let z = ops::linear(
            h,
            &self.var("projector.weight")?,
            Some(&self.var("projector.bias")?),
        )?;
        let (z, degenerate) = ops::l2_normalize_rows(&z)?;
        if degenerate > 0 {
            log::warn!("projector produced {degenerate} zero-norm rows; returned as zero vectors");
        }
        Ok((z, degenerate))
    }

    /// Class logits `[B, n_classes]`.
    pub fn classify(&self, h: &Var) -> Result<Var> {
        self.check_width(h, "classify")?;
        ops::linear(h, &self.var("head.weight")?, Some(&self.var("head.bias")?))
    }

    fn check_width(&self, h: &Var, op: &'static str) -> Result<()> {
        let de = self.config.feature_dim();
        if h.shape().len() != 2 || h.shape()[1] != de {
            return Err(Error::Shape {
                op,
                lhs: h.shape().to_vec(),
                rhs: vec![0, de],
            });
        }
        Ok(())
    }

    /// Names of encoder parameters, in registration order.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.name().starts_with("encoder."))
            .map(|(_, p)| p.name().to_string())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.to_kv());
        for (_, p) in self.params.iter() {
            ck.tensors.push((p.name().to_string(), p.value().clone()));
        }
        ck
    }

    /// Loads parameters from `ck`. Every check runs before the first write,
    /// so a failed load leaves the model untouched.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint, scope: LoadScope) -> Result<()> {
        let mine = self.config.to_kv();
        for key in ENCODER_KEYS.iter().copied().chain(
            match scope {
                LoadScope::Full => ["model.proj_dim", "model.n_classes"].as_slice(),
                LoadScope::EncoderOnly => [].as_slice(),
            }
            .iter()
            .copied(),
        ) {
            let theirs = ck.meta.get(key);
            if theirs != mine.get(key) {
                return Err(Error::Schema(format!(
                    "checkpoint {key} = {} does not match model {}",
                    theirs.unwrap_or("<missing>"),
                    mine.get(key).unwrap_or("<missing>")
                )));
            }
        }
        let in_scope = |name: &str| match scope {
            LoadScope::Full => !name.starts_with(Checkpoint::STATE_PREFIX),
            LoadScope::EncoderOnly => name.starts_with("encoder."),
        };
        let mut updates = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &ck.tensors {
            if !in_scope(name) {
                continue;
            }
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Schema(format!("unknown tensor {name} in checkpoint")))?;
            if self.params.get(id).value().shape() != t.shape() {
                return Err(Error::Schema(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.params.get(id).value().shape()
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("tensor {name} appears twice")));
            }
            updates.push((id, t.clone()));
        }
        for (_, p) in self.params.iter() {
            if in_scope(p.name()) && !seen.contains(p.name()) {
                return Err(Error::Schema(format!(
                    "checkpoint lacks tensor {}",
                    p.name()
                )));
            }
        }
        for (id, t) in updates {
            self.params.set(id, t)?;
        }
        Ok(())
    }

    /// Rebuilds a model from a full checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let cfg = ModelConfig::from_kv(&ck.meta, &ModelConfig::default())?;
        let mut m = Model::new(cfg, 0)?;
        m.load_checkpoint(ck, LoadScope::Full)?;
        Ok(m)
    }
}
