//! The two-stage forecasting network.
//!
//! Stage one (the cloud block) maps a stack of historical satellite channels
//! to hourly cloud-cover forecasts with spectral-mixing transformer layers:
//! tokens are mixed in the 2-D frequency domain by block-diagonal complex
//! MLPs with soft-shrinkage. Stage two (the irradiance block) maps the cloud
//! forecast plus the clear-sky irradiance forecast to hourly irradiance with
//! shifted-window multi-head attention layers.
//!
//! All layers are written against [`crate::tensor::Tape`], so the same code
//! path serves f32 training/inference and f64 gradient verification.

pub mod blocks;
pub mod checkpoint;
pub mod layers;

pub use blocks::{cloud_block, forward, irradiance_block};
pub use checkpoint::Checkpoint;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_hours: usize,
    pub input_channels: usize,
    pub horizon_hours: usize,
    /// Cloud block.
    pub n_afno_layers: usize,
    pub cloud_patch: usize,
    pub cloud_embed_dim: usize,
    /// Block count of the block-diagonal frequency mixer.
    pub afno_blocks: usize,
    /// Soft-shrinkage threshold applied to the mixer output.
    pub afno_sparsity: f64,
    /// Irradiance block.
    pub n_swin_layers: usize,
    pub irr_patch: usize,
    pub window: usize,
    pub irr_embed_dim: usize,
    pub n_heads: usize,
}

impl Default for ModelConfig {
    /// Full-scale configuration (about 20M parameters).
    fn default() -> Self {
        ModelConfig {
            input_hours: 6,
            input_channels: 4,
            horizon_hours: 24,
            n_afno_layers: 4,
            cloud_patch: 4,
            cloud_embed_dim: 600,
            afno_blocks: 8,
            afno_sparsity: 0.01,
            n_swin_layers: 8,
            irr_patch: 8,
            window: 16,
            irr_embed_dim: 256,
            n_heads: 2,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset for 64x64 experiments.
    pub fn toy() -> Self {
        ModelConfig {
            input_hours: 6,
            input_channels: 4,
            horizon_hours: 24,
            n_afno_layers: 2,
            cloud_patch: 4,
            cloud_embed_dim: 64,
            afno_blocks: 4,
            afno_sparsity: 0.01,
            n_swin_layers: 2,
            irr_patch: 4,
            window: 4,
            irr_embed_dim: 48,
            n_heads: 2,
        }
    }

    /// Even smaller preset for finite-difference gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_hours: 2,
            input_channels: 2,
            horizon_hours: 3,
            n_afno_layers: 1,
            cloud_patch: 2,
            cloud_embed_dim: 8,
            afno_blocks: 2,
            afno_sparsity: 0.01,
            n_swin_layers: 2,
            irr_patch: 2,
            window: 2,
            irr_embed_dim: 8,
            n_heads: 2,
        }
    }

    /// Satellite channels after flattening time into channels.
    pub fn flat_input_channels(&self) -> usize {
        self.input_hours * self.input_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.cloud_embed_dim % self.afno_blocks != 0 {
            return Err(Error::Config(format!(
                "cloud embed dim {} not divisible by mixer block count {}",
                self.cloud_embed_dim, self.afno_blocks
            )));
        }
        if self.irr_embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "irradiance embed dim {} not divisible by head count {}",
                self.irr_embed_dim, self.n_heads
            )));
        }
        for (name, v) in [
            ("input_hours", self.input_hours),
            ("input_channels", self.input_channels),
            ("horizon_hours", self.horizon_hours),
            ("cloud_patch", self.cloud_patch),
            ("cloud_embed_dim", self.cloud_embed_dim),
            ("afno_blocks", self.afno_blocks),
            ("irr_patch", self.irr_patch),
            ("window", self.window),
            ("irr_embed_dim", self.irr_embed_dim),
            ("n_heads", self.n_heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.afno_sparsity < 0.0 {
            return Err(Error::Config("sparsity threshold must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("input_hours", self.input_hours.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("horizon_hours", self.horizon_hours.to_string()),
            ("n_afno_layers", self.n_afno_layers.to_string()),
            ("cloud_patch", self.cloud_patch.to_string()),
            ("cloud_embed_dim", self.cloud_embed_dim.to_string()),
            ("afno_blocks", self.afno_blocks.to_string()),
            ("afno_sparsity", format!("{}", self.afno_sparsity)),
            ("n_swin_layers", self.n_swin_layers.to_string()),
            ("irr_patch", self.irr_patch.to_string()),
            ("window", self.window.to_string()),
            ("irr_embed_dim", self.irr_embed_dim.to_string()),
            ("n_heads", self.n_heads.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("cfg.{k}"), v))
        .collect()
    }

    pub fn from_kv(kv: &HashMap<String, String>) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        let get_usize = |key: &str, default: usize| -> Result<usize> {
            match kv.get(&format!("cfg.{key}")) {
                Some(v) => v
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("cfg.{key}={v}: {e}"))),
                None => Ok(default),
            }
        };
        cfg.input_hours = get_usize("input_hours", cfg.input_hours)?;
        cfg.input_channels = get_usize("input_channels", cfg.input_channels)?;
        cfg.horizon_hours = get_usize("horizon_hours", cfg.horizon_hours)?;
        cfg.n_afno_layers = get_usize("n_afno_layers", cfg.n_afno_layers)?;
        cfg.cloud_patch = get_usize("cloud_patch", cfg.cloud_patch)?;
        cfg.cloud_embed_dim = get_usize("cloud_embed_dim", cfg.cloud_embed_dim)?;
        cfg.afno_blocks = get_usize("afno_blocks", cfg.afno_blocks)?;
        cfg.n_swin_layers = get_usize("n_swin_layers", cfg.n_swin_layers)?;
        cfg.irr_patch = get_usize("irr_patch", cfg.irr_patch)?;
        cfg.window = get_usize("window", cfg.window)?;
        cfg.irr_embed_dim = get_usize("irr_embed_dim", cfg.irr_embed_dim)?;
        cfg.n_heads = get_usize("n_heads", cfg.n_heads)?;
        if let Some(v) = kv.get("cfg.afno_sparsity") {
            cfg.afno_sparsity = v
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("cfg.afno_sparsity={v}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<(String, ArrayD<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in &self.entries {
            out.insert(n, v.mapv(|x| U::fd(x.to_f64_()))).expect("names already unique");
        }
        out
    }

    /// Checks that the store holds exactly the tensors `cfg` implies.
    pub fn validate_inventory(&self, cfg: &ModelConfig) -> Result<()> {
        let inventory = parameter_inventory(cfg);
        if inventory.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: store has {}, architecture needs {}",
                self.entries.len(),
                inventory.len()
            )));
        }
        for (name, shape) in &inventory {
            let v = self.get(name)?;
            if v.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Every learned tensor implied by a configuration, with shapes, in a fixed
/// order.
pub fn parameter_inventory(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut inv: Vec<(String, Vec<usize>)> = Vec::new();
    let mut put = |name: String, shape: Vec<usize>| inv.push((name, shape));

    let c_in = cfg.flat_input_channels();
    let (pc, dc) = (cfg.cloud_patch, cfg.cloud_embed_dim);
    let k = cfg.horizon_hours;
    put("cloud.embed.weight".into(), vec![pc * pc * c_in, dc]);
    put("cloud.embed.bias".into(), vec![dc]);
    let bs = dc / cfg.afno_blocks;
    for i in 0..cfg.n_afno_layers {
        let p = format!("cloud.layer{i}");
        put(format!("{p}.ln1.gamma"), vec![dc]);
        put(format!("{p}.ln1.beta"), vec![dc]);
        for w in ["w1", "w2"] {
            put(format!("{p}.mix.{w}.re"), vec![cfg.afno_blocks, bs, bs]);
            put(format!("{p}.mix.{w}.im"), vec![cfg.afno_blocks, bs, bs]);
        }
        for b in ["b1", "b2"] {
            put(format!("{p}.mix.{b}.re"), vec![cfg.afno_blocks, bs]);
            put(format!("{p}.mix.{b}.im"), vec![cfg.afno_blocks, bs]);
        }
        put(format!("{p}.mix.act_bias"), vec![cfg.afno_blocks, bs]);
        put(format!("{p}.ln2.gamma"), vec![dc]);
        put(format!("{p}.ln2.beta"), vec![dc]);
        put(format!("{p}.mlp.fc1.weight"), vec![dc, 4 * dc]);
        put(format!("{p}.mlp.fc1.bias"), vec![4 * dc]);
        put(format!("{p}.mlp.fc2.weight"), vec![4 * dc, dc]);
        put(format!("{p}.mlp.fc2.bias"), vec![dc]);
    }
    put("cloud.recover.weight".into(), vec![dc, pc * pc * k]);
    put("cloud.recover.bias".into(), vec![pc * pc * k]);

    let (pi, di, m) = (cfg.irr_patch, cfg.irr_embed_dim, cfg.window);
    put("irr.embed.weight".into(), vec![pi * pi * 2 * k, di]);
    put("irr.embed.bias".into(), vec![di]);
    for i in 0..cfg.n_swin_layers {
        let p = format!("irr.layer{i}");
        put(format!("{p}.ln1.gamma"), vec![di]);
        put(format!("{p}.ln1.beta"), vec![di]);
        put(format!("{p}.attn.qkv.weight"), vec![di, 3 * di]);
        put(format!("{p}.attn.qkv.bias"), vec![3 * di]);
        put(format!("{p}.attn.proj.weight"), vec![di, di]);
        put(format!("{p}.attn.proj.bias"), vec![di]);
        put(format!("{p}.attn.rel_bias"), vec![(2 * m - 1) * (2 * m - 1), cfg.n_heads]);
        put(format!("{p}.ln2.gamma"), vec![di]);
        put(format!("{p}.ln2.beta"), vec![di]);
        put(format!("{p}.mlp.fc1.weight"), vec![di, 4 * di]);
        put(format!("{p}.mlp.fc1.bias"), vec![4 * di]);
        put(format!("{p}.mlp.fc2.weight"), vec![4 * di, di]);
        put(format!("{p}.mlp.fc2.bias"), vec![di]);
    }
    put("irr.recover.weight".into(), vec![di, pi * pi * k]);
    put("irr.recover.bias".into(), vec![pi * pi * k]);
    inv
}

/// Exact number of scalar parameters a configuration implies.
pub fn param_count(cfg: &ModelConfig) -> usize {
    parameter_inventory(cfg)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

fn truncated_normal<T: Real>(rng: &mut ChaCha8Rng, sigma: f64) -> T {
    let dist = Normal::new(0.0f64, sigma).expect("positive sigma");
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * sigma {
            return T::fd(x);
        }
    }
}

/// Fresh parameters: truncated-normal (σ = 0.02) affine weights, ones for
/// norm gains, zeros for biases. Both patch-recovery weights start at zero
/// so the untrained model emits a flat 50% cloud field and a constant
/// irradiance baseline.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in parameter_inventory(cfg) {
        let value = if name.ends_with(".gamma") {
            ArrayD::ones(IxDyn(&shape))
        } else if name.ends_with(".beta")
            || name.ends_with(".bias")
            || name.contains(".mix.b1")
            || name.contains(".mix.b2")
            || name.ends_with(".act_bias")
            || name.starts_with("cloud.recover")
            || name.starts_with("irr.recover")
        {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            ArrayD::from_shape_simple_fn(IxDyn(&shape), || truncated_normal::<T>(&mut rng, 0.02))
        };
        store.insert(&name, value).expect("inventory names are unique");
    }
    store
}

/// Parameters registered as leaves on a tape, by name.
pub struct ModelVars {
    vars: HashMap<String, Var>,
}

impl ModelVars {
    /// Registers every parameter, in store order, as a tape leaf.
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ParamStore<T>) -> ModelVars {
        let mut vars = HashMap::new();
        for (name, value) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(value.clone()));
        }
        ModelVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no registered parameter '{name}'")))
    }
}
