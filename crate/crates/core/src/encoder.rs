//! One-stream backbone: joint patch embedding of template and search
//! images followed by stacked bidirectional selective-scan blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{head_forward, HeadOutputs, HeadParams, NormMode};
use crate::ssm::{selective_scan_bidirectional, SsmConfig, SsmParams};
use crate::tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};

/// Image and token geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub template_h: usize,
    pub template_w: usize,
    pub search_h: usize,
    pub search_w: usize,
    pub patch: usize,
    pub embed: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { template_h: 32, template_w: 32, search_h: 64, search_w: 64, patch: 8, embed: 64 }
    }
}

impl PatchConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::config(format!("{path}.patch"), "must be at least 1"));
        }
        if self.embed == 0 {
            return Err(Error::config(format!("{path}.embed"), "must be at least 1"));
        }
        for (name, v) in [
            ("template_h", self.template_h),
            ("template_w", self.template_w),
            ("search_h", self.search_h),
            ("search_w", self.search_w),
        ] {
            if v == 0 || v % self.patch != 0 {
                return Err(Error::config(format!("{path}.{name}"), format!("{v} is not a positive multiple of patch {}", self.patch)));
            }
        }
        if self.search_h != self.search_w {
            return Err(Error::config(format!("{path}.search_w"), "the search region must be square"));
        }
        Ok(())
    }

    /// Template token count `P_z`.
    pub fn template_tokens(&self) -> usize {
        (self.template_h / self.patch) * (self.template_w / self.patch)
    }

    /// Search token count `P_x`.
    pub fn search_tokens(&self) -> usize {
        (self.search_h / self.patch) * (self.search_w / self.patch)
    }

    /// Total token count `K = P_z + P_x`.
    pub fn tokens(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }

    /// Side `S` of the search feature grid.
    pub fn grid(&self) -> usize {
        self.search_h / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Which projection gates the scan output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateSource {
    #[default]
    Q,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub layers: usize,
    /// Inner width is `expand · E`.
    pub expand: usize,
    pub ssm: SsmConfig,
    pub gate_source: GateSource,
    pub pos_embed: bool,
    pub final_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: PatchConfig::default(),
            layers: 2,
            expand: 2,
            ssm: SsmConfig::default(),
            gate_source: GateSource::Q,
            pos_embed: true,
            final_norm: true,
        }
    }
}

impl ModelConfig {
    /// Full-size geometry: 128² template, 256² search, 16 px patches and
    /// a 24-layer, 384-wide backbone. Documented, not trained here.
    pub fn full_size() -> Self {
        ModelConfig {
            patch: PatchConfig { template_h: 128, template_w: 128, search_h: 256, search_w: 256, patch: 16, embed: 384 },
            layers: 24,
            expand: 2,
            ssm: SsmConfig { d_state: 16, ..SsmConfig::default() },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        self.patch.validate(&format!("{path}.patch"))?;
        if self.layers == 0 {
            return Err(Error::config(format!("{path}.layers"), "at least one layer is required"));
        }
        if self.expand == 0 {
            return Err(Error::config(format!("{path}.expand"), "must be at least 1"));
        }
        if self.patch.embed < 4 {
            return Err(Error::config(format!("{path}.patch.embed"), "the head needs at least 4 channels"));
        }
        self.ssm.validate(&format!("{path}.ssm"))
    }

    pub fn inner(&self) -> usize {
        self.expand * self.patch.embed
    }
}

#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pos_template: Option<ParamId>,
    pub pos_search: Option<ParamId>,
}

/// Parameters of one bidirectional block.
#[derive(Debug, Clone)]
pub struct VimLayer {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub w_v: ParamId,
    pub w_q: ParamId,
    pub fwd: SsmParams,
    pub bwd: SsmParams,
    pub w_out_fwd: ParamId,
    pub w_out_bwd: ParamId,
}

impl VimLayer {
    pub fn init<T: Float>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let e = cfg.patch.embed;
        let inner = cfg.inner();
        let norm_gain = store.add(format!("{prefix}.norm.weight"), Tensor::full(vec![e], T::one()));
        let norm_bias = store.add(format!("{prefix}.norm.bias"), Tensor::zeros(vec![e]));
        let bound_in = 1.0 / (e as f64).sqrt();
        let w_v = store.add_uniform(format!("{prefix}.v_proj.weight"), &[e, inner], bound_in, rng);
        let w_q = store.add_uniform(format!("{prefix}.q_proj.weight"), &[e, inner], bound_in, rng);
        let fwd = SsmParams::init(store, &format!("{prefix}.fwd"), inner, &cfg.ssm, rng);
        let bwd = SsmParams::init(store, &format!("{prefix}.bwd"), inner, &cfg.ssm, rng);
        let bound_out = 1.0 / (inner as f64).sqrt();
        let w_out_fwd = store.add_uniform(format!("{prefix}.out_fwd.weight"), &[inner, e], bound_out, rng);
        let w_out_bwd = store.add_uniform(format!("{prefix}.out_bwd.weight"), &[inner, e], bound_out, rng);
        VimLayer { norm_gain, norm_bias, w_v, w_q, fwd, bwd, w_out_fwd, w_out_bwd }
    }
}

/// Projects template and search patches (`[B, P_z, 3P²]`, `[B, P_x,
/// 3P²]`) to tokens, adds positional embeddings and concatenates to
/// `[B, K, E]`, template first.
pub fn patch_embed<T: Float>(tape: &mut Tape<T>, z: Var, x: Var, p: &EmbedParams, vars: &[Var]) -> Result<Var> {
    let embed = |tape: &mut Tape<T>, patches: Var, pos: Option<ParamId>| -> Result<Var> {
        let t = tape.matmul(patches, p.weight.var(vars))?;
        let t = tape.add_bias(t, p.bias.var(vars))?;
        match pos {
            Some(id) => tape.add_bias(t, id.var(vars)),
            None => Ok(t),
        }
    };
    let tz = embed(tape, z, p.pos_template)?;
    let tx = embed(tape, x, p.pos_search)?;
    tape.concat(tz, tx, 1)
}

/// `t + W_f(SSM_f(V) ⊙ SiLU(G)) + W_b(SSM_b(V) ⊙ SiLU(G))` with
/// `V = W_v·LN(t)` and gate `G` either `W_q·LN(t)` or `V`.
pub fn vim_block<T: Float>(tape: &mut Tape<T>, t: Var, layer: &VimLayer, vars: &[Var], gate: GateSource) -> Result<Var> {
    let normed = tape.layer_norm(t, layer.norm_gain.var(vars), layer.norm_bias.var(vars))?;
    let v = tape.matmul(normed, layer.w_v.var(vars))?;
    let g = match gate {
        GateSource::Q => tape.matmul(normed, layer.w_q.var(vars))?,
        GateSource::V => v,
    };
    let g = tape.silu(g);
    let (y_f, y_b) = selective_scan_bidirectional(tape, v, &layer.fwd, &layer.bwd, vars)?;
    let y_f = tape.mul(y_f, g)?;
    let y_b = tape.mul(y_b, g)?;
    let o_f = tape.matmul(y_f, layer.w_out_fwd.var(vars))?;
    let o_b = tape.matmul(y_b, layer.w_out_bwd.var(vars))?;
    let y = tape.add(o_f, o_b)?;
    let out = tape.add(y, t)?;
    if tape.shape(out) != tape.shape(t) {
        return Err(Error::shape("vim_block", "block changed the token shape"));
    }
    Ok(out)
}

/// Backbone and head parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: EmbedParams,
    pub layers: Vec<VimLayer>,
    pub final_norm: Option<(ParamId, ParamId)>,
    pub head: HeadParams,
}

impl Model {
    /// Registers every parameter in a fresh store.
    pub fn init<T: Float>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Model, ParamStore<T>)> {
        cfg.validate("model")?;
        let mut store = ParamStore::new();
        let pc = cfg.patch;
        let e = pc.embed;
        let pd = pc.patch_dim();
        let pos_bound = 0.02 * 3f64.sqrt();
        let embed = EmbedParams {
            weight: store.add_uniform("embed.weight", &[pd, e], 1.0 / (pd as f64).sqrt(), rng),
            bias: store.add("embed.bias", Tensor::zeros(vec![e])),
            pos_template: cfg
                .pos_embed
                .then(|| store.add_uniform("embed.pos_template", &[pc.template_tokens(), e], pos_bound, rng)),
            pos_search: cfg
                .pos_embed
                .then(|| store.add_uniform("embed.pos_search", &[pc.search_tokens(), e], pos_bound, rng)),
        };
        let layers = (0..cfg.layers).map(|l| VimLayer::init(&mut store, &format!("layers.{l}"), cfg, rng)).collect();
        let final_norm = cfg.final_norm.then(|| {
            (
                store.add("final_norm.weight", Tensor::full(vec![e], T::one())),
                store.add("final_norm.bias", Tensor::zeros(vec![e])),
            )
        });
        let head = HeadParams::init(&mut store, "head", e, rng);
        Ok((Model { cfg: *cfg, embed, layers, final_norm, head }, store))
    }

    /// Search-region feature map `[B, S, S, E]`.
    pub fn backbone<T: Float>(&self, tape: &mut Tape<T>, vars: &[Var], z: Var, x: Var) -> Result<Var> {
        let pc = self.cfg.patch;
        let mut t = patch_embed(tape, z, x, &self.embed, vars)?;
        for layer in &self.layers {
            t = vim_block(tape, t, layer, vars, self.cfg.gate_source)?;
        }
        if let Some((g, b)) = self.final_norm {
            t = tape.layer_norm(t, g.var(vars), b.var(vars))?;
        }
        let bt = tape.shape(t)[0];
        let search = tape.slice(t, 1, pc.template_tokens(), pc.search_tokens())?;
        let s = pc.grid();
        tape.reshape(search, vec![bt, s, s, pc.embed])
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, vars: &[Var], z: Var, x: Var, mode: NormMode) -> Result<HeadOutputs> {
        let feat = self.backbone(tape, vars, z, x)?;
        head_forward(tape, feat, &self.head, vars, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_arithmetic() {
        let full = ModelConfig::full_size().patch;
        assert_eq!((full.search_tokens(), full.template_tokens(), full.tokens()), (256, 64, 320));
        let toy = PatchConfig::default();
        assert_eq!((toy.search_tokens(), toy.template_tokens(), toy.tokens()), (64, 16, 80));
        assert_eq!(toy.grid(), 8);
        let bad = PatchConfig { patch: 7, ..toy };
        let err = bad.validate("model.patch").unwrap_err();
        assert!(err.to_string().contains("model.patch.template_h"));
    }
}
