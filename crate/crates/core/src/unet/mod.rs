//! The toy denoising UNet and its dual-branch (query/support) forward pass.
//!
//! Every block is pre-norm: `x + SelfAttn(LN x)`, then `x + CrossAttn(LN x, ctx)`,
//! then `x + FFN(LN x)`. The same parameters serve every branch.

pub mod conv;
pub mod inject;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_graph, gather_rows, sample_kv_indices, AttentionParams, AttnVars, FeatureMap};
use crate::autodiff::{Graph, Var};
use crate::codec::{BinaryMask, LatentTensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub use conv::{adapt_input_layer, conv2d, slotted_conv2d};
pub use inject::{patchify, prepare_support, BranchInput, PreparedSupport, Role};

/// How support information reaches the query branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    /// Key/value fusion inside self-attention.
    #[default]
    Fsa,
    /// Support tokens through cross-attention.
    Tca,
}

impl Interaction {
    pub const ALL: [Interaction; 2] = [Self::Fsa, Self::Tca];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Fsa => "fsa",
            Self::Tca => "tca",
        }
    }
}

impl std::str::FromStr for Interaction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown interaction `{s}`")))
    }
}

/// How the support mask is combined with the support image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    #[default]
    Concatenation,
    Multiplication,
    AttentionMask,
    Addition,
}

impl Injection {
    pub const ALL: [Injection; 4] =
        [Self::Concatenation, Self::Multiplication, Self::AttentionMask, Self::Addition];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Concatenation => "concatenation",
            Self::Multiplication => "multiplication",
            Self::AttentionMask => "attention_mask",
            Self::Addition => "addition",
        }
    }
}

impl std::str::FromStr for Injection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown injection `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultiplicationDomain {
    #[default]
    Rgb,
    Latent,
}

impl std::str::FromStr for MultiplicationDomain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "latent" => Ok(Self::Latent),
            other => Err(Error::Config(format!("unknown multiplication domain `{other}`"))),
        }
    }
}

/// Key/value fusion (query reads support K/V) or joint QKV attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Kv,
    Qkv,
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv" => Ok(Self::Kv),
            "qkv" => Ok(Self::Qkv),
            other => Err(Error::Config(format!("unknown fusion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels of one encoded image; branch inputs carry twice this.
    pub latent_channels: usize,
    /// Feature width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub num_heads: usize,
    /// Width of cross-attention context tokens.
    pub ctx_dim: usize,
    pub ffn_mult: usize,
    pub interaction: Interaction,
    pub injection: Injection,
    pub multiplication_domain: MultiplicationDomain,
    pub fusion: Fusion,
    /// Per self-attention site switch for support fusion; `None` enables all.
    pub fusion_layers: Option<Vec<bool>>,
    /// Patch side of the toy token encoder.
    pub patch: usize,
    /// Side of the (square) input canvas in pixels.
    pub canvas: usize,
}

impl UNetConfig {
    pub fn toy(canvas: usize) -> Self {
        Self {
            latent_channels: 48,
            widths: vec![32, 64],
            blocks_per_level: 1,
            num_heads: 4,
            ctx_dim: 32,
            ffn_mult: 2,
            interaction: Interaction::Fsa,
            injection: Injection::Concatenation,
            multiplication_domain: MultiplicationDomain::Rgb,
            fusion: Fusion::Kv,
            fusion_layers: None,
            patch: 8,
            canvas,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Number of blocks, i.e. self-attention sites, in the network.
    pub fn num_sites(&self) -> usize {
        self.blocks_per_level * (2 * self.levels() - 1)
    }

    pub fn fusion_at(&self, site: usize) -> bool {
        self.fusion_layers.as_ref().is_none_or(|l| l[site])
    }

    /// Columns of one support's patch matrix fed to the token encoder.
    pub fn token_input_dim(&self) -> usize {
        let per = self.patch * self.patch * 3;
        if self.injection == Injection::Concatenation {
            2 * per
        } else {
            per
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.canvas / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.blocks_per_level == 0 || self.latent_channels == 0 {
            return bad("network needs at least one level, block and channel".into());
        }
        if self.num_heads == 0 || self.widths.iter().any(|w| w % self.num_heads != 0) {
            return bad(format!("widths {:?} not divisible by {} heads", self.widths, self.num_heads));
        }
        if self.ctx_dim == 0 || self.ffn_mult == 0 {
            return bad("ctx_dim and ffn_mult must be positive".into());
        }
        if let Some(l) = &self.fusion_layers {
            if l.len() != self.num_sites() {
                return bad(format!("fusion_layers has {} entries, network has {} sites", l.len(), self.num_sites()));
            }
        }
        if self.interaction == Interaction::Tca && (self.patch == 0 || self.canvas % self.patch != 0) {
            return bad(format!("canvas {} not divisible by patch {}", self.canvas, self.patch));
        }
        Ok(())
    }
}

enum Init {
    Normal(f64),
    Zeros,
    /// First-layer kernel widened from `9c` to `9·2c` input rows.
    AdaptedInput,
}

/// Names, shapes and initialisers of every parameter, in creation order.
fn layout(cfg: &UNetConfig) -> Vec<(String, usize, usize, Init)> {
    let mut out = Vec::new();
    let mut add = |name: String, r: usize, c: usize, init: Init| out.push((name, r, c, init));
    let fan = |n: usize| Init::Normal((1.0 / n as f64).sqrt());
    let c = cfg.latent_channels;
    let w0 = cfg.widths[0];
    add("conv_in.w".into(), 9 * 2 * c, w0, Init::AdaptedInput);
    add("conv_in.b".into(), 1, w0, Init::Zeros);
    for (s, w) in site_widths(cfg).into_iter().enumerate() {
        let b = format!("block{s}");
        for m in ["q", "k", "v", "o"] {
            add(format!("{b}.attn1.{m}"), w, w, fan(w));
        }
        add(format!("{b}.attn2.q"), w, w, fan(w));
        add(format!("{b}.attn2.k"), cfg.ctx_dim, w, fan(cfg.ctx_dim));
        add(format!("{b}.attn2.v"), cfg.ctx_dim, w, fan(cfg.ctx_dim));
        add(format!("{b}.attn2.o"), w, w, fan(w));
        let hidden = cfg.ffn_mult * w;
        add(format!("{b}.ff.w1"), w, hidden, fan(w));
        add(format!("{b}.ff.b1"), 1, hidden, Init::Zeros);
        add(format!("{b}.ff.w2"), hidden, w, fan(hidden));
        add(format!("{b}.ff.b2"), 1, w, Init::Zeros);
    }
    for i in 0..cfg.levels() - 1 {
        let (a, b) = (cfg.widths[i], cfg.widths[i + 1]);
        add(format!("down{i}.w"), 9 * a, b, fan(9 * a));
        add(format!("down{i}.b"), 1, b, Init::Zeros);
        add(format!("up{i}.w"), 9 * b, a, fan(9 * b));
        add(format!("up{i}.b"), 1, a, Init::Zeros);
    }
    add("conv_out.w".into(), 9 * w0, c, fan(9 * w0));
    add("conv_out.b".into(), 1, c, Init::Zeros);
    add("null_token".into(), 1, cfg.ctx_dim, Init::Normal(1.0));
    if cfg.interaction == Interaction::Tca {
        let d = cfg.token_input_dim();
        add("tok.proj.w".into(), d, cfg.ctx_dim, fan(d));
        add("tok.proj.b".into(), 1, cfg.ctx_dim, Init::Zeros);
        add("tok.pos".into(), cfg.num_patches(), cfg.ctx_dim, Init::Normal(0.1));
    }
    out
}

/// Feature width at every site, in forward order.
fn site_widths(cfg: &UNetConfig) -> Vec<usize> {
    let b = cfg.blocks_per_level;
    let down = cfg.widths.iter().flat_map(|&w| std::iter::repeat_n(w, b));
    let up = cfg.widths[..cfg.levels() - 1].iter().rev().flat_map(|&w| std::iter::repeat_n(w, b));
    down.chain(up).collect()
}

/// Sinusoidal embedding of a timestep: `dim/2` sines then `dim/2` cosines.
pub fn timestep_embedding(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        row[i] = a.sin();
        row[half + i] = a.cos();
    }
    Matrix::from_vec(1, dim, row)
}

/// Weights of one block as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl BlockParams {
    fn vars(&self, g: &mut Graph) -> BlockVars {
        BlockVars {
            attn1: self.self_attn.vars(g),
            attn2: self.cross_attn.vars(g),
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn1: AttnVars,
    pub attn2: AttnVars,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Cross-attention and feed-forward sub-layers with their residuals.
pub fn block_tail(g: &mut Graph, x: Var, ctx: Var, ctx_keep: Option<&[bool]>, p: &BlockVars) -> Var {
    let n = g.layer_norm(x);
    let a = attend_graph(g, &p.attn2, n, &[ctx], ctx_keep);
    let x = g.add(x, a);
    let n = g.layer_norm(x);
    let h = g.matmul(n, p.w1);
    let h = g.add_row(h, p.b1);
    let h = g.silu(h);
    let h = g.matmul(h, p.w2);
    let h = g.add_row(h, p.b2);
    g.add(x, h)
}

/// A full block on a single branch.
pub fn block_graph(g: &mut Graph, x: Var, ctx: Var, p: &BlockVars) -> Var {
    let n = g.layer_norm(x);
    let a = attend_graph(g, &p.attn1, n, &[n], None);
    let x = g.add(x, a);
    block_tail(g, x, ctx, None, p)
}

pub fn block_forward(x: &FeatureMap, tokens: &Matrix, p: &BlockParams) -> Result<FeatureMap> {
    let w = x.tokens.cols;
    if p.self_attn.wq.rows != w || p.cross_attn.wq.rows != w || p.w1.rows != w || p.w2.cols != w {
        return Err(Error::ShapeMismatch(format!("block weights do not match width {w}")));
    }
    if tokens.cols != p.cross_attn.wk.rows {
        return Err(Error::ShapeMismatch("prompt token width".into()));
    }
    let mut g = Graph::new();
    let vars = p.vars(&mut g);
    let xv = g.constant(x.tokens.clone());
    let ctx = g.constant(tokens.clone());
    let y = block_graph(&mut g, xv, ctx, &vars);
    FeatureMap::new(g.value(y).clone(), x.h, x.w)
}

/// Per-call switches of the forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Diffusion timestep; adds a sinusoidal embedding to the query branch.
    pub timestep: Option<usize>,
    /// Subsample the pooled support keys/values to one support's token count.
    pub kv_sampling: Option<u64>,
}

/// Cross-attention context of one branch.
struct Context {
    tokens: Var,
    keep: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub params: ParamStore,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = cfg.latent_channels;
        for (name, r, cols, init) in layout(&cfg) {
            let m = match init {
                Init::Normal(std) => Matrix::randn(r, cols, std, &mut rng),
                Init::Zeros => Matrix::zeros(r, cols),
                Init::AdaptedInput => {
                    let original = Matrix::randn(9 * c, cols, (1.0 / (9 * c) as f64).sqrt(), &mut rng);
                    adapt_input_layer(&original, 2)
                }
            };
            params.add(name, m);
        }
        Ok(Self { cfg, params })
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(cfg: UNetConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg);
        if expected.len() != params.len() {
            return Err(Error::ManifestMismatch(format!(
                "{} parameters, configuration needs {}",
                params.len(),
                expected.len()
            )));
        }
        for ((name, r, c, _), (got, m)) in expected.iter().zip(params.iter()) {
            if name != got || m.shape() != (*r, *c) {
                return Err(Error::ManifestMismatch(format!(
                    "parameter {got} {:?}, expected {name} {:?}",
                    m.shape(),
                    (r, c)
                )));
            }
            if !m.is_finite() {
                return Err(Error::ManifestMismatch(format!("parameter {got} is not finite")));
            }
        }
        Ok(Self { cfg, params })
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let id = self.params.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(&self.params, id)
    }

    fn block_vars(&self, g: &mut Graph, site: usize) -> BlockVars {
        let b = format!("block{site}");
        let heads = self.cfg.num_heads;
        let attn = |g: &mut Graph, which: &str| AttnVars {
            wq: self.p(g, &format!("{b}.{which}.q")),
            wk: self.p(g, &format!("{b}.{which}.k")),
            wv: self.p(g, &format!("{b}.{which}.v")),
            wo: self.p(g, &format!("{b}.{which}.o")),
            heads,
        };
        let attn1 = attn(g, "attn1");
        let attn2 = attn(g, "attn2");
        BlockVars {
            attn1,
            attn2,
            w1: self.p(g, &format!("{b}.ff.w1")),
            b1: self.p(g, &format!("{b}.ff.b1")),
            w2: self.p(g, &format!("{b}.ff.w2")),
            b2: self.p(g, &format!("{b}.ff.b2")),
        }
    }

    /// Weights of one block copied out of the store.
    pub fn block_params(&self, site: usize) -> BlockParams {
        let get = |n: String| self.params.get(self.params.find(&n).expect("block parameter")).clone();
        let b = format!("block{site}");
        let attn = |which: &str| {
            AttentionParams::new(
                get(format!("{b}.{which}.q")),
                get(format!("{b}.{which}.k")),
                get(format!("{b}.{which}.v")),
                get(format!("{b}.{which}.o")),
                self.cfg.num_heads,
            )
            .expect("consistent layout")
        };
        BlockParams {
            self_attn: attn("attn1"),
            cross_attn: attn("attn2"),
            w1: get(format!("{b}.ff.w1")),
            b1: get(format!("{b}.ff.b1")),
            w2: get(format!("{b}.ff.w2")),
            b2: get(format!("{b}.ff.b2")),
        }
    }

    /// Shared-weight forward of the query branch with its supports; returns
    /// the predicted `c`-channel latent as an `(h·w)×c` graph node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        query: &BranchInput,
        supports: &[PreparedSupport],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let c = cfg.latent_channels;
        let z = &query.latent;
        if z.c != 2 * c {
            return Err(Error::ShapeMismatch(format!("query input has {} channels, expected {}", z.c, 2 * c)));
        }
        let down = 1usize << (cfg.levels() - 1);
        if z.h % down != 0 || z.w % down != 0 {
            return Err(Error::NotDivisible { dim: z.h.max(z.w), factor: down });
        }

        let mut branch_latents = vec![z];
        let mut gates: Vec<Option<&BinaryMask>> = vec![None];
        let mut token_sets: Vec<(&Matrix, Option<&Vec<bool>>)> = Vec::new();
        for s in supports {
            match (cfg.interaction, s) {
                (Interaction::Fsa, PreparedSupport::Branch { input, gate }) => {
                    input.latent.check_same_shape(z)?;
                    branch_latents.push(&input.latent);
                    gates.push(gate.as_ref());
                }
                (Interaction::Tca, PreparedSupport::Tokens { patches, gate }) => {
                    if patches.shape() != (cfg.num_patches(), cfg.token_input_dim()) {
                        return Err(Error::ShapeMismatch(format!(
                            "support patches {:?}, expected {:?}",
                            patches.shape(),
                            (cfg.num_patches(), cfg.token_input_dim())
                        )));
                    }
                    if let Some(gt) = gate {
                        if gt.len() != patches.rows {
                            return Err(Error::GateLength { expected: patches.rows, got: gt.len() });
                        }
                    }
                    token_sets.push((patches, gate.as_ref()));
                }
                _ => return Err(Error::Config("prepared support does not match the interaction mode".into())),
            }
        }
        // support branches are only needed up to the last site that reads them
        let last_fusion = (0..cfg.num_sites()).rev().find(|&s| cfg.fusion_at(s));
        if last_fusion.is_none() {
            branch_latents.truncate(1);
            gates.truncate(1);
        }

        let null = self.p(g, "null_token");
        let plain_ctx = Context { tokens: null, keep: None };
        let query_ctx = if token_sets.is_empty() {
            Context { tokens: null, keep: None }
        } else {
            let (w, b, pos) = (self.p(g, "tok.proj.w"), self.p(g, "tok.proj.b"), self.p(g, "tok.pos"));
            let mut parts = vec![null];
            let mut keep = vec![true];
            for (patches, gate) in &token_sets {
                let x = g.constant((*patches).clone());
                let t = g.matmul(x, w);
                let t = g.add_row(t, b);
                parts.push(g.add(t, pos));
                match gate {
                    Some(gt) => keep.extend_from_slice(gt),
                    None => keep.extend(std::iter::repeat_n(true, patches.rows)),
                }
            }
            let all_kept = keep.iter().all(|&k| k);
            Context { tokens: g.concat_rows(&parts), keep: (!all_kept).then_some(keep) }
        };

        let (kin, bin) = (self.p(g, "conv_in.w"), self.p(g, "conv_in.b"));
        let mut grid = (z.h, z.w);
        let mut xs: Vec<Var> = branch_latents
            .iter()
            .map(|lat| {
                let x = g.constant(lat.to_matrix());
                conv::slotted_conv3x3(g, x, grid, kin, Some(bin), 2)
            })
            .collect();

        let b = cfg.blocks_per_level;
        let mut site = 0;
        let mut skips: Vec<Vec<Var>> = Vec::new();
        let run_site = |g: &mut Graph, xs: &mut Vec<Var>, grid: (usize, usize), site: usize| -> Result<()> {
            if let Some(t) = opts.timestep {
                let w = g.shape(xs[0]).1;
                let e = g.constant(timestep_embedding(t, w));
                xs[0] = g.add_row(xs[0], e);
            }
            self.site(g, xs, grid, site, &gates, &query_ctx, &plain_ctx, opts)?;
            if last_fusion.is_none_or(|l| site >= l) {
                xs.truncate(1);
            }
            Ok(())
        };
        for lvl in 0..cfg.levels() {
            for _ in 0..b {
                run_site(g, &mut xs, grid, site)?;
                site += 1;
            }
            if lvl + 1 < cfg.levels() {
                skips.push(xs.clone());
                let (w, bias) = (self.p(g, &format!("down{lvl}.w")), self.p(g, &format!("down{lvl}.b")));
                let mut next = grid;
                for x in xs.iter_mut() {
                    let (y, gr) = conv::conv3x3(g, *x, grid, w, Some(bias), 2);
                    *x = y;
                    next = gr;
                }
                grid = next;
            }
        }
        for lvl in (0..cfg.levels() - 1).rev() {
            let (w, bias) = (self.p(g, &format!("up{lvl}.w")), self.p(g, &format!("up{lvl}.b")));
            let skip = skips.pop().expect("one skip per level");
            let mut next = grid;
            for (j, x) in xs.iter_mut().enumerate() {
                let (u, gr) = conv::upsample2(g, *x, grid);
                let (y, _) = conv::conv3x3(g, u, gr, w, Some(bias), 1);
                *x = g.add(y, skip[j]);
                next = gr;
            }
            grid = next;
            for _ in 0..b {
                run_site(g, &mut xs, grid, site)?;
                site += 1;
            }
        }

        let (wout, bout) = (self.p(g, "conv_out.w"), self.p(g, "conv_out.b"));
        let h = g.layer_norm(xs[0]);
        let h = g.silu(h);
        let (out, _) = conv::conv3x3(g, h, grid, wout, Some(bout), 1);
        Ok(out)
    }

    /// One block at `site` for every live branch (`xs[0]` is the query).
    #[allow(clippy::too_many_arguments)]
    fn site(
        &self,
        g: &mut Graph,
        xs: &mut [Var],
        grid: (usize, usize),
        site: usize,
        gates: &[Option<&BinaryMask>],
        query_ctx: &Context,
        plain_ctx: &Context,
        opts: &ForwardOptions,
    ) -> Result<()> {
        let bv = self.block_vars(g, site);
        let normed: Vec<Var> = xs.iter().map(|&x| g.layer_norm(x)).collect();
        let fuse = self.cfg.interaction == Interaction::Fsa && self.cfg.fusion_at(site) && xs.len() > 1;
        let attn: Vec<Var> = if !fuse {
            normed.iter().map(|&n| attend_graph(g, &bv.attn1, n, &[n], None)).collect()
        } else {
            let nq = g.shape(normed[0]).0;
            let per_support = nq;
            let mut pool = g.concat_rows(&normed[1..]);
            let mut pool_keep: Option<Vec<bool>> = if gates[1..].iter().any(Option::is_some) {
                Some(
                    gates[1..]
                        .iter()
                        .flat_map(|m| match m {
                            Some(m) => m.resize_nearest(grid.0, grid.1).data,
                            None => vec![true; per_support],
                        })
                        .collect(),
                )
            } else {
                None
            };
            if let Some(seed) = opts.kv_sampling {
                let total = g.shape(pool).0;
                let site_seed = seed.wrapping_add((site as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let idx = sample_kv_indices(total, per_support, site_seed)?;
                if idx.len() < total {
                    pool = gather_rows(g, pool, &idx);
                    pool_keep = pool_keep.map(|k| idx.iter().map(|&i| k[i]).collect());
                }
            }
            let keep = pool_keep.map(|k| {
                let mut all = vec![true; nq];
                all.extend(k);
                all
            });
            match self.cfg.fusion {
                Fusion::Kv => {
                    let mut out = vec![attend_graph(g, &bv.attn1, normed[0], &[normed[0], pool], keep.as_deref())];
                    out.extend(normed[1..].iter().map(|&n| attend_graph(g, &bv.attn1, n, &[n], None)));
                    out
                }
                Fusion::Qkv => {
                    let joint = g.concat_rows(&normed);
                    let a = attend_graph(g, &bv.attn1, joint, &[normed[0], pool], keep.as_deref());
                    (0..normed.len()).map(|j| g.slice_rows(a, j * nq, nq)).collect()
                }
            }
        };
        for (j, x) in xs.iter_mut().enumerate() {
            let y = g.add(*x, attn[j]);
            let ctx = if j == 0 { query_ctx } else { plain_ctx };
            *x = block_tail(g, y, ctx.tokens, ctx.keep.as_deref(), &bv);
        }
        Ok(())
    }

    /// Value-level dual-branch forward returning the predicted latent.
    pub fn dual_forward(
        &self,
        query: &BranchInput,
        supports: &[PreparedSupport],
        opts: &ForwardOptions,
    ) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, query, supports, opts)?;
        Ok(LatentTensor::from_matrix(query.latent.h, query.latent.w, g.value(out).clone()))
    }
}
