//! Context-maskable Conformer encoder.
//!
//! Two stride-2 convolutions reduce 10 ms feature frames to 40 ms encoder
//! frames (`T' = ⌈T/4⌉`), a linear layer projects to `d_model`, absolute
//! sinusoidal positions are added, and `n_layers` Conformer blocks follow:
//! ½·FFN → self-attention → depthwise conv module → ½·FFN → layer norm,
//! all with residual connections. Attention takes an additive mask
//! (−1e9 at disallowed pairs) and the depthwise conv takes a tap-validity
//! mask, so one code path serves full-context, chunked and streaming use.

mod config;

use std::sync::Arc;

use rand::Rng;

pub use config::{ConfigError, EncoderConfig, Preset};

use crate::chunking::{attention_mask, conv_validity, BoolMask, ChunkPolicy};
use crate::frontend::FeatureSequence;
use crate::params::{Group, ParamStore};
use crate::tensor::{shape_err, Conv2dGeom, Graph, ParamId, Result, Tensor, TensorError, Var};

pub const SUBSAMPLE_FACTOR: usize = 4;
/// Shortest feature sequence the subsampler accepts.
pub const MIN_FEATURE_FRAMES: usize = 8;
/// Score assigned to disallowed attention pairs.
pub const MASK_NEG: f32 = -1e9;
const LN_EPS: f32 = 1e-5;

/// Encoder frames produced from `t` feature frames: `⌈⌈t/2⌉/2⌉ = ⌈t/4⌉`.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(SUBSAMPLE_FACTOR)
}

fn ceil_half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Sinusoidal position encoding rows for positions `start..start + n`.
pub fn positional_encoding(start: usize, n: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * d];
    for r in 0..n {
        let pos = (start + r) as f64;
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64 / d as f64) * 10000f64.ln()).exp();
            out[r * d + 2 * i] = (pos * freq).sin() as f32;
            out[r * d + 2 * i + 1] = (pos * freq).cos() as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: Group, rng: &mut R) -> Self {
        Self::scaled(store, name, fan_in, fan_out, group, 1.0, rng)
    }

    fn scaled<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: Group, gain: f32, rng: &mut R) -> Self {
        let std = gain * (1.0 / fan_in as f32).sqrt();
        Self {
            w: store.register(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng), group),
            b: store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group),
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = p.leaf(g, self.w);
        let b = p.leaf(g, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Public constructor used by heads that live outside this module.
#[derive(Debug, Clone, Copy)]
pub struct Dense(Linear);

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: Group, rng: &mut R) -> Self {
        Self(Linear::new(store, name, fan_in, fan_out, group, rng))
    }

    /// Weights drawn with `gain` times the default standard deviation.
    pub fn scaled<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: Group, gain: f32, rng: &mut R) -> Self {
        Self(Linear::scaled(store, name, fan_in, fan_out, group, gain, rng))
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        self.0.forward(g, p, x)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize, group: Group) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[d], 1.0), group),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d]), group),
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let gain = p.leaf(g, self.gain);
        let bias = p.leaf(g, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    norm: Norm,
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct SelfAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct ConvModule {
    norm: Norm,
    pointwise_in: Linear,
    depthwise: ParamId,
    depthwise_bias: ParamId,
    conv_norm: Norm,
    pointwise_out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    norm_out: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Subsampler {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    proj: Linear,
}

/// Attention inputs beyond the block's own frames.
#[derive(Debug, Default, Clone, Copy)]
pub struct AttnInputs {
    /// Additive bias `[n, S]` over keys (cached + current).
    pub bias: Option<Var>,
    /// Cached keys and values `[P, d_model]` preceding the current frames.
    pub past: Option<(Var, Var)>,
}

/// Convolution inputs for one block.
#[derive(Debug, Clone)]
pub struct ConvInputs {
    /// `[n, K]` tap validity for the current frames.
    pub valid: Arc<Vec<bool>>,
    /// Cached depthwise-conv inputs `[P, d_model]` preceding the current frames.
    pub past: Option<Var>,
}

/// Block output plus the per-frame activations a streaming cache keeps.
#[derive(Debug, Clone, Copy)]
pub struct BlockOut {
    pub y: Var,
    pub k: Var,
    pub v: Var,
    pub conv_in: Var,
}

/// Feature rows `[first, first + rows/n_mels)` of an utterance whose total
/// length is `total` when known (i.e. when the window reaches the end).
#[derive(Debug, Clone, Copy)]
pub struct FeatureWindow<'a> {
    pub rows: &'a [f32],
    pub first: usize,
    pub total: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    sub: Subsampler,
    blocks: Vec<Block>,
}

impl Encoder {
    /// Registers all encoder parameters (group [`Group::Encoder`]) in `store`.
    pub fn new<R: Rng>(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> std::result::Result<Self, ConfigError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let c = cfg.subsample_channels;
        let grp = Group::Encoder;
        let sub = Subsampler {
            conv1_w: store.register("encoder.subsample.conv1.weight", Tensor::randn(&[c, 1, 3, 3], (1.0f32 / 9.0).sqrt(), rng), grp),
            conv1_b: store.register("encoder.subsample.conv1.bias", Tensor::zeros(&[c]), grp),
            conv2_w: store.register("encoder.subsample.conv2.weight", Tensor::randn(&[c, c, 3, 3], (1.0 / (9.0 * c as f32)).sqrt(), rng), grp),
            conv2_b: store.register("encoder.subsample.conv2.bias", Tensor::zeros(&[c]), grp),
            proj: Linear::new(store, "encoder.subsample.proj", c * cfg.subsampled_mels(), d, grp, rng),
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("encoder.layers.{l}.{s}");
            let ffn = |tag: &str, store: &mut ParamStore, rng: &mut R| FeedForward {
                norm: Norm::new(store, &name(&format!("{tag}.norm")), d, grp),
                up: Linear::new(store, &name(&format!("{tag}.up")), d, d * cfg.ffn_expansion, grp, rng),
                down: Linear::new(store, &name(&format!("{tag}.down")), d * cfg.ffn_expansion, d, grp, rng),
            };
            let ff1 = ffn("ff1", store, rng);
            let attn = SelfAttention {
                norm: Norm::new(store, &name("attn.norm"), d, grp),
                q: Linear::new(store, &name("attn.q"), d, d, grp, rng),
                k: Linear::new(store, &name("attn.k"), d, d, grp, rng),
                v: Linear::new(store, &name("attn.v"), d, d, grp, rng),
                out: Linear::new(store, &name("attn.out"), d, d, grp, rng),
            };
            let k = cfg.conv_kernel;
            let conv = ConvModule {
                norm: Norm::new(store, &name("conv.norm"), d, grp),
                pointwise_in: Linear::new(store, &name("conv.pointwise_in"), d, 2 * d, grp, rng),
                depthwise: store.register(name("conv.depthwise.weight"), Tensor::randn(&[k, d], (1.0 / k as f32).sqrt(), rng), grp),
                depthwise_bias: store.register(name("conv.depthwise.bias"), Tensor::zeros(&[d]), grp),
                conv_norm: Norm::new(store, &name("conv.depthwise_norm"), d, grp),
                pointwise_out: Linear::new(store, &name("conv.pointwise_out"), d, d, grp, rng),
            };
            let ff2 = ffn("ff2", store, rng);
            let norm_out = Norm::new(store, &name("norm_out"), d, grp);
            blocks.push(Block {
                ff1,
                attn,
                conv,
                ff2,
                norm_out,
            });
        }
        Ok(Self { cfg, sub, blocks })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Subsample feature rows into encoder frames `a..b` (with positions added).
    ///
    /// Frame `u` reads feature rows `4u-3 ..= 4u+3`; rows before 0 or at/after
    /// the known total are zero padding. The window must cover
    /// `max(0, 4a-3) .. min(4b, total)`.
    pub fn subsample_range(&self, g: &mut Graph, p: &ParamStore, win: FeatureWindow<'_>, a: usize, b: usize) -> Result<Var> {
        let d_in = self.cfg.n_mels;
        if b <= a {
            return Err(shape_err("subsample", format!("empty frame range {a}..{b}")));
        }
        if !win.rows.len().is_multiple_of(d_in) {
            return Err(shape_err("subsample", "window rows not a multiple of n_mels"));
        }
        let n = b - a;
        let have = win.rows.len() / d_in;
        let lo = 4 * a as isize - 3;
        let n_rows = 4 * n + 3;
        let mut buf = vec![0.0f32; n_rows * d_in];
        for (i, out) in buf.chunks_mut(d_in).enumerate() {
            let r = lo + i as isize;
            if r < 0 || win.total.is_some_and(|t| r as usize >= t) {
                continue;
            }
            let r = r as usize;
            if r < win.first || r >= win.first + have {
                return Err(shape_err("subsample", format!("feature row {r} not in window {}..{}", win.first, win.first + have)));
            }
            let off = (r - win.first) * d_in;
            out.copy_from_slice(&win.rows[off..off + d_in]);
        }
        let x = g.constant(&[1, n_rows, d_in], buf)?;
        let geom = Conv2dGeom {
            stride: (2, 2),
            pad: (0, 1),
        };
        let (w1, b1) = (p.leaf(g, self.sub.conv1_w), p.leaf(g, self.sub.conv1_b));
        let h1 = g.conv2d(x, w1, b1, geom)?;
        let h1 = g.swish(h1);
        // layer-1 rows 2a-1 ..= 2b-1; zero the padding rows
        let f1 = g.shape(h1)[2];
        let l1_total = win.total.map(ceil_half);
        let first_l1 = 2 * a as isize - 1;
        let rows1 = 2 * n + 1;
        let row_ok = |j: usize| {
            let t1 = first_l1 + j as isize;
            t1 >= 0 && l1_total.is_none_or(|t| (t1 as usize) < t)
        };
        let h1 = if (0..rows1).all(row_ok) {
            h1
        } else {
            let mask: Vec<f32> = (0..rows1)
                .flat_map(|j| std::iter::repeat_n(if row_ok(j) { 1.0 } else { 0.0 }, f1))
                .collect();
            let m = g.constant(&[rows1, f1], mask)?;
            g.mul(h1, m)?
        };
        let (w2, b2) = (p.leaf(g, self.sub.conv2_w), p.leaf(g, self.sub.conv2_b));
        let h2 = g.conv2d(h1, w2, b2, geom)?;
        let h2 = g.swish(h2);
        let (c, t2, f2) = (g.shape(h2)[0], g.shape(h2)[1], g.shape(h2)[2]);
        debug_assert_eq!(t2, n);
        let h2 = g.permute(h2, &[1, 0, 2])?;
        let h2 = g.reshape(h2, &[n, c * f2])?;
        let x = self.sub.proj.forward(g, p, h2)?;
        let pe = g.constant(&[n, self.cfg.d_model], positional_encoding(a, n, self.cfg.d_model))?;
        let x = g.add(x, pe)?;
        Ok(g.dropout(x, self.cfg.dropout))
    }

    /// Subsample a whole utterance.
    pub fn subsample(&self, g: &mut Graph, p: &ParamStore, feats: &FeatureSequence) -> Result<Var> {
        if feats.n_mels != self.cfg.n_mels {
            return Err(shape_err("subsample", format!("expected {} mel bins, got {}", self.cfg.n_mels, feats.n_mels)));
        }
        if feats.n_frames < MIN_FEATURE_FRAMES {
            return Err(TensorError::Usage(format!(
                "utterance too short: {} feature frames, need {MIN_FEATURE_FRAMES}",
                feats.n_frames
            )));
        }
        let win = FeatureWindow {
            rows: &feats.frames,
            first: 0,
            total: Some(feats.n_frames),
        };
        self.subsample_range(g, p, win, 0, subsampled_len(feats.n_frames))
    }

    fn feed_forward(&self, g: &mut Graph, p: &ParamStore, ff: &FeedForward, x: Var) -> Result<Var> {
        let h = ff.norm.forward(g, p, x)?;
        let h = ff.up.forward(g, p, h)?;
        let h = g.swish(h);
        let h = g.dropout(h, self.cfg.dropout);
        let h = ff.down.forward(g, p, h)?;
        Ok(g.dropout(h, self.cfg.dropout))
    }

    /// One Conformer block over `x: [n, d_model]`.
    pub fn block_forward(&self, g: &mut Graph, p: &ParamStore, layer: usize, x: Var, attn: AttnInputs, conv: &ConvInputs) -> Result<BlockOut> {
        let blk = &self.blocks[layer];
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let n = g.shape(x)[0];

        let h = self.feed_forward(g, p, &blk.ff1, x)?;
        let h = g.scale(h, 0.5);
        let x = g.add(x, h)?;

        // self-attention
        let xn = blk.attn.norm.forward(g, p, x)?;
        let q = blk.attn.q.forward(g, p, xn)?;
        let k_cur = blk.attn.k.forward(g, p, xn)?;
        let v_cur = blk.attn.v.forward(g, p, xn)?;
        let (k, v) = match attn.past {
            Some((pk, pv)) => (g.concat(&[pk, k_cur], 0)?, g.concat(&[pv, v_cur], 0)?),
            None => (k_cur, v_cur),
        };
        let s = g.shape(k)[0];
        let q = g.scale(q, 1.0 / (dh as f32).sqrt());
        let qh = g.reshape(q, &[n, heads, dh])?;
        let qh = g.permute(qh, &[1, 0, 2])?;
        let kh = g.reshape(k, &[s, heads, dh])?;
        let kh = g.permute(kh, &[1, 2, 0])?;
        let vh = g.reshape(v, &[s, heads, dh])?;
        let vh = g.permute(vh, &[1, 0, 2])?;
        let scores = g.matmul(qh, kh)?;
        let scores = match attn.bias {
            Some(b) => {
                if g.shape(b) != [n, s] {
                    return Err(shape_err("attention", format!("bias {:?} for {n} queries x {s} keys", g.shape(b))));
                }
                g.add(scores, b)?
            }
            None => scores,
        };
        let w = g.softmax(scores);
        let ctx = g.matmul(w, vh)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[n, d])?;
        let h = blk.attn.out.forward(g, p, ctx)?;
        let h = g.dropout(h, self.cfg.dropout);
        let x = g.add(x, h)?;

        // convolution module
        let cm = &blk.conv;
        let xn = cm.norm.forward(g, p, x)?;
        let h = cm.pointwise_in.forward(g, p, xn)?;
        let a = g.slice(h, 1, 0, d)?;
        let gate = g.slice(h, 1, d, d)?;
        let gate = g.sigmoid(gate);
        let conv_in = g.mul(a, gate)?;
        let (inp, offset) = match conv.past {
            Some(past) => {
                let rows = g.shape(past)[0];
                (g.concat(&[past, conv_in], 0)?, rows)
            }
            None => (conv_in, 0),
        };
        let kw = p.leaf(g, cm.depthwise);
        let h = g.depthwise_conv1d(inp, kw, conv.valid.clone(), n, offset)?;
        let kb = p.leaf(g, cm.depthwise_bias);
        let h = g.add(h, kb)?;
        let h = cm.conv_norm.forward(g, p, h)?;
        let h = g.swish(h);
        let h = cm.pointwise_out.forward(g, p, h)?;
        let h = g.dropout(h, self.cfg.dropout);
        let x = g.add(x, h)?;

        let h = self.feed_forward(g, p, &blk.ff2, x)?;
        let h = g.scale(h, 0.5);
        let x = g.add(x, h)?;
        let y = blk.norm_out.forward(g, p, x)?;
        Ok(BlockOut { y, k: k_cur, v: v_cur, conv_in })
    }

    /// Run all blocks over `x: [T', d_model]` under the given masks.
    /// `attn_mask = None` is the unmasked reference path.
    pub fn encode_with(&self, g: &mut Graph, p: &ParamStore, x: Var, attn_mask: Option<&BoolMask>, conv_mask: &BoolMask) -> Result<Var> {
        let t = g.shape(x)[0];
        if g.shape(x) != [t, self.cfg.d_model] {
            return Err(shape_err("encode", format!("input {:?}, d_model {}", g.shape(x), self.cfg.d_model)));
        }
        if let Some(m) = attn_mask {
            if m.rows != t || m.cols != t {
                return Err(shape_err("encode", format!("attention mask {}x{} for {t} frames", m.rows, m.cols)));
            }
        }
        if conv_mask.rows != t || conv_mask.cols != self.cfg.conv_kernel {
            return Err(shape_err("encode", format!("conv mask {}x{} for {t} frames, K={}", conv_mask.rows, conv_mask.cols, self.cfg.conv_kernel)));
        }
        let bias = match attn_mask {
            Some(m) => Some(g.constant(&[t, t], m.to_bias(MASK_NEG))?),
            None => None,
        };
        let conv = ConvInputs {
            valid: Arc::new(conv_mask.allowed.clone()),
            past: None,
        };
        let mut h = x;
        for l in 0..self.blocks.len() {
            h = self.block_forward(g, p, l, h, AttnInputs { bias, past: None }, &conv)?.y;
        }
        Ok(h)
    }

    pub fn encode(&self, g: &mut Graph, p: &ParamStore, x: Var, attn_mask: &BoolMask, conv_mask: &BoolMask) -> Result<Var> {
        self.encode_with(g, p, x, Some(attn_mask), conv_mask)
    }

    /// Features → encoder output `[⌈T/4⌉, d_model]` under `policy`.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, feats: &FeatureSequence, policy: ChunkPolicy) -> Result<Var> {
        let x = self.subsample(g, p, feats)?;
        let t = g.shape(x)[0];
        let conv = conv_validity(t, policy, self.cfg.conv_kernel, self.cfg.conv_context);
        match policy {
            ChunkPolicy::FullContext => self.encode_with(g, p, x, None, &conv),
            _ => self.encode(g, p, x, &attention_mask(t, policy), &conv),
        }
    }
}
