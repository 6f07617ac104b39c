use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionSpec, Augment, MASK_NEG};
use super::config::{AttentionConfig, BlockOrder};
use super::params::{Graph, ParamId, ParamStore};
use super::MusicFeatures;
use crate::autograd::Var;
use crate::diffusion::{Denoiser, ModelOutput};
use crate::error::{Error, Result};
use crate::skeleton::{CONTACT_OFFSET, NUM_CONTACTS, NUM_JOINTS, POSE_DIM, ROT_OFFSET};

/// Pose tokens per frame: root translation, 24 joints, contacts.
pub const NUM_TOKENS: usize = NUM_JOINTS + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training mode; the temporal frame mask is drawn from `mask_seed`.
    Train { mask_seed: u64 },
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_weight(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.add(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Array2::zeros((fan_in, fan_out))),
            b: store.add(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w);
        g.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, width))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, width))),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let n = g.tape.layer_norm(x);
        let n = g.tape.mul_row(n, gain);
        g.tape.add_row(n, bias)
    }
}

#[derive(Debug, Clone)]
struct Projections {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Projections {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
        }
    }

    fn attend(&self, g: &mut Graph, q_in: Var, k_in: Var, v_in: Var, spec: AttentionSpec) -> Var {
        let q = self.q.forward(g, q_in);
        let k = self.k.forward(g, k_in);
        let v = self.v.forward(g, v_in);
        let a = g.tape.attention(q, k, v, spec);
        self.o.forward(g, a)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: Norm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, width: usize, mlp: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), width),
            up: Linear::new(store, &format!("{name}.up"), width, mlp, rng),
            down: Linear::new(store, &format!("{name}.down"), mlp, width, rng),
        }
    }

    fn residual(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let h = self.up.forward(g, h);
        let h = g.tape.silu(h);
        let h = self.down.forward(g, h);
        g.tape.add(x, h)
    }
}

/// Kernel-3, same-padded temporal convolution over `frames x width`.
#[derive(Debug, Clone)]
struct Conv1d {
    taps: [ParamId; 3],
    bias: ParamId,
}

impl Conv1d {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let taps = std::array::from_fn(|i| {
            let id = store.add_weight(format!("{name}.tap{i}"), width, width, rng);
            // fan-in spans all three taps
            store.get_mut(id).mapv_inplace(|w| w / 3f64.sqrt());
            id
        });
        Self {
            taps,
            bias: store.add(format!("{name}.b"), Array2::zeros((1, width))),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        // out[i] = x[i-1] W0 + x[i] W1 + x[i+1] W2 + b
        let prev = g.tape.shift_rows(x, 1);
        let next = g.tape.shift_rows(x, -1);
        let mut acc = None;
        for (input, tap) in [prev, x, next].into_iter().zip(self.taps) {
            let w = g.param(tap);
            let y = g.tape.matmul(input, w);
            acc = Some(match acc {
                None => y,
                Some(a) => g.tape.add(a, y),
            });
        }
        let b = g.param(self.bias);
        g.tape.add_row(acc.expect("three taps"), b)
    }
}

#[derive(Debug, Clone)]
struct Alignment {
    conv_dance: Conv1d,
    conv_music: Conv1d,
    hidden: Linear,
    film: Linear,
}

#[derive(Debug, Clone)]
struct MusicStack {
    mf_norm: Norm,
    mf: Projections,
    mt_norm: Norm,
    mt: Projections,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DanceStack {
    ds_norm: Norm,
    ds_split: Linear,
    ds: Projections,
    ds_merge: Linear,
    dt_norm: Norm,
    dt: Projections,
    cross_norm: Norm,
    cross: Projections,
    align: Alignment,
    ff: FeedForward,
}

/// The conditional denoiser `x_hat(z_t, t, music)`.
#[derive(Debug, Clone)]
pub struct PopDg {
    config: AttentionConfig,
    params: ParamStore,
    tok_root: Linear,
    tok_joint: Linear,
    tok_contact: Linear,
    tok_pos: ParamId,
    embed: Linear,
    music_in: Linear,
    music_stacks: Vec<MusicStack>,
    music_out: Norm,
    dance_stacks: Vec<DanceStack>,
    out_norm: Norm,
    head_x: Linear,
    head_v: Linear,
}

/// Sinusoidal embedding of a scalar position into `width` channels
/// (interleaved sin/cos pairs, geometric frequencies down to 1/10000).
pub fn sinusoidal_embedding(pos: f64, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for k in 0..width / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / width as f64);
        out[2 * k] = (pos * freq).sin();
        out[2 * k + 1] = (pos * freq).cos();
    }
    if width % 2 == 1 {
        let freq = 10000f64.powf(-((width - 1) as f64) / width as f64);
        out[width - 1] = (pos * freq).sin();
    }
    out
}

fn positional_encoding(frames: usize, width: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((frames, width));
    for i in 0..frames {
        for (c, v) in sinusoidal_embedding(i as f64, width).into_iter().enumerate() {
            pe[[i, c]] = v;
        }
    }
    pe
}

/// Additive key mask hiding `round(ratio * frames)` randomly chosen frames
/// (never all of them).
pub(crate) fn frame_mask(frames: usize, ratio: f64, seed: u64) -> Option<Array2<f64>> {
    let k = ((ratio * frames as f64).round() as usize).min(frames.saturating_sub(1));
    if k == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::zeros((frames, frames));
    for j in sample_indices(&mut rng, frames, k) {
        mask.column_mut(j).fill(MASK_NEG);
    }
    Some(mask)
}

impl PopDg {
    pub fn new(config: AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (h, c, cf) = (config.hidden, config.token_width, config.music_token_width);
        let tok_root = Linear::new(&mut p, "tokens.root", 3, c, &mut rng);
        let tok_joint = Linear::new(&mut p, "tokens.joint", 6, c, &mut rng);
        let tok_contact = Linear::new(&mut p, "tokens.contact", NUM_CONTACTS, c, &mut rng);
        let tok_pos = p.add_weight("tokens.position", 1, NUM_TOKENS * c, &mut rng);
        let embed = Linear::new(&mut p, "tokens.embed", NUM_TOKENS * c, h, &mut rng);
        let music_in = Linear::new(&mut p, "music.in", config.music_width, h, &mut rng);

        let music_stacks = (0..config.stacks)
            .map(|s| {
                let n = format!("music.{s}");
                MusicStack {
                    mf_norm: Norm::new(&mut p, &format!("{n}.mf_norm"), h),
                    mf: Projections::new(&mut p, &format!("{n}.mf"), cf, &mut rng),
                    mt_norm: Norm::new(&mut p, &format!("{n}.mt_norm"), h),
                    mt: Projections::new(&mut p, &format!("{n}.mt"), h, &mut rng),
                    ff: FeedForward::new(&mut p, &format!("{n}.ff"), h, config.mlp, &mut rng),
                }
            })
            .collect();
        let music_out = Norm::new(&mut p, "music.out_norm", h);

        let dance_stacks = (0..config.stacks)
            .map(|s| {
                let n = format!("dance.{s}");
                let align = Alignment {
                    conv_dance: Conv1d::new(&mut p, &format!("{n}.align.conv_dance"), h, &mut rng),
                    conv_music: Conv1d::new(&mut p, &format!("{n}.align.conv_music"), h, &mut rng),
                    hidden: Linear::new(&mut p, &format!("{n}.align.hidden"), h, config.mlp, &mut rng),
                    film: Linear::new(&mut p, &format!("{n}.align.film"), config.mlp, 2 * h, &mut rng),
                };
                // start near the identity modulation: gamma ~ 1, beta ~ 0
                p.get_mut(align.film.b).slice_mut(ndarray::s![.., ..h]).fill(1.0);
                p.get_mut(align.film.w).mapv_inplace(|w| w * 0.1);
                DanceStack {
                    ds_norm: Norm::new(&mut p, &format!("{n}.ds_norm"), h),
                    ds_split: Linear::new(&mut p, &format!("{n}.ds_split"), h, NUM_TOKENS * c, &mut rng),
                    ds: Projections::new(&mut p, &format!("{n}.ds"), c, &mut rng),
                    ds_merge: Linear::new(&mut p, &format!("{n}.ds_merge"), NUM_TOKENS * c, h, &mut rng),
                    dt_norm: Norm::new(&mut p, &format!("{n}.dt_norm"), h),
                    dt: Projections::new(&mut p, &format!("{n}.dt"), h, &mut rng),
                    cross_norm: Norm::new(&mut p, &format!("{n}.cross_norm"), h),
                    cross: Projections::new(&mut p, &format!("{n}.cross"), h, &mut rng),
                    align,
                    ff: FeedForward::new(&mut p, &format!("{n}.ff"), h, config.mlp, &mut rng),
                }
            })
            .collect();
        let out_norm = Norm::new(&mut p, "head.norm", h);
        let v_width = if config.v_per_frame { 1 } else { POSE_DIM };
        let (head_x, head_v) = if config.zero_init_heads {
            (
                Linear::zeros(&mut p, "head.x", h, POSE_DIM),
                Linear::zeros(&mut p, "head.v", h, v_width),
            )
        } else {
            (
                Linear::new(&mut p, "head.x", h, POSE_DIM, &mut rng),
                Linear::new(&mut p, "head.v", h, v_width, &mut rng),
            )
        };
        Ok(Self {
            config,
            params: p,
            tok_root,
            tok_joint,
            tok_contact,
            tok_pos,
            embed,
            music_in,
            music_stacks,
            music_out,
            dance_stacks,
            out_norm,
            head_x,
            head_v,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets a named parameter; panics on unknown name or shape mismatch.
    pub fn set_param(&mut self, name: &str, value: Array2<f64>) {
        let id = self.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        assert_eq!(self.params.get(id).dim(), value.dim(), "shape of {name}");
        *self.params.get_mut(id) = value;
    }

    /// Embeds each frame as 26 tokens (root, joints in SMPL order, contacts),
    /// flattened to `frames x 26c`.
    pub fn tokenize(&self, g: &mut Graph, z: Var) -> Var {
        let n = g.tape.value(z).nrows();
        let c = self.config.token_width;
        let root = g.tape.slice_cols(z, 0, 3);
        let root = self.tok_root.forward(g, root);
        let joints = g.tape.slice_cols(z, ROT_OFFSET, NUM_JOINTS * 6);
        let joints = g.tape.reshape(joints, n * NUM_JOINTS, 6);
        let joints = self.tok_joint.forward(g, joints);
        let joints = g.tape.reshape(joints, n, NUM_JOINTS * c);
        let contacts = g.tape.slice_cols(z, CONTACT_OFFSET, NUM_CONTACTS);
        let contacts = self.tok_contact.forward(g, contacts);
        let tokens = g.tape.concat_cols(&[root, joints, contacts]);
        let pos = g.param(self.tok_pos);
        g.tape.add_row(tokens, pos)
    }

    /// Attention across the 26 pose tokens of each frame, `(frames*26) x c`.
    /// The joint sub-map of every head is augmented after the softmax.
    pub fn ds_attention(&self, g: &mut Graph, stack: usize, tokens: Var) -> Var {
        let frames = g.tape.value(tokens).nrows() / NUM_TOKENS;
        let augment = self.config.space_augment.then_some(Augment {
            halve: self.config.halve_after_enhance,
            token_offset: 1,
        });
        let spec = AttentionSpec::new(self.config.heads, frames, NUM_TOKENS, NUM_TOKENS).with_augment(augment);
        self.dance_stacks[stack].ds.attend(g, tokens, tokens, tokens, spec)
    }

    /// Attention across frames; queries and keys carry the positional encoding.
    pub fn dt_attention(&self, g: &mut Graph, stack: usize, x: Var, mask: Option<Array2<f64>>) -> Var {
        temporal_attention(g, &self.dance_stacks[stack].dt, x, self.config.heads, mask)
    }

    pub fn mt_attention(&self, g: &mut Graph, stack: usize, m: Var) -> Var {
        temporal_attention(g, &self.music_stacks[stack].mt, m, self.config.heads, None)
    }

    /// Attention across the feature tokens of each frame: the hidden width is
    /// split into `music_tokens` tokens of `music_token_width` channels.
    pub fn mf_attention(&self, g: &mut Graph, stack: usize, m: Var) -> Var {
        let (n, h) = g.tape.value(m).dim();
        let f = self.config.music_tokens;
        let tokens = g.tape.reshape(m, n * f, self.config.music_token_width);
        let spec = AttentionSpec::new(self.config.heads, n, f, f);
        let out = self.music_stacks[stack].mf.attend(g, tokens, tokens, tokens, spec);
        g.tape.reshape(out, n, h)
    }

    /// FiLM modulation of the dance features: convolved dance and music
    /// streams plus the timestep embedding feed an MLP that emits per-channel
    /// `gamma` and `beta`; the result is `gamma * dance + beta`.
    pub fn alignment_module(&self, g: &mut Graph, stack: usize, dance: Var, music: Var, t: usize) -> Result<Var> {
        let (nd, h) = g.tape.value(dance).dim();
        let nm = g.tape.value(music).nrows();
        if nd != nm {
            return Err(Error::Alignment { motion: nd, music: nm });
        }
        let am = &self.dance_stacks[stack].align;
        let cd = am.conv_dance.forward(g, dance);
        let cm = am.conv_music.forward(g, music);
        let temb = Array2::from_shape_vec((1, h), sinusoidal_embedding(t as f64, h)).expect("width");
        let temb = g.tape.leaf(temb);
        let s = g.tape.add(cd, cm);
        let s = g.tape.add_row(s, temb);
        let hdn = am.hidden.forward(g, s);
        let hdn = g.tape.silu(hdn);
        let gb = am.film.forward(g, hdn);
        let gamma = g.tape.slice_cols(gb, 0, h);
        let beta = g.tape.slice_cols(gb, h, h);
        let y = g.tape.mul(gamma, dance);
        Ok(g.tape.add(y, beta))
    }

    fn encode_music(&self, g: &mut Graph, music: ArrayView2<f64>) -> Var {
        let m = g.tape.leaf(music.to_owned());
        let mut m = self.music_in.forward(g, m);
        for (s, st) in self.music_stacks.iter().enumerate() {
            let h = st.mf_norm.forward(g, m);
            let a = self.mf_attention(g, s, h);
            m = g.tape.add(m, a);
            let h = st.mt_norm.forward(g, m);
            let a = self.mt_attention(g, s, h);
            m = g.tape.add(m, a);
            m = st.ff.residual(g, m);
        }
        self.music_out.forward(g, m)
    }

    fn spatial_residual(&self, g: &mut Graph, s: usize, x: Var) -> Var {
        let st = &self.dance_stacks[s];
        let n = g.tape.value(x).nrows();
        let h = st.ds_norm.forward(g, x);
        let tok = st.ds_split.forward(g, h);
        let tok = g.tape.reshape(tok, n * NUM_TOKENS, self.config.token_width);
        let a = self.ds_attention(g, s, tok);
        let a = g.tape.reshape(a, n, NUM_TOKENS * self.config.token_width);
        let a = st.ds_merge.forward(g, a);
        g.tape.add(x, a)
    }

    fn temporal_residual(&self, g: &mut Graph, s: usize, x: Var, mask: Option<Array2<f64>>) -> Var {
        let h = self.dance_stacks[s].dt_norm.forward(g, x);
        let a = self.dt_attention(g, s, h, mask);
        g.tape.add(x, a)
    }

    /// Builds the full forward graph, returning `(x_hat, v)` nodes.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        z_t: ArrayView2<f64>,
        t: usize,
        music: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let n = z_t.nrows();
        if z_t.ncols() != POSE_DIM {
            return Err(Error::shape("noisy pose width", POSE_DIM, z_t.ncols()).in_stage("input"));
        }
        if n == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 }.in_stage("input"));
        }
        if music.nrows() != n {
            return Err(Error::Alignment {
                motion: n,
                music: music.nrows(),
            }
            .in_stage("input"));
        }
        if music.ncols() != self.config.music_width {
            return Err(Error::shape("music width", self.config.music_width, music.ncols()).in_stage("music encoder"));
        }
        let ctx = self.encode_music(g, music);

        let z = g.tape.leaf(z_t.to_owned());
        let tokens = self.tokenize(g, z);
        let mut x = self.embed.forward(g, tokens);
        for s in 0..self.dance_stacks.len() {
            let mask = match mode {
                Mode::Eval => None,
                Mode::Train { mask_seed } => {
                    frame_mask(n, self.config.mask_ratio, mask_seed.wrapping_add(s as u64))
                }
            };
            x = match self.config.block_order {
                BlockOrder::SpatialFirst => {
                    let x = self.spatial_residual(g, s, x);
                    self.temporal_residual(g, s, x, mask)
                }
                BlockOrder::TemporalFirst => {
                    let x = self.temporal_residual(g, s, x, mask);
                    self.spatial_residual(g, s, x)
                }
            };
            let st = &self.dance_stacks[s];
            let h = st.cross_norm.forward(g, x);
            let spec = AttentionSpec::new(self.config.heads, 1, n, n);
            let a = st.cross.attend(g, h, ctx, ctx, spec);
            x = g.tape.add(x, a);
            x = self
                .alignment_module(g, s, x, ctx, t)
                .map_err(|e| e.in_stage("alignment module"))?;
            x = st.ff.residual(g, x);
        }
        let y = self.out_norm.forward(g, x);
        let x_hat = self.head_x.forward(g, y);
        let v = self.head_v.forward(g, y);
        let v = g.tape.sigmoid(v);
        Ok((x_hat, v))
    }

    /// Inference-mode prediction.
    pub fn predict(&self, z_t: ArrayView2<f64>, t: usize, music: ArrayView2<f64>) -> Result<ModelOutput> {
        self.forward(z_t, t, music, Mode::Eval)
    }

    pub fn forward(&self, z_t: ArrayView2<f64>, t: usize, music: ArrayView2<f64>, mode: Mode) -> Result<ModelOutput> {
        let mut g = Graph::new(&self.params);
        let (x_hat, v) = self.forward_graph(&mut g, z_t, t, music, mode)?;
        ModelOutput::new(g.tape.value(x_hat).clone(), g.tape.value(v).clone())
    }

    /// Replaces the parameter store (e.g. after loading a checkpoint).
    pub(crate) fn with_params(mut self, params: ParamStore) -> Self {
        self.params = params;
        self
    }
}

fn temporal_attention(g: &mut Graph, w: &Projections, x: Var, heads: usize, mask: Option<Array2<f64>>) -> Var {
    let (n, h) = g.tape.value(x).dim();
    let pe = g.tape.leaf(positional_encoding(n, h));
    let qk = g.tape.add(x, pe);
    let spec = AttentionSpec::new(heads, 1, n, n).with_mask(mask);
    w.attend(g, qk, qk, x, spec)
}

impl Denoiser for PopDg {
    fn denoise(&self, z_t: ArrayView2<f64>, t: usize, music: &MusicFeatures) -> Result<ModelOutput> {
        self.predict(z_t, t, music.view())
    }
}

#[cfg(test)]
mod tests;
