//! Tiny vision transformer with a parallel bottleneck adapter in every block.
//!
//! Blocks are pre-LN. The adapter sits beside the MLP and reads the same
//! normalized input:
//! `h = h′ + MLP(LN(h′)) + s·ReLU(LN(h′)·W_down)·W_up`.
//! A batch of images is processed as one stacked token matrix; attention is
//! the only per-image step.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// `d̂`
    pub adapter_dim: usize,
    pub adapters: bool,
    pub adapter_scale_init: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            depth: 2,
            width: 64,
            heads: 4,
            adapter_dim: 16,
            adapters: true,
            adapter_scale_init: 0.1,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::Config("depth, width and heads must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.adapters && (self.adapter_dim == 0 || self.adapter_dim >= self.width) {
            return Err(Error::Config(format!(
                "adapter_dim {} must satisfy 0 < d̂ < d′ = {}",
                self.adapter_dim, self.width
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g + 1
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Full,
    Peft,
}

#[derive(Clone, Debug)]
pub struct AdapterBranch {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: ParamId,
    pub enabled: bool,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub adapter: AdapterBranch,
}

#[derive(Clone, Debug)]
pub struct TinyVit {
    pub cfg: VitConfig,
    pub out_dim: usize,
    pub patch_proj: (ParamId, ParamId),
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_final: (ParamId, ParamId),
    pub head_proj: ParamId,
}

/// Per-parameter trainable flags after [`TinyVit::apply_peft`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub flags: Vec<(ParamId, bool)>,
}

impl FreezeMask {
    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.flags.iter().filter(|(_, t)| *t).map(|(id, _)| store.value(*id).numel()).sum()
    }

    pub fn frozen_count(&self, store: &ParamStore) -> usize {
        self.flags.iter().filter(|(_, t)| !*t).map(|(id, _)| store.value(*id).numel()).sum()
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    counter: u64,
}

impl Init<'_> {
    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        self.store.add(name, value, true, ParamGroup::Backbone)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        self.counter += 1;
        let w = rng::glorot(&mut rng::stream(self.seed, "vit.linear", self.counter), fan_in, fan_out);
        (self.add(format!("{name}.w"), w), self.add(format!("{name}.b"), Tensor::zeros(&[fan_out])))
    }

    fn norm(&mut self, name: &str, width: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{name}.gain"), Tensor::ones(&[width])),
            self.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        )
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        self.counter += 1;
        let t = rng::normal(&mut rng::stream(self.seed, "vit.normal", self.counter), shape, std);
        self.add(name, t)
    }
}

/// `H × W × 3` image to `T × 3p²` patch rows, row-major over patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || patch == 0 || !s[0].is_multiple_of(patch) || !s[1].is_multiple_of(patch) {
        return Err(Error::dim("patchify", s, &[patch, patch, 3]));
    }
    let (h, w) = (s[0], s[1]);
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(h * w * 3);
    let src = image.data();
    for pi in 0..gh {
        for pj in 0..gw {
            for r in 0..patch {
                let start = ((pi * patch + r) * w + pj * patch) * 3;
                out.extend_from_slice(&src[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * 3], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = (h / patch, w / patch);
    if patches.shape() != [gh * gw, patch * patch * 3] {
        return Err(Error::dim("unpatchify", patches.shape(), &[gh * gw, patch * patch * 3]));
    }
    let mut img = Tensor::zeros(&[h, w, 3]);
    for t in 0..gh * gw {
        let (pi, pj) = (t / gw, t % gw);
        for r in 0..patch {
            let dst = ((pi * patch + r) * w + pj * patch) * 3;
            img.data_mut()[dst..dst + patch * 3].copy_from_slice(&patches.row(t)[r * patch * 3..(r + 1) * patch * 3]);
        }
    }
    Ok(img)
}

fn affine(tape: &mut Tape, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, store: &ParamStore, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
    let g = tape.param(store, g);
    let b = tape.param(store, b);
    let n = tape.layer_norm(x)?;
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

impl TinyVit {
    pub fn new(store: &mut ParamStore, cfg: VitConfig, out_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut init = Init { store, seed, counter: 0 };
        let patch_proj = init.linear("vit.patch", cfg.patch_features(), d);
        let cls_token = init.normal("vit.cls".into(), &[1, d], 0.02);
        let pos_embed = init.normal("vit.pos".into(), &[cfg.tokens(), d], 0.02);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("vit.block{l}");
            let ln1 = init.norm(&format!("{p}.ln1"), d);
            let q = init.linear(&format!("{p}.q"), d, d);
            let k = init.linear(&format!("{p}.k"), d, d);
            let v = init.linear(&format!("{p}.v"), d, d);
            let o = init.linear(&format!("{p}.o"), d, d);
            let ln2 = init.norm(&format!("{p}.ln2"), d);
            let fc1 = init.linear(&format!("{p}.fc1"), d, 4 * d);
            let fc2 = init.linear(&format!("{p}.fc2"), 4 * d, d);
            let dhat = cfg.adapter_dim.max(1);
            init.counter += 1;
            let down = rng::glorot(&mut rng::stream(seed, "vit.adapter", init.counter), d, dhat);
            let down = init.add(format!("{p}.adapter.down"), down);
            let up = init.add(format!("{p}.adapter.up"), Tensor::zeros(&[dhat, d]));
            let scale = init.add(format!("{p}.adapter.scale"), Tensor::scalar(cfg.adapter_scale_init));
            if !cfg.adapters {
                for id in [down, up, scale] {
                    init.store.set_trainable(id, false);
                }
            }
            blocks.push(EncoderBlock {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                fc1,
                fc2,
                adapter: AdapterBranch {
                    down,
                    up,
                    scale,
                    enabled: cfg.adapters,
                },
            });
        }
        let ln_final = init.norm("vit.ln_final", d);
        init.counter += 1;
        let head = rng::glorot(&mut rng::stream(seed, "vit.head", init.counter), d, out_dim);
        let head_proj = init.add("vit.head_proj".into(), head);
        Ok(Self {
            cfg,
            out_dim,
            patch_proj,
            cls_token,
            pos_embed,
            blocks,
            ln_final,
            head_proj,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_proj.0, self.patch_proj.1, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            for (x, y) in [b.ln1, b.q, b.k, b.v, b.o, b.ln2, b.fc1, b.fc2] {
                ids.extend([x, y]);
            }
            ids.extend([b.adapter.down, b.adapter.up, b.adapter.scale]);
        }
        ids.extend([self.ln_final.0, self.ln_final.1, self.head_proj]);
        ids
    }

    fn adapter_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.adapter.down, b.adapter.up, b.adapter.scale])
            .collect()
    }

    /// Full: every encoder parameter trainable. PEFT: only the adapters and
    /// the output projection.
    pub fn apply_peft(&self, store: &mut ParamStore, mode: TuneMode) -> Result<FreezeMask> {
        if mode == TuneMode::Peft && !self.cfg.adapters {
            return Err(Error::Config("peft mode requires adapters to be enabled".into()));
        }
        let adapters = self.adapter_ids();
        let mut flags = Vec::new();
        for id in self.param_ids() {
            let trainable = match mode {
                TuneMode::Full => self.cfg.adapters || !adapters.contains(&id),
                TuneMode::Peft => adapters.contains(&id) || id == self.head_proj,
            };
            store.set_trainable(id, trainable);
            flags.push((id, trainable));
        }
        Ok(FreezeMask { flags })
    }

    /// `depth·(2·d′·d̂ + 1) + d′·d`
    pub fn peft_trainable_formula(&self) -> usize {
        let (d, dhat) = (self.cfg.width, self.cfg.adapter_dim);
        self.cfg.depth * (2 * d * dhat + 1) + d * self.out_dim
    }

    /// Stacked patch rows for a batch of `B × H × W × 3` images.
    fn batch_patches(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        let side = self.cfg.image_size;
        if s.len() != 4 || s[1] != side || s[2] != side || s[3] != 3 {
            return Err(Error::dim("encode_image", s, &[s.first().copied().unwrap_or(0), side, side, 3]));
        }
        let per = side * side * 3;
        let mut data = Vec::with_capacity(images.numel());
        for b in 0..s[0] {
            let img = Tensor::new(vec![side, side, 3], images.data()[b * per..(b + 1) * per].to_vec())?;
            data.extend(patchify(&img, self.cfg.patch_size)?.into_data());
        }
        let t = self.cfg.tokens() - 1;
        Tensor::new(vec![s[0] * t, self.cfg.patch_features()], data)
    }

    /// Token matrix `B(T+1) × d′` after patch embedding and positions.
    fn embed(&self, tape: &mut Tape, store: &ParamStore, images: &Tensor) -> Result<Var> {
        let b = images.shape()[0];
        let t1 = self.cfg.tokens();
        let patches = tape.constant(self.batch_patches(images)?);
        let e = affine(tape, store, patches, self.patch_proj)?;
        let cls = tape.param(store, self.cls_token);
        let stacked = tape.concat_rows(&[cls, e])?;
        // row 0 is the class token; patch k of image i sits at 1 + i·T + k
        let mut order = Vec::with_capacity(b * t1);
        for i in 0..b {
            order.push(0);
            order.extend((0..t1 - 1).map(|k| 1 + i * (t1 - 1) + k));
        }
        let tokens = tape.select_rows(stacked, &order)?;
        let pos = tape.param(store, self.pos_embed);
        let tiled: Vec<usize> = (0..b).flat_map(|_| 0..t1).collect();
        let pos = tape.select_rows(pos, &tiled)?;
        tape.add(tokens, pos)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        block: &EncoderBlock,
        batch: usize,
        maps: &mut Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let t1 = self.cfg.tokens();
        let dh = self.cfg.width / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = affine(tape, store, x, block.q)?;
        let k = affine(tape, store, x, block.k)?;
        let v = affine(tape, store, x, block.v)?;
        let mut per_image = Vec::with_capacity(batch);
        for i in 0..batch {
            let (qi, ki, vi) = (
                tape.slice_rows(q, i * t1, t1)?,
                tape.slice_rows(k, i * t1, t1)?,
                tape.slice_rows(v, i * t1, t1)?,
            );
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qh = tape.slice_cols(qi, h * dh, dh)?;
                let kh = tape.slice_cols(ki, h * dh, dh)?;
                let vh = tape.slice_cols(vi, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, scale);
                let a = tape.row_softmax(s, 1.0)?;
                if let Some(m) = maps.as_deref_mut() {
                    m.push(a);
                }
                heads.push(tape.matmul(a, vh)?);
            }
            per_image.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? });
        }
        let cat = if per_image.len() == 1 { per_image[0] } else { tape.concat_rows(&per_image)? };
        affine(tape, store, cat, block.o)
    }

    /// Adapter-augmented MLP step on the post-attention state `h′`.
    pub fn adaptmlp_forward(&self, tape: &mut Tape, store: &ParamStore, h_prime: Var, block: &EncoderBlock) -> Result<Var> {
        let n = norm(tape, store, h_prime, block.ln2)?;
        let m = affine(tape, store, n, block.fc1)?;
        let m = tape.gelu(m);
        let m = affine(tape, store, m, block.fc2)?;
        let mut h = tape.add(h_prime, m)?;
        if block.adapter.enabled {
            let down = tape.param(store, block.adapter.down);
            let up = tape.param(store, block.adapter.up);
            let s = tape.param(store, block.adapter.scale);
            let a = tape.matmul(n, down)?;
            let a = tape.relu(a);
            let a = tape.matmul(a, up)?;
            let a = tape.mul_scalar_var(a, s)?;
            h = tape.add(h, a)?;
        }
        Ok(h)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &Tensor,
        mut maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let mut x = self.embed(tape, store, images)?;
        for block in &self.blocks {
            let n = norm(tape, store, x, block.ln1)?;
            let a = self.attention(tape, store, n, block, batch, &mut maps)?;
            let h_prime = tape.add(x, a)?;
            x = self.adaptmlp_forward(tape, store, h_prime, block)?;
        }
        let t1 = self.cfg.tokens();
        let cls_rows: Vec<usize> = (0..batch).map(|i| i * t1).collect();
        let cls = tape.select_rows(x, &cls_rows)?;
        let cls = norm(tape, store, cls, self.ln_final)?;
        let head = tape.param(store, self.head_proj);
        tape.matmul(cls, head)
    }

    /// Visual embeddings `B × d` for a batch of `B × H × W × 3` images.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: &Tensor) -> Result<Var> {
        self.forward_impl(tape, store, images, None)
    }

    /// Forward that also returns every attention map (`(T+1) × (T+1)` per
    /// image, head and block).
    pub fn forward_with_attention(&self, tape: &mut Tape, store: &ParamStore, images: &Tensor) -> Result<(Var, Vec<Var>)> {
        let mut maps = Vec::new();
        let out = self.forward_impl(tape, store, images, Some(&mut maps))?;
        Ok((out, maps))
    }

    /// Embedding of a single `H × W × 3` image.
    pub fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.reshape(&shape)?;
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, store, &batch)?;
        let v = tape.value(out);
        Tensor::new(vec![v.cols()], v.data().to_vec())
    }
}
