//! The multi-modal diffusion transformer.
//!
//! Every modality is patchified on the same grid, the per-location tokens of
//! all modalities are concatenated and fused by an MLP into one token, so the
//! trunk always sees `N` tokens no matter how many modalities are registered.
//! Conditioning is the sum of a fused per-modality time embedding, a class
//! embedding (with a null row for guidance) and a task embedding; it drives
//! adaptive layer-norm modulation in every block. Each modality has its own
//! decoding head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg, Error, Result};
use crate::interpolant::{num_tasks, ClassLabel, TimeVector};
use crate::modality::{ChannelPlane, ModalityRegistry, ModalitySpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// 1-based block index whose output feeds the alignment projector.
    pub align_layer: usize,
    pub mlp_ratio: usize,
    /// Sinusoidal embedding width per modality time.
    pub time_freq_dim: usize,
    pub fusion_hidden: usize,
    /// Output width of the alignment projector (the feature provider's width).
    pub feature_dim: usize,
    pub projector_hidden: usize,
    /// When false the task embedding is replaced by zeros.
    pub use_task_embedding: bool,
    /// adaLN-Zero initialization of modulation layers and head outputs.
    pub zero_init: bool,
    pub registry: ModalityRegistry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32x32 images, patch 2, 256 wide, 6 blocks, 8 heads, 10 classes.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 2,
            hidden_dim: 256,
            depth: 6,
            heads: 8,
            num_classes: 10,
            align_layer: 3,
            mlp_ratio: 4,
            time_freq_dim: 64,
            fusion_hidden: 256,
            feature_dim: 64,
            projector_hidden: 256,
            use_task_embedding: true,
            zero_init: true,
            registry: ModalityRegistry::standard(),
        }
    }

    /// Smallest useful configuration: 4x4 images (N = 4), width 8, 2 blocks.
    pub fn micro(registry: ModalityRegistry) -> Self {
        Self {
            image_size: 4,
            patch_size: 2,
            hidden_dim: 8,
            depth: 2,
            heads: 2,
            num_classes: 3,
            align_layer: 1,
            mlp_ratio: 2,
            time_freq_dim: 4,
            fusion_hidden: 8,
            feature_dim: 4,
            projector_hidden: 8,
            use_task_embedding: true,
            zero_init: false,
            registry,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tasks(&self) -> usize {
        num_tasks(self.registry.len())
    }

    pub fn token_dim(&self, modality: usize) -> usize {
        self.patch_size * self.patch_size * self.registry.get(modality).channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.align_layer == 0 || self.align_layer > self.depth {
            return bad(format!(
                "align layer {} must be in [1, {}]",
                self.align_layer, self.depth
            ));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.time_freq_dim < 2 || self.time_freq_dim % 2 != 0 {
            return bad("time frequency dim must be even and >= 2".into());
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("num_classes and mlp_ratio must be positive".into());
        }
        if [self.hidden_dim, self.fusion_hidden, self.feature_dim, self.projector_hidden]
            .contains(&0)
        {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ada: Linear,
    qkv: Linear,
    out: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Clone, Debug)]
struct HeadIds {
    ada: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct ModelIds {
    fusion1: Linear,
    fusion2: Linear,
    time1: Linear,
    time2: Linear,
    class_table: ParamId,
    task_table: ParamId,
    blocks: Vec<BlockIds>,
    heads: Vec<HeadIds>,
    proj1: Linear,
    proj2: Linear,
}

/// Per-modality patch tokens for a batch: `tokens[m]` is
/// `(batch * N) x (p^2 * C_m)`, sample-major, row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedTokens {
    pub batch: usize,
    pub tokens: Vec<Matrix>,
}

/// Conditioning for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningInput {
    pub times: TimeVector,
    pub class_label: ClassLabel,
    pub task_id: usize,
}

pub struct ForwardOutput {
    /// Per-modality velocity tokens, same layout as the input tokens.
    pub velocities: Vec<Var>,
    /// Trunk state after the alignment block, `(batch * N) x D`.
    pub hidden: Var,
    /// Sequence length seen by attention.
    pub attention_tokens: usize,
}

/// Parameter change made by modality surgery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamChange {
    /// Rows were appended below the existing `old_rows`.
    RowsAppended { old_rows: usize },
    /// The parameter was re-created (possibly with a new shape).
    Reinitialized,
    /// A parameter that did not exist before.
    Added,
}

#[derive(Clone, Debug)]
pub struct MmDiT {
    config: ModelConfig,
    ids: ModelIds,
    pos_embed: Matrix,
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let d = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

fn add_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
) -> Linear {
    let w = if zero {
        Matrix::zeros(fan_in, fan_out)
    } else {
        xavier(rng, fan_in, fan_out)
    };
    Linear {
        w: store.insert(format!("{name}.w"), w),
        b: store.insert(format!("{name}.b"), Matrix::zeros(1, fan_out)),
    }
}

fn lookup_linear(store: &ParamStore, name: &str) -> Result<Linear> {
    let get = |suffix: &str| {
        store
            .id(&format!("{name}.{suffix}"))
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}.{suffix}")))
    };
    Ok(Linear {
        w: get("w")?,
        b: get("b")?,
    })
}

/// Fixed 2-D sine-cosine position table, `N x D`.
fn position_table(grid: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let quarter = half / 2;
    let mut m = Matrix::zeros(grid * grid, dim);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = m.row_mut(gy * grid + gx);
            for (axis, pos) in [(0, gx as f64), (1, gy as f64)] {
                let base = axis * half;
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter.max(1) as f64);
                    row[base + i] = (pos * omega).sin();
                    row[base + quarter + i] = (pos * omega).cos();
                }
            }
        }
    }
    m
}

/// Sinusoidal embedding of a diffusion time in `[0, 1]`.
pub fn time_frequencies(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scaled = t * 1000.0;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (scaled * freq).cos();
        out[half + i] = (scaled * freq).sin();
    }
    out
}

/// `c = e_t + t_fused + y`.
pub fn build_conditioning(tape: &mut Tape, task: Var, time: Var, class: Var) -> Var {
    let c = tape.add(task, time);
    tape.add(c, class)
}

impl MmDiT {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let zero = config.zero_init;
        let fusion_in: usize = (0..config.registry.len()).map(|m| config.token_dim(m)).sum();
        let fusion1 = add_linear(&mut store, rng, "fusion.1", fusion_in, config.fusion_hidden, false);
        let fusion2 = add_linear(&mut store, rng, "fusion.2", config.fusion_hidden, d, false);

        let time_in = config.registry.len() * config.time_freq_dim;
        let time1 = Linear {
            w: store.insert("time.1.w", gaussian(rng, time_in, d, 0.02)),
            b: store.insert("time.1.b", Matrix::zeros(1, d)),
        };
        let time2 = Linear {
            w: store.insert("time.2.w", gaussian(rng, d, d, 0.02)),
            b: store.insert("time.2.b", Matrix::zeros(1, d)),
        };
        let class_table = store.insert(
            "class.table",
            gaussian(rng, config.num_classes + 1, d, 0.02),
        );
        let task_table = store.insert("task.table", gaussian(rng, config.num_tasks(), d, 0.02));

        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|l| BlockIds {
                ada: add_linear(&mut store, rng, &format!("blocks.{l}.ada"), d, 6 * d, zero),
                qkv: add_linear(&mut store, rng, &format!("blocks.{l}.qkv"), d, 3 * d, false),
                out: add_linear(&mut store, rng, &format!("blocks.{l}.out"), d, d, false),
                mlp1: add_linear(&mut store, rng, &format!("blocks.{l}.mlp1"), d, hidden, false),
                mlp2: add_linear(&mut store, rng, &format!("blocks.{l}.mlp2"), hidden, d, false),
            })
            .collect();
        let heads = (0..config.registry.len())
            .map(|m| Self::new_head(&mut store, rng, &config, m))
            .collect();
        let proj1 = add_linear(&mut store, rng, "proj.1", d, config.projector_hidden, false);
        let proj2 = add_linear(
            &mut store,
            rng,
            "proj.2",
            config.projector_hidden,
            config.feature_dim,
            false,
        );
        let pos_embed = position_table(config.grid(), d);
        let ids = ModelIds {
            fusion1,
            fusion2,
            time1,
            time2,
            class_table,
            task_table,
            blocks,
            heads,
            proj1,
            proj2,
        };
        Ok((
            Self {
                config,
                ids,
                pos_embed,
            },
            store,
        ))
    }

    fn new_head<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &ModelConfig,
        m: usize,
    ) -> HeadIds {
        let d = config.hidden_dim;
        let zero = config.zero_init;
        HeadIds {
            ada: add_linear(store, rng, &format!("heads.{m}.ada"), d, 2 * d, zero),
            out: add_linear(store, rng, &format!("heads.{m}.out"), d, config.token_dim(m), zero),
        }
    }

    /// Rebinds a model to an existing parameter store (e.g. from a checkpoint),
    /// checking every expected parameter exists with the expected shape.
    pub fn from_params(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (reference, ref_store) = Self::init(config, &mut rng)?;
        if ref_store.len() != store.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameters, found {}",
                ref_store.len(),
                store.len()
            )));
        }
        for (_, name, value) in ref_store.iter() {
            match store.by_name(name) {
                Some(v) if v.shape() == value.shape() => {}
                Some(v) => {
                    return Err(Error::Mismatch(format!(
                        "parameter {name} is {:?}, expected {:?}",
                        v.shape(),
                        value.shape()
                    )))
                }
                None => return Err(Error::Mismatch(format!("missing parameter {name}"))),
            }
        }
        let ids = ModelIds {
            fusion1: lookup_linear(store, "fusion.1")?,
            fusion2: lookup_linear(store, "fusion.2")?,
            time1: lookup_linear(store, "time.1")?,
            time2: lookup_linear(store, "time.2")?,
            class_table: store.id("class.table").expect("checked"),
            task_table: store.id("task.table").expect("checked"),
            blocks: (0..reference.config.depth)
                .map(|l| {
                    Ok(BlockIds {
                        ada: lookup_linear(store, &format!("blocks.{l}.ada"))?,
                        qkv: lookup_linear(store, &format!("blocks.{l}.qkv"))?,
                        out: lookup_linear(store, &format!("blocks.{l}.out"))?,
                        mlp1: lookup_linear(store, &format!("blocks.{l}.mlp1"))?,
                        mlp2: lookup_linear(store, &format!("blocks.{l}.mlp2"))?,
                    })
                })
                .collect::<Result<_>>()?,
            heads: (0..reference.config.registry.len())
                .map(|m| {
                    Ok(HeadIds {
                        ada: lookup_linear(store, &format!("heads.{m}.ada"))?,
                        out: lookup_linear(store, &format!("heads.{m}.out"))?,
                    })
                })
                .collect::<Result<_>>()?,
            proj1: lookup_linear(store, "proj.1")?,
            proj2: lookup_linear(store, "proj.2")?,
        };
        Ok(Self {
            config: reference.config,
            ids,
            pos_embed: reference.pos_embed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.config.registry
    }

    /// Parameter ids of modality `m`'s decoding head.
    pub fn head_params(&self, m: usize) -> Vec<ParamId> {
        let h = &self.ids.heads[m];
        vec![h.ada.w, h.ada.b, h.out.w, h.out.b]
    }

    pub fn projector_params(&self) -> Vec<ParamId> {
        vec![
            self.ids.proj1.w,
            self.ids.proj1.b,
            self.ids.proj2.w,
            self.ids.proj2.b,
        ]
    }

    /// Parameters of the shared trunk blocks.
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.ids
            .blocks
            .iter()
            .flat_map(|b| {
                [b.ada, b.qkv, b.out, b.mlp1, b.mlp2]
                    .into_iter()
                    .flat_map(|l| [l.w, l.b])
            })
            .collect()
    }

    pub fn fusion_first_layer(&self) -> (ParamId, ParamId) {
        (self.ids.fusion1.w, self.ids.fusion1.b)
    }

    pub fn fusion_second_layer(&self) -> (ParamId, ParamId) {
        (self.ids.fusion2.w, self.ids.fusion2.b)
    }

    /// Concatenates same-location tokens of every modality (registry order) and
    /// projects them to one `D`-wide token per location.
    pub fn fuse_tokens(&self, tape: &mut Tape, grouped: &GroupedTokens) -> Result<Var> {
        let reg = &self.config.registry;
        if grouped.tokens.len() != reg.len() {
            return arg(format!(
                "expected tokens for {} modalities, got {}",
                reg.len(),
                grouped.tokens.len()
            ));
        }
        let rows = grouped.batch * self.config.num_tokens();
        let mut parts = Vec::with_capacity(reg.len());
        for (m, t) in grouped.tokens.iter().enumerate() {
            if t.shape() != (rows, self.config.token_dim(m)) {
                return arg(format!(
                    "modality {} tokens are {:?}, expected {:?}",
                    reg.get(m).name,
                    t.shape(),
                    (rows, self.config.token_dim(m))
                ));
            }
            parts.push(tape.constant(t.clone()));
        }
        let cat = tape.concat_cols(&parts);
        let h = self.ids.fusion1.apply(tape, cat);
        let h = tape.silu(h);
        Ok(self.ids.fusion2.apply(tape, h))
    }

    /// Fused time embedding, one `D`-wide row per sample.
    pub fn embed_time_vectors(&self, tape: &mut Tape, times: &[TimeVector]) -> Result<Var> {
        let m = self.config.registry.len();
        let f = self.config.time_freq_dim;
        let mut freq = Matrix::zeros(times.len(), m * f);
        for (b, tv) in times.iter().enumerate() {
            if tv.len() != m {
                return arg(format!("time vector has {} entries, expected {m}", tv.len()));
            }
            for (k, &t) in tv.0.iter().enumerate() {
                if !(0.0..=1.0).contains(&t) {
                    return arg(format!("time {t} outside [0, 1]"));
                }
                freq.row_mut(b)[k * f..(k + 1) * f].copy_from_slice(&time_frequencies(t, f));
            }
        }
        let x = tape.constant(freq);
        let h = self.ids.time1.apply(tape, x);
        let h = tape.silu(h);
        Ok(self.ids.time2.apply(tape, h))
    }

    fn conditioning(&self, tape: &mut Tape, conds: &[ConditioningInput]) -> Result<Var> {
        let cfg = &self.config;
        let mut labels = Vec::with_capacity(conds.len());
        let mut tasks = Vec::with_capacity(conds.len());
        for c in conds {
            labels.push(match c.class_label {
                Some(k) if (k as usize) < cfg.num_classes => k as usize,
                Some(k) => return arg(format!("class label {k} out of range")),
                None => cfg.num_classes,
            });
            if c.task_id >= cfg.num_tasks() {
                return arg(format!("task id {} out of range", c.task_id));
            }
            tasks.push(c.task_id);
        }
        let times: Vec<TimeVector> = conds.iter().map(|c| c.times.clone()).collect();
        let t_fused = self.embed_time_vectors(tape, &times)?;
        let class_table = tape.param(self.ids.class_table);
        let y = tape.gather_rows(class_table, &labels);
        let e_t = if cfg.use_task_embedding {
            let task_table = tape.param(self.ids.task_table);
            tape.gather_rows(task_table, &tasks)
        } else {
            tape.constant(Matrix::zeros(conds.len(), cfg.hidden_dim))
        };
        Ok(build_conditioning(tape, e_t, t_fused, y))
    }

    fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var, group: usize) -> Var {
        let h = tape.layer_norm(x);
        let s = tape.offset(scale, 1.0);
        let h = tape.group_mul(h, s, group);
        tape.group_add(h, shift, group)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        grouped: &GroupedTokens,
        conds: &[ConditioningInput],
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if conds.len() != grouped.batch {
            return arg(format!(
                "{} conditioning rows for a batch of {}",
                conds.len(),
                grouped.batch
            ));
        }
        let n = cfg.num_tokens();
        let d = cfg.hidden_dim;
        let x = self.fuse_tokens(tape, grouped)?;
        let pos = tape.constant(self.pos_embed.clone());
        let mut x = tape.tile_add(x, pos);

        let c = self.conditioning(tape, conds)?;
        let c_act = tape.silu(c);

        let mut hidden = None;
        let mut attention_tokens = 0;
        for (l, block) in self.ids.blocks.iter().enumerate() {
            let ada = block.ada.apply(tape, c_act);
            let chunk: Vec<Var> = (0..6).map(|i| tape.slice_cols(ada, i * d, d)).collect();
            let h = Self::modulate(tape, x, chunk[0], chunk[1], n);
            let qkv = block.qkv.apply(tape, h);
            attention_tokens = tape.value(qkv).rows() / grouped.batch;
            let a = tape.attention(qkv, grouped.batch, cfg.heads);
            let a = block.out.apply(tape, a);
            let a = tape.group_mul(a, chunk[2], n);
            x = tape.add(x, a);

            let h = Self::modulate(tape, x, chunk[3], chunk[4], n);
            let h = block.mlp1.apply(tape, h);
            let h = tape.gelu(h);
            let h = block.mlp2.apply(tape, h);
            let h = tape.group_mul(h, chunk[5], n);
            x = tape.add(x, h);
            if l + 1 == cfg.align_layer {
                hidden = Some(x);
            }
        }

        let velocities = self
            .ids
            .heads
            .iter()
            .map(|head| {
                let ada = head.ada.apply(tape, c_act);
                let shift = tape.slice_cols(ada, 0, d);
                let scale = tape.slice_cols(ada, d, d);
                let h = Self::modulate(tape, x, shift, scale, n);
                head.out.apply(tape, h)
            })
            .collect();
        Ok(ForwardOutput {
            velocities,
            hidden: hidden.expect("align layer validated"),
            attention_tokens,
        })
    }

    /// Projects trunk hidden states into the feature provider's space.
    pub fn project(&self, tape: &mut Tape, hidden: Var) -> Var {
        let h = self.ids.proj1.apply(tape, hidden);
        let h = tape.silu(h);
        self.ids.proj2.apply(tape, h)
    }

    /// Appends a modality: widens the fusion and time-embedding inputs with
    /// freshly initialized rows, adds a task row and a new decoding head.
    /// Existing parameter values are left untouched.
    pub fn append_modality<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        spec: ModalitySpec,
        rng: &mut R,
    ) -> Result<Vec<(ParamId, ParamChange)>> {
        let mut config = self.config.clone();
        let m = config.registry.append(spec)?;
        let mut changes = Vec::new();

        let p2c = config.token_dim(m);
        let w = store.get(self.ids.fusion1.w);
        let old_rows = w.rows();
        let fresh = xavier(rng, old_rows + p2c, w.cols());
        let extra = Matrix::from_fn(p2c, w.cols(), |r, c| fresh.get(old_rows + r, c));
        let grown = w.vstack(&extra);
        store.reshape(self.ids.fusion1.w, grown);
        changes.push((self.ids.fusion1.w, ParamChange::RowsAppended { old_rows }));

        let w = store.get(self.ids.time1.w);
        let old_rows = w.rows();
        let extra = gaussian(rng, config.time_freq_dim, w.cols(), 0.02);
        let grown = w.vstack(&extra);
        store.reshape(self.ids.time1.w, grown);
        changes.push((self.ids.time1.w, ParamChange::RowsAppended { old_rows }));

        let t = store.get(self.ids.task_table);
        let old_rows = t.rows();
        let extra = gaussian(rng, config.num_tasks() - old_rows, t.cols(), 0.02);
        let grown = t.vstack(&extra);
        store.reshape(self.ids.task_table, grown);
        changes.push((self.ids.task_table, ParamChange::RowsAppended { old_rows }));

        let head = Self::new_head(store, rng, &config, m);
        for id in [head.ada.w, head.ada.b, head.out.w, head.out.b] {
            changes.push((id, ParamChange::Added));
        }
        self.ids.heads.push(head);
        self.config = config;
        Ok(changes)
    }

    /// Puts a new modality in an existing slot. The slot's head, fusion slice
    /// and time/task embeddings are reused; when the channel count differs the
    /// head output and the fusion input rows of that slot are re-created.
    pub fn replace_modality<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        slot: usize,
        spec: ModalitySpec,
        rng: &mut R,
    ) -> Result<Vec<(ParamId, ParamChange)>> {
        let mut config = self.config.clone();
        let old_dim = config.token_dim(slot.min(config.registry.len().saturating_sub(1)));
        config.registry.replace(slot, spec)?;
        let new_dim = config.token_dim(slot);
        let mut changes = Vec::new();
        if old_dim != new_dim {
            let start: usize = (0..slot).map(|k| config.token_dim(k)).sum();
            let w = store.get(self.ids.fusion1.w).clone();
            let cols = w.cols();
            let fresh = xavier(rng, w.rows() - old_dim + new_dim, cols);
            let mut rows = Vec::new();
            for r in 0..start {
                rows.extend_from_slice(w.row(r));
            }
            for r in 0..new_dim {
                rows.extend_from_slice(fresh.row(start + r));
            }
            for r in start + old_dim..w.rows() {
                rows.extend_from_slice(w.row(r));
            }
            let total = rows.len() / cols;
            store.reshape(self.ids.fusion1.w, Matrix::from_vec(total, cols, rows));
            changes.push((self.ids.fusion1.w, ParamChange::Reinitialized));

            let head = self.ids.heads[slot].out;
            let d = config.hidden_dim;
            let w = if config.zero_init {
                Matrix::zeros(d, new_dim)
            } else {
                xavier(rng, d, new_dim)
            };
            store.reshape(head.w, w);
            store.reshape(head.b, Matrix::zeros(1, new_dim));
            changes.push((head.w, ParamChange::Reinitialized));
            changes.push((head.b, ParamChange::Reinitialized));
        }
        self.config = config;
        Ok(changes)
    }
}

/// Splits an `H x W x C` plane into `p x p` patches in row-major patch order;
/// each token is the patch's pixels row-major with channels innermost.
pub fn patchify(plane: &ChannelPlane, patch: usize) -> Result<Matrix> {
    if patch == 0 || plane.height % patch != 0 || plane.width % patch != 0 {
        return arg(format!(
            "{}x{} plane not divisible by patch {patch}",
            plane.height, plane.width
        ));
    }
    let (gh, gw, c) = (plane.height / patch, plane.width / patch, plane.channels);
    let dim = patch * patch * c;
    let mut out = Matrix::zeros(gh * gw, dim);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = plane.pixel(py * patch + dy, px * patch + dx);
                    row[k..k + c].copy_from_slice(src);
                    k += c;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for the rows `[start, start + N)` of `tokens`.
pub fn unpatchify(
    tokens: &Matrix,
    start: usize,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<ChannelPlane> {
    let (gh, gw) = (height / patch, width / patch);
    if tokens.cols() != patch * patch * channels || start + gh * gw > tokens.rows() {
        return arg("token matrix does not match the requested plane");
    }
    let mut plane = ChannelPlane::zeros(height, width, channels);
    for py in 0..gh {
        for px in 0..gw {
            let row = tokens.row(start + py * gw + px);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let i = ((py * patch + dy) * width + px * patch + dx) * channels;
                    plane.data[i..i + channels].copy_from_slice(&row[k..k + channels]);
                    k += channels;
                }
            }
        }
    }
    Ok(plane)
}

/// Patchifies a batch given as `planes[modality][sample]`.
pub fn patchify_batch(planes: &[Vec<ChannelPlane>], config: &ModelConfig) -> Result<GroupedTokens> {
    let reg = &config.registry;
    if planes.len() != reg.len() {
        return arg(format!(
            "expected {} modalities, got {}",
            reg.len(),
            planes.len()
        ));
    }
    let batch = planes[0].len();
    let n = config.num_tokens();
    let mut tokens = Vec::with_capacity(planes.len());
    for (m, samples) in planes.iter().enumerate() {
        if samples.len() != batch {
            return arg("modalities disagree on batch size");
        }
        let dim = config.token_dim(m);
        let mut data = Vec::with_capacity(batch * n * dim);
        for p in samples {
            if p.height != config.image_size
                || p.width != config.image_size
                || p.channels != reg.get(m).channels
            {
                return arg(format!(
                    "{} plane is {}x{}x{}, expected {}x{}x{}",
                    reg.get(m).name,
                    p.height,
                    p.width,
                    p.channels,
                    config.image_size,
                    config.image_size,
                    reg.get(m).channels
                ));
            }
            data.extend_from_slice(patchify(p, config.patch_size)?.data());
        }
        tokens.push(Matrix::from_vec(batch * n, dim, data));
    }
    Ok(GroupedTokens { batch, tokens })
}

/// Inverse of [`patchify_batch`] for one modality's token matrix.
pub fn unpatchify_batch(
    tokens: &Matrix,
    batch: usize,
    channels: usize,
    config: &ModelConfig,
) -> Result<Vec<ChannelPlane>> {
    let n = config.num_tokens();
    (0..batch)
        .map(|b| {
            unpatchify(
                tokens,
                b * n,
                config.image_size,
                config.image_size,
                channels,
                config.patch_size,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_modality() -> ModalityRegistry {
        ModalityRegistry::new(vec![ModalitySpec::rgb(), ModalitySpec::depth()]).unwrap()
    }

    fn random_planes(cfg: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<ChannelPlane>> {
        cfg.registry
            .iter()
            .map(|spec| {
                (0..batch)
                    .map(|_| {
                        let n = cfg.image_size * cfg.image_size * spec.channels;
                        ChannelPlane::new(
                            cfg.image_size,
                            cfg.image_size,
                            spec.channels,
                            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        )
                        .unwrap()
                    })
                    .collect()
            })
            .collect()
    }

    fn conds(cfg: &ModelConfig, batch: usize, task_id: usize, label: ClassLabel) -> Vec<ConditioningInput> {
        (0..batch)
            .map(|b| ConditioningInput {
                times: TimeVector((0..cfg.registry.len()).map(|m| (0.1 + 0.2 * (b + m) as f64).min(1.0)).collect()),
                class_label: label,
                task_id,
            })
            .collect()
    }

    #[test]
    fn patchify_example_and_inverse() {
        let plane = ChannelPlane::new(4, 4, 1, (1..=16).map(|v| v as f64).collect()).unwrap();
        let tokens = patchify(&plane, 2).unwrap();
        assert_eq!(tokens.shape(), (4, 4));
        assert_eq!(tokens.row(0), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(tokens.row(3), &[11.0, 12.0, 15.0, 16.0]);
        let back = unpatchify(&tokens, 0, 4, 4, 1, 2).unwrap();
        assert_eq!(back, plane);
        assert!(patchify(&ChannelPlane::zeros(3, 4, 1), 2).is_err());
    }

    #[test]
    fn desk_config_has_256_tokens() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_tokens(), 256);
        assert_eq!(cfg.num_tasks(), 5);
        assert_eq!(cfg.align_layer, cfg.depth.div_ceil(2));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::micro(two_modality());
        cfg.align_layer = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::micro(two_modality());
        cfg.image_size = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_fusion_weights_give_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::micro(two_modality());
        let (model, mut store) = MmDiT::init(cfg.clone(), &mut rng).unwrap();
        let (w2, b2) = model.fusion_second_layer();
        let (w, h) = store.get(w2).shape();
        store.set(w2, Matrix::zeros(w, h));
        store.set(b2, Matrix::zeros(1, h));
        let grouped = patchify_batch(&random_planes(&cfg, 2, &mut rng), &cfg).unwrap();
        let mut tape = Tape::new(&store);
        let fused = model.fuse_tokens(&mut tape, &grouped).unwrap();
        assert!(tape.value(fused).data().iter().all(|v| *v == 0.0));
        assert_eq!(tape.value(fused).rows(), 2 * cfg.num_tokens());
    }

    #[test]
    fn fusion_slices_are_separable_with_identity_first_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = ModelConfig::micro(two_modality());
        let fusion_in = cfg.token_dim(0) + cfg.token_dim(1);
        cfg.fusion_hidden = fusion_in;
        let (model, mut store) = MmDiT::init(cfg.clone(), &mut rng).unwrap();
        let (w1, b1) = model.fusion_first_layer();
        store.set(w1, Matrix::from_fn(fusion_in, fusion_in, |r, c| if r == c { 1.0 } else { 0.0 }));
        store.set(b1, Matrix::zeros(1, fusion_in));
        let planes = random_planes(&cfg, 1, &mut rng);
        let grouped = patchify_batch(&planes, &cfg).unwrap();
        let mut doubled = grouped.clone();
        doubled.tokens[1].scale_in_place(2.0);

        let hidden = |g: &GroupedTokens| {
            let mut tape = Tape::new(&store);
            let cat: Vec<Var> = g.tokens.iter().map(|t| tape.constant(t.clone())).collect();
            let cat = tape.concat_cols(&cat);
            let w = tape.param(w1);
            let b = tape.param(b1);
            let h = tape.matmul(cat, w);
            let h = tape.add_row(h, b);
            tape.value(h).clone()
        };
        let (a, b) = (hidden(&grouped), hidden(&doubled));
        let split = cfg.token_dim(0);
        for r in 0..a.rows() {
            assert_eq!(&a.row(r)[..split], &b.row(r)[..split]);
            for c in split..fusion_in {
                assert_eq!(b.get(r, c), 2.0 * a.get(r, c));
            }
        }
    }

    #[test]
    fn time_embedding_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig::micro(ModalityRegistry::standard());
        let (model, store) = MmDiT::init(cfg, &mut rng).unwrap();
        let embed = |tv: TimeVector| {
            let mut tape = Tape::new(&store);
            let v = model.embed_time_vectors(&mut tape, &[tv]).unwrap();
            tape.value(v).clone()
        };
        let a = embed(TimeVector(vec![0.5, 0.9, 0.9, 0.9]));
        assert_eq!(a, embed(TimeVector(vec![0.5, 0.9, 0.9, 0.9])));
        let b = embed(TimeVector(vec![0.9, 0.5, 0.9, 0.9]));
        assert!(a.max_abs_diff(&b) > 1e-9);
        let zeros = embed(TimeVector::uniform(0.0, 4));
        let ones = embed(TimeVector::uniform(1.0, 4));
        assert!(zeros.max_abs_diff(&ones) > 1e-9);
    }

    #[test]
    fn conditioning_is_a_sum() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let e = tape.constant(Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]));
        let t = tape.constant(Matrix::from_vec(1, 3, vec![0.0, 2.0, 0.0]));
        let y = tape.constant(Matrix::from_vec(1, 3, vec![0.0, 0.0, 3.0]));
        let c = build_conditioning(&mut tape, e, t, y);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let c2 = build_conditioning(&mut tape, y, e, t);
        assert_eq!(tape.value(c2).data(), tape.value(c).data());
        let z = tape.constant(Matrix::zeros(1, 3));
        let c3 = build_conditioning(&mut tape, z, t, z);
        assert_eq!(tape.value(c3).data(), tape.value(t).data());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig::micro(ModalityRegistry::standard());
        let (model, store) = MmDiT::init(cfg.clone(), &mut rng).unwrap();
        let grouped = patchify_batch(&random_planes(&cfg, 3, &mut rng), &cfg).unwrap();
        let c = conds(&cfg, 3, 2, Some(1));
        let run = || {
            let mut tape = Tape::new(&store);
            let out = model.forward(&mut tape, &grouped, &c).unwrap();
            assert_eq!(out.attention_tokens, cfg.num_tokens());
            out.velocities
                .iter()
                .map(|v| tape.value(*v).clone())
                .collect::<Vec<_>>()
        };
        let a = run();
        for (m, v) in a.iter().enumerate() {
            assert_eq!(v.shape(), grouped.tokens[m].shape());
        }
        assert_eq!(a, run());
    }

    #[test]
    fn forward_rejects_bad_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig::micro(two_modality());
        let (model, store) = MmDiT::init(cfg.clone(), &mut rng).unwrap();
        let grouped = patchify_batch(&random_planes(&cfg, 1, &mut rng), &cfg).unwrap();
        let mut tape = Tape::new(&store);
        assert!(model.forward(&mut tape, &grouped, &conds(&cfg, 1, 99, None)).is_err());
        assert!(model.forward(&mut tape, &grouped, &conds(&cfg, 1, 0, Some(3))).is_err());
        assert!(model.forward(&mut tape, &grouped, &conds(&cfg, 2, 0, None)).is_err());
    }

    #[test]
    fn append_keeps_existing_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig::micro(ModalityRegistry::standard());
        let (mut model, mut store) = MmDiT::init(cfg, &mut rng).unwrap();
        let before = store.clone();
        let changes = model.append_modality(&mut store, ModalitySpec::edge(1), &mut rng).unwrap();
        assert_eq!(model.registry().len(), 5);
        assert_eq!(model.config().num_tasks(), 6);
        for (id, name, value) in before.iter() {
            let now = store.get(id);
            match changes.iter().find(|(c, _)| *c == id) {
                Some((_, ParamChange::RowsAppended { old_rows })) => {
                    assert_eq!(*old_rows, value.rows());
                    assert_eq!(&now.data()[..value.len()], value.data(), "{name}");
                }
                None => assert_eq!(now, value, "{name}"),
                other => panic!("unexpected change {other:?} for {name}"),
            }
        }
        let rebound = MmDiT::from_params(model.config().clone(), &store).unwrap();
        assert_eq!(rebound.registry().len(), 5);
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig::micro(two_modality());
        let (model, mut store) = MmDiT::init(cfg.clone(), &mut rng).unwrap();
        store.jitter(&mut rng, 0.05);
        let grouped = patchify_batch(&random_planes(&cfg, 2, &mut rng), &cfg).unwrap();
        let c = conds(&cfg, 2, 1, Some(2));
        let targets: Vec<Matrix> = grouped
            .tokens
            .iter()
            .map(|t| t.map(|v| 0.5 * v - 0.1))
            .collect();
        let feats = Matrix::from_fn(2 * cfg.num_tokens(), cfg.feature_dim, |r, k| {
            ((r * 7 + k * 3) % 5) as f64 - 2.0
        });
        let loss_of = |store: &ParamStore| {
            let mut tape = Tape::new(store);
            let out = model.forward(&mut tape, &grouped, &c).unwrap();
            let mut total = tape.mse(out.velocities[0], &targets[0]);
            let l1 = tape.mse(out.velocities[1], &targets[1]);
            total = tape.add(total, l1);
            let z = model.project(&mut tape, out.hidden);
            let cos = tape.neg_cosine_mean(z, &feats);
            let reg = tape.scale(cos.loss, 0.5);
            let total = tape.add(total, reg);
            let value = tape.value(total).item();
            (value, tape.backward(total))
        };
        let (_, grads) = loss_of(&store);
        let h = 1e-6;
        let mut checked = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let len = store.get(id).len();
            for k in [0, len / 2, len - 1] {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let up = loss_of(&store).0;
                store.get_mut(id).data_mut()[k] = orig - h;
                let down = loss_of(&store).0;
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map(|g| g.data()[k]).unwrap_or(0.0);
                let tol = 1e-5 * (1.0 + numeric.abs().max(analytic.abs()));
                assert!(
                    (numeric - analytic).abs() < tol,
                    "{}[{k}]: numeric {numeric} analytic {analytic}",
                    store.name(id)
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn disabled_task_embedding_ignores_task_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = ModelConfig::micro(two_modality());
        cfg.use_task_embedding = false;
        let (model, store) = MmDiT::init(cfg.clone(), &mut rng).unwrap();
        let grouped = patchify_batch(&random_planes(&cfg, 1, &mut rng), &cfg).unwrap();
        let run = |task| {
            let mut tape = Tape::new(&store);
            let out = model.forward(&mut tape, &grouped, &conds(&cfg, 1, task, None)).unwrap();
            tape.value(out.velocities[0]).clone()
        };
        assert_eq!(run(0), run(2));
    }

    #[test]
    fn zero_init_heads_predict_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cfg = ModelConfig::micro(two_modality());
        cfg.zero_init = true;
        let (model, store) = MmDiT::init(cfg.clone(), &mut rng).unwrap();
        let grouped = patchify_batch(&random_planes(&cfg, 1, &mut rng), &cfg).unwrap();
        let mut tape = Tape::new(&store);
        let out = model.forward(&mut tape, &grouped, &conds(&cfg, 1, 0, None)).unwrap();
        for v in out.velocities {
            assert!(tape.value(v).data().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn replace_with_same_channels_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig::micro(ModalityRegistry::standard());
        let (mut model, mut store) = MmDiT::init(cfg, &mut rng).unwrap();
        let before = store.clone();
        let changes = model
            .replace_modality(&mut store, 3, ModalitySpec::edge(3), &mut rng)
            .unwrap();
        assert!(changes.is_empty());
        assert_eq!(store, before);
        assert_eq!(model.registry().get(3).name, "edge");

        let changes = model
            .replace_modality(&mut store, 3, ModalitySpec::edge(1), &mut rng)
            .unwrap();
        assert_eq!(changes.len(), 3);
        MmDiT::from_params(model.config().clone(), &store).unwrap();
        assert!(model.replace_modality(&mut store, 0, ModalitySpec::edge(3), &mut rng).is_err());
    }
}
