//! One function per subcommand. Each writes its outputs and a manifest under
//! `--out`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mmgen_core::checkpoint::read_checkpoint;
use mmgen_core::config::RunConfig;
use mmgen_core::eval::{
    cross_modal_consistency, depth_metrics, normal_angular_error, seg_pixel_accuracy, MetricReport,
};
use mmgen_core::image::{image_to_channels, RgbImage};
use mmgen_core::infer::{canonical_depth_range, Inference};
use mmgen_core::interpolant::ClassLabel;
use mmgen_core::modality::{ChannelPlane, ModalityRegistry};
use mmgen_core::model::MmDiT;
use mmgen_core::params::ParamStore;
use mmgen_core::sample::MultiModalSample;
use mmgen_core::suite::{generate_many, run_suite};
use mmgen_core::synth::{dataset_manifest, generate_dataset, read_dataset_file, write_dataset_file, DatasetReader};
use mmgen_core::train::{AdaptMode, StepReport, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{content_hash, RunManifest};
use crate::render::{cell, sample_row, write_grid};
use crate::{interrupt, Common, InputArgs, Mode};

/// Share of a new dataset checked for cross-modal consistency.
const VALIDATION_FRACTION: f64 = 0.05;
const MAX_NORMAL_MEDIAN_DEG: f64 = 10.0;
const MIN_BOUNDARY_AGREEMENT: f64 = 0.9;
/// Synthetic renders used for the depth decode range when no dataset is given.
const REFERENCE_SAMPLES: usize = 64;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    png: bool,
}

fn setup(common: &Common) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.sampler.seed = s;
        cfg.data.seed = s;
        cfg.data.val_seed = s.wrapping_add(1_000_003);
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(Ctx {
        cfg,
        out: common.out.clone(),
        png: common.png,
    })
}

impl Ctx {
    fn manifest(&self, command: &str, seed: u64) -> RunManifest {
        RunManifest::new(command, self.cfg.to_toml(), seed)
    }

    fn grid(&self, rows: &[Vec<RgbImage>], m: &mut RunManifest) -> Result<()> {
        for p in write_grid(rows, &self.out, self.png)? {
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("grid").to_string();
            m.output(&name, &p);
        }
        Ok(())
    }

    fn metrics(&self, report: &MetricReport, json: bool, m: &mut RunManifest) -> Result<()> {
        let txt = self.out.join("metrics.txt");
        std::fs::write(&txt, report.to_text())?;
        m.output("metrics.txt", &txt);
        if json {
            let p = self.out.join("metrics.json");
            std::fs::write(&p, report.to_json())?;
            m.output("metrics.json", &p);
        }
        Ok(())
    }
}

struct Loaded {
    model: MmDiT,
    ema: ParamStore,
    hash: String,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ck = read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let (model, ema) = ck.ema_model()?;
    Ok(Loaded {
        model,
        ema,
        hash: content_hash(path)?,
    })
}

fn read_data(path: &Path, registry: &ModalityRegistry) -> Result<Vec<MultiModalSample>> {
    let (reg, samples) = read_dataset_file(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if &reg != registry {
        bail!("dataset {} has a different modality registry than the model", path.display());
    }
    Ok(samples)
}

impl Loaded {
    fn inference(&self, ctx: &Ctx, reference: Option<&[MultiModalSample]>) -> Result<Inference<'_>> {
        let reg = self.model.registry();
        let depth_range = match reference {
            Some(s) => canonical_depth_range(s)?,
            None => canonical_depth_range(&generate_dataset(
                REFERENCE_SAMPLES,
                ctx.cfg.data.seed,
                self.model.config().image_size,
                reg,
            )?)?,
        };
        Ok(Inference {
            model: &self.model,
            params: &self.ema,
            sampler: ctx.cfg.sampler.clone(),
            depth_range,
        })
    }

    fn registry(&self) -> &ModalityRegistry {
        self.model.registry()
    }

    /// Modality `m` of the requested input, plus the full sample when it
    /// came from a dataset.
    fn input_plane(&self, input: &InputArgs, m: usize) -> Result<(ChannelPlane, Option<MultiModalSample>)> {
        let reg = self.registry();
        if let Some(path) = &input.input {
            let img = RgbImage::read_ppm(path).with_context(|| format!("reading image {}", path.display()))?;
            let size = self.model.config().image_size;
            if (img.width, img.height) != (size, size) {
                bail!("{} is {}x{}, the model expects {size}x{size}", path.display(), img.width, img.height);
            }
            return Ok((image_to_channels(&img, reg.get(m))?, None));
        }
        let path = input.data.as_ref().ok_or_else(|| anyhow!("an --input image or --data container is required"))?;
        let mut reader = DatasetReader::open(path).with_context(|| format!("reading dataset {}", path.display()))?;
        reader.require_registry(reg)?;
        if input.index >= reader.len() {
            bail!("index {} outside a dataset of {}", input.index, reader.len());
        }
        let s = reader.get(input.index)?;
        Ok((s.encode(reg)?[m].clone(), Some(s)))
    }
}

fn note_input(m: &mut RunManifest, input: &InputArgs) {
    if let Some(p) = &input.input {
        m.input("image", p);
    }
    if let Some(p) = &input.data {
        m.input("data", p);
        m.extra("index", input.index);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn make_data(common: &Common, val: bool, count: Option<usize>) -> Result<()> {
    let ctx = setup(common)?;
    let d = &ctx.cfg.data;
    let (name, n, seed) = if val {
        ("val", count.unwrap_or(d.val_count), d.val_seed)
    } else {
        ("train", count.unwrap_or(d.train_count), d.seed)
    };
    if n == 0 {
        bail!("--count must be positive");
    }
    let reg = &ctx.cfg.model.registry;
    let samples = generate_dataset(n, seed, ctx.cfg.model.image_size, reg)?;
    let mut m = ctx.manifest("make-data", seed);

    let mut report = MetricReport::default();
    let has = |k: &str| reg.index_of(k).is_some();
    if has("depth") && has("normal") && has("seg") {
        let k = ((n as f64 * VALIDATION_FRACTION).ceil() as usize).clamp(1, n);
        let mut medians = Vec::new();
        let mut agreement = 0.0;
        for i in 0..k {
            let c = cross_modal_consistency(&samples[i * n / k], reg)?;
            medians.extend(c.normal_median_deg);
            agreement += c.boundary_agreement / k as f64;
        }
        medians.sort_by(f64::total_cmp);
        let median = medians.get(medians.len() / 2).copied().unwrap_or(0.0);
        report.set("validation.samples", k as f64);
        report.set("validation.normal_median_deg", median);
        report.set("validation.boundary_agreement", agreement);
        ctx.metrics(&report, false, &mut m)?;
        if !(median < MAX_NORMAL_MEDIAN_DEG && agreement > MIN_BOUNDARY_AGREEMENT) {
            bail!(
                "dataset failed validation: normal median {median:.2} deg, boundary agreement {agreement:.3}"
            );
        }
    } else {
        report.note("no depth, normal and seg modalities; consistency validation skipped");
        ctx.metrics(&report, false, &mut m)?;
    }

    let path = ctx.out.join(format!("{name}.mmds"));
    write_dataset_file(&path, reg, &samples)?;
    m.output("dataset", &path);
    m.extra("dataset", dataset_manifest(&path)?);
    m.write(&ctx.out)?;
    println!("wrote {} ({n} samples)", path.display());
    Ok(())
}

/// Runs `body` with a step logger that appends to train.log and saves the
/// checkpoint every `checkpoint_interval` steps.
fn logged_training(
    state: &mut TrainState,
    out: &Path,
    body: impl FnOnce(&mut TrainState, &mut dyn FnMut(&TrainState, &StepReport) -> mmgen_core::Result<()>) -> mmgen_core::Result<u64>,
) -> Result<u64> {
    let ckpt = out.join("checkpoint.mmck");
    let mut log = OpenOptions::new().create(true).append(true).open(out.join("train.log"))?;
    let interval = state.config.checkpoint_interval;
    interrupt::install();
    let mut on_step = |s: &TrainState, r: &StepReport| -> mmgen_core::Result<()> {
        let line = r.log_line();
        writeln!(log, "{line}")?;
        println!("{line}");
        if interval > 0 && s.step % interval == 0 {
            s.save(&ckpt)?;
        }
        Ok(())
    };
    let done = body(state, &mut on_step)?;
    state.save(&ckpt)?;
    if interrupt::requested() {
        println!("interrupted at step {}; checkpoint written", state.step);
    }
    Ok(done)
}

pub fn train(common: &Common, data: &Path, steps: Option<u64>, resume: bool) -> Result<()> {
    let ctx = setup(common)?;
    let ckpt = ctx.out.join("checkpoint.mmck");
    let mut m = ctx.manifest("train", ctx.cfg.train.seed);
    let mut state = if resume {
        let mut model = ctx.cfg.model.clone();
        model.use_task_embedding &= !ctx.cfg.train.disable_task_embedding;
        m.checkpoint_hash = Some(content_hash(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?);
        m.input("checkpoint", &ckpt);
        TrainState::load_compatible(&ckpt, &model)?
    } else {
        if ckpt.exists() {
            bail!("{} exists; pass --resume to continue it", ckpt.display());
        }
        TrainState::new(ctx.cfg.model.clone(), ctx.cfg.train.clone())?
    };
    let samples = read_data(data, state.registry())?;
    let size = state.model.config().image_size;
    if samples[0].height() != size || samples[0].width() != size {
        bail!("dataset images are {}x{}, the model expects {size}x{size}", samples[0].height(), samples[0].width());
    }
    m.input("data", data);
    let target = steps.unwrap_or(state.config.total_steps);
    let start = state.step;
    let remaining = target.saturating_sub(start);
    let done = logged_training(&mut state, &ctx.out, |s, on_step| {
        s.train(&samples, remaining, &interrupt::requested, on_step)
    })?;
    m.output("checkpoint", &ckpt);
    m.output("log", &ctx.out.join("train.log"));
    m.extra("start_step", start);
    m.extra("end_step", state.step);
    m.extra("steps_run", done);
    m.extra("interrupted", interrupt::requested());
    m.extra("output_checkpoint_hash", format!("sha256:{}", content_hash(&ckpt)?));
    m.write(&ctx.out)
}

pub fn sample(common: &Common, checkpoint: &Path, class: Option<u32>, n: usize, data: Option<&Path>) -> Result<()> {
    let ctx = setup(common)?;
    let l = load_model(checkpoint)?;
    let reference = data.map(|p| read_data(p, l.registry())).transpose()?;
    let inf = l.inference(&ctx, reference.as_deref())?;
    let mut m = ctx.manifest("sample", ctx.cfg.sampler.seed);
    m.input("checkpoint", checkpoint);
    m.checkpoint_hash = Some(l.hash.clone());
    if let Some(p) = data {
        m.input("data", p);
    }
    m.extra("class", class.map_or("none".into(), |c| c.to_string()));
    m.extra("n", n);
    if n == 0 {
        bail!("--n must be positive");
    }
    let labels: Vec<ClassLabel> = vec![class; n];
    let state = generate_many(&inf, &labels, ctx.cfg.sampler.seed)?;
    let rows = inf
        .decode(&state, &labels)?
        .iter()
        .map(|s| sample_row(s, l.registry()))
        .collect::<Result<Vec<_>>>()?;
    ctx.grid(&rows, &mut m)?;
    m.extra("columns", names(l.registry()));
    m.write(&ctx.out)
}

fn names(reg: &ModalityRegistry) -> String {
    reg.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(",")
}

pub fn condgen(common: &Common, checkpoint: &Path, condition: &str, input: &InputArgs, class: Option<u32>, n: usize) -> Result<()> {
    let ctx = setup(common)?;
    let l = load_model(checkpoint)?;
    let mi = l.registry().require(condition)?;
    if mi == 0 {
        bail!("conditioning on rgb is the understand command");
    }
    if n == 0 {
        bail!("--n must be positive");
    }
    let (plane, _) = l.input_plane(input, mi)?;
    let inf = l.inference(&ctx, None)?;
    let mut m = ctx.manifest("condgen", ctx.cfg.sampler.seed);
    m.input("checkpoint", checkpoint);
    m.checkpoint_hash = Some(l.hash.clone());
    note_input(&mut m, input);
    m.extra("condition", condition);
    m.extra("class", class.map_or("none".into(), |c| c.to_string()));
    m.extra("n", n);
    let labels = vec![class; n];
    let state = inf.condgen(mi, &vec![plane; n], &labels, &mut rng(ctx.cfg.sampler.seed))?;
    let rows = inf
        .decode(&state, &labels)?
        .iter()
        .map(|s| sample_row(s, l.registry()))
        .collect::<Result<Vec<_>>>()?;
    ctx.grid(&rows, &mut m)?;
    m.extra("columns", names(l.registry()));
    m.write(&ctx.out)
}

pub fn understand(common: &Common, checkpoint: &Path, input: &InputArgs) -> Result<()> {
    let ctx = setup(common)?;
    let l = load_model(checkpoint)?;
    let reg = l.registry().clone();
    let (rgb, truth) = l.input_plane(input, 0)?;
    let inf = l.inference(&ctx, None)?;
    let mut m = ctx.manifest("understand", ctx.cfg.sampler.seed);
    m.input("checkpoint", checkpoint);
    m.checkpoint_hash = Some(l.hash.clone());
    note_input(&mut m, input);

    let state = inf.understand(std::slice::from_ref(&rgb), &mut rng(ctx.cfg.sampler.seed))?;
    let predicted = inf.decode(&state, &[None])?.remove(0);
    let mut rows = vec![sample_row(&predicted, &reg)?];
    rows[0][0] = cell(&rgb);

    let mut report = MetricReport::default();
    match &truth {
        Some(gt) => {
            rows.push(sample_row(gt, &reg)?);
            if let Some(d) = reg.index_of("depth") {
                let dm = depth_metrics(&predicted.planes[d], &gt.planes[d], None, true)?;
                report.set("depth.abs_rel", dm.abs_rel);
                report.set("depth.delta1", dm.delta1);
                report.set("depth.rmse", dm.rmse);
            }
            if let Some(nm) = reg.index_of("normal") {
                let a = normal_angular_error(&predicted.planes[nm], &gt.planes[nm])?;
                report.set("normal.mean_deg", a.mean_deg);
                report.set("normal.median_deg", a.median_deg);
            }
            if let Some(s) = reg.index_of("seg") {
                report.set("seg.pixel_accuracy", seg_pixel_accuracy(&predicted.planes[s], &gt.planes[s])?);
            }
            report.note("depth is compared after least-squares scale and shift alignment");
        }
        None => report.note("no ground truth for this input; grid only"),
    }
    ctx.metrics(&report, false, &mut m)?;
    ctx.grid(&rows, &mut m)?;
    m.extra("columns", names(&reg));
    m.write(&ctx.out)
}

pub fn translate(common: &Common, checkpoint: &Path, input: &InputArgs, via: &str, class: Option<u32>, understand_seed: u64) -> Result<()> {
    let ctx = setup(common)?;
    let l = load_model(checkpoint)?;
    let reg = l.registry().clone();
    let vi = reg.require(via)?;
    let (rgb, _) = l.input_plane(input, 0)?;
    let inf = l.inference(&ctx, None)?;
    let mut m = ctx.manifest("translate", ctx.cfg.sampler.seed);
    m.input("checkpoint", checkpoint);
    m.checkpoint_hash = Some(l.hash.clone());
    note_input(&mut m, input);
    m.extra("via", via);
    m.extra("understand_seed", understand_seed);
    m.extra("class", class.map_or("none".into(), |c| c.to_string()));

    let (mid, out) = inf.translate(
        std::slice::from_ref(&rgb),
        vi,
        &[class],
        &mut rng(understand_seed),
        &mut rng(ctx.cfg.sampler.seed),
    )?;
    let mid = inf.decode(&mid, &[None])?.remove(0).encode(&reg)?;
    let out = inf.decode(&out, &[class])?.remove(0).encode(&reg)?;
    ctx.grid(&[vec![cell(&rgb), cell(&mid[vi]), cell(&out[0])]], &mut m)?;
    m.extra("columns", format!("input,{via},output"));
    m.write(&ctx.out)
}

pub fn adapt(common: &Common, checkpoint: &Path, data: &Path, mode: Mode, slot: Option<&str>, steps: u64) -> Result<()> {
    let ctx = setup(common)?;
    let mut state = read_checkpoint(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?
        .into_state()?;
    let (data_reg, samples) = read_dataset_file(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let base = state.registry().clone();
    let (mode, spec) = match mode {
        Mode::Append => {
            if data_reg.len() != base.len() + 1 {
                bail!("an append dataset carries exactly one modality more than the model");
            }
            (AdaptMode::Append, data_reg.get(base.len()).clone())
        }
        Mode::Replace => {
            let slot = slot.ok_or_else(|| anyhow!("--slot is required in replace mode"))?;
            let i = base.require(slot)?;
            if data_reg.len() != base.len() {
                bail!("a replace dataset carries as many modalities as the model");
            }
            (AdaptMode::Replace { slot: slot.into() }, data_reg.get(i).clone())
        }
    };
    let mut m = ctx.manifest("adapt", state.config.seed);
    m.input("checkpoint", checkpoint);
    m.checkpoint_hash = Some(content_hash(checkpoint)?);
    m.input("data", data);
    m.extra("mode", format!("{mode:?}"));
    m.extra("modality", &spec.name);
    m.extra("steps", steps);
    let done = logged_training(&mut state, &ctx.out, |s, on_step| {
        s.adapt_modality(&mode, spec, &data_reg, &samples, steps, &interrupt::requested, on_step)
    })?;
    let ckpt = ctx.out.join("checkpoint.mmck");
    m.output("checkpoint", &ckpt);
    m.output("log", &ctx.out.join("train.log"));
    m.extra("steps_run", done);
    m.extra("interrupted", interrupt::requested());
    m.extra("output_checkpoint_hash", format!("sha256:{}", content_hash(&ckpt)?));
    m.write(&ctx.out)
}

pub fn eval(common: &Common, checkpoint: &Path, data: &Path, val: &Path, n: usize) -> Result<()> {
    let ctx = setup(common)?;
    let l = load_model(checkpoint)?;
    let train = read_data(data, l.registry())?;
    let held = read_data(val, l.registry())?;
    let inf = l.inference(&ctx, Some(&train))?;
    let mut m = ctx.manifest("eval", ctx.cfg.sampler.seed);
    m.input("checkpoint", checkpoint);
    m.checkpoint_hash = Some(l.hash.clone());
    m.input("data", data);
    m.input("val", val);
    m.extra("n", n);
    let report = run_suite(&inf, &train, &held, n, ctx.cfg.sampler.seed)?.to_metrics();
    ctx.metrics(&report, true, &mut m)?;
    print!("{}", report.to_text());
    m.write(&ctx.out)
}
