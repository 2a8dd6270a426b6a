//! Euler ODE and Euler-Maruyama SDE integration of a learned velocity field
//! from noise (t = 0) towards data (t = 1), with condition clamping and
//! classifier-free guidance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{arg, Error, Result};
use crate::interpolant::{
    blend, score_from_velocity, ClassLabel, TaskKind, TaskSpec, TimeVector, CONDITION_T_MIN,
};
use crate::modality::{ChannelPlane, DepthRange, ModalityRegistry};
use crate::model::{patchify_batch, unpatchify_batch, ConditioningInput, MmDiT};
use crate::params::ParamStore;
use crate::sample::MultiModalSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    OdeEuler,
    SdeEulerMaruyama,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub nfe: usize,
    /// Overrides the per-task default guidance when set.
    pub guidance_weight: Option<f64>,
    pub t_end: f64,
    pub seed: u64,
    /// Multiplies the diffusion coefficient `w_t = 1 - t`; 0 turns the SDE
    /// into the ODE.
    pub diffusion_scale: f64,
    /// Evaluate the unconditional branch even when guidance is off.
    pub two_pass: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::OdeEuler,
            nfe: 250,
            guidance_weight: None,
            t_end: 1.0 - 1e-4,
            seed: 0,
            diffusion_scale: 1.0,
            two_pass: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return arg("nfe must be at least 1");
        }
        if let Some(w) = self.guidance_weight {
            if !(w >= 0.0) {
                return arg(format!("guidance weight {w} must be >= 0"));
            }
        }
        if !(self.t_end > 0.0 && self.t_end <= 1.0) {
            return arg(format!("t_end {} outside (0, 1]", self.t_end));
        }
        if self.method == SamplerMethod::SdeEulerMaruyama && self.t_end >= 1.0 {
            return arg("the SDE sampler needs t_end < 1");
        }
        if !(self.diffusion_scale >= 0.0) {
            return arg("diffusion scale must be >= 0");
        }
        Ok(())
    }

    /// Guidance used when the config does not override it: off for
    /// generation, 1.8 for conditioned generation.
    pub fn default_guidance(kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Condition => 1.8,
            TaskKind::Generate | TaskKind::Understand => 1.0,
        }
    }

    /// `task` with this config's guidance, or the task kind's default.
    pub fn guide(&self, task: TaskSpec) -> TaskSpec {
        let w = self
            .guidance_weight
            .unwrap_or_else(|| Self::default_guidance(task.kind));
        task.with_guidance(w)
    }
}

/// A modality held at a fixed, nearly clean blend during sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionClamp {
    pub modality: usize,
    pub x0: ChannelPlane,
    pub t_cond: f64,
    pub eps: ChannelPlane,
    blended: ChannelPlane,
}

impl ConditionClamp {
    pub fn new(modality: usize, x0: ChannelPlane, t_cond: f64, eps: ChannelPlane) -> Result<Self> {
        if !(CONDITION_T_MIN..=1.0).contains(&t_cond) {
            return arg(format!("condition time {t_cond} outside [{CONDITION_T_MIN}, 1]"));
        }
        if (eps.height, eps.width, eps.channels) != (x0.height, x0.width, x0.channels) {
            return arg("clamp noise shape differs from the condition plane");
        }
        let blended = ChannelPlane::new(
            x0.height,
            x0.width,
            x0.channels,
            blend(&x0.data, &eps.data, t_cond)?,
        )?;
        Ok(Self {
            modality,
            x0,
            t_cond,
            eps,
            blended,
        })
    }

    /// Draws `t_cond` and the noise once.
    pub fn draw<R: Rng + ?Sized>(modality: usize, x0: ChannelPlane, rng: &mut R) -> Result<Self> {
        let t_cond = rng.random_range(CONDITION_T_MIN..=1.0);
        let eps = gaussian_plane(x0.height, x0.width, x0.channels, rng);
        Self::new(modality, x0, t_cond, eps)
    }

    pub fn blended(&self) -> &ChannelPlane {
        &self.blended
    }
}

pub fn gaussian_plane<R: Rng + ?Sized>(h: usize, w: usize, c: usize, rng: &mut R) -> ChannelPlane {
    let data = (0..h * w * c).map(|_| StandardNormal.sample(rng)).collect();
    ChannelPlane::new(h, w, c, data).expect("sized")
}

/// Batched state indexed as `[modality][sample]`.
pub type State = Vec<Vec<ChannelPlane>>;

/// Anything that predicts per-modality velocities for a batch.
pub trait VelocityField {
    fn registry(&self) -> &ModalityRegistry;

    fn velocity(
        &self,
        state: &State,
        times: &[TimeVector],
        labels: &[ClassLabel],
        task_id: usize,
    ) -> Result<State>;
}

/// A model bound to a parameter set (normally the EMA weights).
pub struct ModelField<'a> {
    pub model: &'a MmDiT,
    pub params: &'a ParamStore,
}

impl VelocityField for ModelField<'_> {
    fn registry(&self) -> &ModalityRegistry {
        self.model.registry()
    }

    fn velocity(
        &self,
        state: &State,
        times: &[TimeVector],
        labels: &[ClassLabel],
        task_id: usize,
    ) -> Result<State> {
        let cfg = self.model.config();
        let grouped = patchify_batch(state, cfg)?;
        let conds: Vec<ConditioningInput> = times
            .iter()
            .zip(labels)
            .map(|(t, l)| ConditioningInput {
                times: t.clone(),
                class_label: *l,
                task_id,
            })
            .collect();
        let mut tape = Tape::new(self.params);
        let out = self.model.forward(&mut tape, &grouped, &conds)?;
        out.velocities
            .iter()
            .zip(cfg.registry.iter())
            .map(|(v, spec)| unpatchify_batch(tape.value(*v), grouped.batch, spec.channels, cfg))
            .collect()
    }
}

/// `w * v_cond + (1 - w) * v_uncond`; exact at `w = 1` and `w = 0`.
pub fn apply_cfg(v_cond: &[f64], v_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if v_cond.len() != v_uncond.len() {
        return arg("guidance branches differ in shape");
    }
    Ok(v_cond
        .iter()
        .zip(v_uncond)
        .map(|(c, u)| w * c + (1.0 - w) * u)
        .collect())
}

/// Velocity with classifier-free guidance. The unconditional branch nulls
/// only the class label.
pub fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    state: &State,
    times: &[TimeVector],
    labels: &[ClassLabel],
    task_id: usize,
    w: f64,
    two_pass: bool,
) -> Result<State> {
    let cond = field.velocity(state, times, labels, task_id)?;
    if !(two_pass || w != 1.0) || labels.iter().all(Option::is_none) {
        return Ok(cond);
    }
    let nulls = vec![None; labels.len()];
    let uncond = field.velocity(state, times, &nulls, task_id)?;
    cond.iter()
        .zip(&uncond)
        .map(|(cm, um)| {
            cm.iter()
                .zip(um)
                .map(|(c, u)| {
                    ChannelPlane::new(c.height, c.width, c.channels, apply_cfg(&c.data, &u.data, w)?)
                })
                .collect()
        })
        .collect()
}

fn overwrite_clamps(state: &mut State, clamps: &[ConditionClamp]) {
    for (b, c) in clamps.iter().enumerate() {
        state[c.modality][b] = c.blended.clone();
    }
}

fn clamped_modality(clamps: &[ConditionClamp]) -> Option<usize> {
    clamps.first().map(|c| c.modality)
}

/// One Euler step `x <- x + dt * v` on every non-clamped modality.
pub fn step_ode(state: &State, velocity: &State, dt: f64, clamps: &[ConditionClamp]) -> Result<State> {
    if !(dt > 0.0) {
        return arg(format!("step size {dt} must be positive"));
    }
    let skip = clamped_modality(clamps);
    let mut next = state.clone();
    for (m, (xs, vs)) in next.iter_mut().zip(velocity).enumerate() {
        if Some(m) == skip {
            continue;
        }
        for (x, v) in xs.iter_mut().zip(vs) {
            for (a, b) in x.data.iter_mut().zip(&v.data) {
                *a += dt * b;
            }
        }
    }
    overwrite_clamps(&mut next, clamps);
    Ok(next)
}

/// One Euler-Maruyama step
/// `x <- x + dt * (v + w_t / 2 * s) + sqrt(w_t * dt) * xi` with
/// `w_t = diffusion_scale * (1 - t)`. When `w_t` is zero the step is the ODE
/// step exactly. Noise is drawn for every element either way so rng streams
/// stay aligned.
pub fn step_sde<R: Rng + ?Sized>(
    state: &State,
    velocity: &State,
    times: &[TimeVector],
    dt: f64,
    diffusion_scale: f64,
    clamps: &[ConditionClamp],
    rng: &mut R,
) -> Result<State> {
    if !(dt > 0.0) {
        return arg(format!("step size {dt} must be positive"));
    }
    let skip = clamped_modality(clamps);
    let mut next = state.clone();
    for (m, (xs, vs)) in next.iter_mut().zip(velocity).enumerate() {
        if Some(m) == skip {
            continue;
        }
        for (b, (x, v)) in xs.iter_mut().zip(vs).enumerate() {
            let t = times[b].get(m);
            let w_t = diffusion_scale * (1.0 - t);
            let score = if w_t != 0.0 {
                Some(score_from_velocity(&x.data, &v.data, t)?)
            } else {
                None
            };
            let noise_scale = (w_t * dt).sqrt();
            for (i, (a, vel)) in x.data.iter_mut().zip(&v.data).enumerate() {
                let xi: f64 = StandardNormal.sample(rng);
                match &score {
                    Some(s) => *a += dt * (vel + 0.5 * w_t * s[i]) + noise_scale * xi,
                    None => *a += dt * vel,
                }
            }
        }
    }
    overwrite_clamps(&mut next, clamps);
    Ok(next)
}

/// Integrates a batch from t = 0 to `t_end` in `nfe` uniform steps and
/// returns the final channel planes as `[modality][sample]`.
///
/// `clamps` is empty for generation and holds one clamp per sample (all on
/// the task's condition modality) otherwise.
pub fn sample<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    task: &TaskSpec,
    config: &SamplerConfig,
    labels: &[ClassLabel],
    clamps: &[ConditionClamp],
    image_size: usize,
    rng: &mut R,
) -> Result<State> {
    config.validate()?;
    if !(task.guidance_weight >= 0.0) {
        return arg("guidance weight must be >= 0");
    }
    let registry = field.registry();
    let batch = labels.len();
    if batch == 0 {
        return arg("nothing to sample");
    }
    match (task.condition_modality, clamps.is_empty()) {
        (None, true) => {}
        (Some(m), false) => {
            if clamps.len() != batch || clamps.iter().any(|c| c.modality != m) {
                return arg(format!(
                    "expected {batch} clamps on modality {}",
                    registry.get(m.min(registry.len() - 1)).name
                ));
            }
        }
        (None, false) => return arg("clamps given for an unconditioned task"),
        (Some(_), true) => return arg("conditioned task without a clamp"),
    }
    for c in clamps {
        let spec = registry.get(c.modality);
        if (c.x0.height, c.x0.width, c.x0.channels) != (image_size, image_size, spec.channels) {
            return arg(format!("clamp plane does not match modality {}", spec.name));
        }
    }

    let mut state: State = registry
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            (0..batch)
                .map(|b| match clamps.get(b) {
                    Some(c) if c.modality == m => c.blended.clone(),
                    _ => gaussian_plane(image_size, image_size, spec.channels, rng),
                })
                .collect()
        })
        .collect();

    let dt = config.t_end / config.nfe as f64;
    let task_id = task.task_id();
    for k in 0..config.nfe {
        let t = k as f64 * dt;
        let times: Vec<TimeVector> = (0..batch)
            .map(|b| {
                let mut tv = TimeVector::uniform(t, registry.len());
                if let Some(c) = clamps.get(b) {
                    tv.0[c.modality] = c.t_cond;
                }
                tv
            })
            .collect();
        let v = guided_velocity(
            field,
            &state,
            &times,
            labels,
            task_id,
            task.guidance_weight,
            config.two_pass,
        )?;
        state = match config.method {
            SamplerMethod::OdeEuler => step_ode(&state, &v, dt, clamps)?,
            SamplerMethod::SdeEulerMaruyama => {
                step_sde(&state, &v, &times, dt, config.diffusion_scale, clamps, rng)?
            }
        };
        if state.iter().flatten().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite state at step {k}")));
        }
    }
    Ok(state)
}

/// Decodes a sampled batch; `depth_ranges` holds one range per sample, or a
/// single range shared by all.
pub fn decode_batch(
    state: &State,
    registry: &ModalityRegistry,
    labels: &[ClassLabel],
    depth_ranges: &[DepthRange],
) -> Result<Vec<MultiModalSample>> {
    (0..labels.len())
        .map(|b| {
            let planes: Vec<ChannelPlane> = state.iter().map(|m| m[b].clone()).collect();
            let (s, _) = MultiModalSample::decode(
                &planes,
                registry,
                labels[b].unwrap_or(0),
                depth_ranges[b.min(depth_ranges.len() - 1)],
            )?;
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpolant::TaskSpec;
    use crate::modality::{ModalityRegistry, ModalitySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exact velocity field of a single datum: `(x0 - x) / (1 - t)`.
    struct OneDatum {
        registry: ModalityRegistry,
        x0: Vec<ChannelPlane>,
    }

    impl VelocityField for OneDatum {
        fn registry(&self) -> &ModalityRegistry {
            &self.registry
        }

        fn velocity(&self, state: &State, times: &[TimeVector], _: &[ClassLabel], _: usize) -> Result<State> {
            Ok(state
                .iter()
                .enumerate()
                .map(|(m, xs)| {
                    xs.iter()
                        .enumerate()
                        .map(|(b, x)| {
                            let t = times[b].get(m);
                            let data = x
                                .data
                                .iter()
                                .zip(&self.x0[m].data)
                                .map(|(x, x0)| (x0 - x) / (1.0 - t).max(1e-12))
                                .collect();
                            ChannelPlane::new(x.height, x.width, x.channels, data).unwrap()
                        })
                        .collect()
                })
                .collect())
        }
    }

    /// `v = a * x + b + c * label`.
    struct Linear {
        registry: ModalityRegistry,
        a: f64,
        b: f64,
    }

    impl VelocityField for Linear {
        fn registry(&self) -> &ModalityRegistry {
            &self.registry
        }

        fn velocity(&self, state: &State, _: &[TimeVector], labels: &[ClassLabel], _: usize) -> Result<State> {
            Ok(state
                .iter()
                .map(|xs| {
                    xs.iter()
                        .zip(labels)
                        .map(|(x, l)| {
                            let c = l.map_or(0.0, |k| 0.1 * (k + 1) as f64);
                            let data = x.data.iter().map(|v| self.a * v + self.b + c).collect();
                            ChannelPlane::new(x.height, x.width, x.channels, data).unwrap()
                        })
                        .collect()
                })
                .collect())
        }
    }

    fn registry() -> ModalityRegistry {
        ModalityRegistry::new(vec![ModalitySpec::rgb(), ModalitySpec::depth()]).unwrap()
    }

    fn target(rng: &mut ChaCha8Rng) -> Vec<ChannelPlane> {
        vec![
            gaussian_plane(4, 4, 3, rng),
            gaussian_plane(4, 4, 1, rng),
        ]
    }

    #[test]
    fn cfg_arithmetic() {
        assert_eq!(apply_cfg(&[2.0, -1.0], &[1.0, 5.0], 1.0).unwrap(), vec![2.0, -1.0]);
        assert_eq!(apply_cfg(&[2.0, -1.0], &[1.0, 5.0], 0.0).unwrap(), vec![1.0, 5.0]);
        assert!((apply_cfg(&[2.0], &[1.0], 1.8).unwrap()[0] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn ode_recovers_single_datum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let field = OneDatum {
            registry: registry(),
            x0: target(&mut rng),
        };
        let cfg = SamplerConfig {
            nfe: 128,
            ..SamplerConfig::default()
        };
        let out = sample(&field, &TaskSpec::generate(Some(1)), &cfg, &[Some(1)], &[], 4, &mut rng).unwrap();
        for (m, planes) in out.iter().enumerate() {
            for (a, b) in planes[0].data.iter().zip(&field.x0[m].data) {
                assert!((a - b).abs() < 2e-2);
            }
        }
    }

    #[test]
    fn sde_mean_recovers_single_datum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = OneDatum {
            registry: registry(),
            x0: target(&mut rng),
        };
        let cfg = SamplerConfig {
            method: SamplerMethod::SdeEulerMaruyama,
            ..SamplerConfig::default()
        };
        let labels = vec![None; 64];
        let out = sample(&field, &TaskSpec::generate(None), &cfg, &labels, &[], 4, &mut rng).unwrap();
        for (m, planes) in out.iter().enumerate() {
            for i in 0..field.x0[m].data.len() {
                let mean = planes.iter().map(|p| p.data[i]).sum::<f64>() / 64.0;
                assert!((mean - field.x0[m].data[i]).abs() < 5e-2);
            }
        }
    }

    #[test]
    fn euler_half_steps_are_second_order_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = Linear {
            registry: registry(),
            a: 0.7,
            b: -0.3,
        };
        let x: State = target(&mut rng).into_iter().map(|p| vec![p]).collect();
        let times = vec![TimeVector::uniform(0.2, 2)];
        for dt in [0.1, 0.05, 0.025] {
            let v = field.velocity(&x, &times, &[None], 0).unwrap();
            let full = step_ode(&x, &v, dt, &[]).unwrap();
            let half = step_ode(&x, &v, dt / 2.0, &[]).unwrap();
            let v2 = field.velocity(&half, &times, &[None], 0).unwrap();
            let two = step_ode(&half, &v2, dt / 2.0, &[]).unwrap();
            let gap = full[0][0].mean_abs_diff(&two[0][0]);
            assert!(gap < 0.7 * dt * dt, "dt {dt}: {gap}");
        }
    }

    #[test]
    fn zero_field_keeps_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: State = target(&mut rng).into_iter().map(|p| vec![p]).collect();
        let zero: State = x
            .iter()
            .map(|m| m.iter().map(|p| ChannelPlane::zeros(p.height, p.width, p.channels)).collect())
            .collect();
        assert_eq!(step_ode(&x, &zero, 0.1, &[]).unwrap(), x);
    }

    #[test]
    fn sde_without_diffusion_is_ode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = Linear {
            registry: registry(),
            a: -0.5,
            b: 0.2,
        };
        let ode = SamplerConfig {
            nfe: 20,
            ..SamplerConfig::default()
        };
        let sde = SamplerConfig {
            method: SamplerMethod::SdeEulerMaruyama,
            diffusion_scale: 0.0,
            ..ode.clone()
        };
        let run = |cfg: &SamplerConfig| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample(&field, &TaskSpec::generate(Some(0)), cfg, &[Some(0), None], &[], 4, &mut rng).unwrap()
        };
        assert_eq!(run(&ode), run(&sde));
        let noisy = SamplerConfig {
            method: SamplerMethod::SdeEulerMaruyama,
            ..ode.clone()
        };
        assert_eq!(run(&noisy), run(&noisy));
        assert_ne!(run(&noisy), run(&ode));
        let _ = &mut rng;
    }

    #[test]
    fn two_pass_at_unit_guidance_is_exact() {
        let field = Linear {
            registry: registry(),
            a: 0.3,
            b: 0.1,
        };
        let one = SamplerConfig {
            nfe: 10,
            ..SamplerConfig::default()
        };
        let two = SamplerConfig {
            two_pass: true,
            ..one.clone()
        };
        let run = |cfg: &SamplerConfig| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sample(&field, &TaskSpec::generate(Some(2)), cfg, &[Some(2)], &[], 4, &mut rng).unwrap()
        };
        assert_eq!(run(&one), run(&two));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let guided = TaskSpec::generate(Some(2)).with_guidance(1.8);
        let g = sample(&field, &guided, &one, &[Some(2)], &[], 4, &mut rng).unwrap();
        assert_ne!(run(&one), g);
    }

    #[test]
    fn clamp_is_held_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = target(&mut rng);
        let field = OneDatum {
            registry: registry(),
            x0: x0.clone(),
        };
        let clamp = ConditionClamp::draw(1, x0[1].clone(), &mut rng).unwrap();
        assert!(clamp.t_cond >= CONDITION_T_MIN);
        let x: State = vec![vec![gaussian_plane(4, 4, 3, &mut rng)], vec![clamp.blended().clone()]];
        let times = vec![TimeVector(vec![0.3, clamp.t_cond])];
        let v = field.velocity(&x, &times, &[None], 2).unwrap();
        let next = step_ode(&x, &v, 0.1, std::slice::from_ref(&clamp)).unwrap();
        assert_eq!(&next[1][0], clamp.blended());
        let next = step_sde(&x, &v, &times, 0.1, 1.0, std::slice::from_ref(&clamp), &mut rng).unwrap();
        assert_eq!(&next[1][0], clamp.blended());

        let task = TaskSpec::condition(1, None);
        let out = sample(&field, &task, &SamplerConfig { nfe: 16, ..Default::default() }, &[None], &[clamp.clone()], 4, &mut rng)
            .unwrap();
        assert_eq!(&out[1][0], clamp.blended());
        assert!(out[1][0].mean_abs_diff(&x0[1]) < 0.02);
    }

    #[test]
    fn clamp_task_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = target(&mut rng);
        let field = OneDatum {
            registry: registry(),
            x0: x0.clone(),
        };
        let clamp = ConditionClamp::draw(1, x0[1].clone(), &mut rng).unwrap();
        let cfg = SamplerConfig { nfe: 2, ..Default::default() };
        assert!(sample(&field, &TaskSpec::generate(None), &cfg, &[None], &[clamp.clone()], 4, &mut rng).is_err());
        assert!(sample(&field, &TaskSpec::condition(1, None), &cfg, &[None], &[], 4, &mut rng).is_err());
        assert!(sample(&field, &TaskSpec::understand(), &cfg, &[None], &[clamp], 4, &mut rng).is_err());
        assert!(ConditionClamp::new(1, x0[1].clone(), 0.5, x0[1].clone()).is_err());
    }

    #[test]
    fn singular_score_is_reported() {
        let x: State = vec![vec![ChannelPlane::zeros(2, 2, 3)]];
        let times = vec![TimeVector::uniform(1.0, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = step_sde(&x, &x, &times, 0.1, 1.0, &[], &mut rng);
        let _ = r.unwrap();
        let times = vec![TimeVector::uniform(1.0 - 1e-9, 1)];
        let r = step_sde(&x, &x, &times, 0.1, 1.0, &[], &mut rng);
        assert!(matches!(r, Err(Error::SingularScore { .. })));
    }
}
