//! Flow-matching interpolant: `x_t = t * x0 + (1 - t) * eps`, with `t = 1`
//! clean data and `t = 0` pure noise, plus per-modality time schedules for
//! each task regime.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::modality::ModalityRegistry;

/// Lower end of the near-clean window used for condition modalities.
pub const CONDITION_T_MIN: f64 = 0.99;

/// Score requests at `t >= 1 - SCORE_EPS` are rejected.
pub const SCORE_EPS: f64 = 1e-6;

/// `None` is the null label routed to the unconditional embedding.
pub type ClassLabel = Option<u32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Generate,
    Condition,
    Understand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Registry index of the clamped modality.
    pub condition_modality: Option<usize>,
    pub class_label: ClassLabel,
    pub guidance_weight: f64,
}

impl TaskSpec {
    pub fn generate(class_label: ClassLabel) -> Self {
        Self {
            kind: TaskKind::Generate,
            condition_modality: None,
            class_label,
            guidance_weight: 1.0,
        }
    }

    pub fn condition(modality: usize, class_label: ClassLabel) -> Self {
        Self {
            kind: TaskKind::Condition,
            condition_modality: Some(modality),
            class_label,
            guidance_weight: 1.0,
        }
    }

    /// rgb (registry slot 0) is the condition.
    pub fn understand() -> Self {
        Self {
            kind: TaskKind::Understand,
            condition_modality: Some(0),
            class_label: None,
            guidance_weight: 1.0,
        }
    }

    pub fn with_guidance(mut self, w: f64) -> Self {
        self.guidance_weight = w;
        self
    }

    pub fn validate(&self, registry: &ModalityRegistry, num_classes: usize) -> Result<()> {
        match (self.kind, self.condition_modality) {
            (TaskKind::Generate, None) => {}
            (TaskKind::Generate, Some(_)) => return arg("generate task cannot have a condition"),
            (TaskKind::Understand, Some(0)) => {}
            (TaskKind::Understand, _) => return arg("understand task conditions on rgb"),
            (TaskKind::Condition, Some(m)) if m > 0 && m < registry.len() => {}
            (TaskKind::Condition, _) => {
                return arg("condition task needs a non-rgb registered modality")
            }
        }
        if let Some(c) = self.class_label {
            if c as usize >= num_classes {
                return arg(format!("class label {c} out of range (<{num_classes})"));
            }
        }
        if !(self.guidance_weight >= 0.0) {
            return arg("guidance weight must be nonnegative");
        }
        Ok(())
    }

    /// Task embedding row: generate 0, understand 1, condition-on-m `1 + m`.
    /// Appending a modality adds a row without moving existing ones.
    pub fn task_id(&self) -> usize {
        match self.kind {
            TaskKind::Generate => 0,
            TaskKind::Understand => 1,
            TaskKind::Condition => 1 + self.condition_modality.unwrap_or(0),
        }
    }

    pub fn label(&self, registry: &ModalityRegistry) -> String {
        match self.kind {
            TaskKind::Generate => "generate".into(),
            TaskKind::Understand => "understand".into(),
            TaskKind::Condition => format!(
                "cond-{}",
                self.condition_modality
                    .filter(|m| *m < registry.len())
                    .map(|m| registry.get(m).name.clone())
                    .unwrap_or_else(|| "?".into())
            ),
        }
    }
}

/// Number of task embeddings for a registry of `num_modalities`.
pub fn num_tasks(num_modalities: usize) -> usize {
    1 + num_modalities
}

/// One diffusion time per registered modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeVector(pub Vec<f64>);

impl TimeVector {
    pub fn uniform(t: f64, num_modalities: usize) -> Self {
        Self(vec![t; num_modalities])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, m: usize) -> f64 {
        self.0[m]
    }

    /// Checks the schedule invariants for `task`.
    pub fn check(&self, task: &TaskSpec) -> Result<()> {
        if self.0.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Validation(format!("time out of [0, 1]: {:?}", self.0)));
        }
        let cond = task.condition_modality;
        if let Some(c) = cond {
            if !(CONDITION_T_MIN..=1.0).contains(&self.0[c]) {
                return Err(Error::Validation(format!(
                    "condition time {} outside [{CONDITION_T_MIN}, 1]",
                    self.0[c]
                )));
            }
        }
        let mut others = self
            .0
            .iter()
            .enumerate()
            .filter(|(m, _)| Some(*m) != cond)
            .map(|(_, t)| *t);
        if let Some(first) = others.next() {
            if others.any(|t| t != first) {
                return Err(Error::Validation(format!(
                    "non-condition modalities must share one time: {:?}",
                    self.0
                )));
            }
        }
        Ok(())
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return arg(format!("t = {t} outside [0, 1]"));
    }
    Ok(())
}

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return arg(format!("shape mismatch: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

/// `t * x0 + (1 - t) * eps`. Endpoints are returned verbatim.
pub fn blend(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    check_shapes(x0, eps)?;
    if t == 1.0 {
        return Ok(x0.to_vec());
    }
    if t == 0.0 {
        return Ok(eps.to_vec());
    }
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| t * x + (1.0 - t) * e)
        .collect())
}

/// `x0 - eps`.
pub fn velocity_target(x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_shapes(x0, eps)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| x - e).collect())
}

/// `eps = x_t - t * v`.
pub fn recover_noise(x_t: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    check_shapes(x_t, v)?;
    Ok(x_t.iter().zip(v).map(|(x, v)| x - t * v).collect())
}

/// `x0 = x_t + (1 - t) * v`.
pub fn recover_data(x_t: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    check_shapes(x_t, v)?;
    Ok(x_t.iter().zip(v).map(|(x, v)| x + (1.0 - t) * v).collect())
}

/// Score of the noised marginal implied by a velocity prediction:
/// `-(x_t - t * v) / (1 - t)`.
pub fn score_from_velocity(x_t: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
    check_shapes(x_t, v)?;
    if !(0.0..=1.0).contains(&t) {
        return arg(format!("t = {t} outside [0, 1)"));
    }
    if t >= 1.0 - SCORE_EPS {
        return Err(Error::SingularScore { t });
    }
    let inv = 1.0 / (1.0 - t);
    Ok(x_t
        .iter()
        .zip(v)
        .map(|(x, v)| -(x - t * v) * inv)
        .collect())
}

/// Draws per-modality times: one shared draw for all non-condition
/// modalities, and an independent near-clean draw for the condition modality.
pub fn sample_time_vector<R: Rng + ?Sized>(
    task: &TaskSpec,
    num_modalities: usize,
    rng: &mut R,
) -> TimeVector {
    let shared: f64 = rng.random::<f64>();
    let mut t = vec![shared; num_modalities];
    if let Some(c) = task.condition_modality {
        if c < num_modalities {
            t[c] = rng.random_range(CONDITION_T_MIN..=1.0);
        }
    }
    TimeVector(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blend_examples() {
        let x0 = [0.3, -1.7, 2.0];
        let eps = [1.1, 0.4, -1.0];
        assert_eq!(blend(&x0, &eps, 1.0).unwrap(), x0.to_vec());
        assert_eq!(blend(&x0, &eps, 0.0).unwrap(), eps.to_vec());
        let v = blend(&[2.0], &[-1.0], 0.25).unwrap();
        assert!((v[0] - (-0.25)).abs() < 1e-15);
        assert!(blend(&x0, &eps, 1.5).is_err());
        assert!(blend(&x0, &eps[..2], 0.5).is_err());
    }

    #[test]
    fn velocity_examples() {
        assert_eq!(velocity_target(&[0.5, 0.2], &[0.5, 0.2]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(velocity_target(&[1.0], &[0.0]).unwrap(), vec![1.0]);
        let v = velocity_target(&[0.3], &[-0.7]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recover_examples() {
        let x_t = [0.4, -0.2];
        assert_eq!(recover_noise(&x_t, &[9.0, 3.0], 0.0).unwrap(), x_t.to_vec());
        assert_eq!(recover_noise(&x_t, &[0.0, 0.0], 0.7).unwrap(), x_t.to_vec());
        assert_eq!(recover_data(&x_t, &[9.0, 3.0], 1.0).unwrap(), x_t.to_vec());
        assert_eq!(recover_data(&x_t, &[0.0, 0.0], 0.3).unwrap(), x_t.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v = velocity_target(&x0, &eps).unwrap();
        for (t, check_noise) in [(0.37, true), (0.6, false)] {
            let xt = blend(&x0, &eps, t).unwrap();
            let (got, want) = if check_noise {
                (recover_noise(&xt, &v, t).unwrap(), &eps)
            } else {
                (recover_data(&xt, &v, t).unwrap(), &x0)
            };
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn score_examples() {
        // single datum x0 = 1, x_t = 0.2, t = 0.5; perfect v = x0 - eps
        let (x0, xt, t) = (1.0f64, 0.2f64, 0.5f64);
        let eps = (xt - t * x0) / (1.0 - t);
        let v = x0 - eps;
        let s = score_from_velocity(&[xt], &[v], t).unwrap()[0];
        let analytic = -(xt - t * x0) / ((1.0 - t) * (1.0 - t));
        assert!((analytic - 1.2).abs() < 1e-12);
        assert!((s - analytic).abs() < 1e-9);

        // eps_hat = 0
        assert_eq!(score_from_velocity(&[0.6], &[1.2], 0.5).unwrap(), vec![0.0]);
        // t = 0 is the standard normal score
        assert_eq!(score_from_velocity(&[0.8], &[5.0], 0.0).unwrap(), vec![-0.8]);
        assert!(matches!(
            score_from_velocity(&[0.8], &[5.0], 1.0 - 1e-7),
            Err(Error::SingularScore { .. })
        ));
    }

    #[test]
    fn time_vectors_follow_task_schedules() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tasks = [
            TaskSpec::generate(Some(1)),
            TaskSpec::condition(1, Some(1)),
            TaskSpec::condition(2, None),
            TaskSpec::condition(3, None),
            TaskSpec::understand(),
        ];
        for task in &tasks {
            for _ in 0..10_000 {
                let tv = sample_time_vector(task, 4, &mut rng);
                tv.check(task).unwrap();
                if task.kind == TaskKind::Generate {
                    assert!(tv.0.iter().all(|t| *t == tv.0[0]));
                }
            }
        }
        let tv = sample_time_vector(&TaskSpec::understand(), 4, &mut rng);
        assert!(tv.0[0] >= CONDITION_T_MIN);
        assert_eq!(tv.0[1], tv.0[2]);
        assert_eq!(tv.0[2], tv.0[3]);
    }

    #[test]
    fn task_ids_and_validation() {
        let reg = ModalityRegistry::standard();
        assert_eq!(TaskSpec::generate(None).task_id(), 0);
        assert_eq!(TaskSpec::understand().task_id(), 1);
        assert_eq!(TaskSpec::condition(1, None).task_id(), 2);
        assert_eq!(TaskSpec::condition(3, None).task_id(), 4);
        assert_eq!(num_tasks(reg.len()), 5);
        assert!(TaskSpec::condition(0, None).validate(&reg, 10).is_err());
        assert!(TaskSpec::condition(4, None).validate(&reg, 10).is_err());
        assert!(TaskSpec::generate(Some(10)).validate(&reg, 10).is_err());
        let mut bad = TaskSpec::understand();
        bad.condition_modality = Some(2);
        assert!(bad.validate(&reg, 10).is_err());
        assert_eq!(TaskSpec::condition(2, None).label(&reg), "cond-normal");
    }

    proptest! {
        #[test]
        fn inversion_identities(
            x0 in proptest::collection::vec(-3.0f64..3.0, 1..16),
            seed in any::<u64>(),
            t in 0.0f64..0.999,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps: Vec<f64> = x0.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = velocity_target(&x0, &eps).unwrap();
            let xt = blend(&x0, &eps, t).unwrap();
            let e = recover_noise(&xt, &v, t).unwrap();
            let d = recover_data(&xt, &v, t).unwrap();
            for i in 0..x0.len() {
                prop_assert!((e[i] - eps[i]).abs() <= 1e-5 * eps[i].abs().max(1.0));
                prop_assert!((d[i] - x0[i]).abs() <= 1e-5 * x0[i].abs().max(1.0));
            }
        }

        #[test]
        fn blend_derivative_is_velocity(x0 in -3.0f64..3.0, eps in -3.0f64..3.0, t in 0.001f64..0.998) {
            let h = 1e-3;
            let up = blend(&[x0], &[eps], t + h).unwrap()[0];
            let down = blend(&[x0], &[eps], t - h).unwrap()[0];
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - (x0 - eps)).abs() < 1e-4);
        }
    }
}
