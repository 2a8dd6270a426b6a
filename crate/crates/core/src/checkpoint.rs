//! Training checkpoints.
//!
//! Layout (little-endian): `MMCK`, version u32, metadata length u32, JSON
//! metadata, then every tensor as f64 in metadata order, four times over:
//! parameters, EMA shadow, Adam first moments, Adam second moments.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::model::{MmDiT, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::train::{Adam, TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;
const MAX_METADATA: usize = 4 << 20;
const MAX_TENSORS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed as hex.
    pub seed: String,
    pub stream: u64,
    /// u128 word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return format_err("rng seed must be 64 hex digits");
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format("rng seed is not hex".into()))?;
        }
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub adam_steps: Vec<u64>,
}

/// Decoded checkpoint contents, before the model is rebuilt.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam_m: Vec<Matrix>,
    pub adam_v: Vec<Matrix>,
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let meta = Metadata {
        model: state.model.config().clone(),
        train: state.config.clone(),
        step: state.step,
        rng: RngState::capture(&state.rng),
        tensors: state
            .params
            .iter()
            .map(|(_, name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        adam_steps: state.adam.steps.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 32 * state.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |m: &Matrix| {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    state.params.iter().for_each(|(_, _, m)| put(m));
    state.ema.iter().for_each(|(_, _, m)| put(m));
    state.adam.m.iter().for_each(&mut put);
    state.adam.v.iter().for_each(&mut put);
    Ok(out)
}

/// Parses checkpoint bytes. Sizes are checked against the byte count before
/// anything is allocated.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return format_err("not a checkpoint (bad magic)");
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let meta_len = word(8) as usize;
    if meta_len > MAX_METADATA || bytes.len() - 12 < meta_len {
        return format_err("checkpoint metadata truncated or oversized");
    }
    let meta: Metadata = serde_json::from_slice(&bytes[12..12 + meta_len])
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.tensors.len() > MAX_TENSORS || meta.adam_steps.len() != meta.tensors.len() {
        return format_err("checkpoint tensor table is inconsistent");
    }
    let mut scalars: usize = 0;
    for t in &meta.tensors {
        scalars = t
            .rows
            .checked_mul(t.cols)
            .and_then(|n| scalars.checked_add(n))
            .ok_or_else(|| Error::Format("checkpoint tensor sizes overflow".into()))?;
    }
    let body = bytes.len() - 12 - meta_len;
    if scalars.checked_mul(32) != Some(body) {
        return format_err(format!(
            "checkpoint body has {body} bytes, tensors need {}",
            scalars.saturating_mul(32)
        ));
    }
    let mut at = 12 + meta_len;
    let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
        let n = rows * cols;
        let data: Vec<f64> = bytes[at..at + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * n;
        if data.iter().any(|v| !v.is_finite()) {
            return format_err("non-finite value in checkpoint");
        }
        Ok(Matrix::from_vec(rows, cols, data))
    };
    let mut params = ParamStore::new();
    for t in &meta.tensors {
        if params.id(&t.name).is_some() {
            return format_err(format!("duplicate tensor {}", t.name));
        }
        let m = take(t.rows, t.cols)?;
        params.insert(t.name.clone(), m);
    }
    let mut ema = ParamStore::new();
    for t in &meta.tensors {
        let m = take(t.rows, t.cols)?;
        ema.insert(t.name.clone(), m);
    }
    let mut adam_m = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        adam_m.push(take(t.rows, t.cols)?);
    }
    let mut adam_v = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        adam_v.push(take(t.rows, t.cols)?);
    }
    Ok(Checkpoint {
        meta,
        params,
        ema,
        adam_m,
        adam_v,
    })
}

impl Checkpoint {
    pub fn into_state(self) -> Result<TrainState> {
        let model = MmDiT::from_params(self.meta.model.clone(), &self.params)?;
        let rng = self.meta.rng.restore()?;
        let adam = Adam {
            m: self.adam_m,
            v: self.adam_v,
            steps: self.meta.adam_steps,
        };
        TrainState::from_parts(
            model,
            self.params,
            self.ema,
            Some(adam),
            self.meta.step,
            rng,
            self.meta.train,
        )
    }

    /// The EMA weights, ready for sampling.
    pub fn ema_model(&self) -> Result<(MmDiT, ParamStore)> {
        let model = MmDiT::from_params(self.meta.model.clone(), &self.ema)?;
        Ok((model, self.ema.clone()))
    }
}

impl TrainState {
    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(self)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_checkpoint(path)?.into_state()
    }

    /// Loads and checks that the checkpoint was trained with `model`.
    pub fn load_compatible(path: &Path, model: &ModelConfig) -> Result<Self> {
        let state = Self::load(path)?;
        if state.model.registry() != &model.registry {
            return Err(Error::Mismatch(
                "checkpoint modality registry differs from the configured one".into(),
            ));
        }
        if state.model.config() != model {
            return Err(Error::Mismatch(
                "checkpoint model configuration differs from the configured one".into(),
            ));
        }
        Ok(state)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::{ModalityRegistry, ModalitySpec};
    use crate::synth::{generate_dataset, NUM_SCENE_CLASSES};
    use rand::Rng;

    fn state() -> TrainState {
        let reg = ModalityRegistry::new(vec![ModalitySpec::rgb(), ModalitySpec::depth()]).unwrap();
        let model = ModelConfig {
            num_classes: NUM_SCENE_CLASSES as usize,
            ..ModelConfig::micro(reg)
        };
        let cfg = TrainConfig {
            batch_size: 3,
            micro_batch: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        TrainState::new(model, cfg).unwrap()
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(3);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..20 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let data = generate_dataset(6, 9, 4, state().registry()).unwrap();
        let mut unbroken = state();
        unbroken.train(&data, 6, &|| false, &mut |_, _| Ok(())).unwrap();

        let mut first = state();
        first.train(&data, 3, &|| false, &mut |_, _| Ok(())).unwrap();
        let bytes = encode_checkpoint(&first).unwrap();
        let mut resumed = parse_checkpoint(&bytes).unwrap().into_state().unwrap();
        assert_eq!(resumed.params, first.params);
        assert_eq!(resumed.adam, first.adam);
        resumed.train(&data, 3, &|| false, &mut |_, _| Ok(())).unwrap();

        assert_eq!(resumed.step, 6);
        assert_eq!(resumed.params, unbroken.params);
        assert_eq!(resumed.ema, unbroken.ema);
    }

    #[test]
    fn file_round_trip_and_compatibility() {
        let s = state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.mmck");
        s.save(&path).unwrap();
        let back = TrainState::load_compatible(&path, s.model.config()).unwrap();
        assert_eq!(back.params, s.params);

        let mut other = s.model.config().clone();
        other.registry = ModalityRegistry::standard();
        assert!(matches!(
            TrainState::load_compatible(&path, &other),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = encode_checkpoint(&state()).unwrap();
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(parse_checkpoint(&magic).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(parse_checkpoint(&version).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(parse_checkpoint(&nan).is_err());
        assert!(parse_checkpoint(&[]).is_err());
    }
}
