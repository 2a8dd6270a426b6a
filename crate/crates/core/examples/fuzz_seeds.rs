//! Writes seed inputs for the fuzz targets: `fuzz_seeds <corpus dir>`.

use std::path::Path;

use mmgen_core::checkpoint::encode_checkpoint;
use mmgen_core::config::RunConfig;
use mmgen_core::features::{encode_feature_records, FeatureRecord};
use mmgen_core::image::RgbImage;
use mmgen_core::modality::{ModalityRegistry, ModalitySpec};
use mmgen_core::model::ModelConfig;
use mmgen_core::synth::{generate_dataset, write_dataset, NUM_SCENE_CLASSES};
use mmgen_core::tensor::Matrix;
use mmgen_core::train::{TrainConfig, TrainState};

fn put(root: &Path, target: &str, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let dir = root.join(target);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(name), bytes)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into());
    let root = Path::new(&root);
    let reg = ModalityRegistry::standard();

    let mut data = Vec::new();
    write_dataset(&mut data, &reg, &generate_dataset(2, 0, 4, &reg)?)?;
    put(root, "dataset", "two_4x4", &data)?;
    let mut grown = reg.clone();
    grown.append(ModalitySpec::edge(1))?;
    let mut data = Vec::new();
    write_dataset(&mut data, &grown, &generate_dataset(1, 1, 4, &grown)?)?;
    put(root, "dataset", "edge_4x4", &data)?;

    let model = ModelConfig {
        num_classes: NUM_SCENE_CLASSES as usize,
        ..ModelConfig::micro(ModalityRegistry::new(vec![ModalitySpec::rgb(), ModalitySpec::depth()])?)
    };
    let state = TrainState::new(model, TrainConfig::default())?;
    put(root, "checkpoint", "micro", &encode_checkpoint(&state)?)?;

    let records = vec![
        FeatureRecord { sample_id: 0, features: Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]) },
        FeatureRecord { sample_id: 7, features: Matrix::from_vec(1, 1, vec![1.0]) },
    ];
    put(root, "feature_records", "two", &encode_feature_records(&records))?;

    put(root, "registry", "standard", reg.to_text().as_bytes())?;
    put(root, "registry", "edge", grown.to_text().as_bytes())?;

    let mut img = RgbImage::new(3, 2, [10, 200, 30]);
    img.put(1, 1, [255, 0, 255]);
    put(root, "ppm", "3x2", &img.to_ppm())?;
    put(root, "ppm", "comment_maxval15", b"P6\n# c\n1 1\n15\n\x0f\x00\x07")?;

    put(root, "run_config", "default", RunConfig::default().to_toml().as_bytes())?;
    put(root, "run_config", "partial", b"[model]\nimage_size = 8\npatch_size = 2\n\n[sampler]\nnfe = 4\nmethod = \"sde_euler_maruyama\"\n")?;
    Ok(())
}
