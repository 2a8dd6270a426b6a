//! Times training steps at a given scale: `step_time [steps] [batch]`.

use std::time::Instant;

use mmgen_core::model::ModelConfig;
use mmgen_core::synth::generate_dataset;
use mmgen_core::train::{TrainConfig, TrainState};

fn main() -> mmgen_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let batch: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let model = ModelConfig::desk();
    let data = generate_dataset(64, 0, model.image_size, &model.registry)?;
    let cfg = TrainConfig {
        batch_size: batch,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(model, cfg)?;
    println!("parameters: {}", state.params.num_scalars());
    let start = Instant::now();
    state.train(&data, steps, &|| false, &mut |_, r| {
        println!("{} ({:.1}s)", r.log_line(), start.elapsed().as_secs_f64());
        Ok(())
    })?;
    println!("seconds per step: {:.2}", start.elapsed().as_secs_f64() / steps as f64);
    Ok(())
}
