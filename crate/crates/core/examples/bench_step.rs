//! Rough step-time probe for the desk configuration.
use duomark_core::config::RunConfig;
use duomark_core::data::Dataset;
use duomark_core::training::{batch_messages, TrainerState};

fn main() {
    let c = RunConfig::preset("desk").unwrap();
    let dataset = Dataset::<f32>::load(&c.data, c.image_hw(), c.seed).unwrap();
    let mut state = TrainerState::<f32>::new(&c).unwrap();
    let start = std::time::Instant::now();
    let steps = 30u64;
    for i in 0..steps {
        let x = dataset.train_batch(c.train.batch_size, c.image_hw(), c.seed, i).unwrap();
        let msgs = batch_messages(c.seed, i, c.train.batch_size, c.model.message_length);
        state.train_step(&x, &msgs).unwrap();
    }
    let dt = start.elapsed();
    println!("{} steps in {:?} => {:.1} ms/step", steps, dt, dt.as_secs_f64() * 1000.0 / steps as f64);
}
