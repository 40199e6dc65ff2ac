//! Times one training step and one evaluation pass of the MNIST preset.
//!
//! cargo run --release --example step_timing -- [batch]

use std::time::Instant;

use intensivenet::autograd::Tape;
use intensivenet::layers::{cross_entropy, ForwardCtx};
use intensivenet::model::{Model, ModelConfig};
use intensivenet::rng::stream_rng;
use intensivenet::tensor::{Shape, Tensor};
use mimalloc::MiMalloc;
use rand::Rng;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(128);
    let model = Model::new(ModelConfig::mnist()).expect("preset is valid");
    let mut rng = stream_rng(0, "timing", 0);
    let x = Tensor::from_fn(Shape::new(n, 28, 28, 1).expect("batch > 0"), |_| {
        rng.random::<f64>()
    });
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();

    let start = Instant::now();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(stream_rng(0, "dropout", 0));
    let xv = tape.constant(x.clone());
    let z = model.forward(&mut tape, &mut ctx, xv).expect("forward");
    let loss = cross_entropy(&mut tape, z, &labels).expect("loss");
    let forward = start.elapsed();
    tape.backward(loss).expect("backward");
    let step = start.elapsed();

    let start = Instant::now();
    model.logits(&x).expect("eval forward");
    println!(
        "batch {n}: forward {:.2?}, backward {:.2?}, eval {:.2?}",
        forward,
        step - forward,
        start.elapsed()
    );
}
