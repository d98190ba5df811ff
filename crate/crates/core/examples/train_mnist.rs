//! Trains the bundled MNIST CNN and reports test accuracy.
//!
//! cargo run --release -p fat-core --example train_mnist -- [epochs] [seed]

use std::path::Path;

use fat_core::io::Dataset;
use fat_core::train::{accuracy, train_classifier, FloatTrainConfig};
use fat_core::zoo::mnist_cnn;

fn main() -> fat_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(10, |s| s.parse().expect("epochs"));
    let seed = args.get(2).map_or(0, |s| s.parse().expect("seed"));
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k");
    let train = Dataset::load_idx(
        dir.join("train-images-idx3-ubyte.gz"),
        Some(&dir.join("train-labels-idx1-ubyte.gz")),
    )?;
    let test = Dataset::load_idx(
        dir.join("test-images-idx3-ubyte.gz"),
        Some(&dir.join("test-labels-idx1-ubyte.gz")),
    )?;
    let mut g = mnist_cnn(seed);
    let cfg = FloatTrainConfig {
        epochs,
        seed,
        ..FloatTrainConfig::default()
    };
    let t = std::time::Instant::now();
    let losses = train_classifier(&mut g, &train, &cfg)?;
    println!("losses {losses:?}");
    println!(
        "train {:.4} test {:.4} in {:.1?}",
        accuracy(&g, &train, 100)?,
        accuracy(&g, &test, 100)?,
        t.elapsed()
    );
    Ok(())
}
