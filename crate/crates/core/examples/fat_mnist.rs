//! Float vs calibration-only vs fine-tuned accuracy on the bundled MNIST CNN.
//!
//! cargo run --release -p fat-core --example fat_mnist -- [model-dir] [scheme]
//!
//! `scheme` is one of `scalar-sym` (default), `vector-sym`, `scalar-asym`,
//! `vector-asym`. The float model is trained and saved on first use.

use std::path::Path;
use std::time::Instant;

use fat_core::engine::{compile, run_int8_batched};
use fat_core::io::{load_model, save_model, select_calibration, select_fraction, Dataset};
use fat_core::quant::{build_params, calibrate, Granularity, QuantMode, QuantPlan, QuantScheme};
use fat_core::train::{accuracy, top1, train_classifier, FloatTrainConfig};
use fat_core::tune::{finetune, student_logits, Student, TrainConfig};
use fat_core::zoo::mnist_cnn;

fn main() -> fat_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model_dir = Path::new(args.get(1).map_or("target/mnist_bn", String::as_str)).to_path_buf();
    let scheme = match args.get(2).map_or("scalar-sym", String::as_str) {
        "scalar-sym" => QuantScheme::uniform(8, QuantMode::Symmetric, Granularity::PerTensor),
        "vector-sym" => QuantScheme::uniform(8, QuantMode::Symmetric, Granularity::PerChannel { axis: 0 }),
        "scalar-asym" => QuantScheme::uniform(8, QuantMode::Asymmetric, Granularity::PerTensor),
        "vector-asym" => QuantScheme::uniform(8, QuantMode::Asymmetric, Granularity::PerChannel { axis: 0 }),
        s => panic!("unknown scheme {s}"),
    };
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k");
    let train = Dataset::load_idx(
        dir.join("train-images-idx3-ubyte.gz"),
        Some(&dir.join("train-labels-idx1-ubyte.gz")),
    )?;
    let test = Dataset::load_idx(
        dir.join("test-images-idx3-ubyte.gz"),
        Some(&dir.join("test-labels-idx1-ubyte.gz")),
    )?;
    let manifest = model_dir.join("model.json");
    let g = if manifest.exists() {
        load_model(&manifest)?
    } else {
        let mut g = mnist_cnn(0);
        train_classifier(&mut g, &train, &FloatTrainConfig::default())?;
        save_model(&g, &manifest)?;
        g
    };
    let g = fat_core::transforms::fold_batch_norm(&g)?;
    let g = if args.get(3).map(String::as_str) == Some("rescale") {
        let calib = select_calibration(&train, 100, 0)?;
        fat_core::transforms::dws_rescale_default(&g, calib.images())?.0
    } else {
        g
    };
    let labels = test.labels().expect("labeled");
    let float = accuracy(&g, &test, 100)?;
    println!("float {float:.4}");

    let plan = QuantPlan::new(&g)?;
    let calib = select_calibration(&train, 100, 0)?;
    let stats = calibrate(&g, &plan, calib.images(), 100)?;
    let cfg = build_params(&g, &plan, &stats, scheme)?;
    let student = Student::new(&g)?;
    let acc =
        |cfg| -> fat_core::Result<f64> { Ok(top1(&student_logits(&student, cfg, None, test.images(), 100)?, labels)) };
    let base = acc(&cfg)?;
    println!("calibration-only {base:.4} (drop {:.4})", float - base);

    let unl = select_fraction(&train, 0.1, 1)?;
    let t = Instant::now();
    let tc = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let out = finetune(&g, &cfg, None, unl.images(), &tc)?;
    println!("epoch rmse {:?} in {:.1?}", out.epoch_losses, t.elapsed());
    let tuned = acc(&out.config)?;
    println!("fine-tuned {tuned:.4} (drop {:.4})", float - tuned);
    let m = compile(&g, &out.config, None)?;
    let z = run_int8_batched(&m, test.images(), 100)?;
    println!("int8 engine {:.4}", top1(&z, labels));
    Ok(())
}
