//! `etta gen-data`: writes the train and test datasets (and per-class
//! preview images) described by the config.

use etta::data::{export_dataset, gen_dataset, write_ppm, CLASS_NAMES};
use etta::{Result, Tensor};

use crate::config::{derive_seed, RunConfig};

pub fn run(config: &RunConfig) -> Result<()> {
    let (train, train_labels) =
        gen_dataset(config.gen.train_per_class, &config.data, derive_seed(config.seed, 0))?;
    let (test, test_labels) =
        gen_dataset(config.gen.test_per_class, &config.data, derive_seed(config.seed, 1))?;

    let train_path = &config.paths.dataset_train;
    let test_path = &config.paths.dataset_test;
    if let Some(dir) = train_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    if let Some(dir) = test_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    export_dataset(train_path, &train, &train_labels, config.data.num_classes)?;
    export_dataset(test_path, &test, &test_labels, config.data.num_classes)?;

    if config.gen.previews {
        let dir = train_path
            .parent()
            .map(|d| d.join("previews"))
            .unwrap_or_else(|| "previews".into());
        std::fs::create_dir_all(&dir)?;
        let per = train.len() / train.shape()[0];
        for class in 0..config.data.num_classes {
            // The dataset is class-interleaved, so sample i == class works.
            let img = Tensor::new(
                train.shape()[1..].to_vec(),
                train.data()[class * per..(class + 1) * per].to_vec(),
            )?;
            write_ppm(&img, &dir.join(format!("{}.ppm", CLASS_NAMES[class])))?;
        }
    }

    if let Some(dir) = train_path.parent() {
        config.write_resolved(dir, "gen-data")?;
    }
    println!(
        "wrote {} train and {} test images to {} / {}",
        train_labels.len(),
        test_labels.len(),
        train_path.display(),
        test_path.display()
    );
    Ok(())
}
