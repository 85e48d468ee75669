use std::path::Path;

use super::config::Config;
use super::report::emit_report;
use crate::data::{
    balanced_test_sample, dirichlet_partition, generate_synthetic, split_holdout, load_embeddings, write_embeddings,
    Dataset, Image, LabeledSample, Partition, SampleInput, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation, FairnessReport, FederationData};
use crate::numerics::derive_seed;

/// Train set with its client split plus the server's validation and test sets.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Training shards per client.
    pub partition: Partition,
    /// Per-client indices into `train` withheld from training.
    pub holdout: Vec<Vec<usize>>,
}

fn spec(cfg: &Config, n: usize, rho: f64, label: &[u8]) -> SyntheticSpec {
    SyntheticSpec {
        n,
        label_signal: cfg.data.label_signal,
        group_signal: cfg.data.group_signal,
        spurious_strength: rho,
        noise_sigma: cfg.data.noise_sigma,
        label_jitter: cfg.data.label_jitter,
        label_dropout: cfg.data.label_dropout,
        seed: derive_seed(cfg.seed, &[label]),
    }
}

/// Generates the synthetic splits. Train data follows the configured
/// label/group correlation; validation and test are drawn group-balanced
/// from a separate uncorrelated pool.
pub fn synthetic_splits(cfg: &Config) -> Result<(Dataset, Dataset, Dataset)> {
    let d = &cfg.data;
    // The pool is sized so that about `train_size` samples remain after the
    // client holdout.
    let pool_size = (d.train_size as f64 / (1.0 - d.client_holdout)).round() as usize;
    let train = generate_synthetic(&spec(cfg, pool_size, d.spurious_strength, b"train"))?;
    let pool = generate_synthetic(&spec(cfg, 2 * (d.val_size + d.test_size), 0.0, b"heldout"))?;
    let test_idx = balanced_test_sample(&pool, d.test_size, &[], derive_seed(cfg.seed, &[b"test"]))?;
    let val_idx = balanced_test_sample(&pool, d.val_size, &test_idx, derive_seed(cfg.seed, &[b"val"]))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Dataset>();
    Ok((train, pick(&val_idx), pick(&test_idx)))
}

/// Reinterprets flat vectors read from disk: image-sized rows become images,
/// embedding-width rows stay feature vectors.
fn adapt_inputs(cfg: &Config, samples: Vec<LabeledSample>, path: &Path) -> Result<Dataset> {
    let e = &cfg.fed.encoder;
    let pixels = e.image_height * e.image_width;
    if pixels == e.dim {
        return Err(Error::invalid(format!(
            "{}: image size equals the embedding width, so rows are ambiguous",
            path.display()
        )));
    }
    samples
        .into_iter()
        .map(|s| {
            let values = s.values().to_vec();
            let input = if values.len() == pixels {
                SampleInput::Image(Image {
                    height: e.image_height,
                    width: e.image_width,
                    pixels: values,
                })
            } else if values.len() == e.dim {
                SampleInput::Features(values)
            } else {
                return Err(Error::invalid(format!(
                    "{}: rows have width {}, expected {pixels} (pixels) or {} (features)",
                    path.display(),
                    values.len(),
                    e.dim
                )));
            };
            Ok(LabeledSample { input, ..s })
        })
        .collect()
}

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

pub fn prepare_data(cfg: &Config) -> Result<ExperimentData> {
    let (train, val, test) = match &cfg.data.data_dir {
        None => synthetic_splits(cfg)?,
        Some(dir) => {
            let mut loaded = Vec::with_capacity(3);
            for name in SPLIT_FILES {
                let path = dir.join(name);
                let file = load_embeddings(&path)?;
                loaded.push(adapt_inputs(cfg, file.samples, &path)?);
            }
            let test = loaded.pop().expect("three splits");
            let val = loaded.pop().expect("three splits");
            (loaded.pop().expect("three splits"), val, test)
        }
    };
    let partition = dirichlet_partition(
        &train,
        cfg.clients,
        cfg.alpha,
        derive_seed(cfg.seed, &[b"partition"]),
    )?;
    let (partition, holdout) = split_holdout(
        &train,
        partition,
        cfg.data.client_holdout,
        derive_seed(cfg.seed, &[b"holdout"]),
    )?;
    Ok(ExperimentData {
        train,
        val,
        test,
        partition,
        holdout,
    })
}

/// Writes the synthetic splits in the line-based vector format.
pub fn write_splits(cfg: &Config, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train, val, test) = synthetic_splits(cfg)?;
    for (name, split) in SPLIT_FILES.into_iter().zip([&train, &val, &test]) {
        write_embeddings(&dir.join(name), split)?;
    }
    Ok(())
}

/// Runs federation for `cfg` without touching the filesystem.
pub fn execute(cfg: &Config) -> Result<FairnessReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_federation(
        &cfg.federation(),
        FederationData {
            train: &data.train,
            shards: &data.partition.shards,
            holdout: &data.holdout,
            val: &data.val,
            test: &data.test,
        },
    )
}

/// Runs and writes the report files into `dir`.
pub fn run_experiment(cfg: &Config, dir: &Path) -> Result<FairnessReport> {
    let report = execute(cfg)?;
    emit_report(cfg, &report, dir)?;
    Ok(report)
}
