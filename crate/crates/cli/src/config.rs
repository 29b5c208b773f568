use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use shelfnet::arch::{build_shelf, BackboneFamily, BackboneSpec, BlockGraph, ShelfSpec, Variant};
use shelfnet::tensor::SgdConfig;
use shelfnet::train::{load_dataset, synth_dataset, AugmentPolicy, LossKind, LrSchedule, SampleBatch, SynthConfig, TrainConfig};

/// One experiment, read from a JSON file. Every field has a default, so
/// `{}` is the toy run on synthetic shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// `resnet18`, `resnet50-dilated`, `mini8`, ...
    pub backbone: String,
    /// Shelf widths, finest level first. Derived from the backbone when unset.
    pub channels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub shared_weights: bool,
    pub dropout: Option<f64>,
    /// `[height, width]`.
    pub input: [usize; 2],
    /// Seeds weight init, data generation and batch order.
    pub seed: u64,
    pub train: TrainSection,
    pub data: DataSection,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Shelfnet,
            backbone: "mini8".into(),
            channels: None,
            num_classes: 4,
            shared_weights: true,
            dropout: None,
            input: [64, 64],
            seed: 0,
            train: TrainSection::default(),
            data: DataSection::default(),
            out_dir: PathBuf::from("runs/toy"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub base_lr: f64,
    pub total_iter: usize,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub eval_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            base_lr: 0.1,
            total_iter: 2000,
            power: 0.9,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: 4,
            loss: LossKind::CrossEntropy,
            eval_every: 500,
            checkpoint_every: 500,
            augment: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Generated shapes. Validation images come from further along the same
    /// stream, starting at `val_offset`.
    Synthetic {
        #[serde(default = "default_train_count")]
        train_count: usize,
        #[serde(default = "default_val_count")]
        val_count: usize,
        #[serde(default = "default_val_offset")]
        val_offset: usize,
        #[serde(default)]
        generator: SynthConfig,
    },
    /// Directories of `NNNN.ppm` / `NNNN.pgm` pairs.
    Directory { train: PathBuf, val: PathBuf },
}

fn default_train_count() -> usize {
    256
}

fn default_val_count() -> usize {
    32
}

fn default_val_offset() -> usize {
    100_000
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::Synthetic {
            train_count: default_train_count(),
            val_count: default_val_count(),
            val_offset: default_val_offset(),
            generator: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn shelf_spec(&self) -> Result<ShelfSpec> {
        let backbone = BackboneSpec::parse(&self.backbone)?;
        let mut spec = if backbone.family == BackboneFamily::Mini {
            let mut s = ShelfSpec::mini(self.variant, backbone.base_width, self.num_classes);
            s.backbone = backbone;
            s
        } else {
            ShelfSpec::new(self.variant, backbone, self.num_classes)
        };
        if let Some(c) = &self.channels {
            spec = spec.with_channels(c.clone());
        }
        if let Some(p) = self.dropout {
            spec.dropout = p;
        }
        spec.shared_weights = self.shared_weights;
        spec.validate().context("field `variant`/`backbone`/`channels`/`dropout`")?;
        Ok(spec)
    }

    pub fn graph(&self) -> Result<BlockGraph> {
        Ok(build_shelf(&self.shelf_spec()?)?)
    }

    pub fn input(&self) -> (usize, usize) {
        (self.input[0], self.input[1])
    }

    pub fn train_config(&self, steps: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps,
            batch_size: t.batch_size,
            schedule: LrSchedule {
                base_lr: t.base_lr,
                total_iter: t.total_iter,
                power: t.power,
            },
            sgd: SgdConfig {
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            },
            loss: t.loss,
            seed: self.seed,
            eval_every: t.eval_every,
            augment: t.augment.clone(),
        }
    }

    /// Checks every field before anything runs.
    pub fn validate(&self) -> Result<()> {
        self.shelf_spec()?;
        let (h, w) = self.input();
        if h == 0 || w == 0 {
            bail!("field `input`: size must be positive, got {h}x{w}");
        }
        let t = &self.train;
        self.train_config(t.total_iter)
            .validate(t.batch_size)
            .context("field `train`")?;
        if let DataSection::Synthetic {
            train_count,
            val_count,
            generator,
            ..
        } = &self.data
        {
            if *train_count < t.batch_size || *val_count == 0 {
                bail!("field `data`: need train_count >= batch_size ({}) and val_count >= 1", t.batch_size);
            }
            generator.validate((h, w), self.num_classes).context("field `data.generator`")?;
        }
        Ok(())
    }

    /// Training and validation sets.
    pub fn datasets(&self) -> Result<(SampleBatch<f32>, SampleBatch<f32>)> {
        match &self.data {
            DataSection::Synthetic {
                train_count,
                val_count,
                val_offset,
                generator,
            } => {
                let train = synth_dataset(self.seed, 0, *train_count, self.input(), self.num_classes, generator)?;
                let val = synth_dataset(self.seed, *val_offset, *val_count, self.input(), self.num_classes, generator)?;
                Ok((train, val))
            }
            DataSection::Directory { train, val } => Ok((
                load_dataset(train, self.num_classes).with_context(|| format!("training set {}", train.display()))?,
                load_dataset(val, self.num_classes).with_context(|| format!("validation set {}", val.display()))?,
            )),
        }
    }
}
