//! Run configuration: a flat key=value file (`#` comments allowed) plus
//! `--set key=value` overrides. Every key has a documented default; unknown
//! keys are rejected with the full key list.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::body::PartLabel;
use crate::cvae::TrainSchedule;
use crate::data::DatasetConfig;
use crate::fit::FitConfig;
use crate::geom::VirtualCameraConfig;
use crate::loss::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{key}'; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("config key '{key}': cannot parse '{value}' as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
    #[error("config line {line} is not 'key = value': {text}")]
    BadLine { line: usize, text: String },
    #[error("io error reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
}

macro_rules! run_config {
    ($( $key:literal => $field:ident : $ty:ty = $default:expr, $doc:literal; )*) => {
        /// All tunable run parameters.
        #[derive(Debug, Clone)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[ $( $key, )* ];

            /// (key, default, description) rows for documentation.
            pub fn schema() -> Vec<(&'static str, String, &'static str)> {
                let d = RunConfig::default();
                vec![ $( ($key, format!("{:?}", d.$field), $doc), )* ]
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(
                        $key => {
                            self.$field = value.trim().parse::<$ty>().map_err(|_| {
                                ConfigError::BadValue {
                                    key: key.to_string(),
                                    value: value.to_string(),
                                    ty: stringify!($ty),
                                }
                            })?;
                        }
                    )*
                    _ => {
                        return Err(ConfigError::UnknownKey {
                            key: key.to_string(),
                            valid: Self::KEYS.join(", "),
                        });
                    }
                }
                Ok(())
            }
        }
    };
}

run_config! {
    "seed" => seed: u64 = 0, "Master seed for synthesis, sampling, and evaluation.";
    "template.seed" => template_seed: u64 = 7, "Seed for the body template's pose decoder.";
    "rooms" => rooms: usize = 8, "Number of procedural rooms in the dataset.";
    "samples" => samples: usize = 2000, "Total interaction samples across all rooms.";
    "sdf.dims" => sdf_dims: usize = 48, "SDF voxel grid nodes per axis.";
    "sdf.padding" => sdf_padding: f64 = 0.3, "SDF bounding-box padding in meters.";
    "refine.edge" => refine_edge: f64 = 0.15, "Max scene edge length for contact vertex queries (m).";
    "camera.noise_sigma" => cam_noise_sigma: f64 = 0.15, "Gaussian sigma for virtual-camera translation jitter (m).";
    "camera.dist_min" => cam_dist_min: f64 = 1.65, "Minimum camera-to-body distance (m).";
    "camera.dist_max" => cam_dist_max: f64 = 6.5, "Maximum camera-to-body distance (m).";
    "camera.count" => cam_count: usize = 6, "Virtual cameras requested per placement.";
    "camera.max_depth" => cam_max_depth: f64 = 10.0, "Depth normalization bound (m).";
    "train.arch" => arch: String = "s1".to_string(), "Generator architecture: s1 or s2.";
    "train.epochs" => epochs: usize = 30, "Training epochs.";
    "train.lr" => learning_rate: f64 = 3e-4, "Adam learning rate for training.";
    "train.batch" => batch_size: usize = 32, "Batch size.";
    "train.kl_ramp" => kl_ramp_epochs: usize = 10, "Epochs over which the KL weight ramps to full.";
    "train.hs" => use_hs: bool = false, "Enable human-scene interaction losses late in training.";
    "train.hs_start" => hs_start_fraction: f64 = 0.75, "Fraction of epochs after which interaction losses start.";
    "train.model_seed" => model_seed: u64 = 1, "Weight initialization seed.";
    "weights.kl" => alpha_kl: f64 = 0.1, "KL divergence weight (full, after ramp).";
    "weights.vposer" => alpha_vp: f64 = 0.001, "Pose-norm regularizer weight.";
    "weights.contact" => alpha_cont: f64 = 0.001, "Training contact weight.";
    "weights.collision" => alpha_coll: f64 = 0.01, "Training collision weight.";
    "weights.fit_contact" => alpha_1: f64 = 0.1, "Fitting contact weight.";
    "weights.fit_collision" => alpha_2: f64 = 0.5, "Fitting collision weight.";
    "weights.fit_vposer" => alpha_3: f64 = 0.01, "Fitting pose-norm weight.";
    "weights.geman_sigma" => geman_sigma: f64 = 0.1, "Geman-McClure scale (m).";
    "fit.lr" => fit_lr: f64 = 0.01, "Adam learning rate for refinement.";
    "fit.iters" => fit_iters: usize = 300, "Max refinement iterations.";
    "sample.n" => sample_n: usize = 200, "Bodies to generate per sample run.";
    "eval.k" => kmeans_k: usize = 20, "k for the diversity metric's k-means.";
    "contact.parts" => contact_parts: String = default_contact_parts(), "Comma-separated contact part labels.";
    "traverse.steps" => traverse_steps: usize = 7, "Steps per latent traversal line.";
    "traverse.lo" => traverse_lo: f64 = -3.0, "Traversal range start.";
    "traverse.hi" => traverse_hi: f64 = 3.0, "Traversal range end.";
}

fn default_contact_parts() -> String {
    crate::body::DEFAULT_CONTACT_PARTS
        .iter()
        .map(|p| p.name())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Load `key = value` lines; later lines win.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        config.merge_file(path)?;
        Ok(config)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine { line: i + 1, text: raw.to_string() });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse_contact_parts(&self) -> Result<Vec<PartLabel>, ConfigError> {
        self.contact_parts
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<PartLabel>().map_err(ConfigError::from))
            .collect()
    }

    pub fn loss_weights(&self) -> LossWeights<f64> {
        LossWeights {
            alpha_kl: self.alpha_kl,
            alpha_vp: self.alpha_vp,
            alpha_cont: self.alpha_cont,
            alpha_coll: self.alpha_coll,
            alpha_1: self.alpha_1,
            alpha_2: self.alpha_2,
            alpha_3: self.alpha_3,
            geman_sigma: self.geman_sigma,
        }
    }

    pub fn camera_config(&self) -> VirtualCameraConfig<f64> {
        VirtualCameraConfig {
            noise_sigma: self.cam_noise_sigma,
            dist_min: self.cam_dist_min,
            dist_max: self.cam_dist_max,
            max_depth: self.cam_max_depth,
            ..VirtualCameraConfig::default()
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            rooms: self.rooms,
            samples: self.samples,
            seed: self.seed,
            sdf_dims: [self.sdf_dims; 3],
            sdf_padding: self.sdf_padding,
            camera: self.camera_config(),
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            kl_ramp_epochs: self.kl_ramp_epochs,
            hs_start_fraction: self.hs_start_fraction,
            batch_size: self.batch_size,
            use_hs: self.use_hs,
            seed: self.seed,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.fit_lr,
            max_iters: self.fit_iters,
            refine_edge: self.refine_edge,
            ..FitConfig::default()
        }
    }
}
