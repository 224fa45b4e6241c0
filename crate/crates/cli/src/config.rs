//! Run configurations with scale presets mirroring the reference
//! experiments, JSON round-tripping, and config hashing for report rows.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pbdw_core::family::{AdmissibilityMode, SplitRule};
use pbdw_core::measurement::Placement;
use pbdw_core::model::Partition;

/// Preset sizes: `Desk` runs in minutes on a laptop, `Paper` reproduces the
/// reference resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

/// Coefficient decay regimes c_l for the splitting study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CoeffMode {
    /// c_l = 0.9 / l
    C09L1,
    /// c_l = 0.99 / l
    C099L1,
    /// c_l = 0.9 / l^2
    C09L2,
    /// c_l = 0.99 / l^2
    C099L2,
}

impl CoeffMode {
    pub fn coefficients(&self, d: usize) -> Vec<f64> {
        (1..=d)
            .map(|l| {
                let l = l as f64;
                match self {
                    CoeffMode::C09L1 => 0.9 / l,
                    CoeffMode::C099L1 => 0.99 / l,
                    CoeffMode::C09L2 => 0.9 / (l * l),
                    CoeffMode::C099L2 => 0.99 / (l * l),
                }
            })
            .collect()
    }

    /// Token used in CSV rows.
    pub fn token(&self) -> &'static str {
        match self {
            CoeffMode::C09L1 => "0.9l-1",
            CoeffMode::C099L1 => "0.99l-1",
            CoeffMode::C09L2 => "0.9l-2",
            CoeffMode::C099L2 => "0.99l-2",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Test1Config {
    pub n_per_side: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub m: usize,
    /// Box width as a multiple of the mesh size h.
    pub box_width_in_h: f64,
    pub seed: u64,
}

impl Test1Config {
    pub fn at_scale(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Test1Config {
                n_per_side: 32,
                n_train: 500,
                n_test: 200,
                m: 8,
                box_width_in_h: 2.0,
                seed,
            },
            Scale::Paper => Test1Config {
                n_per_side: 128,
                n_train: 5000,
                n_test: 2000,
                m: 8,
                box_width_in_h: 2.0,
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Test2Config {
    pub n_per_side: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Parameter dimensions to sweep (4 -> 2x2 partition, 16 -> 4x4).
    pub dims: Vec<usize>,
    /// Measurement dimensions to sweep (squares; evenly spaced).
    pub ms: Vec<usize>,
    pub c_modes: Vec<CoeffMode>,
    pub box_width_in_h: f64,
    pub k_max: usize,
    pub min_samples: usize,
    pub seed: u64,
}

impl Test2Config {
    pub fn at_scale(scale: Scale, seed: u64) -> Self {
        let (n_per_side, n_train, n_test, k_max) = match scale {
            Scale::Desk => (32, 500, 200, 64),
            Scale::Paper => (128, 5000, 1000, 64),
        };
        Test2Config {
            n_per_side,
            n_train,
            n_test,
            dims: vec![4, 16],
            ms: vec![4, 16],
            c_modes: vec![
                CoeffMode::C09L1,
                CoeffMode::C099L1,
                CoeffMode::C09L2,
                CoeffMode::C099L2,
            ],
            box_width_in_h: 2.0,
            k_max,
            min_samples: 5,
            seed,
        }
    }

    pub fn partition_for(d: usize) -> Option<Partition> {
        match d {
            4 => Some(Partition::Grid2x2),
            16 => Some(Partition::Grid4x4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub measurement: MeasurementConfig,
    pub training: TrainingConfig,
    pub family: FamilyConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub partition: Partition,
    pub a_bar: f64,
    pub c: Vec<f64>,
    pub n_per_side: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementConfig {
    pub placement: Placement,
    pub m: usize,
    pub box_width_in_h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub mode: AdmissibilityMode,
    pub rule: SplitRule,
    pub k_max: usize,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
}

fn default_min_samples() -> usize {
    5
}

/// Short hex digest of a config's canonical JSON, carried on every report
/// row so tables are traceable to a run.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}
