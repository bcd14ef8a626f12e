//! The standard synthetic benchmark and the three-way ablation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::io::{generate_synthetic, Dataset, SynthConfig};
use crate::model::ModelConfig;
use crate::trainer::{train, TrainConfig, TrainError};

pub const BENCHMARK_IMAGES: usize = 50;
pub const BENCHMARK_CLASSES: usize = 4;
pub const BENCHMARK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Generator settings of the standard benchmark for one split.
pub fn benchmark_synth(seed: u64, split: u64) -> SynthConfig {
    SynthConfig {
        num_images: BENCHMARK_IMAGES,
        num_classes: BENCHMARK_CLASSES,
        noise_amplitude: 0.2,
        snr: 4.0,
        seed: seed.wrapping_mul(2).wrapping_add(split),
        ..SynthConfig::default()
    }
}

/// Train and test splits for one benchmark seed.
pub fn standard_benchmark(seed: u64) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_synthetic(&benchmark_synth(seed, 0))?,
        generate_synthetic(&benchmark_synth(seed, 1))?,
    ))
}

/// Network size used on the benchmark.
pub fn benchmark_model(feature_dim: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        trunk_widths: vec![32],
        saliency_hidden: 16,
        ..ModelConfig::new(feature_dim, num_classes)
    }
}

/// Optimizer settings used on the benchmark. The learning rates are larger
/// than the CLI defaults because the features are tiny and training is short.
pub fn benchmark_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        lr_phase1: 5e-4,
        lr_phase2: 5e-5,
        phase_boundary: 10,
        shuffle_seed: seed,
        init_seed: seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSaliencySubnet,
    NoSeedLosses,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Full,
        Variant::NoSaliencySubnet,
        Variant::NoSeedLosses,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "SGWSOD",
            Variant::NoSaliencySubnet => "SGWSOD-SAL",
            Variant::NoSeedLosses => "SGWSOD-SAL-SC",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut t = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoSaliencySubnet => t.disable_saliency_subnet = true,
            Variant::NoSeedLosses => {
                t.disable_saliency_subnet = true;
                t.disable_seed_losses = true;
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub report: EvalReport,
}

/// Trains each variant from the same initialization and evaluates it: AP on
/// `test`, CorLoc on `train`.
pub fn run_ablation(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &ModelConfig,
    training: &TrainConfig,
    eval: &EvalConfig,
) -> std::result::Result<Vec<AblationRow>, TrainError> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let (params, _) = train(train_set, model, &variant.apply(training))?;
            let report = evaluate(&params, test_set, Some(train_set), eval)?;
            Ok(AblationRow {
                variant,
                name: variant.label().to_string(),
                report,
            })
        })
        .collect()
}

/// Fixed-width comparison table.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let pct =
        |v: Option<f64>| v.map_or_else(|| "   -".to_string(), |x| format!("{:5.1}", 100.0 * x));
    let mut out = format!(
        "{:<14} {:>6} {:>6} {:>6}\n",
        "method", "mAP", "CorLoc", "clsAP"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>6} {:>6} {:>6}\n",
            r.name,
            pct(r.report.mean_ap),
            pct(r.report.mean_corloc),
            pct(r.report.mean_classification_ap)
        ));
    }
    out
}
