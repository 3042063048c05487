//! Ablation sweeps: retrain the model with one knob changed at a time
//! and score each variant with the linear evaluation protocol.

use std::path::Path;

use super::probe::{dataset_features, linear_probe, ProbeConfig};
use super::train::pretrain;
use super::{LossKind, MetricsSplit, PipelineError, TrainConfig};
use crate::data::{load_dataset, DatasetManifest, Split};
use crate::geometry::{OcclusionStrategy, PointCloud};
use crate::transformer::{ModelConfig, ModelWeights};

/// A labelled train/test corpus shared by every ablation variant.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<(PointCloud, usize)>,
    pub test: Vec<(PointCloud, usize)>,
}

impl Benchmark {
    /// Five-class synthetic benchmark with per-item generator seeds
    /// derived from `base_seed`.
    pub fn synthetic(
        train_per_class: usize,
        test_per_class: usize,
        n_points: usize,
        jitter: f64,
        base_seed: u64,
    ) -> Result<Self, PipelineError> {
        let manifest = DatasetManifest::synthetic_five_class(train_per_class, test_per_class, base_seed);
        let base = Path::new(".");
        Ok(Self {
            train: load_dataset(&manifest, Split::Train, n_points, jitter, base)?,
            test: load_dataset(&manifest, Split::Test, n_points, jitter, base)?,
        })
    }

    pub fn train_clouds(&self) -> Vec<PointCloud> {
        self.train.iter().map(|(c, _)| c.clone()).collect()
    }
}

/// One swept axis with its values. Each value replaces the matching
/// field of the base configuration; everything else stays fixed.
#[derive(Debug, Clone)]
pub enum AblationValues {
    Ratio(Vec<f64>),
    Strategy(Vec<OcclusionStrategy>),
    Loss(Vec<LossKind>),
    Groups(Vec<usize>),
    PatchSize(Vec<usize>),
}

impl AblationValues {
    pub fn axis(&self) -> &'static str {
        match self {
            AblationValues::Ratio(_) => "ratio",
            AblationValues::Strategy(_) => "strategy",
            AblationValues::Loss(_) => "loss",
            AblationValues::Groups(_) => "groups",
            AblationValues::PatchSize(_) => "patch_size",
        }
    }

    fn len(&self) -> usize {
        match self {
            AblationValues::Ratio(v) => v.len(),
            AblationValues::Strategy(v) => v.len(),
            AblationValues::Loss(v) => v.len(),
            AblationValues::Groups(v) => v.len(),
            AblationValues::PatchSize(v) => v.len(),
        }
    }

    /// Configuration for value `i`, plus its display form.
    fn variant(
        &self,
        i: usize,
        tcfg: &TrainConfig,
        mcfg: &ModelConfig,
    ) -> (TrainConfig, ModelConfig, String) {
        let mut t = tcfg.clone();
        let mut m = mcfg.clone();
        let value = match self {
            AblationValues::Ratio(v) => {
                t.ratio = v[i];
                format!("{}", v[i])
            }
            AblationValues::Strategy(v) => {
                t.strategy = v[i];
                v[i].name().to_string()
            }
            AblationValues::Loss(v) => {
                t.loss = v[i];
                v[i].name().to_string()
            }
            AblationValues::Groups(v) => {
                m.groups = v[i];
                format!("{}", v[i])
            }
            AblationValues::PatchSize(v) => {
                m.patch_size = v[i];
                m.dec_channels = 3 * v[i];
                format!("{}", v[i])
            }
        };
        (t, m, value)
    }
}

/// One scored variant. A `ratio = 0` entry cannot be pretrained
/// (nothing to reconstruct), so it is probed with freshly initialised
/// weights and flagged `untrained`, with no final loss.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: String,
    pub untrained: bool,
    pub final_train_loss: f64,
    pub probe_train_accuracy: f64,
    pub probe_test_accuracy: f64,
}

pub fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("axis,value,untrained,final_train_loss,probe_train_accuracy,probe_test_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis,
            r.value,
            r.untrained,
            r.final_train_loss,
            r.probe_train_accuracy,
            r.probe_test_accuracy
        ));
    }
    out
}

/// Runs every variant of every swept axis: pretrain on the benchmark
/// training clouds, extract frozen features, fit the linear probe and
/// collect one row per variant. With `out_dir` set, writes
/// `ablation.csv`.
pub fn ablate(
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    sweeps: &[AblationValues],
    bench: &Benchmark,
    probe_cfg: &ProbeConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, PipelineError> {
    let train_clouds = bench.train_clouds();
    let mut rows = Vec::new();
    for sweep in sweeps {
        for i in 0..sweep.len() {
            let (t, m, value) = sweep.variant(i, tcfg, mcfg);
            let untrained = matches!(sweep, AblationValues::Ratio(_)) && t.ratio == 0.0;
            let (weights, final_train_loss) = if untrained {
                let weights = ModelWeights::<f32>::init(&m, super::model_init_seed(t.rng_seed))?;
                (weights, f64::NAN)
            } else {
                let result = pretrain(&train_clouds, &[], &t, &m, None)?;
                let last = result
                    .metrics
                    .iter()
                    .rev()
                    .find(|r| r.split == MetricsSplit::Train)
                    .map_or(f64::NAN, |r| r.loss);
                (result.weights, last)
            };
            let (train_x, train_y) = dataset_features(&bench.train, &weights, &m)?;
            let (test_x, test_y) = dataset_features(&bench.test, &weights, &m)?;
            let report = linear_probe(&train_x, &train_y, &test_x, &test_y, probe_cfg)?;
            rows.push(AblationRow {
                axis: sweep.axis(),
                value,
                untrained,
                final_train_loss,
                probe_train_accuracy: report.train_accuracy,
                probe_test_accuracy: report.test_accuracy,
            });
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), ablation_table_csv(&rows))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_model() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.n_points = 32;
        cfg.groups = 4;
        cfg.patch_size = 4;
        cfg.enc_channels = 16;
        cfg.dec_channels = 12;
        cfg.enc_depth = 1;
        cfg.dec_depth = 1;
        cfg.heads = 2;
        cfg.embed_hidden = 8;
        cfg
    }

    fn micro_train() -> TrainConfig {
        let mut t = TrainConfig::desk();
        t.batch_size = 5;
        t.epochs = 1;
        t.warmup_epochs = 0;
        t.ratio = 0.5;
        t
    }

    #[test]
    fn ratio_zero_row_is_flagged_untrained() {
        let bench = Benchmark::synthetic(2, 1, 32, 0.0, 123).unwrap();
        let probe = ProbeConfig {
            iterations: 50,
            ..ProbeConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let rows = ablate(
            &micro_train(),
            &micro_model(),
            &[AblationValues::Ratio(vec![0.0, 0.5])],
            &bench,
            &probe,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].untrained);
        assert!(rows[0].final_train_loss.is_nan());
        assert!(!rows[1].untrained);
        assert!(rows[1].final_train_loss.is_finite());
        let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert!(csv.starts_with("axis,value,untrained"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("ratio,0,true,NaN"));
    }

    #[test]
    fn patch_size_variant_adjusts_decoder_width() {
        let sweep = AblationValues::PatchSize(vec![8]);
        let (t, m, value) = sweep.variant(0, &micro_train(), &micro_model());
        assert_eq!(value, "8");
        assert_eq!(m.patch_size, 8);
        assert_eq!(m.dec_channels, 24);
        assert_eq!(t.ratio, micro_train().ratio);
        m.validate().unwrap();
    }

    #[test]
    fn strategy_and_loss_sweeps_label_rows() {
        let bench = Benchmark::synthetic(1, 1, 32, 0.0, 9).unwrap();
        let probe = ProbeConfig {
            iterations: 10,
            ..ProbeConfig::default()
        };
        let rows = ablate(
            &micro_train(),
            &micro_model(),
            &[
                AblationValues::Strategy(vec![OcclusionStrategy::Block]),
                AblationValues::Loss(vec![LossKind::Emd]),
            ],
            &bench,
            &probe,
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].axis, rows[0].value.as_str()), ("strategy", "block"));
        assert_eq!((rows[1].axis, rows[1].value.as_str()), ("loss", "emd"));
    }
}
