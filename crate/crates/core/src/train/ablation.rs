use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig};
use crate::arch::UpsampleMode;
use crate::data::{LabeledSlice, Sample};
use crate::error::{Error, Result};
use crate::metrics::{render_columns, Summary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    MsPooling,
    UpsampleMode,
    DenseDecoder,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 3] = [
        AblationSuite::MsPooling,
        AblationSuite::UpsampleMode,
        AblationSuite::DenseDecoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationSuite::MsPooling => "ms_pooling",
            AblationSuite::UpsampleMode => "upsample_mode",
            AblationSuite::DenseDecoder => "dense_decoder",
        }
    }

    /// Column labels and the config each column trains.
    pub fn presets(self, base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationSuite::MsPooling => vec![
                ("Pooling layer", with(&|c| c.model.ms_pooling = false)),
                (
                    "Multi-scale pooling module",
                    with(&|c| c.model.ms_pooling = true),
                ),
            ],
            AblationSuite::UpsampleMode => vec![
                (
                    "Bilinear interpolation",
                    with(&|c| c.model.ms_upsample_mode = UpsampleMode::Bilinear),
                ),
                (
                    "Deconvolution",
                    with(&|c| c.model.ms_upsample_mode = UpsampleMode::Deconv),
                ),
                (
                    "Group deconvolution",
                    with(&|c| c.model.ms_upsample_mode = UpsampleMode::GroupDeconv),
                ),
            ],
            AblationSuite::DenseDecoder => vec![
                ("Without", with(&|c| c.model.dense_decoder = false)),
                ("With", with(&|c| c.model.dense_decoder = true)),
            ],
        }
    }

    /// Top-left header cell.
    fn corner(self) -> &'static str {
        match self {
            AblationSuite::DenseDecoder => "Dense connection structure",
            _ => "",
        }
    }
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationSuite::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation suite `{s}` (expected ms_pooling, upsample_mode or dense_decoder)")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationColumn {
    pub label: &'static str,
    /// Data hash seen by this preset's training run.
    pub data_hash: Option<String>,
    pub result: std::result::Result<Summary, String>,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub suite: AblationSuite,
    pub columns: Vec<AblationColumn>,
}

impl AblationResult {
    /// Rows Dice / APD(mm) / Good Contours(%), each split into Endo and Epi;
    /// one column per preset. Failed presets show `failed`.
    pub fn table(&self) -> String {
        let mut rows = vec![{
            let mut h = vec![self.suite.corner().to_string(), String::new()];
            h.extend(self.columns.iter().map(|c| c.label.to_string()));
            h
        }];
        let cells: Vec<[String; 6]> = self
            .columns
            .iter()
            .map(|c| match &c.result {
                Ok(s) => s.cells(),
                Err(_) => std::array::from_fn(|_| "failed".to_string()),
            })
            .collect();
        let labels = [
            ("Dice", "Endo"),
            ("", "Epi"),
            ("APD(mm)", "Endo"),
            ("", "Epi"),
            ("Good Contours(%)", "Endo"),
            ("", "Epi"),
        ];
        for (i, (group, part)) in labels.iter().enumerate() {
            let mut row = vec![group.to_string(), part.to_string()];
            row.extend(cells.iter().map(|c| c[i].clone()));
            rows.push(row);
        }
        render_columns(&rows, 1)
    }
}

/// Trains and evaluates every preset of `suite` with the same seed and
/// training samples. A failing preset is recorded and the others continue.
pub fn run_ablation(
    suite: AblationSuite,
    base: &TrainConfig,
    train_set: &[Sample],
    test_set: &[LabeledSlice],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str, &str),
) -> AblationResult {
    let columns = suite
        .presets(base)
        .into_iter()
        .map(|(label, cfg)| {
            let dir = out_dir.map(|d| {
                d.join(format!(
                    "{}_{}",
                    suite.as_str(),
                    label.to_lowercase().replace(' ', "_")
                ))
            });
            let run = train(&cfg, train_set, dir.as_deref(), |_| {}).and_then(|o| {
                let report = evaluate(&o.model, test_set, cfg.good_threshold_mm)?;
                Ok((o.data_hash, report))
            });
            match run {
                Ok((hash, report)) => {
                    progress(label, &format!("data_hash={hash}"));
                    AblationColumn {
                        label,
                        data_hash: Some(hash),
                        result: Ok(report.overall),
                    }
                }
                Err(e) => {
                    progress(label, &format!("failed: {e}"));
                    AblationColumn {
                        label,
                        data_hash: None,
                        result: Err(e.to_string()),
                    }
                }
            }
        })
        .collect();
    AblationResult { suite, columns }
}
