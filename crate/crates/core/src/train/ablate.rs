//! Ablation harness: one model per setting along an axis, all from the same
//! seed and data, evaluated on the same held-out samples.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{evaluate, EvalOptions, EvalReport, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{AlignmentMode, FusionVariant};
use crate::synthetic::MultiViewSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Views,
    Fusion,
    Alignment,
    Smooth,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "views" => Ok(Self::Views),
            "fusion" => Ok(Self::Fusion),
            "alignment" => Ok(Self::Alignment),
            "smooth" => Ok(Self::Smooth),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}; expected views, fusion, alignment or smooth"))),
        }
    }
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Views => "views",
            Self::Fusion => "fusion",
            Self::Alignment => "alignment",
            Self::Smooth => "smooth",
        }
    }
}

/// One row to train: a label, its config, and full-scale real-data
/// reference figures `(MPJPE, PA-MPJPE, MPVE)` for the same setting.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetting {
    pub label: String,
    pub config: TrainConfig,
    pub reference: Option<[f64; 3]>,
}

pub fn ablation_settings(axis: AblationAxis, base: &TrainConfig) -> Vec<AblationSetting> {
    let row = |label: &str, config: TrainConfig, r: [f64; 3]| AblationSetting {
        label: label.to_string(),
        config,
        reference: Some(r),
    };
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Views => {
            let refs = [[59.3, 43.2, 66.9], [47.8, 33.9, 52.0], [42.2, 31.6, 44.9], [37.8, 27.5, 39.0]];
            (1..=base.max_views)
                .map(|n| AblationSetting {
                    label: format!("n_views={n}"),
                    config: with(&|c| c.n_views = n),
                    reference: refs.get(n - 1).copied(),
                })
                .collect()
        }
        AblationAxis::Fusion => vec![
            row("conv1x1", with(&|c| c.fusion_variant = FusionVariant::Conv1x1), [98.9, 86.8, 135.3]),
            row("strategyA", with(&|c| c.fusion_variant = FusionVariant::StrategyA), [40.3, 29.9, 46.7]),
            row(
                "strategyB",
                with(&|c| {
                    c.fusion_variant = FusionVariant::StrategyB;
                    c.alignment = AlignmentMode::Off;
                }),
                [40.4, 30.1, 43.4],
            ),
            row("mmt", with(&|c| c.fusion_variant = FusionVariant::Mmt), [37.8, 27.5, 39.0]),
        ],
        AblationAxis::Alignment => vec![
            row("off", with(&|c| c.alignment = AlignmentMode::Off), [41.4, 30.7, 43.7]),
            row("3d", with(&|c| c.alignment = AlignmentMode::ThreeD), [41.7, 29.5, 44.7]),
            row("3d2d", with(&|c| c.alignment = AlignmentMode::ThreeD2D), [37.8, 27.5, 39.0]),
            row(
                "3d2d+template",
                with(&|c| {
                    c.alignment = AlignmentMode::ThreeD2D;
                    c.template_replacement = true;
                }),
                [38.9, 28.1, 40.3],
            ),
        ],
        AblationAxis::Smooth => vec![
            row("smooth_loss=off", with(&|c| c.smooth_loss = false), [37.8, 27.5, 39.0]),
            row("smooth_loss=on", with(&|c| c.smooth_loss = true), [37.4, 27.6, 43.3]),
        ],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub report: EvalReport,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting.label == label)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ablation axis={} units=mm", self.axis.as_str());
        let _ = writeln!(s, "setting\tmpjpe\tpa_mpjpe\tmpve\tsmooth\ttrain_loss\tref_mpjpe\tref_pa_mpjpe\tref_mpve");
        for r in &self.rows {
            let m = &r.report.mean;
            let refs = match r.setting.reference {
                Some([a, b, c]) => format!("{a:.1}\t{b:.1}\t{c:.1}"),
                None => "-\t-\t-".into(),
            };
            let _ = writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\t{}",
                r.setting.label, m.mpjpe, m.pa_mpjpe, m.mpve, m.smooth, r.final_train_loss, refs
            );
        }
        if self.axis == AblationAxis::Views && self.rows.len() > 1 {
            let mono = self.rows.windows(2).all(|w| w[1].report.mean.mpjpe < w[0].report.mean.mpjpe);
            let _ = writeln!(s, "# mpjpe strictly decreasing with views: {mono}");
        }
        let _ = writeln!(
            s,
            "# ref_* columns: full-scale real-data reference results for the matching setting, context only; \
             this synthetic run does not reproduce them"
        );
        s
    }
}

/// Trains and evaluates every setting on `axis`. `progress` receives each
/// finished row's label.
pub fn ablate(
    base: &TrainConfig,
    axis: AblationAxis,
    train: &[MultiViewSample],
    test: &[MultiViewSample],
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<AblationTable> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::shape("ablate", "non-empty train and test sets", format!("{} / {}", train.len(), test.len())));
    }
    if axis == AblationAxis::Views && base.max_views < 2 {
        return Err(Error::Config("the views axis needs max_views >= 2".into()));
    }
    let mut rows = Vec::new();
    for setting in ablation_settings(axis, base) {
        let mut t = Trainer::new(setting.config.clone())?;
        let log = t.train(train, &mut std::io::sink(), &mut |_| Ok(()))?;
        let final_train_loss = log.last().map_or(f64::NAN, |r| r.loss.total);
        let opts = EvalOptions {
            n_views: setting.config.n_views,
            all_views: false,
        };
        let report = evaluate(&t.model, &t.store, &t.config, test, opts)?;
        let row = AblationRow {
            setting,
            report,
            final_train_loss,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationTable { axis, rows })
}

/// Splits `samples` into train and held-out parts; the last `fraction`
/// (rounded, at least one sample each side) is held out.
pub fn holdout_split(samples: &[MultiViewSample], fraction: f64) -> Result<(&[MultiViewSample], &[MultiViewSample])> {
    if samples.len() < 2 {
        return Err(Error::shape("holdout_split", "at least 2 samples", format!("{}", samples.len())));
    }
    let n_test = ((samples.len() as f64 * fraction).round() as usize).clamp(1, samples.len() - 1);
    Ok(samples.split_at(samples.len() - n_test))
}
