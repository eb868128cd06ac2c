//! Short training runs that toggle GRE branches or regularizers, each
//! scored under one protocol.

use std::fmt::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Embedder, EvalReport, ProtocolConfig};
use crate::ingest::{DatasetManifest, FrameSource};
use crate::train::{LogRecord, RunOutputs, TrainConfig, TrainData, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Rows {full, no-smooth, no-div, neither}.
    Denoising,
    /// Rows {full, no-mask, no-appearance, no-denoising, bypass}.
    Branches,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoising" => Ok(Self::Denoising),
            "branches" => Ok(Self::Branches),
            _ => Err(Error::InvalidArgument(format!("unknown axis `{s}`; expected denoising or branches"))),
        }
    }
}

impl AblationAxis {
    pub fn variants(self) -> &'static [&'static str] {
        match self {
            Self::Denoising => &["full", "no-smooth", "no-div", "neither"],
            Self::Branches => &["full", "no-mask", "no-appearance", "no-denoising", "bypass"],
        }
    }
}

/// Config of a named variant derived from `base`.
pub fn variant_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match variant {
        "full" => {}
        "no-smooth" => cfg.gamma_smo = 0.0,
        "no-div" => cfg.gamma_div = 0.0,
        "neither" => {
            cfg.gamma_smo = 0.0;
            cfg.gamma_div = 0.0;
        }
        "no-mask" => cfg.use_mask = false,
        "no-appearance" => cfg.use_appearance = false,
        "no-denoising" => cfg.use_denoising = false,
        "bypass" => {
            cfg.use_mask = false;
            cfg.use_appearance = false;
            cfg.use_denoising = false;
        }
        _ => return Err(Error::InvalidArgument(format!("unknown ablation variant `{variant}`"))),
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
    /// Mean per-pixel channel entropy of f_de over probe foregrounds.
    pub fde_entropy: Option<f64>,
    pub last_step: Option<LogRecord>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub iterations: usize,
    pub protocol: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let groups: Vec<String> = self
            .rows
            .first()
            .map(|r| r.report.groups.iter().map(|g| g.name.clone()).collect())
            .unwrap_or_default();
        let mut header = vec!["variant".to_string()];
        header.extend(groups.iter().cloned());
        header.extend(["Mean".to_string(), "H(f_de)".to_string(), "L_total".to_string()]);
        let fmt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".into(), |v| format!("{v:.p$}"));
        let mut rows = vec![header];
        for r in &self.rows {
            let mut cells = vec![r.variant.clone()];
            cells.extend(groups.iter().map(|g| fmt(r.report.group(g).and_then(|g| g.rank1), 1)));
            cells.push(fmt(r.report.mean, 1));
            cells.push(fmt(r.fde_entropy, 3));
            cells.push(fmt(r.last_step.map(|s| s.l_total), 4));
            rows.push(cells);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!(
            "ablation: {:?}  protocol: {}  iterations: {}\n\n",
            self.axis, self.protocol, self.iterations
        );
        for r in rows {
            let mut line = String::new();
            for (i, (c, w)) in r.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(line, "{c:<w$}");
                } else {
                    let _ = write!(line, "  {c:>w$}");
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Shared inputs of a set of runs.
pub struct AblationData<'a> {
    pub manifest: &'a DatasetManifest,
    pub source: &'a dyn FrameSource,
    /// Must match the backbone settings of every variant.
    pub extractor: &'a FeatureExtractor,
    pub protocol: &'a ProtocolConfig,
}

/// Trains one config to `total_iters` and scores it.
pub fn run_variant(cfg: TrainConfig, variant: &str, data: &AblationData) -> Result<(Trainer, AblationRow)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, data.manifest)?;
    let train = TrainData {
        manifest: data.manifest,
        source: data.source,
        extractor: data.extractor,
    };
    let until = trainer.config().total_iters;
    let records = trainer.run(&train, until, &RunOutputs::default())?;
    let embedder = Embedder {
        model: trainer.model(),
        store: trainer.store(),
        extractor: data.extractor,
        source: data.source,
    };
    let report = evaluate(&embedder, data.manifest, data.protocol)?;
    let (_, probe) = data.protocol.select(&data.manifest.entries)?;
    let mut entropies = Vec::new();
    for r in probe {
        if let Some(h) = embedder.fde_entropy(data.manifest, r)? {
            entropies.push(h);
        }
    }
    let fde_entropy = (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / entropies.len() as f64);
    let row = AblationRow {
        variant: variant.to_string(),
        report,
        fde_entropy,
        last_step: records.last().copied(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((trainer, row))
}

/// Runs every variant of the axis from `base`; `progress` sees each row
/// as it completes.
pub fn run_ablation(
    axis: AblationAxis,
    base: &TrainConfig,
    data: &AblationData,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &v in axis.variants() {
        let (_, row) = run_variant(variant_config(base, v)?, v, data)?;
        progress(&row);
        rows.push(row);
    }
    Ok(AblationTable {
        axis,
        iterations: base.total_iters,
        protocol: data.protocol.name.clone(),
        rows,
    })
}
