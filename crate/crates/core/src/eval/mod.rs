//! Gallery/probe identification: embedding extraction, part-wise distances,
//! rank-1 and CMC under a declarative protocol, and report rendering.

mod protocol;
mod report;

pub use protocol::{Averaging, ConditionGroup, PartReduction, ProtocolConfig, Rule};
pub use report::{Coverage, EvalReport, GroupResult, MatchRecord, SequenceFailure};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Axis;
use rayon::prelude::*;

use crate::autograd::Tensor;
use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::gre::mean_channel_entropy;
use crate::head::GaitEmbedding;
use crate::ingest::{DatasetManifest, FrameSource, SequenceRecord};
use crate::model::{build_extractor, Model};
use crate::nn::{Forward, Mode, ParamStore};
use crate::train::{load_model, Checkpoint};

/// Part-wise Euclidean distances reduced over parts.
pub fn distance(a: &GaitEmbedding, b: &GaitEmbedding, reduction: PartReduction) -> Result<f64> {
    if a.parts.dim() != b.parts.dim() {
        return Err(Error::Shape(format!(
            "embeddings {:?} and {:?} differ in shape",
            a.parts.dim(),
            b.parts.dim()
        )));
    }
    let per_part = a.parts.rows().into_iter().zip(b.parts.rows()).map(|(x, y)| {
        x.iter()
            .zip(y.iter())
            .map(|(u, v)| (*u as f64 - *v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    });
    Ok(match reduction {
        PartReduction::Mean => per_part.sum::<f64>() / a.parts.nrows() as f64,
        PartReduction::Sum => per_part.sum(),
        PartReduction::Min => per_part.fold(f64::INFINITY, f64::min),
    })
}

/// Frozen pipeline pieces needed to embed sequences.
#[derive(Clone, Copy)]
pub struct Embedder<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub extractor: &'a FeatureExtractor,
    pub source: &'a dyn FrameSource,
}

impl Embedder<'_> {
    /// f_c of every frame of the record, L×4E×H×W.
    pub fn sequence_fc(&self, manifest: &DatasetManifest, record: &SequenceRecord) -> Result<Tensor> {
        let idx: Vec<usize> = (0..record.frame_count()).collect();
        let fcs = self.extractor.sequence_fc(manifest, self.source, record, &idx)?;
        let views: Vec<_> = fcs.iter().map(|a| a.view()).collect();
        let fc = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(fc.into_dyn())
    }

    /// Eval-mode embedding from every frame of the record.
    pub fn embed(&self, manifest: &DatasetManifest, record: &SequenceRecord) -> Result<GaitEmbedding> {
        let parts = self.model.embed(self.store, &self.sequence_fc(manifest, record)?)?;
        GaitEmbedding::new(
            record.subject_id.clone(),
            record.condition.clone(),
            record.view.clone(),
            record.seq.clone(),
            parts.mapv(|v| v as f32),
        )
    }

    /// Mean per-pixel channel entropy of f_de over the record's foreground;
    /// `None` without a denoising branch.
    pub fn fde_entropy(&self, manifest: &DatasetManifest, record: &SequenceRecord) -> Result<Option<f64>> {
        let fc = self.sequence_fc(manifest, record)?;
        let mut f = Forward::new(self.store, Mode::Eval, false);
        let out = self.model.gre.forward(&mut f, &fc)?;
        Ok(out.fde.map(|v| mean_channel_entropy(f.graph.value(v), &out.fg)))
    }
}

/// Embeddings of the records that succeeded, in input order, plus one
/// failure per record that did not.
pub struct Extraction {
    pub embeddings: Vec<GaitEmbedding>,
    pub failures: Vec<SequenceFailure>,
}

pub fn extract_embeddings(embedder: &Embedder, manifest: &DatasetManifest, records: &[&SequenceRecord]) -> Extraction {
    let results: Vec<_> = records.par_iter().map(|r| (r.key(), embedder.embed(manifest, r))).collect();
    let mut embeddings = Vec::new();
    let mut failures = Vec::new();
    for (key, res) in results {
        match res {
            Ok(e) => embeddings.push(e),
            Err(e) => failures.push(SequenceFailure { key, error: e.to_string() }),
        }
    }
    Extraction { embeddings, failures }
}

/// Probe outcome before aggregation.
struct Outcome {
    trace: MatchRecord,
    /// 1-based rank of the first same-subject gallery entry.
    rank: usize,
}

fn match_probe(gallery: &[GaitEmbedding], probe: &GaitEmbedding, protocol: &ProtocolConfig) -> Result<Option<Outcome>> {
    let mut scored = Vec::with_capacity(gallery.len());
    for g in gallery {
        if protocol.view_exclusion && g.view == probe.view {
            continue;
        }
        scored.push((distance(g, probe, protocol.distance)?, g));
    }
    // Ties break on the gallery key, so the result ignores gallery order.
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.key().cmp(&b.1.key())));
    let Some(rank) = scored.iter().position(|(_, g)| g.subject_id == probe.subject_id) else {
        return Ok(None);
    };
    let (d, best) = scored[0];
    Ok(Some(Outcome {
        trace: MatchRecord {
            probe: probe.key(),
            gallery: best.key(),
            gallery_view: best.view.clone(),
            predicted: best.subject_id.clone(),
            correct: best.subject_id == probe.subject_id,
            distance: d,
            rank: rank + 1,
        },
        rank: rank + 1,
    }))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Nearest-neighbour identification of every probe against the gallery.
pub fn rank1(gallery: &[GaitEmbedding], probe: &[GaitEmbedding], protocol: &ProtocolConfig) -> Result<EvalReport> {
    protocol.validate()?;
    let outcomes: Vec<Option<Outcome>> = probe
        .par_iter()
        .map(|p| match_probe(gallery, p, protocol))
        .collect::<Result<_>>()?;

    let mut coverage = Coverage::default();
    let mut trace = Vec::new();
    // group → view → ranks
    let mut ranks: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    let group_names: Vec<String> = if protocol.groups.is_empty() {
        let mut conds: Vec<String> = probe.iter().map(|p| p.condition.clone()).collect();
        conds.sort();
        conds.dedup();
        conds
    } else {
        protocol.groups.iter().map(|g| g.name.clone()).collect()
    };
    for (p, outcome) in probe.iter().zip(outcomes) {
        let Some(o) = outcome else {
            coverage.dropped.push(p.key());
            continue;
        };
        coverage.evaluated += 1;
        for g in protocol.groups_of(&p.condition) {
            ranks.entry(g).or_default().entry(p.view.clone()).or_default().push(o.rank);
        }
        trace.push(o.trace);
    }
    if !coverage.dropped.is_empty() {
        coverage
            .warnings
            .push(format!("{} probes have no gallery entry of their subject and were dropped", coverage.dropped.len()));
    }
    if probe.is_empty() {
        coverage.warnings.push("no probe sequences".into());
    }

    let max_rank = protocol.max_rank;
    let cmc_of = |rs: &[usize]| -> Vec<f64> {
        (1..=max_rank)
            .map(|r| 100.0 * rs.iter().filter(|&&x| x <= r).count() as f64 / rs.len() as f64)
            .collect()
    };
    let mut groups = Vec::new();
    for name in group_names {
        let by_view = ranks.remove(&name).unwrap_or_default();
        let probes = by_view.values().map(Vec::len).sum();
        let per_view: BTreeMap<String, f64> = by_view.iter().map(|(v, rs)| (v.clone(), cmc_of(rs)[0])).collect();
        let cmc = if probes == 0 {
            Vec::new()
        } else {
            match protocol.averaging {
                Averaging::PerView => {
                    let curves: Vec<Vec<f64>> = by_view.values().map(|rs| cmc_of(rs)).collect();
                    (0..max_rank).map(|r| mean(curves.iter().map(|c| c[r])).unwrap()).collect()
                }
                Averaging::PerSequence => cmc_of(&by_view.values().flatten().copied().collect::<Vec<_>>()),
            }
        };
        groups.push(GroupResult {
            rank1: cmc.first().copied(),
            name,
            probes,
            per_view,
            cmc,
        });
    }
    Ok(EvalReport {
        protocol: protocol.name.clone(),
        checkpoint: None,
        train_domain: None,
        test_domain: None,
        mean: mean(groups.iter().filter_map(|g| g.rank1)),
        groups,
        coverage,
        trace,
    })
}

/// Extracts gallery and probe embeddings for the protocol and scores them.
pub fn evaluate(embedder: &Embedder, manifest: &DatasetManifest, protocol: &ProtocolConfig) -> Result<EvalReport> {
    let (g, p) = protocol.select(&manifest.entries)?;
    let gallery = extract_embeddings(embedder, manifest, &g);
    let probe = extract_embeddings(embedder, manifest, &p);
    let mut report = rank1(&gallery.embeddings, &probe.embeddings, protocol)?;
    if g.is_empty() {
        report.coverage.warnings.push("protocol selects no gallery sequences".into());
    }
    let failed = gallery.failures.len() + probe.failures.len();
    if failed > 0 {
        report.coverage.warnings.push(format!("{failed} sequences failed to embed"));
    }
    report.coverage.failed = gallery.failures.into_iter().chain(probe.failures).collect();
    report.test_domain = Some(manifest.dataset_name.clone());
    Ok(report)
}

/// `dataset@iteration:hash` identifying a checkpoint.
pub fn checkpoint_id(ck: &Checkpoint) -> String {
    let hash = ck.config_hash();
    format!("{}@{}:{}", ck.dataset, ck.iteration, &hash[..hash.len().min(12)])
}

/// Zero-shot evaluation of a checkpoint on another (or the same) dataset.
/// The report records the (train, test) domain pair.
pub fn cross_domain_run(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    source: &dyn FrameSource,
    protocol: &ProtocolConfig,
    cache_dir: Option<&Path>,
) -> Result<EvalReport> {
    let (ck, model) = load_model(checkpoint)?;
    let extractor = build_extractor(&ck.config, cache_dir)?;
    let embedder = Embedder {
        model: &model,
        store: &ck.store,
        extractor: &extractor,
        source,
    };
    let mut report = evaluate(&embedder, manifest, protocol)?;
    report.checkpoint = Some(checkpoint_id(&ck));
    report.train_domain = Some(ck.dataset.clone());
    Ok(report)
}
