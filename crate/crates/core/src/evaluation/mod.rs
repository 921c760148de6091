// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mention metrics, layer sweeps, frequency buckets and cross-setting tables.

mod buckets;
mod frequency;
mod metrics;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use buckets::{bucket_report, row_spearman, spearman, BucketCell, BucketReport, MIN_CELL};
pub use frequency::{
    assign_quantiles, read_count_table, CountParser, FreqSource, FrequencyClient,
    FrequencyConfig, FrequencyRecord,
};
pub use metrics::{chr_f, exact_match, CHRF_BETA, CHRF_ORDER};
pub use report::{config_hash, write_csv, write_json};

use crate::corpus::EntitySample;
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::representations::{RepCache, RepKind, Representation};
use crate::task_vectors::{decode_mention, DecodingConfig, Setting, TaskVector};

pub const REPORT_SCHEMA: &str = "entlens.eval/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub mention: String,
    pub prediction: String,
    pub em: bool,
    pub chrf: f64,
    /// Mention length in tokens, when the sample was aligned.
    pub mention_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub em: f64,
    pub chrf: f64,
    pub n: usize,
    pub samples: Vec<SampleResult>,
}

impl LayerScore {
    fn from_results(layer: usize, samples: Vec<SampleResult>) -> Self {
        let n = samples.len();
        let em = samples.iter().filter(|s| s.em).count() as f64 / n as f64;
        let chrf = samples.iter().map(|s| s.chrf).sum::<f64>() / n as f64;
        LayerScore {
            layer,
            em,
            chrf,
            n,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub model_id: String,
    pub setting: Setting,
    pub rep_kind: RepKind,
    pub per_layer: Vec<LayerScore>,
    /// Layer with the highest EM (ties go to the lower layer).
    pub best_layer: Option<usize>,
    /// Layers in `0..=N_L` without a task vector or representations.
    pub missing_layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<BucketReport>,
    pub chrf_order: usize,
    pub chrf_beta: f64,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Seconds since the Unix epoch, or `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
}

impl EvalReport {
    fn new(
        handle: &ModelHandle,
        setting: Setting,
        rep_kind: RepKind,
        per_layer: Vec<LayerScore>,
        missing_layers: Vec<usize>,
        config: serde_json::Value,
    ) -> Self {
        let best_layer = per_layer
            .iter()
            .fold(None::<&LayerScore>, |best, s| match best {
                Some(b) if b.em >= s.em => Some(b),
                _ => Some(s),
            })
            .map(|s| s.layer);
        EvalReport {
            schema: REPORT_SCHEMA.into(),
            model_id: handle.model_id.clone(),
            setting,
            rep_kind,
            per_layer,
            best_layer,
            missing_layers,
            buckets: None,
            chrf_order: CHRF_ORDER,
            chrf_beta: CHRF_BETA,
            config_hash: config_hash(&config),
            config,
            timestamp: report_timestamp(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerScore> {
        self.per_layer.iter().find(|s| s.layer == layer)
    }
}

fn report_timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn index_reps<'a>(
    samples: &[EntitySample],
    reps: &'a [Representation],
) -> Result<Vec<&'a Representation>> {
    let by_id: BTreeMap<&str, &Representation> =
        reps.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    samples
        .iter()
        .map(|s| {
            by_id.get(s.sample_id.as_str()).copied().ok_or_else(|| {
                Error::CacheMiss(format!("no representation for sample `{}`", s.sample_id))
            })
        })
        .collect()
}

fn score_layer(
    handle: &ModelHandle,
    tv: &TaskVector,
    samples: &[EntitySample],
    reps: &[Representation],
    config: &DecodingConfig,
) -> Result<LayerScore> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    let reps = index_reps(samples, reps)?;
    let layer = reps[0].layer;
    let mut results = Vec::with_capacity(samples.len());
    for (s, rep) in samples.iter().zip(reps) {
        let ctx = (tv.setting == Setting::Contextual).then_some(s);
        let prediction = decode_mention(handle, tv, rep, ctx, config)?;
        results.push(SampleResult {
            sample_id: s.sample_id.clone(),
            mention: s.mention.clone(),
            em: exact_match(&prediction, &s.mention),
            chrf: chr_f(&prediction, &s.mention),
            prediction,
            mention_tokens: s.mention_len(),
        });
    }
    Ok(LayerScore::from_results(layer, results))
}

fn snapshot(tv: &TaskVector, rep_kind: RepKind, config: &DecodingConfig, n: usize) -> serde_json::Value {
    serde_json::json!({
        "decoding": config,
        "rep_kind": rep_kind,
        "setting": tv.setting,
        "n_samples": n,
        "task_vector": tv.meta,
    })
}

/// Decodes every sample with `tv` from the matching representation and
/// aggregates EM and chrF for `tv.layer`.
pub fn evaluate(
    handle: &ModelHandle,
    tv: &TaskVector,
    samples: &[EntitySample],
    reps: &[Representation],
    config: &DecodingConfig,
) -> Result<EvalReport> {
    let rep_kind = reps.first().map(|r| r.kind).ok_or(Error::EmptyInput("representations"))?;
    let score = score_layer(handle, tv, samples, reps, config)?;
    let cfg = snapshot(tv, rep_kind, config, samples.len());
    Ok(EvalReport::new(handle, tv.setting, rep_kind, vec![score], Vec::new(), cfg))
}

/// [`evaluate`] reading representations from a cache; a missing entry is an
/// [`Error::CacheMiss`].
pub fn evaluate_cached(
    handle: &ModelHandle,
    tv: &TaskVector,
    samples: &[EntitySample],
    cache: &RepCache,
    rep_kind: RepKind,
    config: &DecodingConfig,
) -> Result<EvalReport> {
    let hash = crate::corpus::corpus_hash(samples);
    let reps = cache.get(&handle.model_id, tv.layer, rep_kind, &hash)?;
    evaluate(handle, tv, samples, &reps, config)
}

/// Evaluates one task vector per layer. Layers of `0..=N_L` lacking either a
/// task vector or representations are listed in `missing_layers`.
pub fn sweep_layers(
    handle: &ModelHandle,
    tvs: &[TaskVector],
    samples: &[EntitySample],
    reps_by_layer: &BTreeMap<usize, Vec<Representation>>,
    config: &DecodingConfig,
) -> Result<EvalReport> {
    let first = tvs.first().ok_or(Error::EmptyInput("task vectors"))?;
    if tvs.iter().any(|t| t.setting != first.setting) {
        return Err(Error::Config("sweep mixes settings".into()));
    }
    let mut rep_kind = None;
    let mut per_layer = Vec::new();
    let mut covered = BTreeSet::new();
    for tv in tvs {
        let Some(reps) = reps_by_layer.get(&tv.layer) else {
            log::warn!("sweep: no representations for layer {}", tv.layer);
            continue;
        };
        if let Some(r) = reps.first() {
            rep_kind.get_or_insert(r.kind);
        }
        per_layer.push(score_layer(handle, tv, samples, reps, config)?);
        covered.insert(tv.layer);
    }
    let missing: Vec<usize> = (0..=handle.n_layers()).filter(|l| !covered.contains(l)).collect();
    if !missing.is_empty() {
        log::warn!("sweep: layers without results: {missing:?}");
    }
    let rep_kind = rep_kind.ok_or(Error::EmptyInput("representations"))?;
    per_layer.sort_by_key(|s| s.layer);
    let cfg = serde_json::json!({
        "decoding": config,
        "rep_kind": rep_kind,
        "setting": first.setting,
        "n_samples": samples.len(),
        "task_vectors": tvs.iter().map(|t| (t.layer, &t.meta)).collect::<Vec<_>>(),
    });
    Ok(EvalReport::new(handle, first.setting, rep_kind, per_layer, missing, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    pub em: f64,
    pub chrf: f64,
}

/// Rows: uncontextual θ, contextual θ, random θ. Columns: uncontextual and
/// contextual evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSettingTable {
    pub layer: usize,
    pub rows: Vec<(String, [CrossCell; 2])>,
}

pub fn cross_setting_matrix(
    handle: &ModelHandle,
    tv_unctx: &TaskVector,
    tv_ctx: &TaskVector,
    samples: &[EntitySample],
    reps: &[Representation],
    config: &DecodingConfig,
    random_seed: u64,
) -> Result<CrossSettingTable> {
    if tv_unctx.layer != tv_ctx.layer {
        return Err(Error::Config(format!(
            "task vectors from layers {} and {}",
            tv_unctx.layer, tv_ctx.layer
        )));
    }
    let random = TaskVector::random(handle, tv_unctx.layer, Setting::Uncontextual, random_seed);
    let mut rows = Vec::new();
    for (name, tv) in [("uncontextual", tv_unctx), ("contextual", tv_ctx), ("random", &random)] {
        let mut cells = Vec::with_capacity(2);
        for setting in [Setting::Uncontextual, Setting::Contextual] {
            let mut probe = tv.clone();
            probe.setting = setting;
            let s = score_layer(handle, &probe, samples, reps, config)?;
            cells.push(CrossCell {
                em: s.em,
                chrf: s.chrf,
            });
        }
        let [a, b]: [CrossCell; 2] = cells.try_into().expect("two settings");
        rows.push((name.to_string(), [a, b]));
    }
    Ok(CrossSettingTable {
        layer: tv_unctx.layer,
        rows,
    })
}
