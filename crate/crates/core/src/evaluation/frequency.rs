// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreqSource {
    Remote,
    Cache,
    OfflineStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRecord {
    pub mention: String,
    pub count: Option<u64>,
    /// Fraction of the evaluated mentions (as a multiset) with a strictly
    /// smaller count; equal counts share a quantile.
    pub quantile: Option<f64>,
    pub source: Option<FreqSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Extracts a count from a service response.
pub type CountParser = Box<dyn Fn(&serde_json::Value) -> Option<u64> + Send + Sync>;

fn default_parser(v: &serde_json::Value) -> Option<u64> {
    if let Some(c) = v.get("count").and_then(|c| c.as_u64()) {
        return Some(c);
    }
    v.as_object()?
        .values()
        .find_map(|inner| inner.get("count").and_then(|c| c.as_u64()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrequencyConfig {
    /// Count service endpoint, queried as `GET {base_url}?{query_param}=<mention>`.
    pub base_url: Option<String>,
    pub query_param: String,
    /// TSV `mention<TAB>count` used in offline mode.
    pub offline_table: Option<PathBuf>,
    pub offline: bool,
    pub cache_dir: Option<PathBuf>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub concurrency: usize,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        FrequencyConfig {
            base_url: None,
            query_param: "q".into(),
            offline_table: None,
            offline: false,
            cache_dir: None,
            timeout_secs: 10.0,
            retries: 3,
            backoff_ms: 500,
            concurrency: 4,
        }
    }
}

impl FrequencyConfig {
    /// Applies `ENTLENS_FREQ_URL`, `ENTLENS_FREQ_TABLE`, `ENTLENS_FREQ_CACHE`
    /// and `ENTLENS_OFFLINE` on top of `self`.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var("ENTLENS_FREQ_URL") {
            self.base_url = Some(v);
        }
        if let Ok(v) = std::env::var("ENTLENS_FREQ_TABLE") {
            self.offline_table = Some(v.into());
        }
        if let Ok(v) = std::env::var("ENTLENS_FREQ_CACHE") {
            self.cache_dir = Some(v.into());
        }
        if let Ok(v) = std::env::var("ENTLENS_OFFLINE") {
            self.offline = !matches!(v.as_str(), "" | "0" | "false");
        }
        self
    }
}

/// Reads a `mention<TAB>count` table. Blank lines and `#` comments are
/// skipped.
pub fn read_count_table(path: &Path) -> Result<BTreeMap<String, u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (m, c) = line.rsplit_once('\t').ok_or_else(|| Error::Corpus {
            path: path.to_path_buf(),
            line: i + 1,
            reason: "expected `mention<TAB>count`".into(),
        })?;
        let count = c.trim().parse().map_err(|_| Error::Corpus {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("bad count `{c}`"),
        })?;
        out.insert(m.to_string(), count);
    }
    Ok(out)
}

/// Fills `quantile` for every record with a count.
pub fn assign_quantiles(records: &mut [FrequencyRecord]) {
    let mut counts: Vec<u64> = records.iter().filter_map(|r| r.count).collect();
    counts.sort_unstable();
    let n = counts.len() as f64;
    for r in records.iter_mut() {
        r.quantile = r
            .count
            .map(|c| counts.partition_point(|&x| x < c) as f64 / n);
    }
}

pub struct FrequencyClient {
    config: FrequencyConfig,
    parser: CountParser,
    requests: AtomicUsize,
}

impl std::fmt::Debug for FrequencyClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrequencyClient").field("config", &self.config).finish()
    }
}

const CACHE_FILE: &str = "frequencies.json";

impl FrequencyClient {
    pub fn new(config: FrequencyConfig) -> Self {
        FrequencyClient {
            config,
            parser: Box::new(default_parser),
            requests: AtomicUsize::new(0),
        }
    }

    /// Replaces the response parser, for services with another schema.
    pub fn with_parser(mut self, parser: CountParser) -> Self {
        self.parser = parser;
        self
    }

    /// HTTP requests issued so far (retries included).
    pub fn requests_made(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn cache_path(&self) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().map(|d| d.join(CACHE_FILE))
    }

    fn load_cache(&self) -> Result<BTreeMap<String, u64>> {
        match self.cache_path() {
            Some(p) if p.is_file() => {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Ok(serde_json::from_str(&text)?)
            }
            _ => Ok(BTreeMap::new()),
        }
    }

    fn query(&self, agent: &ureq::Agent, base: &str, mention: &str) -> std::result::Result<u64, String> {
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(wait));
            }
            self.requests.fetch_add(1, Ordering::SeqCst);
            let resp = agent
                .get(base)
                .query(self.config.query_param.as_str(), mention)
                .call();
            match resp {
                Ok(mut r) => match r.body_mut().read_json::<serde_json::Value>() {
                    Ok(v) => match (self.parser)(&v) {
                        Some(c) => return Ok(c),
                        None => return Err(format!("no count in response {v}")),
                    },
                    Err(e) => last = format!("bad response body: {e}"),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(last)
    }

    /// One record per input mention (duplicates included), with quantiles
    /// over that multiset. Failed lookups carry `error` and no quantile.
    pub fn fetch(&self, mentions: &[String]) -> Result<Vec<FrequencyRecord>> {
        let mut found: BTreeMap<String, (u64, FreqSource)> = BTreeMap::new();
        let mut failed: BTreeMap<String, String> = BTreeMap::new();
        let unique: BTreeSet<&str> = mentions.iter().map(String::as_str).collect();

        if self.config.offline || self.config.base_url.is_none() {
            let path = self.config.offline_table.as_ref().ok_or_else(|| {
                Error::Config("offline frequency lookup needs an offline table".into())
            })?;
            let table = read_count_table(path)?;
            for m in unique {
                match table.get(m) {
                    Some(&c) => {
                        found.insert(m.into(), (c, FreqSource::OfflineStub));
                    }
                    None => {
                        failed.insert(m.into(), "not in offline table".into());
                    }
                }
            }
        } else {
            let base = self.config.base_url.clone().unwrap_or_default();
            let mut cache = self.load_cache()?;
            let mut todo = Vec::new();
            for m in unique {
                match cache.get(m) {
                    Some(&c) => {
                        found.insert(m.into(), (c, FreqSource::Cache));
                    }
                    None => todo.push(m.to_string()),
                }
            }
            if !todo.is_empty() {
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs_f64(self.config.timeout_secs)))
                    .build()
                    .into();
                let queue = Mutex::new(todo.into_iter());
                let results = Mutex::new(Vec::new());
                let workers = self.config.concurrency.max(1);
                std::thread::scope(|s| {
                    for _ in 0..workers {
                        s.spawn(|| loop {
                            let next = queue.lock().expect("queue lock").next();
                            let Some(m) = next else { break };
                            let r = self.query(&agent, &base, &m);
                            results.lock().expect("result lock").push((m, r));
                        });
                    }
                });
                for (m, r) in results.into_inner().expect("result lock") {
                    match r {
                        Ok(c) => {
                            cache.insert(m.clone(), c);
                            found.insert(m, (c, FreqSource::Remote));
                        }
                        Err(e) => {
                            log::warn!("frequency lookup failed for `{m}`: {e}");
                            failed.insert(m, e);
                        }
                    }
                }
                if let Some(p) = self.cache_path() {
                    write_atomic(&p, &serde_json::to_vec_pretty(&cache)?)?;
                }
            }
        }

        let mut records: Vec<FrequencyRecord> = mentions
            .iter()
            .map(|m| match found.get(m) {
                Some(&(c, src)) => FrequencyRecord {
                    mention: m.clone(),
                    count: Some(c),
                    quantile: None,
                    source: Some(src),
                    error: None,
                },
                None => FrequencyRecord {
                    mention: m.clone(),
                    count: None,
                    quantile: None,
                    source: None,
                    error: failed.get(m).cloned(),
                },
            })
            .collect();
        assign_quantiles(&mut records);
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(m: &str, c: Option<u64>) -> FrequencyRecord {
        FrequencyRecord {
            mention: m.into(),
            count: c,
            quantile: None,
            source: None,
            error: None,
        }
    }

    #[test]
    fn quantiles_share_ties_and_start_at_zero() {
        let mut r = vec![
            rec("a", Some(0)),
            rec("b", Some(5)),
            rec("b", Some(5)),
            rec("c", Some(9)),
            rec("x", None),
        ];
        assign_quantiles(&mut r);
        let q: Vec<_> = r.iter().map(|r| r.quantile).collect();
        assert_eq!(q, vec![Some(0.0), Some(0.25), Some(0.25), Some(0.75), None]);
    }

    #[test]
    fn default_parser_finds_count() {
        assert_eq!(default_parser(&serde_json::json!({"count": 7})), Some(7));
        assert_eq!(default_parser(&serde_json::json!({"result": {"count": 3}})), Some(3));
        assert_eq!(default_parser(&serde_json::json!({"n": 3})), None);
    }
}
