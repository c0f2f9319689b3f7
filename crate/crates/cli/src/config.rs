//! Run configuration: built-in defaults, an optional preset, an optional TOML
//! file and command-line flags, merged in that order. Every effective value
//! remembers which layer it came from.
//!
//! ```toml
//! preset = "llava-1.5"            # optional
//!
//! [relevance]
//! layer_range = { start = 14, end = 32 }
//! feature_kind = "value"          # or "key_no_rope"
//! sigma = 1.0
//! downsample_factor = 2
//! residual = "identity"           # or "none"
//!
//! [proposal]
//! k = 30
//! s_min = 3
//! s_max = 5
//! s_dist = 2.0
//! expansion_threshold = 0.5
//! nms_iou_threshold = 0.3
//!
//! [ranking]
//! n_steps = 8
//! overrun = true
//! t_type2 = 0.6
//!
//! [plan]
//! t_obj_dist = 1200.0
//! canvas_size = { width = 1008, height = 1008 }
//!
//! [paths]
//! out_dir = "out"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use focus_core::inference_plan::PlanConfig;
use focus_core::pipeline::SearchConfig;
use focus_core::ranking::RankingConfig;
use focus_core::relevance_map::RelevanceConfig;
use focus_core::roi_proposal::ProposalConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub relevance: RelevanceConfig,
    pub proposal: ProposalConfig,
    pub ranking: RankingConfig,
    pub plan: PlanConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            relevance: self.relevance.clone(),
            proposal: self.proposal.clone(),
            ranking: self.ranking.clone(),
            plan: self.plan.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.proposal.validate()?;
        self.ranking.validate()?;
        let r = &self.relevance;
        if !(r.sigma >= 0.0 && r.sigma.is_finite()) {
            bail!(
                "relevance.sigma must be finite and non-negative, got {}",
                r.sigma
            );
        }
        if r.downsample_factor == 0 {
            bail!("relevance.downsample_factor must be at least 1");
        }
        if let Some(l) = r.layer_range {
            if l.start > l.end {
                bail!(
                    "relevance.layer_range start {} exceeds end {}",
                    l.start,
                    l.end
                );
            }
        }
        if !(self.ranking.t_type2 >= -1.0 && self.ranking.t_type2 <= 1.0) {
            bail!(
                "ranking.t_type2 must lie in [-1, 1], got {}",
                self.ranking.t_type2
            );
        }
        if self.plan.t_obj_dist.is_nan() || self.plan.t_obj_dist < 0.0 {
            bail!("plan.t_obj_dist must be non-negative");
        }
        if self.plan.canvas_size.width == 0 || self.plan.canvas_size.height == 0 {
            bail!("plan.canvas_size must be non-zero");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    Preset(String),
    File(PathBuf),
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::Preset(name) => write!(f, "preset:{name}"),
            Source::File(path) => write!(f, "file:{}", path.display()),
            Source::Flag => write!(f, "flag"),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Effective configuration plus the origin of every leaf value, keyed by
/// dotted path (`proposal.k`, `relevance.layer_range.start`, ...).
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

pub const PRESETS: [&str; 4] = ["llava-1.5", "llava-1.5-hr", "llava-ov", "llava-ov-vstar"];

fn preset_table(name: &str) -> Result<Table> {
    let text = match name {
        "llava-1.5" => {
            "relevance.layer_range = { start = 14, end = 32 }
             proposal = { s_min = 3, s_max = 5, s_dist = 2.0 }
             ranking.t_type2 = 0.6
             plan.t_obj_dist = 1200.0"
        }
        "llava-1.5-hr" => {
            "relevance.layer_range = { start = 14, end = 32 }
             proposal = { s_min = 3, s_max = 5, s_dist = 3.0 }
             ranking.t_type2 = 0.6
             plan.t_obj_dist = 1200.0"
        }
        "llava-ov" => {
            "relevance.layer_range = { start = 21, end = 28 }
             proposal = { k = 30, s_min = 3, s_max = 5, s_dist = 2.0 }
             ranking.t_type2 = 0.5"
        }
        "llava-ov-vstar" => {
            "relevance.layer_range = { start = 21, end = 28 }
             proposal = { k = 30, s_min = 3, s_max = 9, s_dist = 2.0 }
             ranking.t_type2 = 0.5"
        }
        other => bail!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
    };
    Ok(text.parse::<Table>().expect("preset tables parse"))
}

fn mark(prefix: &str, value: &Value, source: &Source, prov: &mut BTreeMap<String, Source>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                mark(&format!("{prefix}.{k}"), v, source, prov);
            }
        }
        _ => {
            prov.insert(prefix.to_string(), source.clone());
        }
    }
}

fn overlay(
    base: &mut Table,
    top: &Table,
    prefix: &str,
    source: &Source,
    prov: &mut BTreeMap<String, Source>,
) {
    for (k, v) in top {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => overlay(b, t, &path, source, prov),
            _ => {
                prov.retain(|key, _| !(key == &path || key.starts_with(&format!("{path}."))));
                base.insert(k.clone(), v.clone());
                mark(&path, v, source, prov);
            }
        }
    }
}

/// Merges `defaults < preset < file < flags`. The preset is taken from the
/// flags when given there, otherwise from the file.
pub fn resolve(file: Option<&Path>, flags: &Table) -> Result<Resolved> {
    let defaults = Value::try_from(RunConfig::default()).expect("defaults serialize");
    let Value::Table(mut merged) = defaults else {
        unreachable!("config serializes to a table")
    };
    let mut prov = BTreeMap::new();
    for (k, v) in &merged {
        mark(k, v, &Source::Default, &mut prov);
    }

    let file_table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            Some(
                text.parse::<Table>()
                    .with_context(|| format!("invalid TOML in {}", path.display()))?,
            )
        }
        None => None,
    };
    let preset = flags
        .get("preset")
        .or_else(|| file_table.as_ref().and_then(|t| t.get("preset")))
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| anyhow!("preset must be a string"))
        })
        .transpose()?;
    if let Some(name) = &preset {
        overlay(
            &mut merged,
            &preset_table(name)?,
            "",
            &Source::Preset(name.clone()),
            &mut prov,
        );
    }
    if let (Some(t), Some(path)) = (&file_table, file) {
        overlay(
            &mut merged,
            t,
            "",
            &Source::File(path.to_path_buf()),
            &mut prov,
        );
    }
    overlay(&mut merged, flags, "", &Source::Flag, &mut prov);

    let mut config: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| {
            let origin = file
                .map(|p| format!(" in {}", p.display()))
                .unwrap_or_default();
            anyhow!("invalid configuration{origin}: {}", e.message())
        })?;

    // LLaVA-1.5 uses fewer anchors at small step budgets unless k was set explicitly
    if matches!(preset.as_deref(), Some("llava-1.5" | "llava-1.5-hr"))
        && matches!(
            prov.get("proposal.k"),
            Some(Source::Default | Source::Preset(_))
        )
    {
        config.proposal.k = if config.ranking.n_steps < 4 { 15 } else { 30 };
        prov.insert(
            "proposal.k".into(),
            Source::Preset(preset.clone().unwrap_or_default()),
        );
    }
    config.validate()?;
    prov.retain(|k, _| k != "preset");
    if let Some(name) = &preset {
        let origin = if flags.contains_key("preset") {
            Source::Flag
        } else {
            Source::File(file.map(Path::to_path_buf).unwrap_or_default())
        };
        prov.insert("preset".into(), origin);
        config.preset = Some(name.clone());
    }
    Ok(Resolved {
        config,
        provenance: prov,
    })
}

/// Parses `l:L` into inclusive layer bounds.
pub fn parse_layers(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("expected `start:end`, got `{s}`"))?;
    Ok((
        a.trim()
            .parse()
            .with_context(|| format!("bad start layer `{a}`"))?,
        b.trim()
            .parse()
            .with_context(|| format!("bad end layer `{b}`"))?,
    ))
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
pub fn set(table: &mut Table, path: &str, value: impl Into<Value>) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("intermediate key is a table");
    }
    cur.insert(last.to_string(), value.into());
}
