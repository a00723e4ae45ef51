//! Text primitives integration: corpus statistics over annotation strings
//! and frequency-based filtering of text nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Drawing, Geometry};

/// Token occurrence counts over the training split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: BTreeMap<String, u64>,
    pub total_documents: u64,
    pub rules_version: u32,
}

pub const RULES_VERSION: u32 = 1;

impl CorpusStats {
    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    /// Sorted "token<TAB>count" lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (token, count) in &self.counts {
            out.push_str(token);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<CorpusStats> {
        let mut counts = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, count) = line.rsplit_once('\t').ok_or_else(|| {
                crate::error::Error::Schema(format!("stats line {}: missing tab", lineno + 1))
            })?;
            let count: u64 = count.parse().map_err(|_| {
                crate::error::Error::Schema(format!("stats line {}: bad count", lineno + 1))
            })?;
            counts.insert(token.to_string(), count);
        }
        Ok(CorpusStats {
            counts,
            total_documents: 0,
            rules_version: RULES_VERSION,
        })
    }

    /// Tokens with the highest counts, ties broken alphabetically.
    pub fn top(&self, n: usize) -> Vec<(&str, u64)> {
        let mut entries: Vec<(&str, u64)> = self
            .counts
            .iter()
            .map(|(t, &c)| (t.as_str(), c))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        entries.truncate(n);
        entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextFilterConfig {
    pub min_count: u64,
    pub max_kept_per_tile: Option<usize>,
    pub lowercase: bool,
    pub digit_collapse: bool,
}

impl Default for TextFilterConfig {
    fn default() -> Self {
        TextFilterConfig {
            min_count: 5,
            max_kept_per_tile: None,
            lowercase: true,
            digit_collapse: true,
        }
    }
}

/// Canonical token form: trim, lowercase, collapse digit runs to '#',
/// collapse internal whitespace.
pub fn normalize_token(s: &str) -> String {
    normalize_token_cfg(s, &TextFilterConfig::default())
}

pub fn normalize_token_cfg(s: &str, cfg: &TextFilterConfig) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_was_space = true; // leading whitespace trimmed
    let mut last_was_digit = false;
    for c in s.trim().chars() {
        if c.is_whitespace() {
            if !last_was_space {
                out.push(' ');
                last_was_space = true;
            }
            last_was_digit = false;
        } else if cfg.digit_collapse && c.is_ascii_digit() {
            if !last_was_digit {
                out.push('#');
            }
            last_was_digit = true;
            last_was_space = false;
        } else {
            if cfg.lowercase {
                out.extend(c.to_lowercase());
            } else {
                out.push(c);
            }
            last_was_digit = false;
            last_was_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Count normalized tokens across all text primitives of the given tiles.
/// Call with the training split only.
pub fn build_corpus_stats(training_tiles: &[Drawing]) -> CorpusStats {
    build_corpus_stats_cfg(training_tiles, &TextFilterConfig::default())
}

pub fn build_corpus_stats_cfg(training_tiles: &[Drawing], cfg: &TextFilterConfig) -> CorpusStats {
    let mut stats = CorpusStats {
        rules_version: RULES_VERSION,
        total_documents: training_tiles.len() as u64,
        ..Default::default()
    };
    for tile in training_tiles {
        for p in &tile.primitives {
            if let Geometry::Text { content, .. } = &p.geometry {
                let token = normalize_token_cfg(content, cfg);
                if !token.is_empty() {
                    *stats.counts.entry(token).or_insert(0) += 1;
                }
            }
        }
    }
    stats
}

/// Drop text primitives whose normalized token falls below the frequency
/// threshold. Non-text primitives are untouched; ids are re-densified and an
/// id-remap table (new id -> original id) is recorded in metadata.
pub fn filter_text_primitives(
    tile: &Drawing,
    stats: &CorpusStats,
    cfg: &TextFilterConfig,
) -> Drawing {
    let mut kept_text = 0usize;
    let mut out = tile.clone();
    let mut remap = Vec::with_capacity(tile.len());
    out.primitives.clear();
    for p in &tile.primitives {
        let keep = match &p.geometry {
            Geometry::Text { content, .. } => {
                let token = normalize_token_cfg(content, cfg);
                let frequent = stats.count(&token) >= cfg.min_count;
                let under_cap = cfg
                    .max_kept_per_tile
                    .map(|cap| kept_text < cap)
                    .unwrap_or(true);
                let keep = frequent && under_cap;
                if keep {
                    kept_text += 1;
                }
                keep
            }
            _ => true,
        };
        if keep {
            let mut np = p.clone();
            np.id = out.primitives.len();
            remap.push(p.id);
            out.primitives.push(np);
        }
    }
    out.meta.id_remap = Some(remap);
    out
}
