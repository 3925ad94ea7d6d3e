use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::{HarnessError, Result};
use crate::pruner::NeuronMask;

pub const TRACE_FORMAT: &str = "dart-trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebuildReason {
    Initial,
    Drift,
}

/// Budgets and masks installed after a collection span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebuildRecord {
    pub reason: RebuildReason,
    /// Tokens the statistics were collected over.
    pub tokens: usize,
    /// Generation ended before a full reference span was collected.
    pub partial: bool,
    /// Uniform-importance fallback or re-admission was used.
    pub degenerate: bool,
    /// Drift reference installed from this span.
    pub reference_set: bool,
    pub mean_sensitivity: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Per-layer masks, LSB-first hex.
    pub masks: Vec<String>,
}

impl RebuildRecord {
    pub fn decode_masks(&self, ffn_dim: usize) -> Result<Vec<NeuronMask>> {
        self.masks
            .iter()
            .enumerate()
            .map(|(l, h)| Ok(NeuronMask::from_hex(l, ffn_dim, h)?))
            .collect()
    }
}

/// One decoded position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub t: usize,
    /// Input token id at this position.
    pub token: u32,
    pub regime: usize,
    /// FFN ran dense (statistics collection).
    pub dense: bool,
    pub sensitivity: Vec<f64>,
    pub density: Vec<f64>,
    /// Set on positions that close a detection window.
    pub alignment: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub counter: Option<u32>,
    pub triggered: bool,
    pub event: bool,
    /// Token sampled from this position's logits.
    pub next: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rebuild: Option<RebuildRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum TraceLine {
    Header(TraceHeader),
    Token(TokenRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tokens: usize,
    pub generated: Vec<u32>,
    pub windows: usize,
    pub triggers: usize,
    pub reprune_events: usize,
    pub rebuilds: usize,
    pub partial_rebuild: bool,
    /// Mean FFN density over masked positions (1 if none).
    pub mean_density: f64,
}

/// Parses a generation trace, reporting the first malformed line.
pub fn parse_trace(text: &str) -> Result<(TraceHeader, Vec<TokenRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(line).map_err(|e| HarnessError::Trace {
            line: line_no,
            msg: e.to_string(),
        })?;
        match parsed {
            TraceLine::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
            TraceLine::Header(_) => {
                return Err(HarnessError::Trace {
                    line: line_no,
                    msg: "unexpected header".into(),
                })
            }
            TraceLine::Token(r) if header.is_some() => records.push(r),
            TraceLine::Token(_) => {
                return Err(HarnessError::Trace {
                    line: line_no,
                    msg: "token before header".into(),
                })
            }
        }
    }
    let header = header.ok_or(HarnessError::Trace {
        line: 1,
        msg: "missing header".into(),
    })?;
    if header.format != TRACE_FORMAT {
        return Err(HarnessError::Trace {
            line: 1,
            msg: format!("unsupported format {:?}", header.format),
        });
    }
    Ok((header, records))
}

pub(crate) fn to_jsonl(header: &TraceHeader, records: &[TokenRecord]) -> String {
    let mut out = String::new();
    let line = |l: &TraceLine| serde_json::to_string(l).expect("trace lines serialize");
    out.push_str(&line(&TraceLine::Header(header.clone())));
    out.push('\n');
    for r in records {
        out.push_str(&line(&TraceLine::Token(r.clone())));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: usize) -> TokenRecord {
        TokenRecord {
            t,
            token: 3,
            regime: 0,
            dense: true,
            sensitivity: vec![0.1, 0.2],
            density: vec![1.0, 1.0],
            alignment: None,
            mu: None,
            sigma: None,
            counter: None,
            triggered: false,
            event: false,
            next: Some(4),
            rebuild: None,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let header = TraceHeader {
            format: TRACE_FORMAT.into(),
            config: RunConfig::default(),
        };
        let text = to_jsonl(&header, &[record(0), record(1)]);
        let (h, r) = parse_trace(&text).unwrap();
        assert_eq!(h, header);
        assert_eq!(r, vec![record(0), record(1)]);
    }

    #[test]
    fn malformed_line_reported() {
        let header = TraceHeader {
            format: TRACE_FORMAT.into(),
            config: RunConfig::default(),
        };
        let mut text = to_jsonl(&header, &[record(0)]);
        text.push_str("{\"type\":\"token\",\"t\":\n");
        match parse_trace(&text) {
            Err(HarnessError::Trace { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_trace("{\"type\":\"token\"}\n") {
            Err(HarnessError::Trace { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
