//! JSONL trace files.
//!
//! Line 1 is a header `{"model": name, "L": .., "M": .., "k": .., "provenance": {..}}`;
//! every following line is one [`ActivationTrace`]
//! `{"req": 0, "phase": "decode", "pos": 3, "path": [[1, 5], ...]}`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationTrace, ModelRef, Provenance, Result, TraceDataset, TraceError};
use crate::config::{ModelConfig, ModelShape};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: String,
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "M")]
    experts: usize,
    k: usize,
    #[serde(default = "recorded")]
    provenance: Provenance,
}

fn recorded() -> Provenance {
    Provenance::Recorded
}

/// Renders a dataset in the JSONL trace format.
pub fn traces_to_jsonl(ds: &TraceDataset) -> String {
    let header = Header {
        model: ds.model.name.clone(),
        layers: ds.model.shape.layers,
        experts: ds.model.shape.experts,
        k: ds.model.shape.top_k,
        provenance: ds.provenance.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for t in &ds.traces {
        // Hand-rolled to keep 10^5-line files fast and the layout fixed.
        let _ = write!(
            out,
            "{{\"req\":{},\"phase\":\"{}\",\"pos\":{},\"path\":[",
            t.request_id,
            match t.phase {
                super::Phase::Prefill => "prefill",
                super::Phase::Decode => "decode",
            },
            t.token_index
        );
        for (l, set) in t.path.iter().enumerate() {
            if l > 0 {
                out.push(',');
            }
            out.push('[');
            for (i, e) in set.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{e}");
            }
            out.push(']');
        }
        out.push_str("]}\n");
    }
    out
}

pub fn save_traces(ds: &TraceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, traces_to_jsonl(ds)).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses JSONL text and validates it against `cfg`.
pub fn parse_traces(text: &str, cfg: &ModelConfig) -> Result<TraceDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (idx, first) = lines.next().ok_or(TraceError::MissingHeader)?;
    let header: Header = serde_json::from_str(first).map_err(|e| TraceError::Parse {
        line: idx + 1,
        message: format!("bad header: {e}"),
    })?;
    let found = ModelShape {
        layers: header.layers,
        experts: header.experts,
        top_k: header.k,
    };
    if found != cfg.shape() {
        return Err(TraceError::ModelMismatch {
            expected: cfg.shape(),
            found,
        });
    }
    let mut traces = Vec::new();
    for (idx, line) in lines {
        let trace: ActivationTrace = serde_json::from_str(line).map_err(|e| TraceError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        traces.push(trace);
    }
    TraceDataset::new(
        ModelRef {
            name: header.model,
            shape: found,
        },
        traces,
        header.provenance,
    )
}

pub fn load_traces(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<TraceDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_traces(&text, cfg)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::Phase;
    use super::*;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            name: "toy-4x2".into(),
            num_layers: 4,
            num_experts: 4,
            top_k: 2,
            total_param_bytes: 36,
            non_moe_bytes: 4,
            predictor_mem_bytes: 1,
            kv_reserve_bytes: 1,
        }
    }

    #[test]
    fn two_record_file_loads() {
        let ds = toy_ab();
        let back = parse_traces(&traces_to_jsonl(&ds), &toy_cfg()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back, ds);
    }

    #[test]
    fn line_format_is_compact() {
        let text = traces_to_jsonl(&toy_ab());
        let line2 = text.lines().nth(1).unwrap();
        assert_eq!(
            line2,
            r#"{"req":0,"phase":"decode","pos":0,"path":[[0,1],[2,3],[0,2],[1,3]]}"#
        );
        let parsed: ActivationTrace = serde_json::from_str(line2).unwrap();
        assert_eq!(parsed, toy_ab().traces[0]);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = TraceDataset::empty(&toy_cfg());
        let text = traces_to_jsonl(&ds);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_traces(&text, &toy_cfg()).unwrap(), ds);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut text = traces_to_jsonl(&toy_ab());
        text.push_str("{\"req\": 4, \"phase\": \"decode\"\n");
        match parse_traces(&text, &toy_cfg()) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn short_path_record_is_rejected() {
        let mut text = traces_to_jsonl(&TraceDataset::empty(&toy_cfg()));
        text.push_str(r#"{"req":0,"phase":"decode","pos":0,"path":[[0,1],[2,3],[0,2]]}"#);
        assert!(matches!(
            parse_traces(&text, &toy_cfg()),
            Err(TraceError::Invalid { .. })
        ));
    }

    #[test]
    fn duplicate_expert_record_is_rejected() {
        let mut text = traces_to_jsonl(&TraceDataset::empty(&toy_cfg()));
        text.push_str(r#"{"req":0,"phase":"decode","pos":0,"path":[[2,2],[2,3],[0,2],[0,1]]}"#);
        assert!(matches!(
            parse_traces(&text, &toy_cfg()),
            Err(TraceError::Invalid { layer: Some(0), .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut cfg = toy_cfg();
        cfg.num_layers = 5;
        cfg.total_param_bytes = 44;
        assert!(matches!(
            parse_traces(&traces_to_jsonl(&toy_ab()), &cfg),
            Err(TraceError::ModelMismatch { .. })
        ));
    }

    #[test]
    fn missing_header_is_reported() {
        assert!(matches!(parse_traces("", &toy_cfg()), Err(TraceError::MissingHeader)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut ds = toy_ab();
        ds.traces.push(trace(2, Phase::Prefill, 0, &[[3, 0]; 4]));
        save_traces(&ds, &path).unwrap();
        assert_eq!(load_traces(&path, &toy_cfg()).unwrap(), ds);
    }
}
