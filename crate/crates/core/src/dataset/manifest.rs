use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: String,
    pub caption: String,
    pub events: Vec<EventAnnotation>,
}

/// Read a JSON-lines manifest: one entry per non-blank line, order kept.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text, path)
}

pub fn parse_manifest_str(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(entry_from_value(&value, path, line_no)?);
    }
    Ok(out)
}

fn entry_from_value(value: &Value, path: &Path, line: usize) -> Result<ManifestEntry> {
    let schema = |field: &str, msg: &str| Error::Schema {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        msg: msg.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| schema("<line>", "expected a JSON object"))?;
    let string = |obj: &Map<String, Value>, field: &str, name: &str| -> Result<String> {
        match obj.get(field) {
            None => Err(schema(name, "missing field")),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(schema(name, "expected a string")),
        }
    };
    let number = |obj: &Map<String, Value>, field: &str, name: &str| -> Result<f64> {
        match obj.get(field) {
            None => Err(schema(name, "missing field")),
            Some(v) => v.as_f64().ok_or_else(|| schema(name, "expected a number")),
        }
    };

    let audio_path = string(obj, "audio_path", "audio_path")?;
    if audio_path.is_empty() {
        return Err(schema("audio_path", "must not be empty"));
    }
    let caption = string(obj, "caption", "caption")?;
    if caption.trim().is_empty() {
        return Err(schema("caption", "must not be empty"));
    }
    let raw_events = match obj.get("events") {
        None => return Err(schema("events", "missing field")),
        Some(Value::Array(a)) => a,
        Some(_) => return Err(schema("events", "expected an array")),
    };
    let mut events = Vec::with_capacity(raw_events.len());
    for (k, ev) in raw_events.iter().enumerate() {
        let name = |f: &str| format!("events[{k}].{f}");
        let ev = ev
            .as_object()
            .ok_or_else(|| schema(&format!("events[{k}]"), "expected an object"))?;
        let label = string(ev, "label", &name("label"))?;
        if label.is_empty() {
            return Err(schema(&name("label"), "must not be empty"));
        }
        let start_s = number(ev, "start_s", &name("start_s"))?;
        let end_s = number(ev, "end_s", &name("end_s"))?;
        if start_s < 0.0 {
            return Err(schema(&name("start_s"), "must be >= 0"));
        }
        if end_s <= start_s {
            return Err(schema(&name("end_s"), "must be greater than start_s"));
        }
        events.push(EventAnnotation { label, start_s, end_s });
    }
    Ok(ManifestEntry {
        audio_path,
        caption,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<ManifestEntry>> {
        parse_manifest_str(text, Path::new("m.jsonl"))
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn single_entry() {
        let e = parse(
            r#"{"audio_path":"a.wav","caption":"a dog barks","events":[{"label":"dog","start_s":0.5,"end_s":2.0}]}"#,
        )
        .unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].events.len(), 1);
        assert_eq!(e[0].events[0].label, "dog");
    }

    #[test]
    fn inverted_span_names_end_field() {
        let err = parse(
            r#"
{"audio_path":"a.wav","caption":"x","events":[]}
{"audio_path":"a.wav","caption":"x","events":[{"label":"dog","start_s":2.0,"end_s":2.0}]}"#,
        )
        .unwrap_err();
        match err {
            Error::Schema { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "events[0].end_s");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("{\"audio_path\":\"a.wav\",\"caption\":\"x\",\"events\":[]}\n{not json").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_field_is_schema_error() {
        let err = parse(r#"{"audio_path":"a.wav","events":[]}"#).unwrap_err();
        assert!(matches!(err, Error::Schema { ref field, .. } if field == "caption"), "{err}");
    }
}
