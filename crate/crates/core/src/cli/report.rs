//! Summary tables over a metrics stream.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use super::CliError;

#[derive(Debug, Default)]
struct Column {
    n: usize,
    first: f64,
    last: f64,
    min: f64,
    max: f64,
    sum: f64,
}

impl Column {
    fn push(&mut self, v: f64) {
        if self.n == 0 {
            self.first = v;
            self.min = v;
            self.max = v;
        }
        self.n += 1;
        self.last = v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.sum += v;
    }
}

/// Records are grouped by `event`, refined by `method`, `kind` or `suite` when present.
fn group_key(map: &serde_json::Map<String, Value>) -> String {
    let event = map.get("event").and_then(Value::as_str).unwrap_or("record");
    ["method", "kind", "suite"]
        .iter()
        .find_map(|k| map.get(*k).and_then(Value::as_str))
        .map_or_else(|| event.to_string(), |sub| format!("{event}/{sub}"))
}

pub fn render(path: &Path) -> Result<String, CliError> {
    let file = if path.is_dir() { path.join("metrics.jsonl") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
    let mut groups: BTreeMap<String, BTreeMap<String, Column>> = BTreeMap::new();
    let mut records = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CliError::Data(format!("line {}: {e}", i + 1)))?;
        let Value::Object(map) = value else {
            return Err(CliError::Data(format!("line {}: expected an object", i + 1)));
        };
        records += 1;
        let cols = groups.entry(group_key(&map)).or_default();
        for (k, v) in &map {
            let x = match v {
                Value::Number(n) => n.as_f64(),
                Value::Bool(b) => Some(f64::from(u8::from(*b))),
                _ => None,
            };
            if let Some(x) = x {
                cols.entry(k.clone()).or_default().push(x);
            }
        }
    }
    if records == 0 {
        return Err(CliError::Data(format!("{}: no records", file.display())));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{records} records in {}", file.display());
    for (name, cols) in &groups {
        let n = cols.values().map(|c| c.n).max().unwrap_or(0);
        let _ = writeln!(out, "\n[{name}] {n} records");
        let _ = writeln!(
            out,
            "{:<24} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "field", "first", "last", "min", "max", "mean"
        );
        for (field, c) in cols {
            let _ = writeln!(
                out,
                "{field:<24} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
                c.first,
                c.last,
                c.min,
                c.max,
                c.sum / c.n as f64
            );
        }
    }
    Ok(out)
}
