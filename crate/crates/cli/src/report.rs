//! Plain-text tables from JSON-lines results.

use std::collections::BTreeSet;

use serde_json::{Map, Value};

/// `HR@10` → `(10, 0)`, `NDCG@10` → `(10, 1)`; other keys are not metrics.
fn metric_key(name: &str) -> Option<(usize, u8)> {
    let (kind, k) = name.split_once('@')?;
    let k = k.parse().ok()?;
    match kind {
        "HR" => Some((k, 0)),
        "NDCG" => Some((k, 1)),
        _ => None,
    }
}

fn label(row: &Map<String, Value>) -> String {
    let text = |v: &Value| v.as_str().map_or_else(|| v.to_string(), str::to_string);
    if let (Some(c), Some(x)) = (row.get("C"), row.get("x")) {
        return format!("C={} x={}", text(c), text(x));
    }
    for key in ["method", "variant", "k_ref", "split"] {
        if let Some(v) = row.get(key) {
            return text(v);
        }
    }
    "-".to_string()
}

fn fmt_value(v: Option<&Value>) -> String {
    v.and_then(Value::as_f64).map_or_else(|| "-".to_string(), |f| format!("{f:.4}"))
}

/// One row per result line, metric columns ordered as HR@K, NDCG@K by
/// ascending K. Lines without metrics are skipped.
pub fn render_table(rows: &[Map<String, Value>]) -> String {
    let mut columns: BTreeSet<(usize, u8)> = BTreeSet::new();
    let rows: Vec<&Map<String, Value>> = rows.iter().filter(|r| r.keys().any(|k| metric_key(k).is_some())).collect();
    for r in &rows {
        columns.extend(r.keys().filter_map(|k| metric_key(k)));
    }
    let names: Vec<String> = columns.iter().map(|&(k, kind)| format!("{}@{k}", if kind == 0 { "HR" } else { "NDCG" })).collect();
    let labels: Vec<String> = rows.iter().map(|r| label(r)).collect();
    let first = labels.iter().map(String::len).chain(std::iter::once(6)).max().unwrap_or(6);
    let width = names.iter().map(String::len).max().unwrap_or(6).max(6);

    let mut out = format!("{:<first$}", "");
    for n in &names {
        out.push_str(&format!("  {n:>width$}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(first + names.len() * (width + 2)));
    out.push('\n');
    for (r, l) in rows.iter().zip(&labels) {
        out.push_str(&format!("{l:<first$}"));
        for n in &names {
            out.push_str(&format!("  {:>width$}", fmt_value(r.get(n))));
        }
        out.push('\n');
    }
    out
}

/// `C` down the side, `x` across the top, one metric in the cells.
pub fn render_grid(rows: &[Map<String, Value>], metric: &str) -> Option<String> {
    let num = |r: &Map<String, Value>, k: &str| r.get(k).and_then(Value::as_f64);
    let mut cs: Vec<f64> = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for r in rows {
        let (c, x) = (num(r, "C")?, num(r, "x")?);
        if !cs.contains(&c) {
            cs.push(c);
        }
        if !xs.contains(&x) {
            xs.push(x);
        }
    }
    if cs.is_empty() {
        return None;
    }
    let mut out = format!("{metric:<8}");
    for x in &xs {
        out.push_str(&format!("  {:>8}", format!("x={x}")));
    }
    out.push('\n');
    for c in &cs {
        out.push_str(&format!("{:<8}", format!("C={c}")));
        for x in &xs {
            let cell = rows.iter().find(|r| num(r, "C") == Some(*c) && num(r, "x") == Some(*x));
            out.push_str(&format!("  {:>8}", fmt_value(cell.and_then(|r| r.get(metric)))));
        }
        out.push('\n');
    }
    Some(out)
}
