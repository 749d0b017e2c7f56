//! Plain-text tables followed by a JSON block.

use std::fmt::Write;

use serde::Serialize;

use crate::manifest::RunManifest;

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let n = self.header.len();
        let mut width: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (k, c) in r.iter().enumerate().take(n) {
                width[k] = width[k].max(c.len());
            }
        }
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(k, c)| if k == 0 { format!("{c:<w$}", w = width[k]) } else { format!("{c:>w$}", w = width[k]) })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&self.header, &mut out);
        let total: usize = width.iter().sum::<usize>() + 2 * (n.saturating_sub(1));
        let _ = writeln!(out, "{}", "-".repeat(total));
        for r in &self.rows {
            line(r, &mut out);
        }
        out
    }
}

pub fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.4}")
    }
}

/// Text sections, then `## json` and a single JSON document holding the
/// manifest and the payload.
pub fn document<P: Serialize>(title: &str, sections: &[(String, String)], manifest: &RunManifest, payload: &P) -> String {
    let mut out = format!("# {title}\n");
    for (head, body) in sections {
        if head.is_empty() {
            let _ = write!(out, "\n{body}");
        } else {
            let _ = write!(out, "\n## {head}\n{body}");
        }
    }
    let json = serde_json::json!({ "manifest": manifest, "result": payload });
    let _ = write!(out, "\n## json\n{}\n", serde_json::to_string_pretty(&json).expect("report serialises"));
    out
}
