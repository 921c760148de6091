// SPDX-License-Identifier: MIT OR Apache-2.0

use super::LensGrid;

fn cell_text(grid: &LensGrid, i: usize, j: usize) -> String {
    let c = &grid.cells[i][j];
    match (&c.mention, &c.failed) {
        (Some(m), _) => m.clone(),
        (None, Some(_)) => "✗".into(),
        (None, None) => String::new(),
    }
}

fn width(s: &str) -> usize {
    s.chars().count()
}

fn pad(s: &str, w: usize) -> String {
    let mut out = s.to_string();
    out.extend(std::iter::repeat_n(' ', w.saturating_sub(width(s))));
    out
}

/// Aligned plain-text table: one row per layer, one column per token, with
/// the logit-lens token in brackets.
pub fn render_term(grid: &LensGrid) -> String {
    let n = grid.tokens.len();
    let mut cols: Vec<Vec<String>> = Vec::with_capacity(n + 1);
    let mut first = vec!["layer".to_string()];
    first.extend(grid.layers.iter().map(|l| format!("L{l}")));
    cols.push(first);
    for j in 0..n {
        let mut col = vec![grid.tokens[j].trim().to_string()];
        for i in 0..grid.layers.len() {
            col.push(format!("{} [{}]", cell_text(grid, i, j), grid.cells[i][j].logit_top.trim()));
        }
        cols.push(col);
    }
    let widths: Vec<usize> = cols
        .iter()
        .map(|c| c.iter().map(|s| width(s)).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in 0..=grid.layers.len() {
        let line: Vec<String> = cols.iter().zip(&widths).map(|(c, &w)| pad(&c[r], w)).collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone HTML page with the grid as a table.
pub fn render_html(grid: &LensGrid) -> String {
    let mut h = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Entity Lens</title>\n<style>\
         body{font-family:sans-serif}table{border-collapse:collapse}\
         td,th{border:1px solid #ccc;padding:4px 6px;font-size:13px;white-space:nowrap}\
         td.failed{background:#fdd;color:#900}td small{color:#777}\
         </style></head><body>\n",
    );
    h.push_str(&format!(
        "<h3>{}</h3>\n<p>model {} &middot; config {}</p>\n<table>\n<tr><th>layer</th>",
        esc(&grid.text),
        esc(&grid.model_id),
        esc(&grid.config_hash)
    ));
    for t in &grid.tokens {
        h.push_str(&format!("<th>{}</th>", esc(t)));
    }
    h.push_str("</tr>\n");
    for (i, l) in grid.layers.iter().enumerate() {
        h.push_str(&format!("<tr><th>L{l}</th>"));
        for (j, c) in grid.cells[i].iter().enumerate() {
            let class = if c.failed.is_some() { " class=\"failed\"" } else { "" };
            let title = c.failed.as_deref().unwrap_or("");
            h.push_str(&format!(
                "<td{class} title=\"{}\">{}<br><small>{}</small></td>",
                esc(title),
                esc(&cell_text(grid, i, j)),
                esc(&c.logit_top)
            ));
        }
        h.push_str("</tr>\n");
    }
    h.push_str("</table>\n</body></html>\n");
    h
}
