//! Attention explanations and self-contained heatmap pages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::hierarchy::LabelHierarchy;
use crate::tensor::TensorError;
use crate::training::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    pub position: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelExplanation {
    pub label: String,
    pub score: f64,
    /// Highest-weight tokens, heaviest first.
    pub tokens: Vec<TokenWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelExplanation {
    pub level: usize,
    pub labels: Vec<LabelExplanation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub id: String,
    pub levels: Vec<LevelExplanation>,
}

/// Full attention rows behind an explanation, for rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub id: String,
    pub tokens: Vec<String>,
    /// Per level: `(label, score, weight per token)`.
    pub rows: Vec<Vec<(String, f64, Vec<f64>)>>,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Labels whose blended score exceeds `min_score`, each with its `top_k`
/// heaviest tokens. Scores and weights are rounded to 6 decimals.
pub fn explain_document(
    params: &ModelParams,
    hier: &LabelHierarchy,
    doc: &Document,
    top_k: usize,
    min_score: f64,
) -> Result<(ExplanationRecord, Heatmap), TensorError> {
    let (scores, traces) = params.predict(&doc.tokens, params.config.alpha)?;
    let shown: Vec<String> = doc.tokens.iter().take(params.config.max_len).cloned().collect();
    let mut levels = Vec::with_capacity(traces.len());
    let mut rows = Vec::with_capacity(traces.len());
    let mut offset = 0;
    for (h, trace) in traces.iter().enumerate() {
        let names = hier.labels_at_level(h + 1).expect("model depth matches hierarchy");
        let mut labels = Vec::new();
        let mut level_rows = Vec::new();
        for (j, name) in names.iter().enumerate() {
            let score = scores.blended.get(offset + j, 0);
            if score <= min_score {
                continue;
            }
            let weights = trace.a.row(j).to_vec();
            let mut ranked: Vec<usize> = (0..shown.len()).collect();
            ranked.sort_by(|&x, &y| weights[y].total_cmp(&weights[x]).then(x.cmp(&y)));
            let tokens = ranked
                .into_iter()
                .take(top_k)
                .map(|i| TokenWeight { token: shown[i].clone(), position: i, weight: round6(weights[i]) })
                .collect();
            labels.push(LabelExplanation { label: name.to_string(), score: round6(score), tokens });
            level_rows.push((name.to_string(), score, weights));
        }
        offset += names.len();
        levels.push(LevelExplanation { level: h + 1, labels });
        rows.push(level_rows);
    }
    Ok((ExplanationRecord { id: doc.id.clone(), levels }, Heatmap { id: doc.id.clone(), tokens: shown, rows }))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// A standalone HTML page: one row per label, each token shaded by its
/// weight relative to the row maximum.
pub fn render_heatmap(map: &Heatmap) -> String {
    let mut html = String::new();
    let title = escape(&map.id);
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{title}</title>\n<style>\
         body{{font-family:sans-serif;margin:1.5em}}table{{border-collapse:collapse;margin-bottom:1.5em}}\
         td{{padding:2px 4px;vertical-align:top}}td.label{{font-weight:bold;white-space:nowrap}}\
         span.tok{{display:inline-block;margin:1px;padding:1px 3px;border-radius:3px}}</style></head>\n<body>\n<h1>{title}</h1>\n"
    );
    for (h, rows) in map.rows.iter().enumerate() {
        let _ = writeln!(html, "<h2>Level {}</h2>", h + 1);
        if rows.is_empty() {
            html.push_str("<p>No label above the score threshold.</p>\n");
            continue;
        }
        html.push_str("<table>\n");
        for (label, score, weights) in rows {
            let peak = weights.iter().copied().fold(0.0, f64::max);
            let _ = write!(html, "<tr><td class=\"label\">{} ({score:.6})</td><td>", escape(label));
            for (token, &w) in map.tokens.iter().zip(weights) {
                let alpha = if peak > 0.0 { w / peak } else { 0.0 };
                let _ = write!(
                    html,
                    "<span class=\"tok\" style=\"background:rgba(220,40,40,{alpha:.3})\" title=\"{w:.6}\">{}</span>",
                    escape(token)
                );
            }
            html.push_str("</td></tr>\n");
        }
        html.push_str("</table>\n");
    }
    html.push_str("</body></html>\n");
    html
}
