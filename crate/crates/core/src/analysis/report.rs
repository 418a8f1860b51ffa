use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{InterferenceReport, TokenAttentionSummary, TokenInfluenceReport};
use crate::error::{Error, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn word(words: &[String], pos: usize) -> &str {
    words.get(pos).map_or("?", |s| s.as_str())
}

/// `adapter,projection,position,token,magnitude`, one row per token.
pub fn write_influence_csv(path: &Path, report: &TokenInfluenceReport, words: &[String]) -> Result<()> {
    let mut out = String::from("adapter,projection,position,token,magnitude\n");
    for e in &report.entries {
        for (pos, v) in e.magnitudes.iter().enumerate() {
            let _ = writeln!(out, "{},{},{pos},{},{v:e}", e.adapter, e.projection.as_str(), word(words, pos));
        }
    }
    write_file(path, out.as_bytes())
}

/// Entropy and pairwise IoU per summarized token. The first line records the
/// top-mass fraction used.
pub fn write_attention_csv(path: &Path, summary: &TokenAttentionSummary, words: &[String]) -> Result<()> {
    let mut out = format!(
        "# top_fraction={} steps={}..{}\nposition,token,entropy",
        summary.top_fraction, summary.steps.start, summary.steps.end
    );
    for p in &summary.positions {
        let _ = write!(out, ",iou_{p}");
    }
    out.push('\n');
    for (i, p) in summary.positions.iter().enumerate() {
        let _ = write!(out, "{p},{},{:e}", word(words, *p), summary.entropy[i]);
        for v in &summary.iou[i] {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn write_interference_csv(path: &Path, reports: &[InterferenceReport]) -> Result<()> {
    let mut out = String::from("method,concept,mse\n");
    for r in reports {
        for e in &r.entries {
            let _ = writeln!(out, "{},{},{:e}", r.method, e.concept, e.mse);
        }
    }
    write_file(path, out.as_bytes())
}

/// Binary 16-bit PGM, values scaled so the maximum maps to 65535.
pub fn write_pgm16(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Shape {
            op: "pgm",
            left: (height, width),
            right: (1, values.len()),
        });
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        let level = if max > 0.0 { (v.max(0.0) / max * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&level.to_be_bytes());
    }
    write_file(path, &out)
}

/// One heatmap `tok{position}.pgm` per summarized token in `dir`.
pub fn write_heatmaps(dir: &Path, summary: &TokenAttentionSummary) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(summary.positions.len());
    for (i, p) in summary.positions.iter().enumerate() {
        let path = dir.join(format!("tok{p}.pgm"));
        write_pgm16(&path, &summary.maps[i], summary.grid, summary.grid)?;
        paths.push(path);
    }
    Ok(paths)
}
