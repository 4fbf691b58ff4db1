//! Quality reports: per-image scores, per-variant aggregates and the model
//! cost block, written as JSON and as an aligned text table.
//!
//! Both files come from the same [`QualityReport`] value. Text columns, in
//! order: `group`, `n`, `psnr_in`, `psnr_out`, `ssim_in`, `ssim_out`,
//! `acc_in`, `acc_out`. The cost block lists `variant`, `size`, `stages`,
//! `params_m`, `flops_g`. Numbers are printed with four decimals, `-` marks
//! an absent accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enhance::CostSummary;
use crate::error::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
/// Name of the aggregate over all variants.
pub const OVERALL: &str = "all";

/// Scores of one degraded image before and after enhancement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image: String,
    pub variant: String,
    /// Degraded input against clean.
    pub psnr_in: f64,
    pub ssim_in: f64,
    /// Enhanced output against clean.
    pub psnr_out: f64,
    pub ssim_out: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_in: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_out: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    pub psnr_in: f64,
    pub psnr_out: f64,
    pub ssim_in: f64,
    pub ssim_out: f64,
    pub acc_in: Option<f64>,
    pub acc_out: Option<f64>,
}

impl GroupSummary {
    fn of(group: String, scores: &[&ImageScore]) -> Self {
        let n = scores.len() as f64;
        let mean = |f: fn(&ImageScore) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
        let acc = |f: fn(&ImageScore) -> Option<bool>| {
            let hits: Option<Vec<bool>> = scores.iter().map(|s| f(s)).collect();
            hits.map(|h| h.iter().filter(|b| **b).count() as f64 / n)
        };
        Self {
            group,
            count: scores.len(),
            psnr_in: mean(|s| s.psnr_in),
            psnr_out: mean(|s| s.psnr_out),
            ssim_in: mean(|s| s.ssim_in),
            ssim_out: mean(|s| s.ssim_out),
            acc_in: acc(|s| s.hit_in),
            acc_out: acc(|s| s.hit_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: String,
    pub height: usize,
    pub width: usize,
    pub stages: usize,
    pub params: usize,
    pub params_m: f64,
    pub flops_g: f64,
}

impl From<&CostSummary> for CostRow {
    fn from(c: &CostSummary) -> Self {
        Self {
            variant: c.variant.clone(),
            height: c.height,
            width: c.width,
            stages: c.stages,
            params: c.params,
            params_m: c.params_m(),
            flops_g: c.flops_g(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub images: Vec<ImageScore>,
    /// One row per variant tag in sorted order, then [`OVERALL`].
    pub groups: Vec<GroupSummary>,
    pub costs: Vec<CostRow>,
}

impl QualityReport {
    pub fn new(images: Vec<ImageScore>, costs: &[CostSummary]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("no evaluated images to report".into()));
        }
        let mut tags: Vec<&str> = images.iter().map(|s| s.variant.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        let mut groups: Vec<GroupSummary> = tags
            .iter()
            .map(|t| GroupSummary::of(t.to_string(), &images.iter().filter(|s| s.variant == *t).collect::<Vec<_>>()))
            .collect();
        groups.push(GroupSummary::of(OVERALL.into(), &images.iter().collect::<Vec<_>>()));
        let costs = costs.iter().map(CostRow::from).collect();
        Ok(Self { images, groups, costs })
    }

    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn overall(&self) -> &GroupSummary {
        self.groups.last().expect("report has an overall row")
    }

    pub fn text_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut rows = vec![["group", "n", "psnr_in", "psnr_out", "ssim_in", "ssim_out", "acc_in", "acc_out"].map(String::from).to_vec()];
        for g in &self.groups {
            rows.push(vec![
                g.group.clone(),
                g.count.to_string(),
                format!("{:.4}", g.psnr_in),
                format!("{:.4}", g.psnr_out),
                format!("{:.4}", g.ssim_in),
                format!("{:.4}", g.ssim_out),
                opt(g.acc_in),
                opt(g.acc_out),
            ]);
        }
        let mut out = aligned(&rows);
        if !self.costs.is_empty() {
            out.push('\n');
            out.push_str(&cost_table(&self.costs));
        }
        out
    }
}

/// Aligned cost table with the fixed column order.
pub fn cost_table(costs: &[CostRow]) -> String {
    let mut rows = vec![["variant", "size", "stages", "params_m", "flops_g"].map(String::from).to_vec()];
    for c in costs {
        rows.push(vec![
            c.variant.clone(),
            format!("{}x{}", c.width, c.height),
            c.stages.to_string(),
            format!("{:.4}", c.params_m),
            format!("{:.4}", c.flops_g),
        ]);
    }
    aligned(&rows)
}

/// Left-aligned first column, right-aligned numbers.
pub fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub text: PathBuf,
}

/// Build the report and write `report.json` and `report.txt` into `dir`.
/// Nothing is written when `images` is empty.
pub fn emit_report(images: Vec<ImageScore>, costs: &[CostSummary], dir: &Path) -> Result<(QualityReport, ReportFiles)> {
    let report = QualityReport::new(images, costs)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles { json: dir.join(REPORT_JSON), text: dir.join(REPORT_TEXT) };
    fs::write(&files.json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&files.json, e))?;
    fs::write(&files.text, report.text_table()).map_err(|e| Error::io(&files.text, e))?;
    Ok((report, files))
}
