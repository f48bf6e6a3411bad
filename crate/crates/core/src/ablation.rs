//! Mask-ratio and loss-component ablations: one short pre-training run per
//! row, summarised into a CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Result, SpaError};
use crate::losses::LossToggles;
use crate::scenes::Dataset;
use crate::trainer::{StepReport, TeacherSpec, Trainer};

pub const MASK_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.95];
pub const SUMMARY_FILE: &str = "ablation.csv";
pub const SUMMARY_HEADER: &str = "row,mask_ratio,color_on,depth_on,semantic_on,steps,first_total,last_total,\
color,depth,semantic,eikonal,sdf_near,free,\
gn_color,gn_depth,gn_semantic,gn_eikonal,gn_sdf_near,gn_free";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    MaskRatio,
    Loss,
}

impl std::str::FromStr for Axis {
    type Err = SpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_ratio" => Ok(Axis::MaskRatio),
            "loss" => Ok(Axis::Loss),
            other => Err(SpaError::invalid(format!("unknown ablation axis `{other}` (mask_ratio|loss)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub mask_ratio: f64,
    pub toggles: LossToggles,
}

/// The experiment matrix of one axis. Loss rows keep the base mask ratio and
/// switch off depth, then color, then semantic.
pub fn rows(axis: Axis, base: &TrainConfig) -> Vec<AblationRow> {
    match axis {
        Axis::MaskRatio => MASK_RATIOS
            .iter()
            .map(|&r| AblationRow {
                label: format!("mask{r:.2}"),
                mask_ratio: r,
                toggles: base.toggles,
            })
            .collect(),
        Axis::Loss => ["depth", "color", "semantic"]
            .iter()
            .map(|&off| {
                let mut t = base.toggles;
                match off {
                    "depth" => t.depth = false,
                    "color" => t.color = false,
                    _ => t.semantic = false,
                }
                AblationRow {
                    label: format!("no_{off}"),
                    mask_ratio: base.mask_ratio,
                    toggles: t,
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub reports: Vec<StepReport>,
}

impl AblationResult {
    fn mean_total(r: &[StepReport]) -> f64 {
        r.iter().map(|s| s.breakdown.total).sum::<f64>() / r.len().max(1) as f64
    }

    /// Mean total loss over the first `n` steps.
    pub fn first_total(&self, n: usize) -> f64 {
        Self::mean_total(&self.reports[..n.min(self.reports.len())])
    }

    pub fn last_total(&self, n: usize) -> f64 {
        Self::mean_total(&self.reports[self.reports.len().saturating_sub(n)..])
    }

    /// Largest absolute raw value of each term over the run.
    pub fn max_terms(&self) -> [f64; 6] {
        let mut m = [0.0f64; 6];
        for r in &self.reports {
            let b = &r.breakdown;
            for (i, v) in [b.color, b.depth, b.semantic, b.eikonal, b.sdf_near, b.free].into_iter().enumerate() {
                m[i] = m[i].max(v.abs());
            }
        }
        m
    }

    /// Largest gradient norm of each weighted term over the run.
    pub fn max_grad_norms(&self) -> [f64; 6] {
        let mut m = [0.0f64; 6];
        for r in &self.reports {
            for (i, g) in r.term_grad_norms.unwrap_or_default().into_iter().enumerate() {
                m[i] = m[i].max(g);
            }
        }
        m
    }

    pub fn csv_row(&self) -> String {
        let t = &self.row.toggles;
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            self.row.label,
            self.row.mask_ratio,
            t.color as u8,
            t.depth as u8,
            t.semantic as u8,
            self.reports.len(),
            self.first_total(10),
            self.last_total(10)
        );
        for v in self.max_terms().into_iter().chain(self.max_grad_norms()) {
            write!(s, ",{v}").unwrap();
        }
        s
    }
}

/// Trains every row of `axis` from the same initialisation and writes each
/// run to `out/<label>/` plus the summary to `out/ablation.csv`.
pub fn run_ablation(
    base: &TrainConfig,
    axis: Axis,
    ds: &Dataset,
    out: &Path,
    mut on_step: impl FnMut(&str, &StepReport),
) -> Result<Vec<AblationResult>> {
    fs::create_dir_all(out).map_err(SpaError::io(out))?;
    let mut results = Vec::new();
    for row in rows(axis, base) {
        let mut cfg = base.clone();
        cfg.mask_ratio = row.mask_ratio;
        cfg.toggles = row.toggles;
        cfg.term_grad_norms = true;
        let mut tr = Trainer::new(&cfg, TeacherSpec::of(ds))?;
        let reports = tr.fit(ds, &out.join(&row.label), None, |r| on_step(&row.label, r))?;
        results.push(AblationResult { row, reports });
    }
    let mut text = format!("{SUMMARY_HEADER}\n");
    for r in &results {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, text).map_err(SpaError::io(&path))?;
    Ok(results)
}
