//! Segmentation metrics, modality ablation and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataio::{FrameBundle, Modality, ModalitySet};
use crate::model::{predict, Params};
use crate::raster::{LabelMap, CLASS_NAMES, IGNORE, NUM_CLASSES};
use crate::{Error, Result};

/// Pixel counts indexed `[ground truth][prediction]`. Ignored ground-truth
/// pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        (0..self.classes).map(|p| self.get(gt, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, pred)).sum()
    }

    /// Add the pixels of one prediction.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Invalid(format!("class id {} out of range", p.max(g))));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `None` where the class is absent from both prediction and ground truth.
    pub iou: Vec<Option<f64>>,
    /// Mean over the defined classes.
    pub miou: Option<f64>,
    /// Ground-truth pixel count per class.
    pub gt_pixels: Vec<u64>,
}

pub fn iou(cm: &ConfusionMatrix) -> MetricsReport {
    let iou: Vec<Option<f64>> = (0..cm.classes)
        .map(|k| {
            let tp = cm.get(k, k);
            let union = cm.row_sum(k) + cm.col_sum(k) - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    MetricsReport {
        iou,
        miou,
        gt_pixels: (0..cm.classes).map(|k| cm.row_sum(k)).collect(),
    }
}

/// Confusion of joint-head predictions over `frames` with `mask` zeroed.
pub fn evaluate_confusion(params: &Params, frames: &[FrameBundle], mask: ModalitySet) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.config.classes);
    for f in frames {
        cm.accumulate(&predict(params, f, mask)?, &f.labels)?;
    }
    Ok(cm)
}

pub fn evaluate(params: &Params, frames: &[FrameBundle], mask: ModalitySet) -> Result<MetricsReport> {
    Ok(iou(&evaluate_confusion(params, frames, mask)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Modalities fed to the network; all others are zeroed.
    pub subset: ModalitySet,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Ordered by subset bitmask.
    pub rows: Vec<AblationRow>,
    /// Whether adding a modality never lowered mIoU. Informational only.
    pub monotone: bool,
}

impl AblationReport {
    pub fn get(&self, subset: ModalitySet) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.subset == subset).map(|r| &r.report)
    }

    pub fn named(&self) -> Vec<(String, MetricsReport)> {
        self.rows.iter().map(|r| (r.subset.to_string(), r.report.clone())).collect()
    }
}

/// Evaluate every non-empty subset of `modalities`, zeroing everything
/// outside the subset.
pub fn ablation_sweep(params: &Params, frames: &[FrameBundle], modalities: &[Modality]) -> Result<AblationReport> {
    let mut universe = ModalitySet::EMPTY;
    for &m in modalities {
        if universe.contains(m) {
            return Err(Error::Invalid(format!("modality {} listed twice", m.name())));
        }
        universe = universe.with(m);
    }
    let mut subsets: Vec<ModalitySet> = (1u8..8)
        .map(ModalitySet::from_bits)
        .filter(|s| s.is_subset_of(universe))
        .collect();
    subsets.sort();
    let rows = subsets
        .into_iter()
        .map(|subset| {
            Ok(AblationRow {
                subset,
                report: evaluate(params, frames, subset.complement())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let score = |r: &AblationRow| r.report.miou.unwrap_or(0.0);
    let monotone = rows.iter().all(|small| {
        rows.iter()
            .filter(|big| big.subset != small.subset && small.subset.is_subset_of(big.subset))
            .all(|big| score(big) >= score(small))
    });
    Ok(AblationReport { rows, monotone })
}

pub const METRICS_HEADER: &str = "name,class,iou,gt_pixels";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with one row per class and a `mean` row per report, at full
/// precision. Undefined values are empty.
pub fn metrics_csv(reports: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (name, r) in reports {
        for (k, v) in r.iou.iter().enumerate() {
            let class = CLASS_NAMES.get(k).copied().unwrap_or("class");
            writeln!(out, "{name},{class},{},{}", opt(*v), r.gt_pixels[k]).unwrap();
        }
        writeln!(out, "{name},mean,{},{}", opt(r.miou), r.gt_pixels.iter().sum::<u64>()).unwrap();
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, MetricsReport)>> {
    let bad = |line: usize, msg: &str| Error::Config {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some(METRICS_HEADER) {
        return Err(bad(1, "missing metrics header"));
    }
    let mut out: Vec<(String, MetricsReport)> = Vec::new();
    let mut pending: Option<(String, Vec<Option<f64>>, Vec<u64>)> = None;
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(line_no, "expected 4 columns"));
        }
        let value = match cols[2] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| bad(line_no, &e.to_string()))?),
        };
        let pixels: u64 = cols[3].parse().map_err(|_| bad(line_no, "bad pixel count"))?;
        let entry = pending.get_or_insert_with(|| (cols[0].to_string(), Vec::new(), Vec::new()));
        if entry.0 != cols[0] {
            return Err(bad(line_no, "report ended without a mean row"));
        }
        if cols[1] == "mean" {
            let (name, iou, gt_pixels) = pending.take().expect("entry exists");
            out.push((name, MetricsReport { iou, miou: value, gt_pixels }));
        } else {
            entry.1.push(value);
            entry.2.push(pixels);
        }
    }
    if pending.is_some() {
        return Err(bad(text.lines().count(), "report ended without a mean row"));
    }
    Ok(out)
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Markdown table, one row per report, values in percent.
pub fn metrics_markdown(title: &str, reports: &[(String, MetricsReport)]) -> String {
    let mut out = format!("## {title}\n\n| name | mIoU |");
    for c in CLASS_NAMES {
        write!(out, " {c} |").unwrap();
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(CLASS_NAMES.len()));
    out.push('\n');
    for (name, r) in reports {
        write!(out, "| {name} | {} |", pct(r.miou)).unwrap();
        for k in 0..CLASS_NAMES.len() {
            write!(out, " {} |", pct(r.iou.get(k).copied().flatten())).unwrap();
        }
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the CSV and the markdown table for `reports`.
pub fn emit_report(reports: &[(String, MetricsReport)], csv_path: &Path, markdown_path: &Path, title: &str) -> Result<()> {
    write(csv_path, &metrics_csv(reports))?;
    write(markdown_path, &metrics_markdown(title, reports))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, MetricsReport)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// `axis,value` rows for a radar chart: val mIoU, test mIoU and per-class
/// test IoU. Undefined values are empty.
pub fn radar_csv(val: &MetricsReport, test: &MetricsReport) -> String {
    let mut out = String::from("axis,value\n");
    writeln!(out, "val_miou,{}", opt(val.miou)).unwrap();
    writeln!(out, "test_miou,{}", opt(test.miou)).unwrap();
    for (k, v) in test.iou.iter().enumerate() {
        let class = CLASS_NAMES.get(k).copied().unwrap_or("class");
        writeln!(out, "test_{class},{}", opt(*v)).unwrap();
    }
    out
}
