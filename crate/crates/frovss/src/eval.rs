//! Confusion-matrix accumulation and per-class IoU / mIoU reporting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from evaluation.
pub const IGNORE_INDEX: u8 = 255;

/// Pixel confusion counts; rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    /// Add every non-ignored pixel of `pred` vs `gt`.
    ///
    /// Ground truth may contain [`IGNORE_INDEX`]; predictions must be
    /// total (a prediction of 255 is an error).
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::model(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dim(),
                gt.dim()
            )));
        }
        let n = self.num_classes() as u8;
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *p == IGNORE_INDEX {
                return Err(Error::model("prediction contains the ignore index 255"));
            }
            if *g == IGNORE_INDEX {
                self.ignored += 1;
                continue;
            }
            if *g >= n || *p >= n {
                return Err(Error::model(format!(
                    "label {} outside the {}-class ontology",
                    (*g).max(*p),
                    n
                )));
            }
            self.counts[[*g as usize, *p as usize]] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; shards accumulated independently combine to
    /// the same matrix as a single pass.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
        self.ignored += other.ignored;
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.sum() + self.ignored
    }
}

/// How classes with an empty denominator (never predicted, never
/// present) enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanConvention {
    /// Excluded from the mean, flagged in the report.
    ExcludeAbsent,
    /// Counted as 0.0, the convention used for adaptation reports.
    #[default]
    CountAbsentAsZero,
}

impl MeanConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeanConvention::ExcludeAbsent => "exclude_absent",
            MeanConvention::CountAbsentAsZero => "count_absent_as_zero",
        }
    }
}

/// Per-class result; `absent` marks an empty denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: u32,
    pub iou: f64,
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
    pub convention: MeanConvention,
}

/// `IoU_n = TP / (TP + FN + FP)` per class, plus the mean under the
/// requested convention.
pub fn miou(cm: &ConfusionMatrix, convention: MeanConvention) -> IouReport {
    let n = cm.num_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n {
        let tp = cm.counts[[c, c]];
        let row: u64 = (0..n).map(|j| cm.counts[[c, j]]).sum();
        let col: u64 = (0..n).map(|i| cm.counts[[i, c]]).sum();
        let denom = row + col - tp;
        let absent = denom == 0;
        let iou = if absent { 0.0 } else { tp as f64 / denom as f64 };
        if !absent || convention == MeanConvention::CountAbsentAsZero {
            sum += iou;
            counted += 1;
        }
        per_class.push(ClassIou {
            class_id: c as u32,
            iou,
            absent,
        });
    }
    IouReport {
        per_class,
        miou: if counted == 0 { 0.0 } else { sum / counted as f64 },
        convention,
    }
}

impl IouReport {
    /// Report JSON: `{"per_class": {name: iou}, "miou": .., "convention": ..}`.
    pub fn to_json(&self, class_names: &[String]) -> serde_json::Value {
        let mut per_class = serde_json::Map::new();
        for entry in &self.per_class {
            let name = class_names
                .get(entry.class_id as usize)
                .cloned()
                .unwrap_or_else(|| format!("class_{}", entry.class_id));
            per_class.insert(
                name,
                serde_json::json!(if entry.absent && self.convention == MeanConvention::ExcludeAbsent
                {
                    serde_json::Value::Null
                } else {
                    serde_json::json!(entry.iou)
                }),
            );
        }
        serde_json::json!({
            "per_class": per_class,
            "miou": self.miou,
            "convention": self.convention.as_str(),
        })
    }

    pub fn iou_of(&self, class_id: u32) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.class_id == class_id)
            .map(|c| c.iou)
    }
}

/// Render the per-class IoU report as a simple bar chart PNG.
pub fn render_bar_chart(
    report: &IouReport,
    class_names: &[String],
    path: &std::path::Path,
) -> Result<()> {
    let n = report.per_class.len().max(1);
    let bar_w = 28u32;
    let gap = 12u32;
    let width = 40 + n as u32 * (bar_w + gap) + 20;
    let height = 220u32;
    let chart_h = 160f64;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([250, 250, 250]));

    for (i, entry) in report.per_class.iter().enumerate() {
        let h = (entry.iou.clamp(0.0, 1.0) * chart_h) as u32;
        let x0 = 40 + i as u32 * (bar_w + gap);
        let color = if entry.absent {
            image::Rgb([180, 180, 180])
        } else {
            image::Rgb([70, 110, 190])
        };
        for x in x0..x0 + bar_w {
            for y in (180 - h)..180 {
                img.put_pixel(x, y, color);
            }
        }
        // tick mark per class baseline
        for x in x0..x0 + bar_w {
            img.put_pixel(x, 181, image::Rgb([60, 60, 60]));
        }
        let _ = class_names.get(i); // names only appear in the JSON report
    }
    img.save(path)?;
    Ok(())
}
