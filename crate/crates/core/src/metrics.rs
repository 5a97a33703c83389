//! Evaluation-side IoU family: per-class Jaccard index, Dice, and the
//! image-, batch- and dataset-level means.
//!
//! Counts are kept as integers and only divided when a report is produced,
//! so accumulation is exact and order independent. An empty union counts as
//! a perfect score (0/0 = 1).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

fn ratio(intersection: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

fn counts(gt: &[usize], pred: &[usize], class: usize) -> Result<(u64, u64)> {
    check_len(gt.len(), pred.len())?;
    let mut inter = 0;
    let mut union = 0;
    for (&g, &p) in gt.iter().zip(pred) {
        let (a, b) = (g == class, p == class);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok((inter, union))
}

/// `|{gt = c} ∩ {pred = c}| / |{gt = c} ∪ {pred = c}|`, 1 when both are empty.
pub fn jaccard_index(gt: &[usize], pred: &[usize], class: usize) -> Result<f64> {
    let (i, u) = counts(gt, pred, class)?;
    Ok(ratio(i, u))
}

/// Dice coefficient `2J / (1 + J)`, 1 when both sets are empty.
pub fn dice(gt: &[usize], pred: &[usize], class: usize) -> Result<f64> {
    let j = jaccard_index(gt, pred, class)?;
    Ok(dice_from_jaccard(j))
}

pub fn dice_from_jaccard(j: f64) -> f64 {
    2.0 * j / (1.0 + j)
}

/// Running per-class intersection and union counts over a stream of images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
    images_seen: u64,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            images_seen: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn images_seen(&self) -> u64 {
        self.images_seen
    }

    pub fn intersection(&self) -> &[u64] {
        &self.intersection
    }

    pub fn union(&self) -> &[u64] {
        &self.union
    }

    /// Adds one image. Nothing is modified if a label is outside the class set.
    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        check_len(gt.len(), pred.len())?;
        let c = self.num_classes();
        if let Some(&label) = gt.iter().chain(pred).find(|&&y| y >= c) {
            return Err(Error::UnknownClass {
                label,
                num_classes: c,
            });
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.union[g] += 1;
            if g == p {
                self.intersection[g] += 1;
            } else {
                self.union[p] += 1;
            }
        }
        self.images_seen += 1;
        Ok(())
    }

    /// Count-wise sum with another accumulator over the same class set.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        check_len(self.num_classes(), other.num_classes())?;
        for c in 0..self.num_classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        self.images_seen += other.images_seen;
        Ok(())
    }

    pub fn class_iou(&self, class: usize) -> f64 {
        ratio(self.intersection[class], self.union[class])
    }
}

/// Per-class line of an [`IoUReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIoU {
    pub class: usize,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub per_class: Vec<ClassIoU>,
    pub mean_iou: f64,
}

impl IoUReport {
    /// Writes `class,intersection,union,iou` rows followed by `mean,,,<miou>`,
    /// with six decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "intersection", "union", "iou"])?;
        for row in &self.per_class {
            w.write_record([
                row.class.to_string(),
                row.intersection.to_string(),
                row.union.to_string(),
                format!("{:.6}", row.iou),
            ])?;
        }
        w.write_record(["mean", "", "", &format!("{:.6}", self.mean_iou)])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Parses the output of [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers != vec!["class", "intersection", "union", "iou"] {
            return Err(Error::Format(format!("unexpected header {headers:?}")));
        }
        let mut per_class = Vec::new();
        let mut mean = None;
        for record in r.records() {
            let record = record?;
            let field = |k: usize| record.get(k).unwrap_or("");
            let parse_err = |e: &dyn std::fmt::Display| Error::Format(format!("{record:?}: {e}"));
            if field(0) == "mean" {
                mean = Some(field(3).parse::<f64>().map_err(|e| parse_err(&e))?);
                continue;
            }
            per_class.push(ClassIoU {
                class: field(0).parse().map_err(|e| parse_err(&e))?,
                intersection: field(1).parse().map_err(|e| parse_err(&e))?,
                union: field(2).parse().map_err(|e| parse_err(&e))?,
                iou: field(3).parse().map_err(|e| parse_err(&e))?,
            });
        }
        let mean_iou = mean.ok_or_else(|| Error::Format("missing mean row".into()))?;
        Ok(Self {
            per_class,
            mean_iou,
        })
    }
}

/// Per-class IoU from pooled counts, averaged over every declared class.
pub fn dataset_miou(acc: &ConfusionAccumulator) -> IoUReport {
    dataset_miou_over(acc, &(0..acc.num_classes()).collect::<Vec<_>>())
}

/// Like [`dataset_miou`] but restricted to `classes`.
pub fn dataset_miou_over(acc: &ConfusionAccumulator, classes: &[usize]) -> IoUReport {
    let per_class: Vec<ClassIoU> = classes
        .iter()
        .map(|&c| ClassIoU {
            class: c,
            intersection: acc.intersection[c],
            union: acc.union[c],
            iou: acc.class_iou(c),
        })
        .collect();
    let mean_iou = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().map(|r| r.iou).sum::<f64>() / per_class.len() as f64
    };
    IoUReport {
        per_class,
        mean_iou,
    }
}

/// Mean over images of the per-image mean IoU over `classes`.
pub fn image_miou<G, P>(gt_images: &[G], pred_images: &[P], classes: &[usize]) -> Result<f64>
where
    G: AsRef<[usize]>,
    P: AsRef<[usize]>,
{
    check_len(gt_images.len(), pred_images.len())?;
    if gt_images.is_empty() {
        return Err(Error::InvalidInput("image-mIoU needs at least one image".into()));
    }
    if classes.is_empty() {
        return Err(Error::InvalidInput("empty class set".into()));
    }
    let mut total = 0.0;
    for (gt, pred) in gt_images.iter().zip(pred_images) {
        let mut per_image = 0.0;
        for &c in classes {
            per_image += jaccard_index(gt.as_ref(), pred.as_ref(), c)?;
        }
        total += per_image / classes.len() as f64;
    }
    Ok(total / gt_images.len() as f64)
}

/// Per-class image IoU averaged over images (one value per entry of `classes`).
pub fn image_class_iou<G, P>(gt_images: &[G], pred_images: &[P], classes: &[usize]) -> Result<Vec<f64>>
where
    G: AsRef<[usize]>,
    P: AsRef<[usize]>,
{
    check_len(gt_images.len(), pred_images.len())?;
    if gt_images.is_empty() {
        return Err(Error::InvalidInput("need at least one image".into()));
    }
    let n = gt_images.len() as f64;
    classes
        .iter()
        .map(|&c| {
            let mut sum = 0.0;
            for (gt, pred) in gt_images.iter().zip(pred_images) {
                sum += jaccard_index(gt.as_ref(), pred.as_ref(), c)?;
            }
            Ok(sum / n)
        })
        .collect()
}

/// mIoU of the pooled pixels of one minibatch. With `present_only`, the mean
/// is restricted to classes occurring in the batch ground truth.
pub fn batch_miou<G, P>(gt_batch: &[G], pred_batch: &[P], num_classes: usize, present_only: bool) -> Result<f64>
where
    G: AsRef<[usize]>,
    P: AsRef<[usize]>,
{
    check_len(gt_batch.len(), pred_batch.len())?;
    let mut acc = ConfusionAccumulator::new(num_classes);
    let mut present = vec![false; num_classes];
    for (gt, pred) in gt_batch.iter().zip(pred_batch) {
        acc.accumulate(gt.as_ref(), pred.as_ref())?;
        for &g in gt.as_ref() {
            present[g] = true;
        }
    }
    let classes: Vec<usize> = (0..num_classes)
        .filter(|&c| !present_only || present[c])
        .collect();
    Ok(dataset_miou_over(&acc, &classes).mean_iou)
}
