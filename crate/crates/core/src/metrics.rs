//! Dice / average surface distance, connected-component post-processing,
//! and cross-subject aggregation.

use crate::dataset::{DomainDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nets::{ParamSet, UnetDesc};
use crate::tensor::Real;

/// Dice overlap of two binary masks; two empty masks count as a perfect
/// match.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dice",
            format!("{}", gt.len()),
            format!("{}", pred.len()),
        ));
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Boundary pixels of a mask: foreground with at least one background
/// 4-neighbor; the image border counts as background.
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Symmetric average surface distance in pixels: the mean, over boundary
/// pixels of both masks, of the exact Euclidean distance to the other
/// mask's boundary. Errors if either mask is empty.
pub fn asd(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != h * w {
        return Err(Error::shape(
            "asd",
            format!("{h}x{w}"),
            format!("{} vs {}", pred.len(), gt.len()),
        ));
    }
    let bp = boundary_pixels(pred, h, w);
    let bg = boundary_pixels(gt, h, w);
    if bp.is_empty() {
        return Err(Error::EmptyMask { class: 0 });
    }
    if bg.is_empty() {
        return Err(Error::EmptyMask { class: 0 });
    }
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut total = 0.0;
        for &(ay, ax) in from {
            let mut best = f64::INFINITY;
            for &(by, bx) in to {
                let dy = ay as f64 - by as f64;
                let dx = ax as f64 - bx as f64;
                let d2 = dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            total += best.sqrt();
        }
        total
    };
    let total = nearest(&bp, &bg) + nearest(&bg, &bp);
    Ok(total / (bp.len() + bg.len()) as f64)
}

/// Keeps, independently per foreground class, only the largest 4-connected
/// component (ties: the component whose scanline-first pixel comes first).
/// Removed pixels become background. Idempotent.
pub fn largest_component(labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; labels.len()];
    let mut comp = vec![usize::MAX; labels.len()];
    for class in 1..NUM_CLASSES as u8 {
        comp.fill(usize::MAX);
        let mut best_size = 0usize;
        let mut best_id = usize::MAX;
        let mut n_comp = 0usize;
        let mut stack = Vec::new();
        for start in 0..labels.len() {
            if labels[start] != class || comp[start] != usize::MAX {
                continue;
            }
            let id = n_comp;
            n_comp += 1;
            let mut size = 0usize;
            stack.push(start);
            comp[start] = id;
            while let Some(p) = stack.pop() {
                size += 1;
                let (y, x) = (p / w, p % w);
                let mut try_push = |q: usize| {
                    if labels[q] == class && comp[q] == usize::MAX {
                        comp[q] = id;
                        stack.push(q);
                    }
                };
                if y > 0 {
                    try_push(p - w);
                }
                if y + 1 < h {
                    try_push(p + w);
                }
                if x > 0 {
                    try_push(p - 1);
                }
                if x + 1 < w {
                    try_push(p + 1);
                }
            }
            // strict > keeps the earliest (lowest scanline root) on ties
            if size > best_size {
                best_size = size;
                best_id = id;
            }
        }
        if best_id != usize::MAX {
            for p in 0..labels.len() {
                if labels[p] == class && comp[p] == best_id {
                    out[p] = class;
                }
            }
        }
    }
    out
}

/// Per-subject metric values for every foreground class.
#[derive(Debug, Clone)]
pub struct SubjectMetrics {
    pub subject: u32,
    pub dice: Vec<f64>,
    pub asd: Vec<f64>,
}

/// Aggregated evaluation results: per-class means with cross-subject
/// standard deviation, plus the raw per-subject values.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_subject: Vec<SubjectMetrics>,
    pub dice_mean: Vec<f64>,
    pub dice_std: Vec<f64>,
    pub asd_mean: Vec<f64>,
    pub asd_std: Vec<f64>,
    /// Mean over classes per subject, then mean/std over subjects.
    pub overall_dice_mean: f64,
    pub overall_dice_std: f64,
    pub overall_asd_mean: f64,
    pub overall_asd_std: f64,
    pub notes: Vec<String>,
}

pub const CLASS_NAMES: [&str; NUM_CLASSES - 1] = ["disc", "ring", "ellipse_a", "ellipse_b"];

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    /// Aggregates per-subject values (population std over subjects).
    pub fn from_subjects(per_subject: Vec<SubjectMetrics>, notes: Vec<String>) -> Self {
        let nc = NUM_CLASSES - 1;
        let mut dice_mean = Vec::with_capacity(nc);
        let mut dice_std = Vec::with_capacity(nc);
        let mut asd_mean = Vec::with_capacity(nc);
        let mut asd_std = Vec::with_capacity(nc);
        for c in 0..nc {
            let d: Vec<f64> = per_subject.iter().map(|s| s.dice[c]).collect();
            let a: Vec<f64> = per_subject.iter().map(|s| s.asd[c]).collect();
            let (dm, ds) = mean_std(&d);
            let (am, asd_s) = mean_std(&a);
            dice_mean.push(dm);
            dice_std.push(ds);
            asd_mean.push(am);
            asd_std.push(asd_s);
        }
        let subj_dice: Vec<f64> = per_subject
            .iter()
            .map(|s| s.dice.iter().sum::<f64>() / nc as f64)
            .collect();
        let subj_asd: Vec<f64> = per_subject
            .iter()
            .map(|s| s.asd.iter().sum::<f64>() / nc as f64)
            .collect();
        let (overall_dice_mean, overall_dice_std) = mean_std(&subj_dice);
        let (overall_asd_mean, overall_asd_std) = mean_std(&subj_asd);
        MetricsReport {
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            per_subject,
            dice_mean,
            dice_std,
            asd_mean,
            asd_std,
            overall_dice_mean,
            overall_dice_std,
            overall_asd_mean,
            overall_asd_std,
            notes,
        }
    }

    /// Stable-ordered human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("metrics_report v1\n");
        s.push_str(&format!("subjects = {}\n", self.per_subject.len()));
        for (c, name) in self.class_names.iter().enumerate() {
            s.push_str(&format!(
                "class {name}: dice_mean = {:.6} dice_std = {:.6} asd_mean = {:.6} asd_std = {:.6}\n",
                self.dice_mean[c], self.dice_std[c], self.asd_mean[c], self.asd_std[c]
            ));
        }
        s.push_str(&format!(
            "average: dice_mean = {:.6} dice_std = {:.6} asd_mean = {:.6} asd_std = {:.6}\n",
            self.overall_dice_mean, self.overall_dice_std, self.overall_asd_mean, self.overall_asd_std
        ));
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        for sm in &self.per_subject {
            s.push_str(&format!(
                "subject {}: dice = {} asd = {}\n",
                sm.subject,
                sm.dice
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(","),
                sm.asd
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ));
        }
        s
    }

    /// One CSV row per subject.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject");
        for n in &self.class_names {
            s.push_str(&format!(",dice_{n}"));
        }
        s.push_str(",dice_mean");
        for n in &self.class_names {
            s.push_str(&format!(",asd_{n}"));
        }
        s.push_str(",asd_mean\n");
        for sm in &self.per_subject {
            let nc = sm.dice.len() as f64;
            s.push_str(&format!("{}", sm.subject));
            for v in &sm.dice {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push_str(&format!(",{:.6}", sm.dice.iter().sum::<f64>() / nc));
            for v in &sm.asd {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push_str(&format!(",{:.6}\n", sm.asd.iter().sum::<f64>() / nc));
        }
        s
    }
}

/// Runs the segmenter over a test set and aggregates Dice/ASD against the
/// ground truth: argmax over class probabilities, largest-component
/// post-processing, then per-class metrics per subject.
///
/// An empty predicted mask is recorded as Dice 0 with the worst-case ASD
/// sentinel (the image diagonal) and flagged in the notes.
pub fn evaluate<F: Real>(
    unet: &UnetDesc,
    params: &ParamSet<F>,
    test: &DomainDataset<F>,
    gt_labels: &[Vec<u8>],
) -> Result<MetricsReport> {
    if gt_labels.len() != test.len() {
        return Err(Error::Data(format!(
            "ground truth for {} subjects, test set has {}",
            gt_labels.len(),
            test.len()
        )));
    }
    let (h, w) = (test.h, test.w);
    let sentinel = ((h * h + w * w) as f64).sqrt();
    let mut per_subject = Vec::with_capacity(test.len());
    let mut notes = Vec::new();
    for i in 0..test.len() {
        let image = normalized_batch(test, &[i]);
        let logits = unet.segment(params, &image)?;
        let pred = argmax_labels(&logits, unet.classes, h, w);
        let pred = largest_component(&pred, h, w);
        let gt = &gt_labels[i];
        let mut dice_c = Vec::with_capacity(NUM_CLASSES - 1);
        let mut asd_c = Vec::with_capacity(NUM_CLASSES - 1);
        for class in 1..NUM_CLASSES as u8 {
            let pm: Vec<bool> = pred.iter().map(|&v| v == class).collect();
            let gm: Vec<bool> = gt.iter().map(|&v| v == class).collect();
            dice_c.push(dice(&pm, &gm)?);
            match asd(&pm, &gm, h, w) {
                Ok(v) => asd_c.push(v),
                Err(Error::EmptyMask { .. }) => {
                    notes.push(format!(
                        "subject {}: class {} empty mask, ASD set to diagonal sentinel",
                        test.subject_ids[i],
                        CLASS_NAMES[class as usize - 1]
                    ));
                    asd_c.push(sentinel);
                }
                Err(e) => return Err(e),
            }
        }
        per_subject.push(SubjectMetrics {
            subject: test.subject_ids[i],
            dice: dice_c,
            asd: asd_c,
        });
    }
    Ok(MetricsReport::from_subjects(per_subject, notes))
}

/// Argmax over the class axis of logits `[1,C,H,W]`.
pub fn argmax_labels<F: Real>(logits: &crate::tensor::Tensor<F>, classes: usize, h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let data = logits.data();
    let mut out = vec![0u8; plane];
    for p in 0..plane {
        let mut best = data[p];
        let mut best_c = 0u8;
        for c in 1..classes {
            let v = data[c * plane + p];
            if v > best {
                best = v;
                best_c = c as u8;
            }
        }
        out[p] = best_c;
    }
    out
}

/// Per-image z-score normalization applied when images become model
/// inputs; datasets persist raw intensities.
pub fn normalized_batch<F: Real>(ds: &DomainDataset<F>, idxs: &[usize]) -> crate::tensor::Tensor<F> {
    let plane = ds.h * ds.w;
    let mut data = Vec::with_capacity(idxs.len() * plane);
    for &i in idxs {
        let im = &ds.images[i];
        let n = im.len() as f64;
        let mean = im.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = im.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-6);
        data.extend(im.iter().map(|v| F::of((v.f64() - mean) / std)));
    }
    crate::tensor::Tensor::from_vec(vec![idxs.len(), 1, ds.h, ds.w], data).expect("batch shape")
}
