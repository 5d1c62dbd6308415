//! Detection evaluation: IoU matching, precision / recall / F1, AP as the area
//! under the monotone precision envelope, and mAP.
//!
//! Matching is greedy per class and image: detections are visited by
//! descending score (stable, so ties keep input order) and each claims the
//! unmatched ground-truth box it overlaps most, provided the IoU reaches the
//! threshold.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::write_atomic;

pub const DEFAULT_IOU: f64 = 0.5;

/// Normalized box in center form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Box in corner form `(x1, y1) - (x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Corners { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn corners(&self) -> Corners {
        Corners::new(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(c: Corners) -> Self {
        BBox::new(
            (c.x1 + c.x2) / 2.0,
            (c.y1 + c.y2) / 2.0,
            c.x2 - c.x1,
            c.y2 - c.y1,
        )
    }

    /// Checks a box read from a file and clips its extent to the unit square.
    pub fn validated(self) -> std::result::Result<Self, String> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("box values must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(format!(
                "box center ({}, {}) outside [0, 1]",
                self.cx, self.cy
            ));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!(
                "box size ({}, {}) must be positive",
                self.w, self.h
            ));
        }
        let c = self.corners();
        let clip = |v: f64| v.clamp(0.0, 1.0);
        Ok(BBox::from_corners(Corners::new(
            clip(c.x1),
            clip(c.y1),
            clip(c.x2),
            clip(c.y2),
        )))
    }
}

/// Intersection over union of two corner-form boxes, continuous coordinates.
pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let inter = Corners::new(
        a.x1.max(b.x1),
        a.y1.max(b.y1),
        a.x2.min(b.x2),
        a.y2.min(b.y2),
    )
    .area();
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GTRecord {
    pub image: String,
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetRecord {
    pub image: String,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Per-detection labels (input order) and unmatched ground truth per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub is_tp: Vec<bool>,
    /// Ground-truth index claimed by each detection.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_per_class: BTreeMap<usize, usize>,
    pub fn_per_class: BTreeMap<usize, usize>,
}

/// Indices of `dets` by descending score; ties keep input order.
pub fn score_order(dets: &[DetRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    idx
}

pub fn match_detections(dets: &[DetRecord], gts: &[GTRecord], iou_thresh: f64) -> MatchOutcome {
    let mut pools: HashMap<(&str, usize), Vec<usize>> = HashMap::new();
    let mut gt_per_class = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        pools
            .entry((g.image.as_str(), g.class))
            .or_default()
            .push(i);
        *gt_per_class.entry(g.class).or_insert(0) += 1;
    }
    let gt_corners: Vec<Corners> = gts.iter().map(|g| g.bbox.corners()).collect();
    let mut taken = vec![false; gts.len()];
    let mut is_tp = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    for di in score_order(dets) {
        let d = &dets[di];
        let Some(pool) = pools.get(&(d.image.as_str(), d.class)) else {
            continue;
        };
        let dc = d.bbox.corners();
        let mut best: Option<(usize, f64)> = None;
        for &gi in pool.iter().filter(|&&gi| !taken[gi]) {
            let o = iou(&dc, &gt_corners[gi]);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, o)) = best {
            if o >= iou_thresh {
                taken[gi] = true;
                is_tp[di] = true;
                matched_gt[di] = Some(gi);
            }
        }
    }
    let mut fn_per_class: BTreeMap<usize, usize> = gt_per_class.keys().map(|&c| (c, 0)).collect();
    for (g, &t) in gts.iter().zip(&taken) {
        if !t {
            *fn_per_class.get_mut(&g.class).unwrap() += 1;
        }
    }
    MatchOutcome {
        is_tp,
        matched_gt,
        gt_per_class,
        fn_per_class,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 with `0/0 = 0`.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Prf {
        precision,
        recall,
        f1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall sweep over score-ordered detections of one class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PRCurve {
    pub class: usize,
    pub gt_count: usize,
    pub points: Vec<PrPoint>,
}

impl PRCurve {
    /// `labels` and `scores` must already be in descending-score order.
    pub fn from_sweep(class: usize, labels: &[bool], scores: &[f64], gt_count: usize) -> Self {
        let (mut tp, mut fp) = (0usize, 0usize);
        let points = labels
            .iter()
            .zip(scores)
            .map(|(&is_tp, &score)| {
                if is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
                PrPoint {
                    score,
                    recall: if gt_count == 0 {
                        0.0
                    } else {
                        tp as f64 / gt_count as f64
                    },
                    precision: tp as f64 / (tp + fp) as f64,
                }
            })
            .collect();
        PRCurve {
            class,
            gt_count,
            points,
        }
    }

    /// Precision replaced by its running maximum from the right.
    pub fn envelope(&self) -> Vec<f64> {
        let mut env: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        env
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.recall, p.precision));
        }
        s
    }
}

/// All-point interpolated AP: `sum_k (r_k - r_{k-1}) * envelope_k`.
pub fn average_precision(curve: &PRCurve) -> Result<f64> {
    if curve.gt_count == 0 {
        return Err(Error::Degenerate(format!(
            "class {} has no ground truth; AP is undefined",
            curve.class
        )));
    }
    let env = curve.envelope();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (p, e) in curve.points.iter().zip(env) {
        ap += (p.recall - prev) * e;
        prev = p.recall;
    }
    Ok(ap)
}

pub fn mean_ap(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::Degenerate("mAP over zero classes".into()));
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

/// Operating point on the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatingPoint {
    /// Lowest kept score; `None` when no detection is kept.
    pub score_threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: usize,
    pub gt_count: usize,
    pub det_count: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Full-detection operating point.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub best_f1: OperatingPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub num_classes: usize,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with ground truth.
    pub map: Option<f64>,
    pub map_class_count: usize,
    /// Macro averages over the same classes, full-detection operating point.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Macro averages of each class's F1-maximizing operating point.
    pub macro_best_f1: f64,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub curves: Vec<PRCurve>,
}

impl Evaluation {
    /// Writes `report.json` and one `pr_class{q}.csv` per class.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = out_dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let path = dir.join("report.json");
        write_atomic(&path, self.report.to_json().as_bytes())?;
        written.push(path);
        for c in &self.curves {
            let path = dir.join(format!("pr_class{}.csv", c.class));
            write_atomic(&path, c.to_csv().as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

fn best_f1_point(curve: &PRCurve, labels: &[bool]) -> OperatingPoint {
    let mut best = OperatingPoint {
        score_threshold: None,
        tp: 0,
        fp: 0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    let (mut tp, mut fp) = (0, 0);
    for (p, &l) in curve.points.iter().zip(labels) {
        if l {
            tp += 1;
        } else {
            fp += 1;
        }
        let m = prf(tp, fp, curve.gt_count - tp);
        if m.f1 > best.f1 {
            best = OperatingPoint {
                score_threshold: Some(p.score),
                tp,
                fp,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            };
        }
    }
    best
}

fn check_eval_config(iou_thresh: f64, num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::Config("class count must be >= 1".into()));
    }
    if !(iou_thresh.is_finite() && iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "IoU threshold must be in (0, 1], got {iou_thresh}"
        )));
    }
    Ok(())
}

/// Evaluates in-memory records over `num_classes` classes.
pub fn evaluate(
    dets: &[DetRecord],
    gts: &[GTRecord],
    iou_thresh: f64,
    num_classes: usize,
) -> Result<Evaluation> {
    check_eval_config(iou_thresh, num_classes)?;
    if let Some(bad) = gts
        .iter()
        .map(|g| g.class)
        .chain(dets.iter().map(|d| d.class))
        .find(|&c| c >= num_classes)
    {
        return Err(Error::Config(format!(
            "class id {bad} >= class count {num_classes}"
        )));
    }
    let outcome = match_detections(dets, gts, iou_thresh);
    let order = score_order(dets);
    let mut classes = Vec::with_capacity(num_classes);
    let mut curves = Vec::with_capacity(num_classes);
    let mut flags = Vec::new();
    for q in 0..num_classes {
        let idx: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| dets[i].class == q)
            .collect();
        let labels: Vec<bool> = idx.iter().map(|&i| outcome.is_tp[i]).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        let gt_count = outcome.gt_per_class.get(&q).copied().unwrap_or(0);
        let curve = PRCurve::from_sweep(q, &labels, &scores, gt_count);
        let tp = labels.iter().filter(|&&l| l).count();
        let fp = labels.len() - tp;
        let fn_ = gt_count - tp;
        let m = prf(tp, fp, fn_);
        let ap = if gt_count == 0 {
            flags.push(format!(
                "class {q}: no ground truth; AP undefined, excluded from mAP"
            ));
            None
        } else {
            Some(average_precision(&curve)?)
        };
        if tp + fp == 0 && gt_count > 0 {
            flags.push(format!("class {q}: no detections; precision set to 0"));
        }
        classes.push(ClassReport {
            class: q,
            gt_count,
            det_count: labels.len(),
            tp,
            fp,
            fn_,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            ap,
            best_f1: best_f1_point(&curve, &labels),
        });
        curves.push(curve);
    }
    let scored: Vec<&ClassReport> = classes.iter().filter(|c| c.ap.is_some()).collect();
    let aps: Vec<f64> = scored.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        flags.push("no class has ground truth; mAP undefined".into());
        None
    } else {
        Some(mean_ap(&aps)?)
    };
    let macro_of = |f: &dyn Fn(&ClassReport) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|c| f(c)).sum::<f64>() / scored.len() as f64
        }
    };
    let report = EvalReport {
        iou_threshold: iou_thresh,
        num_classes,
        map,
        map_class_count: aps.len(),
        macro_precision: macro_of(&|c| c.precision),
        macro_recall: macro_of(&|c| c.recall),
        macro_f1: macro_of(&|c| c.f1),
        macro_best_f1: macro_of(&|c| c.best_f1.f1),
        classes,
        flags,
    };
    Ok(Evaluation { report, curves })
}

/// Parses one ground-truth label file (`class cx cy w h` per line).
pub fn parse_gt_file(
    text: &str,
    image: &str,
    path: &Path,
    num_classes: usize,
) -> Result<Vec<GTRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 fields `class cx cy w h`, got {}", fields.len()),
            ));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad class id `{}`", fields[0])))?;
        if class >= num_classes {
            return Err(Error::parse(
                path,
                lineno,
                format!("unknown class id {class} (class count {num_classes})"),
            ));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad number `{f}`")))?;
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3])
            .validated()
            .map_err(|m| Error::parse(path, lineno, m))?;
        out.push(GTRecord {
            image: image.to_string(),
            class,
            bbox,
        });
    }
    Ok(out)
}

/// Reads every `*.txt` in `dir` (sorted by name); the file stem is the image id.
pub fn load_gt_dir(dir: impl AsRef<Path>, num_classes: usize) -> Result<Vec<GTRecord>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let image = f.file_stem().unwrap().to_string_lossy().into_owned();
        out.extend(parse_gt_file(&text, &image, &f, num_classes)?);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetLine {
    image: String,
    class: usize,
    bbox: [f64; 4],
    score: f64,
}

/// Parses JSON-lines detections.
pub fn parse_detections(text: &str, path: &Path, num_classes: usize) -> Result<Vec<DetRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let d: DetLine =
            serde_json::from_str(line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if d.class >= num_classes {
            return Err(Error::parse(
                path,
                lineno,
                format!("unknown class id {} (class count {num_classes})", d.class),
            ));
        }
        if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
            return Err(Error::parse(
                path,
                lineno,
                format!("score {} outside [0, 1]", d.score),
            ));
        }
        let [cx, cy, w, h] = d.bbox;
        let bbox = BBox::new(cx, cy, w, h)
            .validated()
            .map_err(|m| Error::parse(path, lineno, m))?;
        out.push(DetRecord {
            image: d.image,
            class: d.class,
            bbox,
            score: d.score,
        });
    }
    Ok(out)
}

pub fn load_detections(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<DetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path, num_classes)
}

/// Loads a label directory and a detections file, then evaluates.
pub fn eval_dataset(
    gt_dir: impl AsRef<Path>,
    det_file: impl AsRef<Path>,
    iou_thresh: f64,
    num_classes: usize,
) -> Result<Evaluation> {
    check_eval_config(iou_thresh, num_classes)?;
    let gts = load_gt_dir(gt_dir, num_classes)?;
    let dets = load_detections(det_file, num_classes)?;
    evaluate(&dets, &gts, iou_thresh, num_classes)
}

/// Compares a report with a golden JSON (same field names, subset of fields).
/// Returns one line per disagreement; counts must match exactly, reals to `tol`.
pub fn golden_mismatches(report: &EvalReport, golden: &str, tol: f64) -> Result<Vec<String>> {
    let golden: serde_json::Value =
        serde_json::from_str(golden).map_err(|e| Error::json("golden report", e))?;
    let actual = serde_json::to_value(report).map_err(|e| Error::json("report", e))?;
    let mut out = Vec::new();
    compare_value("", &golden, &actual, tol, &mut out);
    Ok(out)
}

fn compare_value(
    path: &str,
    want: &serde_json::Value,
    got: &serde_json::Value,
    tol: f64,
    out: &mut Vec<String>,
) {
    use serde_json::Value;
    match (want, got) {
        (Value::Object(w), Value::Object(g)) => {
            for (k, wv) in w {
                match g.get(k) {
                    Some(gv) => compare_value(&format!("{path}.{k}"), wv, gv, tol, out),
                    None => out.push(format!("{path}.{k}: missing")),
                }
            }
        }
        (Value::Array(w), Value::Array(g)) => {
            if w.len() != g.len() {
                out.push(format!("{path}: length {} != {}", g.len(), w.len()));
                return;
            }
            for (i, (wv, gv)) in w.iter().zip(g).enumerate() {
                compare_value(&format!("{path}[{i}]"), wv, gv, tol, out);
            }
        }
        (Value::Number(w), Value::Number(g)) => {
            let (w, g) = (w.as_f64().unwrap(), g.as_f64().unwrap());
            if (w - g).abs() > tol {
                out.push(format!("{path}: got {g}, want {w}"));
            }
        }
        (w, g) if w != g => out.push(format!("{path}: got {g}, want {w}")),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image: &str, class: usize, b: [f64; 4]) -> GTRecord {
        GTRecord {
            image: image.into(),
            class,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    fn det(image: &str, class: usize, b: [f64; 4], score: f64) -> DetRecord {
        DetRecord {
            image: image.into(),
            class,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            score,
        }
    }

    #[test]
    fn iou_examples() {
        let a = Corners::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Corners::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        let b = Corners::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-9);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        // touching edges
        assert_eq!(iou(&a, &Corners::new(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn match_single() {
        // IoU 0.6: overlap 0.15 x 0.2 over union 0.05
        let g = gt("a", 0, [0.5, 0.5, 0.2, 0.2]);
        let d = det("a", 0, [0.55, 0.5, 0.2, 0.2], 0.9);
        let o = iou(&g.bbox.corners(), &d.bbox.corners());
        assert!((o - 0.6).abs() < 1e-9);
        let m = match_detections(&[d], &[g], 0.5);
        assert_eq!(m.is_tp, vec![true]);
        assert_eq!(m.fn_per_class[&0], 0);
    }

    #[test]
    fn match_consumes_gt_once() {
        let g = gt("a", 0, [0.5, 0.5, 0.2, 0.2]);
        let lo = det("a", 0, [0.5, 0.5, 0.2, 0.2], 0.3);
        let hi = det("a", 0, [0.51, 0.5, 0.2, 0.2], 0.8);
        let m = match_detections(&[lo, hi], std::slice::from_ref(&g), 0.5);
        assert_eq!(m.is_tp, vec![false, true]);

        let first = det("a", 0, [0.52, 0.5, 0.2, 0.2], 0.5);
        let second = det("a", 0, [0.5, 0.5, 0.2, 0.2], 0.5);
        let m = match_detections(&[first, second], &[g], 0.5);
        assert_eq!(m.is_tp, vec![true, false]);
    }

    #[test]
    fn match_respects_class_and_image() {
        let g = gt("a", 0, [0.5, 0.5, 0.2, 0.2]);
        let wrong_class = det("a", 1, [0.5, 0.5, 0.2, 0.2], 0.9);
        let wrong_image = det("b", 0, [0.5, 0.5, 0.2, 0.2], 0.9);
        let m = match_detections(&[wrong_class, wrong_image], &[g], 0.5);
        assert_eq!(m.is_tp, vec![false, false]);
        assert_eq!(m.fn_per_class[&0], 1);
    }

    #[test]
    fn prf_examples() {
        let m = prf(3, 1, 2);
        assert_eq!((m.precision, m.recall), (0.75, 0.6));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            prf(0, 0, 5),
            Prf {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0
            }
        );
        assert_eq!(
            prf(7, 0, 0),
            Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
    }

    #[test]
    fn ap_examples() {
        let c = PRCurve::from_sweep(0, &[true], &[0.9], 1);
        assert_eq!(average_precision(&c).unwrap(), 1.0);
        let c = PRCurve::from_sweep(0, &[true, false, true], &[0.9, 0.8, 0.7], 2);
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pts[..2], [(0.5, 1.0), (0.5, 0.5)]);
        assert!((pts[2].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((average_precision(&c).unwrap() - 0.833333).abs() < 1e-6);
        let c = PRCurve::from_sweep(0, &[false, false], &[0.9, 0.8], 3);
        assert_eq!(average_precision(&c).unwrap(), 0.0);
        let c = PRCurve::from_sweep(0, &[false], &[0.9], 0);
        assert!(average_precision(&c).is_err());
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_ap(&[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(mean_ap(&[0.3]).unwrap(), 0.3);
        assert!((mean_ap(&[1.0, 0.833333, 0.0, 0.5]).unwrap() - 0.583333).abs() < 1e-6);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn gt_parsing_errors_carry_line_numbers() {
        let p = Path::new("img.txt");
        let err =
            parse_gt_file("0 0.5 0.5 0.1 0.1\n1 0.5 oops 0.1 0.1\n", "img", p, 4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_gt_file("\n7 0.5 0.5 0.1 0.1\n", "img", p, 4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_gt_file("0 0.5 0.5 0.1\n", "img", p, 4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_gt_file("0 0.5 0.5 0.0 0.1\n", "img", p, 4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn boxes_clip_on_ingestion() {
        let g = parse_gt_file("0 0.05 0.5 0.2 0.2\n", "i", Path::new("i.txt"), 1).unwrap();
        let c = g[0].bbox.corners();
        assert!((c.x1 - 0.0).abs() < 1e-15 && (c.x2 - 0.15).abs() < 1e-12);
    }

    #[test]
    fn detection_parsing() {
        let p = Path::new("d.jsonl");
        let ok = r#"{"image":"a","class":1,"bbox":[0.5,0.5,0.1,0.1],"score":0.7}"#;
        assert_eq!(parse_detections(ok, p, 4).unwrap().len(), 1);
        let text =
            format!("{ok}\n{{\"image\":\"a\",\"class\":1,\"bbox\":[0.5,0.5],\"score\":0.7}}\n");
        assert!(matches!(
            parse_detections(&text, p, 4),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad_score = r#"{"image":"a","class":1,"bbox":[0.5,0.5,0.1,0.1],"score":1.7}"#;
        assert!(matches!(
            parse_detections(bad_score, p, 4),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_detections(ok, p, 1).is_err());
    }

    #[test]
    fn degenerate_reports() {
        let gts = vec![gt("a", 0, [0.5, 0.5, 0.2, 0.2])];
        let e = evaluate(&[], &gts, 0.5, 2).unwrap();
        assert_eq!(e.report.map, Some(0.0));
        assert_eq!(e.report.classes[0].precision, 0.0);
        assert_eq!(e.report.classes[1].ap, None);
        assert_eq!(e.report.map_class_count, 1);
        assert!(!e.report.flags.is_empty());
        let e = evaluate(&[], &[], 0.5, 2).unwrap();
        assert_eq!(e.report.map, None);
    }

    #[test]
    fn bundled_set_matches_golden() {
        use crate::fixtures::*;
        let dir = tempfile::tempdir().unwrap();
        let (gt, det) = write_eval_fixture(dir.path()).unwrap();
        let e = eval_dataset(gt, det, 0.5, EVAL_CLASSES).unwrap();
        let bad = golden_mismatches(&e.report, EVAL_ORACLE, 1e-9).unwrap();
        assert!(bad.is_empty(), "{bad:#?}");
        assert_eq!(e.report.to_json(), EVAL_GOLDEN);
        let written = e.write(dir.path().join("out")).unwrap();
        assert_eq!(written.len(), 5);
    }
}
