//! Data bundled into the library: reference neck graphs and the synthetic
//! evaluation set used by `bss selftest`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BSS_DEFAULT_NECK: &str = include_str!("../fixtures/graphs/bss_default_neck.json");
pub const PAN_NECK: &str = include_str!("../fixtures/graphs/pan_neck.json");

/// Class count of the evaluation set.
pub const EVAL_CLASSES: usize = 4;

/// `(file name, contents)` of each ground-truth label file.
pub const EVAL_GT: [(&str, &str); 12] = [
    ("img00.txt", include_str!("../fixtures/eval/gt/img00.txt")),
    ("img01.txt", include_str!("../fixtures/eval/gt/img01.txt")),
    ("img02.txt", include_str!("../fixtures/eval/gt/img02.txt")),
    ("img03.txt", include_str!("../fixtures/eval/gt/img03.txt")),
    ("img04.txt", include_str!("../fixtures/eval/gt/img04.txt")),
    ("img05.txt", include_str!("../fixtures/eval/gt/img05.txt")),
    ("img06.txt", include_str!("../fixtures/eval/gt/img06.txt")),
    ("img07.txt", include_str!("../fixtures/eval/gt/img07.txt")),
    ("img08.txt", include_str!("../fixtures/eval/gt/img08.txt")),
    ("img09.txt", include_str!("../fixtures/eval/gt/img09.txt")),
    ("img10.txt", include_str!("../fixtures/eval/gt/img10.txt")),
    ("img11.txt", include_str!("../fixtures/eval/gt/img11.txt")),
];

pub const EVAL_DETECTIONS: &str = include_str!("../fixtures/eval/det.jsonl");

/// Expected per-class counts, AP and mAP at IoU 0.5, computed by a separate
/// reference script (`fixtures/eval/oracle.py`).
pub const EVAL_ORACLE: &str = include_str!("../fixtures/eval/oracle_report.json");

/// The exact `report.json` bytes `bss eval` writes for the set at IoU 0.5.
pub const EVAL_GOLDEN: &str = include_str!("../fixtures/eval/golden_report.json");

/// Writes `gt/` and `det.jsonl` under `dir`; returns `(gt_dir, det_file)`.
pub fn write_eval_fixture(
    dir: impl AsRef<Path>,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let dir = dir.as_ref();
    let gt = dir.join("gt");
    fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
    for (name, text) in EVAL_GT {
        let p = gt.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let det = dir.join("det.jsonl");
    fs::write(&det, EVAL_DETECTIONS).map_err(|e| Error::io(&det, e))?;
    Ok((gt, det))
}
