//! Detection metrics: IoU, greedy matching, AP from the precision envelope,
//! and a full evaluation of the bundled 12-image set.

use bss::fixtures;
use bss::metrics::{
    average_precision, eval_dataset, evaluate, iou, prf, BBox, Corners, DetRecord, GTRecord,
    PRCurve,
};

fn main() -> bss::Result<()> {
    let a = Corners::new(0.0, 0.0, 2.0, 2.0);
    let b = Corners::new(1.0, 1.0, 3.0, 3.0);
    println!("IoU = {:.6}", iou(&a, &b));

    let m = prf(3, 1, 2);
    println!(
        "TP 3, FP 1, FN 2 -> P {} R {} F1 {:.6}",
        m.precision, m.recall, m.f1
    );

    let curve = PRCurve::from_sweep(0, &[true, false, true], &[0.9, 0.8, 0.7], 2);
    println!(
        "[TP, FP, TP] over 2 GT -> AP {:.6}",
        average_precision(&curve)?
    );

    let gt = |img: &str, cls, cx| GTRecord {
        image: img.into(),
        class: cls,
        bbox: BBox::new(cx, 0.5, 0.2, 0.2),
    };
    let det = |img: &str, cls, cx, score| DetRecord {
        image: img.into(),
        class: cls,
        bbox: BBox::new(cx, 0.5, 0.2, 0.2),
        score,
    };
    let gts = vec![gt("a", 0, 0.3), gt("a", 0, 0.7), gt("b", 1, 0.5)];
    let dets = vec![
        det("a", 0, 0.31, 0.9),
        det("a", 0, 0.30, 0.8), // duplicate of the first
        det("a", 0, 0.70, 0.6),
        det("b", 1, 0.9, 0.7), // misplaced
    ];
    let e = evaluate(&dets, &gts, 0.5, 2)?;
    for c in &e.report.classes {
        println!(
            "class {}: tp {} fp {} fn {} AP {:?}",
            c.class, c.tp, c.fp, c.fn_, c.ap
        );
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let (gt_dir, det_file) = fixtures::write_eval_fixture(dir.path())?;
    let e = eval_dataset(&gt_dir, &det_file, 0.5, fixtures::EVAL_CLASSES)?;
    println!("\nbundled set: mAP@0.5 = {:.6}", e.report.map.unwrap());
    for c in &e.report.classes {
        println!(
            "  class {}  P {:.3} R {:.3} F1 {:.3} AP {:.4}  best F1 {:.3} at score >= {:?}",
            c.class,
            c.precision,
            c.recall,
            c.f1,
            c.ap.unwrap(),
            c.best_f1.f1,
            c.best_f1.score_threshold
        );
    }
    for p in e.write(dir.path().join("out"))? {
        println!("  wrote {}", p.file_name().unwrap().to_string_lossy());
    }
    assert_eq!(e.report.to_json(), fixtures::EVAL_GOLDEN);
    Ok(())
}
