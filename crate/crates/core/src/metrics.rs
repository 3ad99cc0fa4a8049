//! Classification scores, CSV tables and PNG line charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub oa: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

/// `2TP / (2TP + FP + FN)`, and 0 when the class never occurs on either side.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Overall accuracy and macro-F1 for single-label predictions.
pub fn classification_scores(pred: &[usize], truth: &[usize], classes: usize) -> Result<Evaluation> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Parameter("cannot score an empty split".into()));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Parameter(format!("class {c} out of range for {classes} classes")));
    }
    let mut per_class: Vec<ClassScore> = (0..classes)
        .map(|class| ClassScore {
            class,
            support: 0,
            tp: 0,
            fp: 0,
            fn_: 0,
            f1: 0.0,
        })
        .collect();
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        per_class[t].support += 1;
        if p == t {
            correct += 1;
            per_class[t].tp += 1;
        } else {
            per_class[p].fp += 1;
            per_class[t].fn_ += 1;
        }
    }
    for s in &mut per_class {
        s.f1 = f1_score(s.tp, s.fp, s.fn_);
    }
    Ok(Evaluation {
        oa: correct as f64 / pred.len() as f64,
        macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / classes as f64,
        per_class,
    })
}

/// Multi-label scores from logits `[M, C]` thresholded at 0: `oa` is the
/// exact-match rate and F1 is per class over binary decisions.
pub fn multilabel_scores(logits: &Tensor, targets: &Tensor) -> Result<Evaluation> {
    if logits.shape() != targets.shape() || logits.rank() != 2 {
        return Err(Error::Dimension(format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape())));
    }
    let [m, c] = logits.dims2()?;
    if m == 0 {
        return Err(Error::Parameter("cannot score an empty split".into()));
    }
    let mut per_class: Vec<ClassScore> = (0..c)
        .map(|class| ClassScore {
            class,
            support: 0,
            tp: 0,
            fp: 0,
            fn_: 0,
            f1: 0.0,
        })
        .collect();
    let mut exact = 0;
    for i in 0..m {
        let mut all = true;
        for (j, s) in per_class.iter_mut().enumerate() {
            let p = logits.row(i)[j] > 0.0;
            let t = targets.row(i)[j] > 0.5;
            s.support += t as usize;
            match (p, t) {
                (true, true) => s.tp += 1,
                (true, false) => s.fp += 1,
                (false, true) => s.fn_ += 1,
                (false, false) => {}
            }
            all &= p == t;
        }
        exact += all as usize;
    }
    for s in &mut per_class {
        s.f1 = f1_score(s.tp, s.fp, s.fn_);
    }
    Ok(Evaluation {
        oa: exact as f64 / m as f64,
        macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / c as f64,
        per_class,
    })
}

/// Row-wise argmax with the lowest index winning ties.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let [m, _] = logits.dims2()?;
    (0..m).map(|i| crate::matching::argmax_index(logits.row(i))).collect()
}

/// A fixed-header table rendered as CSV. Floats print in Rust's shortest
/// round-trip form, so equal values always give equal bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn cells(&self) -> Vec<String>;
}

impl Table {
    pub fn from_rows<R: CsvRow>(rows: &[R]) -> Table {
        Table {
            header: R::header().iter().map(|s| s.to_string()).collect(),
            rows: rows.iter().map(CsvRow::cells).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Numeric values of one column; unparsable cells become NaN.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].parse().unwrap_or(f64::NAN)).collect())
    }
}

pub fn write_csv<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    Table::from_rows(rows).write(path)
}

pub fn fmt_f64(x: f64) -> String {
    let mut s = String::new();
    write!(s, "{x}").expect("string write");
    s
}

impl CsvRow for ClassScore {
    fn header() -> &'static [&'static str] {
        &["class", "support", "tp", "fp", "fn", "f1"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.class.to_string(),
            self.support.to_string(),
            self.tp.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            fmt_f64(self.f1),
        ]
    }
}

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 120;
const MARGIN: u32 = 8;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// One panel per series, stacked vertically, each scaled to its own range.
/// Non-finite points are skipped.
pub fn line_chart_png(path: &Path, series: &[(&str, Vec<f64>)]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Parameter("nothing to plot".into()));
    }
    let h = series.len() as u32 * (PANEL_H + MARGIN) + MARGIN;
    let w = PANEL_W + 2 * MARGIN;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    for (k, (_, ys)) in series.iter().enumerate() {
        let top = MARGIN + k as u32 * (PANEL_H + MARGIN);
        for x in MARGIN..MARGIN + PANEL_W {
            img.put_pixel(x, top, image::Rgb([200, 200, 200]));
            img.put_pixel(x, top + PANEL_H - 1, image::Rgb([200, 200, 200]));
        }
        for y in top..top + PANEL_H {
            img.put_pixel(MARGIN, y, image::Rgb([200, 200, 200]));
            img.put_pixel(MARGIN + PANEL_W - 1, y, image::Rgb([200, 200, 200]));
        }
        let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = ys.len().max(2) - 1;
        let to_px = |i: usize, v: f64| -> (i64, i64) {
            let x = MARGIN as f64 + 2.0 + (PANEL_W as f64 - 5.0) * i as f64 / n as f64;
            let y = (top + PANEL_H) as f64 - 3.0 - (PANEL_H as f64 - 5.0) * (v - lo) / span;
            (x.round() as i64, y.round() as i64)
        };
        let color = image::Rgb(PALETTE[k % PALETTE.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in ys.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = to_px(i, v);
            match prev {
                Some(q) => draw_line(&mut img, q, p, color),
                None => draw_line(&mut img, p, p, color),
            }
            prev = Some(p);
        }
    }
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

fn draw_line(img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64), color: image::Rgb<u8>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = vec![0, 1, 2, 1, 0];
        let e = classification_scores(&t, &t, 3).unwrap();
        assert_eq!((e.oa, e.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn binary_hand_example() {
        let e = classification_scores(&[1, 1], &[1, 0], 2).unwrap();
        assert_eq!(e.per_class[0].f1, 0.0);
        assert!((e.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((e.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.oa, 0.5);
    }

    #[test]
    fn absent_class_scores_zero() {
        let e = classification_scores(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(e.per_class[2].f1, 0.0);
        assert!((e.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn order_invariance() {
        let p = vec![0, 2, 1, 1, 0, 2, 2];
        let t = vec![0, 1, 1, 2, 0, 2, 0];
        let a = classification_scores(&p, &t, 3).unwrap();
        let perm = [6, 3, 0, 5, 1, 4, 2];
        let pp: Vec<usize> = perm.iter().map(|&i| p[i]).collect();
        let tt: Vec<usize> = perm.iter().map(|&i| t[i]).collect();
        assert_eq!(a, classification_scores(&pp, &tt, 3).unwrap());
    }

    #[test]
    fn empty_split_errors() {
        assert!(classification_scores(&[], &[], 3).is_err());
    }

    #[test]
    fn multilabel_exact_match() {
        let logits = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        let targets = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let e = multilabel_scores(&logits, &targets).unwrap();
        assert_eq!(e.oa, 0.5);
        assert_eq!(e.per_class[0].f1, 1.0);
        assert_eq!(e.per_class[1].f1, 0.0);
    }

    #[test]
    fn csv_and_png() {
        let rows = classification_scores(&[0, 1], &[0, 0], 2).unwrap().per_class;
        let t = Table::from_rows(&rows);
        assert_eq!(t.to_csv().lines().next(), Some("class,support,tp,fp,fn,f1"));
        assert_eq!(t.column("f1").unwrap(), vec![2.0 / 3.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        line_chart_png(&p, &[("a", vec![1.0, 3.0, 2.0]), ("b", vec![f64::NAN, 1.0])]).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
}
