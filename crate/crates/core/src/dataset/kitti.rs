//! KITTI object labels and calibration files.

use std::fmt::Write as _;

use crate::annotate::Box3D;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::scene::ObjectClass;

/// Two decimals when that is exact, otherwise the shortest round-trip form.
pub fn fmt_float(x: f64) -> String {
    let short = format!("{x:.2}");
    if short.parse::<f64>().ok() == Some(x) {
        short
    } else {
        format!("{x}")
    }
}

/// One 15-column label line, plus a 16th score column when present.
pub fn label_line(b: &Box3D) -> String {
    let mut s = format!(
        "{} {} {} {}",
        b.class.kitti_name(),
        fmt_float(b.truncation),
        b.occlusion,
        fmt_float(b.alpha)
    );
    for v in b.bbox2d.iter().chain(&b.dimensions).chain(&b.location) {
        s.push(' ');
        s.push_str(&fmt_float(*v));
    }
    s.push(' ');
    s.push_str(&fmt_float(b.rotation_y));
    if let Some(score) = b.score {
        s.push(' ');
        s.push_str(&fmt_float(score));
    }
    s
}

pub fn format_labels(boxes: &[Box3D]) -> String {
    boxes.iter().map(|b| label_line(b) + "\n").collect()
}

/// Parses a label file. `DontCare` and classes outside the model's set are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 15 && cols.len() != 16 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 15 or 16 columns, found {}", cols.len()),
            });
        }
        let Some(class) = ObjectClass::from_kitti_name(cols[0]) else {
            continue;
        };
        let num = |i: usize| -> Result<f64> {
            cols[i].parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("column {} is not a number: `{}`", i + 1, cols[i]),
            })
        };
        let occlusion = cols[2].parse::<u8>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("occlusion must be an integer, found `{}`", cols[2]),
        })?;
        out.push(Box3D {
            class,
            truncation: num(1)?,
            occlusion,
            alpha: num(3)?,
            bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if cols.len() == 16 { Some(num(15)?) } else { None },
        });
    }
    Ok(out)
}

/// Calibration file for a rectified pair: P0/P2 are the left camera, P1/P3 the
/// right camera shifted by the baseline; rectification and extrinsic blocks are identity.
pub fn format_calib(intr: &CameraIntrinsics, baseline_m: f64) -> String {
    let left = [intr.fx, 0.0, intr.cx, 0.0, 0.0, intr.fy, intr.cy, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut right = left;
    right[3] = -intr.fx * baseline_m;
    let row = |v: &[f64]| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(" ");
    let ident3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let ident34 = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut s = String::new();
    for (key, v) in [("P0", &left), ("P1", &right), ("P2", &left), ("P3", &right)] {
        writeln!(s, "{key}: {}", row(v)).unwrap();
    }
    writeln!(s, "R0_rect: {}", row(&ident3)).unwrap();
    writeln!(s, "Tr_velo_to_cam: {}", row(&ident34)).unwrap();
    writeln!(s, "Tr_imu_to_velo: {}", row(&ident34)).unwrap();
    s
}

/// Returns the 3x4 projection matrices P2 and P3 as row-major arrays.
pub fn parse_calib(text: &str) -> Result<([f64; 12], [f64; 12])> {
    let mut p2 = None;
    let mut p3 = None;
    for (n, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let slot = match key.trim() {
            "P2" => &mut p2,
            "P3" => &mut p3,
            _ => continue,
        };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("non-numeric entry in {}", key.trim()),
            })?;
        let arr: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| Error::Parse {
            line: n + 1,
            message: format!("{} has {} entries, expected 12", key.trim(), v.len()),
        })?;
        *slot = Some(arr);
    }
    match (p2, p3) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Parse {
            line: text.lines().count() + 1,
            message: "calibration needs P2 and P3".into(),
        }),
    }
}
