//! TuSimple label files: one JSON record per line with `lanes` (x per
//! h-sample, `-2` when absent), `h_samples` and `raw_file`.

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{Category, LaneScene, Point, Polyline, RgbImage};
use crate::{Error, Result};

/// Absent-point marker in TuSimple lane arrays.
const ABSENT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TusimpleRecord {
    pub raw_file: String,
    pub h_samples: Vec<f64>,
    /// Lanes with at least two valid points, each point at an h-sample.
    pub lanes: Vec<Polyline>,
}

/// Parse one label line. Points with `x = -2` are dropped, as are lanes left
/// with fewer than two points.
pub fn parse_tusimple_record(json_line: &str) -> Result<TusimpleRecord> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let v: Value = serde_json::from_str(json_line).map_err(|e| err(e.to_string()))?;
    let field = |k: &str| v.get(k).ok_or_else(|| err(format!("missing key `{k}`")));
    let raw_file = field("raw_file")?
        .as_str()
        .ok_or_else(|| err("`raw_file` is not a string".into()))?
        .to_string();
    let nums = |val: &Value, what: &str| -> Result<Vec<f64>> {
        val.as_array()
            .ok_or_else(|| err(format!("`{what}` is not an array")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| err(format!("non-numeric entry in `{what}`"))))
            .collect()
    };
    let h_samples = nums(field("h_samples")?, "h_samples")?;
    let raw_lanes = field("lanes")?
        .as_array()
        .ok_or_else(|| err("`lanes` is not an array".into()))?;
    let mut lanes = Vec::new();
    for (i, lane) in raw_lanes.iter().enumerate() {
        let xs = nums(lane, "lanes")?;
        if xs.len() != h_samples.len() {
            return Err(err(format!(
                "lane {i} has {} entries but h_samples has {}",
                xs.len(),
                h_samples.len()
            )));
        }
        let pts: Polyline = xs
            .iter()
            .zip(&h_samples)
            .filter(|(&x, _)| x != ABSENT)
            .map(|(&x, &y)| Point::new(x, y))
            .collect();
        if pts.len() >= 2 {
            lanes.push(pts);
        }
    }
    Ok(TusimpleRecord {
        raw_file,
        h_samples,
        lanes,
    })
}

/// Read a TuSimple label file relative to `root`. Images are resolved as
/// `<root>/<raw_file>`.
pub fn load_tusimple(
    root: &Path,
    label_file: &str,
    mask_width: f64,
    resize: Option<(usize, usize)>,
) -> Result<Vec<LaneScene>> {
    let path = root.join(label_file);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_tusimple_record(line).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { line: i + 1, msg },
            other => other,
        })?;
        let img_path = root.join(&rec.raw_file);
        let img = image::open(&img_path)
            .map_err(|source| Error::Image {
                path: img_path.clone(),
                source,
            })?
            .to_rgb8();
        let mut image = RgbImage::from_image(&img);
        let mut lanes = rec.lanes;
        if let Some((h, w)) = resize {
            let (sy, sx) = (h as f64 / image.height() as f64, w as f64 / image.width() as f64);
            image = image.resized(h, w);
            for p in lanes.iter_mut().flatten() {
                p.x *= sx;
                p.y *= sy;
            }
        }
        let id = Path::new(&rec.raw_file).with_extension("").to_string_lossy().into_owned();
        scenes.push(LaneScene::new(id, image, lanes, Category::Normal, mask_width));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_absent_lane_is_dropped() {
        let r = parse_tusimple_record(r#"{"lanes":[[-2,-2]],"h_samples":[160,170],"raw_file":"a.jpg"}"#).unwrap();
        assert!(r.lanes.is_empty());
    }

    #[test]
    fn valid_pairs_transcribed() {
        let r = parse_tusimple_record(r#"{"lanes":[[10,20]],"h_samples":[160,170],"raw_file":"a.jpg"}"#).unwrap();
        assert_eq!(r.lanes, vec![vec![Point::new(10.0, 160.0), Point::new(20.0, 170.0)]]);
        assert_eq!(r.raw_file, "a.jpg");
    }

    #[test]
    fn mixed_absent_entries_hand_count() {
        // lane 0: valid at 170, 190, 200 -> 3 points
        // lane 1: valid at 160 only -> dropped
        // lane 2: valid at 160, 170, 180, 190 -> 4 points
        let r = parse_tusimple_record(
            r#"{"lanes":[[-2,5,-2,7,8],[1,-2,-2,-2,-2],[3,4,5,6,-2]],
                "h_samples":[160,170,180,190,200],"raw_file":"clips/x/20.jpg"}"#,
        )
        .unwrap();
        assert_eq!(r.lanes.len(), 2);
        assert_eq!(r.lanes[0].len(), 3);
        assert_eq!(r.lanes[1].len(), 4);
        assert_eq!(r.lanes[0][0], Point::new(5.0, 170.0));
        assert_eq!(r.lanes[1][3], Point::new(6.0, 190.0));
    }

    #[test]
    fn missing_key_is_error() {
        assert!(parse_tusimple_record(r#"{"lanes":[],"raw_file":"a"}"#).is_err());
        assert!(parse_tusimple_record(r#"{"h_samples":[],"raw_file":"a"}"#).is_err());
        assert!(parse_tusimple_record(r#"{"lanes":[],"h_samples":[]}"#).is_err());
    }

    #[test]
    fn length_mismatch_is_error() {
        let e = parse_tusimple_record(r#"{"lanes":[[1,2,3]],"h_samples":[160,170],"raw_file":"a"}"#).unwrap_err();
        assert!(e.to_string().contains("lane 0"), "{e}");
    }
}
