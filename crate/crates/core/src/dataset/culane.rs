//! CULane on-disk layout.
//!
//! ```text
//! <root>/<split>.txt            relative image paths, one per line
//! <root>/<dir>/<name>.png|jpg    image
//! <root>/<dir>/<name>.lines.txt  one lane per line: "x1 y1 x2 y2 ..."
//! <root>/<dir>/<name>_category.txt  optional scene tag
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Category, LaneScene, Point, Polyline, RgbImage, DEFAULT_MASK_WIDTH};
use crate::{Error, Result};

/// Parse the body of a `.lines.txt` file. Blank lines are skipped.
pub fn parse_culane_lines(text: &str) -> Result<Vec<Polyline>> {
    let mut lanes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if !toks.len().is_multiple_of(2) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("odd number of coordinates ({})", toks.len()),
            });
        }
        let mut vals = Vec::with_capacity(toks.len());
        for t in toks {
            vals.push(t.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("non-numeric token `{t}`"),
            })?);
        }
        lanes.push(vals.chunks(2).map(|c| Point::new(c[0], c[1])).collect());
    }
    Ok(lanes)
}

/// Inverse of [`parse_culane_lines`]; values use shortest round-trip
/// formatting so re-parsing is exact.
pub fn write_culane_lines(lanes: &[Polyline]) -> String {
    let mut out = String::new();
    for lane in lanes {
        let line: Vec<String> = lane.iter().flat_map(|p| [p.x.to_string(), p.y.to_string()]).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct CulaneOptions {
    /// Training-label width for the rasterized mask.
    pub mask_width: f64,
    /// Resize images (and lanes) to `(height, width)` on load.
    pub resize: Option<(usize, usize)>,
    /// Category used when no `_category.txt` exists.
    pub default_category: Category,
}

impl Default for CulaneOptions {
    fn default() -> Self {
        Self {
            mask_width: DEFAULT_MASK_WIDTH,
            resize: None,
            default_category: Category::Normal,
        }
    }
}

fn stem_path(root: &Path, rel: &str) -> PathBuf {
    let p = root.join(rel);
    p.with_extension("")
}

fn lines_path(root: &Path, rel: &str) -> PathBuf {
    let mut s = stem_path(root, rel).into_os_string();
    s.push(".lines.txt");
    PathBuf::from(s)
}

fn category_path(root: &Path, rel: &str) -> PathBuf {
    let mut s = stem_path(root, rel).into_os_string();
    s.push("_category.txt");
    PathBuf::from(s)
}

/// Scene id for a list entry: the relative path without extension.
fn rel_to_id(rel: &str) -> String {
    let p = Path::new(rel).with_extension("");
    p.to_string_lossy().replace('\\', "/")
}

pub fn read_category(path: &Path) -> Result<Option<Category>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s.trim().parse()?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Read every scene listed in `<root>/<split>.txt`, in list order.
pub fn load_culane(root: &Path, split: &str, opts: &CulaneOptions) -> Result<Vec<LaneScene>> {
    let list_path = root.join(format!("{split}.txt"));
    let list = fs::read_to_string(&list_path).map_err(|e| Error::io(&list_path, e))?;
    let mut scenes = Vec::new();
    for entry in list.lines() {
        // CULane list files may carry extra columns (label png, existence flags).
        let Some(rel) = entry.split_whitespace().next() else {
            continue;
        };
        let rel = rel.trim_start_matches('/');
        let img_path = root.join(rel);
        let img = image::open(&img_path)
            .map_err(|source| Error::Image {
                path: img_path.clone(),
                source,
            })?
            .to_rgb8();
        let mut image = RgbImage::from_image(&img);
        let lp = lines_path(root, rel);
        let mut lanes = match fs::read_to_string(&lp) {
            Ok(text) => parse_culane_lines(&text).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse {
                    line,
                    msg: format!("{}: {msg}", lp.display()),
                },
                other => other,
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&lp, e)),
        };
        if let Some((h, w)) = opts.resize {
            let (sy, sx) = (
                h as f64 / image.height() as f64,
                w as f64 / image.width() as f64,
            );
            image = image.resized(h, w);
            for lane in &mut lanes {
                for p in lane.iter_mut() {
                    p.x *= sx;
                    p.y *= sy;
                }
            }
        }
        let category = read_category(&category_path(root, rel))?.unwrap_or(opts.default_category);
        scenes.push(LaneScene::new(rel_to_id(rel), image, lanes, category, opts.mask_width));
    }
    Ok(scenes)
}

/// Write `scenes` under `root` as split `split`, images as PNG. Virtual
/// scenes are written under their base id so that real and virtual roots
/// share relative paths.
pub fn write_culane(root: &Path, split: &str, scenes: &[LaneScene]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut list = String::new();
    for s in scenes {
        let rel = format!("{}.png", s.base_id());
        let img_path = root.join(&rel);
        if let Some(parent) = img_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        s.image
            .to_image()
            .save_with_format(&img_path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: img_path.clone(),
                source,
            })?;
        let lp = lines_path(root, &rel);
        fs::write(&lp, write_culane_lines(&s.lanes)).map_err(|e| Error::io(&lp, e))?;
        let cp = category_path(root, &rel);
        fs::write(&cp, format!("{}\n", s.category)).map_err(|e| Error::io(&cp, e))?;
        list.push_str(&rel);
        list.push('\n');
    }
    let lp = root.join(format!("{split}.txt"));
    fs::write(&lp, list).map_err(|e| Error::io(&lp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_no_lanes() {
        assert!(parse_culane_lines("").unwrap().is_empty());
        assert!(parse_culane_lines("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn single_lane_transcription() {
        let lanes = parse_culane_lines("1.0 2.0 3.0 4.0\n").unwrap();
        assert_eq!(lanes, vec![vec![Point::new(1.0, 2.0), Point::new(3.0, 4.0)]]);
    }

    #[test]
    fn writer_then_parser_round_trip() {
        let lanes = vec![
            vec![Point::new(0.1, 590.0), Point::new(12.25, 580.0), Point::new(33.0, 570.5)],
            vec![Point::new(900.0, 590.0), Point::new(880.0, 580.0), Point::new(1e-7, 1.0 / 3.0)],
        ];
        let parsed = parse_culane_lines(&write_culane_lines(&lanes)).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(parsed.iter().all(|l| l.len() == 3));
        assert_eq!(parsed, lanes);
    }

    #[test]
    fn odd_token_count_names_line() {
        let err = parse_culane_lines("1 2 3 4\n1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn non_numeric_token_names_line() {
        let err = parse_culane_lines("1 2 x 4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn sidecar_paths_follow_culane_naming() {
        let root = Path::new("/data");
        assert_eq!(
            lines_path(root, "driver_1/00000.jpg"),
            PathBuf::from("/data/driver_1/00000.lines.txt")
        );
        assert_eq!(
            category_path(root, "driver_1/00000.jpg"),
            PathBuf::from("/data/driver_1/00000_category.txt")
        );
        assert_eq!(rel_to_id("a/b/c.png"), "a/b/c");
    }
}
