//! On-disk dataset layout: one directory per study holding a text manifest
//! and two raw little-endian buffers. See `docs/formats.md`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Study;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SLICES_FILE: &str = "slices.bin";
pub const MASKS_FILE: &str = "masks.bin";

const FORMAT_LINE: &str = "format bloodnet-study 1";

fn manifest_text(study: &Study) -> String {
    let mut out = String::new();
    let labels: Vec<String> = study.slice_labels.iter().map(u8::to_string).collect();
    // writing to a String cannot fail
    let _ = writeln!(out, "{FORMAT_LINE}");
    let _ = writeln!(out, "study_id {}", study.study_id);
    let _ = writeln!(out, "study_label {}", study.study_label);
    let _ = writeln!(out, "height {}", study.height);
    let _ = writeln!(out, "width {}", study.width);
    let _ = writeln!(out, "slices {}", study.num_slices());
    let _ = writeln!(out, "pixel_spacing_mm {} {}", study.pixel_spacing.0, study.pixel_spacing.1);
    let _ = writeln!(out, "slice_spacing_mm {}", study.slice_spacing);
    let _ = writeln!(out, "slice_dtype i16le");
    let _ = writeln!(out, "mask_dtype u8");
    let _ = writeln!(out, "slice_labels {}", labels.join(" "));
    out
}

/// Write `study` into `dir/<study_id>/`, returning the study directory.
pub fn write_study(dir: &Path, study: &Study) -> Result<std::path::PathBuf> {
    study.validate()?;
    let sdir = dir.join(&study.study_id);
    fs::create_dir_all(&sdir)?;
    fs::write(sdir.join(MANIFEST_FILE), manifest_text(study))?;
    let mut slices = Vec::with_capacity(study.num_slices() * study.height * study.width * 2);
    for v in study.slices.iter().flatten() {
        slices.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(sdir.join(SLICES_FILE), slices)?;
    fs::write(sdir.join(MASKS_FILE), study.masks.concat())?;
    Ok(sdir)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format("study manifest", format!("bad value for {key}: {v:?}")))
}

/// Read one study directory written by [`write_study`].
pub fn read_study(sdir: &Path) -> Result<Study> {
    let text = fs::read_to_string(sdir.join(MANIFEST_FILE))?;
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(Error::format("study manifest", "missing or unsupported format line"));
    }
    let mut seen = HashSet::new();
    let (mut id, mut label, mut h, mut w, mut n) = (None, None, None, None, None);
    let (mut spacing, mut thickness, mut labels) = (None, None, None);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        if !seen.insert(key.to_string()) {
            return Err(Error::format("study manifest", format!("duplicate key {key}")));
        }
        match key {
            "study_id" => id = Some(value.to_string()),
            "study_label" => label = Some(parse_num::<u8>(key, value)?),
            "height" => h = Some(parse_num::<usize>(key, value)?),
            "width" => w = Some(parse_num::<usize>(key, value)?),
            "slices" => n = Some(parse_num::<usize>(key, value)?),
            "pixel_spacing_mm" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let [a, b] = parts.as_slice() else {
                    return Err(Error::format("study manifest", "pixel_spacing_mm needs two values"));
                };
                spacing = Some((parse_num::<f64>(key, a)?, parse_num::<f64>(key, b)?));
            }
            "slice_spacing_mm" => thickness = Some(parse_num::<f64>(key, value)?),
            "slice_dtype" if value == "i16le" => {}
            "mask_dtype" if value == "u8" => {}
            "slice_labels" => {
                labels = Some(
                    value
                        .split_whitespace()
                        .map(|v| parse_num::<u8>(key, v))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => {
                return Err(Error::format("study manifest", format!("unexpected entry {line:?}")));
            }
        }
    }
    let missing = |k: &str| Error::format("study manifest", format!("missing {k}"));
    let (h, w, n) = (
        h.ok_or_else(|| missing("height"))?,
        w.ok_or_else(|| missing("width"))?,
        n.ok_or_else(|| missing("slices"))?,
    );
    let plane = h * w;
    let raw = fs::read(sdir.join(SLICES_FILE))?;
    if raw.len() != n * plane * 2 {
        return Err(Error::format(
            "study slices",
            format!("expected {} bytes, found {}", n * plane * 2, raw.len()),
        ));
    }
    let values: Vec<i16> = raw
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    let mask_raw = fs::read(sdir.join(MASKS_FILE))?;
    if mask_raw.len() != n * plane {
        return Err(Error::format(
            "study masks",
            format!("expected {} bytes, found {}", n * plane, mask_raw.len()),
        ));
    }
    let study = Study {
        study_id: id.ok_or_else(|| missing("study_id"))?,
        height: h,
        width: w,
        slices: values.chunks(plane.max(1)).map(<[i16]>::to_vec).collect(),
        masks: mask_raw.chunks(plane.max(1)).map(<[u8]>::to_vec).collect(),
        slice_labels: labels.ok_or_else(|| missing("slice_labels"))?,
        study_label: label.ok_or_else(|| missing("study_label"))?,
        pixel_spacing: spacing.ok_or_else(|| missing("pixel_spacing_mm"))?,
        slice_spacing: thickness.ok_or_else(|| missing("slice_spacing_mm"))?,
    };
    study.validate()?;
    Ok(study)
}

/// Every study directory under `dir`, sorted by directory name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Study>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format("dataset", format!("no studies under {}", dir.display())));
    }
    dirs.iter().map(|d| read_study(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_study, PhantomConfig};

    fn config() -> PhantomConfig {
        PhantomConfig {
            height: 16,
            width: 12,
            slices_per_study: 6,
            bleed_probability: 1.0,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn write_then_read_is_identity() {
        let tmp = tempfile::tempdir().unwrap();
        let study = generate_study(&config(), 4).unwrap();
        let sdir = write_study(tmp.path(), &study).unwrap();
        assert!(sdir.ends_with("s004"));
        assert_eq!(read_study(&sdir).unwrap(), study);
        let bytes = fs::read(sdir.join(SLICES_FILE)).unwrap();
        assert_eq!(bytes.len(), 6 * 16 * 12 * 2);
        assert_eq!(i16::from_le_bytes([bytes[0], bytes[1]]), study.slices[0][0]);
    }

    #[test]
    fn manifest_layout_is_stable() {
        let study = generate_study(&config(), 0).unwrap();
        let text = manifest_text(&study);
        let keys: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
        assert_eq!(
            keys,
            [
                "format",
                "study_id",
                "study_label",
                "height",
                "width",
                "slices",
                "pixel_spacing_mm",
                "slice_spacing_mm",
                "slice_dtype",
                "mask_dtype",
                "slice_labels"
            ]
        );
        assert!(text.contains("pixel_spacing_mm 0.5 0.5\n"));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let study = generate_study(&config(), 1).unwrap();
        let sdir = write_study(tmp.path(), &study).unwrap();
        fs::write(sdir.join(MASKS_FILE), [0u8; 3]).unwrap();
        assert!(read_study(&sdir).is_err());

        let sdir = write_study(tmp.path(), &study).unwrap();
        let text = fs::read_to_string(sdir.join(MANIFEST_FILE)).unwrap();
        fs::write(sdir.join(MANIFEST_FILE), text + "colour blue\n").unwrap();
        assert!(read_study(&sdir).is_err());

        let empty = tempfile::tempdir().unwrap();
        assert!(load_dataset(empty.path()).is_err());
    }
}
