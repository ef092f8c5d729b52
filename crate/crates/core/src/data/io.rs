//! Binary PPM/PGM reading and writing, and the JSONL dataset manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{BinaryMask, ImageTensor, ScoreMap};
use crate::error::{Error, Result};

use super::{DatasetIndex, Record};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Splits a netpbm header into its magic, width, height and maxval, returning
/// the offset of the first raster byte.
fn parse_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((w, h, i + 1))
}

fn raster<'a>(bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format(format!("raster has {} bytes, need {len}", bytes.len().saturating_sub(offset))))
}

pub fn encode_ppm(image: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.w, image.h).into_bytes();
    out.extend(image.data.iter().map(|&v| quantize(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let (w, h, off) = parse_header(bytes, "P6")?;
    let data = raster(bytes, off, w * h * 3)?.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageTensor::new(h, w, data))
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Reads a mask; any value other than 0 or 255 is rejected.
pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let (w, h, off) = parse_header(bytes, "P5")?;
    let data = raster(bytes, off, w * h)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::Format(format!("mask value {other} is not binary"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(BinaryMask::new(h, w, data))
}

/// Grey PPM rendering of a score map, scaled so its maximum is white.
pub fn encode_score_ppm(scores: &ScoreMap) -> Vec<u8> {
    let m = scores.max();
    let scale = if m > 0.0 { 1.0 / m } else { 0.0 };
    let data = scores.data.iter().flat_map(|&v| [v.max(0.0) * scale; 3]).collect();
    encode_ppm(&ImageTensor::new(scores.h, scores.w, data))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image))?)
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    Ok(fs::write(path, encode_pgm(mask))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub image: String,
    pub masks: BTreeMap<String, String>,
}

/// Writes every record as `images/NNNNN.ppm` plus one PGM per class and a
/// `manifest.jsonl` with paths relative to `dir`.
pub fn write_dataset(index: &DatasetIndex, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest)?;
    for (i, rec) in index.records.iter().enumerate() {
        let image = format!("images/{i:05}.ppm");
        write_ppm(&dir.join(&image), &rec.image)?;
        let mut masks = BTreeMap::new();
        for (class, mask) in &rec.masks {
            let name = format!("masks/{i:05}_c{class}.pgm");
            write_pgm(&dir.join(&name), mask)?;
            masks.insert(class.to_string(), name);
        }
        let line = ManifestLine { image, masks };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(manifest)
}

/// Loads a manifest; relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetIndex> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(line)?;
        let image = read_ppm(&base.join(&entry.image))?;
        let mut masks = BTreeMap::new();
        for (class, mask_path) in &entry.masks {
            let class: usize = class
                .parse()
                .map_err(|_| Error::Format(format!("line {}: class id `{class}` is not an integer", n + 1)))?;
            let mask = read_pgm(&base.join(mask_path))?;
            if (mask.h, mask.w) != (image.h, image.w) {
                return Err(Error::ShapeMismatch(format!("line {}: mask {mask_path} vs image size", n + 1)));
            }
            masks.insert(class, mask);
        }
        records.push(Record { image, masks });
    }
    Ok(DatasetIndex { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_of_quantised_image() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f64 / 255.0).collect();
        let img = ImageTensor::new(2, 3, data);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let m = decode_pgm(&bytes).unwrap();
        assert_eq!(m.data, vec![false, true]);
    }

    #[test]
    fn non_binary_and_truncated_masks_rejected() {
        let mut bytes = b"P5 2 1 255\n".to_vec();
        bytes.extend([0, 7]);
        assert!(matches!(decode_pgm(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5 2 1 255\n\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P5 2 1 255\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6 2 1 15\n\0\0\0\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn score_map_is_normalised() {
        let s = ScoreMap::from_rows(&[vec![0.0, 0.5]]);
        let img = decode_ppm(&encode_score_ppm(&s)).unwrap();
        assert_eq!(img.data, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
