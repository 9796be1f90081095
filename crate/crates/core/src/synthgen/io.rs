//! On-disk dataset layout: `manifest.txt` plus one binary record per sample
//! under `samples/`. A record is three little-endian `u32` (height, width,
//! channels) followed by the pixels as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::{Dataset, DomainTag, Image, ImageSample, CHANNELS};
use crate::error::{ReidError, Result};

const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# reidapt dataset v1";

fn record_name(sample_id: u32) -> String {
    format!("samples/{sample_id:06}.bin")
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + img.data().len() * 8);
    for v in [img.height(), img.width(), CHANNELS] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| ReidError::corrupt(path, "truncated header"))
    };
    let (h, w, c) = (word(0)?, word(1)?, word(2)?);
    if c != CHANNELS {
        return Err(ReidError::corrupt(path, format!("expected {CHANNELS} channels, found {c}")));
    }
    let body = &bytes[12..];
    if body.len() != h * w * c * 8 {
        return Err(ReidError::corrupt(path, format!("expected {} pixel bytes, found {}", h * w * c * 8, body.len())));
    }
    let data: Vec<f64> = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(ReidError::corrupt(path, "pixel outside [0, 1]"));
    }
    Image::new(h, w, data).ok_or_else(|| ReidError::corrupt(path, "empty image"))
}

/// Writes `ds` under `dir`, replacing any previous manifest.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| ReidError::io(&samples_dir, e))?;
    let mut manifest = format!("{HEADER}\n# sample_id person_id camera_id domain\n");
    for s in ds.samples() {
        let path = dir.join(record_name(s.sample_id));
        fs::write(&path, encode_image(&s.pixels)).map_err(|e| ReidError::io(&path, e))?;
        manifest.push_str(&format!("{} {} {} {}\n", s.sample_id, s.raw_person_id(), s.camera_id, s.domain));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| ReidError::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| ReidError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(ReidError::corrupt(&path, "missing or unsupported header"));
    }
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || ReidError::corrupt(&path, format!("line {}: {line:?}", n + 2));
        if fields.len() != 4 {
            return Err(bad());
        }
        let sample_id: u32 = fields[0].parse().map_err(|_| bad())?;
        let person_id: u32 = fields[1].parse().map_err(|_| bad())?;
        let camera_id: u32 = fields[2].parse().map_err(|_| bad())?;
        let domain: DomainTag = fields[3].parse().map_err(|_| bad())?;
        let rec = dir.join(record_name(sample_id));
        let bytes = fs::read(&rec).map_err(|e| ReidError::io(&rec, e))?;
        let pixels = decode_image(&bytes, &rec)?;
        samples.push(ImageSample::new(sample_id, pixels, person_id, camera_id, domain));
    }
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_domain, DomainSpec};

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec { num_identities: 3, instances_per_camera: 2, ..DomainSpec::default_target() };
        let ds = generate_domain(&spec, DomainTag::Target, 4).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_record_is_corrupt() {
        let img = Image::filled(4, 2, [0.5; 3]);
        let bytes = encode_image(&img);
        let p = Path::new("x.bin");
        assert_eq!(decode_image(&bytes, p).unwrap(), img);
        assert!(matches!(decode_image(&bytes[..bytes.len() - 3], p), Err(ReidError::Corrupt { .. })));
        assert!(matches!(decode_image(&bytes[..5], p), Err(ReidError::Corrupt { .. })));
    }
}
