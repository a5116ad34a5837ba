//! Single-file dataset container.
//!
//! Layout:
//!
//! ```text
//! haap-data v1\n
//! count <n>\n
//! ---\n
//! <n lines: id \t label \t render-record-json>\n
//! ---\n
//! <n payload blocks: u32le w, u32le h, u32le c, then w*h*c bytes row-major (y, x, channel)>
//! ```
//!
//! The manifest section is valid UTF-8; the payload is raw bytes. The
//! digest of a file is FNV-1a over the manifest section only, so it
//! identifies the (label, record) population independently of pixel data.

use super::render::RenderRecord;
use crate::ckpt::fnv1a64;
use crate::encoder::{ImageTensor, IMG_C};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const DATA_MAGIC: &str = "haap-data v1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("label {0:?} contains a tab or newline")]
    UnwritableLabel(String),
}

/// One stored sample: quantized pixels plus the record that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub id: u64,
    pub label: String,
    pub record: RenderRecord,
    pub w: u32,
    pub h: u32,
    pub pixels: Vec<u8>,
}

impl DataSample {
    pub fn from_image(id: u64, label: &str, record: RenderRecord, img: &ImageTensor) -> Self {
        let pixels = img
            .pixels()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        DataSample {
            id,
            label: label.to_string(),
            record,
            w: img.w() as u32,
            h: img.h() as u32,
            pixels,
        }
    }

    pub fn image(&self) -> ImageTensor {
        ImageTensor::from_bytes(self.h as usize, self.w as usize, &self.pixels)
            .expect("stored payload dimensions are validated on read")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<DataSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The text section of the container: magic, count, and one id/label/
    /// record line per sample. This is what [`Dataset::digest`] hashes.
    pub fn manifest(&self) -> Result<String, ContainerError> {
        let mut out = format!("{DATA_MAGIC}\ncount {}\n---\n", self.samples.len());
        for s in &self.samples {
            if s.label.contains('\t') || s.label.contains('\n') {
                return Err(ContainerError::UnwritableLabel(s.label.clone()));
            }
            let rec = serde_json::to_string(&s.record)
                .map_err(|e| ContainerError::Malformed(e.to_string()))?;
            out.push_str(&format!("{}\t{}\t{}\n", s.id, s.label, rec));
        }
        out.push_str("---\n");
        Ok(out)
    }

    /// FNV-1a over the manifest section.
    pub fn digest(&self) -> Result<u64, ContainerError> {
        Ok(fnv1a64(self.manifest()?.as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let mut bytes = self.manifest()?.into_bytes();
        for s in &self.samples {
            let need = (s.w as usize) * (s.h as usize) * IMG_C;
            if s.pixels.len() != need {
                return Err(ContainerError::Malformed(format!(
                    "sample {}: payload {} bytes, dimensions need {}",
                    s.id,
                    s.pixels.len(),
                    need
                )));
            }
            bytes.extend_from_slice(&s.w.to_le_bytes());
            bytes.extend_from_slice(&s.h.to_le_bytes());
            bytes.extend_from_slice(&(IMG_C as u32).to_le_bytes());
            bytes.extend_from_slice(&s.pixels);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Dataset, ContainerError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, ContainerError> {
        let bad = |m: &str| ContainerError::Malformed(m.to_string());
        let mut pos = 0usize;
        let mut line = |bytes: &[u8]| -> Result<String, ContainerError> {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            if pos == bytes.len() {
                return Err(bad("unterminated header line"));
            }
            let s = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("manifest is not utf-8"))?
                .to_string();
            pos += 1;
            Ok(s)
        };
        if line(bytes)? != DATA_MAGIC {
            return Err(bad("bad magic"));
        }
        let count: usize = line(bytes)?
            .strip_prefix("count ")
            .ok_or_else(|| bad("missing count"))?
            .parse()
            .map_err(|_| bad("bad count"))?;
        if line(bytes)? != "---" {
            return Err(bad("missing manifest separator"));
        }
        let mut metas = Vec::with_capacity(count);
        for _ in 0..count {
            let row = line(bytes)?;
            let mut cols = row.splitn(3, '\t');
            let id: u64 = cols
                .next()
                .ok_or_else(|| bad("short manifest row"))?
                .parse()
                .map_err(|_| bad("bad sample id"))?;
            let label = cols.next().ok_or_else(|| bad("short manifest row"))?.to_string();
            let rec: RenderRecord =
                serde_json::from_str(cols.next().ok_or_else(|| bad("short manifest row"))?)
                    .map_err(|e| bad(&format!("bad record json: {e}")))?;
            metas.push((id, label, rec));
        }
        if line(bytes)? != "---" {
            return Err(bad("missing payload separator"));
        }
        let mut samples = Vec::with_capacity(count);
        for (id, label, record) in metas {
            if pos + 12 > bytes.len() {
                return Err(bad("truncated payload header"));
            }
            let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            let (w, h, c) = (word(pos), word(pos + 4), word(pos + 8));
            pos += 12;
            if c as usize != IMG_C {
                return Err(bad(&format!("sample {id}: {c} channels, expected {IMG_C}")));
            }
            let need = (w as usize) * (h as usize) * (c as usize);
            if pos + need > bytes.len() {
                return Err(bad("truncated payload"));
            }
            samples.push(DataSample {
                id,
                label,
                record,
                w,
                h,
                pixels: bytes[pos..pos + need].to_vec(),
            });
            pos += need;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Dataset { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render::{render, Style};

    fn sample(id: u64, word: &str) -> DataSample {
        let rec = RenderRecord::clean(Style::plain());
        let img = render(word, &rec).unwrap();
        DataSample::from_image(id, word, rec, &img)
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        let ds = Dataset { samples: vec![sample(0, "river"), sample(1, "stone")] };
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(ds, back);
        let path2 = dir.path().join("set2.bin");
        back.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let ds = Dataset::default();
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn digest_tracks_manifest_not_pixels() {
        let a = Dataset { samples: vec![sample(0, "river")] };
        let mut b = a.clone();
        b.samples[0].pixels[0] ^= 0xff;
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = a.clone();
        c.samples[0].label = "rivet".to_string();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn quantization_roundtrips_through_image() {
        let s = sample(3, "quote");
        let img = s.image();
        let again = DataSample::from_image(3, "quote", s.record.clone(), &img);
        assert_eq!(s.pixels, again.pixels);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(Dataset::from_bytes(b"haap-data v2\ncount 0\n---\n---\n").is_err());
        assert!(Dataset::from_bytes(b"haap-data v1\ncount 1\n---\n---\n").is_err());
        let ok = b"haap-data v1\ncount 0\n---\n---\n";
        assert!(Dataset::from_bytes(ok).unwrap().is_empty());
        let mut trailing = ok.to_vec();
        trailing.push(7);
        assert!(Dataset::from_bytes(&trailing).is_err());
    }

    #[test]
    fn tab_in_label_is_rejected_at_write() {
        let mut s = sample(0, "oak");
        s.label = "o\tk".to_string();
        let ds = Dataset { samples: vec![s] };
        assert!(matches!(ds.digest(), Err(ContainerError::UnwritableLabel(_))));
    }
}
