//! Little-endian binary formats.
//!
//! Slide feature file:
//!
//! ```text
//! "WSF1" | u32 N_r | u32 k | u32 d_vis | f32 regions[N_r*d_vis] | f32 patches[N_r*k*k*d_vis]
//! ```
//!
//! Prototype file:
//!
//! ```text
//! "WSP1" | u32 n_cls | u32 n_neg | u32 C_text | f32 vectors[(n_cls+n_neg)*C_text]
//! ```
//!
//! Class vectors come first, in global class order, then negatives.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::model::SlideFeatures;

pub const SLIDE_MAGIC: &[u8; 4] = b"WSF1";
pub const PROTOTYPE_MAGIC: &[u8; 4] = b"WSP1";

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// Header and both feature blocks of a slide, without the magic.
    pub(crate) fn slide_blocks(&mut self, s: &SlideFeatures) {
        self.u32(s.n_regions() as u32);
        self.u32(s.k() as u32);
        self.u32(s.d_vis() as u32);
        for v in s.regions.iter().chain(s.patches.iter()) {
            self.f32(*v);
        }
    }

    pub(crate) fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &Path) -> Self {
        ByteReader {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    &self.path,
                    format!(
                        "truncated payload: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.buf.len()
                    ),
                )
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::format(
                &self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32_block(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(&self.path, "dimension overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(&self.path, "slide id is not UTF-8"))
    }

    pub(crate) fn slide_blocks(&mut self) -> Result<(Array2<f32>, Array3<f32>)> {
        let n_r = self.u32()? as usize;
        let k = self.u32()? as usize;
        let d_vis = self.u32()? as usize;
        let overflow = || Error::format(&self.path, format!("dimension overflow: N_r={n_r}, k={k}, d_vis={d_vis}"));
        let region_len = n_r.checked_mul(d_vis).ok_or_else(overflow)?;
        let patch_len = k
            .checked_mul(k)
            .and_then(|kk| kk.checked_mul(region_len))
            .ok_or_else(overflow)?;
        let needed = region_len
            .checked_add(patch_len)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(overflow)?;
        if needed > self.remaining() {
            return Err(Error::format(
                &self.path,
                format!(
                    "truncated payload: header declares {needed} feature bytes, {} remain",
                    self.remaining()
                ),
            ));
        }
        let regions = Array2::from_shape_vec((n_r, d_vis), self.f32_block(region_len)?)
            .expect("length checked");
        let patches = Array3::from_shape_vec((n_r, k * k, d_vis), self.f32_block(patch_len)?)
            .expect("length checked");
        Ok((regions, patches))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                &self.path,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

/// Labels of a slide, which live in the manifest rather than the feature file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlideLabels {
    pub slide_id: String,
    pub task_index: usize,
    pub class_in_task: usize,
    pub global_class: usize,
}

impl SlideFeatures {
    pub fn labels(&self) -> SlideLabels {
        SlideLabels {
            slide_id: self.slide_id.clone(),
            task_index: self.task_index,
            class_in_task: self.class_in_task,
            global_class: self.global_class,
        }
    }
}

pub fn encode_slide_features(s: &SlideFeatures) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(SLIDE_MAGIC);
    w.slide_blocks(s);
    w.into_inner()
}

pub fn decode_slide_features(bytes: &[u8], path: &Path, labels: SlideLabels) -> Result<SlideFeatures> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(SLIDE_MAGIC)?;
    let (regions, patches) = r.slide_blocks()?;
    r.finish()?;
    let SlideLabels {
        slide_id,
        task_index,
        class_in_task,
        global_class,
    } = labels;
    SlideFeatures::new(slide_id, task_index, class_in_task, global_class, regions, patches)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_slide_features(s: &SlideFeatures, path: &Path) -> Result<()> {
    fs::write(path, encode_slide_features(s)).map_err(|e| Error::io(path, e))
}

pub fn read_slide_features(path: &Path, labels: SlideLabels) -> Result<SlideFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_slide_features(&bytes, path, labels)
}

/// Raw prototype vectors as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeFile {
    pub c_text: usize,
    pub cls: Vec<Array1<f32>>,
    pub neg: Vec<Array1<f32>>,
}

pub fn encode_prototypes(p: &PrototypeFile) -> Result<Vec<u8>> {
    if p.cls.iter().chain(&p.neg).any(|v| v.len() != p.c_text) {
        return Err(Error::Dimension(format!(
            "every prototype must have width C_text={}",
            p.c_text
        )));
    }
    let mut w = ByteWriter::default();
    w.bytes(PROTOTYPE_MAGIC);
    w.u32(p.cls.len() as u32);
    w.u32(p.neg.len() as u32);
    w.u32(p.c_text as u32);
    for v in p.cls.iter().chain(&p.neg) {
        for x in v {
            w.f32(*x);
        }
    }
    Ok(w.into_inner())
}

pub fn decode_prototypes(bytes: &[u8], path: &Path) -> Result<PrototypeFile> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(PROTOTYPE_MAGIC)?;
    let n_cls = r.u32()? as usize;
    let n_neg = r.u32()? as usize;
    let c_text = r.u32()? as usize;
    let total = n_cls
        .checked_add(n_neg)
        .and_then(|n| n.checked_mul(c_text))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    if total != r.remaining() {
        return Err(Error::format(
            path,
            format!("header declares {total} vector bytes, {} present", r.remaining()),
        ));
    }
    let mut read = |n: usize| -> Result<Vec<Array1<f32>>> {
        (0..n).map(|_| r.f32_block(c_text).map(Array1::from)).collect()
    };
    let cls = read(n_cls)?;
    let neg = read(n_neg)?;
    Ok(PrototypeFile { c_text, cls, neg })
}

pub fn write_prototypes(p: &PrototypeFile, path: &Path) -> Result<()> {
    fs::write(path, encode_prototypes(p)?).map_err(|e| Error::io(path, e))
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_prototypes(&bytes, path)
}
