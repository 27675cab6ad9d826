//! Fixed-capacity rehearsal buffer filled by reservoir sampling.
//!
//! Each entry keeps the slide together with the head-gradient of its target
//! logit, recorded once when the slide was offered to the buffer.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::Rng;

use crate::data::format::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::SlideFeatures;

const CHECKPOINT_MAGIC: &[u8; 4] = b"WRB1";

#[derive(Clone, Debug, PartialEq)]
pub struct BufferItem {
    pub slide: SlideFeatures,
    pub stored_grad: Array1<f64>,
    /// Position of the slide in the stream of offered samples.
    pub stream_index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RehearsalBuffer {
    capacity: usize,
    items: Vec<BufferItem>,
    n_seen: u64,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("rehearsal buffer capacity must be >= 1".into()));
        }
        Ok(RehearsalBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            n_seen: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn items(&self) -> &[BufferItem] {
        &self.items
    }

    /// Offers one sample. Below capacity it is appended; at capacity it
    /// replaces a uniformly chosen slot with probability
    /// `capacity / (n_seen + 1)` and is dropped otherwise. Returns the slot
    /// written, if any.
    pub fn conditional_add<R: Rng + ?Sized>(
        &mut self,
        slide: SlideFeatures,
        grad: Array1<f64>,
        rng: &mut R,
    ) -> Result<Option<usize>> {
        if let Some(first) = self.items.first() {
            if first.stored_grad.len() != grad.len() {
                return Err(Error::Dimension(format!(
                    "stored gradient width {} differs from buffer width {}",
                    grad.len(),
                    first.stored_grad.len()
                )));
            }
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of slide {}", slide.slide_id)));
        }
        let item = BufferItem {
            slide,
            stored_grad: grad,
            stream_index: self.n_seen,
        };
        let slot = if self.items.len() < self.capacity {
            self.items.push(item);
            Some(self.items.len() - 1)
        } else {
            let j = rng.random_range(0..=self.n_seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
                Some(j as usize)
            } else {
                None
            }
        };
        self.n_seen += 1;
        Ok(slot)
    }

    /// Uniform draw over the current entries; nothing is removed.
    pub fn sample_replay<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&BufferItem> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok(&self.items[rng.random_range(0..self.items.len())])
    }

    /// Little-endian checkpoint: magic `WRB1`, u32 capacity, u64 n_seen,
    /// u32 item count, then per item the slide header and feature blocks
    /// (as in a slide feature file), its labels and id, u64 stream index,
    /// u32 gradient width and the gradient as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(self.capacity as u32);
        w.u64(self.n_seen);
        w.u32(self.items.len() as u32);
        for item in &self.items {
            w.string(&item.slide.slide_id);
            w.u32(item.slide.task_index as u32);
            w.u32(item.slide.class_in_task as u32);
            w.u32(item.slide.global_class as u32);
            w.slide_blocks(&item.slide);
            w.u64(item.stream_index);
            w.u32(item.stored_grad.len() as u32);
            for v in &item.stored_grad {
                w.f64(*v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let capacity = r.u32()? as usize;
        let n_seen = r.u64()?;
        let n_items = r.u32()? as usize;
        if capacity == 0 || n_items > capacity || n_items as u64 > n_seen {
            return Err(Error::format(
                path,
                format!("inconsistent header: capacity {capacity}, {n_items} items, n_seen {n_seen}"),
            ));
        }
        let mut items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let slide_id = r.string()?;
            let task_index = r.u32()? as usize;
            let class_in_task = r.u32()? as usize;
            let global_class = r.u32()? as usize;
            let (regions, patches) = r.slide_blocks()?;
            let slide = SlideFeatures::new(slide_id, task_index, class_in_task, global_class, regions, patches)
                .map_err(|e| Error::format(path, e.to_string()))?;
            let stream_index = r.u64()?;
            let width = r.u32()? as usize;
            let grad = (0..width).map(|_| r.f64()).collect::<Result<Array1<f64>>>()?;
            items.push(BufferItem {
                slide,
                stored_grad: grad,
                stream_index,
            });
        }
        r.finish()?;
        Ok(RehearsalBuffer {
            capacity,
            items,
            n_seen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
