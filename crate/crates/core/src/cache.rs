//! Per-layer key/value storage used by the step paths.

use crate::error::{Error, Result};
use crate::nn::KvSource;

/// Append-only K/V store addressed by absolute position, with old positions
/// released once they leave the attention window.
pub trait KvStore {
    type Source<'a>: KvSource + ?Sized
    where
        Self: 'a;

    /// Release everything before `first_needed`.
    fn retire(&mut self, layer: usize, first_needed: usize);

    /// Store the row for the next position of `layer`.
    fn append(&mut self, layer: usize, key: &[f32], value: &[f32]) -> Result<()>;

    /// Number of positions appended so far.
    fn len(&self, layer: usize) -> usize;

    fn source(&self, layer: usize) -> &Self::Source<'_>;
}

/// Contiguous per-layer buffers keeping at most `window` rows resident.
#[derive(Debug, Clone)]
pub struct WindowKv {
    width: usize,
    layers: Vec<WindowLayer>,
}

#[derive(Debug, Clone, Default)]
pub struct WindowLayer {
    keys: Vec<f32>,
    values: Vec<f32>,
    /// Absolute position of the first resident row.
    first: usize,
    width: usize,
}

impl WindowLayer {
    fn resident(&self) -> usize {
        self.keys.len() / self.width
    }
}

impl KvSource for WindowLayer {
    #[inline]
    fn key(&self, pos: usize) -> &[f32] {
        let r = pos - self.first;
        &self.keys[r * self.width..(r + 1) * self.width]
    }
    #[inline]
    fn value(&self, pos: usize) -> &[f32] {
        let r = pos - self.first;
        &self.values[r * self.width..(r + 1) * self.width]
    }
}

impl WindowKv {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            width,
            layers: (0..n_layers).map(|_| WindowLayer { width, ..Default::default() }).collect(),
        }
    }

    /// Rows currently held across all layers.
    pub fn resident_rows(&self) -> usize {
        self.layers.iter().map(WindowLayer::resident).sum()
    }

    pub fn first_resident(&self, layer: usize) -> usize {
        self.layers[layer].first
    }
}

impl KvStore for WindowKv {
    type Source<'a> = WindowLayer;

    fn retire(&mut self, layer: usize, first_needed: usize) {
        let l = &mut self.layers[layer];
        let drop_rows = first_needed.saturating_sub(l.first).min(l.resident());
        if drop_rows > 0 {
            l.keys.drain(..drop_rows * l.width);
            l.values.drain(..drop_rows * l.width);
            l.first += drop_rows;
        }
    }

    fn append(&mut self, layer: usize, key: &[f32], value: &[f32]) -> Result<()> {
        if key.len() != self.width || value.len() != self.width {
            return Err(Error::Shape {
                op: "WindowKv::append",
                detail: format!("rows must be {} wide, got {}/{}", self.width, key.len(), value.len()),
            });
        }
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(key);
        l.values.extend_from_slice(value);
        Ok(())
    }

    fn len(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        l.first + l.resident()
    }

    fn source(&self, layer: usize) -> &WindowLayer {
        &self.layers[layer]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retire_keeps_absolute_addressing() {
        let mut kv = WindowKv::new(1, 2);
        for p in 0..10usize {
            kv.retire(0, p.saturating_sub(2));
            kv.append(0, &[p as f32, 0.0], &[0.0, p as f32]).unwrap();
        }
        assert_eq!(kv.len(0), 10);
        assert_eq!(kv.first_resident(0), 7);
        assert_eq!(kv.source(0).key(9), &[9.0, 0.0]);
        assert_eq!(kv.source(0).value(7), &[0.0, 7.0]);
        assert_eq!(kv.resident_rows(), 3);
        assert!(kv.append(0, &[1.0], &[1.0]).is_err());
    }
}
