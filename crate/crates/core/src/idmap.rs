use crate::error::{shape_err, Result};

/// Per-pixel 8-bit identifiers (class labels or instance ids), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl IdMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(shape_err!("id map must be non-empty, got {width}×{height}"));
        }
        if ids.len() != width * height {
            return Err(shape_err!(
                "{width}×{height} id map needs {} values, got {}",
                width * height,
                ids.len()
            ));
        }
        Ok(IdMap { width, height, ids })
    }

    pub fn filled(width: usize, height: usize, id: u8) -> Self {
        IdMap {
            width,
            height,
            ids: vec![id; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    pub fn same_dims(&self, other: &IdMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}
