//! Image and label-map containers shared by the geometry, data and model code.

use crate::tensor::Feature;
use crate::{Error, Result};

/// Planar `[channels, height, width]` image with values in `[0, 1]`.
pub type Image = Feature;

/// Number of semantic classes.
pub const NUM_CLASSES: usize = 4;
/// Label id excluded from losses and metrics.
pub const IGNORE: u8 = 255;

pub const SKY: u8 = 0;
pub const WATER: u8 = 1;
pub const STATIC_OBSTACLE: u8 = 2;
pub const DYNAMIC_OBSTACLE: u8 = 3;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "water", "static_obstacle", "dynamic_obstacle"];

pub fn is_valid_label(id: u8) -> bool {
    (id as usize) < NUM_CLASSES || id == IGNORE
}

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, id: u8) -> Self {
        LabelMap {
            width,
            height,
            ids: vec![id; width * height],
        }
    }

    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::Shape(format!(
                "label map {width}x{height} needs {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| !is_valid_label(id)) {
            return Err(Error::Invalid(format!("label id {bad} outside class scheme")));
        }
        Ok(LabelMap { width, height, ids })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &id in &self.ids {
            if (id as usize) < NUM_CLASSES {
                h[id as usize] += 1;
            }
        }
        h
    }
}

/// Check that every value of an image is finite and inside `[0, 1]`.
pub fn check_unit_range(img: &Image) -> bool {
    img.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
}
