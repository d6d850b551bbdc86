//! Frame bundles, the on-disk sequence layout, split manifests and the
//! procedural scene generator.

mod layout;
mod pointcloud;
mod splits;
mod synth;

use std::fmt;
use std::str::FromStr;

pub use layout::{
    load_bundle, load_bundles, load_dataset, load_depth_png, load_sequence, load_unit_png, save_unit_png, read_calibration, save_depth_png, save_sequence, write_calibration,
    CameraCalibration, DatasetManifest, FrameEntry, FrameTags, GpsRecord, Location, TimeOfDay, DEFAULT_LIDAR_NORMALIZER,
};
pub use pointcloud::{read_point_file, read_radar_file, write_point_file, write_radar_file, RadarPoint};
pub use splits::{make_splits, read_splits, write_splits, SplitKind, SplitSpec};
pub use synth::{synthesize_frame, synthesize_scene, SyntheticScene, SyntheticSceneParams};

pub use crate::raster::LabelMap;
use crate::raster::{check_unit_range, Image};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Thermal,
    Lidar,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Thermal, Modality::Lidar];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
            Modality::Lidar => "lidar",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "thermal" => Ok(Modality::Thermal),
            "lidar" => Ok(Modality::Lidar),
            other => Err(Error::Invalid(format!("unknown modality '{other}'"))),
        }
    }
}

/// A subset of the three modalities, stored as a bitmask (rgb = bit 0,
/// thermal = bit 1, lidar = bit 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(0b111);

    pub fn from_bits(bits: u8) -> Self {
        ModalitySet(bits & 0b111)
    }

    pub fn only(m: Modality) -> Self {
        ModalitySet(m.bit())
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn with(self, m: Modality) -> Self {
        ModalitySet(self.0 | m.bit())
    }

    pub fn complement(self) -> Self {
        ModalitySet(!self.0 & 0b111)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    /// Accepts `rgb,thermal`, `rgb+thermal` or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(ModalitySet::EMPTY);
        }
        s.split([',', '+'])
            .try_fold(ModalitySet::EMPTY, |acc, part| Ok(acc.with(part.parse()?)))
    }
}

/// One synchronized multimodal sample on the RGB image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    /// `[3, h, w]` in `[0, 1]`.
    pub rgb: Image,
    /// `[1, h, w]` in `[0, 1]`.
    pub thermal: Image,
    /// `[1, h, w]` normalized LIDAR distances, zero where no return.
    pub lidar: Image,
    pub labels: LabelMap,
    /// Modalities with real data for this frame.
    pub available: ModalitySet,
    pub timestamp: i64,
}

impl FrameBundle {
    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn modality(&self, m: Modality) -> &Image {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Thermal => &self.thermal,
            Modality::Lidar => &self.lidar,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut Image {
        match m {
            Modality::Rgb => &mut self.rgb,
            Modality::Thermal => &mut self.thermal,
            Modality::Lidar => &mut self.lidar,
        }
    }

    /// Dimension and range invariants.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        for (m, channels) in [(Modality::Rgb, 3), (Modality::Thermal, 1), (Modality::Lidar, 1)] {
            let img = self.modality(m);
            if img.channels != channels || img.width != w || img.height != h {
                return Err(Error::Shape(format!(
                    "{} is {}x{}x{}, expected {channels}x{h}x{w}",
                    m.name(),
                    img.channels,
                    img.height,
                    img.width
                )));
            }
            if !check_unit_range(img) {
                return Err(Error::Invalid(format!("{} values outside [0, 1]", m.name())));
            }
        }
        if self.labels.ids.len() != w * h {
            return Err(Error::Shape("label map size".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_set_parsing_and_display() {
        let s: ModalitySet = "thermal,lidar".parse().unwrap();
        assert_eq!(s.bits(), 0b110);
        assert_eq!(s.to_string(), "thermal+lidar");
        assert_eq!(s.complement(), ModalitySet::only(Modality::Rgb));
        assert_eq!("rgb+thermal+lidar".parse::<ModalitySet>().unwrap(), ModalitySet::ALL);
        assert!("rgb,radar".parse::<ModalitySet>().is_err());
        assert_eq!("none".parse::<ModalitySet>().unwrap(), ModalitySet::EMPTY);
    }
}
