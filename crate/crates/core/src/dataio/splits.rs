//! Train/val/test partitions of a manifest.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layout::{DatasetManifest, FrameEntry, Location, TimeOfDay};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    DayNight,
    Geography,
    Saltwater,
    Difficult,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::DayNight,
        SplitKind::Geography,
        SplitKind::Saltwater,
        SplitKind::Difficult,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::DayNight => "day-night",
            SplitKind::Geography => "geography",
            SplitKind::Saltwater => "saltwater",
            SplitKind::Difficult => "difficult",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Invalid(format!("unknown split kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition the manifest. The test set is determined by the frame tags;
/// the remaining eligible frames are shuffled with `seed` and `val_ratio`
/// of them (rounded) go to validation. Each list keeps manifest order.
pub fn make_splits(manifest: &DatasetManifest, kind: SplitKind, val_ratio: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&val_ratio) {
        return Err(Error::Invalid(format!("val_ratio {val_ratio} outside [0, 1]")));
    }
    let frames = &manifest.frames;
    let (is_test, eligible): (fn(&FrameEntry) -> bool, fn(&FrameEntry) -> bool) = match kind {
        SplitKind::DayNight => (|f| f.tags.time == TimeOfDay::Night, |_| true),
        SplitKind::Geography => (|f| f.tags.location != Location::River, |_| true),
        SplitKind::Saltwater => (|f| f.tags.location == Location::Sea, |_| true),
        SplitKind::Difficult => (|f| f.tags.difficult, |f| f.tags.time == TimeOfDay::Day),
    };
    let test: Vec<usize> = (0..frames.len())
        .filter(|&i| eligible(&frames[i]) && is_test(&frames[i]))
        .collect();
    if test.is_empty() {
        let tag = match kind {
            SplitKind::DayNight => "night-tagged frames",
            SplitKind::Geography => "non-river frames",
            SplitKind::Saltwater => "sea-tagged frames",
            SplitKind::Difficult => "difficult-tagged day frames",
        };
        return Err(Error::Split(tag.into()));
    }
    let mut rest: Vec<usize> = (0..frames.len())
        .filter(|&i| eligible(&frames[i]) && !is_test(&frames[i]))
        .collect();
    let n_val = (val_ratio * rest.len() as f64).round() as usize;
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = rest[..n_val].to_vec();
    let mut train = rest[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    let ids = |v: &[usize]| v.iter().map(|&i| frames[i].id.clone()).collect();
    Ok(SplitSpec {
        kind,
        train: ids(&train),
        val: ids(&val),
        test: ids(&test),
    })
}

/// Write `splits/<kind>/{train,val,test}.txt` under `root`, one id per line.
pub fn write_splits(spec: &SplitSpec, root: &Path) -> Result<()> {
    let dir = root.join("splits").join(spec.kind.name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, ids) in [("train", &spec.train), ("val", &spec.val), ("test", &spec.test)] {
        let path = dir.join(format!("{name}.txt"));
        let mut text = ids.join("\n");
        if !ids.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_splits(root: &Path, kind: SplitKind) -> Result<SplitSpec> {
    let dir = root.join("splits").join(kind.name());
    let read = |name: &str| -> Result<Vec<String>> {
        let path = dir.join(format!("{name}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    };
    Ok(SplitSpec {
        kind,
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
    })
}
