//! Nearest-timestamp bundling of asynchronous sensor streams.
//!
//! Timestamps are integer microseconds. A sample is valid for a reference
//! timestamp when it lies strictly closer than one sampling period.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamIndex {
    pub sensor_id: String,
    timestamps: Vec<i64>,
    pub period: i64,
}

impl StreamIndex {
    pub fn new(sensor_id: impl Into<String>, timestamps: Vec<i64>, period: i64) -> Result<Self> {
        let sensor_id = sensor_id.into();
        if period <= 0 {
            return Err(Error::Invalid(format!("stream {sensor_id}: period must be > 0")));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "stream {sensor_id}: timestamps must be strictly increasing"
            )));
        }
        Ok(StreamIndex {
            sensor_id,
            timestamps,
            period,
        })
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorMatch {
    pub index: usize,
    /// `sample_t - reference_t`.
    pub delta_t: i64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleRecord {
    pub reference_t: i64,
    /// One entry per non-reference stream, in the order they were given.
    pub matches: Vec<SensorMatch>,
}

/// Index and signed offset of the sample closest to `t`. Equidistant
/// neighbours resolve to the earlier sample.
pub fn nearest_sample(stream: &StreamIndex, t: i64) -> Result<(usize, i64)> {
    let ts = &stream.timestamps;
    if ts.is_empty() {
        return Err(Error::Invalid(format!("stream {} is empty", stream.sensor_id)));
    }
    let after = ts.partition_point(|&s| s < t);
    let best = if after == 0 {
        0
    } else if after == ts.len() {
        ts.len() - 1
    } else {
        let before = after - 1;
        if t - ts[before] <= ts[after] - t {
            before
        } else {
            after
        }
    };
    Ok((best, ts[best] - t))
}

/// One record per reference timestamp pairing it with the nearest sample
/// of every other stream.
pub fn bundle(reference: &StreamIndex, others: &[StreamIndex]) -> Result<Vec<BundleRecord>> {
    if reference.is_empty() {
        return Err(Error::Invalid(format!("stream {} is empty", reference.sensor_id)));
    }
    reference
        .timestamps
        .iter()
        .map(|&t| {
            let matches = others
                .iter()
                .map(|s| {
                    let (index, delta_t) = nearest_sample(s, t)?;
                    Ok(SensorMatch {
                        index,
                        delta_t,
                        valid: delta_t.abs() < s.period,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BundleRecord {
                reference_t: t,
                matches,
            })
        })
        .collect()
}
