//! Point-cloud files: `u32` record count, `u32` arity, then `count * arity`
//! little-endian `f32` values. LIDAR records are `(x, y, z, reflectivity)`,
//! radar records `(x, y, z, speed, rcs)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::geometry::{LidarPoint, PointCloud};
use crate::{Error, Result};

const LIDAR_ARITY: u32 = 4;
const RADAR_ARITY: u32 = 5;
const MAX_RECORDS: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub speed: f64,
    pub rcs: f64,
}

fn write_records(path: &Path, arity: u32, records: &[Vec<f64>]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_u32::<LittleEndian>(records.len() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(arity).map_err(io)?;
    for r in records {
        for &v in r {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_records(path: &Path, arity: u32) -> Result<Vec<Vec<f64>>> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let found = r.read_u32::<LittleEndian>().map_err(io)?;
    if found != arity {
        return Err(Error::format(path, format!("record arity {found}, expected {arity}")));
    }
    if count > MAX_RECORDS {
        return Err(Error::format(path, format!("implausible record count {count}")));
    }
    let mut values = vec![0f32; (count * arity) as usize];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|e| Error::format(path, format!("truncated point data: {e}")))?;
    let mut rest = Vec::new();
    if r.read_to_end(&mut rest).map_err(io)? != 0 {
        return Err(Error::format(path, "trailing bytes after point data"));
    }
    Ok(values
        .chunks(arity as usize)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect())
}

pub fn write_point_file(path: &Path, cloud: &PointCloud) -> Result<()> {
    let recs: Vec<Vec<f64>> = cloud
        .points
        .iter()
        .map(|p| vec![p.x, p.y, p.z, p.reflectivity])
        .collect();
    write_records(path, LIDAR_ARITY, &recs)
}

pub fn read_point_file(path: &Path) -> Result<PointCloud> {
    let points = read_records(path, LIDAR_ARITY)?
        .into_iter()
        .map(|r| LidarPoint {
            x: r[0],
            y: r[1],
            z: r[2],
            reflectivity: r[3],
        })
        .collect();
    let cloud = PointCloud { points };
    if !cloud.is_valid() {
        return Err(Error::format(path, "non-finite coordinates or negative reflectivity"));
    }
    Ok(cloud)
}

pub fn write_radar_file(path: &Path, points: &[RadarPoint]) -> Result<()> {
    let recs: Vec<Vec<f64>> = points.iter().map(|p| vec![p.x, p.y, p.z, p.speed, p.rcs]).collect();
    write_records(path, RADAR_ARITY, &recs)
}

pub fn read_radar_file(path: &Path) -> Result<Vec<RadarPoint>> {
    Ok(read_records(path, RADAR_ARITY)?
        .into_iter()
        .map(|r| RadarPoint {
            x: r[0],
            y: r[1],
            z: r[2],
            speed: r[3],
            rcs: r[4],
        })
        .collect())
}
