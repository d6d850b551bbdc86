//! Sequence directory layout.
//!
//! ```text
//! <sequence>/
//!   calib/<camera>.txt      intrinsics, R (row-major) and t mapping LIDAR to camera
//!   rgb/NNNNNN.jpg          colour image, JPEG quality 95
//!   thermal/NNNNNN.png      16-bit grey, value / 65535 in [0, 1]
//!   lidar/NNNNNN.bin        point records (x, y, z, reflectivity)
//!   radar/NNNNNN.bin        point records (x, y, z, speed, rcs)
//!   labels/NNNNNN.png       16-bit grey class ids
//!   depth/NNNNNN.png        optional 16-bit dense depth in millimeters
//!   gps.csv                 frame,latitude,longitude,altitude,roll,pitch,yaw
//!   timestamps.csv          sensor_id,frame,microseconds
//!   meta.csv                frame,location,time,difficult
//! ```
//!
//! The sequence name is the directory name. Frame ids are
//! `<sequence>/<NNNNNN>`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageBuffer, Luma};
use nalgebra::{Matrix3, Vector3};

use super::pointcloud::{read_point_file, write_point_file};
use super::synth::SyntheticScene;
use super::{FrameBundle, Modality, ModalitySet};
use crate::geometry::{
    backproject, densify_depth, lidar_input_image, project_points, remap_image, CameraModel, DenseDepth, Extrinsics,
    LidarPoint, PointCloud, Sampling, DEFAULT_MAX_CONTROLS,
};
use crate::raster::{Image, LabelMap, IGNORE};
use crate::{Error, Result};

/// Meters mapped to 1.0 in the LIDAR input image. A power of two keeps the
/// division exact for `f32`-representable depths.
pub const DEFAULT_LIDAR_NORMALIZER: f64 = 64.0;
const JPEG_QUALITY: u8 = 95;
/// Depth assumed when remapping without LIDAR support.
const FAR_DEPTH: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeOfDay {
    Day,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    River,
    Lake,
    Sea,
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeOfDay::Day => "day",
            TimeOfDay::Night => "night",
        })
    }
}

impl FromStr for TimeOfDay {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "day" => Ok(TimeOfDay::Day),
            "night" => Ok(TimeOfDay::Night),
            other => Err(Error::Invalid(format!("unknown time of day '{other}'"))),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::River => "river",
            Location::Lake => "lake",
            Location::Sea => "sea",
        })
    }
}

impl FromStr for Location {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "river" => Ok(Location::River),
            "lake" => Ok(Location::Lake),
            "sea" => Ok(Location::Sea),
            other => Err(Error::Invalid(format!("unknown location '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTags {
    pub time: TimeOfDay,
    pub difficult: bool,
    pub location: Location,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraCalibration {
    pub camera: CameraModel,
    /// LIDAR frame to camera frame.
    pub lidar_to_camera: Extrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsRecord {
    pub frame: usize,
    pub latitude: f64,
    pub longitude: f64,
    pub altitude: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub id: String,
    pub sequence: String,
    pub index: usize,
    pub rgb: PathBuf,
    pub thermal: Option<PathBuf>,
    pub lidar: Option<PathBuf>,
    pub radar: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub tags: FrameTags,
    /// Reference (RGB) timestamp, microseconds.
    pub timestamp: Option<i64>,
}

impl FrameEntry {
    /// Image modalities with data on disk.
    pub fn available(&self) -> ModalitySet {
        let mut s = ModalitySet::only(Modality::Rgb);
        if self.thermal.is_some() {
            s = s.with(Modality::Thermal);
        }
        if self.lidar.is_some() {
            s = s.with(Modality::Lidar);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub sequences: Vec<String>,
    /// Per sequence, per camera name.
    pub calibration: BTreeMap<String, BTreeMap<String, CameraCalibration>>,
    pub frames: Vec<FrameEntry>,
    pub gps: BTreeMap<String, Vec<GpsRecord>>,
    /// Per sequence, per sensor: `(frame, microseconds)`.
    pub timestamps: BTreeMap<String, BTreeMap<String, Vec<(usize, i64)>>>,
    pub lidar_normalizer: f64,
}

impl DatasetManifest {
    pub fn merge(parts: Vec<DatasetManifest>) -> Result<DatasetManifest> {
        let mut out = DatasetManifest {
            sequences: Vec::new(),
            calibration: BTreeMap::new(),
            frames: Vec::new(),
            gps: BTreeMap::new(),
            timestamps: BTreeMap::new(),
            lidar_normalizer: DEFAULT_LIDAR_NORMALIZER,
        };
        for p in parts {
            for s in &p.sequences {
                if out.sequences.contains(s) {
                    return Err(Error::Invalid(format!("sequence '{s}' listed twice")));
                }
            }
            out.lidar_normalizer = p.lidar_normalizer;
            out.sequences.extend(p.sequences);
            out.calibration.extend(p.calibration);
            out.frames.extend(p.frames);
            out.gps.extend(p.gps);
            out.timestamps.extend(p.timestamps);
        }
        Ok(out)
    }

    pub fn frame(&self, id: &str) -> Option<&FrameEntry> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn camera(&self, sequence: &str, name: &str) -> Option<&CameraCalibration> {
        self.calibration.get(sequence).and_then(|c| c.get(name))
    }
}

fn frame_name(index: usize) -> String {
    format!("{index:06}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_calibration(path: &Path, calib: &CameraCalibration) -> Result<()> {
    let c = &calib.camera;
    let r = calib.lidar_to_camera.rotation();
    let t = calib.lidar_to_camera.translation();
    let text = format!(
        "# intrinsics: fx fy cx cy width height; R: row-major LIDAR-to-camera rotation; t: meters\n\
         intrinsics {} {} {} {} {} {}\n\
         R {} {} {} {} {} {} {} {} {}\n\
         t {} {} {}\n",
        c.fx,
        c.fy,
        c.cx,
        c.cy,
        c.width,
        c.height,
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        t[0],
        t[1],
        t[2]
    );
    write_text(path, &text)
}

pub fn read_calibration(path: &Path) -> Result<CameraCalibration> {
    let text = read_text(path)?;
    let mut fields: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().expect("non-empty line");
        let values = parts
            .map(f64::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        fields.insert(key, values);
    }
    let get = |k: &str, n: usize| -> Result<&Vec<f64>> {
        match fields.get(k) {
            Some(v) if v.len() == n => Ok(v),
            Some(v) => Err(Error::format(path, format!("'{k}' needs {n} values, found {}", v.len()))),
            None => Err(Error::format(path, format!("missing '{k}'"))),
        }
    };
    let i = get("intrinsics", 6)?;
    let dim = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::format(path, format!("bad image dimension {v}")))
        }
    };
    let camera = CameraModel::new(i[0], i[1], i[2], i[3], dim(i[4])?, dim(i[5])?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let r = get("R", 9)?;
    let t = get("t", 3)?;
    let ext = Extrinsics::new(Matrix3::from_row_slice(r), Vector3::new(t[0], t[1], t[2]))
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(CameraCalibration {
        camera,
        lidar_to_camera: ext,
    })
}

fn save_gray16(path: &Path, width: usize, height: usize, data: Vec<u16>) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data).expect("buffer sized from dims");
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

fn load_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let g = img.to_luma16();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

fn save_rgb_jpeg(path: &Path, rgb: &Image) -> Result<()> {
    let n = rgb.width * rgb.height;
    let mut buf = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            buf.push((rgb.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    JpegEncoder::new_with_quality(BufWriter::new(f), JPEG_QUALITY)
        .encode(&buf, rgb.width as u32, rgb.height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })
}

fn load_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut out = Image::zeros(3, h, w);
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out.data[c * n + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_unit_png(path: &Path, img: &Image) -> Result<()> {
    let data = img.plane(0).iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    save_gray16(path, img.width, img.height, data)
}

pub fn load_unit_png(path: &Path) -> Result<Image> {
    let (w, h, raw) = load_gray16(path)?;
    let mut out = Image::zeros(1, h, w);
    for (d, v) in out.data.iter_mut().zip(raw) {
        *d = v as f64 / 65535.0;
    }
    Ok(out)
}

fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    save_gray16(path, labels.width, labels.height, labels.ids.iter().map(|&v| v as u16).collect())
}

fn load_labels(path: &Path) -> Result<LabelMap> {
    let (w, h, raw) = load_gray16(path)?;
    let ids = raw
        .into_iter()
        .map(|v| u8::try_from(v).map_err(|_| Error::format(path, format!("label id {v} out of range"))))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(w, h, ids).map_err(|e| Error::format(path, e.to_string()))
}

/// Dense depth as 16-bit millimeters (saturating at 65.535 m).
pub fn save_depth_png(path: &Path, depth: &DenseDepth) -> Result<()> {
    let data = depth
        .depth
        .iter()
        .map(|d| (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    save_gray16(path, depth.width, depth.height, data)
}

pub fn load_depth_png(path: &Path) -> Result<DenseDepth> {
    let (w, h, raw) = load_gray16(path)?;
    Ok(DenseDepth {
        width: w,
        height: h,
        depth: raw.into_iter().map(|v| v as f64 / 1000.0).collect(),
    })
}

/// Write rendered scenes as one sequence. The LIDAR samples are
/// back-projected into the LIDAR frame (identical to the RGB camera frame
/// for synthetic data) and stored as point files.
pub fn save_sequence(scenes: &[SyntheticScene], dir: &Path, camera: &CameraModel) -> Result<()> {
    for sub in ["calib", "rgb", "thermal", "lidar", "labels"] {
        create_dir(&dir.join(sub))?;
    }
    let calib = CameraCalibration {
        camera: *camera,
        lidar_to_camera: Extrinsics::identity(),
    };
    write_calibration(&dir.join("calib/rgb.txt"), &calib)?;
    write_calibration(&dir.join("calib/thermal.txt"), &calib)?;

    let mut meta = String::from("frame,location,time,difficult\n");
    let mut stamps = String::from("sensor_id,frame,microseconds\n");
    let mut gps = String::from("frame,latitude,longitude,altitude,roll,pitch,yaw\n");
    for (index, scene) in scenes.iter().enumerate() {
        let b = &scene.bundle;
        if b.width() != camera.width || b.height() != camera.height {
            return Err(Error::Shape(format!("frame {index} does not match the sequence camera")));
        }
        let name = frame_name(index);
        save_rgb_jpeg(&dir.join(format!("rgb/{name}.jpg")), &b.rgb)?;
        save_unit_png(&dir.join(format!("thermal/{name}.png")), &b.thermal)?;
        save_labels(&dir.join(format!("labels/{name}.png")), &b.labels)?;
        let points = scene
            .lidar
            .samples
            .iter()
            .map(|s| {
                let p = backproject(s.u, s.v, s.d, camera)?;
                Ok(LidarPoint {
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    reflectivity: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_point_file(&dir.join(format!("lidar/{name}.bin")), &PointCloud { points })?;

        let t = &scene.tags;
        meta.push_str(&format!("{index},{},{},{}\n", t.location, t.time, u8::from(t.difficult)));
        stamps.push_str(&format!("rgb,{index},{}\n", b.timestamp));
        stamps.push_str(&format!("thermal,{index},{}\n", b.timestamp + 1_000));
        stamps.push_str(&format!("lidar,{index},{}\n", b.timestamp - 2_000));
        gps.push_str(&format!(
            "{index},{},{},0,0,0,{}\n",
            46.05 + index as f64 * 1e-5,
            14.5 + index as f64 * 1e-5,
            0.01 * index as f64
        ));
    }
    write_text(&dir.join("meta.csv"), &meta)?;
    write_text(&dir.join("timestamps.csv"), &stamps)?;
    write_text(&dir.join("gps.csv"), &gps)
}

fn csv_rows(path: &Path, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(Error::format(path, format!("expected header '{header}'"))),
    }
    let ncols = header.split(',').count();
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cols: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if cols.len() != ncols {
                return Err(Error::format(path, format!("line {}: expected {ncols} columns", i + 1)));
            }
            Ok((i + 1, cols))
        })
        .collect()
}

fn parse_col<T: FromStr>(path: &Path, line: usize, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| Error::format(path, format!("line {line}: '{v}': {e}")))
}

/// Read one sequence directory into a manifest.
pub fn load_sequence(dir: &Path) -> Result<DatasetManifest> {
    let meta_path = dir.join("meta.csv");
    if !meta_path.is_file() {
        return Err(Error::NoMetadata(dir.to_path_buf()));
    }
    let sequence = dir
        .canonicalize()
        .map_err(|e| Error::io(dir, e))?
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());

    let mut cameras = BTreeMap::new();
    let calib_dir = dir.join("calib");
    if calib_dir.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&calib_dir)
            .map_err(|e| Error::io(&calib_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        entries.sort();
        for p in entries {
            let name = p.file_stem().expect("has stem").to_string_lossy().into_owned();
            cameras.insert(name, read_calibration(&p)?);
        }
    }

    let mut timestamps: BTreeMap<String, Vec<(usize, i64)>> = BTreeMap::new();
    let ts_path = dir.join("timestamps.csv");
    if ts_path.is_file() {
        for (line, cols) in csv_rows(&ts_path, "sensor_id,frame,microseconds")? {
            timestamps
                .entry(cols[0].clone())
                .or_default()
                .push((parse_col(&ts_path, line, &cols[1])?, parse_col(&ts_path, line, &cols[2])?));
        }
    }

    let mut gps = Vec::new();
    let gps_path = dir.join("gps.csv");
    if gps_path.is_file() {
        for (line, cols) in csv_rows(&gps_path, "frame,latitude,longitude,altitude,roll,pitch,yaw")? {
            let f = |i: usize| parse_col::<f64>(&gps_path, line, &cols[i]);
            gps.push(GpsRecord {
                frame: parse_col(&gps_path, line, &cols[0])?,
                latitude: f(1)?,
                longitude: f(2)?,
                altitude: f(3)?,
                roll: f(4)?,
                pitch: f(5)?,
                yaw: f(6)?,
            });
        }
    }

    let rgb_stamps: BTreeMap<usize, i64> = timestamps.get("rgb").map(|v| v.iter().copied().collect()).unwrap_or_default();
    let mut frames = Vec::new();
    for (line, cols) in csv_rows(&meta_path, "frame,location,time,difficult")? {
        let index: usize = parse_col(&meta_path, line, &cols[0])?;
        let tags = FrameTags {
            location: parse_col(&meta_path, line, &cols[1])?,
            time: parse_col(&meta_path, line, &cols[2])?,
            difficult: parse_col::<u8>(&meta_path, line, &cols[3])? != 0,
        };
        let name = frame_name(index);
        let rgb = dir.join(format!("rgb/{name}.jpg"));
        if !rgb.is_file() {
            return Err(Error::format(&meta_path, format!("line {line}: frame {name} has no {}", rgb.display())));
        }
        let optional = |sub: &str, ext: &str| {
            let p = dir.join(format!("{sub}/{name}.{ext}"));
            p.is_file().then_some(p)
        };
        frames.push(FrameEntry {
            id: format!("{sequence}/{name}"),
            sequence: sequence.clone(),
            index,
            rgb,
            thermal: optional("thermal", "png"),
            lidar: optional("lidar", "bin"),
            radar: optional("radar", "bin"),
            labels: optional("labels", "png"),
            depth: optional("depth", "png"),
            tags,
            timestamp: rgb_stamps.get(&index).copied(),
        });
    }
    if !frames.is_empty() && !cameras.contains_key("rgb") {
        return Err(Error::format(calib_dir.join("rgb.txt"), "missing RGB camera calibration"));
    }

    Ok(DatasetManifest {
        sequences: vec![sequence.clone()],
        calibration: BTreeMap::from([(sequence.clone(), cameras)]),
        frames,
        gps: BTreeMap::from([(sequence.clone(), gps)]),
        timestamps: BTreeMap::from([(sequence, timestamps)]),
        lidar_normalizer: DEFAULT_LIDAR_NORMALIZER,
    })
}

/// Load either a single sequence directory or a directory whose
/// subdirectories are sequences (in name order).
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if root.join("meta.csv").is_file() {
        return load_sequence(root);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.csv").is_file())
        .collect();
    if dirs.is_empty() {
        return Err(Error::NoMetadata(root.to_path_buf()));
    }
    dirs.sort();
    DatasetManifest::merge(dirs.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>>>()?)
}

/// Load the bundles of the given frame ids, in order.
pub fn load_bundles(manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<FrameBundle>> {
    ids.iter().map(|id| load_bundle(manifest, id)).collect()
}

/// Materialize a frame on the RGB image plane. The thermal image is
/// remapped with LIDAR-densified depth when its camera differs from the RGB
/// camera; missing modalities are zero and flagged unavailable.
pub fn load_bundle(manifest: &DatasetManifest, id: &str) -> Result<FrameBundle> {
    let entry = manifest
        .frame(id)
        .ok_or_else(|| Error::Invalid(format!("unknown frame id '{id}'")))?;
    let rgb_cal = manifest
        .camera(&entry.sequence, "rgb")
        .ok_or_else(|| Error::Invalid(format!("sequence {} has no RGB calibration", entry.sequence)))?;
    let cam = rgb_cal.camera;
    let rgb = load_rgb(&entry.rgb)?;
    if rgb.width != cam.width || rgb.height != cam.height {
        return Err(Error::format(&entry.rgb, "image size does not match calibration"));
    }

    let cloud = entry.lidar.as_deref().map(read_point_file).transpose()?;
    let sparse = cloud.as_ref().map(|c| project_points(c, &rgb_cal.lidar_to_camera, &cam));
    let lidar = match &sparse {
        Some(s) => lidar_input_image(s, &cam, manifest.lidar_normalizer)?,
        None => Image::zeros(1, cam.height, cam.width),
    };

    let thermal = match (&entry.thermal, manifest.camera(&entry.sequence, "thermal")) {
        (Some(path), Some(th_cal)) => {
            let raw = load_unit_png(path)?;
            if th_cal == rgb_cal {
                raw
            } else {
                let depth = match &sparse {
                    Some(s) if !s.samples.is_empty() => densify_depth(s, &cam, DEFAULT_MAX_CONTROLS)?,
                    _ => DenseDepth::constant(cam.width, cam.height, FAR_DEPTH),
                };
                let rgb_to_thermal = rgb_cal.lidar_to_camera.inverse().then(&th_cal.lidar_to_camera);
                let (img, _) = remap_image(&raw, &th_cal.camera, &rgb_to_thermal, &cam, &depth, Sampling::Bilinear)?;
                img
            }
        }
        (Some(path), None) => {
            let raw = load_unit_png(path)?;
            if raw.width != cam.width || raw.height != cam.height {
                return Err(Error::format(path, "thermal image needs calib/thermal.txt to be remapped"));
            }
            raw
        }
        (None, _) => Image::zeros(1, cam.height, cam.width),
    };

    let labels = match &entry.labels {
        Some(p) => load_labels(p)?,
        None => LabelMap::filled(cam.width, cam.height, IGNORE),
    };
    let bundle = FrameBundle {
        rgb,
        thermal,
        lidar,
        labels,
        available: entry.available(),
        timestamp: entry.timestamp.unwrap_or(0),
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_has_no_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_sequence(dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("no sequence metadata found"), "{err}");
    }

    #[test]
    fn malformed_calibration_names_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("calib")).unwrap();
        fs::write(dir.path().join("calib/rgb.txt"), "intrinsics 1 2 3\n").unwrap();
        fs::write(dir.path().join("meta.csv"), "frame,location,time,difficult\n").unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("rgb.txt"), "{err}");
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cal = CameraCalibration {
            camera: CameraModel::new(700.5, 701.25, 640.1, 360.3, 1280, 720).unwrap(),
            lidar_to_camera: Extrinsics::from_yaw(0.123, Vector3::new(0.1, -0.2, 0.3)),
        };
        let p = dir.path().join("cam.txt");
        write_calibration(&p, &cal).unwrap();
        assert_eq!(read_calibration(&p).unwrap(), cal);
    }

    #[test]
    fn depth_png_is_millimeter_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = DenseDepth {
            width: 3,
            height: 2,
            depth: vec![0.001, 1.5, 12.345, 65.535, 3.0, 0.25],
        };
        let p = dir.path().join("d.png");
        save_depth_png(&p, &d).unwrap();
        let back = load_depth_png(&p).unwrap();
        for (a, b) in d.depth.iter().zip(&back.depth) {
            assert!((a - b).abs() < 1e-9);
        }
        // Second round trip is bit-exact.
        save_depth_png(&p, &back).unwrap();
        assert_eq!(load_depth_png(&p).unwrap(), back);
    }

    #[test]
    fn missing_referenced_frame_is_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("meta.csv"), "frame,location,time,difficult\n0,river,day,0\n").unwrap();
        assert!(load_sequence(dir.path()).is_err());
    }
}
