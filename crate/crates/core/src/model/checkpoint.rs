//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "AQSEGCKP"
//! version      u32      1
//! config_len   u32
//! config       config_len bytes of UTF-8 `key=value` lines
//! count        u32      number of tensors
//! count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   values     prod(dims) x f64
//! ```
//!
//! Config keys: `stages`, `channels` (comma separated), `classes`,
//! `height`, `width`, `multihead` (0/1). Tensor names follow
//! [`Params::names`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, Params};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AQSEGCKP";
const FORMAT_VERSION: u32 = 1;

fn config_text(cfg: &ModelConfig) -> String {
    let channels: Vec<String> = cfg.channels.iter().map(|c| c.to_string()).collect();
    format!(
        "stages={}\nchannels={}\nclasses={}\nheight={}\nwidth={}\nmultihead={}\n",
        cfg.stages,
        channels.join(","),
        cfg.classes,
        cfg.height,
        cfg.width,
        u8::from(cfg.multihead)
    )
}

fn parse_config(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut cfg = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad config line '{line}'"))?;
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{k}: {e}"));
        match k.trim() {
            "stages" => cfg.stages = num(v)?,
            "channels" => cfg.channels = v.split(',').map(num).collect::<std::result::Result<_, _>>()?,
            "classes" => cfg.classes = num(v)?,
            "height" => cfg.height = num(v)?,
            "width" => cfg.width = num(v)?,
            "multihead" => cfg.multihead = num(v)? != 0,
            other => return Err(format!("unknown config key '{other}'")),
        }
    }
    Ok(cfg)
}

pub fn write_checkpoint<W: Write>(params: &Params, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let cfg = config_text(&params.config);
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    let tensors = params.named_tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()
}

fn read_string<R: Read>(r: &mut R, max: usize) -> std::result::Result<String, String> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    if len > max {
        return Err(format!("string length {len} exceeds {max}"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| e.to_string())?;
    String::from_utf8(buf).map_err(|e| e.to_string())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> std::result::Result<Params, String> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != CHECKPOINT_MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let cfg = parse_config(&read_string(&mut r, 1 << 16)?)?;
    let mut params = Params::zeros(&cfg).map_err(|e| e.to_string())?;
    let names = params.names();
    let count = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    if count != names.len() {
        return Err(format!("expected {} tensors, found {count}", names.len()));
    }
    let mut slots = params.tensors_mut();
    for expected in &names {
        let name = read_string(&mut r, 1 << 12)?;
        let idx = names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| format!("unexpected tensor '{name}' (wanted '{expected}')"))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        let dims = (0..ndim)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let slot = &mut slots[idx];
        if dims != slot.shape() {
            return Err(format!("tensor '{name}' has shape {dims:?}, expected {:?}", slot.shape()));
        }
        r.read_f64_into::<LittleEndian>(slot.data_mut())
            .map_err(|e| format!("tensor '{name}': {e}"))?;
    }
    Ok(params)
}

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Params> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f)).map_err(|msg| Error::format(path, msg))
}
