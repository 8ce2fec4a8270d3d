//! Single-file model checkpoints.
//!
//! Layout:
//!
//! ```text
//! GRAPHFLOW-CHECKPOINT <version>\n
//! key=value\n            (configuration, entity names, fit range)
//! ...
//! \n                     (blank line ends the header)
//! u32 array count
//! per array: u32 name length, name (UTF-8), u32 rank, rank × u64 extents,
//!            extents-product × f64
//! ```
//!
//! All binary integers and floats are little-endian.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::data::NormStats;
use crate::detector::ScoreSeries;
use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &str = "GRAPHFLOW-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save(model: &FlowModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FlowModel> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(BufReader::new(file))
}

pub fn write_checkpoint(model: &FlowModel, mut out: impl Write) -> Result<()> {
    writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
    for (k, v) in model.config.to_pairs() {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "entities={}", model.num_entities())?;
    for (i, name) in model.entity_names.iter().enumerate() {
        if name.contains('\n') || name.contains('\r') {
            return Err(bad(format!("entity name {name:?} contains a line break")));
        }
        writeln!(out, "entity.{i}={name}")?;
    }
    writeln!(out, "norm.fit_start={}", model.norm.fit_range.start)?;
    writeln!(out, "norm.fit_end={}", model.norm.fit_range.end)?;
    writeln!(out)?;

    let mut arrays: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    arrays.push((
        "targets.mu".into(),
        Tensor::from_vec(model.targets.mu.clone()),
    ));
    arrays.push((
        "norm.mean".into(),
        Tensor::from_vec(model.norm.mean.clone()),
    ));
    arrays.push(("norm.std".into(), Tensor::from_vec(model.norm.std.clone())));
    if let Some(s) = model.train_scores.as_ref().filter(|s| !s.is_empty()) {
        let k = s.num_entities();
        arrays.push((
            "train_scores.window".into(),
            Tensor::from_vec(s.window.clone()),
        ));
        arrays.push((
            "train_scores.entity".into(),
            Tensor::new(vec![s.len(), k], s.entity.concat())?,
        ));
        arrays.push((
            "train_scores.starts".into(),
            Tensor::from_vec(s.starts.iter().map(|&v| v as f64).collect()),
        ));
    }

    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in &arrays {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| bad("truncated array section"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| bad("truncated array section"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(mut input: impl BufRead) -> Result<FlowModel> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let version = line
        .trim_end()
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("missing checkpoint header"))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(bad(format!("unsupported format version `{version}`")));
    }

    let mut header = Vec::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(bad("header not terminated"));
        }
        let l = line.trim_end_matches(['\n', '\r']);
        if l.is_empty() {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| bad(format!("bad header line `{l}`")))?;
        header.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("header lacks `{key}`")))
    };
    let parse_usize =
        |key: &str| -> Result<usize> { get(key)?.parse().map_err(|_| bad(format!("bad `{key}`"))) };

    let mut config = TrainConfig::default();
    for (k, v) in &header {
        if !k.contains('.') && k != "entities" {
            config.set(k, v)?;
        }
    }
    let k = parse_usize("entities")?;
    let names = (0..k)
        .map(|i| get(&format!("entity.{i}")).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let fit_range = parse_usize("norm.fit_start")?..parse_usize("norm.fit_end")?;

    let count = read_u32(&mut input)? as usize;
    let mut arrays = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|_| bad("truncated array name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8"))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        input
            .read_exact(&mut raw)
            .map_err(|_| bad(format!("truncated data for `{name}`")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.insert(name, Tensor::new(shape, data)?);
    }
    let mut take = |name: &str| -> Result<Tensor> {
        arrays
            .remove(name)
            .ok_or_else(|| bad(format!("missing array `{name}`")))
    };

    let norm = NormStats {
        mean: take("norm.mean")?.into_data(),
        std: take("norm.std")?.into_data(),
        fit_range,
    };
    let mut model = FlowModel::init(&config, names, norm)?;
    let slots: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in slots.iter().zip(model.params_mut()) {
        let t = take(name)?;
        if t.shape() != slot.shape() {
            return Err(bad(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let mu = take("targets.mu")?.into_data();
    if mu.len() != k {
        return Err(bad("target means do not match the entity count"));
    }
    model.targets.mu = mu;
    if let Ok(window) = take("train_scores.window") {
        let entity = take("train_scores.entity")?;
        let starts = take("train_scores.starts")?;
        let n = window.numel();
        if entity.shape() != [n, k] || starts.numel() != n {
            return Err(bad("training score arrays disagree in length"));
        }
        model.train_scores = Some(ScoreSeries {
            window: window.into_data(),
            entity: entity.data().chunks(k).map(<[f64]>::to_vec).collect(),
            starts: starts.data().iter().map(|&v| v as usize).collect(),
        });
    }
    Ok(model)
}
