//! `LPCKPT1` checkpoints.
//!
//! Layout: the magic line `LPCKPT1`, one JSON header line (model config,
//! training state, and the name, shape and Adam step of every parameter in
//! store order), then for each parameter its value, first moment and second
//! moment as little-endian `f64`s.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::PlateauScheduler;
use super::{LightNet, ModelConfig};
use crate::error::{LumenError, Result};

pub const CHECKPOINT_MAGIC: &str = "LPCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub steps: usize,
    pub scheduler: PlateauScheduler,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    state: Option<TrainState>,
    params: Vec<ParamHeader>,
}

pub fn write_checkpoint(w: &mut impl Write, model: &LightNet, state: Option<&TrainState>) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        state: state.copied(),
        params: model
            .params
            .iter()
            .map(|p| ParamHeader { name: p.name.clone(), shape: p.value.shape().to_vec(), step: p.step })
            .collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| LumenError::format("checkpoint header", e))?;
    let io = |e| LumenError::io("<checkpoint>", e);
    writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io)?;
    writeln!(w, "{json}").map_err(io)?;
    for p in model.params.iter() {
        for t in [&p.value, &p.m, &p.v] {
            for x in t.data() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl BufRead) -> Result<(LightNet, Option<TrainState>)> {
    let bad = |d: &str| LumenError::format("checkpoint", d);
    let io = |e| LumenError::io("<checkpoint>", e);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io)?;
    if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
        return Err(bad("missing LPCKPT1 magic"));
    }
    line.clear();
    r.read_line(&mut line).map_err(io)?;
    let header: Header = serde_json::from_str(&line).map_err(|e| LumenError::format("checkpoint header", e))?;
    let mut model = LightNet::skeleton(header.model)?;
    if model.params.len() != header.params.len() {
        return Err(bad("parameter count does not match the model config"));
    }
    let mut buf = [0u8; 8];
    for (p, h) in model.params.iter_mut().zip(&header.params) {
        if p.name != h.name || p.value.shape() != h.shape.as_slice() {
            return Err(LumenError::format(
                "checkpoint",
                format!("parameter {} does not match the model config", h.name),
            ));
        }
        p.step = h.step;
        for t in [&mut p.value, &mut p.m, &mut p.v] {
            for x in t.data_mut() {
                r.read_exact(&mut buf).map_err(|_| bad("truncated parameter data"))?;
                *x = f64::from_le_bytes(buf);
            }
        }
    }
    if r.read(&mut buf).map_err(io)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((model, header.state))
}

pub fn save_checkpoint(path: &Path, model: &LightNet, state: &TrainState) -> Result<()> {
    let file = File::create(path).map_err(|e| LumenError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model, Some(state)).map_err(|e| relabel(e, path))?;
    w.flush().map_err(|e| LumenError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(LightNet, Option<TrainState>)> {
    let file = File::open(path).map_err(|e| LumenError::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file)).map_err(|e| relabel(e, path))
}

fn relabel(e: LumenError, path: &Path) -> LumenError {
    match e {
        LumenError::Io { source, .. } => LumenError::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut model = LightNet::new(ModelConfig::tiny(16), 3).unwrap();
        for (i, p) in model.params.iter_mut().enumerate() {
            p.step = i as u64;
            p.m.data_mut().iter_mut().for_each(|x| *x = 0.1 / 3.0);
            p.v.data_mut().iter_mut().for_each(|x| *x = f64::MIN_POSITIVE);
        }
        let state = TrainState { epoch: 4, steps: 17, scheduler: PlateauScheduler::new(2e-5, 0.1, 5, 1e-4) };
        let mut a = Vec::new();
        write_checkpoint(&mut a, &model, Some(&state)).unwrap();
        let (loaded, st) = read_checkpoint(&mut a.as_slice()).unwrap();
        assert_eq!(st, Some(state));
        assert_eq!(loaded.params, model.params);
        let mut b = Vec::new();
        write_checkpoint(&mut b, &loaded, st.as_ref()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = LightNet::new(ModelConfig::tiny(16), 3).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &model, None).unwrap();
        assert!(read_checkpoint(&mut &a[..a.len() - 1]).is_err());
        let mut extra = a.clone();
        extra.push(0);
        assert!(read_checkpoint(&mut extra.as_slice()).is_err());
        let mut magic = a.clone();
        magic[0] = b'X';
        assert!(read_checkpoint(&mut magic.as_slice()).is_err());
    }
}
