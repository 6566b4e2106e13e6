//! Binary checkpoints.
//!
//! Everything that influences the continuation of a run is stored: model
//! parameters, optimizer momentum, the epoch and step counters, and any
//! frozen selection records. Floats are written as little-endian `f64`
//! bits, so identical training states produce identical files byte for
//! byte, and resuming reproduces a straight-through run exactly.

use pole_core::adapter::AdapterParams;
use pole_core::backbone::ConvStub;
use pole_core::cam::ClassifierHead;
use pole_core::encoder::Modality;
use pole_core::selector::SelectionRecord;
use pole_core::tensor::Matrix;
use pole_core::{Error, Real, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"POLECKP1";

/// The mutable state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub head: ClassifierHead<Real>,
    pub backbone: ConvStub<Real>,
    pub adapter_visual: AdapterParams<Real>,
    pub adapter_text: AdapterParams<Real>,
    pub mom_head: Vec<Real>,
    pub mom_backbone: Vec<Real>,
    pub mom_adapter_visual: Vec<Real>,
    pub mom_adapter_text: Vec<Real>,
    /// Completed epochs.
    pub epoch: u32,
    pub global_step: u64,
    /// Selection records locked by `freeze_epoch`, if any.
    pub frozen_selections: Option<Vec<SelectionRecord<Real>>>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64_slice(&mut self, vs: &[Real]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn bytes(&mut self, bs: &[u8]) {
        self.u64(bs.len() as u64);
        self.buf.extend_from_slice(bs);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::config("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64_slice(&mut self) -> Result<Vec<Real>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

fn adapter_section(w: &mut Writer, p: &AdapterParams<Real>) {
    w.u32(p.dim() as u32);
    w.u32(p.hidden() as u32);
    w.u32(match p.modality {
        Modality::Visual => 0,
        Modality::Text => 1,
    });
    w.f64_slice(&p.params_flat());
}

fn read_adapter(r: &mut Reader) -> Result<AdapterParams<Real>> {
    let dim = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let modality = match r.u32()? {
        0 => Modality::Visual,
        1 => Modality::Text,
        m => return Err(Error::config(format!("bad adapter modality tag {m}"))),
    };
    let flat = r.f64_slice()?;
    let mut p = AdapterParams {
        w1: Matrix::zeros(dim, hidden),
        w2: Matrix::zeros(hidden, dim),
        gate: vec![0.0; dim],
        modality,
    };
    if flat.len() != p.num_params() {
        return Err(Error::config("adapter parameter count mismatch"));
    }
    p.set_params_flat(&flat);
    Ok(p)
}

/// Serialize the state; `config_hash` pins the configuration the run used.
pub fn save(path: &Path, state: &TrainState, config_hash: u64) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u64(config_hash);
    w.u32(state.epoch);
    w.u64(state.global_step);

    // head
    w.u32(state.head.weights.rows() as u32);
    w.u32(state.head.weights.cols() as u32);
    w.f64_slice(state.head.weights.as_slice());

    // backbone: serialized via serde to keep the layer plan with the data
    let backbone_json = serde_json::to_vec(&state.backbone).expect("backbone serializes");
    w.bytes(&backbone_json);

    adapter_section(&mut w, &state.adapter_visual);
    adapter_section(&mut w, &state.adapter_text);

    w.f64_slice(&state.mom_head);
    w.f64_slice(&state.mom_backbone);
    w.f64_slice(&state.mom_adapter_visual);
    w.f64_slice(&state.mom_adapter_text);

    match &state.frozen_selections {
        None => w.u32(0),
        Some(records) => {
            w.u32(1);
            let dump: String = records
                .iter()
                .map(|r| r.to_json_line() + "\n")
                .collect();
            w.bytes(dump.as_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", tmp.display())))?;
    f.write_all(&w.buf)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::config(format!("cannot write {}: {e}", tmp.display())))?;
    drop(f);
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::config(format!("cannot move checkpoint into place: {e}")))?;
    Ok(())
}

/// Load a checkpoint; returns the state and the config hash it was saved
/// under.
pub fn load(path: &Path) -> Result<(TrainState, u64)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::config(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let config_hash = r.u64()?;
    let epoch = r.u32()?;
    let global_step = r.u64()?;

    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let head_data = r.f64_slice()?;
    if head_data.len() != rows * cols {
        return Err(Error::config("head weight count mismatch"));
    }
    let head = ClassifierHead::new(Matrix::from_vec(rows, cols, head_data))?;

    let backbone: ConvStub<Real> = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::config(format!("backbone section: {e}")))?;

    let adapter_visual = read_adapter(&mut r)?;
    let adapter_text = read_adapter(&mut r)?;

    let mom_head = r.f64_slice()?;
    let mom_backbone = r.f64_slice()?;
    let mom_adapter_visual = r.f64_slice()?;
    let mom_adapter_text = r.f64_slice()?;

    let frozen_selections = match r.u32()? {
        0 => None,
        1 => {
            let text = std::str::from_utf8(r.bytes()?)
                .map_err(|e| Error::config(format!("frozen selection section: {e}")))?;
            let records = text
                .lines()
                .map(SelectionRecord::<Real>::from_json_line)
                .collect::<Result<Vec<_>>>()?;
            Some(records)
        }
        t => return Err(Error::config(format!("bad frozen-selection tag {t}"))),
    };

    Ok((
        TrainState {
            head,
            backbone,
            adapter_visual,
            adapter_text,
            mom_head,
            mom_backbone,
            mom_adapter_visual,
            mom_adapter_text,
            epoch,
            global_step,
            frozen_selections,
        },
        config_hash,
    ))
}
