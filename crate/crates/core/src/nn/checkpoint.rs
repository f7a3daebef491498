//! Portable checkpoints: magic `SDGN`, u32 version, u32 header length,
//! UTF-8 header lines `name dims... offset`, then a payload of 32-bit IEEE
//! little-endian values. Offsets count payload values.

use crate::error::{Error, Result};
use crate::nn::adam::ParamStore;
use crate::nn::real::Real;
use crate::nn::tensor::Tensor;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SDGN";
const VERSION: u32 = 1;

/// In-memory checkpoint: an ordered set of named f32 tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        let name = name.into();
        assert!(
            !name.contains(char::is_whitespace),
            "tensor names must not contain whitespace: {name:?}"
        );
        assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(!self.index.contains_key(&name), "duplicate tensor {name:?}");
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push((name, shape.to_vec(), data));
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.index
            .get(name)
            .map(|&i| (self.tensors[i].1.as_slice(), self.tensors[i].2.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    /// Store a u64 as four 16-bit limbs (f32 holds them exactly).
    pub fn add_u64(&mut self, name: impl Into<String>, value: u64) {
        let limbs: Vec<f32> = (0..4)
            .map(|i| ((value >> (16 * i)) & 0xffff) as f32)
            .collect();
        self.add_tensor(name, &[4], limbs);
    }

    pub fn get_u64(&self, name: &str) -> Option<u64> {
        let (_, data) = self.tensor(name)?;
        if data.len() != 4 {
            return None;
        }
        Some(
            data.iter()
                .enumerate()
                .map(|(i, &v)| (v as u64 & 0xffff) << (16 * i))
                .sum(),
        )
    }

    /// Store UTF-8 text with one byte per payload value.
    pub fn add_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        self.add_tensor(name, &[bytes.len()], bytes);
    }

    pub fn get_text(&self, name: &str) -> Option<String> {
        let (_, data) = self.tensor(name)?;
        let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes).ok()
    }

    /// Serialize every entry of a parameter store (values, Adam moments,
    /// step) under `prefix.`.
    pub fn add_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for e in store.entries() {
            let cast = |t: &Tensor<T>| t.data.iter().map(|v| v.as_f32()).collect::<Vec<f32>>();
            self.add_tensor(format!("{prefix}.{}", e.name), &e.value.shape, cast(&e.value));
            if e.trainable {
                self.add_tensor(
                    format!("{prefix}.{}.adam_m", e.name),
                    &e.value.shape,
                    cast(&e.adam_m),
                );
                self.add_tensor(
                    format!("{prefix}.{}.adam_v", e.name),
                    &e.value.shape,
                    cast(&e.adam_v),
                );
            }
        }
        self.add_u64(format!("{prefix}.step"), store.step);
    }

    /// Restore a parameter store serialized by [`Checkpoint::add_store`].
    /// The store must already have the same entry layout.
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let missing = |name: &str| Error::State(format!("checkpoint is missing tensor {name}"));
        for i in 0..store.len() {
            let name = store.entry(i).name.clone();
            let trainable = store.entry(i).trainable;
            let full = format!("{prefix}.{name}");
            let (shape, data) = self.tensor(&full).ok_or_else(|| missing(&full))?;
            if shape != store.entry(i).value.shape {
                return Err(Error::State(format!(
                    "checkpoint tensor {full} has shape {:?}, expected {:?}",
                    shape,
                    store.entry(i).value.shape
                )));
            }
            let to_t = |src: &[f32]| src.iter().map(|&v| T::of_f32(v)).collect::<Vec<T>>();
            store.entries_mut()[i].value.data = to_t(data);
            if trainable {
                let m_name = format!("{full}.adam_m");
                let (_, m) = self.tensor(&m_name).ok_or_else(|| missing(&m_name))?;
                store.entries_mut()[i].adam_m.data = to_t(m);
                let v_name = format!("{full}.adam_v");
                let (_, v) = self.tensor(&v_name).ok_or_else(|| missing(&v_name))?;
                store.entries_mut()[i].adam_v.data = to_t(v);
            }
        }
        store.step = self
            .get_u64(&format!("{prefix}.step"))
            .ok_or_else(|| missing(&format!("{prefix}.step")))?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut header = String::new();
        let mut offset = 0usize;
        for (name, shape, data) in &self.tensors {
            header.push_str(name);
            for d in shape {
                header.push(' ');
                header.push_str(&d.to_string());
            }
            header.push(' ');
            header.push_str(&offset.to_string());
            header.push('\n');
            offset += data.len();
        }
        let hb = header.as_bytes();
        let mut out = Vec::with_capacity(12 + hb.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hb.len() as u32).to_le_bytes());
        out.extend_from_slice(hb);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |offset: usize, reason: &str| Error::Corruption {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        };
        if bytes.len() < 12 {
            return Err(corrupt(bytes.len(), "file shorter than fixed header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format(path, "bad magic, expected SDGN"));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != VERSION {
            return Err(Error::Unsupported {
                what: "checkpoint version".into(),
                detail: format!("file is version {version}, this build reads {VERSION}"),
            });
        }
        let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        if 12 + header_len > bytes.len() {
            return Err(corrupt(bytes.len(), "header overruns file"));
        }
        let header = std::str::from_utf8(&bytes[12..12 + header_len])
            .map_err(|_| corrupt(12, "header is not UTF-8"))?;
        let payload = &bytes[12 + header_len..];
        if payload.len() % 4 != 0 {
            return Err(corrupt(12 + header_len, "payload length not a multiple of 4"));
        }
        let n_values = payload.len() / 4;

        let mut ck = Checkpoint::new();
        let mut expected_total = 0usize;
        for (ln, line) in header.lines().enumerate() {
            let toks: Vec<&str> = line.split(' ').collect();
            if toks.len() < 2 {
                return Err(corrupt(12, &format!("header line {ln} malformed")));
            }
            let name = toks[0];
            let nums: Vec<usize> = toks[1..]
                .iter()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| corrupt(12, &format!("header line {ln} has bad numbers")))?;
            let (shape, off) = nums.split_at(nums.len() - 1);
            let off = off[0];
            let count: usize = shape.iter().product();
            if off != expected_total {
                return Err(corrupt(12, &format!("tensor {name} offset {off} out of order")));
            }
            expected_total += count;
            if expected_total > n_values {
                return Err(corrupt(
                    12 + header_len + n_values * 4,
                    &format!("payload ends before tensor {name}"),
                ));
            }
            let data: Vec<f32> = (0..count)
                .map(|i| {
                    let o = (off + i) * 4;
                    f32::from_le_bytes([payload[o], payload[o + 1], payload[o + 2], payload[o + 3]])
                })
                .collect();
            ck.add_tensor(name, shape, data);
        }
        if expected_total != n_values {
            return Err(corrupt(
                12 + header_len + expected_total * 4,
                "payload longer than header declares",
            ));
        }
        Ok(ck)
    }
}
