//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout: an ASCII manifest followed by raw little-endian `f64`
//! blocks, one per parameter, in manifest order.
//!
//! ```text
//! CPMR-CHECKPOINT
//! version 1
//! meta <key>=<value>                 (zero or more)
//! param <name> <rows> <cols> f64le   (one per parameter)
//! end
//! <rows*cols*8 bytes> ...
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "CPMR-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of learnable tensors addressed by name or [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    by_name: HashMap<String, ParamId>,
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| bit_equal(a, b))
    }
}

fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Config(format!("invalid parameter name `{name}`")));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.values[id.0])
    }

    /// Mutable access; clones the buffer if a tape still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Dimension(format!(
                "parameter `{}` expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.as_str(), v.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// FNV-1a over names, shapes and value bits; stable across runs.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            feed(&(t.rows() as u64).to_le_bytes());
            feed(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                feed(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Parameters plus free-form metadata (the resolved run configuration).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "version {CHECKPOINT_VERSION}")?;
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unencodable meta entry `{k}`")));
            }
            writeln!(w, "meta {k}={v}")?;
        }
        for (name, t) in self.params.iter() {
            writeln!(w, "param {name} {} {} f64le", t.rows(), t.cols())?;
        }
        writeln!(w, "end")?;
        for (_, t) in self.params.iter() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Checkpoint("truncated manifest".into()));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        next_line(&mut r, &mut line)?;
        match line.strip_prefix("version ").map(str::parse::<u32>) {
            Some(Ok(CHECKPOINT_VERSION)) => {}
            _ => return Err(Error::Checkpoint(format!("unsupported version line `{line}`"))),
        }
        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("bad meta line `{line}`")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let f: Vec<&str> = rest.split(' ').collect();
                let parsed = match f.as_slice() {
                    [name, rows, cols, "f64le"] => rows
                        .parse::<usize>()
                        .ok()
                        .zip(cols.parse::<usize>().ok())
                        .map(|(r, c)| (name.to_string(), r, c)),
                    _ => None,
                };
                manifest.push(parsed.ok_or_else(|| Error::Checkpoint(format!("bad param line `{line}`")))?);
            } else {
                return Err(Error::Checkpoint(format!("unexpected manifest line `{line}`")));
            }
        }
        let mut params = ParameterSet::new();
        for (name, rows, cols) in manifest {
            let mut bytes = vec![0u8; rows * cols * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("truncated data block for `{name}`")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(&name, Tensor::from_vec(rows, cols, data)?)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last block".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
