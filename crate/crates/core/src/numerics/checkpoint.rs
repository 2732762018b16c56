//! Array container used for checkpoints and dataset tensors.
//!
//! Layout: an ASCII header, one item per line,
//!
//! ```text
//! HIDESEEK-ARRAYS 1
//! key=value            (zero or more, values are single-line)
//! array <name> <d0>x<d1>x...
//! end
//! ```
//!
//! followed by the arrays' values as raw little-endian f64, concatenated in
//! header order.

use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{ConvNetConfig, ModelParams, Tensor};

const MAGIC: &str = "HIDESEEK-ARRAYS 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArrayFile {
    pub header: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl ArrayFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_arrays(&mut buf, self)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        read_arrays(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}

pub fn write_arrays<W: Write>(mut w: W, file: &ArrayFile) -> Result<()> {
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    for (k, v) in &file.header {
        if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
            return Err(Error::InvalidArgument(format!("unencodable header entry {k:?}")));
        }
        head.push_str(&format!("{k}={v}\n"));
    }
    for (name, t) in &file.arrays {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(Error::InvalidArgument(format!("unencodable array name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("array {name} {}\n", dims.join("x")));
    }
    head.push_str("end\n");
    w.write_all(head.as_bytes())?;
    for (_, t) in &file.arrays {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_arrays<R: BufRead>(mut r: R) -> Result<ArrayFile> {
    let bad = |reason: String| Error::format("<stream>", reason);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(format!("bad magic line {:?}", line.trim_end())));
    }
    let mut file = ArrayFile::default();
    let mut shapes = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("header not terminated by 'end'".into()));
        }
        let l = line.trim_end_matches('\n');
        if l == "end" {
            break;
        }
        if let Some(rest) = l.strip_prefix("array ") {
            let (name, dims) = rest
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed array line {l:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("malformed dims in {l:?}")))?;
            shapes.push((name.to_string(), shape));
        } else if let Some((k, v)) = l.split_once('=') {
            file.header.push((k.to_string(), v.to_string()));
        } else {
            return Err(bad(format!("unrecognized header line {l:?}")));
        }
    }
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(format!("truncated data for array {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        file.arrays.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last array".into()));
    }
    Ok(file)
}

/// Trained network weights plus what is needed to rebuild and audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: ConvNetConfig,
    pub params: ModelParams,
    pub seed: u64,
    pub epoch: usize,
    /// Free-form provenance (resolved experiment config, fill vector, ...).
    pub extra: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn to_array_file(&self) -> Result<ArrayFile> {
        let mut header = vec![
            ("network".to_string(), serde_json::to_string(&self.network)?),
            ("seed".to_string(), self.seed.to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
        ];
        header.extend(self.extra.iter().cloned());
        let arrays = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Ok(ArrayFile { header, arrays })
    }

    pub fn from_array_file(file: ArrayFile) -> Result<Self> {
        let need = |k: &str| {
            file.get(k)
                .ok_or_else(|| Error::format("<checkpoint>", format!("missing header key {k}")))
        };
        let network: ConvNetConfig = serde_json::from_str(need("network")?)?;
        let seed = need("seed")?
            .parse()
            .map_err(|_| Error::format("<checkpoint>", "seed is not an integer"))?;
        let epoch = need("epoch")?
            .parse()
            .map_err(|_| Error::format("<checkpoint>", "epoch is not an integer"))?;
        let extra = file
            .header
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "network" | "seed" | "epoch"))
            .cloned()
            .collect();
        let params =
            ModelParams::from_tensors(&network, file.arrays.into_iter().map(|(_, t)| t).collect())?;
        Ok(Self {
            network,
            params,
            seed,
            epoch,
            extra,
        })
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_array_file()?.to_bytes()
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_array_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_array_file(ArrayFile::load(path)?)
    }
}
