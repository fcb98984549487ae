//! Binary tensor container shared by model, registry and controller files.
//!
//! A file is a sequence of records, all integers little-endian:
//! `u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 values[product(dims)]`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use agnn_core::controller::ControllerState;
use agnn_core::gnn::CompiledModel;
use agnn_core::registry::{ParameterRegistry, RegistryEntry, SharingPolicy};
use agnn_core::tensor::Tensor;

/// Upper bound on a single name or rank, to reject garbage before allocating.
const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot I/O: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt snapshot record {record}: {detail}")]
    Corrupt { record: usize, detail: String },
    #[error("snapshot does not fit: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] agnn_core::Error),
}

pub type Entries = Vec<(String, Tensor)>;

pub fn write_tensors<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> io::Result<()> {
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Reads `buf.len()` bytes, or reports a clean end of input when none are left.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof)),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Entries, SnapshotError> {
    let mut out = Vec::new();
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    loop {
        let record = out.len();
        let corrupt = |detail: String| SnapshotError::Corrupt { record, detail };
        if !read_exact_or_eof(&mut r, &mut u32buf)? {
            return Ok(out);
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        if name_len > MAX_NAME {
            return Err(corrupt(format!("name length {}", name_len)));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name is not UTF-8".into()))?;
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > MAX_RANK {
            return Err(corrupt(format!("rank {} for `{}`", rank, name)));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            dims.push(usize::try_from(u64::from_le_bytes(u64buf)).map_err(|_| corrupt("dimension overflow".into()))?);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("shape {:?} overflows", dims)))?;
        let mut data = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        out.push((name, Tensor::new(&dims, data)?));
    }
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<(), SnapshotError> {
    write_tensors(BufWriter::new(File::create(path)?), entries)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Entries, SnapshotError> {
    read_tensors(BufReader::new(File::open(path)?))
}

fn running_names(layer: usize) -> (String, String) {
    (format!("l{}.bn.running_mean", layer), format!("l{}.bn.running_var", layer))
}

/// Every parameter under its manifest name, plus batch-norm running statistics.
pub fn model_tensors(model: &CompiledModel) -> Entries {
    let mut out: Entries = model
        .parameter_manifest()
        .iter()
        .zip(model.params())
        .map(|(info, t)| (info.name.clone(), t.clone()))
        .collect();
    for layer in model.layers() {
        let (mean, var) = running_names(layer.index);
        let width = layer.running_mean.len();
        out.push((mean, Tensor::new(&[width], layer.running_mean.clone()).expect("vector shape")));
        out.push((var, Tensor::new(&[width], layer.running_var.clone()).expect("vector shape")));
    }
    out
}

/// Loads a snapshot into a model built from the same architecture and sizes.
/// Every tensor of the model must be present with a matching shape.
pub fn restore_model(model: &mut CompiledModel, entries: &[(String, Tensor)]) -> Result<(), SnapshotError> {
    let find = |name: &str, shape: &[usize]| -> Result<Tensor, SnapshotError> {
        let (_, t) = entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| SnapshotError::Mismatch(format!("missing tensor `{}`", name)))?;
        if t.shape() != shape {
            return Err(SnapshotError::Mismatch(format!(
                "`{}` has shape {:?}, model needs {:?}",
                name,
                t.shape(),
                shape
            )));
        }
        Ok(t.clone())
    };
    let manifest = model.parameter_manifest().to_vec();
    for (i, info) in manifest.iter().enumerate() {
        let shape = model.params()[i].shape().to_vec();
        model.params_mut()[i] = find(&info.name, &shape)?;
    }
    for layer in model.layers_mut() {
        let (mean, var) = running_names(layer.index);
        let width = [layer.running_mean.len()];
        layer.running_mean = find(&mean, &width)?.into_data();
        layer.running_var = find(&var, &width)?.into_data();
    }
    Ok(())
}

const PROVENANCE_SUFFIX: &str = "#source";

/// Registry values under their serialized share keys; each is followed by a
/// `<key>#source` record holding `[source_trial, source_metric]`.
pub fn registry_tensors(reg: &ParameterRegistry) -> Entries {
    let mut out = Vec::new();
    for (key, entry) in reg.entries() {
        out.push((
            format!("{}{}", key, PROVENANCE_SUFFIX),
            Tensor::new(&[2], vec![entry.source_trial as f64, entry.source_metric]).expect("vector shape"),
        ));
        out.push((key, entry.value.clone()));
    }
    out
}

pub fn restore_registry(policy: SharingPolicy, entries: &[(String, Tensor)]) -> Result<ParameterRegistry, SnapshotError> {
    let mut reg = ParameterRegistry::new(policy);
    for (name, value) in entries {
        if name.ends_with(PROVENANCE_SUFFIX) {
            continue;
        }
        let source = format!("{}{}", name, PROVENANCE_SUFFIX);
        let (trial, metric) = match entries.iter().find(|(n, _)| *n == source) {
            Some((_, t)) if t.len() == 2 => (t.data()[0] as usize, t.data()[1]),
            _ => return Err(SnapshotError::Mismatch(format!("registry entry `{}` has no provenance", name))),
        };
        reg.insert_serialized(
            name,
            RegistryEntry {
                value: value.clone(),
                source_trial: trial,
                source_metric: metric,
            },
        )?;
    }
    Ok(reg)
}

pub fn save_controller(path: &Path, state: &ControllerState) -> Result<(), SnapshotError> {
    save(path, &state.export_tensors()?)
}

pub fn load_controller(path: &Path) -> Result<ControllerState, SnapshotError> {
    Ok(ControllerState::import_tensors(&load(path)?)?)
}
