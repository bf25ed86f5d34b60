//! Checkpoints: concatenated NBT1 records in `checkpoint.bin` with a text
//! index `checkpoint.idx` of `name role offset bytes` lines.

use std::fs;
use std::path::Path;

use ccam_core::{ParamStore, Role, Tensor};

use crate::error::{CliError, CliResult};
use crate::nbt;

pub const DATA: &str = "checkpoint.bin";
pub const INDEX: &str = "checkpoint.idx";
pub const TEACHER_PREFIX: &str = "teacher/";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor<f32>,
}

pub fn records(store: &ParamStore<f32>, prefix: &str) -> Vec<Record> {
    store
        .iter()
        .map(|(_, p)| Record {
            name: format!("{prefix}{}", p.name),
            role: p.role,
            tensor: Tensor::new(p.value.dims(), p.value.data().to_vec()).expect("same extents"),
        })
        .collect()
}

pub fn save(dir: &Path, records: &[Record]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
    let mut data = Vec::new();
    let mut index = String::new();
    for r in records {
        let bytes = nbt::to_bytes(&r.tensor);
        index.push_str(&format!("{} {} {} {}\n", r.name, r.role, data.len(), bytes.len()));
        data.extend_from_slice(&bytes);
    }
    fs::write(dir.join(DATA), data).map_err(|e| CliError::write(&dir.join(DATA), e))?;
    fs::write(dir.join(INDEX), index).map_err(|e| CliError::write(&dir.join(INDEX), e))
}

pub fn load(dir: &Path) -> CliResult<Vec<Record>> {
    let (ip, dp) = (dir.join(INDEX), dir.join(DATA));
    let index = fs::read_to_string(&ip).map_err(|e| CliError::read(&ip, e))?;
    let data = fs::read(&dp).map_err(|e| CliError::read(&dp, e))?;
    let mut out = Vec::new();
    for (n, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: &str| CliError::input(format!("{}:{}: {m}", ip.display(), n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("expected 'name role offset bytes'"));
        }
        let role: Role = f[1].parse().map_err(|_| bad("unknown role"))?;
        let off: usize = f[2].parse().map_err(|_| bad("bad offset"))?;
        let len: usize = f[3].parse().map_err(|_| bad("bad length"))?;
        let bytes = off.checked_add(len).and_then(|end| data.get(off..end)).ok_or_else(|| bad("record out of range"))?;
        let tensor = nbt::from_bytes(bytes).map_err(|e| bad(&e.to_string()))?;
        out.push(Record { name: f[0].to_string(), role, tensor });
    }
    Ok(out)
}

/// Copies values named `prefix + param name` into `store`, checking role
/// and shape; every parameter must be present.
pub fn restore(store: &mut ParamStore<f32>, records: &[Record], prefix: &str) -> CliResult<()> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        let key = format!("{prefix}{}", p.name);
        let r = records
            .iter()
            .find(|r| r.name == key)
            .ok_or_else(|| CliError::input(format!("checkpoint lacks parameter '{key}'")))?;
        if r.role != p.role || r.tensor.dims() != p.value.dims() {
            return Err(CliError::input(format!(
                "checkpoint parameter '{key}' is {} {:?}, model expects {} {:?}",
                r.role,
                r.tensor.dims(),
                p.role,
                p.value.dims()
            )));
        }
        p.value.data_mut().copy_from_slice(r.tensor.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_restore() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Role::SharedEncoder, Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        store.add("b.bias", Role::Ccam, Tensor::new(&[1], vec![-1.0]).unwrap()).unwrap();
        let mut recs = records(&store, "");
        recs.extend(records(&store, TEACHER_PREFIX));
        save(dir.path(), &recs).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, recs);
        let idx = fs::read_to_string(dir.path().join(INDEX)).unwrap();
        assert!(idx.starts_with("a.weight shared-encoder 0 29\nb.bias ccam 29 13\n"), "{idx}");

        let mut other = store.clone();
        for (_, p) in other.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        restore(&mut other, &back, TEACHER_PREFIX).unwrap();
        for ((_, a), (_, b)) in other.iter().zip(store.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert!(restore(&mut other, &back[..1], "").is_err());
    }
}
