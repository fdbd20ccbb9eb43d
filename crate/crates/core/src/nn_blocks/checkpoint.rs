//! Parameter checkpoints: one tensor dump per parameter plus a
//! `manifest.txt` with `name<TAB>file` lines.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::ndtensor::{load_tensor, save_tensor, Tensor};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.txt";

pub fn save_params<T: Scalar>(ps: &ParamSet<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, p) in ps.iter().enumerate() {
        if p.name.contains(['\t', '\n']) {
            return Err(Error::Format(format!("parameter name {:?} not representable", p.name)));
        }
        let file = format!("p{i:04}.bin");
        save_tensor(&p.value, dir.join(&file))?;
        manifest.push_str(&format!("{}\t{file}\n", p.name));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Loads values into `ps` by name; every parameter must be present with
/// a matching shape.
pub fn load_params<T: Scalar>(ps: &mut ParamSet<T>, dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut entries = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest line {}: missing tab", n + 1)))?;
        entries.insert(name.to_string(), file.to_string());
    }
    let mut loaded: Vec<Tensor<T>> = Vec::with_capacity(ps.len());
    for p in ps.iter() {
        let file = entries
            .get(&p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
        let t: Tensor<T> = load_tensor(dir.join(file))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter {}: checkpoint shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        loaded.push(t);
    }
    for (p, v) in ps.iter_mut().zip(loaded) {
        p.value = v;
    }
    Ok(())
}
