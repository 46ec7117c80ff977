//! Named parameter traversal and the checkpoint manifest.
//!
//! A checkpoint directory holds `manifest.txt`, one `name shape file` line per
//! parameter (shape written as `d0xd1x...`), next to one text tensor dump per
//! parameter.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const MANIFEST: &str = "manifest.txt";

/// Anything that owns trainable tensors.
///
/// Only `visit_mut` is required; read-only helpers work on a clone, which is
/// cheap because tensors are reference counted.
pub trait Parameterized: Clone {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone().visit_mut("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    /// Replaces every parameter, in visiting order.
    fn replace_params(&mut self, tensors: &[Tensor]) {
        let mut it = tensors.iter();
        self.visit_mut("", &mut |name, t| {
            *t = it.next().unwrap_or_else(|| panic!("missing tensor for {name}")).clone();
        });
        assert!(it.next().is_none(), "more tensors than parameters");
    }

    /// Copy whose parameters are plain constants (forward passes build no graph).
    fn detached(&self) -> Self {
        let mut m = self.clone();
        m.visit_mut("", &mut |_, t| *t = t.detach());
        m
    }

    /// Copy whose parameters are fresh trainable leaves.
    fn fresh_leaves(&self) -> Self {
        let mut m = self.clone();
        m.visit_mut("", &mut |_, t| *t = t.to_param());
        m
    }

    fn with_precision(&self, precision: Precision) -> Result<Self> {
        let mut m = self.clone();
        let mut err = None;
        m.visit_mut("", &mut |_, t| match t.with_precision(precision) {
            Ok(v) => *t = v,
            Err(e) => err = Some(e),
        });
        err.map_or(Ok(m), Err)
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes the manifest and one tensor dump per parameter into `dir`.
pub fn save_checkpoint<M: Parameterized>(dir: &Path, module: &M) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in module.named_params() {
        let file = format!("{name}.tensor");
        t.save_text(dir.join(&file))?;
        writeln!(manifest, "{name} {} {file}", shape_string(t.shape())).unwrap();
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Reads every manifest entry back into `module`, matching by name and shape.
pub fn load_checkpoint<M: Parameterized>(dir: &Path, module: &mut M) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, file] = parts[..] else {
            return Err(Error::Format(format!("manifest line {}: {line:?}", lineno + 1)));
        };
        entries.insert(name.to_string(), (shape.to_string(), file.to_string()));
    }
    let mut err = None;
    module.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let result = (|| {
            let (shape, file) = entries
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no entry for {name}")))?;
            if *shape != shape_string(t.shape()) {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {shape}, model expects {}",
                    shape_string(t.shape())
                )));
            }
            let loaded = Tensor::load_text(dir.join(file))?;
            loaded.with_precision(t.precision()).map(|v| v.to_param())
        })();
        match result {
            Ok(v) => *t = v,
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}
