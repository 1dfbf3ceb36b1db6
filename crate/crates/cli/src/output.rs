use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::Failure;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn finish(mut w: impl Write, path: &Path) -> Result<(), Failure> {
    w.flush()
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
    writeln!(w).map_err(|e| Failure::runtime(e.to_string()))?;
    finish(w, path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    let mut w = create(path)?;
    sdl_core::eval::write_jsonl(&mut w, items)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
    finish(w, path)
}

/// Prints `value` as JSON when `json` is set, else the text rendering.
pub fn emit<T: Serialize + ?Sized>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    let res = if json {
        serde_json::to_writer_pretty(&mut out, value)
            .map_err(std::io::Error::from)
            .and_then(|_| writeln!(out))
    } else {
        out.write_all(text().as_bytes())
    };
    res.map_err(|e| Failure::runtime(format!("cannot write to stdout: {e}")))
}
