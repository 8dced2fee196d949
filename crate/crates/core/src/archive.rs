//! Named-entry containers: a plain directory, or a zip file when the path ends in `.zip`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;

use crate::error::{Error, Result};

fn is_zip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"))
}

/// Reads the named entries, in the order given.
pub(crate) fn read_entries(path: &Path, names: &[&str]) -> Result<Vec<Vec<u8>>> {
    if is_zip(path) {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut archive = zip::ZipArchive::new(file).map_err(|source| Error::Zip {
            path: path.to_path_buf(),
            source,
        })?;
        names
            .iter()
            .map(|name| {
                let mut entry = archive.by_name(name).map_err(|source| Error::Zip {
                    path: path.join(name),
                    source,
                })?;
                let mut buf = Vec::with_capacity(entry.size() as usize);
                entry
                    .read_to_end(&mut buf)
                    .map_err(|e| Error::io(path.join(name), e))?;
                Ok(buf)
            })
            .collect()
    } else {
        names
            .iter()
            .map(|name| {
                let p = path.join(name);
                fs::read(&p).map_err(|e| Error::io(p, e))
            })
            .collect()
    }
}

pub(crate) fn write_entries(path: &Path, entries: &[(&str, &[u8])]) -> Result<()> {
    if is_zip(path) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut zip = zip::ZipWriter::new(file);
        let opts = SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
        let zerr = |source| Error::Zip {
            path: path.to_path_buf(),
            source,
        };
        for (name, data) in entries {
            zip.start_file(*name, opts).map_err(zerr)?;
            zip.write_all(data).map_err(|e| Error::io(path, e))?;
        }
        zip.finish().map_err(zerr)?;
    } else {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        for (name, data) in entries {
            let p = path.join(name);
            fs::write(&p, data).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(())
}

pub(crate) fn f32le_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|x| (x as f32).to_le_bytes()).collect()
}

pub(crate) fn f32le_values(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
}
