//! Little-endian binary helpers and atomic file output.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::format_err;
use crate::Result;

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4], kind: &'static str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(kind, "truncated before magic"))?;
    if &buf != magic {
        return Err(format_err(kind, format!("bad magic {:?}", String::from_utf8_lossy(&buf))));
    }
    Ok(())
}

macro_rules! read_le {
    ($name:ident, $ty:ty) => {
        pub(crate) fn $name<R: Read>(r: &mut R) -> Result<$ty> {
            let mut buf = [0u8; std::mem::size_of::<$ty>()];
            r.read_exact(&mut buf)
                .map_err(|_| format_err("binary", concat!("truncated ", stringify!($ty))))?;
            Ok(<$ty>::from_le_bytes(buf))
        }
    };
}

read_le!(read_u32, u32);
read_le!(read_u64, u64);
read_le!(read_f32, f32);
read_le!(read_f64, f64);

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| format_err("path", format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        write_atomic(&p, b"abc").unwrap();
        write_atomic(&p, b"defg").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"defg");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
