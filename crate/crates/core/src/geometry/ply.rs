//! PLY reader/writer for point clouds.
//!
//! Vertices carry `x y z` as 32-bit floats plus optional feature properties
//! `f0 .. f{D-1}`, also 32-bit floats. Both `ascii` and
//! `binary_little_endian` encodings are supported. Readers consume exactly the
//! bytes of one PLY block so clouds can be embedded in larger files.

use std::io::{BufRead, Write};

use crate::error::format_err;
use crate::geometry::PointCloud;
use crate::linalg::Matrix;
use crate::{Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply<T: Scalar, W: Write>(pc: &PointCloud<T>, enc: PlyEncoding, w: &mut W) -> Result<()> {
    let dim = pc.features().map_or(0, Matrix::cols);
    let fmt = match enc {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {fmt} 1.0\nelement vertex {}\n", pc.len());
    for axis in ["x", "y", "z"] {
        header.push_str(&format!("property float {axis}\n"));
    }
    for d in 0..dim {
        header.push_str(&format!("property float f{d}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    for (i, p) in pc.points().iter().enumerate() {
        let feats = pc.features().map(|f| f.row(i)).unwrap_or(&[]);
        let values = p.iter().chain(feats).map(|v| v.as_f64() as f32);
        match enc {
            PlyEncoding::Ascii => {
                let line: Vec<String> = values.map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_ply<T: Scalar, R: BufRead>(r: &mut R) -> Result<PointCloud<T>> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(format_err("ply", "unexpected end of header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next_line(r)? != "ply" {
        return Err(format_err("ply", "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        let l = next_line(r)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => encoding = Some(PlyEncoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(PlyEncoding::BinaryLittleEndian),
            ["format", other, ..] => {
                return Err(format_err("ply", format!("unsupported format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| format_err("ply", "bad vertex count"))?)
            }
            ["element", other, ..] => {
                return Err(format_err("ply", format!("unsupported element {other}")))
            }
            ["property", "float" | "float32", name] => props.push((*name).to_string()),
            ["property", ty, name] => {
                return Err(format_err("ply", format!("property {name} has unsupported type {ty}")))
            }
            _ => return Err(format_err("ply", format!("unrecognized header line '{l}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| format_err("ply", "missing format line"))?;
    let count = count.ok_or_else(|| format_err("ply", "missing vertex element"))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(format_err("ply", "first properties must be x y z"));
    }
    let dim = props.len() - 3;
    for (d, name) in props[3..].iter().enumerate() {
        if *name != format!("f{d}") {
            return Err(format_err("ply", format!("expected feature property f{d}, found {name}")));
        }
    }
    let width = props.len();
    let mut values = vec![0f32; count * width];
    match encoding {
        PlyEncoding::Ascii => {
            let mut s = String::new();
            for row in values.chunks_exact_mut(width) {
                s.clear();
                if r.read_line(&mut s)? == 0 {
                    return Err(format_err("ply", "truncated vertex list"));
                }
                let mut toks = s.split_whitespace();
                for v in row.iter_mut() {
                    *v = toks
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| format_err("ply", "bad vertex value"))?;
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut buf = [0u8; 4];
            for v in values.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| format_err("ply", "truncated binary vertex data"))?;
                *v = f32::from_le_bytes(buf);
            }
        }
    }
    let to_t = |v: f32| T::lit(v as f64);
    let points = values
        .chunks_exact(width)
        .map(|row| [to_t(row[0]), to_t(row[1]), to_t(row[2])])
        .collect();
    let features = (dim > 0).then(|| {
        let data = values
            .chunks_exact(width)
            .flat_map(|row| row[3..].iter().map(|&v| to_t(v)))
            .collect();
        Matrix::from_vec(count, dim, data)
    });
    PointCloud::with_features(points, features)
}
