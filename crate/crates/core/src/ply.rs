//! Binary little-endian PLY import/export of Gaussian clouds, using the
//! property layout of common splat viewers:
//! `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3`.
//!
//! `f_rest_*` is channel-major, scales are stored as logs and opacity as a logit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::GaussianCloud;
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// 32-bit floats, what viewers expect.
    #[default]
    F32,
    /// 64-bit floats, lossless for checkpoints.
    F64,
}

fn property_names(sh_degree: usize) -> Vec<String> {
    let rest = sh::coeff_count(sh_degree) - 1;
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn row(cloud: &GaussianCloud, i: usize) -> Vec<f64> {
    let k = cloud.sh_count();
    let p = cloud.positions[i];
    let coeffs = cloud.sh(i);
    let mut v = vec![p.x, p.y, p.z, 0.0, 0.0, 0.0, coeffs[0], coeffs[1], coeffs[2]];
    for ch in 0..3 {
        for j in 1..k {
            v.push(coeffs[j * 3 + ch]);
        }
    }
    v.push(cloud.opacity_logits[i]);
    v.extend(cloud.log_scales[i].iter());
    v.extend(cloud.rotations[i]);
    v
}

pub fn write_ply<W: Write>(mut out: W, cloud: &GaussianCloud, precision: Precision) -> Result<()> {
    let ty = match precision {
        Precision::F32 => "float",
        Precision::F64 => "double",
    };
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for name in property_names(cloud.sh_degree) {
        header.push_str(&format!("property {ty} {name}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::new();
    for i in 0..cloud.len() {
        buf.clear();
        for v in row(cloud, i) {
            match precision {
                Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_ply(path: &Path, cloud: &GaussianCloud, precision: Precision) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_ply(std::io::BufWriter::new(f), cloud, precision)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: "ply".into(),
        line,
        message: message.into(),
    }
}

pub fn read_ply<R: Read>(input: R) -> Result<GaussianCloud> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    let mut lineno = 0;
    let mut count = None;
    let mut props: Vec<(String, usize)> = Vec::new();
    loop {
        line.clear();
        lineno += 1;
        if r.read_line(&mut line)? == 0 {
            return Err(parse_err(lineno, "unexpected end of header"));
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["ply"] if lineno == 1 => {}
            _ if lineno == 1 => return Err(parse_err(1, "missing `ply` magic")),
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(parse_err(lineno, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| parse_err(lineno, "bad vertex count"))?);
            }
            ["element", other, ..] => return Err(parse_err(lineno, format!("unsupported element `{other}`"))),
            ["property", ty, name] => {
                let size = match *ty {
                    "float" | "float32" => 4,
                    "double" | "float64" => 8,
                    _ => return Err(parse_err(lineno, format!("unsupported property type `{ty}`"))),
                };
                props.push((name.to_string(), size));
            }
            ["end_header"] => break,
            _ => return Err(parse_err(lineno, format!("unexpected header line `{}`", line.trim_end()))),
        }
    }
    let n = count.ok_or_else(|| parse_err(lineno, "missing vertex element"))?;
    let rest = props.iter().filter(|(p, _)| p.starts_with("f_rest_")).count();
    if rest % 3 != 0 {
        return Err(parse_err(lineno, "f_rest count is not a multiple of 3"));
    }
    let k = rest / 3 + 1;
    let degree = (0..=sh::MAX_SH_DEGREE)
        .find(|d| sh::coeff_count(*d) == k)
        .ok_or_else(|| parse_err(lineno, format!("{rest} f_rest properties match no SH degree")))?;
    let find = |name: &str| {
        props
            .iter()
            .position(|(p, _)| p == name)
            .ok_or_else(|| parse_err(lineno, format!("missing property `{name}`")))
    };
    let idx = |name: String| find(&name);
    let pos_idx = [find("x")?, find("y")?, find("z")?];
    let dc_idx = [find("f_dc_0")?, find("f_dc_1")?, find("f_dc_2")?];
    let rest_idx: Vec<usize> = (0..rest).map(|i| idx(format!("f_rest_{i}"))).collect::<Result<_>>()?;
    let op_idx = find("opacity")?;
    let scale_idx = [find("scale_0")?, find("scale_1")?, find("scale_2")?];
    let rot_idx = [find("rot_0")?, find("rot_1")?, find("rot_2")?, find("rot_3")?];
    let stride: usize = props.iter().map(|(_, s)| s).sum();

    let mut cloud = GaussianCloud::empty(degree);
    let mut buf = vec![0u8; stride];
    let mut vals = vec![0.0; props.len()];
    let mut coeffs = vec![0.0; 3 * k];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(|_| parse_err(lineno, "truncated vertex data"))?;
        let mut off = 0;
        for (j, (_, size)) in props.iter().enumerate() {
            vals[j] = if *size == 4 {
                f32::from_le_bytes(buf[off..off + 4].try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(buf[off..off + 8].try_into().expect("8 bytes"))
            };
            off += size;
        }
        for ch in 0..3 {
            coeffs[ch] = vals[dc_idx[ch]];
            for j in 1..k {
                coeffs[j * 3 + ch] = vals[rest_idx[ch * (k - 1) + j - 1]];
            }
        }
        cloud.push(
            Vector3::from_fn(|a, _| vals[pos_idx[a]]),
            Vector3::from_fn(|a, _| vals[scale_idx[a]]),
            [vals[rot_idx[0]], vals[rot_idx[1]], vals[rot_idx[2]], vals[rot_idx[3]]],
            vals[op_idx],
            &coeffs,
        );
    }
    Ok(cloud)
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    read_ply(f)
}
