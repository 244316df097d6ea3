//! ASCII `.xyz` / `.ply` point clouds and binary `.pgm` (P5) images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_coord(path: &Path, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid number `{tok}`")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

/// Parses whitespace-separated `x y z` lines. Blank lines and `#` comments
/// are skipped; columns after the third are ignored.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, i + 1, format!("expected `x y z`, found `{line}`")));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = parse_coord(path, i + 1, toks[a])?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(parse_err(path, 0, "empty cloud"));
    }
    PointCloud::new(points)
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_xyz(&read_text(path)?, path)
}

/// Formats points with shortest round-trip decimal representation.
pub fn format_xyz(points: &[Point3]) -> String {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn save_xyz(path: impl AsRef<Path>, points: &[Point3]) -> Result<()> {
    write_bytes(path.as_ref(), format_xyz(points).as_bytes())
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
    has_list: bool,
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["format", enc, ..] => {
                if *enc != "ascii" {
                    return Err(Error::UnsupportedEncoding {
                        path: path.display().to_string(),
                        encoding: (*enc).to_string(),
                    });
                }
                saw_format = true;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, i + 1, format!("bad element count `{count}`")))?;
                elements.push(PlyElement {
                    name: (*name).to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, i + 1, "property before any element"))?;
                el.has_list = true;
                el.props.push(toks.last().unwrap_or(&"").to_string());
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, i + 1, "property before any element"))?;
                el.props.push((*name).to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, i + 1, format!("unrecognized header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, 0, "missing `end_header`"));
    }
    if !saw_format {
        return Err(parse_err(path, 0, "missing `format` line"));
    }
    let mut points = Vec::new();
    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                body.next();
            }
            continue;
        }
        if el.has_list {
            return Err(parse_err(path, 0, "list properties on vertices are not supported"));
        }
        let col = |name: &str| {
            el.props
                .iter()
                .position(|p| p == name)
                .ok_or_else(|| parse_err(path, 0, format!("vertex element has no `{name}` property")))
        };
        let cols = [col("x")?, col("y")?, col("z")?];
        for _ in 0..el.count {
            let (i, line) = body
                .next()
                .ok_or_else(|| parse_err(path, 0, "file ends before all vertices were read"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != el.props.len() {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("expected {} values, found {}", el.props.len(), toks.len()),
                ));
            }
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = parse_coord(path, i + 1, toks[cols[a]])?;
            }
            points.push(p);
        }
    }
    if points.is_empty() {
        return Err(parse_err(path, 0, "empty cloud"));
    }
    PointCloud::new(points)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_ply(&read_text(path)?, path)
}

pub fn save_ply(path: impl AsRef<Path>, points: &[Point3]) -> Result<()> {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    s.push_str(&format_xyz(points));
    write_bytes(path.as_ref(), s.as_bytes())
}

/// Loads `.ply` or `.xyz` by extension (anything other than `.ply` is read
/// as xyz).
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => load_ply(path),
        _ => load_xyz(path),
    }
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, 1, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(parse_err(path, 1, format!("expected P5 magic, found `{}`", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| parse_err(path, 1, format!("invalid PGM header value `{s}`")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(parse_err(
            path,
            1,
            format!("only maxval 255 is supported, found {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(parse_err(
            path,
            1,
            format!("expected {} raster bytes, found {}", width * height, raster.len()),
        ));
    }
    Ok(Image::from_bytes(height, width, raster))
}

pub fn save_pgm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(image))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}
