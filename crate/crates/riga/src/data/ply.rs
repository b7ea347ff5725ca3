//! PLY point-cloud I/O, ascii and binary little-endian.
//!
//! Positions are mandatory (`x y z`), normals optional (`nx ny nz`, all
//! three or none), and a `comment viewpoint x y z` line carries the sensor
//! position. Unknown scalar properties are skipped by stride; list
//! properties and non-empty foreign elements are rejected.

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use nalgebra::Vector3;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

impl PlyEncoding {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ascii" => PlyEncoding::Ascii,
            "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown PLY encoding {other:?} (expected ascii or binary_little_endian)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PlyEncoding::Ascii => "ascii",
            PlyEncoding::BinaryLittleEndian => "binary_little_endian",
        }
    }
}

pub fn save_ply(path: impl AsRef<Path>, cloud: &PointCloud, encoding: PlyEncoding) -> Result<()> {
    cloud.validate()?;
    std::fs::write(path, ply_to_bytes(cloud, encoding))?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    load_ply_bytes(&std::fs::read(path)?)
}

/// Serializes a cloud. Ascii uses shortest round-trip float formatting, so
/// both encodings preserve double precision exactly.
pub fn ply_to_bytes(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let with_normals = cloud.normals.is_some();
    let mut header = String::new();
    header.push_str("ply\n");
    let _ = writeln!(header, "format {} 1.0", encoding.name());
    if let Some(vp) = &cloud.viewpoint {
        let _ = writeln!(header, "comment viewpoint {} {} {}", vp.x, vp.y, vp.z);
    }
    let _ = writeln!(header, "element vertex {}", cloud.len());
    for name in ["x", "y", "z"] {
        let _ = writeln!(header, "property double {name}");
    }
    if with_normals {
        for name in ["nx", "ny", "nz"] {
            let _ = writeln!(header, "property double {name}");
        }
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    let normals = cloud.normals.as_deref().unwrap_or(&[]);
    match encoding {
        PlyEncoding::Ascii => {
            let mut body = String::new();
            for (i, p) in cloud.points.iter().enumerate() {
                let _ = write!(body, "{} {} {}", p.x, p.y, p.z);
                if with_normals {
                    let n = &normals[i];
                    let _ = write!(body, " {} {} {}", n.x, n.y, n.z);
                }
                body.push('\n');
            }
            out.extend_from_slice(body.as_bytes());
        }
        PlyEncoding::BinaryLittleEndian => {
            for (i, p) in cloud.points.iter().enumerate() {
                for c in 0..3 {
                    out.extend_from_slice(&p[c].to_le_bytes());
                }
                if with_normals {
                    let n = &normals[i];
                    for c in 0..3 {
                        out.extend_from_slice(&n[c].to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    F32,
    F64,
    Other(usize),
}

impl Scalar {
    fn from_name(name: &str) -> Option<Scalar> {
        Some(match name {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "char" | "int8" | "uchar" | "uint8" => Scalar::Other(1),
            "short" | "int16" | "ushort" | "uint16" => Scalar::Other(2),
            "int" | "int32" | "uint" | "uint32" => Scalar::Other(4),
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
            Scalar::Other(n) => n,
        }
    }
}

#[derive(Debug)]
struct Header {
    encoding: PlyEncoding,
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
    viewpoint: Option<Vector3<f64>>,
    body_start: usize,
}

/// Reads one `\n`-terminated header line starting at `pos`, tolerating a
/// trailing `\r`. Returns the trimmed text and the offset just past it.
fn header_line(bytes: &[u8], pos: usize) -> Result<(&str, usize)> {
    if pos >= bytes.len() {
        return Err(Error::parse(pos, "unexpected end of header"));
    }
    let rest = &bytes[pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(bytes.len(), "header line without newline"))?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| Error::parse(pos, "header is not valid UTF-8"))?;
    Ok((line.trim_end_matches('\r'), pos + end + 1))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let (magic, mut pos) = header_line(bytes, 0)?;
    if magic != "ply" {
        return Err(Error::parse(0, format!("expected \"ply\" magic, got {magic:?}")));
    }
    let mut encoding = None;
    let mut viewpoint = None;
    let mut vertex_count: Option<usize> = None;
    // Count of the element whose property lines we are currently reading;
    // only the vertex element may carry data.
    let mut in_vertex_element = false;
    let mut properties = Vec::new();

    loop {
        let line_start = pos;
        let (line, next) = header_line(bytes, pos)?;
        pos = next;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("comment") => {
                let rest: Vec<&str> = tokens.collect();
                if rest.len() == 4 && rest[0] == "viewpoint" {
                    let mut v = [0.0; 3];
                    let mut ok = true;
                    for (i, t) in rest[1..].iter().enumerate() {
                        match t.parse::<f64>() {
                            Ok(x) => v[i] = x,
                            Err(_) => ok = false,
                        }
                    }
                    if ok {
                        viewpoint = Some(Vector3::new(v[0], v[1], v[2]));
                    }
                }
            }
            Some("format") => {
                let kind = tokens
                    .next()
                    .ok_or_else(|| Error::parse(line_start, "format line missing encoding"))?;
                encoding = Some(PlyEncoding::parse(kind).map_err(|_| {
                    Error::parse(line_start, format!("unsupported PLY format {kind:?}"))
                })?);
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::parse(line_start, "element line missing name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::parse(line_start, "element line missing count"))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(Error::parse(line_start, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    in_vertex_element = true;
                } else {
                    if count > 0 {
                        return Err(Error::parse(
                            line_start,
                            format!("unsupported element {name:?} with {count} entries"),
                        ));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    continue;
                }
                let kind = tokens
                    .next()
                    .ok_or_else(|| Error::parse(line_start, "property line missing type"))?;
                if kind == "list" {
                    return Err(Error::parse(
                        line_start,
                        "list properties on vertices are not supported",
                    ));
                }
                let scalar = Scalar::from_name(kind).ok_or_else(|| {
                    Error::parse(line_start, format!("unknown property type {kind:?}"))
                })?;
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::parse(line_start, "property line missing name"))?;
                properties.push((name.to_string(), scalar));
            }
            Some("end_header") => break,
            Some("ply") => return Err(Error::parse(line_start, "duplicate ply magic")),
            Some(other) => {
                return Err(Error::parse(
                    line_start,
                    format!("unknown header keyword {other:?}"),
                ))
            }
            None => {}
        }
    }

    let encoding =
        encoding.ok_or_else(|| Error::parse(pos, "header has no format declaration"))?;
    let vertex_count =
        vertex_count.ok_or_else(|| Error::parse(pos, "header has no vertex element"))?;
    Ok(Header {
        encoding,
        vertex_count,
        properties,
        viewpoint,
        body_start: pos,
    })
}

/// Property indices of the coordinate and normal columns. Coordinates must
/// be float or double; normals are all-or-nothing.
fn column_layout(header: &Header) -> Result<([usize; 3], Option<[usize; 3]>)> {
    let find = |name: &str| -> Option<usize> {
        header.properties.iter().position(|(n, _)| n == name)
    };
    let mut coords = [0usize; 3];
    for (i, name) in ["x", "y", "z"].iter().enumerate() {
        let idx = find(name).ok_or_else(|| {
            Error::parse(
                header.body_start,
                format!("vertex element has no {name} property"),
            )
        })?;
        if matches!(header.properties[idx].1, Scalar::Other(_)) {
            return Err(Error::parse(
                header.body_start,
                format!("property {name} must be float or double"),
            ));
        }
        coords[i] = idx;
    }
    let normal_hits: Vec<Option<usize>> = ["nx", "ny", "nz"].iter().map(|n| find(n)).collect();
    let present = normal_hits.iter().filter(|h| h.is_some()).count();
    let normals = match present {
        0 => None,
        3 => {
            let mut ns = [0usize; 3];
            for (i, hit) in normal_hits.iter().enumerate() {
                let idx = hit.unwrap();
                if matches!(header.properties[idx].1, Scalar::Other(_)) {
                    return Err(Error::parse(
                        header.body_start,
                        "normal properties must be float or double".to_string(),
                    ));
                }
                ns[i] = idx;
            }
            Some(ns)
        }
        _ => {
            return Err(Error::parse(
                header.body_start,
                "normals require all three of nx, ny, nz".to_string(),
            ))
        }
    };
    Ok((coords, normals))
}

pub fn load_ply_bytes(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let (coords, normal_cols) = column_layout(&header)?;
    let mut points = Vec::with_capacity(header.vertex_count.min(1 << 20));
    let mut normals = normal_cols.map(|_| Vec::with_capacity(header.vertex_count.min(1 << 20)));

    match header.encoding {
        PlyEncoding::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            let expected = stride * header.vertex_count;
            let actual = bytes.len() - header.body_start;
            if actual < expected {
                return Err(Error::parse(
                    bytes.len(),
                    format!("truncated vertex payload: expected {expected} bytes, found {actual}"),
                ));
            }
            let mut offsets = Vec::with_capacity(header.properties.len());
            let mut acc = 0;
            for (_, scalar) in &header.properties {
                offsets.push((acc, *scalar));
                acc += scalar.size();
            }
            let read_at = |row: &[u8], prop: usize| -> f64 {
                let (off, scalar) = offsets[prop];
                match scalar {
                    Scalar::F32 => {
                        f32::from_le_bytes(row[off..off + 4].try_into().unwrap()) as f64
                    }
                    Scalar::F64 => f64::from_le_bytes(row[off..off + 8].try_into().unwrap()),
                    Scalar::Other(_) => unreachable!("validated float-typed columns"),
                }
            };
            for i in 0..header.vertex_count {
                let row = &bytes[header.body_start + i * stride..header.body_start + (i + 1) * stride];
                points.push(Vector3::new(
                    read_at(row, coords[0]),
                    read_at(row, coords[1]),
                    read_at(row, coords[2]),
                ));
                if let (Some(cols), Some(ns)) = (normal_cols, normals.as_mut()) {
                    ns.push(Vector3::new(
                        read_at(row, cols[0]),
                        read_at(row, cols[1]),
                        read_at(row, cols[2]),
                    ));
                }
            }
        }
        PlyEncoding::Ascii => {
            let mut pos = header.body_start;
            for i in 0..header.vertex_count {
                let line_start = pos;
                let (line, next) = header_line(bytes, pos).map_err(|_| {
                    Error::parse(
                        line_start,
                        format!(
                            "truncated ascii payload: expected {} vertices, found {i}",
                            header.vertex_count
                        ),
                    )
                })?;
                pos = next;
                let tokens: Vec<&str> = line.split_whitespace().collect();
                if tokens.len() != header.properties.len() {
                    return Err(Error::parse(
                        line_start,
                        format!(
                            "vertex line has {} fields, header declares {}",
                            tokens.len(),
                            header.properties.len()
                        ),
                    ));
                }
                let parse = |prop: usize| -> Result<f64> {
                    tokens[prop].parse::<f64>().map_err(|_| {
                        Error::parse(
                            line_start,
                            format!("invalid number {:?}", tokens[prop]),
                        )
                    })
                };
                points.push(Vector3::new(
                    parse(coords[0])?,
                    parse(coords[1])?,
                    parse(coords[2])?,
                ));
                if let (Some(cols), Some(ns)) = (normal_cols, normals.as_mut()) {
                    ns.push(Vector3::new(parse(cols[0])?, parse(cols[1])?, parse(cols[2])?));
                }
            }
        }
    }

    let mut cloud = PointCloud::new(points);
    cloud.normals = normals;
    cloud.viewpoint = header.viewpoint;
    cloud.validate()?;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cloud(with_normals: bool, with_viewpoint: bool) -> PointCloud {
        let mut cloud = PointCloud::new(vec![
            Vector3::new(0.1, -2.5, 3.75),
            Vector3::new(1.0 / 3.0, 2.0f64.sqrt(), -0.0625),
            Vector3::new(1e-17, 4.0e12, -7.25),
        ]);
        if with_normals {
            cloud.normals = Some(vec![
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, -1.0),
            ]);
        }
        if with_viewpoint {
            cloud.viewpoint = Some(Vector3::new(3.0, -1.0, 0.5));
        }
        cloud
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let cloud = sample_cloud(true, true);
        let bytes = ply_to_bytes(&cloud, PlyEncoding::BinaryLittleEndian);
        let back = load_ply_bytes(&bytes).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.normals, cloud.normals);
        assert_eq!(back.viewpoint, cloud.viewpoint);
    }

    #[test]
    fn ascii_round_trip_is_bit_exact() {
        // Shortest round-trip formatting makes ascii exact for doubles too.
        let cloud = sample_cloud(true, false);
        let bytes = ply_to_bytes(&cloud, PlyEncoding::Ascii);
        let back = load_ply_bytes(&bytes).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.normals, cloud.normals);
        assert_eq!(back.viewpoint, None);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let cloud = sample_cloud(false, true);
        save_ply(&path, &cloud, PlyEncoding::BinaryLittleEndian).unwrap();
        let back = load_ply(&path).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.viewpoint, cloud.viewpoint);
    }

    #[test]
    fn handwritten_ascii_with_normals() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property float nx\nproperty float ny\nproperty float nz\n\
                    end_header\n\
                    0 0 0 1 0 0\n1 0 0 0 1 0\n0 1 0 0 0 1\n";
        let cloud = load_ply_bytes(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 3);
        for n in cloud.normals.as_ref().unwrap() {
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_properties_are_skipped() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n\
                          property uchar intensity\nproperty double x\nproperty double y\n\
                          property double z\nproperty int label\nend_header\n"
            .to_vec();
        for (i, p) in [[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]].iter().enumerate() {
            bytes.push(i as u8 + 10);
            for c in p {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
            bytes.extend_from_slice(&(i as i32).to_le_bytes());
        }
        let cloud = load_ply_bytes(&bytes).unwrap();
        assert_eq!(cloud.points[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.points[1], Vector3::new(4.0, 5.0, 6.0));
        assert!(cloud.normals.is_none());
    }

    #[test]
    fn float32_positions_parse() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n\
                          property float x\nproperty float y\nproperty float z\nend_header\n"
            .to_vec();
        for c in [1.5f32, -2.25, 0.125] {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        let cloud = load_ply_bytes(&bytes).unwrap();
        assert_eq!(cloud.points[0], Vector3::new(1.5, -2.25, 0.125));
    }

    #[test]
    fn truncated_binary_payload_names_byte_counts() {
        let cloud = sample_cloud(false, false);
        let mut bytes = ply_to_bytes(&cloud, PlyEncoding::BinaryLittleEndian);
        bytes.truncate(bytes.len() - 5);
        let err = load_ply_bytes(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 72 bytes"), "{msg}");
        assert!(msg.contains("found 67"), "{msg}");
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(load_ply_bytes(b"plx\n").is_err());
        assert!(load_ply_bytes(b"ply\nformat big_endian 1.0\nend_header\n").is_err());
        // No vertex element.
        assert!(load_ply_bytes(b"ply\nformat ascii 1.0\nend_header\n").is_err());
        // Missing z property.
        assert!(load_ply_bytes(
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n"
        )
        .is_err());
        // Foreign element with data.
        assert!(load_ply_bytes(
            b"ply\nformat ascii 1.0\nelement face 2\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
        )
        .is_err());
        // List property on vertices.
        assert!(load_ply_bytes(
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty list uchar int vertex_indices\nend_header\n"
        )
        .is_err());
        // Partial normals.
        assert!(load_ply_bytes(
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nend_header\n0 0 0 1\n"
        )
        .is_err());
        // Header cut off mid-stream.
        assert!(load_ply_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n").is_err());
    }

    #[test]
    fn parse_errors_carry_byte_offsets() {
        let err = load_ply_bytes(b"ply\nformat nonsense 1.0\nend_header\n").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 4),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn ascii_bad_number_and_field_count() {
        let base = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(load_ply_bytes(format!("{base}1 2 oops\n").as_bytes()).is_err());
        assert!(load_ply_bytes(format!("{base}1 2\n").as_bytes()).is_err());
        assert!(load_ply_bytes(base.as_bytes()).is_err());
    }

    #[test]
    fn viewpoint_comment_round_trips() {
        let mut cloud = sample_cloud(false, false);
        cloud.viewpoint = Some(Vector3::new(-1.0 / 3.0, 2.25e-8, 9.0));
        let bytes = ply_to_bytes(&cloud, PlyEncoding::Ascii);
        let back = load_ply_bytes(&bytes).unwrap();
        assert_eq!(back.viewpoint, cloud.viewpoint);
    }
}
