//! Whitespace-delimited XYZ text: three columns for positions or six for
//! positions plus normals, consistent across the file. `#` starts a
//! comment line.

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use nalgebra::Vector3;
use std::fmt::Write as _;
use std::path::Path;

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    load_xyz_bytes(&std::fs::read(path)?)
}

pub fn save_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    cloud.validate()?;
    std::fs::write(path, xyz_to_string(cloud))?;
    Ok(())
}

pub fn xyz_to_string(cloud: &PointCloud) -> String {
    let mut out = String::new();
    let normals = cloud.normals.as_deref();
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        if let Some(ns) = normals {
            let n = &ns[i];
            let _ = write!(out, " {} {} {}", n.x, n.y, n.z);
        }
        out.push('\n');
    }
    out
}

pub fn load_xyz_bytes(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse(e.valid_up_to(), "XYZ data is not valid UTF-8"))?;
    let mut points = Vec::new();
    let mut normals: Option<Vec<Vector3<f64>>> = None;
    let mut columns: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse_line(line_no, format!("invalid number {t:?}")))
            })
            .collect::<Result<_>>()?;
        match columns {
            None => {
                if fields.len() != 3 && fields.len() != 6 {
                    return Err(Error::parse_line(
                        line_no,
                        format!("expected 3 or 6 columns, got {}", fields.len()),
                    ));
                }
                columns = Some(fields.len());
                if fields.len() == 6 {
                    normals = Some(Vec::new());
                }
            }
            Some(cols) if fields.len() != cols => {
                return Err(Error::parse_line(
                    line_no,
                    format!("expected {cols} columns, got {}", fields.len()),
                ));
            }
            Some(_) => {}
        }
        points.push(Vector3::new(fields[0], fields[1], fields[2]));
        if let Some(ns) = normals.as_mut() {
            ns.push(Vector3::new(fields[3], fields[4], fields[5]));
        }
    }

    let mut cloud = PointCloud::new(points);
    cloud.normals = normals;
    cloud.validate()?;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_column_parse_and_round_trip() {
        let cloud = load_xyz_bytes(b"# header comment\n1 2 3\n-0.5 0.25 1e3\n\n4 5 6\n").unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.points[1], Vector3::new(-0.5, 0.25, 1000.0));
        assert!(cloud.normals.is_none());
        let back = load_xyz_bytes(xyz_to_string(&cloud).as_bytes()).unwrap();
        assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn six_column_carries_normals() {
        let cloud = load_xyz_bytes(b"0 0 0 1 0 0\n1 1 1 0 0 1\n").unwrap();
        let ns = cloud.normals.as_ref().unwrap();
        assert_eq!(ns[1], Vector3::new(0.0, 0.0, 1.0));
        let back = load_xyz_bytes(xyz_to_string(&cloud).as_bytes()).unwrap();
        assert_eq!(back.normals, cloud.normals);
    }

    #[test]
    fn errors_report_line_numbers() {
        let err = load_xyz_bytes(b"1 2 3\n4 5\n").unwrap_err();
        match err {
            Error::ParseLine { line, .. } => assert_eq!(line, 2),
            other => panic!("expected ParseLine, got {other:?}"),
        }
        let err = load_xyz_bytes(b"# c\n\n1 2 nope\n").unwrap_err();
        match err {
            Error::ParseLine { line, .. } => assert_eq!(line, 3),
            other => panic!("expected ParseLine, got {other:?}"),
        }
        // Four columns are never valid.
        assert!(load_xyz_bytes(b"1 2 3 4\n").is_err());
        // Mixing 6 then 3 is inconsistent.
        assert!(load_xyz_bytes(b"0 0 0 1 0 0\n1 1 1\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.xyz");
        let cloud = PointCloud::new(vec![Vector3::new(0.1, 0.2, 0.3)]);
        save_xyz(&path, &cloud).unwrap();
        assert_eq!(load_xyz(&path).unwrap().points, cloud.points);
    }

    #[test]
    fn comment_only_file_is_empty() {
        let cloud = load_xyz_bytes(b"# nothing here\n# still nothing\n").unwrap();
        assert!(cloud.is_empty());
    }
}
