//! Pair manifests: one record per line, `source target` optionally
//! followed by 16 row-major numbers of the ground-truth 4x4 transform.
//! `#` starts a comment line. Paths therefore cannot contain whitespace.

use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub gt: Option<RigidTransform>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    load_manifest_bytes(&std::fs::read(path)?)
}

pub fn save_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, manifest_to_string(entries))?;
    Ok(())
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = write!(out, "{} {}", e.source.display(), e.target.display());
        if let Some(gt) = &e.gt {
            for row in gt.to_matrix4() {
                for v in row {
                    let _ = write!(out, " {v}");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn load_manifest_bytes(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse(e.valid_up_to(), "manifest is not valid UTF-8"))?;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 18 {
            return Err(Error::parse_line(
                line_no,
                format!(
                    "expected 2 fields or 2 + 16 transform numbers, got {}",
                    fields.len()
                ),
            ));
        }
        let gt = if fields.len() == 18 {
            let mut m = [[0.0f64; 4]; 4];
            for (k, tok) in fields[2..].iter().enumerate() {
                m[k / 4][k % 4] = tok.parse::<f64>().map_err(|_| {
                    Error::parse_line(line_no, format!("invalid transform number {tok:?}"))
                })?;
            }
            Some(RigidTransform::from_matrix4(&m).map_err(|e| {
                Error::parse_line(line_no, format!("invalid ground-truth transform: {e}"))
            })?)
        } else {
            None
        };
        entries.push(ManifestEntry {
            source: PathBuf::from(fields[0]),
            target: PathBuf::from(fields[1]),
            gt,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn two_records_with_transforms() {
        let t = RigidTransform::new(
            *nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).matrix(),
            Vector3::new(0.5, -1.0, 2.0),
        )
        .unwrap();
        let entries = vec![
            ManifestEntry {
                source: PathBuf::from("a.ply"),
                target: PathBuf::from("b.ply"),
                gt: Some(t.clone()),
            },
            ManifestEntry {
                source: PathBuf::from("c.xyz"),
                target: PathBuf::from("d.xyz"),
                gt: None,
            },
        ];
        let text = manifest_to_string(&entries);
        let back = load_manifest_bytes(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].source, entries[0].source);
        let gt = back[0].gt.as_ref().unwrap();
        assert!((gt.rotation - t.rotation).norm() < 1e-12);
        assert!((gt.translation - t.translation).norm() < 1e-12);
        assert!(back[1].gt.is_none());
    }

    #[test]
    fn comment_only_file_is_empty() {
        let entries = load_manifest_bytes(b"# pairs\n\n# none yet\n").unwrap();
        assert!(entries.is_empty());
    }

    #[test]
    fn wrong_field_count_reports_line() {
        // 15 trailing numbers instead of 16.
        let mut line = String::from("a b");
        for _ in 0..15 {
            line.push_str(" 0");
        }
        let text = format!("# ok\na.ply b.ply\n{line}\n");
        match load_manifest_bytes(text.as_bytes()).unwrap_err() {
            Error::ParseLine { line, .. } => assert_eq!(line, 3),
            other => panic!("expected ParseLine, got {other:?}"),
        }
    }

    #[test]
    fn invalid_rotation_is_rejected() {
        // 16 numbers that are not a rigid transform (zero rotation block).
        let mut line = String::from("a b");
        for k in 0..16 {
            line.push_str(if k == 15 { " 1" } else { " 0" });
        }
        assert!(load_manifest_bytes(format!("{line}\n").as_bytes()).is_err());
        // Identity parses fine.
        let id = RigidTransform::new(Matrix3::identity(), Vector3::zeros()).unwrap();
        let text = manifest_to_string(&[ManifestEntry {
            source: "s".into(),
            target: "t".into(),
            gt: Some(id),
        }]);
        assert!(load_manifest_bytes(text.as_bytes()).is_ok());
    }

    #[test]
    fn bad_number_reports_line() {
        let mut line = String::from("a b");
        for _ in 0..15 {
            line.push_str(" 0");
        }
        line.push_str(" frog");
        match load_manifest_bytes(line.as_bytes()).unwrap_err() {
            Error::ParseLine { line, .. } => assert_eq!(line, 1),
            other => panic!("expected ParseLine, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.txt");
        let entries = vec![ManifestEntry {
            source: "x.ply".into(),
            target: "y.ply".into(),
            gt: None,
        }];
        save_manifest(&path, &entries).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].target, PathBuf::from("y.ply"));
    }
}
