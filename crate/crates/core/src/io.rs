//! File formats: OBJ and ASCII PLY meshes, versioned sample-set JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point3, SampleSet, SampleTag, TriMesh};

pub const SAMPLES_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported {what} version {got} (expected {expected})")]
    Version {
        what: &'static str,
        got: u64,
        expected: u32,
    },
    #[error("invalid sample set: {0}")]
    Samples(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Shortest of fixed or scientific notation with 9 significant digits,
/// trailing zeros removed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

pub fn obj_string(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 40 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", format_sig9(v.x), format_sig9(v.y), format_sig9(v.z));
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

/// Reads `v` and `f` records; polygons are fan-triangulated, texture and
/// normal indices are ignored, negative indices count from the end.
pub fn parse_obj(text: &str) -> Result<TriMesh, FormatError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |message: String| FormatError::Parse { line, message };
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad coordinate {t:?}: {e}"))))
                    .collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(err("vertex needs three coordinates".into()));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|e| err(format!("bad index {t:?}: {e}")))?;
                        let n = vertices.len() as i64;
                        let i = if i < 0 { n + i } else { i - 1 };
                        if i < 0 || i >= n {
                            return Err(err(format!("index {head} out of range")));
                        }
                        Ok(i as u32)
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(err("face needs at least three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(TriMesh::new(vertices, triangles))
}

pub fn ply_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", format_sig9(v.x), format_sig9(v.y), format_sig9(v.z));
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesDocument {
    version: u64,
    points: Vec<[f64; 3]>,
    targets: Vec<f64>,
    tags: Vec<SampleTag>,
}

pub fn samples_to_json(samples: &SampleSet) -> String {
    let doc = SamplesDocument {
        version: SAMPLES_VERSION as u64,
        points: samples.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        targets: samples.targets.clone(),
        tags: samples.tags.clone(),
    };
    serde_json::to_string(&doc).expect("samples serialize")
}

pub fn samples_from_json(text: &str) -> Result<SampleSet, FormatError> {
    let version = peek_version(text)?;
    if version != SAMPLES_VERSION as u64 {
        return Err(FormatError::Version {
            what: "sample set",
            got: version,
            expected: SAMPLES_VERSION,
        });
    }
    let doc: SamplesDocument = serde_json::from_str(text)?;
    let points = doc.points.into_iter().map(Point3::from).collect();
    SampleSet::new(points, doc.targets, doc.tags).map_err(|e| FormatError::Samples(e.to_string()))
}

/// The top-level `version` field of a JSON document, read before the rest
/// of the schema is enforced.
pub fn peek_version(text: &str) -> Result<u64, FormatError> {
    #[derive(Deserialize)]
    struct Versioned {
        version: u64,
    }
    Ok(serde_json::from_str::<Versioned>(text)?.version)
}
