//! PLY reader (ASCII and binary little-endian) and writers.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    ty: ScalarType,
    is_list: bool,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
    body_line: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line_no += 1;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "unexpected end of file inside header".into(),
            })?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::Parse {
                line: line_no,
                msg: "header is not valid UTF-8".into(),
            })?
            .trim_end_matches('\r')
            .trim();
        pos += end + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let mut tok = line.split_whitespace();
        let Some(kw) = tok.next() else { continue };
        if line_no == 1 {
            if kw != "ply" {
                return Err(err("missing `ply` magic".into()));
            }
            continue;
        }
        match kw {
            "format" => {
                format = Some(match tok.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some(other) => return Err(err(format!("unsupported format `{other}`"))),
                    None => return Err(err("format line without a format".into())),
                });
            }
            "comment" | "obj_info" => {}
            "element" => {
                let name = tok.next().ok_or_else(|| err("element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err("element without a valid count".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element".into()))?;
                let first = tok.next().ok_or_else(|| err("empty property".into()))?;
                let (ty, is_list) = if first == "list" {
                    let _count_ty = tok.next();
                    let item = tok.next().ok_or_else(|| err("list without item type".into()))?;
                    (item, true)
                } else {
                    (first, false)
                };
                let ty = ScalarType::parse(ty).ok_or_else(|| err(format!("unknown property type `{ty}`")))?;
                let name = tok.next().ok_or_else(|| err("property without name".into()))?;
                el.props.push(Property {
                    name: name.to_string(),
                    ty,
                    is_list,
                });
            }
            "end_header" => break,
            other => return Err(err(format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| Error::Parse {
        line: line_no,
        msg: "header has no format line".into(),
    })?;
    Ok(Header {
        format,
        elements,
        body_offset: pos,
        body_line: line_no + 1,
    })
}

/// Reads a PLY file with a `vertex` element holding `x`, `y`, `z`, and an
/// optional `label` property (non-zero marks an anomalous point).
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    parse_ply(&bytes)
}

pub(crate) fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vidx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Parse {
            line: header.body_line - 1,
            msg: "no vertex element".into(),
        })?;
    let vertex = &header.elements[vidx];
    let find = |n: &str| vertex.props.iter().position(|p| p.name == n && !p.is_list);
    let missing = |n: &str| Error::Parse {
        line: header.body_line - 1,
        msg: format!("vertex element lacks property `{n}`"),
    };
    let ix = find("x").ok_or_else(|| missing("x"))?;
    let iy = find("y").ok_or_else(|| missing("y"))?;
    let iz = find("z").ok_or_else(|| missing("z"))?;
    let il = find("label");
    if vertex.count == 0 {
        return Err(Error::Data("N must be ≥ 1".into()));
    }

    let mut points = Vec::with_capacity(vertex.count);
    let mut labels = il.map(|_| Vec::with_capacity(vertex.count));
    let mut row = vec![0.0_f64; vertex.props.len()];

    match header.format {
        Format::Ascii => {
            let body = std::str::from_utf8(&bytes[header.body_offset..]).map_err(|_| Error::Parse {
                line: header.body_line,
                msg: "ASCII body is not valid UTF-8".into(),
            })?;
            let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for el in &header.elements[..vidx] {
                for _ in 0..el.count {
                    lines.next();
                }
            }
            for vi in 0..vertex.count {
                let (off, line) = lines.next().ok_or_else(|| Error::Parse {
                    line: header.body_line + body.lines().count(),
                    msg: format!("file ends before vertex {vi}"),
                })?;
                let line_no = header.body_line + off;
                let mut tok = line.split_whitespace();
                for (slot, prop) in row.iter_mut().zip(&vertex.props) {
                    if prop.is_list {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: "list properties on vertices are not supported".into(),
                        });
                    }
                    *slot = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("bad value for property `{}`", prop.name),
                    })?;
                }
                push_vertex(&row, (ix, iy, iz), il, vi, &mut points, labels.as_mut())?;
            }
        }
        Format::BinaryLe => {
            let mut offset = header.body_offset;
            for el in &header.elements[..vidx] {
                if el.props.iter().any(|p| p.is_list) {
                    return Err(Error::Data(format!(
                        "binary element `{}` with list properties precedes vertices",
                        el.name
                    )));
                }
                offset += el.count * el.props.iter().map(|p| p.ty.size()).sum::<usize>();
            }
            if vertex.props.iter().any(|p| p.is_list) {
                return Err(Error::Data("list properties on vertices are not supported".into()));
            }
            let stride: usize = vertex.props.iter().map(|p| p.ty.size()).sum();
            let needed = offset + stride * vertex.count;
            if bytes.len() < needed {
                return Err(Error::Data(format!(
                    "binary body truncated: need {needed} bytes, have {}",
                    bytes.len()
                )));
            }
            for vi in 0..vertex.count {
                let mut o = offset + vi * stride;
                for (slot, prop) in row.iter_mut().zip(&vertex.props) {
                    *slot = prop.ty.read_le(&bytes[o..]);
                    o += prop.ty.size();
                }
                push_vertex(&row, (ix, iy, iz), il, vi, &mut points, labels.as_mut())?;
            }
        }
    }
    match labels {
        Some(l) => PointCloud::with_labels(points, l),
        None => PointCloud::new(points),
    }
}

fn push_vertex(
    row: &[f64],
    (ix, iy, iz): (usize, usize, usize),
    il: Option<usize>,
    index: usize,
    points: &mut Vec<Vector3<f64>>,
    labels: Option<&mut Vec<bool>>,
) -> Result<()> {
    let p = Vector3::new(row[ix], row[iy], row[iz]);
    if !p.iter().all(|c| c.is_finite()) {
        return Err(Error::Data(format!("non-finite coordinate at vertex {index}")));
    }
    points.push(p);
    if let (Some(l), Some(i)) = (labels, il) {
        l.push(row[i] != 0.0);
    }
    Ok(())
}

/// Blue→red color for `score` on the `[min, max]` range; constant ranges map to blue.
pub fn score_color(score: f64, min: f64, max: f64) -> [u8; 3] {
    let t = if max > min {
        ((score - min) / (max - min)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let to_u8 = |x: f64| (x * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
    [to_u8(t), 0, to_u8(1.0 - t)]
}

fn header(n: usize, extra: &[&str]) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    writeln!(h, "element vertex {n}").unwrap();
    h.push_str("property float x\nproperty float y\nproperty float z\n");
    for e in extra {
        writeln!(h, "property uchar {e}").unwrap();
    }
    h.push_str("end_header\n");
    h
}

/// Writes the cloud as binary PLY (`float` coordinates, `uchar label` when labeled).
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let labels = cloud.labels();
    let extra: &[&str] = if labels.is_some() { &["label"] } else { &[] };
    let mut out = header(cloud.len(), extra).into_bytes();
    for (i, p) in cloud.points().iter().enumerate() {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        if let Some(l) = labels {
            out.push(l[i] as u8);
        }
    }
    write_atomic(path.as_ref(), &out)
}

/// Writes the cloud as binary PLY with per-vertex colors mapping the score range
/// linearly from blue (minimum) to red (maximum).
pub fn save_ply_colored(cloud: &PointCloud, scores: &[f64], path: impl AsRef<Path>) -> Result<()> {
    if scores.len() != cloud.len() {
        return Err(Error::Data(format!(
            "{} scores for {} points",
            scores.len(),
            cloud.len()
        )));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = header(cloud.len(), &["red", "green", "blue"]).into_bytes();
    for (p, &s) in cloud.points().iter().zip(scores) {
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out.extend_from_slice(&score_color(s, min, max));
    }
    write_atomic(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_three_vertices() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";
        let c = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.points()[1], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(c.points()[2], Vector3::new(0.0, 1.0, 0.0));
        assert!(c.labels().is_none());
    }

    #[test]
    fn empty_vertex_element() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let err = parse_ply(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("N must be ≥ 1"), "{err}");
    }

    #[test]
    fn malformed_header_names_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty blob y\nend_header\n";
        match parse_ply(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_names_vertex() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\nnan 0 0\n";
        let err = parse_ply(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("vertex 1"), "{err}");
    }

    #[test]
    fn skips_extra_properties_and_preceding_elements() {
        let text = "ply\nformat ascii 1.0\nelement camera 1\nproperty float f\nelement vertex 2\nproperty double z\nproperty float x\nproperty uchar red\nproperty float y\nproperty uchar label\nend_header\n9\n3 1 255 2 0\n6 4 0 5 1\n";
        let c = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(c.points()[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(c.points()[1], Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(c.labels(), Some(&[false, true][..]));
    }

    #[test]
    fn colors_follow_linear_map() {
        assert_eq!(score_color(0.0, 0.0, 1.0), [0, 0, 255]);
        assert_eq!(score_color(0.5, 0.0, 1.0), [128, 0, 128]);
        assert_eq!(score_color(1.0, 0.0, 1.0), [255, 0, 0]);
        assert_eq!(score_color(3.0, 3.0, 3.0), [0, 0, 255]);
    }

    #[test]
    fn colored_ply_writes_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.0)]).unwrap();
        save_ply_colored(&cloud, &[0.7], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 255]);
        let back = load_ply(&path).unwrap();
        assert_eq!(back.points(), cloud.points());
        assert!(save_ply_colored(&cloud, &[0.1, 0.2], &path).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.0)]).unwrap();
        let err = save_ply_colored(&cloud, &[0.0], "/proc/definitely/not/here.ply").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
