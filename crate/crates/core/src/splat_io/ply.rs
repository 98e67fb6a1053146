//! PLY reader/writer for Gaussian splat exports and oriented point clouds.
//!
//! Gaussian files follow the usual 3DGS layout: `x y z`, log-scales
//! `scale_0..2`, quaternion `rot_0..3` (w first) and an opacity logit.
//! Extra properties such as `f_dc_*`, `f_rest_*` or `nx..nz` are ignored.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{FeatureMode, GaussianPrimitive};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    BinaryLittleEndian,
    Ascii,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    Binary { big_endian: bool },
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Format(format!("unknown PLY scalar type {other:?}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("missing end_header".into()))?;
    let mut body_offset = end + END.len();
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) == Some(&b'\n') {
        body_offset += 1;
    }
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("header is not valid text".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::Binary { big_endian: false },
                    "binary_big_endian" => Format::Binary { big_endian: true },
                    other => return Err(Error::Format(format!("unsupported PLY format {other:?}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Format(format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, _name] => elements
                .last_mut()
                .ok_or_else(|| Error::Format("property before any element".into()))?
                .properties
                .push(Property::List {
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Format("property before any element".into()))?
                .properties
                .push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                }),
            _ => return Err(Error::Format(format!("unrecognized header line {line:?}"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| Error::Format("missing format line".into()))?,
        elements,
        body_offset,
    })
}

/// Sequential value source over either encoding.
struct Body<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: Format,
}

impl Body<'_> {
    fn next_token(&mut self) -> Result<&str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("unexpected end of PLY body".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Format("non-text token in ASCII body".into()))
    }

    fn read(&mut self, ty: Scalar) -> Result<f64> {
        match self.format {
            Format::Ascii => {
                let tok = self.next_token()?;
                tok.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number {tok:?}")))
            }
            Format::Binary { big_endian } => {
                let n = ty.size();
                let raw = self
                    .bytes
                    .get(self.pos..self.pos + n)
                    .ok_or_else(|| Error::Format("unexpected end of PLY body".into()))?;
                self.pos += n;
                let mut buf = [0u8; 8];
                buf[..n].copy_from_slice(raw);
                if big_endian {
                    buf[..n].reverse();
                }
                Ok(match ty {
                    Scalar::I8 => buf[0] as i8 as f64,
                    Scalar::U8 => buf[0] as f64,
                    Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
                    Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                    Scalar::F64 => f64::from_le_bytes(buf),
                })
            }
        }
    }

    fn skip_element(&mut self, el: &Element) -> Result<()> {
        for _ in 0..el.count {
            for p in &el.properties {
                match p {
                    Property::Scalar { ty, .. } => {
                        self.read(*ty)?;
                    }
                    Property::List { count, item } => {
                        let n = self.read(*count)? as usize;
                        for _ in 0..n {
                            self.read(*item)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

const GAUSSIAN_FIELDS: [&str; 11] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
];
const POINT_FIELDS: [&str; 6] = ["x", "y", "z", "nx", "ny", "nz"];

fn fields(mode: FeatureMode) -> &'static [&'static str] {
    match mode {
        FeatureMode::Gaussian11 => &GAUSSIAN_FIELDS,
        FeatureMode::PointCloud6 => &POINT_FIELDS,
    }
}

/// Loads one primitive per vertex, applying the on-disk activations.
pub fn load_ply(path: impl AsRef<Path>, mode: FeatureMode) -> Result<Vec<GaussianPrimitive>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_ply(&bytes, mode)
}

/// [`load_ply`] over an in-memory file.
pub fn read_ply(bytes: &[u8], mode: FeatureMode) -> Result<Vec<GaussianPrimitive>> {
    let header = parse_header(bytes)?;
    let mut body = Body {
        bytes: &bytes[header.body_offset..],
        pos: 0,
        format: header.format,
    };
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("no vertex element".into()))?;
    for el in &header.elements[..vertex_pos] {
        body.skip_element(el)?;
    }
    let vertex = &header.elements[vertex_pos];

    let wanted = fields(mode);
    let mut slots = vec![usize::MAX; wanted.len()];
    for (slot, name) in slots.iter_mut().zip(wanted) {
        *slot = vertex
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
            .ok_or_else(|| Error::Format(format!("vertex element lacks field {name:?}")))?;
    }

    let mut row = vec![0f64; vertex.properties.len()];
    let mut out = Vec::with_capacity(vertex.count);
    for v in 0..vertex.count {
        for (value, p) in row.iter_mut().zip(&vertex.properties) {
            *value = match p {
                Property::Scalar { ty, .. } => body.read(*ty)?,
                Property::List { count, item } => {
                    let n = body.read(*count)? as usize;
                    for _ in 0..n {
                        body.read(*item)?;
                    }
                    0.0
                }
            };
        }
        let raw: Vec<f64> = slots.iter().map(|&s| row[s]).collect();
        if let Some(k) = raw.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "vertex {v}: non-finite value in field {:?}",
                wanted[k]
            )));
        }
        out.push(activate(v, &raw, mode)?);
    }
    Ok(out)
}

fn activate(v: usize, raw: &[f64], mode: FeatureMode) -> Result<GaussianPrimitive> {
    let position = [raw[0] as f32, raw[1] as f32, raw[2] as f32];
    match mode {
        FeatureMode::PointCloud6 => Ok(GaussianPrimitive::point(
            position,
            [raw[3] as f32, raw[4] as f32, raw[5] as f32],
        )),
        FeatureMode::Gaussian11 => {
            let scale = [raw[3].exp(), raw[4].exp(), raw[5].exp()];
            if scale.iter().any(|s| !s.is_finite() || *s <= 0.0 || *s as f32 <= 0.0) {
                return Err(Error::Data(format!("vertex {v}: scale overflows after exp")));
            }
            let q = &raw[6..10];
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Data(format!("vertex {v}: zero-length quaternion")));
            }
            let opacity = 1.0 / (1.0 + (-raw[10]).exp());
            Ok(GaussianPrimitive {
                position,
                scale: scale.map(|s| s as f32),
                rotation: [
                    (q[0] / norm) as f32,
                    (q[1] / norm) as f32,
                    (q[2] / norm) as f32,
                    (q[3] / norm) as f32,
                ],
                opacity: opacity as f32,
            })
        }
    }
}

fn deactivate(p: &GaussianPrimitive, mode: FeatureMode) -> Vec<f32> {
    let mut row: Vec<f32> = p.position.to_vec();
    match mode {
        FeatureMode::PointCloud6 => row.extend_from_slice(&p.scale),
        FeatureMode::Gaussian11 => {
            row.extend(p.scale.iter().map(|&s| (s as f64).ln() as f32));
            row.extend_from_slice(&p.rotation);
            let a = (p.opacity as f64).clamp(1e-7, 1.0 - 1e-7);
            row.push((a / (1.0 - a)).ln() as f32);
        }
    }
    row
}

/// Binary little-endian export.
pub fn write_ply(primitives: &[GaussianPrimitive], path: impl AsRef<Path>, mode: FeatureMode) -> Result<()> {
    write_ply_with(primitives, path, mode, PlyEncoding::BinaryLittleEndian)
}

pub fn write_ply_with(
    primitives: &[GaussianPrimitive],
    path: impl AsRef<Path>,
    mode: FeatureMode,
    encoding: PlyEncoding,
) -> Result<()> {
    let path = path.as_ref();
    if primitives.is_empty() {
        return Err(Error::Data("refusing to write an empty PLY".into()));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let fmt = match encoding {
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
        PlyEncoding::Ascii => "ascii",
    };
    write!(w, "ply\nformat {fmt} 1.0\nelement vertex {}\n", primitives.len()).map_err(io)?;
    for name in fields(mode) {
        writeln!(w, "property float {name}").map_err(io)?;
    }
    w.write_all(b"end_header\n").map_err(io)?;
    for p in primitives {
        let row = deactivate(p, mode);
        match encoding {
            PlyEncoding::BinaryLittleEndian => {
                for x in row {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
            PlyEncoding::Ascii => {
                let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
                writeln!(w, "{}", line.join(" ")).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
