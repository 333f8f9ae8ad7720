//! Binary little-endian PLY persistence.
//!
//! Vertex properties, in order: `x y z rot_0..rot_3 scale_0..scale_2 opacity
//! red green blue f_0..f_{D-1}`. Rotation is `(w, x, y, z)`; opacity and scale
//! are stored linearly. `f32` scenes write `float`, `f64` scenes write `double`.
//! Readers accept either and skip unknown scalar properties.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt};
use nalgebra::Vector3;

use super::{FeatureGaussianScene, GaussianPrimitive, SceneError};
use crate::scalar::Scalar;

const FIXED: [&str; 14] = [
    "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity", "red",
    "green", "blue",
];

pub fn save_scene<T: Scalar>(scene: &FeatureGaussianScene<T>, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_scene(scene, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_scene<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureGaussianScene<T>, SceneError> {
    read_scene(&mut BufReader::new(File::open(path)?))
}

pub fn write_scene<T: Scalar, W: Write>(scene: &FeatureGaussianScene<T>, w: &mut W) -> Result<(), SceneError> {
    scene.validate()?;
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    let note = scene.unit_note.replace(['\n', '\r'], " ");
    writeln!(w, "comment unit_note {note}")?;
    writeln!(w, "element vertex {}", scene.len())?;
    for name in FIXED {
        writeln!(w, "property {} {name}", T::PLY_TYPE)?;
    }
    for i in 0..scene.feature_dim {
        writeln!(w, "property {} f_{i}", T::PLY_TYPE)?;
    }
    writeln!(w, "end_header")?;
    for p in &scene.primitives {
        let fixed = [
            p.center.x, p.center.y, p.center.z, p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3],
            p.scale.x, p.scale.y, p.scale.z, p.opacity, p.color.x, p.color.y, p.color.z,
        ];
        for v in fixed.iter().chain(p.feature.iter()) {
            v.write_le(w)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum PropType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PropType {
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

    fn read<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        Ok(match self {
            Self::I8 => r.read_i8()? as f64,
            Self::U8 => r.read_u8()? as f64,
            Self::I16 => r.read_i16::<LittleEndian>()? as f64,
            Self::U16 => r.read_u16::<LittleEndian>()? as f64,
            Self::I32 => r.read_i32::<LittleEndian>()? as f64,
            Self::U32 => r.read_u32::<LittleEndian>()? as f64,
            Self::F32 => r.read_f32::<LittleEndian>()? as f64,
            Self::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

enum Slot {
    Fixed(usize),
    Feature(usize),
    Skip,
}

struct Header {
    count: usize,
    unit_note: Option<String>,
    props: Vec<(PropType, Slot)>,
    feature_dim: usize,
}

fn parse_header<R: BufRead>(r: &mut R) -> Result<Header, SceneError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, SceneError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(SceneError::Header("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next_line(r)? != "ply" {
        return Err(SceneError::Header("missing 'ply' magic".into()));
    }
    let mut count = None;
    let mut unit_note = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut fixed_seen = [false; FIXED.len()];
    let mut feature_ids = Vec::new();
    loop {
        let l = next_line(r)?;
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("binary_little_endian") {
                    return Err(SceneError::Header("only binary_little_endian is supported".into()));
                }
            }
            Some("comment") => {
                if let Some(rest) = l.strip_prefix("comment unit_note ") {
                    unit_note = Some(rest.to_string());
                } else if l == "comment unit_note" {
                    unit_note = Some(String::new());
                }
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().unwrap_or_default();
                let n: usize = tok
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| SceneError::Header(format!("bad element line '{l}'")))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    count = Some(n);
                } else if n > 0 {
                    return Err(SceneError::Header(format!("unsupported non-empty element '{name}'")));
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty = tok.next().unwrap_or_default();
                if ty == "list" {
                    return Err(SceneError::Header("list properties are not supported on vertices".into()));
                }
                let ty = PropType::parse(ty).ok_or_else(|| SceneError::Header(format!("unknown type '{ty}'")))?;
                let name = tok.next().ok_or_else(|| SceneError::Header(format!("bad property '{l}'")))?;
                let slot = if let Some(i) = FIXED.iter().position(|f| *f == name) {
                    if fixed_seen[i] {
                        return Err(SceneError::Header(format!("duplicate property '{name}'")));
                    }
                    fixed_seen[i] = true;
                    Slot::Fixed(i)
                } else if let Some(id) = name.strip_prefix("f_").and_then(|v| v.parse::<usize>().ok()) {
                    feature_ids.push(id);
                    Slot::Feature(id)
                } else {
                    Slot::Skip
                };
                props.push((ty, slot));
            }
            Some("end_header") => break,
            _ => return Err(SceneError::Header(format!("unrecognized header line '{l}'"))),
        }
    }
    let count = count.ok_or_else(|| SceneError::Header("no vertex element".into()))?;
    if let Some(i) = fixed_seen.iter().position(|s| !s) {
        return Err(SceneError::Header(format!("missing property '{}'", FIXED[i])));
    }
    let feature_dim = feature_ids.len();
    let mut sorted = feature_ids.clone();
    sorted.sort_unstable();
    if sorted.iter().enumerate().any(|(i, id)| i != *id) {
        return Err(SceneError::Header(format!(
            "inconsistent feature dimension: feature properties {feature_ids:?} are not f_0..f_{}",
            feature_dim.saturating_sub(1)
        )));
    }
    Ok(Header {
        count,
        unit_note,
        props,
        feature_dim,
    })
}

pub fn read_scene<T: Scalar, R: BufRead>(r: &mut R) -> Result<FeatureGaussianScene<T>, SceneError> {
    let header = parse_header(r)?;
    let mut scene = FeatureGaussianScene::new(header.feature_dim);
    if let Some(note) = header.unit_note {
        scene.unit_note = note;
    }
    scene.primitives.reserve(header.count);
    let mut fixed = [T::zero(); FIXED.len()];
    for index in 0..header.count {
        let mut feature = vec![T::zero(); header.feature_dim];
        for (ty, slot) in &header.props {
            let v = match (ty, slot) {
                (PropType::F32, Slot::Fixed(_) | Slot::Feature(_)) if T::PLY_TYPE == "float" => T::read_le(r),
                (PropType::F64, Slot::Fixed(_) | Slot::Feature(_)) if T::PLY_TYPE == "double" => T::read_le(r),
                _ => ty.read(r).map(T::lit),
            }
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => SceneError::Truncated { index },
                _ => SceneError::Io(e),
            })?;
            match slot {
                Slot::Fixed(i) => fixed[*i] = v,
                Slot::Feature(i) => feature[*i] = v,
                Slot::Skip => {}
            }
        }
        let p = GaussianPrimitive {
            center: Vector3::new(fixed[0], fixed[1], fixed[2]),
            rotation: [fixed[3], fixed[4], fixed[5], fixed[6]],
            scale: Vector3::new(fixed[7], fixed[8], fixed[9]),
            opacity: fixed[10],
            color: Vector3::new(fixed[11], fixed[12], fixed[13]),
            feature,
        };
        p.validate(header.feature_dim)
            .map_err(|reason| SceneError::InvalidRecord { index, reason })?;
        scene.primitives.push(p);
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn random_scene<T: Scalar>(n: usize, d: usize, seed: u64) -> FeatureGaussianScene<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = FeatureGaussianScene::new(d);
        s.unit_note = "meters, z up".into();
        for _ in 0..n {
            let q = nalgebra::UnitQuaternion::from_euler_angles(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            );
            let q = [q.w, q.i, q.j, q.k].map(|v: f64| T::lit(v));
            let l = |rng: &mut ChaCha8Rng, a: f64, b: f64| T::lit(rng.gen_range(a..b));
            s.primitives.push(GaussianPrimitive {
                center: Vector3::new(l(&mut rng, -9.0, 9.0), l(&mut rng, -9.0, 9.0), l(&mut rng, -9.0, 9.0)),
                rotation: q,
                scale: Vector3::new(l(&mut rng, 0.01, 1.0), l(&mut rng, 0.01, 1.0), l(&mut rng, 0.01, 1.0)),
                opacity: l(&mut rng, 0.0, 1.0),
                color: Vector3::new(l(&mut rng, 0.0, 1.0), l(&mut rng, 0.0, 1.0), l(&mut rng, 0.0, 1.0)),
                feature: (0..d).map(|_| l(&mut rng, -3.0, 3.0)).collect(),
            });
        }
        s
    }

    fn round_trip<T: Scalar>(s: &FeatureGaussianScene<T>) -> FeatureGaussianScene<T> {
        let mut buf = Vec::new();
        write_scene(s, &mut buf).unwrap();
        read_scene(&mut Cursor::new(buf)).unwrap()
    }

    #[test]
    fn empty_scene_round_trips() {
        let s = FeatureGaussianScene::<f64>::new(16);
        let back = round_trip(&s);
        assert_eq!(back.feature_dim, 16);
        assert!(back.is_empty());
    }

    #[test]
    fn random_scenes_round_trip_bit_exactly() {
        let s = random_scene::<f64>(1000, 16, 1);
        assert_eq!(round_trip(&s), s);
        let s32 = random_scene::<f32>(200, 8, 2);
        assert_eq!(round_trip(&s32), s32);
    }

    #[test]
    fn f32_file_reads_into_f64_scene() {
        let s32 = random_scene::<f32>(10, 4, 3);
        let mut buf = Vec::new();
        write_scene(&s32, &mut buf).unwrap();
        let s64: FeatureGaussianScene<f64> = read_scene(&mut Cursor::new(buf)).unwrap();
        assert_eq!(s64.cast::<f32>(), s32);
    }

    #[test]
    fn bad_opacity_names_record() {
        let mut s = random_scene::<f64>(10, 4, 4);
        let mut buf = Vec::new();
        write_scene(&s, &mut buf).unwrap();
        // patch record 7's opacity in place
        let header_len = buf.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let rec = (14 + 4) * 8;
        let off = header_len + 7 * rec + 10 * 8;
        buf[off..off + 8].copy_from_slice(&1.5f64.to_le_bytes());
        match read_scene::<f64, _>(&mut Cursor::new(buf)) {
            Err(SceneError::InvalidRecord { index: 7, reason }) => assert!(reason.contains("opacity")),
            other => panic!("unexpected {other:?}"),
        }
        s.primitives[7].opacity = 1.5;
        assert!(matches!(write_scene(&s, &mut Vec::new()), Err(SceneError::InvalidRecord { index: 7, .. })));
    }

    #[test]
    fn header_errors() {
        let bad = b"ply\nformat ascii 1.0\nend_header\n".to_vec();
        assert!(matches!(read_scene::<f64, _>(&mut Cursor::new(bad)), Err(SceneError::Header(_))));
        let mut hdr = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 0\n");
        for f in FIXED {
            hdr.push_str(&format!("property float {f}\n"));
        }
        hdr.push_str("property float f_0\nproperty float f_2\nend_header\n");
        let err = read_scene::<f64, _>(&mut Cursor::new(hdr.into_bytes())).unwrap_err();
        assert!(err.to_string().contains("inconsistent feature dimension"));
    }

    #[test]
    fn truncated_file_names_record() {
        let s = random_scene::<f64>(5, 2, 5);
        let mut buf = Vec::new();
        write_scene(&s, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_scene::<f64, _>(&mut Cursor::new(buf)), Err(SceneError::Truncated { index: 4 })));
    }
}
