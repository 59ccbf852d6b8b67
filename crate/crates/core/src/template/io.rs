//! Mesh persistence: an OBJ-style text format extended with a per-face part
//! tag, plus a `.pca` sidecar holding the mean shape and the PCA basis.
//!
//! Mesh file grammar (one record per line, `#` starts a comment):
//!   `v <x> <y> <z>`            vertex position, meters
//!   `vt <u> <v>`               vertex UV, paired with `v` by order
//!   `f <a> <b> <c> <part>`     1-based vertex indices + part label 1..=18
//!
//! Sidecar grammar (`<mesh path>.pca`):
//!   `k <component count>` then `n <vertex count>`, followed by `n` lines
//!   `m <x> <y> <z>` (mean shape) and `k*n` lines `p <x> <y> <z>`
//!   (components in order, vertex-major within each component).
//!
//! Floats are printed with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every field bit-for-bit.

use super::{TemplateError, VehicleTemplate, PART_COUNT};
use nalgebra::{Vector2, Vector3};
use std::fmt::Write as _;
use std::path::Path;

pub fn save_mesh(t: &VehicleTemplate, path: &Path) -> Result<(), TemplateError> {
    let mut mesh = String::new();
    let mut pca = String::new();
    for v in &t.vertices {
        writeln!(mesh, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for uv in &t.uv {
        writeln!(mesh, "vt {} {}", uv.x, uv.y).unwrap();
    }
    for (tri, part) in t.triangles.iter().zip(&t.part_label) {
        writeln!(mesh, "f {} {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1, part).unwrap();
    }
    writeln!(pca, "k {}", t.component_count).unwrap();
    writeln!(pca, "n {}", t.mean_shape.len()).unwrap();
    for v in &t.mean_shape {
        writeln!(pca, "m {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for pc in &t.principal_components {
        for v in pc {
            writeln!(pca, "p {} {} {}", v.x, v.y, v.z).unwrap();
        }
    }
    std::fs::write(path, mesh)?;
    std::fs::write(sidecar_path(path), pca)?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<VehicleTemplate, TemplateError> {
    let mesh_text = std::fs::read_to_string(path)?;
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut part_label = Vec::new();
    for (line_no, line) in numbered_records(&mesh_text) {
        let err = |msg: String| parse_error(path, line_no, msg);
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "v" => vertices.push(parse_vec3(&fields[1..]).map_err(err)?),
            "vt" => {
                let n = parse_floats::<2>(&fields[1..]).map_err(err)?;
                uv.push(Vector2::new(n[0], n[1]));
            }
            "f" => {
                let n = parse_floats::<4>(&fields[1..]).map_err(err)?;
                let mut tri = [0u32; 3];
                for (slot, &raw) in tri.iter_mut().zip(&n[..3]) {
                    if raw.fract() != 0.0 || raw < 1.0 || raw > vertices.len() as f64 {
                        return Err(err(format!(
                            "face index {raw} out of range 1..={}",
                            vertices.len()
                        )));
                    }
                    *slot = raw as u32 - 1;
                }
                if n[3].fract() != 0.0 || !(1.0..=PART_COUNT as f64).contains(&n[3]) {
                    return Err(err(format!("part label {} out of range 1..=18", n[3])));
                }
                triangles.push(tri);
                part_label.push(n[3] as u8);
            }
            other => return Err(err(format!("unknown record `{other}`"))),
        }
    }
    if uv.len() != vertices.len() {
        return Err(parse_error(
            path,
            numbered_records(&mesh_text).count(),
            format!("{} vt records for {} vertices", uv.len(), vertices.len()),
        ));
    }

    let pca_path = sidecar_path(path);
    let pca_text = std::fs::read_to_string(&pca_path)?;
    let mut component_count = None;
    let mut vertex_count = None;
    let mut mean_shape = Vec::new();
    let mut flat_pcs = Vec::new();
    for (line_no, line) in numbered_records(&pca_text) {
        let err = |msg: String| parse_error(&pca_path, line_no, msg);
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "k" => component_count = Some(parse_floats::<1>(&fields[1..]).map_err(err)?[0] as usize),
            "n" => vertex_count = Some(parse_floats::<1>(&fields[1..]).map_err(err)?[0] as usize),
            "m" => mean_shape.push(parse_vec3(&fields[1..]).map_err(err)?),
            "p" => flat_pcs.push(parse_vec3(&fields[1..]).map_err(err)?),
            other => return Err(err(format!("unknown record `{other}`"))),
        }
    }
    let k = component_count
        .ok_or_else(|| parse_error(&pca_path, 1, "missing `k` record".into()))?;
    let n = vertex_count.ok_or_else(|| parse_error(&pca_path, 1, "missing `n` record".into()))?;
    if n != vertices.len() || mean_shape.len() != n || flat_pcs.len() != k * n {
        return Err(parse_error(
            &pca_path,
            1,
            format!(
                "sidecar shape mismatch: n={n}, k={k}, mean={}, pcs={}, mesh vertices={}",
                mean_shape.len(),
                flat_pcs.len(),
                vertices.len()
            ),
        ));
    }
    let principal_components = flat_pcs.chunks(n).map(<[_]>::to_vec).collect();

    let t = VehicleTemplate {
        vertices,
        triangles,
        uv,
        part_label,
        mean_shape,
        principal_components,
        component_count: k,
    };
    t.validate()?;
    Ok(t)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".pca");
    os.into()
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn numbered_records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_error(path: &Path, line: usize, msg: String) -> TemplateError {
    TemplateError::ParseError {
        path: path.display().to_string(),
        line,
        msg,
    }
}

fn parse_floats<const N: usize>(fields: &[&str]) -> Result<[f64; N], String> {
    if fields.len() != N {
        return Err(format!("expected {N} fields, found {}", fields.len()));
    }
    let mut out = [0.0; N];
    for (slot, f) in out.iter_mut().zip(fields) {
        *slot = f
            .parse::<f64>()
            .map_err(|e| format!("bad number `{f}`: {e}"))?;
    }
    Ok(out)
}

fn parse_vec3(fields: &[&str]) -> Result<Vector3<f64>, String> {
    let n = parse_floats::<3>(fields)?;
    Ok(Vector3::new(n[0], n[1], n[2]))
}

#[cfg(test)]
mod tests {
    use super::super::make_procedural_template;
    use super::*;

    #[test]
    fn save_load_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("car.mesh");
        let t = make_procedural_template(0);
        save_mesh(&t, &path).unwrap();
        let loaded = load_mesh(&path).unwrap();
        assert_eq!(t, loaded);
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.mesh"), dir.path().join("b.mesh"));
        save_mesh(&make_procedural_template(7), &p1).unwrap();
        save_mesh(&make_procedural_template(7), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(
            std::fs::read(sidecar_path(&p1)).unwrap(),
            std::fs::read(sidecar_path(&p2)).unwrap()
        );
    }

    #[test]
    fn missing_part_label_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("car.mesh");
        let mut t = make_procedural_template(0);
        // Relabel part 18 as part 17 so exactly one label is missing.
        for p in &mut t.part_label {
            if *p == 18 {
                *p = 17;
            }
        }
        save_mesh(&t, &path).unwrap();
        match load_mesh(&path) {
            Err(TemplateError::MissingPartLabels { missing }) => assert_eq!(missing, vec![18]),
            other => panic!("expected MissingPartLabels, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_face_index_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("car.mesh");
        let t = make_procedural_template(0);
        save_mesh(&t, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(&format!("f 1 2 {} 3\n", t.vertices.len() + 5));
        std::fs::write(&path, text).unwrap();
        match load_mesh(&path) {
            Err(TemplateError::ParseError { line, msg, .. }) => {
                assert!(msg.contains("out of range"), "{msg}");
                assert!(line > 0);
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn malformed_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mesh");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv oops 1 1\n").unwrap();
        match load_mesh(&path) {
            Err(TemplateError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }
}
