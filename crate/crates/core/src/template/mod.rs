//! The parametric, part-labeled 3D vehicle template: a watertight triangle
//! mesh with a per-part UV atlas and a small PCA deformation basis.
//!
//! The canonical frame has its origin at the 3D-bbox center of the mean
//! shape, in meters: +x across the vehicle (width), +y along it (length,
//! facing +y), +z up (height). All dense pixel↔point correspondences in the
//! rest of the pipeline refer to this frame.

mod io;
mod procedural;

pub use io::{load_mesh, save_mesh};
pub use procedural::make_procedural_template;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

/// Number of named parts on the template.
pub const PART_COUNT: usize = 18;
/// Atlas cells are arranged in `ATLAS_COLS` × `ATLAS_ROWS` (part 1 top-left,
/// row-major).
pub const ATLAS_COLS: usize = 6;
pub const ATLAS_ROWS: usize = 3;
/// Number of principal components carried by the procedural template.
pub const COMPONENT_COUNT: usize = 4;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("coefficient vector has length {got}, template expects {expected}")]
    CoefficientLengthMismatch { got: usize, expected: usize },
    #[error("mesh has no vertices")]
    EmptyMesh,
    #[error("{path}:{line}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("part labels missing from mesh: {missing:?}")]
    MissingPartLabels { missing: Vec<u8> },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Names for the 18 geometric part labels (values 1..=18, matching both the
/// per-triangle labels and the atlas cell order).
pub mod parts {
    // Top surface, cycling rear to front:
    pub const HOOD: u8 = 1;
    pub const WINDSHIELD: u8 = 2;
    pub const ROOF: u8 = 3;
    pub const REAR_WINDOW: u8 = 4;
    pub const TRUNK: u8 = 5;
    // Caps and underside:
    pub const FRONT: u8 = 6;
    pub const REAR: u8 = 7;
    pub const BOTTOM: u8 = 8;
    // Left side (-x), rear to front plus the window band:
    pub const L_FENDER: u8 = 9;
    pub const L_FRONT_DOOR: u8 = 10;
    pub const L_REAR_DOOR: u8 = 11;
    pub const L_QUARTER: u8 = 12;
    pub const L_GREENHOUSE: u8 = 13;
    // Right side (+x), mirrored:
    pub const R_FENDER: u8 = 14;
    pub const R_FRONT_DOOR: u8 = 15;
    pub const R_REAR_DOOR: u8 = 16;
    pub const R_QUARTER: u8 = 17;
    pub const R_GREENHOUSE: u8 = 18;
}

/// Part-labeled PCA-deformable mesh with a UV atlas.
///
/// Part seams duplicate vertices (same position, different UV); positions of
/// the duplicates stay identical under PCA deformation because each
/// principal-component displacement is a function of the mean position.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTemplate {
    /// Current vertex positions (equal to `mean_shape` as generated).
    pub vertices: Vec<Vector3<f64>>,
    /// Counter-clockwise (outward-facing) index triples.
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex UV in [0,1]²; each part's UVs stay inside its atlas cell.
    pub uv: Vec<Vector2<f64>>,
    /// Per-triangle part label in 1..=18.
    pub part_label: Vec<u8>,
    /// Base shape the PCA basis displaces.
    pub mean_shape: Vec<Vector3<f64>>,
    /// K per-vertex displacement fields.
    pub principal_components: Vec<Vec<Vector3<f64>>>,
    pub component_count: usize,
}

impl VehicleTemplate {
    /// UV-cell bounds for a part label: `(u_min, v_min, u_max, v_max)`.
    pub fn atlas_cell(part: u8) -> (f64, f64, f64, f64) {
        assert!((1..=PART_COUNT as u8).contains(&part));
        let idx = (part - 1) as usize;
        let col = idx % ATLAS_COLS;
        let row = idx / ATLAS_COLS;
        let cw = 1.0 / ATLAS_COLS as f64;
        let ch = 1.0 / ATLAS_ROWS as f64;
        (
            col as f64 * cw,
            row as f64 * ch,
            (col + 1) as f64 * cw,
            (row + 1) as f64 * ch,
        )
    }

    /// Cheap structural validation used by tests and the mesh loader.
    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.vertices.is_empty() {
            return Err(TemplateError::EmptyMesh);
        }
        let mut seen = [false; PART_COUNT];
        for &label in &self.part_label {
            seen[(label - 1) as usize] = true;
        }
        let missing: Vec<u8> = (1..=PART_COUNT as u8)
            .filter(|&p| !seen[(p - 1) as usize])
            .collect();
        if !missing.is_empty() {
            return Err(TemplateError::MissingPartLabels { missing });
        }
        Ok(())
    }
}

/// PCA coefficients, clamped to ±3 (3-sigma) at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients {
    coeffs: Vec<f64>,
}

impl ShapeCoefficients {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self {
            coeffs: coeffs.into_iter().map(|c| c.clamp(-3.0, 3.0)).collect(),
        }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            coeffs: vec![0.0; k],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Axis-aligned canonical extents: width along x, length along y, height
/// along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dimensions {
    pub w: f64,
    pub h: f64,
    pub l: f64,
}

/// Apply the PCA basis: `mean_shape + Σ coeffs[i] · pc[i]`.
pub fn deform(
    t: &VehicleTemplate,
    c: &ShapeCoefficients,
) -> Result<Vec<Vector3<f64>>, TemplateError> {
    if c.len() != t.component_count {
        return Err(TemplateError::CoefficientLengthMismatch {
            got: c.len(),
            expected: t.component_count,
        });
    }
    let mut out = t.mean_shape.clone();
    for (coeff, pc) in c.as_slice().iter().zip(&t.principal_components) {
        if *coeff == 0.0 {
            continue;
        }
        for (v, d) in out.iter_mut().zip(pc) {
            *v += *coeff * d;
        }
    }
    Ok(out)
}

/// Axis-aligned extents of a vertex set in the canonical frame.
pub fn canonical_dimensions(vertices: &[Vector3<f64>]) -> Result<Dimensions, TemplateError> {
    if vertices.is_empty() {
        return Err(TemplateError::EmptyMesh);
    }
    let mut min = vertices[0];
    let mut max = vertices[0];
    for v in &vertices[1..] {
        min = min.inf(v);
        max = max.sup(v);
    }
    Ok(Dimensions {
        w: max.x - min.x,
        l: max.y - min.y,
        h: max.z - min.z,
    })
}
