//! Test particle clouds: points scattered uniformly over ellipsoid surfaces.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chebfmm::{AffineMap, Point};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BenchError, Result};

/// Edge length of the bounding cube used by the built-in geometries.
pub const DEFAULT_BOX_SIZE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryKind {
    /// Semi-axes `(B/2, B/2, B/2)`.
    Sphere,
    /// Semi-axes `(B/20, B/2, B/2)`: a 6.4 x 64 x 64 box for `B = 64`.
    Oblate,
    /// Semi-axes `(B/20, B/20, B/2)`.
    Prolate,
    /// Whitespace separated `x y z [w]` lines.
    File(PathBuf),
}

impl GeometryKind {
    pub fn semi_axes(&self, box_size: f64) -> Option<[f64; 3]> {
        let (big, small) = (0.5 * box_size, 0.05 * box_size);
        match self {
            GeometryKind::Sphere => Some([big, big, big]),
            GeometryKind::Oblate => Some([small, big, big]),
            GeometryKind::Prolate => Some([small, small, big]),
            GeometryKind::File(_) => None,
        }
    }
}

impl FromStr for GeometryKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(GeometryKind::File(PathBuf::from(path)));
        }
        match s.to_ascii_lowercase().as_str() {
            "sphere" => Ok(GeometryKind::Sphere),
            "oblate" => Ok(GeometryKind::Oblate),
            "prolate" => Ok(GeometryKind::Prolate),
            _ => Err(BenchError::Usage(format!("unknown geometry '{s}'"))),
        }
    }
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryKind::Sphere => f.write_str("sphere"),
            GeometryKind::Oblate => f.write_str("oblate"),
            GeometryKind::Prolate => f.write_str("prolate"),
            GeometryKind::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Geometry {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    /// Cube containing every point.
    pub bbox: AffineMap,
}

/// `n` points uniform on the surface of the ellipsoid with semi-axes `axes`
/// centred at the origin, and weights uniform in `(0, 1]`.
///
/// Directions uniform on the unit sphere are stretched onto the ellipsoid and
/// accepted with probability proportional to the local area stretch.
pub fn ellipsoid_surface(axes: [f64; 3], n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [a, b, c] = axes;
    let stretch = |u: &Point| {
        ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt()
    };
    let max_stretch = (b * c).max(a * c).max(a * b);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = unit_direction(&mut rng);
        if rng.random::<f64>() * max_stretch <= stretch(&u) {
            out.push([a * u[0], b * u[1], c * u[2]]);
        }
    }
    out
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if r2 > 1e-12 && r2 <= 1.0 {
            let r = r2.sqrt();
            return v.map(|x| x / r);
        }
    }
}

/// Builds a particle set. Generated clouds draw their weights from a second
/// stream derived from `seed`, so points do not depend on the weights.
pub fn gen_geometry(kind: &GeometryKind, n: usize, seed: u64, box_size: f64) -> Result<Geometry> {
    if n == 0 {
        return Err(BenchError::Usage(
            "particle count must be at least 1".into(),
        ));
    }
    if !(box_size > 0.0 && box_size.is_finite()) {
        return Err(BenchError::Usage(format!(
            "box size must be positive, got {box_size}"
        )));
    }
    match kind.semi_axes(box_size) {
        Some(axes) => {
            let points = ellipsoid_surface(axes, n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let weights = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
            Ok(Geometry {
                points,
                weights,
                bbox: AffineMap::new([0.0; 3], 0.5 * box_size)?,
            })
        }
        None => {
            let GeometryKind::File(path) = kind else {
                unreachable!("only files lack semi-axes")
            };
            read_particles(path)
        }
    }
}

/// Reads `x y z [w]` lines; blank lines and `#` comments are skipped and a
/// missing weight defaults to 1.
pub fn read_particles(path: &Path) -> Result<Geometry> {
    let text = std::fs::read_to_string(path)?;
    parse_particles(&text)
}

pub fn parse_particles(text: &str) -> Result<Geometry> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| BenchError::Parse(format!("line {}: {e}", lineno + 1)))?;
        match fields.as_slice() {
            [x, y, z] => {
                points.push([*x, *y, *z]);
                weights.push(1.0);
            }
            [x, y, z, w] => {
                points.push([*x, *y, *z]);
                weights.push(*w);
            }
            _ => {
                return Err(BenchError::Parse(format!(
                    "line {}: expected 3 or 4 numbers, got {}",
                    lineno + 1,
                    fields.len()
                )))
            }
        }
    }
    if points.is_empty() {
        return Err(BenchError::Parse("no particles in input".into()));
    }
    if points
        .iter()
        .flatten()
        .chain(&weights)
        .any(|v| !v.is_finite())
    {
        return Err(BenchError::Parse("non-finite value in input".into()));
    }
    let bbox = bounding_cube(&points)?;
    Ok(Geometry {
        points,
        weights,
        bbox,
    })
}

/// Smallest axis-aligned cube around `points`, padded slightly so that
/// every point is strictly inside.
pub fn bounding_cube(points: &[Point]) -> Result<AffineMap> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let center = std::array::from_fn(|d| 0.5 * (lo[d] + hi[d]));
    let half = (0..3).map(|d| 0.5 * (hi[d] - lo[d])).fold(0.0, f64::max);
    let half = if half > 0.0 { half * (1.0 + 1e-9) } else { 1.0 };
    Ok(AffineMap::new(center, half)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_on_surface() {
        let g = gen_geometry(&GeometryKind::Sphere, 1000, 7, 64.0).unwrap();
        assert_eq!(g.points.len(), 1000);
        for p in &g.points {
            assert!(p.iter().all(|c| c.abs() <= 32.0));
            let e: f64 = p.iter().map(|c| (c / 32.0).powi(2)).sum();
            assert!((e - 1.0).abs() <= 1e-12);
        }
        assert!(g.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn thin_ellipsoids_respect_box() {
        for kind in [GeometryKind::Oblate, GeometryKind::Prolate] {
            let axes = kind.semi_axes(64.0).unwrap();
            let g = gen_geometry(&kind, 500, 1, 64.0).unwrap();
            for p in &g.points {
                let e: f64 = (0..3).map(|d| (p[d] / axes[d]).powi(2)).sum();
                assert!((e - 1.0).abs() <= 1e-12);
                assert!(p[0].abs() <= 3.2 + 1e-12);
            }
        }
    }

    #[test]
    fn single_point_and_determinism() {
        let g = gen_geometry(&GeometryKind::Prolate, 1, 3, 64.0).unwrap();
        assert_eq!(g.points.len(), 1);
        let a = gen_geometry(&GeometryKind::Sphere, 200, 11, 64.0).unwrap();
        let b = gen_geometry(&GeometryKind::Sphere, 200, 11, 64.0).unwrap();
        let bits = |g: &Geometry| {
            g.points
                .iter()
                .flatten()
                .chain(&g.weights)
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert!(gen_geometry(&GeometryKind::Sphere, 0, 1, 64.0).is_err());
    }

    #[test]
    fn surface_density_is_uniform_on_prolate() {
        let g = gen_geometry(&GeometryKind::Prolate, 20000, 5, 64.0).unwrap();
        let pos = g.points.iter().filter(|p| p[0] > 0.0).count() as f64 / 20000.0;
        assert!((pos - 0.5).abs() < 0.02);
        // thin prolate: area density in z ~ sqrt(1 - (z/c)^2), so the middle
        // half of the axis holds ~0.61 of the surface
        let mid = g.points.iter().filter(|p| p[2].abs() < 16.0).count() as f64 / 20000.0;
        assert!((mid - 0.609).abs() < 0.02, "{mid}");
    }

    #[test]
    fn parse_file_format() {
        let g = parse_particles("# header\n0 0 0\n1 2 3 0.5\n\n-1 -1 -1 2\n").unwrap();
        assert_eq!(g.points.len(), 3);
        assert_eq!(g.weights, vec![1.0, 0.5, 2.0]);
        for p in &g.points {
            assert!(g.bbox.inverse(p).is_ok());
        }
        assert!(parse_particles("1 2\n").is_err());
        assert!(parse_particles("").is_err());
        assert!(parse_particles("a b c").is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(
            "sphere".parse::<GeometryKind>().unwrap(),
            GeometryKind::Sphere
        );
        assert_eq!(
            "file:/tmp/x.txt".parse::<GeometryKind>().unwrap(),
            GeometryKind::File("/tmp/x.txt".into())
        );
        assert!("cube".parse::<GeometryKind>().is_err());
    }
}
