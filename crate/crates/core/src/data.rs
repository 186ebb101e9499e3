//! Synthetic shapes, OFF meshes, surface sampling and the `.pdsc` dataset
//! container.
//!
//! Datasets are held in memory as `f64` and stored on disk as little-endian
//! `f32`:
//!
//! ```text
//! "PDSC"  u32 version  u8 split  u64 seed  u32 clouds  u32 points  u32 classes
//! classes × (u32 byte length, UTF-8 name)
//! clouds  × (u32 label, points × 3 × f32)
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::codec::{put_string, ByteReader};
use crate::error::{Error, Result};
use crate::geom::{normalize_cloud, Point, PointCloud};

pub const PDSC_MAGIC: &[u8; 4] = b"PDSC";
pub const PDSC_VERSION: u32 = 1;
/// Faces with an area at or below this are dropped while parsing.
pub const DEGENERATE_AREA: f64 = 1e-12;

const CYLINDER_RADIUS: f64 = 0.5;
const CYLINDER_HEIGHT: f64 = 1.6;
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.25;
const COORD_JITTER: f64 = 0.01;

/// Mixes a base seed with an index into an independent 64-bit seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Torus => "torus",
        }
    }

    pub fn label(self) -> u32 {
        self as u32
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape class `{s}`")))
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn unit_vector(rng: &mut impl Rng) -> Point {
    loop {
        let v: Point = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// Uniform samples on the untransformed surface of `class`. The cube has edge
/// length 1 and is centred on the origin.
pub fn sample_shape_surface(class: ShapeClass, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| match class {
            ShapeClass::Sphere => unit_vector(rng),
            ShapeClass::Cube => {
                let face = rng.random_range(0..6);
                let axis = face % 3;
                let mut p: Point = [0; 3].map(|_| rng.random_range(-0.5..0.5));
                p[axis] = if face < 3 { 0.5 } else { -0.5 };
                p
            }
            ShapeClass::Cylinder => {
                let (r, h) = (CYLINDER_RADIUS, CYLINDER_HEIGHT);
                let side = 2.0 * PI * r * h;
                let cap = PI * r * r;
                let u = rng.random_range(0.0..side + 2.0 * cap);
                let theta = rng.random_range(0.0..2.0 * PI);
                if u < side {
                    [r * theta.cos(), r * theta.sin(), rng.random_range(-h / 2.0..h / 2.0)]
                } else {
                    let rho = r * rng.random::<f64>().sqrt();
                    let z = if u < side + cap { h / 2.0 } else { -h / 2.0 };
                    [rho * theta.cos(), rho * theta.sin(), z]
                }
            }
            ShapeClass::Torus => loop {
                let u = rng.random_range(0.0..2.0 * PI);
                let v = rng.random_range(0.0..2.0 * PI);
                let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                if rng.random_range(0.0..TORUS_MAJOR + TORUS_MINOR) < ring {
                    break [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()];
                }
            },
        })
        .collect()
}

/// Rotation by `angle` about the unit `axis`.
fn rotate(p: Point, axis: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * p[0] + axis[1] * p[1] + axis[2] * p[2];
    let cross = [
        axis[1] * p[2] - axis[2] * p[1],
        axis[2] * p[0] - axis[0] * p[2],
        axis[0] * p[1] - axis[1] * p[0],
    ];
    [0, 1, 2].map(|i| p[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c))
}

/// A randomly posed, jittered and normalized sample of `class`.
pub fn gen_synthetic(class: ShapeClass, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::invalid("synthetic clouds need at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = sample_shape_surface(class, n_points, &mut rng);
    let axis = unit_vector(&mut rng);
    let angle = rng.random_range(0.0..2.0 * PI);
    let scale = rng.random_range(0.8..=1.2);
    let jitter = Normal::new(0.0, COORD_JITTER).expect("positive sigma");
    let points = raw
        .into_iter()
        .map(|p| rotate(p, axis, angle).map(|c| c * scale + jitter.sample(&mut rng)))
        .collect();
    let cloud = PointCloud::new(points, Some(class.label()), format!("{class}-{seed:016x}"))?;
    normalize_cloud(&cloud)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            c => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn n_points(&self) -> usize {
        self.clouds.first().map_or(0, PointCloud::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_points();
        for c in &self.clouds {
            c.validate()?;
            if c.len() != n {
                return Err(Error::invalid(format!(
                    "cloud `{}` has {} points, expected {n}",
                    c.id,
                    c.len()
                )));
            }
            match c.label {
                Some(l) if (l as usize) < self.class_names.len() => {}
                other => {
                    return Err(Error::invalid(format!(
                        "cloud `{}` has label {other:?} outside {} classes",
                        c.id,
                        self.class_names.len()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<u32> {
        self.clouds.iter().map(|c| c.label.unwrap_or(0)).collect()
    }
}

/// `clouds` synthetic clouds with classes cycling through all four shapes.
pub fn synthetic_dataset(clouds: usize, n_points: usize, seed: u64, split: Split) -> Result<Dataset> {
    let clouds = (0..clouds)
        .map(|i| {
            let class = ShapeClass::ALL[i % ShapeClass::ALL.len()];
            let mut c = gen_synthetic(class, n_points, derive_seed(seed, i as u64))?;
            c.id = format!("{split}-{i:05}-{class}");
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        clouds,
        class_names: ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        split,
        seed,
    })
}

// ---------------------------------------------------------------------------
// meshes

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
    /// Triangles dropped for having (near) zero area.
    pub degenerate_dropped: usize,
}

impl Mesh {
    pub fn triangle_area(&self, face: &[usize; 3]) -> f64 {
        triangle_area(
            &self.vertices[face[0]],
            &self.vertices[face[1]],
            &self.vertices[face[2]],
        )
    }
}

fn triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = u[1] * v[2] - u[2] * v[1];
    let y = u[2] * v[0] - u[0] * v[2];
    let z = u[0] * v[1] - u[1] * v[0];
    0.5 * (x * x + y * y + z * z).sqrt()
}

struct OffLines<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last_line: usize,
}

impl<'a> OffLines<'a> {
    /// Next non-blank line with comments stripped, with its 1-based number.
    fn next(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, line) in self.lines.by_ref() {
            self.last_line = i + 1;
            let body = line.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = body.split_whitespace().collect();
            if !tokens.is_empty() {
                return Some((i + 1, tokens));
            }
        }
        None
    }
}

fn parse_token<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("expected {what}, found `{tok}`"),
    })
}

/// Parses an OFF mesh. Polygons are fan-triangulated and degenerate
/// triangles dropped (and counted).
pub fn parse_off(bytes: &[u8]) -> Result<Mesh> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count(),
        msg: "file is not valid UTF-8".into(),
    })?;
    let mut lines = OffLines {
        lines: text.lines().enumerate(),
        last_line: 0,
    };
    let (hline, htokens) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing OFF header".into(),
    })?;
    let rest = htokens[0].strip_prefix("OFF").ok_or_else(|| Error::Parse {
        line: hline,
        msg: format!("missing OFF header, found `{}`", htokens[0]),
    })?;
    let mut count_tokens: Vec<&str> = Vec::new();
    if !rest.is_empty() {
        count_tokens.push(rest);
    }
    count_tokens.extend_from_slice(&htokens[1..]);
    let count_line = if count_tokens.is_empty() {
        let (l, t) = lines.next().ok_or(Error::Parse {
            line: hline + 1,
            msg: "missing vertex/face counts".into(),
        })?;
        count_tokens = t;
        l
    } else {
        hline
    };
    if count_tokens.len() < 2 {
        return Err(Error::Parse {
            line: count_line,
            msg: "expected vertex and face counts".into(),
        });
    }
    let nv: usize = parse_token(count_tokens[0], count_line, "vertex count")?;
    let nf: usize = parse_token(count_tokens[1], count_line, "face count")?;

    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let (l, t) = lines.next().ok_or_else(|| Error::Parse {
            line: lines.last_line + 1,
            msg: format!("file ends after {i} of {nv} vertices"),
        })?;
        if t.len() < 3 {
            return Err(Error::Parse {
                line: l,
                msg: "vertex needs three coordinates".into(),
            });
        }
        let mut v = [0.0; 3];
        for (d, tok) in v.iter_mut().zip(&t) {
            *d = parse_token(tok, l, "coordinate")?;
        }
        if v.iter().any(|c: &f64| !c.is_finite()) {
            return Err(Error::Parse {
                line: l,
                msg: "non-finite coordinate".into(),
            });
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(nf);
    let mut degenerate = 0;
    for i in 0..nf {
        let (l, t) = lines.next().ok_or_else(|| Error::Parse {
            line: lines.last_line + 1,
            msg: format!("file ends after {i} of {nf} faces"),
        })?;
        let k: usize = parse_token(t[0], l, "face size")?;
        if k < 3 || t.len() < 1 + k {
            return Err(Error::Parse {
                line: l,
                msg: format!("face declares {k} vertices but lists {}", t.len() - 1),
            });
        }
        let idx = t[1..=k]
            .iter()
            .map(|tok| {
                let v: usize = parse_token(tok, l, "vertex index")?;
                if v >= nv {
                    return Err(Error::Parse {
                        line: l,
                        msg: format!("vertex index {v} out of range for {nv} vertices"),
                    });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        for j in 1..k - 1 {
            let tri = [idx[0], idx[j], idx[j + 1]];
            if triangle_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]) > DEGENERATE_AREA {
                faces.push(tri);
            } else {
                degenerate += 1;
            }
        }
    }
    if let Some((l, _)) = lines.next() {
        return Err(Error::Parse {
            line: l,
            msg: format!("content beyond the declared {nv} vertices and {nf} faces"),
        });
    }
    Ok(Mesh {
        vertices,
        faces,
        degenerate_dropped: degenerate,
    })
}

pub fn serialize_off(mesh: &Mesh) -> String {
    let mut out = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    out
}

/// `n` points drawn uniformly over the mesh surface.
pub fn sample_mesh_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.faces.is_empty() {
        return Err(Error::invalid("mesh has no non-degenerate faces to sample"));
    }
    let areas: Vec<f64> = mesh.faces.iter().map(|f| mesh.triangle_area(f)).collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::invalid(format!("face areas: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let f = mesh.faces[pick.sample(&mut rng)];
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            let [a, b, c] = f.map(|i| mesh.vertices[i]);
            [0, 1, 2].map(|i| a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i]))
        })
        .collect();
    PointCloud::new(points, None, "mesh")
}

/// Samples every `.off` file below `root/<class>/` (optionally only within
/// `root/<class>/<split>/`), one class per subdirectory in name order.
pub fn dataset_from_off_dir(
    root: &Path,
    split: Split,
    subdir: Option<&str>,
    n_points: usize,
    seed: u64,
) -> Result<(Dataset, usize)> {
    let mut classes: Vec<_> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    classes.retain(|p| p.file_name().is_some());
    if classes.is_empty() {
        return Err(Error::invalid(format!("no class directories in {}", root.display())));
    }
    let mut clouds = Vec::new();
    let mut class_names = Vec::new();
    let mut dropped = 0;
    for (label, dir) in classes.iter().enumerate() {
        class_names.push(dir.file_name().expect("retained").to_string_lossy().into_owned());
        let base = match subdir {
            Some(s) => dir.join(s),
            None => dir.clone(),
        };
        if !base.is_dir() {
            continue;
        }
        let mut files = Vec::new();
        collect_off_files(&base, &mut files)?;
        for path in files {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mesh = parse_off(&bytes).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse {
                    line,
                    msg: format!("{}: {msg}", path.display()),
                },
                other => other,
            })?;
            dropped += mesh.degenerate_dropped;
            let index = clouds.len() as u64;
            let raw = sample_mesh_surface(&mesh, n_points, derive_seed(seed, index))?;
            let mut cloud = normalize_cloud(&raw)?;
            cloud.label = Some(label as u32);
            cloud.id = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            clouds.push(cloud);
        }
    }
    Ok((
        Dataset {
            clouds,
            class_names,
            split,
            seed,
        },
        dropped,
    ))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn collect_off_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for p in read_dir_sorted(dir)? {
        if p.is_dir() {
            collect_off_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
            out.push(p);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// .pdsc container

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let n = ds.n_points();
    let mut out = Vec::with_capacity(40 + ds.clouds.len() * (4 + 12 * n));
    out.extend_from_slice(PDSC_MAGIC);
    out.extend_from_slice(&PDSC_VERSION.to_le_bytes());
    out.push(ds.split.code());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    for count in [ds.clouds.len(), n, ds.class_names.len()] {
        out.extend_from_slice(&u32::try_from(count).map_err(|_| Error::invalid("dataset too large"))?.to_le_bytes());
    }
    for name in &ds.class_names {
        put_string(&mut out, name);
    }
    for c in &ds.clouds {
        out.extend_from_slice(&c.label.expect("validated").to_le_bytes());
        for p in &c.points {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4).ok() != Some(PDSC_MAGIC.as_slice()) {
        return Err(Error::Format("not a PDSC dataset (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != PDSC_VERSION {
        return Err(Error::Format(format!("unsupported PDSC version {version}")));
    }
    let split = Split::from_code(r.u8()?)?;
    let seed = r.u64()?;
    let (m, n, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let class_names = (0..k).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut clouds = Vec::with_capacity(m.min(1 << 16));
    for i in 0..m {
        let label = r.u32()?;
        if label as usize >= k {
            return Err(Error::Format(format!("cloud {i} has label {label} but only {k} classes")));
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("cloud {i} has non-finite coordinates")));
        }
        clouds.push(PointCloud {
            points,
            label: Some(label),
            id: format!("{split}-{i:05}"),
        });
    }
    r.finish()?;
    Ok(Dataset {
        clouds,
        class_names,
        split,
        seed,
    })
}

pub fn dataset_write(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn dataset_read(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRI: &str = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";

    #[test]
    fn raw_surfaces_lie_on_their_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in sample_shape_surface(ShapeClass::Sphere, 500, &mut rng) {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        for p in sample_shape_surface(ShapeClass::Cube, 500, &mut rng) {
            let m = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((m - 0.5).abs() < 1e-12);
        }
        for p in sample_shape_surface(ShapeClass::Cylinder, 500, &mut rng) {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let on_side = (rho - CYLINDER_RADIUS).abs() < 1e-12 && p[2].abs() <= 0.8;
            let on_cap = (p[2].abs() - 0.8).abs() < 1e-12 && rho <= CYLINDER_RADIUS + 1e-12;
            assert!(on_side || on_cap);
        }
        for p in sample_shape_surface(ShapeClass::Torus, 500, &mut rng) {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let d = ((rho - TORUS_MAJOR).powi(2) + p[2] * p[2]).sqrt();
            assert!((d - TORUS_MINOR).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_mean_is_near_origin() {
        // each coordinate has variance 1/3; 5 standard errors per axis stays under 0.05
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_shape_surface(ShapeClass::Sphere, 2048, &mut rng);
        let mean = [0, 1, 2].map(|i| pts.iter().map(|p| p[i]).sum::<f64>() / 2048.0);
        let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
        assert!(norm <= 0.05, "{norm}");
    }

    #[test]
    fn torus_and_cylinder_sampling_is_area_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        // outer half of the torus (cos v > 0) carries (π R + 2 r)/(2π R) of the area
        let pts = sample_shape_surface(ShapeClass::Torus, n, &mut rng);
        let outer = pts
            .iter()
            .filter(|p| (p[0] * p[0] + p[1] * p[1]).sqrt() > TORUS_MAJOR)
            .count() as f64;
        let expect = (PI * TORUS_MAJOR + 2.0 * TORUS_MINOR) / (2.0 * PI * TORUS_MAJOR);
        let sd = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((outer / n as f64 - expect).abs() < 4.0 * sd);

        let pts = sample_shape_surface(ShapeClass::Cylinder, n, &mut rng);
        let caps = pts.iter().filter(|p| (p[2].abs() - 0.8).abs() < 1e-12).count() as f64;
        let r = CYLINDER_RADIUS;
        let expect = 2.0 * PI * r * r / (2.0 * PI * r * r + 2.0 * PI * r * CYLINDER_HEIGHT);
        let sd = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((caps / n as f64 - expect).abs() < 4.0 * sd);
    }

    #[test]
    fn synthetic_clouds_are_pure_and_normalized() {
        for class in ShapeClass::ALL {
            let a = gen_synthetic(class, 256, 9).unwrap();
            let b = gen_synthetic(class, 256, 9).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.label, Some(class.label()));
            assert!(a.points.iter().flatten().all(|v| v.abs() <= 1.0));
            let m = a.points.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-9);
            assert_ne!(a, gen_synthetic(class, 256, 10).unwrap());
        }
        let ds = synthetic_dataset(10, 64, 1, Split::Train).unwrap();
        assert_eq!(ds.labels(), vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn off_examples() {
        let m = parse_off(TRI.as_bytes()).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        let fused = parse_off(b"OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(fused, m);
        let spaced = parse_off(b"# comment\n\nOFF 3 1 0 # trailing\n0 0 0\n\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(spaced, m);
        let quad = parse_off(b"OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        assert_eq!(quad.faces, vec![[0, 1, 2], [0, 2, 3]]);
        let degenerate = parse_off(b"OFF\n3 1 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n").unwrap();
        assert!(degenerate.faces.is_empty());
        assert_eq!(degenerate.degenerate_dropped, 1);
    }

    #[test]
    fn off_errors_name_lines() {
        let line = |src: &str| match parse_off(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line("PLY\n3 1 0\n"), 1);
        assert_eq!(line("\n# c\nNOPE\n"), 3);
        assert_eq!(line("OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n"), 4);
        assert_eq!(line("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"), 7);
        assert_eq!(line("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n3 0 1 2\n"), 7);
        assert_eq!(line("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5\n"), 6);
    }

    #[test]
    fn off_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vertices: Vec<Point> = (0..20).map(|_| [0; 3].map(|_| rng.random_range(-3.0..3.0))).collect();
        let faces = (0..15)
            .map(|_| {
                let idx = rand::seq::index::sample(&mut rng, 20, 3).into_vec();
                [idx[0], idx[1], idx[2]]
            })
            .collect();
        let mesh = Mesh {
            vertices,
            faces,
            degenerate_dropped: 0,
        };
        assert_eq!(parse_off(serialize_off(&mesh).as_bytes()).unwrap(), mesh);
    }

    fn barycentric(p: &Point, a: &Point, b: &Point, c: &Point) -> (f64, f64) {
        // solves p = a + u (b − a) + v (c − a) in the xy plane
        let (e1, e2) = ([b[0] - a[0], b[1] - a[1]], [c[0] - a[0], c[1] - a[1]]);
        let d = [p[0] - a[0], p[1] - a[1]];
        let det = e1[0] * e2[1] - e1[1] * e2[0];
        ((d[0] * e2[1] - d[1] * e2[0]) / det, (e1[0] * d[1] - e1[1] * d[0]) / det)
    }

    #[test]
    fn surface_sampling_single_triangle() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.5, 1.5, 0.0]],
            faces: vec![[0, 1, 2]],
            degenerate_dropped: 0,
        };
        let n = 10_000;
        let cloud = sample_mesh_surface(&mesh, n, 5).unwrap();
        assert_eq!(cloud, sample_mesh_surface(&mesh, n, 5).unwrap());
        let [a, b, c] = [0, 1, 2].map(|i| mesh.vertices[i]);
        for p in &cloud.points {
            let (u, v) = barycentric(p, &a, &b, &c);
            assert!(u >= -1e-12 && v >= -1e-12 && u + v <= 1.0 + 1e-12);
        }
        // uniform on a triangle: Var(x) = (a² + b² + c² − ab − bc − ca) / 18
        for axis in 0..2 {
            let (x, y, z) = (a[axis], b[axis], c[axis]);
            let var = (x * x + y * y + z * z - x * y - y * z - z * x) / 18.0;
            let centroid = (x + y + z) / 3.0;
            let mean = cloud.points.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            assert!((mean - centroid).abs() < 4.0 * (var / n as f64).sqrt());
        }
    }

    #[test]
    fn surface_sampling_follows_area() {
        let square = parse_off(b"OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        let n = 10_000;
        let cloud = sample_mesh_surface(&square, n, 6).unwrap();
        let lower = cloud.points.iter().filter(|p| p[1] < p[0]).count() as f64;
        assert!((lower - n as f64 / 2.0).abs() <= 3.0 * (n as f64 * 0.25).sqrt());

        // four triangles with areas 1:2:3:4, chi-square with 3 dof at n = 10⁵
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for k in 0..4 {
            let base = vertices.len();
            let x0 = 10.0 * k as f64;
            vertices.extend([[x0, 0.0, 0.0], [x0 + (k + 1) as f64, 0.0, 0.0], [x0, 2.0, 0.0]]);
            faces.push([base, base + 1, base + 2]);
        }
        let mesh = Mesh {
            vertices,
            faces,
            degenerate_dropped: 0,
        };
        let n = 100_000;
        let cloud = sample_mesh_surface(&mesh, n, 7).unwrap();
        let mut counts = [0.0; 4];
        for p in &cloud.points {
            counts[(p[0] / 10.0).floor() as usize] += 1.0;
        }
        let chi2: f64 = (0..4)
            .map(|k| {
                let e = n as f64 * (k + 1) as f64 / 10.0;
                (counts[k] - e).powi(2) / e
            })
            .sum();
        // 99.9th percentile of χ²(3)
        assert!(chi2 < 16.27, "{chi2}");
    }

    #[test]
    fn pdsc_roundtrip_and_errors() {
        let ds = synthetic_dataset(6, 32, 3, Split::Val).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!((back.split, back.seed), (Split::Val, 3));
        for (x, y) in back.clouds.iter().zip(&ds.clouds) {
            assert_eq!(x.label, y.label);
            for (p, q) in x.points.iter().zip(&y.points) {
                for i in 0..3 {
                    assert_eq!(p[i], q[i] as f32 as f64);
                }
            }
        }
        assert_eq!(encode_dataset(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(decode_dataset(&bytes[..2]), Err(Error::Format(_))));

        let empty = Dataset {
            clouds: vec![],
            class_names: vec!["a".into()],
            split: Split::Test,
            seed: 0,
        };
        let back = decode_dataset(&encode_dataset(&empty).unwrap()).unwrap();
        assert_eq!(back, empty);
    }

    #[test]
    fn off_directory_conversion() {
        let dir = tempfile::tempdir().unwrap();
        for (class, count) in [("chair", 2), ("table", 1)] {
            let sub = dir.path().join(class).join("train");
            fs::create_dir_all(&sub).unwrap();
            for i in 0..count {
                fs::write(sub.join(format!("{class}_{i}.off")), TRI).unwrap();
            }
        }
        let (ds, dropped) = dataset_from_off_dir(dir.path(), Split::Train, Some("train"), 50, 1).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(ds.class_names, vec!["chair", "table"]);
        assert_eq!(ds.labels(), vec![0, 0, 1]);
        assert!(ds.clouds.iter().all(|c| c.len() == 50));
    }
}
