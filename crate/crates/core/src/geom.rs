//! Point clouds, normalization, farthest-point sampling, ball queries, and
//! positive/negative point-set construction.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Attempts per negative before the exclusion rule gives up.
pub const EXCLUSION_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<u32>,
    pub id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<u32>, id: impl Into<String>) -> Result<Self> {
        let cloud = PointCloud {
            points,
            label,
            id: id.into(),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid(format!("point cloud `{}` is empty", self.id)));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!(
                "point cloud `{}` has a non-finite coordinate at point {i}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

fn lex(a: &Point, b: &Point) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Sorts points lexicographically by coordinate. Encoding starts from this
/// order so that every downstream index choice is independent of input order.
pub fn canonical_order(points: &[Point]) -> Vec<Point> {
    let mut out = points.to_vec();
    out.sort_by(lex);
    out
}

/// Mean computed over per-axis sorted values, so it does not depend on the
/// order of the input points.
pub fn order_free_centroid(points: &[Point]) -> Point {
    let mut c = [0.0; 3];
    let mut axis = Vec::with_capacity(points.len());
    for (k, ck) in c.iter_mut().enumerate() {
        axis.clear();
        axis.extend(points.iter().map(|p| p[k]));
        axis.sort_by(f64::total_cmp);
        *ck = axis.iter().sum::<f64>() / points.len() as f64;
    }
    c
}

/// Centers the bounding box at the origin and scales the largest half-extent
/// to 1. A zero-extent cloud is only translated.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    cloud.validate()?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
    let scale = if half > 0.0 { 1.0 / half } else { 1.0 };
    let points = cloud
        .points
        .iter()
        .map(|p| [0, 1, 2].map(|k| ((p[k] - center[k]) * scale).clamp(-1.0, 1.0)))
        .collect();
    Ok(PointCloud {
        points,
        label: cloud.label,
        id: cloud.id.clone(),
    })
}

/// True when candidate `i` beats incumbent `j`: larger distance, then
/// lexicographically smaller coordinates, then smaller index.
fn fps_better(points: &[Point], d: &[f64], i: usize, j: usize) -> bool {
    match d[i].total_cmp(&d[j]) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match lex(&points[i], &points[j]) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < j,
        },
    }
}

/// Greedy farthest-point sampling of `m` distinct indices.
///
/// The seed is the point farthest from the centroid; each further pick
/// maximizes the distance to the already chosen set.
pub fn farthest_point_sample(points: &[Point], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "farthest point sampling needs 1 <= m <= N, got m = {m}, N = {n}"
        )));
    }
    let c = order_free_centroid(points);
    let from_center: Vec<f64> = points.iter().map(|p| dist2(p, &c)).collect();
    let seed = (1..n).fold(0, |best, i| {
        if fps_better(points, &from_center, i, best) {
            i
        } else {
            best
        }
    });
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed;
    for _ in 0..m {
        chosen.push(current);
        taken[current] = true;
        let cp = points[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = dist2(&points[i], &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| fps_better(points, &min_d, i, b)) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(chosen)
}

fn nearest_index(points: &[Point], center: &Point) -> usize {
    (1..points.len()).fold(0, |best, i| {
        if dist2(&points[i], center) < dist2(&points[best], center) {
            i
        } else {
            best
        }
    })
}

/// Indices within `radius` of `center`, ascending, truncated to `max_n` and
/// padded to exactly `max_n` by repeating the first hit. An empty ball
/// yields the nearest point repeated.
pub fn ball_query(points: &[Point], center: &Point, radius: f64, max_n: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| dist2(p, center) <= r2)
        .map(|(i, _)| i)
        .take(max_n)
        .collect();
    let fill = match out.first() {
        Some(&first) => first,
        None if points.is_empty() => return out,
        None => nearest_index(points, center),
    };
    out.resize(max_n, fill);
    out
}

/// A local region `R(c)` of an input cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub center: Point,
    pub radius: f64,
    pub member_indices: Vec<usize>,
}

impl Region {
    /// All points within `radius` of `center`, without truncation or padding.
    /// May be empty.
    pub fn query(points: &[Point], center: Point, radius: f64) -> Region {
        let r2 = radius * radius;
        let members = points
            .iter()
            .enumerate()
            .filter(|(_, p)| dist2(p, &center) <= r2)
            .map(|(i, _)| i)
            .collect();
        Region {
            center,
            radius,
            member_indices: members,
        }
    }

    /// Like [`Region::query`], but an empty ball falls back to the nearest
    /// point, with the radius widened so that the member stays inside it.
    pub fn query_or_nearest(points: &[Point], center: Point, radius: f64) -> Region {
        let mut region = Self::query(points, center, radius);
        if region.is_empty() && !points.is_empty() {
            let i = nearest_index(points, &center);
            region.radius = radius.max(dist(&points[i], &center));
            region.member_indices.push(i);
        }
        region
    }

    pub fn points(&self, cloud: &[Point]) -> Vec<Point> {
        self.member_indices.iter().map(|&i| cloud[i]).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

/// Draws `k` region members, uniformly, with or without replacement.
pub fn sample_positives(
    points: &[Point],
    region: &Region,
    k: usize,
    with_replacement: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Point>> {
    let m = region.member_indices.len();
    if m == 0 {
        return Err(Error::invalid("cannot sample positives from an empty region"));
    }
    if with_replacement {
        Ok((0..k)
            .map(|_| points[region.member_indices[rng.random_range(0..m)]])
            .collect())
    } else {
        if k > m {
            return Err(Error::invalid(format!(
                "cannot draw {k} positives without replacement from {m} members"
            )));
        }
        Ok(rand::seq::index::sample(rng, m, k)
            .into_iter()
            .map(|j| points[region.member_indices[j]])
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Uniform,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Half-width of the uniform noise.
    pub a: f64,
    /// Standard deviation of the Gaussian noise.
    pub sigma: f64,
    /// Negatives closer than this to any region member are redrawn; 0 disables.
    pub exclusion_radius: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::Uniform,
            a: 1.0,
            sigma: 1.0,
            exclusion_radius: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Uniform if !(self.a >= 0.0 && self.a.is_finite()) => {
                Err(Error::invalid(format!("uniform noise half-width must be >= 0, got {}", self.a)))
            }
            NoiseKind::Gaussian if !(self.sigma > 0.0 && self.sigma.is_finite()) => {
                Err(Error::invalid(format!("gaussian noise sigma must be > 0, got {}", self.sigma)))
            }
            _ if !(self.exclusion_radius >= 0.0) => Err(Error::invalid(format!(
                "exclusion radius must be >= 0, got {}",
                self.exclusion_radius
            ))),
            _ => Ok(()),
        }
    }

    /// One noise vector `ε`.
    pub fn draw(&self, rng: &mut impl Rng) -> Point {
        match self.kind {
            NoiseKind::Uniform if self.a == 0.0 => [0.0; 3],
            NoiseKind::Uniform => [0; 3].map(|_| rng.random_range(-self.a..=self.a)),
            NoiseKind::Gaussian => {
                let normal = Normal::new(0.0, self.sigma).expect("validated sigma");
                [0; 3].map(|_| normal.sample(rng))
            }
        }
    }
}

/// Negatives for one region plus the number that hit the exclusion fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct Negatives {
    pub points: Vec<Point>,
    pub fallbacks: usize,
}

/// Each negative is a pool point (drawn with replacement) plus noise. With a
/// positive exclusion radius, draws landing within that radius of any
/// `region_points` member are redrawn, up to [`EXCLUSION_ATTEMPTS`] times.
pub fn sample_negatives(
    pool: &[Point],
    spec: &NoiseSpec,
    t: usize,
    region_points: &[Point],
    rng: &mut impl Rng,
) -> Result<Negatives> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot sample negatives from an empty pool"));
    }
    spec.validate()?;
    let r2 = spec.exclusion_radius * spec.exclusion_radius;
    let excluded = |p: &Point| region_points.iter().any(|q| dist2(p, q) < r2);
    let mut out = Vec::with_capacity(t);
    let mut fallbacks = 0;
    for _ in 0..t {
        let mut attempt = 0;
        loop {
            let base = pool[rng.random_range(0..pool.len())];
            let eps = spec.draw(rng);
            let p = [base[0] + eps[0], base[1] + eps[1], base[2] + eps[2]];
            attempt += 1;
            if spec.exclusion_radius <= 0.0 || !excluded(&p) {
                out.push(p);
                break;
            }
            if attempt == EXCLUSION_ATTEMPTS {
                fallbacks += 1;
                out.push(p);
                break;
            }
        }
    }
    Ok(Negatives {
        points: out,
        fallbacks,
    })
}
