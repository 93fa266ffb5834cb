//! Synthetic shape generators for desk-scale experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{save_cloud, DatasetManifest, ManifestEntry, PointCloud, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Uniform samples on the unit sphere.
    Sphere,
    /// Uniform samples on the surface of `[-1, 1]³`.
    Cube,
    /// Flat rectangular patch in the z = 0 plane.
    Plane,
    /// A large and a small sphere joined by a bar. Part 0 is the large lobe
    /// side, part 1 the small lobe side.
    Dumbbell,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Sphere => "sphere",
            Generator::Cube => "cube",
            Generator::Plane => "plane",
            Generator::Dumbbell => "dumbbell",
        }
    }

    pub fn generate<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::domain("generator needs at least one point"));
        }
        match self {
            Generator::Sphere => PointCloud::new((0..n).map(|_| unit_vector(rng)).collect(), None),
            Generator::Cube => PointCloud::new((0..n).map(|_| cube_surface(rng)).collect(), None),
            Generator::Plane => {
                let half_y = rng.random_range(0.5..1.0);
                let pts = (0..n)
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-half_y..half_y), 0.0])
                    .collect();
                PointCloud::new(pts, None)
            }
            Generator::Dumbbell => dumbbell(n, rng),
        }
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sphere" => Ok(Generator::Sphere),
            "cube" => Ok(Generator::Cube),
            "plane" => Ok(Generator::Plane),
            "dumbbell" => Ok(Generator::Dumbbell),
            other => Err(Error::config("shapes", format!("unknown generator `{other}`"))),
        }
    }
}

/// Parses a comma-separated generator list.
pub fn parse_shapes(spec: &str) -> Result<Vec<Generator>> {
    let shapes: Vec<Generator> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if shapes.is_empty() {
        return Err(Error::config("shapes", "no generators given"));
    }
    Ok(shapes)
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn cube_surface<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let face = rng.random_range(0..6);
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for (a, v) in p.iter_mut().enumerate() {
        *v = if a == axis { sign } else { rng.random_range(-1.0..1.0) };
    }
    p
}

fn dumbbell<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<PointCloud> {
    const BIG_RADIUS: f64 = 1.0;
    const BIG_CENTER: f64 = -1.6;
    const SMALL_CENTER: f64 = 1.4;
    const BAR_RADIUS: f64 = 0.15;
    let small_radius = rng.random_range(0.5..0.7);
    let bar_start = BIG_CENTER + BIG_RADIUS * 0.95;
    let bar_end = SMALL_CENTER - small_radius * 0.95;
    let split = 0.5 * (bar_start + bar_end);

    let n_big = (n * 11 / 20).max(1);
    let n_small = (n * 6 / 20).max(1).min(n.saturating_sub(n_big).max(1));
    let mut pts = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let p = if i < n_big {
            let u = unit_vector(rng);
            [BIG_CENTER + BIG_RADIUS * u[0], BIG_RADIUS * u[1], BIG_RADIUS * u[2]]
        } else if i < n_big + n_small {
            let u = unit_vector(rng);
            [SMALL_CENTER + small_radius * u[0], small_radius * u[1], small_radius * u[2]]
        } else {
            let x = rng.random_range(bar_start..bar_end);
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            [x, BAR_RADIUS * t.cos(), BAR_RADIUS * t.sin()]
        };
        parts.push(usize::from(p[0] >= split));
        pts.push(p);
    }
    PointCloud::new(pts, Some(parts))
}

/// Output of [`synth_dataset`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: DatasetManifest,
    pub test: Option<DatasetManifest>,
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub files: usize,
}

/// Writes class-balanced clouds and their manifests under `out_dir`.
///
/// Cloud `i` of a split gets class `i mod shapes.len()`.
pub fn synth_dataset<R: Rng + ?Sized>(
    out_dir: &Path,
    shapes: &[Generator],
    n_points: usize,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<SynthOutput> {
    if shapes.is_empty() {
        return Err(Error::config("shapes", "no generators given"));
    }
    if n_train == 0 {
        return Err(Error::config("clouds", "need at least one cloud"));
    }
    if n_points == 0 {
        return Err(Error::config("points", "need at least one point per cloud"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let class_names: Vec<String> = shapes.iter().map(|g| g.name().to_string()).collect();
    let mut write_split = |split: Split, count: usize| -> Result<(DatasetManifest, PathBuf)> {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % shapes.len();
            let cloud = shapes[class].generate(n_points, rng)?;
            let rel = PathBuf::from(split.name()).join(format!("{}_{i:05}.xyz", shapes[class].name()));
            save_cloud(&out_dir.join(&rel), &cloud)?;
            entries.push(ManifestEntry { path: rel, label: class });
        }
        let manifest = DatasetManifest {
            split,
            entries,
            class_names: class_names.clone(),
            root: out_dir.to_path_buf(),
        };
        let path = out_dir.join(format!("{}.manifest", split.name()));
        manifest.save(&path)?;
        Ok((manifest, path))
    };
    let (train, train_manifest) = write_split(Split::Train, n_train)?;
    let (test, test_manifest) = if n_test > 0 {
        let (m, p) = write_split(Split::Test, n_test)?;
        (Some(m), Some(p))
    } else {
        (None, None)
    };
    Ok(SynthOutput {
        train,
        test,
        train_manifest,
        test_manifest,
        files: n_train + n_test,
    })
}
