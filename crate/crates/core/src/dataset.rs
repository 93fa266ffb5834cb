//! Point cloud ingestion, normalisation, sampling and augmentation.
//!
//! Clouds are stored as plain text, one point per line: `x y z [part_label]`.
//! Lines starting with `#` are comments. A manifest lists one
//! `relative/path<TAB>label` record per line.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod synth;

/// `N × 3` coordinates with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Tensor<f64>,
    /// Shape class, for classification.
    pub label: Option<usize>,
    pub part_labels: Option<Vec<usize>>,
    /// Shape category, for part segmentation.
    pub category: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, part_labels: Option<Vec<usize>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("point cloud needs at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite coordinate"));
        }
        if let Some(parts) = &part_labels {
            if parts.len() != points.len() {
                return Err(Error::dim("part labels", &[points.len()], &[parts.len()]));
            }
        }
        let n = points.len();
        Ok(Self {
            points: Tensor::new(vec![n, 3], points.into_iter().flatten().collect())?,
            label: None,
            part_labels,
            category: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let d = &self.points.data()[i * 3..i * 3 + 3];
        [d[0], d[1], d[2]]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.points.data().chunks(3).map(|p| [p[0], p[1], p[2]])
    }

    fn with_points(&self, points: Vec<f64>, part_labels: Option<Vec<usize>>) -> Self {
        let n = points.len() / 3;
        Self {
            points: Tensor::from_parts(vec![n, 3], points),
            label: self.label,
            part_labels,
            category: self.category,
        }
    }
}

/// Parses a cloud file.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, path)
}

pub fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut parts = Vec::new();
    let mut columns = None;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: no + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        if *columns.get_or_insert(fields.len()) != fields.len() {
            return Err(parse_err("inconsistent column count".into()));
        }
        let mut p = [0.0; 3];
        for (dst, tok) in p.iter_mut().zip(&fields) {
            *dst = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("invalid coordinate `{tok}`")))?;
        }
        points.push(p);
        if let Some(tok) = fields.get(3) {
            parts.push(
                tok.parse::<usize>()
                    .map_err(|_| parse_err(format!("invalid part label `{tok}`")))?,
            );
        }
    }
    if points.is_empty() {
        return Err(Error::domain(format!("{}: no points", path.display())));
    }
    let parts = (columns == Some(4)).then_some(parts);
    PointCloud::new(points, parts)
}

pub fn format_cloud(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32);
    for (i, p) in cloud.iter_points().enumerate() {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(parts) = &cloud.part_labels {
            let _ = write!(out, " {}", parts[i]);
        }
        out.push('\n');
    }
    out
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_cloud(cloud)).map_err(|e| Error::io(path, e))
}

/// Result of [`normalize_unit_sphere`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub cloud: PointCloud,
    /// All points coincided; the cloud was centred but not scaled.
    pub degenerate: bool,
}

/// Centres the cloud on its centroid and scales it so the farthest point has norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Normalized {
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in cloud.iter_points() {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let centred: Vec<f64> = cloud
        .iter_points()
        .flat_map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centred
        .chunks(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        log::warn!("degenerate cloud: all {} points coincide", cloud.len());
        return Normalized {
            cloud: cloud.with_points(centred, cloud.part_labels.clone()),
            degenerate: true,
        };
    }
    let scaled = centred.into_iter().map(|v| v / max_norm).collect();
    Normalized {
        cloud: cloud.with_points(scaled, cloud.part_labels.clone()),
        degenerate: false,
    }
}

/// Draws `n` points uniformly: without replacement when the cloud has at
/// least `n` points, with replacement otherwise.
pub fn sample_points<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::domain("cannot sample zero points"));
    }
    let total = cloud.len();
    let picks: Vec<usize> = if total >= n {
        index::sample(rng, total, n).into_vec()
    } else {
        // Every point at least once, the remainder drawn with replacement.
        let mut picks: Vec<usize> = (0..total).collect();
        picks.extend((total..n).map(|_| rng.random_range(0..total)));
        for i in (1..picks.len()).rev() {
            picks.swap(i, rng.random_range(0..=i));
        }
        picks
    };
    let data = cloud.points.data();
    let points = picks.iter().flat_map(|&i| data[i * 3..i * 3 + 3].iter().copied()).collect();
    let parts = cloud
        .part_labels
        .as_ref()
        .map(|pl| picks.iter().map(|&i| pl[i]).collect());
    Ok(cloud.with_points(points, parts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Random rotation about the z axis.
    pub rotate: bool,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotate: true,
            scale_lo: 0.8,
            scale_hi: 1.25,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentParams {
    pub fn neutral() -> Self {
        Self {
            rotate: false,
            scale_lo: 1.0,
            scale_hi: 1.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err(Error::config(
                "scale_range",
                format!("need 0 < lo <= hi, got [{}, {}]", self.scale_lo, self.scale_hi),
            ));
        }
        if self.jitter_sigma < 0.0 || self.jitter_clip < 0.0 {
            return Err(Error::config("jitter", "sigma and clip must be non-negative"));
        }
        Ok(())
    }
}

/// Rotation about z, isotropic scaling, then clipped Gaussian jitter.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R, params: &AugmentParams) -> PointCloud {
    let mut pts = cloud.points.data().to_vec();
    if params.rotate {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = theta.sin_cos();
        for p in pts.chunks_mut(3) {
            let (x, y) = (p[0], p[1]);
            p[0] = x * c - y * s;
            p[1] = x * s + y * c;
        }
    }
    let scale = if params.scale_lo == params.scale_hi {
        params.scale_lo
    } else {
        rng.random_range(params.scale_lo..=params.scale_hi)
    };
    if scale != 1.0 {
        pts.iter_mut().for_each(|v| *v *= scale);
    }
    if params.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, params.jitter_sigma).expect("finite sigma");
        let clip = params.jitter_clip;
        for v in pts.iter_mut() {
            *v += normal.sample(rng).clamp(-clip, clip);
        }
    }
    cloud.with_points(pts, cloud.part_labels.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    /// Class label (classification) or shape category (segmentation).
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.label >= self.class_names.len() {
                return Err(Error::domain(format!(
                    "{}: label {} outside vocabulary of {}",
                    e.path.display(),
                    e.label,
                    self.class_names.len()
                )));
            }
            if !seen.insert(&e.path) {
                return Err(Error::domain(format!("duplicate manifest path {}", e.path.display())));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Reads a manifest. Optional header comments `# split: NAME` and
    /// `# classes: a b c` set the split and label vocabulary.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split = Split::Train;
        let mut class_names: Option<Vec<String>> = None;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: no + 1,
                message,
            };
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(s) = comment.strip_prefix("split:") {
                    split = s.trim().parse().map_err(|e: Error| parse_err(e.to_string()))?;
                } else if let Some(c) = comment.strip_prefix("classes:") {
                    class_names = Some(c.split_whitespace().map(str::to_string).collect());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (rel, label) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `path<TAB>label`".into()))?;
            let label = label
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(format!("invalid label `{}`", label.trim())))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(rel),
                label,
            });
        }
        let class_names = class_names.unwrap_or_else(|| {
            let n = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
            (0..n).map(|i| format!("class{i}")).collect()
        });
        let manifest = Self {
            split,
            entries,
            class_names,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# split: {}\n# classes: {}\n", self.split.name(), self.class_names.join(" "));
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.path.display(), e.label);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads every cloud, tagging it with its manifest label.
    pub fn load_clouds(&self) -> Result<Vec<PointCloud>> {
        self.entries
            .iter()
            .map(|e| {
                let mut cloud = load_cloud(&self.resolve(e))?;
                cloud.label = Some(e.label);
                cloud.category = Some(e.label);
                Ok(cloud)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(text: &str) -> Result<PointCloud> {
        parse_cloud(text, Path::new("mem.xyz"))
    }

    #[test]
    fn parses_two_points() {
        let c = p("0 0 0\n1 0 0").unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.part_labels.is_none());
        assert_eq!(c.point(1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn fourth_column_is_part_label() {
        let c = p("# header\n0 0 0 3\n1 2 3 7\n").unwrap();
        assert_eq!(c.part_labels, Some(vec![3, 7]));
    }

    #[test]
    fn bad_token_names_line() {
        match p("0 0 0\n1 x 0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_domain_error() {
        assert!(matches!(p("# nothing\n\n"), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_pair_normalizes() {
        let c = PointCloud::new(vec![[0., 0., 0.], [2., 0., 0.]], None).unwrap();
        let n = normalize_unit_sphere(&c);
        assert!(!n.degenerate);
        assert_eq!(n.cloud.point(0), [-1.0, 0.0, 0.0]);
        assert_eq!(n.cloud.point(1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_cloud_flagged() {
        let c = PointCloud::new(vec![[2., 2., 2.]; 3], None).unwrap();
        let n = normalize_unit_sphere(&c);
        assert!(n.degenerate);
        assert!(n.cloud.points.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_rules() {
        let c = PointCloud::new(vec![[0., 0., 0.], [1., 0., 0.]], Some(vec![0, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_points(&c, 4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        let parts = s.part_labels.unwrap();
        assert!(parts.contains(&0) && parts.contains(&1));
        assert!(sample_points(&c, 0, &mut rng).is_err());
    }

    #[test]
    fn neutral_augment_is_identity() {
        let c = PointCloud::new(vec![[0.3, -0.2, 0.9], [1., 2., 3.]], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&c, &mut rng, &AugmentParams::neutral()), c);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            split: Split::Test,
            entries: vec![
                ManifestEntry { path: "a.xyz".into(), label: 0 },
                ManifestEntry { path: "b.xyz".into(), label: 1 },
            ],
            class_names: vec!["x".into(), "y".into()],
            root: dir.path().to_path_buf(),
        };
        let path = dir.path().join("m.txt");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);

        std::fs::write(&path, "a.xyz\t0\na.xyz\t0\n").unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }
}
