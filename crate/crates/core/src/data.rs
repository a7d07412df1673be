//! Synthetic shape sets, XYZ / label files and dataset manifests.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::networks::PartLayout;
use crate::nn::mix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    PartSegmentation,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub items: Vec<PointCloud>,
    /// Class names (classification) or category names (segmentation).
    pub class_names: Vec<String>,
    /// Part ranges per category; segmentation only.
    pub layout: Option<PartLayout>,
    pub split: Split,
}

impl Dataset {
    pub fn train(&self) -> Vec<&PointCloud> {
        self.split.train.iter().map(|&i| &self.items[i]).collect()
    }

    pub fn test(&self) -> Vec<&PointCloud> {
        self.split.test.iter().map(|&i| &self.items[i]).collect()
    }

    /// Points per cloud, if every cloud has the same count.
    pub fn num_points(&self) -> Option<usize> {
        let n = self.items.first()?.len();
        self.items.iter().all(|c| c.len() == n).then_some(n)
    }

    /// Channels per point (3 plus extra feature columns).
    pub fn in_channels(&self) -> usize {
        self.items.first().map_or(3, |c| 3 + c.features.as_ref().map_or(0, |f| f.cols()))
    }

    /// Test set = the first `n_test` items, train set = the next
    /// `n_train`. Generators interleave classes, so both are balanced.
    pub fn assign_split(&mut self, n_train: usize, n_test: usize) -> Result<()> {
        if n_train + n_test > self.items.len() {
            return Err(Error::Config(format!(
                "split {} + {} exceeds {} items",
                n_train,
                n_test,
                self.items.len()
            )));
        }
        self.split = Split { test: (0..n_test).collect(), train: (n_test..n_test + n_train).collect() };
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        let mut seen = vec![false; self.items.len()];
        for &i in self.split.train.iter().chain(&self.split.test) {
            if i >= self.items.len() {
                return Err(Error::Data(format!("split index {} outside {} items", i, self.items.len())));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("item {} appears in more than one split slot", i)));
            }
        }
        for (i, c) in self.items.iter().enumerate() {
            match c.category {
                Some(cat) if cat < k => {}
                other => return Err(Error::Data(format!("item {}: class {:?} outside [0, {})", i, other, k))),
            }
            if self.task == Task::PartSegmentation {
                let layout = self.layout.as_ref().ok_or_else(|| Error::Data("segmentation set without part layout".into()))?;
                if layout.num_categories() != k {
                    return Err(Error::Data("part layout does not match category count".into()));
                }
                let parts = layout.parts_of(c.category.expect("checked"));
                let labels = c.point_labels.as_ref().ok_or_else(|| Error::Data(format!("item {} has no point labels", i)))?;
                if let Some(bad) = labels.iter().find(|l| !parts.contains(l)) {
                    return Err(Error::Data(format!("item {}: part {} outside {:?}", i, bad, parts)));
                }
            }
        }
        Ok(())
    }
}

pub const SHAPE_CLASSES: [&str; 3] = ["sphere", "cube", "torus"];
pub const PART_CATEGORIES: [&str; 2] = ["sphere", "cylinder"];
pub const TORUS_R: f64 = 1.0;
pub const TORUS_TUBE: f64 = 0.4;
const CYLINDER_RADIUS: f64 = 0.6;
const CYLINDER_HALF_HEIGHT: f64 = 0.6;

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniform samples on the unit sphere.
pub fn sample_sphere(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n).map(|_| unit_vector(rng)).collect()
}

/// Uniform samples on the surface of the cube `[-0.5, 0.5]³`.
pub fn sample_cube(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let face = rng.gen_range(0..6);
            let mut p = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            p[face / 2] = if face % 2 == 0 { 0.5 } else { -0.5 };
            p
        })
        .collect()
}

/// Uniform samples on a torus around the z axis (area-correct by
/// rejection).
pub fn sample_torus(n: usize, big_r: f64, small_r: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = rng.gen_range(0.0..2.0 * PI);
        let v = rng.gen_range(0.0..2.0 * PI);
        let ring = big_r + small_r * v.cos();
        if rng.gen_range(0.0..big_r + small_r) <= ring {
            out.push([ring * u.cos(), ring * u.sin(), small_r * v.sin()]);
        }
    }
    out
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Shifts to zero mean, then scales so the farthest point has norm 1.
pub fn center_and_normalize(pts: &mut [[f64; 3]]) {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts.iter() {
        for a in 0..3 {
            c[a] += p[a] / n;
        }
    }
    for p in pts.iter_mut() {
        for a in 0..3 {
            p[a] -= c[a];
        }
    }
    scale_to_unit(pts);
}

fn scale_to_unit(pts: &mut [[f64; 3]]) {
    let m = pts.iter().map(norm).fold(0.0, f64::max);
    if m > 0.0 {
        for p in pts.iter_mut() {
            for v in p.iter_mut() {
                *v /= m;
            }
        }
    }
}

fn to_tensor(pts: &[[f64; 3]]) -> Tensor {
    Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect()).expect("n >= 1")
}

fn check_points(n_points: usize) -> Result<()> {
    if n_points < 8 {
        return Err(Error::Config(format!("n_points {} < 8", n_points)));
    }
    Ok(())
}

/// Sphere / cube / torus classification set. Item `i` has class `i % 3`,
/// `n_per_class` of each; every cloud is centered and fits the unit
/// sphere. The split is left empty.
pub fn gen_shapes(n_per_class: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    check_points(n_points)?;
    let k = SHAPE_CLASSES.len();
    let items = (0..n_per_class * k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let class = i % k;
            let mut pts = match class {
                0 => sample_sphere(n_points, &mut rng),
                1 => sample_cube(n_points, &mut rng),
                _ => sample_torus(n_points, TORUS_R, TORUS_TUBE, &mut rng),
            };
            center_and_normalize(&mut pts);
            PointCloud::new(to_tensor(&pts)).map(|c| c.with_category(class))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: Task::Classification,
        items,
        class_names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        layout: None,
        split: Split::default(),
    })
}

/// Part counts for a cylinder of `n` points, proportional to surface area
/// with every part getting at least one point: `(top, bottom, barrel)`.
fn cylinder_counts(n: usize) -> (usize, usize, usize) {
    let cap = PI * CYLINDER_RADIUS * CYLINDER_RADIUS;
    let barrel = 2.0 * PI * CYLINDER_RADIUS * 2.0 * CYLINDER_HALF_HEIGHT;
    let c = ((n as f64 * cap / (2.0 * cap + barrel)).round() as usize).max(1);
    (c, c, n - 2 * c)
}

fn sample_disk(rng: &mut impl Rng, z: f64) -> [f64; 3] {
    let r = CYLINDER_RADIUS * rng.gen_range(0.0f64..1.0).sqrt();
    let t = rng.gen_range(0.0..2.0 * PI);
    [r * t.cos(), r * t.sin(), z]
}

/// Part-labelled shapes: spheres (upper / lower hemisphere by z sign, parts
/// 0 and 1) and closed cylinders (top cap 2, bottom cap 3, barrel 4).
/// Item `i` has category `i % 2`. Clouds are only rescaled, never shifted,
/// so the hemisphere labels keep matching the z sign.
pub fn gen_part_shapes(n_per_class: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    check_points(n_points)?;
    let layout = PartLayout { parts_per_category: vec![2, 3] };
    let k = PART_CATEGORIES.len();
    let items = (0..n_per_class * k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let cat = i % k;
            let mut pts: Vec<([f64; 3], usize)> = if cat == 0 {
                sample_sphere(n_points, &mut rng).into_iter().map(|p| (p, if p[2] >= 0.0 { 0 } else { 1 })).collect()
            } else {
                let (top, bottom, barrel) = cylinder_counts(n_points);
                let mut v = Vec::with_capacity(n_points);
                v.extend((0..top).map(|_| (sample_disk(&mut rng, CYLINDER_HALF_HEIGHT), 2)));
                v.extend((0..bottom).map(|_| (sample_disk(&mut rng, -CYLINDER_HALF_HEIGHT), 3)));
                v.extend((0..barrel).map(|_| {
                    let t = rng.gen_range(0.0..2.0 * PI);
                    let z = rng.gen_range(-CYLINDER_HALF_HEIGHT..CYLINDER_HALF_HEIGHT);
                    ([CYLINDER_RADIUS * t.cos(), CYLINDER_RADIUS * t.sin(), z], 4)
                }));
                v
            };
            pts.shuffle(&mut rng);
            let (mut coords, labels): (Vec<[f64; 3]>, Vec<usize>) = pts.into_iter().unzip();
            scale_to_unit(&mut coords);
            Ok(PointCloud::new(to_tensor(&coords))?.with_labels(labels)?.with_category(cat))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: Task::PartSegmentation,
        items,
        class_names: PART_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        layout: Some(layout),
        split: Split::default(),
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Parses XYZ text: one point per line, `x y z [f1 … fC]`, the same column
/// count on every line. Blank lines are skipped; a file without points is
/// an error.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut n = 0;
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(path, ln, format!("not a number: {:?}", t))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() < 3 {
            return Err(parse_err(path, ln, format!("expected at least 3 columns, found {}", vals.len())));
        }
        if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
            return Err(parse_err(path, ln, format!("non-finite value {}", bad)));
        }
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(parse_err(path, ln, format!("expected {} columns, found {}", c, vals.len())))
            }
            _ => {}
        }
        data.extend(vals);
        n += 1;
    }
    let Some(c) = cols else { return Err(parse_err(path, 0, "no points")) };
    let all = Tensor::new(vec![n, c], data)?;
    let mut cloud = PointCloud::new(all.select_cols(0..3))?;
    if c > 3 {
        cloud.features = Some(all.select_cols(3..c));
    }
    Ok(cloud)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path)
}

/// XYZ text with shortest round-trip formatting, so loading restores the
/// exact values.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for i in 0..cloud.len() {
        let mut row: Vec<String> = cloud.coords.row(i).iter().map(|v| format!("{:?}", v)).collect();
        if let Some(f) = &cloud.features {
            row.extend(f.row(i).iter().map(|v| format!("{:?}", v)));
        }
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|_| parse_err(path, ln + 1, format!("not a label: {:?}", t)))?);
    }
    if out.is_empty() {
        return Err(parse_err(path, 0, "no labels"));
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{}\n", l)).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a cloud and, optionally, its per-point labels.
pub fn load_labelled(xyz: &Path, labels: Option<&Path>) -> Result<PointCloud> {
    let cloud = load_xyz(xyz)?;
    match labels {
        None => Ok(cloud),
        Some(p) => {
            let l = load_labels(p)?;
            if l.len() != cloud.len() {
                return Err(Error::Data(format!(
                    "{}: {} labels for {} points in {}",
                    p.display(),
                    l.len(),
                    cloud.len(),
                    xyz.display()
                )));
            }
            cloud.with_labels(l)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
    Unused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    /// Relative to the manifest's directory.
    pub points: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub category: usize,
    pub split: SplitName,
}

/// JSON index of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task: Task,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts_per_category: Option<Vec<usize>>,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `points/NNNNN.xyz`, `labels/NNNNN.labels` (segmentation) and
/// `manifest.json` under `dir`. Returns the manifest path.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    ds.validate()?;
    let pts_dir = dir.join("points");
    fs::create_dir_all(&pts_dir).map_err(|e| Error::io(&pts_dir, e))?;
    let seg = ds.task == Task::PartSegmentation;
    if seg {
        let d = dir.join("labels");
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut split = vec![SplitName::Unused; ds.items.len()];
    ds.split.train.iter().for_each(|&i| split[i] = SplitName::Train);
    ds.split.test.iter().for_each(|&i| split[i] = SplitName::Test);
    let mut items = Vec::with_capacity(ds.items.len());
    for (i, c) in ds.items.iter().enumerate() {
        let points = format!("points/{:05}.xyz", i);
        save_xyz(&dir.join(&points), c)?;
        let labels = match (&c.point_labels, seg) {
            (Some(l), true) => {
                let name = format!("labels/{:05}.labels", i);
                save_labels(&dir.join(&name), l)?;
                Some(name)
            }
            _ => None,
        };
        items.push(ManifestItem { points, labels, category: c.category.expect("validated"), split: split[i] });
    }
    let manifest = Manifest {
        task: ds.task,
        class_names: ds.class_names.clone(),
        parts_per_category: ds.layout.as_ref().map(|l| l.parts_per_category.clone()),
        items,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest and every file it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: manifest_path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::with_capacity(m.items.len());
    let mut split = Split::default();
    for (i, it) in m.items.iter().enumerate() {
        let labels = it.labels.as_ref().map(|l| base.join(l));
        items.push(load_labelled(&base.join(&it.points), labels.as_deref())?.with_category(it.category));
        match it.split {
            SplitName::Train => split.train.push(i),
            SplitName::Test => split.test.push(i),
            SplitName::Unused => {}
        }
    }
    let ds = Dataset {
        task: m.task,
        items,
        class_names: m.class_names,
        layout: m.parts_per_category.map(|p| PartLayout { parts_per_category: p }),
        split,
    };
    ds.validate()?;
    Ok(ds)
}
