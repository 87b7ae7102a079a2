//! Procedural synthetic point-cloud corpus: six analytic shape families with
//! uniform surface sampling, per-point part labels, random poses, Gaussian
//! jitter and unit-ball normalization. Stands in for the mesh datasets the
//! pipeline would normally consume.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::io::{cloud_from_bytes, cloud_to_bytes};
use crate::geometry::{Point3, PointCloud};
use crate::rng::RngHub;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    Plane,
}

impl ShapeFamily {
    pub fn all() -> [ShapeFamily; 6] {
        [
            ShapeFamily::Sphere,
            ShapeFamily::Cube,
            ShapeFamily::Cylinder,
            ShapeFamily::Torus,
            ShapeFamily::Cone,
            ShapeFamily::Plane,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Plane => "plane",
        }
    }

    /// Analytic part labels per family (local ids in listed order).
    pub fn part_names(&self) -> &'static [&'static str] {
        match self {
            ShapeFamily::Sphere => &["upper_hemisphere", "lower_hemisphere"],
            ShapeFamily::Cube => &["faces_x", "faces_y", "faces_z"],
            ShapeFamily::Cylinder => &["body", "caps"],
            ShapeFamily::Torus => &["outer_half", "inner_half"],
            ShapeFamily::Cone => &["lateral", "base"],
            ShapeFamily::Plane => &["half_pos_x", "half_neg_x"],
        }
    }
}

/// Rigid pose: unit quaternion (w,x,y,z) plus translation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Pose {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            quaternion: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Uniform random rotation (Shoemake's subgroup algorithm) and a small
    /// random translation.
    pub fn random(rng: &mut ChaCha12Rng) -> Self {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let u3: f64 = rng.random();
        let quaternion = [
            (1.0 - u1).sqrt() * (2.0 * PI * u2).sin(),
            (1.0 - u1).sqrt() * (2.0 * PI * u2).cos(),
            u1.sqrt() * (2.0 * PI * u3).sin(),
            u1.sqrt() * (2.0 * PI * u3).cos(),
        ];
        let translation = [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ];
        Pose {
            quaternion,
            translation,
        }
    }

    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.quaternion;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let m = self.rotation_matrix();
        let mut out = [0.0; 3];
        for (i, row) in m.iter().enumerate() {
            out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + self.translation[i];
        }
        out
    }
}

/// Everything needed to regenerate one shape deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    /// Family-specific sizes: sphere [r]; cube [edge]; cylinder [r, h];
    /// torus [major, minor]; cone [r, h]; plane [w, d].
    pub size_params: Vec<f64>,
    pub pose: Pose,
    pub point_count: usize,
    pub noise_sigma: f64,
    pub normalize: bool,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.point_count < 8 {
            return Err(Error::Spec(format!(
                "point_count {} must be >= 8",
                self.point_count
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Spec("noise_sigma must be >= 0".into()));
        }
        let p = &self.size_params;
        let positive = |n: usize| p.len() == n && p.iter().all(|v| *v > 0.0);
        let ok = match self.family {
            ShapeFamily::Sphere => positive(1),
            ShapeFamily::Cube => positive(1),
            ShapeFamily::Cylinder | ShapeFamily::Cone | ShapeFamily::Plane => positive(2),
            ShapeFamily::Torus => positive(2) && p[1] < p[0],
        };
        if !ok {
            return Err(Error::Spec(format!(
                "invalid size parameters {:?} for family {}",
                p,
                self.family.name()
            )));
        }
        Ok(())
    }

    /// A randomly sized, randomly posed instance of a family.
    pub fn random(
        family: ShapeFamily,
        point_count: usize,
        noise_sigma: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let size_params = match family {
            ShapeFamily::Sphere => vec![rng.random_range(0.6..1.2)],
            ShapeFamily::Cube => vec![rng.random_range(0.8..1.6)],
            ShapeFamily::Cylinder => {
                vec![rng.random_range(0.3..0.7), rng.random_range(0.8..1.8)]
            }
            ShapeFamily::Torus => {
                let major = rng.random_range(0.6..1.0);
                let minor = rng.random_range(0.15..0.45) * major;
                vec![major, minor]
            }
            ShapeFamily::Cone => vec![rng.random_range(0.4..0.8), rng.random_range(0.8..1.6)],
            ShapeFamily::Plane => vec![rng.random_range(0.8..1.6), rng.random_range(0.4..1.0)],
        };
        ShapeSpec {
            family,
            size_params,
            pose: Pose::random(rng),
            point_count,
            noise_sigma,
            normalize: true,
        }
    }
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Uniform surface samples plus local part labels in the canonical frame
/// (before pose, jitter, normalization).
pub fn sample_canonical(spec: &ShapeSpec, rng: &mut ChaCha12Rng) -> (Vec<Point3>, Vec<u16>) {
    let n = spec.point_count;
    let p = &spec.size_params;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    match spec.family {
        ShapeFamily::Sphere => {
            let r = p[0];
            for _ in 0..n {
                let mut v = [gauss(rng), gauss(rng), gauss(rng)];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                v = [v[0] / len * r, v[1] / len * r, v[2] / len * r];
                labels.push(u16::from(v[2] < 0.0));
                points.push(v);
            }
        }
        ShapeFamily::Cube => {
            let h = p[0] / 2.0;
            for _ in 0..n {
                let face = rng.random_range(0..6u8);
                let a = rng.random_range(-h..h);
                let b = rng.random_range(-h..h);
                let s = if face % 2 == 0 { h } else { -h };
                let (pt, axis) = match face / 2 {
                    0 => ([s, a, b], 0u16),
                    1 => ([a, s, b], 1),
                    _ => ([a, b, s], 2),
                };
                points.push(pt);
                labels.push(axis);
            }
        }
        ShapeFamily::Cylinder => {
            let (r, h) = (p[0], p[1]);
            let side_area = 2.0 * PI * r * h;
            let cap_area = 2.0 * PI * r * r;
            let side_frac = side_area / (side_area + cap_area);
            for _ in 0..n {
                if rng.random::<f64>() < side_frac {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let z = rng.random_range(-h / 2.0..h / 2.0);
                    points.push([r * theta.cos(), r * theta.sin(), z]);
                    labels.push(0);
                } else {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let rho = r * rng.random::<f64>().sqrt();
                    let z = if rng.random::<f64>() < 0.5 { h / 2.0 } else { -h / 2.0 };
                    points.push([rho * theta.cos(), rho * theta.sin(), z]);
                    labels.push(1);
                }
            }
        }
        ShapeFamily::Torus => {
            let (major, minor) = (p[0], p[1]);
            for _ in 0..n {
                // rejection on the tube angle keeps the sampling area-uniform
                let theta = loop {
                    let t = rng.random_range(0.0..2.0 * PI);
                    let accept = (major + minor * t.cos()) / (major + minor);
                    if rng.random::<f64>() < accept {
                        break t;
                    }
                };
                let phi = rng.random_range(0.0..2.0 * PI);
                let ring = major + minor * theta.cos();
                points.push([ring * phi.cos(), ring * phi.sin(), minor * theta.sin()]);
                labels.push(u16::from(theta.cos() < 0.0)); // inner half of the tube
            }
        }
        ShapeFamily::Cone => {
            let (r, h) = (p[0], p[1]);
            let slant = (r * r + h * h).sqrt();
            let lateral_area = PI * r * slant;
            let base_area = PI * r * r;
            let lateral_frac = lateral_area / (lateral_area + base_area);
            for _ in 0..n {
                if rng.random::<f64>() < lateral_frac {
                    let s = rng.random::<f64>().sqrt(); // distance fraction from apex
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let rho = s * r;
                    points.push([rho * theta.cos(), rho * theta.sin(), h * (1.0 - s)]);
                    labels.push(0);
                } else {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let rho = r * rng.random::<f64>().sqrt();
                    points.push([rho * theta.cos(), rho * theta.sin(), 0.0]);
                    labels.push(1);
                }
            }
        }
        ShapeFamily::Plane => {
            let (w, d) = (p[0], p[1]);
            for _ in 0..n {
                let x = rng.random_range(-w / 2.0..w / 2.0);
                let y = rng.random_range(-d / 2.0..d / 2.0);
                points.push([x, y, 0.0]);
                labels.push(u16::from(x < 0.0));
            }
        }
    }
    (points, labels)
}

/// Full generation pipeline: canonical samples -> pose -> jitter ->
/// unit-ball normalization. Labels are local part ids for the family.
pub fn generate_shape(spec: &ShapeSpec, rng: &mut ChaCha12Rng) -> Result<PointCloud> {
    spec.validate()?;
    let (canonical, labels) = sample_canonical(spec, rng);
    let mut points: Vec<Point3> = canonical.iter().map(|p| spec.pose.apply(*p)).collect();
    if spec.noise_sigma > 0.0 {
        for pt in &mut points {
            for c in pt.iter_mut() {
                *c += spec.noise_sigma * gauss(rng);
            }
        }
    }
    if spec.normalize {
        let n = points.len() as f64;
        let mut centroid = [0.0; 3];
        for pt in &points {
            for i in 0..3 {
                centroid[i] += pt[i];
            }
        }
        centroid = centroid.map(|v| v / n);
        let mut max_norm: f64 = 0.0;
        for pt in &mut points {
            for i in 0..3 {
                pt[i] -= centroid[i];
            }
            max_norm = max_norm.max((pt[0] * pt[0] + pt[1] * pt[1] + pt[2] * pt[2]).sqrt());
        }
        if max_norm > 0.0 {
            for pt in &mut points {
                for c in pt.iter_mut() {
                    *c /= max_norm;
                }
            }
        }
    }
    Ok(PointCloud::with_labels(points, labels))
}

/// Sampled per-axis scale and translation, invertible for testing.
#[derive(Debug, Clone, Copy)]
pub struct ScaleTranslate {
    pub scale: [f64; 3],
    pub translate: [f64; 3],
}

impl ScaleTranslate {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points
            .iter()
            .map(|p| {
                [
                    p[0] * self.scale[0] + self.translate[0],
                    p[1] * self.scale[1] + self.translate[1],
                    p[2] * self.scale[2] + self.translate[2],
                ]
            })
            .collect();
        PointCloud {
            points,
            labels: cloud.labels.clone(),
        }
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points
            .iter()
            .map(|p| {
                [
                    (p[0] - self.translate[0]) / self.scale[0],
                    (p[1] - self.translate[1]) / self.scale[1],
                    (p[2] - self.translate[2]) / self.scale[2],
                ]
            })
            .collect();
        PointCloud {
            points,
            labels: cloud.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaleTranslateRange {
    pub scale_min: f64,
    pub scale_max: f64,
    pub translate_min: f64,
    pub translate_max: f64,
}

impl Default for ScaleTranslateRange {
    fn default() -> Self {
        ScaleTranslateRange {
            scale_min: 2.0 / 3.0,
            scale_max: 1.5,
            translate_min: -0.2,
            translate_max: 0.2,
        }
    }
}

/// Per-axis uniform scale and translation augmentation.
pub fn augment_scale_translate(
    cloud: &PointCloud,
    rng: &mut ChaCha12Rng,
    range: &ScaleTranslateRange,
) -> (PointCloud, ScaleTranslate) {
    assert!(range.scale_min > 0.0 && range.scale_max >= range.scale_min);
    let mut draw = |lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let transform = ScaleTranslate {
        scale: [
            draw(range.scale_min, range.scale_max),
            draw(range.scale_min, range.scale_max),
            draw(range.scale_min, range.scale_max),
        ],
        translate: [
            draw(range.translate_min, range.translate_max),
            draw(range.translate_min, range.translate_max),
            draw(range.translate_min, range.translate_max),
        ],
    };
    (transform.apply(cloud), transform)
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub families: Vec<ShapeFamily>,
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub per_class_test: usize,
    pub point_count: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: usize,
    pub spec: ShapeSpec,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Global part names; clouds store these global ids.
    pub part_names: Vec<String>,
    /// Global part ids per class.
    pub class_parts: Vec<Vec<usize>>,
    pub splits: BTreeMap<String, Vec<InstanceRecord>>,
}

/// Class -> valid global part ids, as used by segmentation metrics.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub class_parts: Vec<Vec<usize>>,
    pub part_count: usize,
}

impl CorpusManifest {
    pub fn taxonomy(&self) -> Taxonomy {
        Taxonomy {
            class_parts: self.class_parts.clone(),
            part_count: self.part_names.len(),
        }
    }
}

/// In-memory corpus: manifest plus decoded clouds per split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clouds: BTreeMap<String, Vec<PointCloud>>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> &[PointCloud] {
        self.clouds.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_ids(&self, name: &str) -> Vec<usize> {
        self.manifest
            .splits
            .get(name)
            .map(|records| records.iter().map(|r| r.class_id).collect())
            .unwrap_or_default()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_names.len()
    }

    /// Indices of a split's instances grouped by class.
    pub fn by_class(&self, name: &str) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count()];
        for (i, class) in self.class_ids(name).iter().enumerate() {
            groups[*class].push(i);
        }
        groups
    }
}

/// Deterministic corpus generation: per-instance RNG streams derived from the
/// root seed, global part ids assigned per family in declaration order.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if cfg.families.is_empty() {
        return Err(Error::Config("corpus.families must be non-empty".into()));
    }
    let hub = RngHub::new(seed);
    let mut part_names = Vec::new();
    let mut class_parts = Vec::new();
    for family in &cfg.families {
        let offset = part_names.len();
        let names = family.part_names();
        part_names.extend(names.iter().map(|n| format!("{}/{}", family.name(), n)));
        class_parts.push((offset..offset + names.len()).collect::<Vec<usize>>());
    }

    let split_sizes = [
        ("train", cfg.per_class_train),
        ("val", cfg.per_class_val),
        ("test", cfg.per_class_test),
    ];
    let mut splits: BTreeMap<String, Vec<InstanceRecord>> = BTreeMap::new();
    let mut clouds: BTreeMap<String, Vec<PointCloud>> = BTreeMap::new();
    for (split, per_class) in split_sizes {
        let mut records = Vec::new();
        let mut split_clouds = Vec::new();
        for (class_id, family) in cfg.families.iter().enumerate() {
            for i in 0..per_class {
                let stream = format!("corpus-{split}-{}-{i}", family.name());
                let mut rng = hub.stream(&stream);
                let spec = ShapeSpec::random(*family, cfg.point_count, cfg.noise_sigma, &mut rng);
                let mut cloud = generate_shape(&spec, &mut rng)?;
                // lift local part ids to the global id space
                let offset = class_parts[class_id][0] as u16;
                if let Some(labels) = &mut cloud.labels {
                    for l in labels.iter_mut() {
                        *l += offset;
                    }
                }
                records.push(InstanceRecord {
                    class_id,
                    spec,
                    offset: 0,
                    length: 0,
                });
                split_clouds.push(cloud);
            }
        }
        splits.insert(split.to_string(), records);
        clouds.insert(split.to_string(), split_clouds);
    }

    Ok(Corpus {
        manifest: CorpusManifest {
            version: 1,
            seed,
            class_names: cfg.families.iter().map(|f| f.name().to_string()).collect(),
            part_names,
            class_parts,
            splits,
        },
        clouds,
    })
}

/// Write manifest + one binary blob per split; offsets recorded per instance.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = corpus.manifest.clone();
    for (split, records) in manifest.splits.iter_mut() {
        let clouds = corpus.split(split);
        let mut blob = Vec::new();
        for (record, cloud) in records.iter_mut().zip(clouds) {
            let bytes = cloud_to_bytes(cloud);
            record.offset = blob.len();
            record.length = bytes.len();
            blob.extend_from_slice(&bytes);
        }
        fs::write(dir.join(format!("{split}.bin")), blob)?;
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Checkpoint(format!(
            "corpus manifest not found: {}",
            manifest_path.display()
        )));
    }
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let mut clouds = BTreeMap::new();
    for (split, records) in &manifest.splits {
        let blob = fs::read(dir.join(format!("{split}.bin")))?;
        let mut split_clouds = Vec::with_capacity(records.len());
        for record in records {
            let slice = blob
                .get(record.offset..record.offset + record.length)
                .ok_or_else(|| Error::Checkpoint("corpus blob out of range".into()))?;
            split_clouds.push(cloud_from_bytes(slice)?.0);
        }
        clouds.insert(split.clone(), split_clouds);
    }
    Ok(Corpus { manifest, clouds })
}
