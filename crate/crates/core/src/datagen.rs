//! Seeded synthetic task streams.
//!
//! Every class is an anisotropic Gaussian cluster in a small latent space.
//! A fixed seeded linear map (the "world") renders latent points onto the
//! `patches × patch_dim` token grid, followed by pixel noise. The world is
//! shared by every stream and by the backbone pre-task, so features learned
//! during pre-training transfer.
//!
//! * class-incremental: tasks partition `T·C_t` classes into disjoint blocks
//!   of consecutive labels.
//! * domain-incremental: one label set; each task applies its own latent
//!   rotation + shift, and held-out domains with fresh transforms form an
//!   unseen test set.
//! * task-agnostic: the domain protocol, evaluated on a merged test set with
//!   task identity removed.

use std::collections::HashSet;
use std::path::Path;

use pcl_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::init::{self, derive_seed, Rng64};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    ClassInc,
    DomainInc,
    TaskAgnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub latent_dim: usize,
    /// Standard deviation of class prototypes.
    pub spread: f64,
    /// Mean within-class standard deviation.
    pub cluster_scale: f64,
    pub pixel_noise: f64,
    /// Domain transform magnitude; 0 makes all domains identical.
    pub domain_shift: f64,
    pub heldout_domains: usize,
    pub seed: u64,
    pub world_seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self::class_inc_default(0)
    }
}

impl StreamSpec {
    pub fn class_inc_default(seed: u64) -> Self {
        Self {
            kind: StreamKind::ClassInc,
            tasks: 5,
            classes_per_task: 4,
            train_per_class: 40,
            test_per_class: 20,
            patches: 16,
            patch_dim: 8,
            latent_dim: 8,
            spread: 3.0,
            cluster_scale: 0.6,
            pixel_noise: 0.3,
            domain_shift: 0.0,
            heldout_domains: 0,
            seed,
            world_seed: 0,
        }
    }

    pub fn domain_inc_default(seed: u64) -> Self {
        Self {
            kind: StreamKind::DomainInc,
            tasks: 4,
            domain_shift: 0.6,
            heldout_domains: 2,
            ..Self::class_inc_default(seed)
        }
    }

    pub fn task_agnostic_default(seed: u64) -> Self {
        Self {
            kind: StreamKind::TaskAgnostic,
            ..Self::domain_inc_default(seed)
        }
    }

    /// Looks up a named preset (`class_inc_default`, `domain_inc_default`,
    /// `task_agnostic_default`).
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "class_inc_default" => Some(Self::class_inc_default(seed)),
            "domain_inc_default" => Some(Self::domain_inc_default(seed)),
            "task_agnostic_default" => Some(Self::task_agnostic_default(seed)),
            _ => None,
        }
    }

    pub fn total_classes(&self) -> usize {
        match self.kind {
            StreamKind::ClassInc => self.tasks * self.classes_per_task,
            StreamKind::DomainInc | StreamKind::TaskAgnostic => self.classes_per_task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("stream: {msg}")));
        if self.tasks == 0 || self.classes_per_task == 0 {
            return bad("tasks and classes_per_task must be positive");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("train_per_class and test_per_class must be positive");
        }
        if self.patches == 0 || self.patch_dim == 0 || self.latent_dim == 0 {
            return bad("geometry extents must be positive");
        }
        if !(self.spread > 0.0 && self.cluster_scale > 0.0 && self.pixel_noise >= 0.0) {
            return bad("spread and cluster_scale must be positive, pixel_noise nonnegative");
        }
        if self.domain_shift < 0.0 {
            return bad("domain_shift must be nonnegative");
        }
        match self.kind {
            StreamKind::ClassInc => Ok(()),
            _ if self.tasks < 2 => bad("domain streams need at least 2 training domains"),
            _ if self.heldout_domains == 0 => bad("domain streams need at least 1 held-out domain"),
            _ => Ok(()),
        }
    }

    /// Stable hash of every field.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub y: usize,
}

impl Sample {
    pub fn digest(&self) -> [u8; 32] {
        Sha256::new()
            .chain_update(self.x.to_le_bytes())
            .chain_update((self.y as u64).to_le_bytes())
            .finalize()
            .into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub id: usize,
    pub classes: Vec<usize>,
    /// Domain id for domain streams.
    pub domain: Option<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub tasks: Vec<TaskData>,
    /// Held-out domain ids (domain streams only).
    pub unseen_domains: Vec<usize>,
    pub unseen_test: Vec<Sample>,
}

impl TaskStream {
    pub fn total_classes(&self) -> usize {
        self.spec.total_classes()
    }

    /// Number of classes the model may predict after finishing task `t`
    /// (1-based). Class-incremental labels are laid out task by task, so
    /// the seen classes are always a prefix.
    pub fn seen_classes(&self, t: usize) -> usize {
        match self.spec.kind {
            StreamKind::ClassInc => t * self.spec.classes_per_task,
            _ => self.spec.classes_per_task,
        }
    }
}

/// The fixed latent-to-token rendering shared by all data.
#[derive(Debug, Clone)]
pub struct World {
    projection: Tensor,
    patches: usize,
    patch_dim: usize,
    pixel_noise: f64,
}

impl World {
    pub fn new(spec: &StreamSpec) -> Self {
        let mut rng = init::rng(derive_seed(spec.world_seed, "world"));
        let out = spec.patches * spec.patch_dim;
        let projection = init::normal(&mut rng, spec.latent_dim, out, 1.0 / (spec.latent_dim as f64).sqrt());
        Self {
            projection,
            patches: spec.patches,
            patch_dim: spec.patch_dim,
            pixel_noise: spec.pixel_noise,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn render(&self, z: &[f64], rng: &mut Rng64) -> Tensor {
        let z = Tensor::row_vector(z.to_vec());
        let flat = z.matmul(&self.projection).expect("latent width matches");
        let mut data = flat.into_data();
        for v in &mut data {
            let eps: f64 = StandardNormal.sample(rng);
            *v += self.pixel_noise * eps;
        }
        Tensor::new(self.patches, self.patch_dim, data).expect("grid geometry")
    }
}

/// A class cluster: prototype plus per-axis standard deviations.
#[derive(Debug, Clone)]
struct Cluster {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Cluster {
    fn draw(rng: &mut Rng64, dim: usize, spread: f64, cluster_scale: f64) -> Self {
        let mean = (0..dim)
            .map(|_| spread * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        let scale = (0..dim)
            .map(|_| cluster_scale * rng.random_range(0.5..1.5))
            .collect();
        Self { mean, scale }
    }

    fn sample(&self, rng: &mut Rng64) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.scale)
            .map(|(m, s)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + s * eps
            })
            .collect()
    }
}

/// Rotation + shift in latent space. Magnitude 0 is the identity.
#[derive(Debug, Clone)]
struct DomainTransform {
    rotation: Tensor,
    shift: Vec<f64>,
}

impl DomainTransform {
    fn draw(rng: &mut Rng64, dim: usize, magnitude: f64) -> Self {
        let perturb = init::normal(rng, dim, dim, 1.0 / (dim as f64).sqrt());
        let raw = Tensor::eye(dim)
            .add(&perturb.scale(magnitude))
            .expect("square");
        let rotation = gram_schmidt_rows(&raw);
        let shift = (0..dim)
            .map(|_| magnitude * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Self { rotation, shift }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let zt = Tensor::row_vector(z.to_vec());
        let rotated = zt.matmul(&self.rotation).expect("latent width matches");
        rotated
            .data()
            .iter()
            .zip(&self.shift)
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn gram_schmidt_rows(m: &Tensor) -> Tensor {
    let (n, d) = m.shape();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for r in 0..n {
        let mut v = m.row(r).to_vec();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            if dot != 0.0 {
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm != 1.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        basis.push(v);
    }
    Tensor::new(n, d, basis.concat()).expect("square")
}

fn draw_split(
    cluster: &Cluster,
    label: usize,
    count: usize,
    world: &World,
    transform: Option<&DomainTransform>,
    rng: &mut Rng64,
) -> Vec<Sample> {
    (0..count)
        .map(|_| {
            let mut z = cluster.sample(rng);
            if let Some(t) = transform {
                z = t.apply(&z);
            }
            Sample {
                x: world.render(&z, rng),
                y: label,
            }
        })
        .collect()
}

pub fn gen_class_incremental(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    if spec.kind != StreamKind::ClassInc {
        return Err(Error::Config("gen_class_incremental needs kind class_inc".into()));
    }
    let world = World::new(spec);
    let mut proto_rng = init::rng(derive_seed(spec.seed, "prototypes"));
    let clusters: Vec<Cluster> = (0..spec.total_classes())
        .map(|_| Cluster::draw(&mut proto_rng, spec.latent_dim, spec.spread, spec.cluster_scale))
        .collect();
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let mut rng = init::rng(derive_seed(spec.seed, &format!("task{t}")));
        let classes: Vec<usize> = (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            train.extend(draw_split(&clusters[c], c, spec.train_per_class, &world, None, &mut rng));
            test.extend(draw_split(&clusters[c], c, spec.test_per_class, &world, None, &mut rng));
        }
        tasks.push(TaskData {
            id: t,
            classes,
            domain: None,
            train,
            test,
        });
    }
    Ok(TaskStream {
        spec: spec.clone(),
        tasks,
        unseen_domains: Vec::new(),
        unseen_test: Vec::new(),
    })
}

pub fn gen_domain_incremental(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    if spec.kind == StreamKind::ClassInc {
        return Err(Error::Config("gen_domain_incremental needs a domain kind".into()));
    }
    let world = World::new(spec);
    let mut proto_rng = init::rng(derive_seed(spec.seed, "prototypes"));
    let clusters: Vec<Cluster> = (0..spec.classes_per_task)
        .map(|_| Cluster::draw(&mut proto_rng, spec.latent_dim, spec.spread, spec.cluster_scale))
        .collect();
    let classes: Vec<usize> = (0..spec.classes_per_task).collect();
    let domains = spec.tasks + spec.heldout_domains;
    let transforms: Vec<DomainTransform> = (0..domains)
        .map(|d| {
            let mut rng = init::rng(derive_seed(spec.seed, &format!("domain{d}")));
            DomainTransform::draw(&mut rng, spec.latent_dim, spec.domain_shift)
        })
        .collect();
    let mut tasks = Vec::with_capacity(spec.tasks);
    for (d, transform) in transforms.iter().enumerate().take(spec.tasks) {
        let mut rng = init::rng(derive_seed(spec.seed, &format!("task{d}")));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            train.extend(draw_split(&clusters[c], c, spec.train_per_class, &world, Some(transform), &mut rng));
            test.extend(draw_split(&clusters[c], c, spec.test_per_class, &world, Some(transform), &mut rng));
        }
        tasks.push(TaskData {
            id: d,
            classes: classes.clone(),
            domain: Some(d),
            train,
            test,
        });
    }
    let unseen_domains: Vec<usize> = (spec.tasks..domains).collect();
    let mut unseen_test = Vec::new();
    for &d in &unseen_domains {
        let mut rng = init::rng(derive_seed(spec.seed, &format!("unseen{d}")));
        for &c in &classes {
            unseen_test.extend(draw_split(
                &clusters[c],
                c,
                spec.test_per_class,
                &world,
                Some(&transforms[d]),
                &mut rng,
            ));
        }
    }
    Ok(TaskStream {
        spec: spec.clone(),
        tasks,
        unseen_domains,
        unseen_test,
    })
}

/// Generates the stream described by `spec`.
pub fn generate(spec: &StreamSpec) -> Result<TaskStream> {
    match spec.kind {
        StreamKind::ClassInc => gen_class_incremental(spec),
        StreamKind::DomainInc | StreamKind::TaskAgnostic => gen_domain_incremental(spec),
    }
}

/// Union of every task's test set with task identity dropped.
pub fn gen_task_agnostic_eval(stream: &TaskStream) -> Vec<Sample> {
    merged_test(&stream.tasks)
}

/// Test sets of `tasks` concatenated in task order.
pub fn merged_test(tasks: &[TaskData]) -> Vec<Sample> {
    tasks.iter().flat_map(|t| t.test.iter().cloned()).collect()
}

/// Labelled samples for backbone pre-training: `classes` clusters drawn
/// independently of every stream but rendered by the same world.
pub fn gen_pretask(spec: &StreamSpec, classes: usize, per_class: usize, seed: u64) -> Vec<Sample> {
    let world = World::new(spec);
    let mut rng = init::rng(derive_seed(seed, "pretask"));
    let clusters: Vec<Cluster> = (0..classes)
        .map(|_| Cluster::draw(&mut rng, spec.latent_dim, spec.spread, spec.cluster_scale))
        .collect();
    let mut samples = Vec::with_capacity(classes * per_class);
    for (c, cluster) in clusters.iter().enumerate() {
        samples.extend(draw_split(cluster, c, per_class, &world, None, &mut rng));
    }
    samples.shuffle(&mut rng);
    samples
}

/// True when no test sample's bytes equal any train sample's.
pub fn splits_disjoint(stream: &TaskStream) -> bool {
    let train: HashSet<[u8; 32]> = stream
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().map(Sample::digest))
        .collect();
    stream
        .tasks
        .iter()
        .flat_map(|t| t.test.iter())
        .chain(&stream.unseen_test)
        .all(|s| !train.contains(&s.digest()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    spec: StreamSpec,
    spec_hash: String,
    tasks: Vec<CacheTask>,
    unseen_domains: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheTask {
    classes: Vec<usize>,
    domain: Option<usize>,
    train: usize,
    test: usize,
}

fn stack(samples: &[Sample]) -> Option<(Tensor, Tensor)> {
    let first = samples.first()?;
    let (p, d) = first.x.shape();
    let mut data = Vec::with_capacity(samples.len() * p * d);
    for s in samples {
        data.extend_from_slice(s.x.data());
    }
    let x = Tensor::new(samples.len() * p, d, data).ok()?;
    let y = Tensor::row_vector(samples.iter().map(|s| s.y as f64).collect());
    Some((x, y))
}

fn unstack(x: &Tensor, y: &Tensor, patches: usize) -> Result<Vec<Sample>> {
    let n = y.cols();
    if x.rows() != n * patches {
        return Err(Error::Data("cached split has inconsistent sizes".into()));
    }
    (0..n)
        .map(|i| {
            Ok(Sample {
                x: x.slice_rows(i * patches, (i + 1) * patches)?,
                y: y.get(0, i) as usize,
            })
        })
        .collect()
}

/// Writes `stream` as `manifest.json` plus `data.bin` under `dir`.
pub fn save_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, samples: &[Sample]| {
        if let Some((x, y)) = stack(samples) {
            names.push(format!("{name}.x"));
            tensors.push(x);
            names.push(format!("{name}.y"));
            tensors.push(y);
        }
    };
    for t in &stream.tasks {
        push(format!("task{}.train", t.id), &t.train);
        push(format!("task{}.test", t.id), &t.test);
    }
    push("unseen".into(), &stream.unseen_test);
    let entries: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(tensors.iter()).collect();
    io::write_tensors(&dir.join("data.bin"), &entries)?;
    let manifest = CacheManifest {
        spec: stream.spec.clone(),
        spec_hash: stream.spec.hash(),
        tasks: stream
            .tasks
            .iter()
            .map(|t| CacheTask {
                classes: t.classes.clone(),
                domain: t.domain,
                train: t.train.len(),
                test: t.test.len(),
            })
            .collect(),
        unseen_domains: stream.unseen_domains.clone(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_stream(dir: &Path) -> Result<TaskStream> {
    let manifest: CacheManifest = io::read_json(&dir.join("manifest.json"))?;
    let tensors = io::read_tensors(&dir.join("data.bin"))?;
    let get = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("stream cache lacks {name}")))
    };
    let patches = manifest.spec.patches;
    let split = |name: String| -> Result<Vec<Sample>> {
        unstack(get(&format!("{name}.x"))?, get(&format!("{name}.y"))?, patches)
    };
    let mut tasks = Vec::new();
    for (id, meta) in manifest.tasks.iter().enumerate() {
        tasks.push(TaskData {
            id,
            classes: meta.classes.clone(),
            domain: meta.domain,
            train: split(format!("task{id}.train"))?,
            test: split(format!("task{id}.test"))?,
        });
    }
    let unseen_test = if manifest.unseen_domains.is_empty() {
        Vec::new()
    } else {
        split("unseen".into())?
    };
    Ok(TaskStream {
        spec: manifest.spec,
        tasks,
        unseen_domains: manifest.unseen_domains,
        unseen_test,
    })
}

/// Loads the cached stream in `dir` when its spec hash matches, otherwise
/// (or when `regen` is set) generates and caches it.
pub fn cached_stream(spec: &StreamSpec, dir: &Path, regen: bool) -> Result<TaskStream> {
    let manifest_path = dir.join("manifest.json");
    if !regen && manifest_path.exists() {
        let manifest: CacheManifest = io::read_json(&manifest_path)?;
        if manifest.spec_hash == spec.hash() {
            return load_stream(dir);
        }
    }
    let stream = generate(spec)?;
    save_stream(&stream, dir)?;
    Ok(stream)
}
