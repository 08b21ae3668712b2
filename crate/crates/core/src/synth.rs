//! Procedural two-domain segmentation benchmark: four non-overlapping
//! structures (a disc inside a ring, plus two rotated ellipses) rendered
//! with per-class intensity profiles. The target domain adds a smooth
//! random deformation of the geometry, a nonlinear intensity remap
//! `g(v) = 1 - v^gamma`, and independent noise; the remap has the analytic
//! inverse used by [`make_source_like`].

use rand::Rng;

use crate::dataset::{Domain, DomainDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Image extent (square). Powers of two keep warps exact.
    pub size: usize,
    /// Source subjects (labels generated for all; few-shot splitting
    /// decides what stays labeled).
    pub n_source: usize,
    /// Source labels kept by the few-shot split.
    pub k_shot: usize,
    /// Unlabeled target pool used for training.
    pub n_target_train: usize,
    /// Held-out target subjects for evaluation.
    pub n_target_test: usize,
    /// Peak smooth-deformation displacement in normalized units.
    pub deform_magnitude: f64,
    /// Exponent of the intensity remap `g(v) = 1 - v^gamma`.
    pub gamma: f64,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            n_source: 12,
            k_shot: 4,
            n_target_train: 32,
            n_target_test: 8,
            deform_magnitude: 0.08,
            gamma: 1.5,
            noise_sigma: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        if self.n_source == 0 || self.n_target_train == 0 || self.n_target_test == 0 {
            return Err(Error::Config("all subject counts must be positive".into()));
        }
        if self.k_shot == 0 || self.k_shot > self.n_source {
            return Err(Error::Config(format!(
                "k_shot must be in 1..={}",
                self.n_source
            )));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-subject scene: ring + inner disc + two rotated ellipses, with
/// per-class intensity levels.
#[derive(Debug, Clone)]
struct Scene {
    cx: f64,
    cy: f64,
    r_disc: f64,
    r_outer: f64,
    ellipses: [Ellipse; 2],
    /// Intensity per class id (0 = background).
    profile: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) < 1.0
    }
}

impl Scene {
    fn label_at(&self, x: f64, y: f64) -> u8 {
        let d2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        if d2 < self.r_disc * self.r_disc {
            return 1;
        }
        if d2 < self.r_outer * self.r_outer {
            return 2;
        }
        for (i, e) in self.ellipses.iter().enumerate() {
            if e.contains(x, y) {
                return 3 + i as u8;
            }
        }
        0
    }
}

const BASE_PROFILE: [f64; NUM_CLASSES] = [0.15, 0.9, 0.4, 0.7, 0.55];

fn sample_scene(size: usize, rng: &mut impl Rng) -> Result<Scene> {
    let s = size as f64;
    let margin = 2.0;
    for _attempt in 0..1000 {
        let r_disc = rng.gen_range(0.09..0.14) * s;
        let r_outer = r_disc + rng.gen_range(0.05..0.08) * s;
        let cx = rng.gen_range(0.32..0.68) * s;
        let cy = rng.gen_range(0.32..0.68) * s;
        let mut ellipses = Vec::with_capacity(2);
        for _ in 0..2 {
            let a = rng.gen_range(0.06..0.11) * s;
            let b = rng.gen_range(0.06..0.11) * s;
            let phi = rng.gen_range(0.0..std::f64::consts::PI);
            let rb = a.max(b);
            let ex = rng.gen_range(0.1..0.9) * s;
            let ey = rng.gen_range(0.1..0.9) * s;
            ellipses.push(Ellipse {
                cx: ex,
                cy: ey,
                a,
                b,
                cos: phi.cos(),
                sin: phi.sin(),
            });
            let _ = rb;
        }
        let fits = |e: &Ellipse| {
            let rb = e.a.max(e.b);
            e.cx - rb > margin
                && e.cx + rb < s - margin - 1.0
                && e.cy - rb > margin
                && e.cy + rb < s - margin - 1.0
        };
        let clear_of_ring = |e: &Ellipse| {
            let rb = e.a.max(e.b);
            let d = ((e.cx - cx).powi(2) + (e.cy - cy).powi(2)).sqrt();
            d > r_outer + rb + margin
        };
        let e0 = ellipses[0];
        let e1 = ellipses[1];
        let apart = {
            let d = ((e0.cx - e1.cx).powi(2) + (e0.cy - e1.cy).powi(2)).sqrt();
            d > e0.a.max(e0.b) + e1.a.max(e1.b) + margin
        };
        if !(fits(&e0) && fits(&e1) && clear_of_ring(&e0) && clear_of_ring(&e1) && apart) {
            continue;
        }
        let mut profile = BASE_PROFILE;
        for p in profile.iter_mut() {
            *p += rng.gen_range(-0.03..0.03);
        }
        return Ok(Scene {
            cx,
            cy,
            r_disc,
            r_outer,
            ellipses: [e0, e1],
            profile,
        });
    }
    Err(Error::Data(
        "rejection sampling failed to place structures after 1000 tries".into(),
    ))
}

/// Smooth displacement field from a bilinearly interpolated coarse grid,
/// in normalized units. Returned as (dx, dy) per pixel.
fn smooth_field(size: usize, magnitude: f64, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    const COARSE: usize = 4;
    let mut knots = [[(0.0f64, 0.0f64); COARSE]; COARSE];
    for row in knots.iter_mut() {
        for k in row.iter_mut() {
            // uniform in [-mag, mag]: bounded displacement, full strength
            k.0 = rng.gen_range(-magnitude..magnitude);
            k.1 = rng.gen_range(-magnitude..magnitude);
        }
    }
    let mut out = Vec::with_capacity(size * size);
    let step = (COARSE - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        let fy = y as f64 * step;
        let y0 = (fy.floor() as usize).min(COARSE - 2);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 * step;
            let x0 = (fx.floor() as usize).min(COARSE - 2);
            let tx = fx - x0 as f64;
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let fx0 = lerp(knots[y0][x0].0, knots[y0][x0 + 1].0, tx);
            let fx1 = lerp(knots[y0 + 1][x0].0, knots[y0 + 1][x0 + 1].0, tx);
            let fy0 = lerp(knots[y0][x0].1, knots[y0][x0 + 1].1, tx);
            let fy1 = lerp(knots[y0 + 1][x0].1, knots[y0 + 1][x0 + 1].1, tx);
            out.push((lerp(fx0, fx1, ty), lerp(fy0, fy1, ty)));
        }
    }
    out
}

struct Rendered<F: Real> {
    image: Vec<F>,
    labels: Vec<u8>,
}

/// Renders a scene at displaced coordinates. The displacement is evaluated
/// analytically, so labels and intensities stay geometrically consistent.
fn render<F: Real>(
    scene: &Scene,
    size: usize,
    field: Option<&[(f64, f64)]>,
    noise_sigma: f64,
    remap_gamma: Option<f64>,
    rng: &mut impl Rng,
) -> Rendered<F> {
    let s = size as f64;
    let mut image = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (mut px, mut py) = (x as f64, y as f64);
            if let Some(f) = field {
                let (dx, dy) = f[y * size + x];
                // normalized displacement spans [-1,1] across the image
                px += dx * 0.5 * s;
                py += dy * 0.5 * s;
            }
            let label = scene.label_at(px, py);
            let mut v = scene.profile[label as usize];
            if let Some(g) = remap_gamma {
                v = 1.0 - v.max(0.0).powf(g);
            }
            if noise_sigma > 0.0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                v += z * noise_sigma;
            }
            image.push(F::of(v));
            labels.push(label);
        }
    }
    Rendered { image, labels }
}

fn all_classes_present(labels: &[u8]) -> bool {
    let mut seen = [false; NUM_CLASSES];
    for &l in labels {
        seen[l as usize] = true;
    }
    seen.iter().all(|&s| s)
}

/// The generated benchmark. Ground-truth target labels are kept out of the
/// training datasets; they exist for evaluation and the supervised upper
/// bound only.
#[derive(Debug, Clone)]
pub struct Benchmark<F: Real> {
    pub source: DomainDataset<F>,
    pub target_train: DomainDataset<F>,
    pub target_test: DomainDataset<F>,
    pub target_train_gt: Vec<Vec<u8>>,
    pub target_test_gt: Vec<Vec<u8>>,
}

fn gen_subject<F: Real>(
    cfg: &SynthConfig,
    domain: Domain,
    rng: &mut impl Rng,
) -> Result<Rendered<F>> {
    let size = cfg.size;
    for _ in 0..100 {
        let scene = sample_scene(size, rng)?;
        let rendered = match domain {
            Domain::Source => render(&scene, size, None, cfg.noise_sigma, None, rng),
            _ => {
                let field = if cfg.deform_magnitude > 0.0 {
                    Some(smooth_field(size, cfg.deform_magnitude, rng))
                } else {
                    None
                };
                render(
                    &scene,
                    size,
                    field.as_deref(),
                    cfg.noise_sigma,
                    Some(cfg.gamma),
                    rng,
                )
            }
        };
        // construction guarantee: all four structures visible
        if all_classes_present(&rendered.labels) {
            return Ok(rendered);
        }
    }
    Err(Error::Data(
        "could not render a subject containing all structure classes".into(),
    ))
}

/// Generates source and target datasets. Pure function of `(cfg, rng
/// state)`: identical seeds give bit-identical datasets.
pub fn generate<F: Real>(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Benchmark<F>> {
    cfg.validate()?;
    let size = cfg.size;

    let mut source_images = Vec::new();
    let mut source_labels = Vec::new();
    for _ in 0..cfg.n_source {
        let r = gen_subject::<F>(cfg, Domain::Source, rng)?;
        source_images.push(r.image);
        source_labels.push(r.labels);
    }
    let source = DomainDataset {
        domain: Domain::Source,
        h: size,
        w: size,
        images: source_images,
        labels: Some(source_labels),
        subject_ids: (0..cfg.n_source as u32).collect(),
    };

    let mut tt_images = Vec::new();
    let mut tt_gt = Vec::new();
    for _ in 0..cfg.n_target_train {
        let r = gen_subject::<F>(cfg, Domain::Target, rng)?;
        tt_images.push(r.image);
        tt_gt.push(r.labels);
    }
    let target_train = DomainDataset {
        domain: Domain::Target,
        h: size,
        w: size,
        images: tt_images,
        labels: None,
        subject_ids: (0..cfg.n_target_train as u32).collect(),
    };

    let mut te_images = Vec::new();
    let mut te_gt = Vec::new();
    for _ in 0..cfg.n_target_test {
        let r = gen_subject::<F>(cfg, Domain::Target, rng)?;
        te_images.push(r.image);
        te_gt.push(r.labels);
    }
    let target_test = DomainDataset {
        domain: Domain::Target,
        h: size,
        w: size,
        images: te_images,
        labels: None,
        subject_ids: (0..cfg.n_target_test as u32).collect(),
    };

    Ok(Benchmark {
        source,
        target_train,
        target_test,
        target_train_gt: tt_gt,
        target_test_gt: te_gt,
    })
}

/// Applies the analytic inverse of the intensity remap,
/// `g^-1(v) = (1 - v)^(1/gamma)`, producing source-like images. Residual
/// noise survives the inversion; inputs are clamped to `[0,1]` first so the
/// root stays real.
pub fn make_source_like<F: Real>(target: &DomainDataset<F>, gamma: f64) -> DomainDataset<F> {
    let inv = 1.0 / gamma;
    let images = target
        .images
        .iter()
        .map(|im| {
            im.iter()
                .map(|&v| F::of((1.0 - v.f64().clamp(0.0, 1.0)).powf(inv)))
                .collect()
        })
        .collect();
    DomainDataset {
        domain: Domain::SourceLike,
        h: target.h,
        w: target.w,
        images,
        labels: None,
        subject_ids: target.subject_ids.clone(),
    }
}

/// Splits a fully labeled source set into a k-subject labeled subset and an
/// unlabeled remainder (labels stripped). Selection is by subject.
pub fn few_shot_split<F: Real>(
    source: &DomainDataset<F>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(DomainDataset<F>, DomainDataset<F>)> {
    few_shot_split_indexed(source, k, 0, rng)
}

/// Few-shot split for repeat protocols: repeat `r` takes the r-th disjoint
/// k-subject window of the shuffled subject order, so different repeats use
/// different labeled subjects.
pub fn few_shot_split_indexed<F: Real>(
    source: &DomainDataset<F>,
    k: usize,
    repeat: usize,
    rng: &mut impl Rng,
) -> Result<(DomainDataset<F>, DomainDataset<F>)> {
    let n = source.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k must be in 1..={n}, got {k}")));
    }
    if (repeat + 1) * k > n && repeat > 0 {
        return Err(Error::Config(format!(
            "repeat {repeat} with k={k} exceeds {n} subjects"
        )));
    }
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("few_shot_split needs a labeled source".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates with the caller's rng
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let pick: Vec<usize> = order[repeat * k..(repeat + 1) * k].to_vec();
    let rest: Vec<usize> = order
        .iter()
        .copied()
        .filter(|i| !pick.contains(i))
        .collect();

    let take = |idxs: &[usize], keep_labels: bool| DomainDataset {
        domain: Domain::Source,
        h: source.h,
        w: source.w,
        images: idxs.iter().map(|&i| source.images[i].clone()).collect(),
        labels: keep_labels.then(|| idxs.iter().map(|&i| labels[i].clone()).collect()),
        subject_ids: idxs.iter().map(|&i| source.subject_ids[i]).collect(),
    };
    Ok((take(&pick, true), take(&rest, false)))
}
