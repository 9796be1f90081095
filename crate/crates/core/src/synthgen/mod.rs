//! Synthetic two-domain camera networks with known identities.
//!
//! Every identity is a parametric figure (hair, skin, shirt, pants, shoes and
//! an optional bag) drawn on a 64x32 canvas. Cameras shift the figure and
//! change illumination; domains differ by a colour transform and background
//! texture. Target-domain identities are quarantined behind [`Dataset`].

mod audit;
mod image;
pub mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

pub use audit::{EvaluationScope, LabelAudit};
pub use image::{histogram_distance, ColorAffine, Image, CHANNELS, IMG_HEIGHT, IMG_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
    Adapted,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
            DomainTag::Adapted => "adapted",
        }
    }

    /// Whether identities of this domain may be used for training.
    pub fn labels_visible(self) -> bool {
        self != DomainTag::Target
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            "adapted" => Ok(DomainTag::Adapted),
            other => Err(ReidError::InvalidArgument(format!("unknown domain tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub sample_id: u32,
    pub pixels: Image,
    pub camera_id: u32,
    pub domain: DomainTag,
    person_id: u32,
}

impl ImageSample {
    pub fn new(sample_id: u32, pixels: Image, person_id: u32, camera_id: u32, domain: DomainTag) -> Self {
        Self { sample_id, pixels, camera_id, domain, person_id }
    }

    /// The person id, unless the sample belongs to the unlabeled target domain.
    pub fn label(&self) -> Option<u32> {
        self.domain.labels_visible().then_some(self.person_id)
    }

    pub(crate) fn raw_person_id(&self) -> u32 {
        self.person_id
    }

    /// Same record with new pixels and domain tag; the identity is carried over.
    pub fn with_pixels(&self, pixels: Image, domain: DomainTag) -> Self {
        Self { pixels, domain, ..self.clone() }
    }
}

/// An ordered collection of samples plus the audit trail for hidden labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<ImageSample>,
    audit: LabelAudit,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
    }
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Self { samples, audit: LabelAudit::new() }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn audit(&self) -> &LabelAudit {
        &self.audit
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.pixels).collect()
    }

    pub fn camera_ids(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.camera_id).collect()
    }

    /// Person ids usable for training; fails on quarantined samples.
    pub fn training_labels(&self) -> Result<Vec<u32>> {
        self.samples
            .iter()
            .map(|s| {
                s.label().ok_or_else(|| ReidError::HiddenLabels(s.domain.to_string()))
            })
            .collect()
    }

    /// True identity of every sample, counted by the audit. Evaluation code
    /// should hold an [`EvaluationScope`] while calling this.
    pub fn ground_truth(&self) -> Vec<u32> {
        let hidden = self.samples.iter().filter(|s| !s.domain.labels_visible()).count();
        if hidden > 0 {
            self.audit.record(hidden);
        }
        self.samples.iter().map(ImageSample::raw_person_id).collect()
    }

    pub fn into_samples(self) -> Vec<ImageSample> {
        self.samples
    }
}

/// Background texture of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Texture {
    /// Vertical gradient with a soft horizontal floor line.
    Smooth { base: [f64; 3], gradient: f64 },
    /// Independent random blocks of side `grain` pixels around `base`.
    Granular { base: [f64; 3], amplitude: f64, grain: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub num_identities: usize,
    pub instances_per_camera: usize,
    pub num_cameras: usize,
    pub palette: ColorAffine,
    pub texture: Texture,
    pub noise_level: f64,
}

impl DomainSpec {
    pub fn default_source() -> Self {
        Self {
            num_identities: 40,
            instances_per_camera: 4,
            num_cameras: 2,
            palette: ColorAffine::IDENTITY,
            texture: Texture::Smooth { base: [0.55, 0.6, 0.65], gradient: 0.25 },
            noise_level: 0.02,
        }
    }

    pub fn default_target() -> Self {
        Self {
            palette: ColorAffine {
                matrix: [[0.375, 0.165, 0.165], [0.165, 0.375, 0.165], [0.165, 0.165, 0.375]],
                bias: [0.05; 3],
            },
            texture: Texture::Smooth { base: [0.35, 0.45, 0.3], gradient: -0.2 },
            ..Self::default_source()
        }
    }

    pub fn len(&self) -> usize {
        self.num_identities * self.num_cameras * self.instances_per_camera
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples_per_camera(&self) -> usize {
        self.num_identities * self.instances_per_camera
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ReidError::InvalidSpec(m.to_string()));
        if self.num_identities == 0 || self.instances_per_camera == 0 {
            return bad("num_identities and instances_per_camera must be positive");
        }
        if self.num_cameras < 2 {
            return bad("num_cameras must be at least 2");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be a non-negative finite number");
        }
        let params = self.palette.matrix.iter().flatten().chain(&self.palette.bias);
        if params.clone().any(|v| !v.is_finite()) {
            return bad("palette entries must be finite");
        }
        if let Texture::Granular { grain: 0, .. } = self.texture {
            return bad("granular texture needs grain >= 1");
        }
        Ok(())
    }
}

/// Geometry and illumination of one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub dx: i32,
    pub dy: i32,
    pub gain: f64,
    pub tint: [f64; 3],
}

impl CameraView {
    pub fn for_camera(camera: usize) -> Self {
        const DX: [i32; 4] = [0, 2, -2, 1];
        const DY: [i32; 4] = [0, 6, 3, 8];
        const GAIN: [f64; 4] = [1.0, 0.78, 0.9, 1.1];
        const TINT: [[f64; 3]; 4] = [[0.0; 3], [0.06, 0.0, -0.06], [-0.04, 0.05, 0.0], [0.0, -0.03, 0.05]];
        let i = camera % 4;
        Self { dx: DX[i], dy: DY[i], gain: GAIN[i], tint: TINT[i] }
    }
}

#[derive(Debug, Clone)]
struct Figure {
    hair: [f64; 3],
    skin: [f64; 3],
    shirt: [f64; 3],
    stripe: Option<[f64; 3]>,
    pants: [f64; 3],
    shoes: [f64; 3],
    bag: Option<([f64; 3], bool)>,
    head_w: i32,
    body_w: i32,
    torso_h: i32,
    leg_h: i32,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Figure {
    fn sample(rng: &mut impl Rng) -> Self {
        let vivid = |rng: &mut ChaCha8Rng| hsv(rng.gen(), rng.gen_range(0.35..1.0), rng.gen_range(0.25..1.0));
        let mut r = ChaCha8Rng::from_rng(&mut *rng).expect("chacha seeding cannot fail");
        let shirt = vivid(&mut r);
        let stripe = r.gen_bool(0.35).then(|| vivid(&mut r));
        let pants = vivid(&mut r);
        let bag = r.gen_bool(0.4).then(|| (vivid(&mut r), r.gen_bool(0.5)));
        let skin_v = r.gen_range(0.45..0.9);
        Self {
            hair: hsv(r.gen_range(0.02..0.12), r.gen_range(0.2..0.7), r.gen_range(0.05..0.6)),
            skin: hsv(0.07, 0.45, skin_v),
            shirt,
            stripe,
            pants,
            shoes: hsv(r.gen(), r.gen_range(0.0..0.4), r.gen_range(0.05..0.35)),
            bag,
            head_w: r.gen_range(6..=8),
            body_w: r.gen_range(11..=16),
            torso_h: r.gen_range(17..=22),
            leg_h: r.gen_range(19..=24),
        }
    }

    fn draw(&self, img: &mut Image, cx: i32, top: i32, leg_gap: i32, jitter: &[[f64; 3]; 6]) {
        let tone = |c: [f64; 3], j: [f64; 3]| [c[0] + j[0], c[1] + j[1], c[2] + j[2]];
        let head_h = 8;
        let hx = cx - self.head_w / 2;
        img.fill_rect(top, top + head_h, hx, hx + self.head_w, tone(self.skin, jitter[0]));
        img.fill_rect(top, top + 3, hx, hx + self.head_w, tone(self.hair, jitter[1]));

        let ty = top + head_h;
        let bx = cx - self.body_w / 2;
        let shirt = tone(self.shirt, jitter[2]);
        img.fill_rect(ty, ty + self.torso_h, bx, bx + self.body_w, shirt);
        if let Some(stripe) = self.stripe {
            let stripe = tone(stripe, jitter[2]);
            let mut y = ty + 3;
            while y < ty + self.torso_h - 1 {
                img.fill_rect(y, y + 2, bx, bx + self.body_w, stripe);
                y += 5;
            }
        }

        let ly = ty + self.torso_h;
        let leg_w = (self.body_w - leg_gap) / 2;
        let pants = tone(self.pants, jitter[3]);
        img.fill_rect(ly, ly + self.leg_h, bx, bx + leg_w, pants);
        img.fill_rect(ly, ly + self.leg_h, bx + self.body_w - leg_w, bx + self.body_w, pants);
        let shoes = tone(self.shoes, jitter[4]);
        let sy = ly + self.leg_h;
        img.fill_rect(sy, sy + 2, bx - 1, bx + leg_w, shoes);
        img.fill_rect(sy, sy + 2, bx + self.body_w - leg_w, bx + self.body_w + 1, shoes);

        if let Some((color, left)) = self.bag {
            let by = ty + self.torso_h / 3;
            let x0 = if left { bx - 4 } else { bx + self.body_w };
            img.fill_rect(by, by + 9, x0, x0 + 4, tone(color, jitter[5]));
        }
    }
}

/// Static backdrop of one camera: granular textures are a fixed scene per
/// camera with only small per-image flicker on top.
fn camera_scene(texture: &Texture, view: &CameraView, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    match *texture {
        Texture::Smooth { .. } => Vec::new(),
        Texture::Granular { base, amplitude, grain } => {
            let cells = IMG_HEIGHT.div_ceil(grain) * IMG_WIDTH.div_ceil(grain);
            (0..cells)
                .map(|_| {
                    let l: f64 = rng.gen_range(-amplitude..amplitude);
                    core::array::from_fn(|c| base[c] + view.tint[c] + l + rng.gen_range(-0.3..0.3) * amplitude)
                })
                .collect()
        }
    }
}

fn paint_background(img: &mut Image, texture: &Texture, view: &CameraView, scene: &[[f64; 3]], rng: &mut impl Rng) {
    let (h, w) = (img.height(), img.width());
    let wobble: f64 = rng.gen_range(-0.04..0.04);
    match *texture {
        Texture::Smooth { base, gradient } => {
            let floor = (h as f64 * 0.78) as usize;
            for y in 0..h {
                let t = y as f64 / (h - 1) as f64 - 0.5;
                let floor_shade = if y >= floor { -0.12 } else { 0.0 };
                for x in 0..w {
                    let v = core::array::from_fn(|c| base[c] + view.tint[c] + gradient * t + wobble + floor_shade);
                    img.set(y, x, v);
                }
            }
        }
        Texture::Granular { amplitude, grain, .. } => {
            let gw = w.div_ceil(grain);
            let cells: Vec<[f64; 3]> = scene
                .iter()
                .map(|c| {
                    let f: f64 = rng.gen_range(-0.25..0.25) * amplitude;
                    core::array::from_fn(|k| c[k] + wobble + f)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    img.set(y, x, cells[(y / grain) * gw + x / grain]);
                }
            }
        }
    }
}

fn render(
    figure: &Figure,
    spec: &DomainSpec,
    view: &CameraView,
    scene: &[[f64; 3]],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Image {
    let mut img = Image::filled(IMG_HEIGHT, IMG_WIDTH, [0.0; 3]);
    paint_background(&mut img, &spec.texture, view, scene, rng);
    let jx = rng.gen_range(-1..=1);
    let jy = rng.gen_range(-1..=1);
    let leg_gap = rng.gen_range(1..=3);
    let jitter: [[f64; 3]; 6] = core::array::from_fn(|_| core::array::from_fn(|_| rng.gen_range(-0.03..0.03)));
    figure.draw(&mut img, IMG_WIDTH as i32 / 2 + view.dx + jx, 2 + view.dy + jy, leg_gap, &jitter);
    let gain = view.gain;
    for px in img.data_mut().chunks_mut(CHANNELS) {
        let lit = [px[0] * gain, px[1] * gain, px[2] * gain];
        px.copy_from_slice(&spec.palette.apply(lit));
    }
    if spec.noise_level > 0.0 {
        img.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    img.clamp_unit();
    img
}

/// Renders `num_identities x num_cameras x instances_per_camera` samples.
///
/// Samples are ordered identity-major, then camera, then instance; sample ids
/// count up from 0. Source and adapted domains carry visible labels; the
/// target domain's are hidden.
pub fn generate_domain(spec: &DomainSpec, domain: DomainTag, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let figures: Vec<Figure> = (0..spec.num_identities).map(|_| Figure::sample(&mut rng)).collect();
    let noise = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE))
        .map_err(|e| ReidError::InvalidSpec(e.to_string()))?;
    let views: Vec<CameraView> = (0..spec.num_cameras).map(CameraView::for_camera).collect();
    let scenes: Vec<_> = views.iter().map(|v| camera_scene(&spec.texture, v, &mut rng)).collect();
    let mut samples = Vec::with_capacity(spec.len());
    for (pid, figure) in figures.iter().enumerate() {
        for cam in 0..spec.num_cameras {
            for _ in 0..spec.instances_per_camera {
                let pixels = render(figure, spec, &views[cam], &scenes[cam], &noise, &mut rng);
                let id = samples.len() as u32;
                samples.push(ImageSample::new(id, pixels, pid as u32, cam as u32, domain));
            }
        }
    }
    Ok(Dataset::new(samples))
}

/// Positions (into the input slice) of query and gallery samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGallerySplit {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Picks one query per (identity, camera); everything else is gallery.
///
/// Candidates are ordered by sample id before the seeded draw, so the split
/// does not depend on input order.
pub fn split_query_gallery(samples: &[ImageSample], person_ids: &[u32], seed: u64) -> Result<QueryGallerySplit> {
    if samples.len() != person_ids.len() {
        return Err(ReidError::LengthMismatch(samples.len(), person_ids.len()));
    }
    let mut groups: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, (s, &pid)) in samples.iter().zip(person_ids).enumerate() {
        groups.entry(pid).or_default().entry(s.camera_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query = Vec::new();
    for (&pid, cams) in &groups {
        if cams.len() < 2 {
            return Err(ReidError::SingleCameraIdentity(pid));
        }
        for members in cams.values() {
            let mut members = members.clone();
            members.sort_by_key(|&i| samples[i].sample_id);
            query.push(*members.choose(&mut rng).expect("groups are non-empty"));
        }
    }
    let mut is_query = vec![false; samples.len()];
    query.iter().for_each(|&i| is_query[i] = true);
    let mut gallery: Vec<usize> = (0..samples.len()).filter(|&i| !is_query[i]).collect();
    gallery.sort_by_key(|&i| samples[i].sample_id);
    Ok(QueryGallerySplit { query, gallery })
}

impl Dataset {
    /// [`split_query_gallery`] using ground truth; reads are audited.
    pub fn split_query_gallery(&self, seed: u64) -> Result<QueryGallerySplit> {
        split_query_gallery(&self.samples, &self.ground_truth(), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(ids: usize, per_cam: usize) -> DomainSpec {
        DomainSpec { num_identities: ids, instances_per_camera: per_cam, ..DomainSpec::default_source() }
    }

    #[test]
    fn sample_count() {
        let ds = generate_domain(&small(20, 4), DomainTag::Source, 3).unwrap();
        assert_eq!(ds.len(), 160);
        assert!(ds.samples().iter().all(|s| s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = DomainSpec::default_target();
        let a = generate_domain(&spec, DomainTag::Target, 9).unwrap();
        let b = generate_domain(&spec, DomainTag::Target, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&spec, DomainTag::Target, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identities_cluster_without_noise() {
        let spec = DomainSpec { noise_level: 0.0, ..small(2, 4) };
        let ds = generate_domain(&spec, DomainTag::Source, 1).unwrap();
        let s = ds.samples();
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                let d = s[i].pixels.mean_abs_diff(&s[j].pixels);
                if s[i].label() == s[j].label() && s[i].camera_id == s[j].camera_id {
                    same += d;
                    ns += 1;
                } else if s[i].label() != s[j].label() {
                    diff += d;
                    nd += 1;
                }
            }
        }
        assert!(same / ns as f64 * 1.5 < diff / nd as f64, "same {same} diff {diff}");
    }

    #[test]
    fn rejects_single_camera() {
        let spec = DomainSpec { num_cameras: 1, ..small(2, 2) };
        assert!(matches!(generate_domain(&spec, DomainTag::Source, 0), Err(ReidError::InvalidSpec(_))));
        let ds = generate_domain(&small(2, 2), DomainTag::Source, 0).unwrap();
        let only_cam0: Vec<ImageSample> = ds.samples().iter().filter(|s| s.camera_id == 0).cloned().collect();
        let ids: Vec<u32> = only_cam0.iter().map(|s| s.label().unwrap()).collect();
        assert!(matches!(split_query_gallery(&only_cam0, &ids, 0), Err(ReidError::SingleCameraIdentity(0))));
    }

    #[test]
    fn target_labels_are_quarantined() {
        let ds = generate_domain(&small(3, 2), DomainTag::Target, 0).unwrap();
        assert!(ds.training_labels().is_err());
        assert!(ds.samples().iter().all(|s| s.label().is_none()));
        assert_eq!(ds.audit().training_reads(), 0);
        {
            let _scope = ds.audit().evaluation_scope();
            ds.ground_truth();
        }
        assert_eq!(ds.audit().evaluation_reads(), ds.len());
        assert_eq!(ds.audit().training_reads(), 0);
    }

    #[test]
    fn split_has_cross_camera_positive() {
        let ds = generate_domain(&small(10, 4), DomainTag::Source, 2).unwrap();
        let split = ds.split_query_gallery(5).unwrap();
        assert_eq!(split.query.len(), 20);
        assert_eq!(split.query.len() + split.gallery.len(), ds.len());
        let s = ds.samples();
        for &q in &split.query {
            assert!(!split.gallery.contains(&q));
            assert!(split
                .gallery
                .iter()
                .any(|&g| s[g].label() == s[q].label() && s[g].camera_id != s[q].camera_id));
        }
    }

    #[test]
    fn texture_shift_changes_marginals() {
        let src = generate_domain(&DomainSpec::default_source(), DomainTag::Source, 1).unwrap();
        let tgt = generate_domain(&DomainSpec::default_target(), DomainTag::Target, 2).unwrap();
        let d = histogram_distance(&src.images(), &tgt.images(), 16);
        assert!(d > 0.2, "histogram distance {d}");
    }
}
