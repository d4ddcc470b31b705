//! Procedural multi-view, multi-modal clip corpus.
//!
//! Each class owns a smooth latent trajectory (blob positions plus a blob
//! size). An event samples a jittered copy of its class trajectory, renders
//! it in a canonical scene, then every (view, modality) rendering applies
//! the view warp, the view's nuisance pattern, the modality channel mix and
//! i.i.d. noise. The target modality is rendered from the anchor view only.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Clip, ClipDims, DomainRole, ModalityId, SampleRecord, ViewId, ViewRole};
use crate::error::{Error, Result};
use crate::rng::{label_hash, substream, StreamRng};
use crate::sync::Manifest;

/// Background level of the canonical scene.
const BACKGROUND: f64 = 0.1;
/// Mid-grey pivot for the modality channel mix.
const PIVOT: f64 = 0.5;
/// Frames between the end of one event window and the start of the next.
const EVENT_GAP: i64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisancePattern {
    pub amplitude: f64,
    pub seed: u64,
}

impl NuisancePattern {
    pub fn none() -> Self {
        Self { amplitude: 0.0, seed: 0 }
    }

    /// Smooth `H×W` additive pattern: a sum of three random gratings.
    pub fn render(&self, height: usize, width: usize) -> Vec<f64> {
        if self.amplitude == 0.0 {
            return vec![0.0; height * width];
        }
        let mut rng = substream(self.seed, "view-bias", 0);
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let freq = rng.random_range(1.0..3.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                (angle, freq, phase)
            })
            .collect();
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (px, py) = pixel_coords(x, y, width, height);
                let v: f64 = waves
                    .iter()
                    .map(|(a, f, p)| (PI * f * (px * a.cos() + py * a.sin()) + p).sin())
                    .sum::<f64>()
                    / 3.0;
                out.push(self.amplitude * v);
            }
        }
        out
    }
}

/// Fixed affine warp plus additive nuisance for one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewTransform {
    pub view: ViewId,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub scale: f64,
    pub bias: NuisancePattern,
}

impl ViewTransform {
    pub fn identity(view: ViewId) -> Self {
        Self {
            view,
            rotation_deg: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
            bias: NuisancePattern::none(),
        }
    }

    /// Maps view-plane coordinates back into the canonical scene.
    fn to_canonical(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = (-self.rotation_deg.to_radians()).sin_cos();
        let dx = (px - self.translation[0]) / self.scale;
        let dy = (py - self.translation[1]) / self.scale;
        (c * dx - s * dy, s * dx + c * dy)
    }
}

/// Sensor response: channel mix around mid-grey, gain and extra noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityTransform {
    pub modality: ModalityId,
    /// `C_out × C_in`.
    pub channel_map: Vec<Vec<f64>>,
    pub gain: f64,
    pub noise_sigma_extra: f64,
}

impl ModalityTransform {
    pub fn identity(modality: ModalityId, channels: usize) -> Self {
        Self {
            modality,
            channel_map: (0..channels)
                .map(|i| (0..channels).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            gain: 1.0,
            noise_sigma_extra: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub n_clips_per_class: usize,
    pub views: Vec<ViewTransform>,
    pub modalities: Vec<ModalityTransform>,
    pub noise_sigma: f64,
    /// `2·blobs + 1`: blob centres followed by the blob size coordinate.
    pub latent_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub dims: ClipDims,
    /// Annotated length of each event in source frames.
    #[serde(default = "default_window_frames")]
    pub window_frames: i64,
}

fn default_window_frames() -> i64 {
    32
}

pub const V1_ANCHOR: ViewId = ViewId::new(1, ViewRole::Anchor);
pub const V2_POSITIVE: ViewId = ViewId::new(2, ViewRole::Positive);
pub const V3_POSITIVE: ViewId = ViewId::new(3, ViewRole::Positive);
pub const V4_HELD_OUT: ViewId = ViewId::new(4, ViewRole::HeldOut);

pub fn source_modality() -> ModalityId {
    ModalityId::new(0, "modA", DomainRole::Source)
}

pub fn target_modality() -> ModalityId {
    ModalityId::new(1, "modB", DomainRole::Target)
}

impl GeneratorSpec {
    /// The default benchmark: 8 classes, three training views plus one
    /// held-out view, and a labeled source / unlabeled target modality pair.
    pub fn benchmark(seed: u64) -> Self {
        let dims = ClipDims::default();
        Self {
            num_classes: 8,
            n_clips_per_class: 60,
            views: vec![
                ViewTransform {
                    view: V1_ANCHOR,
                    rotation_deg: 0.0,
                    translation: [0.0, 0.0],
                    scale: 1.0,
                    bias: NuisancePattern { amplitude: 0.05, seed: 101 },
                },
                ViewTransform {
                    view: V2_POSITIVE,
                    rotation_deg: 40.0,
                    translation: [0.15, -0.10],
                    scale: 0.85,
                    bias: NuisancePattern { amplitude: 0.05, seed: 202 },
                },
                ViewTransform {
                    view: V3_POSITIVE,
                    rotation_deg: -40.0,
                    translation: [-0.10, 0.15],
                    scale: 1.15,
                    bias: NuisancePattern { amplitude: 0.05, seed: 303 },
                },
                ViewTransform {
                    view: V4_HELD_OUT,
                    rotation_deg: 20.0,
                    translation: [-0.10, -0.10],
                    scale: 0.95,
                    bias: NuisancePattern { amplitude: 0.05, seed: 404 },
                },
            ],
            modalities: vec![
                ModalityTransform {
                    modality: source_modality(),
                    channel_map: vec![
                        vec![0.6, 0.2, 0.2],
                        vec![0.2, 0.6, 0.2],
                        vec![0.2, 0.2, 0.6],
                    ],
                    gain: 1.0,
                    noise_sigma_extra: 0.0,
                        },
                ModalityTransform {
                    modality: target_modality(),
                    channel_map: vec![
                        vec![0.1, 0.2, 0.7],
                        vec![0.7, 0.1, 0.2],
                        vec![0.2, 0.7, 0.1],
                    ],
                    gain: 0.8,
                    noise_sigma_extra: 0.02,
                        },
            ],
            noise_sigma: 0.03,
            latent_dim: 5,
            seed,
            dims,
            window_frames: default_window_frames(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2".into());
        }
        if self.n_clips_per_class == 0 {
            return fail("n_clips_per_class must be >= 1".into());
        }
        if self.views.len() < 3 {
            return fail("at least 3 views are required".into());
        }
        if self.views.iter().filter(|v| v.view.role == ViewRole::Anchor).count() != 1 {
            return fail("exactly one anchor view is required".into());
        }
        let mut indices: Vec<u8> = self.views.iter().map(|v| v.view.index).collect();
        indices.sort_unstable();
        indices.dedup();
        if indices.len() != self.views.len() {
            return fail("view indices must be distinct".into());
        }
        if self.views.iter().any(|v| !(v.scale.is_finite() && v.scale > 0.0)) {
            return fail("view scale must be positive (invertible warp)".into());
        }
        if self.modalities.len() < 2 {
            return fail("at least 2 modalities are required".into());
        }
        if self.modalities.iter().filter(|m| m.modality.is_target()).count() != 1 {
            return fail("exactly one target modality is required".into());
        }
        if !self.modalities.iter().any(|m| m.modality.domain_role == DomainRole::Source) {
            return fail("a source modality is required".into());
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.modality.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modalities.len() {
            return fail("modality names must be distinct".into());
        }
        let c = self.dims.channels;
        for m in &self.modalities {
            if !(m.gain > 0.0 && m.gain.is_finite()) {
                return fail(format!("modality {}: gain must be > 0", m.modality));
            }
            if !(m.noise_sigma_extra >= 0.0) {
                return fail(format!("modality {}: noise_sigma_extra must be >= 0", m.modality));
            }
            if m.channel_map.len() != c || m.channel_map.iter().any(|row| row.len() != c) {
                return fail(format!("modality {}: channel_map must be {c}x{c}", m.modality));
            }
            if matrix_rank(&m.channel_map) < c {
                return fail(format!("modality {}: channel_map must have full row rank", m.modality));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be >= 0".into());
        }
        if self.latent_dim < 3 || self.latent_dim % 2 == 0 {
            return fail("latent_dim must be odd and >= 3 (blob centres plus size)".into());
        }
        if self.dims.is_empty() {
            return fail("clip dims must be non-zero".into());
        }
        if self.window_frames < self.dims.frames as i64 {
            return fail("window_frames must be >= frames".into());
        }
        Ok(())
    }

    pub fn anchor_view(&self) -> ViewId {
        self.views
            .iter()
            .find(|v| v.view.role == ViewRole::Anchor)
            .map(|v| v.view)
            .expect("validated spec has an anchor view")
    }

    pub fn target(&self) -> &ModalityTransform {
        self.modalities
            .iter()
            .find(|m| m.modality.is_target())
            .expect("validated spec has a target modality")
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|k| format!("class_{k:02}")).collect()
    }
}

fn matrix_rank(m: &[Vec<f64>]) -> usize {
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut rank = 0;
    for col in 0..cols {
        let Some(pivot) = (rank..rows).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())) else {
            break;
        };
        if a[pivot][col].abs() < 1e-10 {
            continue;
        }
        a.swap(rank, pivot);
        for r in 0..rows {
            if r != rank {
                let f = a[r][col] / a[rank][col];
                for k in col..cols {
                    a[r][k] -= f * a[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank
}

/// View-plane coordinates of a pixel centre in `[-1, 1]²`.
fn pixel_coords(x: usize, y: usize, width: usize, height: usize) -> (f64, f64) {
    (
        (x as f64 + 0.5) / width as f64 * 2.0 - 1.0,
        (y as f64 + 0.5) / height as f64 * 2.0 - 1.0,
    )
}

/// A class's smooth path through latent space: a sum of two sinusoids per
/// coordinate around a class-specific centre.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTrajectory {
    pub class_id: usize,
    centers: Vec<f64>,
    /// (amplitude, frequency, phase) pairs per coordinate.
    harmonics: Vec<[(f64, f64, f64); 2]>,
}

impl ClassTrajectory {
    /// Depends only on the generator seed and the class, never on view,
    /// modality or event draws.
    pub fn sample(seed: u64, class_id: usize, num_classes: usize, latent_dim: usize) -> Self {
        let mut rng = substream(seed, "trajectory", class_id as u64);
        let size_dim = latent_dim - 1;
        let mut centers = Vec::with_capacity(latent_dim);
        let mut harmonics = Vec::with_capacity(latent_dim);
        for j in 0..latent_dim {
            if j == size_dim {
                // blob radius rises with class index; the wobble is temporal
                let t = class_id as f64 / (num_classes - 1).max(1) as f64;
                centers.push(0.13 + 0.09 * t);
                let f = rng.random_range(0.5..2.0);
                let p = rng.random_range(0.0..2.0 * PI);
                harmonics.push([(0.015, f, p), (0.0, 1.0, 0.0)]);
            } else {
                centers.push(rng.random_range(-0.35..0.35));
                let h1 = (rng.random_range(0.2..0.4), rng.random_range(0.4..1.2), rng.random_range(0.0..2.0 * PI));
                let h2 = (rng.random_range(0.05..0.15), rng.random_range(1.2..2.2), rng.random_range(0.0..2.0 * PI));
                harmonics.push([h1, h2]);
            }
        }
        Self {
            class_id,
            centers,
            harmonics,
        }
    }

    pub fn at(&self, u: f64) -> Vec<f64> {
        self.centers
            .iter()
            .zip(&self.harmonics)
            .map(|(c, hs)| c + hs.iter().map(|(a, f, p)| a * (2.0 * PI * f * u + p).sin()).sum::<f64>())
            .collect()
    }
}

/// Per-event perturbation of its class trajectory and appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct EventInfo {
    pub event_id: usize,
    pub class_id: usize,
    pub time_window: (i64, i64),
    time_scale: f64,
    time_shift: f64,
    amplitude: f64,
    offset: [f64; 2],
    colors: Vec<Vec<f64>>,
    /// Latent state at each of the `T` sampled frames.
    pub latent_path: Vec<Vec<f64>>,
}

impl EventInfo {
    fn draw(
        event_id: usize,
        class_id: usize,
        time_window: (i64, i64),
        traj: &ClassTrajectory,
        frames: usize,
        channels: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let time_scale = rng.random_range(0.9..1.1);
        let time_shift = rng.random_range(-0.1..0.1);
        let amplitude = rng.random_range(0.85..1.15);
        let offset = [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)];
        let blobs = traj.centers.len() / 2;
        let colors = (0..blobs)
            .map(|_| {
                let raw: Vec<f64> = (0..channels).map(|_| rng.random_range(0.3..1.0)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                raw.iter().map(|v| 0.75 * v / norm * (channels as f64).sqrt()).collect()
            })
            .collect();
        let mut ev = Self {
            event_id,
            class_id,
            time_window,
            time_scale,
            time_shift,
            amplitude,
            offset,
            colors,
            latent_path: Vec::new(),
        };
        ev.latent_path = (0..frames).map(|t| ev.latent_at(traj, frame_phase(t, frames))).collect();
        ev
    }

    fn latent_at(&self, traj: &ClassTrajectory, u: f64) -> Vec<f64> {
        let base = traj.at(u * self.time_scale + self.time_shift);
        let size_dim = base.len() - 1;
        base.iter()
            .enumerate()
            .map(|(j, v)| {
                if j == size_dim {
                    *v
                } else {
                    let c = traj.centers[j];
                    c + self.amplitude * (v - c) + self.offset[j % 2]
                }
            })
            .collect()
    }
}

fn frame_phase(t: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        t as f64 / (frames - 1) as f64
    }
}

/// Output of the generator.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub clips: Vec<Clip>,
    pub manifest: Manifest,
    pub events: Vec<EventInfo>,
}

pub fn clip_ref(event_id: usize, view: ViewId, modality: &ModalityId) -> String {
    format!("clips/e{event_id:05}_v{}_{}.f32", view.index, modality.name)
}

/// Renders the labeled multi-view, multi-modal corpus.
pub fn generate_corpus(spec: &GeneratorSpec) -> Result<SyntheticCorpus> {
    render(spec, spec.seed, 0.0)
}

/// Same class trajectories as [`generate_corpus`], re-sampled view and
/// modality parameters and `(1 + magnitude)`× noise. With `shift_seed ==
/// spec.seed` and zero magnitude the output equals the home corpus.
pub fn generate_foreign_corpus(spec: &GeneratorSpec, shift_seed: u64, magnitude: f64) -> Result<SyntheticCorpus> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidSpec("shift magnitude must be >= 0".into()));
    }
    render(spec, shift_seed, magnitude)
}

/// Perturbs every transform of `spec` by `magnitude` using `shift_seed`.
pub fn shifted_spec(spec: &GeneratorSpec, shift_seed: u64, magnitude: f64) -> GeneratorSpec {
    let mut out = spec.clone();
    if magnitude == 0.0 {
        return out;
    }
    let mut rng = substream(shift_seed, "foreign-shift", 0);
    for v in &mut out.views {
        v.rotation_deg += magnitude * rng.random_range(-25.0..25.0);
        v.scale *= (magnitude * rng.random_range(-0.15..0.15f64)).exp();
        v.translation[0] += magnitude * rng.random_range(-0.15..0.15);
        v.translation[1] += magnitude * rng.random_range(-0.15..0.15);
        v.bias.seed = label_hash(&format!("{}:{}", v.bias.seed, shift_seed));
    }
    for m in &mut out.modalities {
        let original = m.channel_map.clone();
        loop {
            for row in &mut m.channel_map {
                for v in row.iter_mut() {
                    *v += magnitude * rng.random_range(-0.25..0.25);
                }
            }
            if matrix_rank(&m.channel_map) == original.len() {
                break;
            }
            m.channel_map = original.clone();
        }
        m.gain *= (magnitude * rng.random_range(-0.3..0.3f64)).exp();
    }
    out.noise_sigma *= 1.0 + magnitude;
    for m in &mut out.modalities {
        m.noise_sigma_extra *= 1.0 + magnitude;
    }
    out
}

fn render(spec: &GeneratorSpec, event_seed: u64, magnitude: f64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let shifted = shifted_spec(spec, event_seed, magnitude);
    let dims = spec.dims;
    let k = spec.num_classes;
    let trajectories: Vec<ClassTrajectory> = (0..k)
        .map(|c| ClassTrajectory::sample(spec.seed, c, k, spec.latent_dim))
        .collect();

    // events laid out on one shared timeline in shuffled order
    let n_events = k * spec.n_clips_per_class;
    let mut slots: Vec<usize> = (0..n_events).collect();
    slots.shuffle(&mut substream(event_seed, "timeline", 0));
    let events: Vec<EventInfo> = (0..n_events)
        .map(|e| {
            let class_id = e / spec.n_clips_per_class;
            let start = slots[e] as i64 * (spec.window_frames + EVENT_GAP);
            let mut rng = substream(event_seed, "event", e as u64);
            EventInfo::draw(
                e,
                class_id,
                (start, start + spec.window_frames),
                &trajectories[class_id],
                dims.frames,
                dims.channels,
                &mut rng,
            )
        })
        .collect();

    let anchor = spec.anchor_view();
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for e in 0..n_events {
        for (mi, m) in shifted.modalities.iter().enumerate() {
            for (vi, v) in shifted.views.iter().enumerate() {
                if m.modality.is_target() && v.view != anchor {
                    continue;
                }
                jobs.push((e, vi, mi));
            }
        }
    }
    let biases: Vec<Vec<f64>> = shifted
        .views
        .iter()
        .map(|v| v.bias.render(dims.height, dims.width))
        .collect();

    let clips: Vec<Clip> = jobs
        .par_iter()
        .map(|&(e, vi, mi)| {
            let ev = &events[e];
            let view = &shifted.views[vi];
            let modality = &shifted.modalities[mi];
            let name = clip_ref(e, view.view, &modality.modality);
            let sigma = shifted.noise_sigma + modality.noise_sigma_extra;
            let mut rng = substream(event_seed, "noise", label_hash(&name));
            let data = render_clip(ev, view, &biases[vi], modality, sigma, dims, &mut rng);
            let class_id = (!modality.modality.is_target()).then_some(ev.class_id);
            Clip::new(data, dims, view.view, modality.modality.clone(), class_id, name, ev.time_window)
        })
        .collect::<Result<_>>()?;

    let records = jobs
        .iter()
        .zip(&clips)
        .map(|(&(e, _, _), clip)| SampleRecord {
            clip_ref: clip.clip_id.clone(),
            view: clip.view,
            modality: clip.modality.clone(),
            class_id: Some(events[e].class_id),
            start_frame: clip.time_window.0,
            end_frame: clip.time_window.1,
        })
        .collect();
    let manifest = Manifest::new(
        records,
        spec.class_names(),
        spec.views.iter().map(|v| v.view).collect(),
        spec.modalities.iter().map(|m| m.modality.clone()).collect(),
    )?
    .with_dims(dims);

    Ok(SyntheticCorpus {
        clips,
        manifest,
        events,
    })
}

fn render_clip(
    ev: &EventInfo,
    view: &ViewTransform,
    bias: &[f64],
    modality: &ModalityTransform,
    sigma: f64,
    dims: ClipDims,
    rng: &mut StreamRng,
) -> Vec<f32> {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let gain = modality.gain;
    let c = dims.channels;
    let mut canonical = vec![0.0; c];
    let mut out = Vec::with_capacity(dims.len());
    for latent in &ev.latent_path {
        let radius = latent[latent.len() - 1].max(0.02);
        let inv_two_r2 = 1.0 / (2.0 * radius * radius);
        let blobs = latent.len() / 2;
        for y in 0..dims.height {
            for x in 0..dims.width {
                let (px, py) = pixel_coords(x, y, dims.width, dims.height);
                let (qx, qy) = view.to_canonical(px, py);
                canonical.iter_mut().for_each(|v| *v = BACKGROUND);
                for b in 0..blobs {
                    let dx = qx - latent[2 * b];
                    let dy = qy - latent[2 * b + 1];
                    let w = (-(dx * dx + dy * dy) * inv_two_r2).exp();
                    for (ch, v) in canonical.iter_mut().enumerate() {
                        *v += w * ev.colors[b][ch];
                    }
                }
                let nuisance = bias[y * dims.width + x];
                for row in &modality.channel_map {
                    let mixed: f64 = row
                        .iter()
                        .zip(&canonical)
                        .map(|(m, v)| m * (v + nuisance - PIVOT))
                        .sum();
                    let mut v = PIVOT + gain * mixed;
                    if sigma > 0.0 {
                        v += noise.sample(rng);
                    }
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    out
}

/// Mean squared pixel value of a clip.
pub fn clip_energy(clip: &Clip) -> f64 {
    clip.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / clip.data.len() as f64
}

/// Writes the manifest plus one little-endian f32 file per clip.
pub fn write_corpus(dir: &Path, clips: &[Clip], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for clip in clips {
        let path = dir.join(&clip.clip_id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut bytes = Vec::with_capacity(clip.data.len() * 4);
        for v in clip.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
    }
    manifest.save(&dir.join("manifest.jsonl"))
}

/// Loads a corpus written by [`write_corpus`]. Target-modality clips come
/// back unlabeled; their labels stay in the manifest for evaluation.
pub fn read_corpus(dir: &Path) -> Result<(Vec<Clip>, Manifest)> {
    let manifest = Manifest::load(&dir.join("manifest.jsonl"))?;
    let dims = manifest
        .dims
        .ok_or_else(|| Error::Manifest("manifest header lacks clip dims".into()))?;
    let clips = manifest
        .records
        .par_iter()
        .map(|r| {
            let bytes = std::fs::read(dir.join(&r.clip_ref))?;
            if bytes.len() != dims.len() * 4 {
                return Err(Error::DimensionMismatch {
                    axis: format!("{} bytes", r.clip_ref),
                    expected: dims.len() * 4,
                    actual: bytes.len(),
                });
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let class_id = if r.modality.is_target() { None } else { r.class_id };
            Clip::new(
                data,
                dims,
                r.view,
                r.modality.clone(),
                class_id,
                r.clip_ref.clone(),
                r.interval(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, manifest))
}
