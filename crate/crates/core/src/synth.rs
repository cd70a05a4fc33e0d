//! Synthetic activation scenes with known ground truth.
//!
//! A scene is a set of elliptical objects with Gaussian activation blobs,
//! a smooth diffuse background, fine texture, function-word interference
//! bumps, salt-and-pepper flips and high-magnitude corner spikes. Scenes are
//! written in the same interchange layout the model exporter produces.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    ClassMask, GroundTruthMaskSet, MaskRef, SampleMetadata, StepRecord, TokenInfo, VariantLabel,
};
use crate::error::{Error, Result};
use crate::harness::ManifestRecord;
use crate::io::{write_map, write_mask_png, write_metadata, write_npy};
use crate::map::ActivationMap;

pub const CLASS_NAMES: [&str; 8] = ["cat", "dog", "sheep", "car", "bird", "horse", "cup", "boat"];

/// Offset of the image span in the exported sequence.
pub const N_BASE: usize = 23;
/// Response tokens following the image span in the valid step.
pub const TAIL_TOKENS: usize = 28;
/// Hidden length logged at infeasible steps.
pub const FAIL_SEQ_LEN: usize = 64;
/// Infeasible steps logged after the single valid one.
pub const FAIL_STEPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub salt_pepper_rate: f64,
    pub corner_spike_count: usize,
    pub corner_spike_value: f64,
    /// Peak of the smooth diffuse background field.
    pub diffuse_background_level: f64,
    /// Amplitude of uniform per-pixel texture.
    pub texture_level: f64,
    /// Peak of the function-word interference bumps.
    pub interference_level: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            salt_pepper_rate: 0.03,
            corner_spike_count: 2,
            corner_spike_value: 2.5,
            diffuse_background_level: 0.2,
            texture_level: 0.05,
            interference_level: 0.35,
        }
    }
}

impl NoiseSpec {
    pub fn clean() -> Self {
        Self {
            salt_pepper_rate: 0.0,
            corner_spike_count: 0,
            corner_spike_value: 0.0,
            diffuse_background_level: 0.0,
            texture_level: 0.0,
            interference_level: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
    pub n_blobs: usize,
    pub blob_intensity: (f64, f64),
    /// Object semi-axis range in grid cells.
    pub blob_radius: (f64, f64),
    pub noise: NoiseSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: (22, 24),
            image_size: (88, 96),
            n_blobs: 2,
            blob_intensity: (0.6, 1.0),
            blob_radius: (2.5, 7.0),
            noise: NoiseSpec::default(),
        }
    }
}

impl SynthSpec {
    /// The acceptance-corpus scene for `seed`: object count and noise
    /// strengths are drawn per seed so scenes span all gating branches.
    pub fn corpus(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            seed,
            n_blobs: rng.gen_range(1..=3),
            blob_radius: (2.5, rng.gen_range(4.0..9.0)),
            noise: NoiseSpec {
                salt_pepper_rate: rng.gen_range(0.0..0.06),
                corner_spike_count: rng.gen_range(0..=3),
                corner_spike_value: rng.gen_range(1.5..3.0),
                diffuse_background_level: rng.gen_range(0.05..0.45),
                texture_level: rng.gen_range(0.0..0.1),
                interference_level: rng.gen_range(0.15..0.6),
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("synth: {m}")));
        let (h, w) = self.grid;
        if h < 8 || w < 8 {
            return bad(format!("grid must be at least 8x8, got {h}x{w}"));
        }
        if self.image_size.0 < h || self.image_size.1 < w {
            return bad("image size must not be smaller than the grid".into());
        }
        if self.n_blobs == 0 || self.n_blobs > CLASS_NAMES.len() {
            return bad(format!("n_blobs must lie in 1..={}", CLASS_NAMES.len()));
        }
        let (lo, hi) = self.blob_intensity;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("blob_intensity must be an increasing positive range".into());
        }
        let (lo, hi) = self.blob_radius;
        if !(lo >= 1.5 && lo <= hi && hi <= h.min(w) as f64 / 2.0) {
            return bad("blob_radius must lie in [1.5, min(H, W) / 2]".into());
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.salt_pepper_rate) {
            return bad("salt_pepper_rate must lie in [0, 1]".into());
        }
        if n.corner_spike_count > 4 {
            return bad("at most 4 corner spikes".into());
        }
        for (name, v) in [
            ("corner_spike_value", n.corner_spike_value),
            ("diffuse_background_level", n.diffuse_background_level),
            ("texture_level", n.texture_level),
            ("interference_level", n.interference_level),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }
}

/// An object region in continuous grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn radius2(&self, y: f64, x: f64) -> f64 {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.radius2(y, x) <= 1.0
    }
}

/// One generated sample held in memory.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Raw activation before normalization, at float32 precision.
    pub raw: ActivationMap,
    pub masks: GroundTruthMaskSet,
    pub meta: SampleMetadata,
    /// Per-token maps aligned with `meta.tokens`.
    pub token_maps: Vec<Option<ActivationMap>>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn quantized(h: usize, w: usize, values: Vec<f64>) -> ActivationMap {
    ActivationMap::from_valid(h, w, values.into_iter().map(f32_round).collect())
}

/// Immutable scene layout shared by all caption variants of a seed.
struct Layout {
    objects: Vec<(String, Ellipse, f64)>,
    blobs: Vec<Vec<f64>>,
    interference: Vec<f64>,
    diffuse: Vec<f64>,
    texture: Vec<f64>,
    flips: Vec<(usize, f64)>,
    spikes: Vec<usize>,
}

fn gaussian_field(h: usize, w: usize, centers: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut f = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            f[y * w + x] = centers
                .iter()
                .map(|(cy, cx, s)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
        }
    }
    let max = f.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        f.iter_mut().for_each(|v| *v /= max);
    }
    f
}

fn layout(spec: &SynthSpec) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = spec.grid;
    let (hf, wf) = (h as f64, w as f64);

    let class_idx = sample(&mut rng, CLASS_NAMES.len(), spec.n_blobs).into_vec();
    let mut objects: Vec<(String, Ellipse, f64)> = Vec::new();
    for ci in class_idx {
        let mut e = Ellipse {
            cy: 0.0,
            cx: 0.0,
            ry: 0.0,
            rx: 0.0,
        };
        for _ in 0..50 {
            e = Ellipse {
                cy: rng.gen_range(4.0..hf - 5.0),
                cx: rng.gen_range(4.0..wf - 5.0),
                ry: rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1),
                rx: rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1),
            };
            let apart = objects.iter().all(|(_, o, _)| {
                let d = ((e.cy - o.cy).powi(2) + (e.cx - o.cx).powi(2)).sqrt();
                d > 0.8 * (e.ry.max(e.rx) + o.ry.max(o.rx))
            });
            if apart {
                break;
            }
        }
        let amp = rng.gen_range(spec.blob_intensity.0..=spec.blob_intensity.1);
        objects.push((CLASS_NAMES[ci].to_string(), e, amp));
    }

    // A node carries blob mass only if its whole bilinear footprint lies
    // inside the ellipse, so upsampled mass never leaves the mask.
    let blobs = objects
        .iter()
        .map(|(_, e, amp)| {
            let mut b = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let inside = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                        .iter()
                        .all(|(dy, dx)| e.contains(yf + dy, xf + dx));
                    if inside {
                        b[y * w + x] = amp * (-e.radius2(yf, xf) / (2.0 * 0.45 * 0.45)).exp();
                    }
                }
            }
            b
        })
        .collect();

    let in_any = |y: f64, x: f64, margin: f64| {
        objects.iter().any(|(_, e, _)| {
            let grown = Ellipse {
                ry: e.ry + margin,
                rx: e.rx + margin,
                ..*e
            };
            grown.contains(y, x)
        })
    };
    let n_bumps = rng.gen_range(2..=3);
    let mut bumps = Vec::new();
    for _ in 0..200 {
        if bumps.len() == n_bumps {
            break;
        }
        let (y, x) = (rng.gen_range(1.0..hf - 2.0), rng.gen_range(1.0..wf - 2.0));
        if !in_any(y, x, 3.0) {
            bumps.push((y, x, rng.gen_range(1.2..2.0)));
        }
    }
    let interference = gaussian_field(h, w, &bumps);

    let broad: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..hf),
                rng.gen_range(0.0..wf),
                rng.gen_range(5.0..9.0),
            )
        })
        .collect();
    let diffuse = gaussian_field(h, w, &broad);
    let texture = (0..h * w).map(|_| rng.gen::<f64>()).collect();

    let flips = salt_and_pepper_flips(&mut rng, h * w, spec.noise.salt_pepper_rate);
    let corners = [w + 1, 2 * w - 2, (h - 2) * w + 1, (h - 1) * w - 2];
    let spikes = corners[..spec.noise.corner_spike_count.min(4)].to_vec();

    Layout {
        objects,
        blobs,
        interference,
        diffuse,
        texture,
        flips,
        spikes,
    }
}

/// Picks exactly `floor(rate * n)` distinct pixels and a 0 or 1 value for each.
pub fn salt_and_pepper_flips(rng: &mut impl Rng, n: usize, rate: f64) -> Vec<(usize, f64)> {
    let count = (rate * n as f64).floor() as usize;
    sample(rng, n, count.min(n))
        .into_iter()
        .map(|p| (p, if rng.gen_bool(0.5) { 1.0 } else { 0.0 }))
        .collect()
}

/// `map` with salt-and-pepper flips drawn from `seed`.
pub fn with_salt_and_pepper(map: &ActivationMap, rate: f64, seed: u64) -> ActivationMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = map.values().to_vec();
    for (p, v) in salt_and_pepper_flips(&mut rng, values.len(), rate) {
        values[p] = v;
    }
    ActivationMap::from_valid(map.height(), map.width(), values)
}

fn mask_set(spec: &SynthSpec, objects: &[(String, Ellipse, f64)]) -> GroundTruthMaskSet {
    let (h, w) = spec.grid;
    let (ih, iw) = spec.image_size;
    let sy = (h - 1) as f64 / (ih - 1).max(1) as f64;
    let sx = (w - 1) as f64 / (iw - 1).max(1) as f64;
    let masks = objects
        .iter()
        .map(|(name, e, _)| ClassMask {
            class_name: name.clone(),
            mask: (0..ih * iw)
                .map(|p| e.contains((p / iw) as f64 * sy, (p % iw) as f64 * sx))
                .collect(),
        })
        .collect();
    GroundTruthMaskSet::new((ih, iw), masks).expect("distinct classes of one size")
}

const SCAFFOLD: [(&str, &str); 6] = [
    ("in", "IN"),
    ("this", "DT"),
    ("picture", "NN"),
    ("we", "PRP"),
    ("can", "MD"),
    ("see", "VB"),
];

fn pos_of(word: &str) -> &'static str {
    match word {
        "a" | "the" => "DT",
        "and" => "CC",
        "with" | "in" => "IN",
        _ => "NN",
    }
}

/// Caption words with tags for one variant.
fn caption(classes: &[&str], variant: VariantLabel) -> Vec<(String, String)> {
    let mut base: Vec<&str> = Vec::new();
    for (i, c) in classes.iter().enumerate() {
        match i {
            0 => {}
            1 => base.push("and"),
            _ => base.push("with"),
        }
        base.push("a");
        base.push(c);
    }
    base.extend(["in", "the", "scene"]);
    let tagged = |ws: &[&str]| -> Vec<(String, String)> {
        ws.iter()
            .map(|w| (w.to_string(), pos_of(w).to_string()))
            .collect()
    };
    match variant {
        VariantLabel::Original => tagged(&base),
        VariantLabel::Concise => tagged(
            &base
                .iter()
                .copied()
                .filter(|w| pos_of(w) == "NN")
                .collect::<Vec<_>>(),
        ),
        VariantLabel::Verbose => {
            let mut out: Vec<(String, String)> = SCAFFOLD
                .iter()
                .map(|(w, t)| (w.to_string(), t.to_string()))
                .collect();
            out.extend(tagged(&base));
            out
        }
        VariantLabel::Repeated => {
            let mut out = Vec::new();
            for w in &base {
                out.push((w.to_string(), pos_of(w).to_string()));
                if pos_of(w) != "NN" {
                    out.push((w.to_string(), pos_of(w).to_string()));
                }
            }
            out
        }
    }
}

fn is_function_pos(pos: &str) -> bool {
    matches!(pos, "DT" | "IN" | "CC" | "TO")
}

fn sample_id(seed: u64, variant: Option<VariantLabel>) -> String {
    match variant {
        None => format!("s{seed:04}"),
        Some(v) => format!("s{seed:04}_{v}"),
    }
}

fn build(spec: &SynthSpec, lay: &Layout, variant: Option<VariantLabel>) -> Scene {
    let (h, w) = spec.grid;
    let n = &spec.noise;
    let classes: Vec<&str> = lay.objects.iter().map(|(c, _, _)| c.as_str()).collect();
    let words = caption(&classes, variant.unwrap_or(VariantLabel::Original));
    let original_fn = caption(&classes, VariantLabel::Original)
        .iter()
        .filter(|(_, p)| is_function_pos(p))
        .count();
    let variant_fn = words.iter().filter(|(_, p)| is_function_pos(p)).count();
    let scale = variant_fn as f64 / original_fn as f64;

    let mut raw: Vec<f64> = (0..h * w)
        .map(|p| {
            let blob: f64 = lay.blobs.iter().map(|b| b[p]).sum();
            blob + n.diffuse_background_level * lay.diffuse[p]
                + n.texture_level * lay.texture[p]
                + scale * n.interference_level * lay.interference[p]
        })
        .collect();
    for (p, v) in &lay.flips {
        raw[*p] = *v;
    }
    for p in &lay.spikes {
        raw[*p] = n.corner_spike_value;
    }

    let interference_map = quantized(h, w, lay.interference.clone());
    let mut tokens = Vec::with_capacity(words.len());
    let mut token_maps = Vec::with_capacity(words.len());
    for (i, (text, pos)) in words.iter().enumerate() {
        let repeat = words.iter().filter(|(t, _)| t == text).count() as u32;
        let class = lay.objects.iter().position(|(c, _, _)| c == text);
        let map = if is_function_pos(pos) {
            Some(interference_map.clone())
        } else {
            class.map(|k| {
                quantized(
                    h,
                    w,
                    ActivationMap::from_valid(h, w, lay.blobs[k].clone())
                        .normalized()
                        .into_values(),
                )
            })
        };
        tokens.push(TokenInfo {
            index: i,
            text: text.clone(),
            pos_tag: pos.clone(),
            is_answer: class.is_some(),
            repeat_count: repeat,
            per_token_map: map.as_ref().map(|_| format!("tokens/{i:03}.npy")),
        });
        token_maps.push(map);
    }

    let masks = mask_set(spec, &lay.objects);
    let seq_len = N_BASE + h * w + TAIL_TOKENS;
    let mut steps = vec![StepRecord {
        t: 0,
        seq_len,
        img_end: None,
    }];
    steps.extend((1..=FAIL_STEPS as i64).map(|t| StepRecord {
        t,
        seq_len: FAIL_SEQ_LEN,
        img_end: Some(N_BASE + h * w),
    }));
    let meta = SampleMetadata {
        sample_id: sample_id(spec.seed, variant),
        n_base: N_BASE,
        grid: [h, w],
        hidden_dim: 2,
        steps,
        response_text: words
            .iter()
            .map(|(t, _)| t.as_str())
            .collect::<Vec<_>>()
            .join(" "),
        tokens,
        variant_label: variant,
        mask_manifest: classes
            .iter()
            .map(|c| MaskRef {
                class_name: c.to_string(),
                path: format!("{c}.png"),
            })
            .collect(),
    };
    Scene {
        raw: quantized(h, w, raw),
        masks,
        meta,
        token_maps,
    }
}

/// Generates one scene; identical specs give bit-identical scenes.
pub fn generate(spec: &SynthSpec) -> Result<Scene> {
    spec.validate()?;
    Ok(build(spec, &layout(spec), None))
}

/// The four caption variants of one scene, in [`VariantLabel::ALL`] order.
/// Only the function-word interference differs between them.
pub fn generate_variants(spec: &SynthSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let lay = layout(spec);
    Ok(VariantLabel::ALL
        .iter()
        .map(|v| build(spec, &lay, Some(*v)))
        .collect())
}

/// Packs a scene into the `(L, D)` hidden-state and gradient layout the
/// exporter writes: channel 0 carries the raw map with unit gradient, channel
/// 1 carries nuisance features whose gradient plane has exactly zero mean.
pub fn sequence_arrays(scene: &Scene) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let meta = &scene.meta;
    let n = meta.span_len();
    let len = meta.n_base + n + TAIL_TOKENS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(&meta.sample_id));
    rng.set_stream(2);
    let mut features = vec![0.0; len * 2];
    let mut gradients = vec![0.0; len * 2];
    for row in 0..len {
        let span = row.checked_sub(meta.n_base).filter(|p| *p < n);
        features[row * 2] = match span {
            Some(p) => scene.raw.values()[p],
            None => f32_round(rng.gen::<f64>()),
        };
        features[row * 2 + 1] = f32_round(rng.gen::<f64>());
        gradients[row * 2] = 1.0;
        gradients[row * 2 + 1] = match span {
            Some(p) if n % 2 == 1 && p == n - 1 => 0.0,
            Some(p) => {
                if p % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            None => f32_round(rng.gen_range(-1.0..1.0)),
        };
    }
    (vec![len, 2], features, gradients)
}

fn seed_of(sample_id: &str) -> u64 {
    sample_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Writes a scene under `root/samples/<id>/` and returns its manifest line
/// with paths relative to `root`.
pub fn write_scene(root: &Path, scene: &Scene) -> Result<ManifestRecord> {
    let id = &scene.meta.sample_id;
    let rel = PathBuf::from("samples").join(id);
    let dir = root.join(&rel);
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::file(&dir, e))?;
    fs::create_dir_all(dir.join("tokens")).map_err(|e| Error::file(&dir, e))?;

    let (shape, features, gradients) = sequence_arrays(scene);
    write_npy(&dir.join("features.npy"), &shape, &features)?;
    write_npy(&dir.join("gradients.npy"), &shape, &gradients)?;
    write_metadata(&dir.join("meta.json"), &scene.meta)?;
    let (ih, iw) = scene.masks.image_size();
    for m in scene.masks.masks() {
        write_mask_png(
            &dir.join("masks").join(format!("{}.png", m.class_name)),
            ih,
            iw,
            &m.mask,
        )?;
    }
    for (tok, map) in scene.meta.tokens.iter().zip(&scene.token_maps) {
        if let (Some(path), Some(map)) = (&tok.per_token_map, map) {
            write_map(&dir.join(path), map)?;
        }
    }
    let s = |p: PathBuf| p.to_string_lossy().replace('\\', "/");
    Ok(ManifestRecord {
        sample_id: id.clone(),
        features_path: s(rel.join("features.npy")),
        gradients_path: s(rel.join("gradients.npy")),
        meta_path: s(rel.join("meta.json")),
        mask_dir: s(rel.join("masks")),
        variant_label: scene.meta.variant_label,
    })
}

/// Writes the corpus for `seeds` and its `manifest.jsonl`; returns the
/// manifest path.
pub fn write_corpus(
    root: &Path,
    seeds: impl IntoIterator<Item = u64>,
    variants: bool,
) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
    let mut lines = String::new();
    for seed in seeds {
        let spec = SynthSpec::corpus(seed);
        let scenes = if variants {
            generate_variants(&spec)?
        } else {
            vec![generate(&spec)?]
        };
        for scene in &scenes {
            lines.push_str(&serde_json::to_string(&write_scene(root, scene)?)?);
            lines.push('\n');
        }
    }
    let path = root.join("manifest.jsonl");
    fs::write(&path, lines).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::concentration;
    use crate::metrics::upsample_to_mask;

    #[test]
    fn deterministic_by_seed() {
        let spec = SynthSpec::corpus(11);
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.masks, b.masks);
        assert_eq!(sequence_arrays(&a), sequence_arrays(&b));
        assert_ne!(generate(&SynthSpec::corpus(12)).unwrap().raw, a.raw);
    }

    #[test]
    fn clean_scene_concentrates_on_masks() {
        for seed in 0..20 {
            let spec = SynthSpec {
                seed,
                noise: NoiseSpec::clean(),
                ..SynthSpec::default()
            };
            let s = generate(&spec).unwrap();
            let up = upsample_to_mask(&s.raw.normalized(), s.masks.image_size()).unwrap();
            let c = concentration(&up, &s.masks).unwrap();
            assert!(c > 0.999, "seed {seed}: {c}");
        }
    }

    #[test]
    fn salt_and_pepper_count_is_exact() {
        let (h, w) = (22, 24);
        let base = ActivationMap::filled(h, w, 0.5);
        for seed in 0..50 {
            let noisy = with_salt_and_pepper(&base, 0.05, seed);
            let changed = base
                .values()
                .iter()
                .zip(noisy.values())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(changed, (0.05 * (h * w) as f64).floor() as usize);
            assert!(noisy.values().iter().all(|v| [0.0, 0.5, 1.0].contains(v)));
        }
    }

    #[test]
    fn gradient_weights_isolate_the_raw_channel() {
        let s = generate(&SynthSpec::corpus(5)).unwrap();
        let (shape, _, g) = sequence_arrays(&s);
        let n = s.meta.span_len();
        let w1: f64 = (0..n).map(|p| g[(N_BASE + p) * 2 + 1]).sum();
        assert_eq!(w1, 0.0);
        assert_eq!(shape, vec![N_BASE + n + TAIL_TOKENS, 2]);
        assert_eq!(shape[0], 579);
        assert_eq!(s.meta.default_img_end(), 551);
    }

    #[test]
    fn variants_share_layout_and_order_interference() {
        let v = generate_variants(&SynthSpec::corpus(7)).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v[0].meta.variant_label, Some(VariantLabel::Concise));
        assert!(v[0].meta.tokens.iter().all(|t| t.pos_tag == "NN"));
        let rep = &v[3].meta.tokens;
        assert!(rep
            .iter()
            .filter(|t| t.text == "a")
            .all(|t| t.repeat_count >= 2));
        for pair in v.windows(2) {
            assert_eq!(pair[0].masks, pair[1].masks);
        }
        let total = |s: &Scene| s.raw.sum();
        assert!(
            total(&v[0]) <= total(&v[1])
                && total(&v[1]) <= total(&v[2])
                && total(&v[2]) <= total(&v[3])
        );
    }

    #[test]
    fn captions() {
        let c = caption(&["cat", "dog"], VariantLabel::Original);
        let words: Vec<&str> = c.iter().map(|w| w.0.as_str()).collect();
        assert_eq!(words, ["a", "cat", "and", "a", "dog", "in", "the", "scene"]);
        let r = caption(&["cat"], VariantLabel::Repeated);
        let words: Vec<&str> = r.iter().map(|w| w.0.as_str()).collect();
        assert_eq!(words, ["a", "a", "cat", "in", "in", "the", "the", "scene"]);
        let k = caption(&["cat"], VariantLabel::Concise);
        assert_eq!(k.len(), 2);
    }

    #[test]
    fn corpus_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), 0..2, false).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let recs: Vec<ManifestRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(recs.len(), 2);
        let meta = crate::io::read_metadata(&dir.path().join(&recs[0].meta_path)).unwrap();
        assert_eq!(meta, generate(&SynthSpec::corpus(0)).unwrap().meta);
        let masks = crate::io::read_mask_set(&meta, &dir.path().join(&recs[0].mask_dir)).unwrap();
        assert_eq!(masks, generate(&SynthSpec::corpus(0)).unwrap().masks);
    }
}
