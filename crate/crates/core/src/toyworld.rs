//! Procedural attribute-labelled faces.
//!
//! Every image is a pure function of `(attrs, seed, resolution)`. Each
//! attribute owns a region outside of which it never changes a pixel:
//!
//! | attribute    | region                                      |
//! |--------------|---------------------------------------------|
//! | `glasses`    | [`Layout::eyewear_box`]                     |
//! | `smile`      | [`Layout::mouth_box`]                       |
//! | `bg_hue`     | pixels outside the face ellipse not covered by hair or hat |
//! | `accessory`  | [`Layout::hat_box`]                         |
//!
//! `hair_shade` only recolours hair pixels. `face_size` and `pose` move the
//! whole face and so have no fixed region.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfe_tensor::{Scalar, Tensor};

use crate::error::{invalid, CoreError, Result};

pub const ATTRIBUTE_NAMES: [&str; 7] =
    ["smile", "glasses", "hair_shade", "face_size", "pose", "bg_hue", "accessory"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub smile: f64,
    pub glasses: bool,
    pub hair_shade: f64,
    pub face_size: f64,
    pub pose: f64,
    pub bg_hue: f64,
    pub accessory: bool,
}

impl Default for AttributeVector {
    fn default() -> Self {
        Self {
            smile: 0.0,
            glasses: false,
            hair_shade: 0.5,
            face_size: 0.8,
            pose: 0.0,
            bg_hue: 0.5,
            accessory: false,
        }
    }
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return invalid(format!("{name} = {v} outside [{lo}, {hi}]"));
    }
    Ok(())
}

impl AttributeVector {
    pub fn validate(&self) -> Result<()> {
        check_range("smile", self.smile, -1.0, 1.0)?;
        check_range("hair_shade", self.hair_shade, 0.0, 1.0)?;
        check_range("face_size", self.face_size, 0.6, 1.0)?;
        check_range("pose", self.pose, -1.0, 1.0)?;
        check_range("bg_hue", self.bg_hue, 0.0, 1.0)
    }

    /// Flat record in [`ATTRIBUTE_NAMES`] order, booleans as 0/1.
    pub fn to_record(&self) -> [f64; 7] {
        [
            self.smile,
            f64::from(u8::from(self.glasses)),
            self.hair_shade,
            self.face_size,
            self.pose,
            self.bg_hue,
            f64::from(u8::from(self.accessory)),
        ]
    }

    pub fn from_record(r: &[f64; 7]) -> Result<Self> {
        let flag = |name: &str, v: f64| match v {
            x if x == 0.0 => Ok(false),
            x if x == 1.0 => Ok(true),
            _ => invalid(format!("{name} must be 0 or 1, got {v}")),
        };
        let a = Self {
            smile: r[0],
            glasses: flag("glasses", r[1])?,
            hair_shade: r[2],
            face_size: r[3],
            pose: r[4],
            bg_hue: r[5],
            accessory: flag("accessory", r[6])?,
        };
        a.validate()?;
        Ok(a)
    }

    /// Binary reading of an attribute, the ground truth for flip-rate and
    /// the editing-FID split.
    pub fn has(&self, attribute: &str) -> Result<bool> {
        Ok(match attribute {
            "smile" => self.smile > 0.0,
            "glasses" => self.glasses,
            "hair_shade" => self.hair_shade > 0.5,
            "face_size" => self.face_size > 0.8,
            "pose" => self.pose > 0.0,
            "bg_hue" => (std::f64::consts::TAU * self.bg_hue).cos() > 0.0,
            "accessory" => self.accessory,
            other => return invalid(format!("unknown attribute `{other}`")),
        })
    }
}

/// Marginals used by [`sample_attributes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributePriors {
    pub p_glasses: f64,
    pub p_accessory: f64,
}

impl Default for AttributePriors {
    fn default() -> Self {
        Self { p_glasses: 0.5, p_accessory: 0.5 }
    }
}

pub fn sample_attributes<R: Rng + ?Sized>(rng: &mut R, priors: &AttributePriors) -> AttributeVector {
    AttributeVector {
        smile: rng.gen_range(-1.0..=1.0),
        glasses: rng.gen_bool(priors.p_glasses),
        hair_shade: rng.gen_range(0.0..=1.0),
        face_size: rng.gen_range(0.6..=1.0),
        pose: rng.gen_range(-1.0..=1.0),
        bg_hue: rng.gen_range(0.0..=1.0),
        accessory: rng.gen_bool(priors.p_accessory),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => invalid(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3, R, R]` in `[-1, 1]`.
    pub pixels: Tensor<f64>,
    pub attrs: AttributeVector,
    /// `[R, R]`, 1 on the face ellipse.
    pub face_mask: Tensor<f64>,
    pub seed: u64,
}

/// Axis-aligned box in normalized coordinates, `[u0, u1) × [v0, v1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl Region {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }
}

/// Geometry derived from the attributes, in normalized image coordinates
/// (`u` right, `v` down, both in `[0, 1]`).
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    lens_r: f64,
    frame_w: f64,
    mouth_y: f64,
    mouth_hw: f64,
    mouth_amp: f64,
    mouth_w: f64,
    /// Antialiasing margin: one pixel.
    aa: f64,
}

impl Layout {
    pub fn new(a: &AttributeVector, resolution: usize) -> Self {
        let px = 1.0 / resolution as f64;
        let rx = 0.30 * a.face_size;
        let ry = 0.36 * a.face_size;
        Self {
            cx: 0.5 + 0.12 * a.pose,
            cy: 0.56,
            rx,
            ry,
            eye_dx: 0.38 * rx,
            eye_y: 0.56 - 0.12 * ry,
            eye_r: (0.12 * rx).max(0.7 * px),
            lens_r: 0.26 * rx,
            frame_w: (0.05 * rx).max(0.9 * px),
            mouth_y: 0.56 + 0.45 * ry,
            mouth_hw: 0.45 * rx,
            mouth_amp: 0.16 * ry,
            mouth_w: (0.05 * ry).max(0.9 * px),
            aa: px,
        }
    }

    pub fn in_face(&self, u: f64, v: f64) -> bool {
        let du = (u - self.cx) / self.rx;
        let dv = (v - self.cy) / self.ry;
        du * du + dv * dv <= 1.0
    }

    pub fn eyewear_box(&self) -> Region {
        let m = self.lens_r + self.frame_w + self.aa;
        Region {
            u0: self.cx - self.eye_dx - m,
            u1: self.cx + self.eye_dx + m,
            v0: self.eye_y - m,
            v1: self.eye_y + m,
        }
    }

    pub fn mouth_box(&self) -> Region {
        let m = self.mouth_w + self.aa;
        Region {
            u0: self.cx - self.mouth_hw - m,
            u1: self.cx + self.mouth_hw + m,
            v0: self.mouth_y - self.mouth_amp - m,
            v1: self.mouth_y + self.mouth_amp + m,
        }
    }

    fn brim(&self) -> Region {
        let top = self.cy - self.ry - 0.045;
        Region { u0: self.cx - 1.15 * self.rx, u1: self.cx + 1.15 * self.rx, v0: top, v1: self.cy - self.ry - 0.005 }
    }

    fn crown(&self) -> Region {
        let bottom = self.cy - self.ry - 0.045;
        Region { u0: self.cx - 0.7 * self.rx, u1: self.cx + 0.7 * self.rx, v0: bottom - 0.7 * self.ry, v1: bottom }
    }

    /// Union bounding box of brim and crown.
    pub fn hat_box(&self) -> Region {
        let (b, c) = (self.brim(), self.crown());
        Region { u0: b.u0, u1: b.u1, v0: c.v0, v1: b.v1 }
    }

    fn in_hair(&self, u: f64, v: f64) -> bool {
        let du = (u - self.cx) / (1.16 * self.rx);
        let dv = (v - (self.cy - 0.06 * self.ry)) / (1.12 * self.ry);
        du * du + dv * dv <= 1.0 && v < self.cy + 0.15 * self.ry
    }
}

/// Per-seed nuisance factors that no attribute controls.
struct Nuisance {
    skin: [f64; 3],
    iris: [f64; 3],
    stripe_freq: f64,
    stripe_dir: (f64, f64),
    stripe_phase: f64,
    freckles: Vec<(f64, f64)>,
}

impl Nuisance {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: f64 = rng.gen();
        let skin = lerp3([0.96, 0.82, 0.70], [0.52, 0.36, 0.25], t);
        let irises = [[0.15, 0.25, 0.55], [0.30, 0.18, 0.08], [0.15, 0.40, 0.20]];
        let iris = irises[rng.gen_range(0..irises.len())];
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let n = rng.gen_range(2..=5);
        let freckles = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r: f64 = rng.gen_range(0.3..0.6);
                (r * a.cos(), 0.15 + 0.3 * r * a.sin().abs())
            })
            .collect();
        Self {
            skin,
            iris,
            stripe_freq: rng.gen_range(2.0..5.0),
            stripe_dir: (theta.cos(), theta.sin()),
            stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            freckles,
        }
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    if alpha > 0.0 {
        *dst = lerp3(*dst, src, alpha.min(1.0));
    }
}

/// Coverage of a shape at signed distance `d` (negative inside) for a
/// pixel of size `px`.
fn coverage(d: f64, px: f64) -> f64 {
    (0.5 - d / px).clamp(0.0, 1.0)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
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

pub fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 32 || !resolution.is_power_of_two() {
        return invalid(format!("resolution must be a power of two >= 32, got {resolution}"));
    }
    Ok(())
}

pub fn render_sample(attrs: &AttributeVector, seed: u64, resolution: usize) -> Result<LabeledImage> {
    attrs.validate()?;
    check_resolution(resolution)?;
    let r = resolution;
    let px = 1.0 / r as f64;
    let lay = Layout::new(attrs, r);
    let nz = Nuisance::new(seed);
    let hair = lerp3([0.12, 0.08, 0.06], [0.96, 0.86, 0.55], attrs.hair_shade);
    let bg = hsv(attrs.bg_hue, 0.55, 0.85);
    let (eyewear, mouth, hat) = (lay.eyewear_box(), lay.mouth_box(), lay.hat_box());
    let (brim, crown) = (lay.brim(), lay.crown());

    let mut pixels = vec![0.0; 3 * r * r];
    let mut mask = vec![0.0; r * r];
    for i in 0..r {
        let v = (i as f64 + 0.5) * px;
        for j in 0..r {
            let u = (j as f64 + 0.5) * px;
            let in_face = lay.in_face(u, v);
            let mut c = if in_face {
                nz.skin
            } else if lay.in_hair(u, v) {
                hair
            } else {
                let t = nz.stripe_freq * (u * nz.stripe_dir.0 + v * nz.stripe_dir.1);
                let k = 1.0 + 0.08 * (std::f64::consts::TAU * t + nz.stripe_phase).sin();
                [bg[0] * k, bg[1] * k, bg[2] * k]
            };
            if in_face {
                mask[i * r + j] = 1.0;
                for &(fu, fv) in &nz.freckles {
                    let d = ((u - (lay.cx + fu * lay.rx)).powi(2) + (v - (lay.cy + fv * lay.ry)).powi(2)).sqrt();
                    blend(&mut c, [0.45, 0.28, 0.18], 0.6 * coverage(d - 0.6 * px, px));
                }
                for side in [-1.0, 1.0] {
                    let d = ((u - (lay.cx + side * lay.eye_dx)).powi(2) + (v - lay.eye_y).powi(2)).sqrt();
                    blend(&mut c, [0.97, 0.97, 0.97], coverage(d - lay.eye_r * 1.6, px));
                    blend(&mut c, nz.iris, coverage(d - lay.eye_r, px));
                }
            }
            if mouth.contains(u, v) {
                let t = (u - lay.cx) / lay.mouth_hw;
                if t.abs() <= 1.0 {
                    // Corners rise and the centre drops as smile grows.
                    let curve = lay.mouth_y + attrs.smile * lay.mouth_amp * (0.5 - t * t);
                    let d = (v - curve).abs() - lay.mouth_w;
                    blend(&mut c, [0.62, 0.12, 0.15], coverage(d, px));
                }
            }
            if attrs.glasses && eyewear.contains(u, v) {
                for side in [-1.0, 1.0] {
                    let d = ((u - (lay.cx + side * lay.eye_dx)).powi(2) + (v - lay.eye_y).powi(2)).sqrt();
                    let ring = (d - lay.lens_r).abs() - lay.frame_w * 0.5;
                    blend(&mut c, [0.35, 0.55, 0.65], 0.35 * coverage(d - lay.lens_r, px));
                    blend(&mut c, [0.06, 0.06, 0.08], coverage(ring, px));
                }
                let bridge_hw = lay.eye_dx - lay.lens_r;
                if (u - lay.cx).abs() <= bridge_hw {
                    let d = (v - lay.eye_y).abs() - lay.frame_w * 0.5;
                    blend(&mut c, [0.06, 0.06, 0.08], coverage(d, px));
                }
            }
            if attrs.accessory && hat.contains(u, v) && (brim.contains(u, v) || crown.contains(u, v)) {
                c = [0.20, 0.28, 0.62];
                if crown.contains(u, v) && (v - (crown.v1 - 0.25 * (crown.v1 - crown.v0))).abs() < 0.6 * px {
                    c = [0.85, 0.75, 0.20];
                }
            }
            for ch in 0..3 {
                pixels[ch * r * r + i * r + j] = (2.0 * c[ch] - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(LabeledImage {
        pixels: Tensor::from_vec(&[3, r, r], pixels)?,
        attrs: *attrs,
        face_mask: Tensor::from_vec(&[r, r], mask)?,
        seed,
    })
}

/// One dataset record; images are re-rendered on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub split: Split,
    pub attrs: AttributeVector,
}

impl ManifestEntry {
    pub fn render(&self, resolution: usize) -> Result<LabeledImage> {
        render_sample(&self.attrs, self.seed, resolution)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-item seed. The low bit encodes the split, so the two splits can
/// never share a seed.
pub fn item_seed(dataset_seed: u64, split: Split, index: u64) -> u64 {
    let h = splitmix64(splitmix64(dataset_seed) ^ splitmix64(index.wrapping_mul(0x2545_F491_4F6C_DD1D)));
    (h << 1) | u64::from(split == Split::Test)
}

pub fn build_manifest(n: usize, seed: u64, split: Split, priors: &AttributePriors) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    Ok((0..n as u64)
        .map(|i| {
            let s = item_seed(seed, split, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            ManifestEntry { seed: s, split, attrs: sample_attributes(&mut rng, priors) }
        })
        .collect())
}

pub fn build_dataset(n: usize, seed: u64, split: Split, resolution: usize) -> Result<Vec<LabeledImage>> {
    build_manifest(n, seed, split, &AttributePriors::default())?
        .iter()
        .map(|e| e.render(resolution))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| CoreError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        e.attrs.validate()?;
        out.push(e);
    }
    Ok(out)
}

/// Renders entries into a `[B, 3, R, R]` batch.
pub fn render_batch<T: Scalar>(entries: &[&ManifestEntry], resolution: usize) -> Result<Tensor<T>> {
    let imgs = entries
        .iter()
        .map(|e| e.render(resolution).map(|im| im.pixels.cast::<T>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&imgs)?)
}

/// A manifest rendered once and kept in memory.
#[derive(Debug, Clone)]
pub struct RenderedSet<T: Scalar> {
    pub entries: Vec<ManifestEntry>,
    /// `[n, 3, R, R]`
    pub images: Tensor<T>,
    pub resolution: usize,
}

impl<T: Scalar> RenderedSet<T> {
    pub fn new(entries: Vec<ManifestEntry>, resolution: usize) -> Result<Self> {
        let refs: Vec<&ManifestEntry> = entries.iter().collect();
        let images = render_batch(&refs, resolution)?;
        Ok(Self { entries, images, resolution })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<T> {
        self.images.select_batch(idx)
    }

    /// Indices of items with and without a binary attribute.
    pub fn partition(&self, attribute: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut with = Vec::new();
        let mut without = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.attrs.has(attribute)? {
                with.push(i);
            } else {
                without.push(i);
            }
        }
        Ok((with, without))
    }
}
