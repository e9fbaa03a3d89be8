//! Deterministic two-domain synthetic shapes benchmark.
//!
//! Images are 8-bit RGB scenes of 2-6 non-overlapping shapes on a
//! textured background. Every category carries a distinctive
//! luminance micro-texture (a 4x4 Walsh pattern tiled in image
//! coordinates), which is what the toy visual encoder reads; base
//! colors, photometric shifts and per-pixel noise act as nuisance
//! variation on top. Labels are single-channel index maps; generation
//! is a pure function of `(spec, seed)`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::IGNORE_INDEX;
use crate::rng::indexed_stream;

/// Amplitude of the category texture signature, in 8-bit luminance.
pub const TEXTURE_AMPLITUDE: f64 = 14.0;

/// Side of the tiled texture pattern.
pub const PATTERN_PERIOD: usize = 4;

/// Background category id in the toy ontology.
pub const BACKGROUND_ID: u32 = 0;

const HADAMARD4: [[f64; 4]; 4] = [
    [1.0, 1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
];

/// Non-DC Walsh index pair assigned to a category; patterns of
/// distinct categories are exactly orthogonal over one 4x4 tile.
fn walsh_pair(category: u32) -> (usize, usize) {
    const PAIRS: [(usize, usize); 15] = [
        (0, 1),
        (1, 0),
        (1, 1),
        (0, 2),
        (2, 0),
        (2, 2),
        (1, 2),
        (2, 1),
        (0, 3),
        (3, 0),
        (3, 3),
        (1, 3),
        (3, 1),
        (2, 3),
        (3, 2),
    ];
    PAIRS[category as usize % PAIRS.len()]
}

/// Texture signature sign at image coordinates `(x, y)`.
pub fn walsh_sign(category: u32, x: usize, y: usize) -> f64 {
    let (u, v) = walsh_pair(category);
    HADAMARD4[u][x % PATTERN_PERIOD] * HADAMARD4[v][y % PATTERN_PERIOD]
}

/// Photometric transform of a domain: brightness offset, contrast
/// multiplier around mid-gray and a hue rotation fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhotometricShift {
    #[serde(default)]
    pub brightness: f64,
    #[serde(default = "one")]
    pub contrast: f64,
    #[serde(default)]
    pub hue: f64,
}

fn one() -> f64 {
    1.0
}

impl PhotometricShift {
    pub fn none() -> Self {
        PhotometricShift {
            brightness: 0.0,
            contrast: 1.0,
            hue: 0.0,
        }
    }

    fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let rotated = [rgb[1], rgb[2], rgb[0]];
        let mut out = [0.0; 3];
        for c in 0..3 {
            let mixed = (1.0 - self.hue) * rgb[c] + self.hue * rotated[c];
            out[c] = (mixed - 128.0) * self.contrast + 128.0 + self.brightness;
        }
        out
    }
}

/// One domain of the benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Category ids present (background plus shape categories).
    pub categories: Vec<u32>,
    #[serde(default)]
    pub photometric_shift: PhotometricShift,
    /// Uniform per-channel pixel noise amplitude.
    #[serde(default)]
    pub texture_noise: f64,
    pub num_images: usize,
    pub seed: u64,
    /// Square image side in pixels.
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_size() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// An image with an optional dense label map.
#[derive(Debug, Clone)]
pub struct SegmentationSample {
    pub image: Array3<u8>,
    pub label: Option<Array2<u8>>,
    pub domain: Domain,
    pub id: String,
}

impl SegmentationSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

fn shape_mask(kind: u32, size: usize, horizontal: bool) -> Array2<bool> {
    let mut mask = Array2::from_elem((size, size), false);
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let inside = match kind {
                1 => dx * dx + dy * dy <= (0.48 * s).powi(2), // circle
                2 => dx.abs() <= 0.45 * s && dy.abs() <= 0.45 * s, // square
                3 => {
                    // upward triangle
                    let fy = y as f64 / s;
                    dy >= -0.45 * s && dx.abs() <= 0.5 * s * fy && dy <= 0.45 * s
                }
                4 => {
                    // cross: two crossing bars
                    (dx.abs() <= 0.16 * s && dy.abs() <= 0.48 * s)
                        || (dy.abs() <= 0.16 * s && dx.abs() <= 0.48 * s)
                }
                5 => {
                    // ring
                    let r2 = dx * dx + dy * dy;
                    r2 <= (0.48 * s).powi(2) && r2 >= (0.27 * s).powi(2)
                }
                6 => {
                    // bar
                    if horizontal {
                        dx.abs() <= 0.48 * s && dy.abs() <= 0.16 * s
                    } else {
                        dy.abs() <= 0.48 * s && dx.abs() <= 0.16 * s
                    }
                }
                _ => false,
            };
            if inside {
                mask[[y, x]] = true;
            }
        }
    }
    mask
}

const COLOR_PALETTE: [[f64; 3]; 3] = [
    [200.0, 64.0, 64.0],
    [64.0, 182.0, 72.0],
    [72.0, 92.0, 202.0],
];

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Render one clean scene (shapes + textures + noise), before the
/// domain's photometric shift.
fn render_scene(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> (Array3<f64>, Array2<u8>) {
    let size = spec.size;
    let mut label = Array2::from_elem((size, size), BACKGROUND_ID as u8);

    // Background base color: near-gray with a mild seeded tint.
    let g0: f64 = rng.gen_range(105.0..160.0);
    let bg = [
        g0 + rng.gen_range(-9.0..9.0),
        g0 + rng.gen_range(-9.0..9.0),
        g0 + rng.gen_range(-9.0..9.0),
    ];

    let shape_ids: Vec<u32> = spec
        .categories
        .iter()
        .copied()
        .filter(|id| *id != BACKGROUND_ID)
        .collect();

    // Place 2-6 non-overlapping shapes by rejection sampling.
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new(); // (y, x, side)
    let mut placed: Vec<(u32, usize, usize, usize, [f64; 3], bool)> = Vec::new();
    if !shape_ids.is_empty() {
        let count = rng.gen_range(2..=6usize);
        let min_side = (size as f64 / 4.6) as usize;
        let max_side = (size as f64 / 2.1) as usize;
        for _ in 0..count {
            let kind = shape_ids[rng.gen_range(0..shape_ids.len())];
            let side = rng.gen_range(min_side..=max_side);
            let color_base = COLOR_PALETTE[rng.gen_range(0..COLOR_PALETTE.len())];
            let color = [
                color_base[0] + rng.gen_range(-14.0..14.0),
                color_base[1] + rng.gen_range(-14.0..14.0),
                color_base[2] + rng.gen_range(-14.0..14.0),
            ];
            let horizontal = rng.gen_bool(0.5);
            for _attempt in 0..40 {
                let y = rng.gen_range(0..=size - side);
                let x = rng.gen_range(0..=size - side);
                let clash = boxes.iter().any(|(by, bx, bs)| {
                    let sep = y + side <= *by || *by + bs <= y || x + side <= *bx || *bx + bs <= x;
                    !sep
                });
                if !clash {
                    boxes.push((y, x, side));
                    placed.push((kind, y, x, side, color, horizontal));
                    break;
                }
            }
        }
    }

    let mut image = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let tex = TEXTURE_AMPLITUDE * walsh_sign(BACKGROUND_ID, x, y);
            for c in 0..3 {
                image[[y, x, c]] = bg[c] + tex;
            }
        }
    }
    for (kind, oy, ox, side, color, horizontal) in &placed {
        let mask = shape_mask(*kind, *side, *horizontal);
        for my in 0..*side {
            for mx in 0..*side {
                if mask[[my, mx]] {
                    let (y, x) = (oy + my, ox + mx);
                    label[[y, x]] = *kind as u8;
                    let tex = TEXTURE_AMPLITUDE * walsh_sign(*kind, x, y);
                    for c in 0..3 {
                        image[[y, x, c]] = color[c] + tex;
                    }
                }
            }
        }
    }

    if spec.texture_noise > 0.0 {
        let amp = spec.texture_noise;
        for v in image.iter_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }

    (image, label)
}

/// Apply the domain's photometric shift to the image only; the label
/// is never touched.
pub fn domain_shift(sample: &SegmentationSample, spec: &DomainSpec) -> SegmentationSample {
    let (h, w, _) = sample.image.dim();
    let mut image = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let rgb = [
                sample.image[[y, x, 0]] as f64,
                sample.image[[y, x, 1]] as f64,
                sample.image[[y, x, 2]] as f64,
            ];
            let out = spec.photometric_shift.apply(rgb);
            for c in 0..3 {
                image[[y, x, c]] = clamp_u8(out[c]);
            }
        }
    }
    SegmentationSample {
        image,
        label: sample.label.clone(),
        domain: sample.domain,
        id: sample.id.clone(),
    }
}

/// Generate image `index` of a domain (pure function of spec + index).
pub fn generate_sample(spec: &DomainSpec, domain: Domain, index: usize) -> SegmentationSample {
    let mut rng = indexed_stream(spec.seed, "image", index as u64);
    let (clean, label) = render_scene(spec, &mut rng);
    let (h, w, _) = clean.dim();
    let mut image = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let shifted = spec.photometric_shift.apply([
                clean[[y, x, 0]],
                clean[[y, x, 1]],
                clean[[y, x, 2]],
            ]);
            for c in 0..3 {
                image[[y, x, c]] = clamp_u8(shifted[c]);
            }
        }
    }
    SegmentationSample {
        image,
        label: Some(label),
        domain,
        id: format!("{index:04}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    pub label: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub ontology: String,
    pub domain: Domain,
    pub items: Vec<ManifestItem>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn image_to_png_bytes(image: &Array3<u8>) -> Result<Vec<u8>> {
    let (h, w, _) = image.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]]),
            );
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn label_to_png_bytes(label: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = label.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([label[[y, x]]]));
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Render `spec.num_images` scenes and write the dataset directory:
/// `images/NNNN.png`, `labels/NNNN.png` and `manifest.json`. When
/// `with_labels` is false the manifest lists `label: null` (the
/// unlabeled-domain convention); label files are still written so a
/// separate evaluation manifest can reference them.
pub fn gen_dataset(
    spec: &DomainSpec,
    domain: Domain,
    ontology_ref: &str,
    with_labels: bool,
    out: &Path,
) -> Result<Manifest> {
    if spec.num_images == 0 {
        return Err(Error::config("num_images must be >= 1"));
    }
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("labels"))?;

    let mut items = Vec::with_capacity(spec.num_images);
    for index in 0..spec.num_images {
        let sample = generate_sample(spec, domain, index);
        let image_rel = format!("images/{}.png", sample.id);
        let label_rel = format!("labels/{}.png", sample.id);
        let png = image_to_png_bytes(&sample.image)?;
        std::fs::write(out.join(&image_rel), &png)?;
        let label = sample.label.as_ref().expect("generator always labels");
        std::fs::write(out.join(&label_rel), label_to_png_bytes(label)?)?;
        items.push(ManifestItem {
            image: image_rel,
            label: with_labels.then_some(label_rel),
            sha256: sha256_hex(&png),
        });
    }

    let manifest = Manifest {
        ontology: ontology_ref.to_string(),
        domain,
        items,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join("manifest.json"), json)?;
    Ok(manifest)
}

fn decode_image(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode image: {e}"), Some(path.into())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[y, x, c]] = p.0[c];
            }
        }
    }
    Ok(out)
}

fn decode_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode label: {e}"), Some(path.into())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = img.get_pixel(x as u32, y as u32).0[0];
        }
    }
    Ok(out)
}

/// A dataset loaded from disk, samples in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SegmentationSample>,
    pub root: PathBuf,
}

/// Load a dataset directory, verifying each image against its
/// manifest checksum.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("cannot read manifest: {e}"), Some(manifest_path.clone())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;

    let mut samples = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let image_path = path.join(&item.image);
        let bytes = std::fs::read(&image_path)
            .map_err(|e| Error::data(format!("cannot read image: {e}"), Some(image_path.clone())))?;
        let digest = sha256_hex(&bytes);
        if digest != item.sha256 {
            return Err(Error::data(
                format!("checksum mismatch: manifest {} actual {digest}", item.sha256),
                Some(image_path.clone()),
            ));
        }
        let image = decode_image(&image_path)?;
        let label = match &item.label {
            Some(rel) => Some(decode_label(&path.join(rel))?),
            None => None,
        };
        if let Some(l) = &label {
            if l.dim() != (image.dim().0, image.dim().1) {
                return Err(Error::data(
                    "label and image differ in size",
                    Some(image_path.clone()),
                ));
            }
        }
        let id = Path::new(&item.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        samples.push(SegmentationSample {
            image,
            label,
            domain: manifest.domain,
            id,
        });
    }

    Ok(Dataset {
        manifest,
        samples,
        root: path.to_path_buf(),
    })
}

/// Ids present in a label map, ignore pixels excluded.
pub fn present_categories(label: &Array2<u8>) -> BTreeSet<u8> {
    label
        .iter()
        .copied()
        .filter(|v| *v != IGNORE_INDEX)
        .collect()
}
