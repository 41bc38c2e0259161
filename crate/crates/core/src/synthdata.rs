//! Procedural four-class color x shape dataset with ground-truth attributes
//! and the two simulated-user annotation maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{io, RngStream, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 4;

pub const RED: [f64; 3] = [0.85, 0.10, 0.10];
pub const ORANGE: [f64; 3] = [0.95, 0.55, 0.10];

/// Six muted background hues, all far from the two foreground colors.
pub const BACKGROUNDS: [[f64; 3]; 6] = [
    [0.55, 0.75, 0.85],
    [0.45, 0.85, 0.55],
    [0.65, 0.55, 0.85],
    [0.80, 0.80, 0.80],
    [0.30, 0.45, 0.60],
    [0.90, 0.85, 0.70],
];

/// Discrete object scales (circumradius in pixels), mirroring the discrete
/// scale grid of the factor dataset this set stands in for.
pub const SCALES: [f64; 4] = [8.0, 10.0, 12.0, 14.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Cylinder,
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorKind {
    Red,
    Orange,
}

/// The two simulated annotators: one classifies by color alone, one by shape
/// alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserKind {
    ColorUser,
    ShapeUser,
}

impl UserKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            UserKind::ColorUser => "color_user",
            UserKind::ShapeUser => "shape_user",
        }
    }

    pub fn parse(s: &str) -> Result<UserKind> {
        match s {
            "color_user" => Ok(UserKind::ColorUser),
            "shape_user" => Ok(UserKind::ShapeUser),
            other => Err(Error::Config(format!("unknown user kind '{other}'"))),
        }
    }
}

/// Attributes of one rendered image. `scale` is the circumradius in pixels,
/// so "center +- scale inside the canvas" guarantees containment under any
/// rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub rotation: f64,
    pub background: usize,
}

impl ShapeSpec {
    pub fn is_valid(&self) -> bool {
        let size = IMAGE_SIZE as f64;
        self.scale > 0.0
            && self.cx - self.scale >= 0.0
            && self.cy - self.scale >= 0.0
            && self.cx + self.scale <= size
            && self.cy + self.scale <= size
            && self.background < BACKGROUNDS.len()
            && self.rotation.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub true_label: usize,
    pub spec: ShapeSpec,
    pub id: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub seed: u64,
    pub n_per_class: usize,
}

/// Class index of an attribute pair: `2*(color == orange) + (shape == cube)`.
pub fn class_label(spec: &ShapeSpec) -> usize {
    class_of(spec.color, spec.shape)
}

pub fn class_of(color: ColorKind, shape: ShapeKind) -> usize {
    2 * (color == ColorKind::Orange) as usize + (shape == ShapeKind::Cube) as usize
}

pub fn attributes_of_class(class: usize) -> (ColorKind, ShapeKind) {
    let color = if class >= 2 {
        ColorKind::Orange
    } else {
        ColorKind::Red
    };
    let shape = if class % 2 == 1 {
        ShapeKind::Cube
    } else {
        ShapeKind::Cylinder
    };
    (color, shape)
}

/// Class label as perceived by a simulated user.
///
/// The color user collapses both shapes of a color onto that color's
/// cylinder class; the shape user collapses both colors of a shape onto the
/// red class of that shape. The canonical representatives keep the merged
/// labels inside the original four-class space.
pub fn merge_class(class: usize, user: UserKind) -> usize {
    match user {
        UserKind::ColorUser => (class / 2) * 2,
        UserKind::ShapeUser => class % 2,
    }
}

pub fn user_label(spec: &ShapeSpec, user: UserKind) -> usize {
    merge_class(class_label(spec), user)
}

fn foreground(color: ColorKind) -> [f64; 3] {
    match color {
        ColorKind::Red => RED,
        ColorKind::Orange => ORANGE,
    }
}

const SUBSAMPLES: usize = 3;

/// Rasterize a spec onto a 3 x 32 x 32 canvas.
///
/// Cylinders draw as filled circles of radius `scale`; cubes as filled
/// squares of circumradius `scale` rotated by `rotation`. Edges blend by
/// 3x3 subpixel coverage; fully covered pixels carry the exact palette
/// value and fully outside pixels the exact background value.
pub fn render(spec: &ShapeSpec) -> Tensor {
    let size = IMAGE_SIZE;
    let bg = BACKGROUNDS[spec.background % BACKGROUNDS.len()];
    let fg = foreground(spec.color);
    let mut data = vec![0.0f64; 3 * size * size];
    let (sin_r, cos_r) = spec.rotation.sin_cos();
    // Half side of the square whose circumradius is `scale`.
    let half_side = spec.scale / std::f64::consts::SQRT_2;
    let inside = |px: f64, py: f64| -> bool {
        match spec.shape {
            ShapeKind::Cylinder => px * px + py * py <= spec.scale * spec.scale,
            ShapeKind::Cube => {
                let u = px * cos_r + py * sin_r;
                let v = -px * sin_r + py * cos_r;
                u.abs() <= half_side && v.abs() <= half_side
            }
        }
    };
    let step = 1.0 / SUBSAMPLES as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let px = x as f64 + (sx as f64 + 0.5) * step - spec.cx;
                    let py = y as f64 + (sy as f64 + 0.5) * step - spec.cy;
                    if inside(px, py) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
            for c in 0..3 {
                data[(c * size + y) * size + x] = coverage * fg[c] + (1.0 - coverage) * bg[c];
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("canvas shape")
}

fn sample_spec(rng: &mut RngStream, color: ColorKind, shape: ShapeKind) -> ShapeSpec {
    let scale = rng.range_f64(MIN_SCALE, MAX_SCALE);
    let cx = rng.range_f64(scale, IMAGE_SIZE as f64 - scale);
    let cy = rng.range_f64(scale, IMAGE_SIZE as f64 - scale);
    let rotation = rng.range_f64(0.0, std::f64::consts::TAU);
    let background = rng.below(BACKGROUNDS.len());
    ShapeSpec {
        shape,
        color,
        cx,
        cy,
        scale,
        rotation,
        background,
    }
}

/// Generate `4 * n_per_class` images with a stratified 80/20 train/test
/// split, reproducible from the seed.
pub fn generate_dataset(seed: u64, n_per_class: usize) -> Result<DatasetSplit> {
    if n_per_class < 5 {
        return Err(Error::InvalidInput(format!(
            "n_per_class must be at least 5, got {n_per_class}"
        )));
    }
    let root = RngStream::new(seed).substream("synthdata");
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train = (n_per_class * 4) / 5;
    for class in 0..NUM_CLASSES {
        let (color, shape) = attributes_of_class(class);
        let mut spec_rng = root.substream_indexed("specs", class as u64);
        let mut images: Vec<LabeledImage> = (0..n_per_class)
            .map(|i| {
                let spec = sample_spec(&mut spec_rng, color, shape);
                LabeledImage {
                    pixels: render(&spec),
                    true_label: class,
                    spec,
                    id: (class * n_per_class + i) as u64,
                }
            })
            .collect();
        let mut split_rng = root.substream_indexed("split", class as u64);
        let mut order: Vec<usize> = (0..n_per_class).collect();
        split_rng.shuffle(&mut order);
        let mut chosen = vec![false; n_per_class];
        for &idx in order.iter().take(n_train) {
            chosen[idx] = true;
        }
        // Drain in id order so both splits stay sorted by id.
        for (idx, img) in images.drain(..).enumerate() {
            if chosen[idx] {
                train.push(img);
            } else {
                test.push(img);
            }
        }
    }
    train.sort_by_key(|im| im.id);
    test.sort_by_key(|im| im.id);
    Ok(DatasetSplit {
        train,
        test,
        seed,
        n_per_class,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: u64,
    spec: ShapeSpec,
    label: usize,
    split: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    n_per_class: usize,
    images: Vec<ManifestEntry>,
}

/// Write `manifest.json` plus one binary tensor file per image.
pub fn save_dataset(dir: &Path, split: &DatasetSplit) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut entries = Vec::new();
    for (part, name) in [(&split.train, "train"), (&split.test, "test")] {
        for img in part.iter() {
            entries.push(ManifestEntry {
                id: img.id,
                spec: img.spec,
                label: img.true_label,
                split: name.to_string(),
            });
            io::write_tensor(&images_dir.join(format!("{:06}.bin", img.id)), &img.pixels)?;
        }
    }
    entries.sort_by_key(|e| e.id);
    let manifest = Manifest {
        seed: split.seed,
        n_per_class: split.n_per_class,
        images: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "dataset manifest {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in manifest.images {
        if entry.label != class_label(&entry.spec) {
            return Err(Error::Format(format!(
                "image {} label {} does not match its spec",
                entry.id, entry.label
            )));
        }
        let pixels = io::read_tensor(&dir.join("images").join(format!("{:06}.bin", entry.id)))?;
        if pixels.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Format(format!(
                "image {} has shape {:?}",
                entry.id,
                pixels.shape()
            )));
        }
        let img = LabeledImage {
            pixels,
            true_label: entry.label,
            spec: entry.spec,
            id: entry.id,
        };
        match entry.split.as_str() {
            "train" => train.push(img),
            "test" => test.push(img),
            other => return Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
    train.sort_by_key(|im| im.id);
    test.sort_by_key(|im| im.id);
    Ok(DatasetSplit {
        train,
        test,
        seed: manifest.seed,
        n_per_class: manifest.n_per_class,
    })
}
