//! GradCAM saliency maps and multiplicative masking for masked inference.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{io, Tensor};
use crate::synthdata::{IMAGE_SIZE, NUM_CLASSES};
use crate::target_model::{forward, head_backward, ActivationStack, ConvNetParams, HeadParams};

const DEGENERATE_EPS: f64 = 1e-12;

/// Per-pixel importance in [0, 1] for one (image, class) pair.
///
/// Max-normalized unless the raw map is identically zero, in which case the
/// zero map is kept and flagged degenerate.
#[derive(Debug, Clone)]
pub struct Saliency {
    pub map: Tensor,
    pub image_id: u64,
    pub class: usize,
    pub degenerate: bool,
}

impl Saliency {
    pub fn with_image_id(mut self, id: u64) -> Self {
        self.image_id = id;
        self
    }

    /// The identity mask: all ones.
    pub fn ones(image_id: u64, class: usize) -> Self {
        Saliency {
            map: Tensor::filled(&[IMAGE_SIZE, IMAGE_SIZE], 1.0),
            image_id,
            class,
            degenerate: false,
        }
    }
}

/// Bilinear upsampling with half-pixel sample centers, clamped at borders.
pub fn bilinear_upsample(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if src.rank() != 2 {
        return Err(Error::InvalidInput(format!(
            "upsample expects a 2-D map, got {:?}",
            src.shape()
        )));
    }
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let data = src.data();
    let mut out = vec![0.0f64; out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..out_w {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
            let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
            out[i * out_w + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// GradCAM on an activation stack laid out over a `grid_h x grid_w` grid:
/// channel weights are the spatial mean of the class logit's gradient, the
/// weighted map is rectified, upsampled, and divided by its max.
pub fn gradcam_from_stack(
    stack: &ActivationStack,
    head: &HeadParams,
    class: usize,
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, bool)> {
    if class >= head.classes() {
        return Err(Error::InvalidInput(format!(
            "class {class} out of range for {} classes",
            head.classes()
        )));
    }
    let t = stack.positions();
    let n = stack.dim();
    if grid_h * grid_w != t {
        return Err(Error::InvalidInput(format!(
            "grid {grid_h}x{grid_w} does not cover {t} positions"
        )));
    }
    let mut onehot = vec![0.0f64; head.classes()];
    onehot[class] = 1.0;
    let (grad_stack, _, _) = head_backward(stack, head, &onehot);

    // alpha_k: spatial mean of d logit_class / d A_k.
    let g = grad_stack.data();
    let mut alpha = vec![0.0f64; n];
    for p in 0..t {
        for k in 0..n {
            alpha[k] += g[p * n + k];
        }
    }
    for a in &mut alpha {
        *a /= t as f64;
    }

    let mut coarse = vec![0.0f64; t];
    for (p, c) in coarse.iter_mut().enumerate() {
        let pos = stack.position(p);
        let mut acc = 0.0;
        for k in 0..n {
            acc += alpha[k] * pos[k];
        }
        *c = acc.max(0.0);
    }

    let coarse = Tensor::from_vec(&[grid_h, grid_w], coarse)?;
    let mut map = bilinear_upsample(&coarse, out_h, out_w)?;
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    if max <= DEGENERATE_EPS {
        return Ok((Tensor::zeros(&[out_h, out_w]), true));
    }
    for v in map.data_mut() {
        *v /= max;
    }
    Ok((map, false))
}

/// GradCAM saliency for the target network at full input resolution.
pub fn gradcam(params: &ConvNetParams, image: &Tensor, class: usize) -> Result<Saliency> {
    if class >= NUM_CLASSES {
        return Err(Error::InvalidInput(format!(
            "class {class} out of range for {NUM_CLASSES} classes"
        )));
    }
    let (stack, _) = forward(params, image)?;
    let (map, degenerate) =
        gradcam_from_stack(&stack, &params.head, class, 4, 4, IMAGE_SIZE, IMAGE_SIZE)?;
    Ok(Saliency {
        map,
        image_id: 0,
        class,
        degenerate,
    })
}

/// Multiply every channel of `image` by the saliency map.
pub fn apply_mask(image: &Tensor, saliency: &Saliency) -> Result<Tensor> {
    let ishape = image.shape();
    if ishape.len() != 3 || saliency.map.shape() != [ishape[1], ishape[2]] {
        return Err(Error::InvalidInput(format!(
            "mask shape {:?} does not match image {:?}",
            saliency.map.shape(),
            ishape
        )));
    }
    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
    let img = image.data();
    let m = saliency.map.data();
    let mut out = vec![0.0f64; img.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for p in 0..h * w {
            out[base + p] = img[base + p] * m[p];
        }
    }
    Tensor::from_vec(ishape, out)
}

#[derive(Serialize, Deserialize)]
struct SaliencyEntry {
    image_id: u64,
    class: usize,
    degenerate: bool,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct SaliencyManifest {
    entries: Vec<SaliencyEntry>,
}

/// Write one binary tensor per saliency map plus a JSON manifest.
pub fn save_saliency_cache(dir: &Path, maps: &[Saliency]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(maps.len());
    for s in maps {
        let file = format!("{:06}_c{}.bin", s.image_id, s.class);
        io::write_tensor(&dir.join(&file), &s.map)?;
        entries.push(SaliencyEntry {
            image_id: s.image_id,
            class: s.class,
            degenerate: s.degenerate,
            file,
        });
    }
    entries.sort_by_key(|e| (e.image_id, e.class));
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&SaliencyManifest { entries })?,
    )?;
    Ok(())
}

pub fn load_saliency_cache(dir: &Path) -> Result<Vec<Saliency>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "saliency manifest {}",
            manifest_path.display()
        )));
    }
    let manifest: SaliencyManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let map = io::read_tensor(&dir.join(&e.file))?;
        if map.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Format(format!(
                "saliency {} has shape {:?}",
                e.file,
                map.shape()
            )));
        }
        out.push(Saliency {
            map,
            image_id: e.image_id,
            class: e.class,
            degenerate: e.degenerate,
        });
    }
    Ok(out)
}
