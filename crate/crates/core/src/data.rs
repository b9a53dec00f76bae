//! Dataset ingestion, augmentation, and a synthetic small-target generator.
//!
//! Datasets live on disk as `root/images/{id}.png` + `root/masks/{id}.png`
//! with a manifest (one id per line, `#` comments) naming a split. Images
//! load as grayscale in `[0,1]`; masks binarize at 128/255 (a warning is
//! logged when a mask held other values). The synthetic generator builds
//! multi-octave value-noise backgrounds with Gaussian targets, which gives
//! every component of the system a deterministic, non-trivial test bed.

use crate::graph::bilinear_resize_value;
use crate::nn::seed_for;
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// One image/mask pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[c, h, w]`, values in `[0,1]`.
    pub image: ArrayD<f64>,
    /// `[h, w]`; binary by construction.
    pub mask: Array2<bool>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 {
            return Err(Error::Data(format!(
                "sample {}: image must be [c,h,w], got {s:?}",
                self.id
            )));
        }
        if (s[1], s[2]) != self.mask.dim() {
            return Err(Error::Data(format!(
                "sample {}: image {s:?} vs mask {:?}",
                self.id,
                self.mask.dim()
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "sample {}: image values outside [0,1]",
                self.id
            )));
        }
        Ok(())
    }

    /// Mask as a float `[h, w]` array of {0,1}.
    pub fn mask_f64(&self) -> ArrayD<f64> {
        let (h, w) = self.mask.dim();
        ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| {
            if self.mask[(ix[0], ix[1])] {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Replicate the grayscale channel to `c` channels (encoder input prep).
    pub fn with_channels(&self, c: usize) -> ArrayD<f64> {
        let s = self.image.shape();
        assert_eq!(s[0], 1, "with_channels expects a grayscale sample");
        let (h, w) = (s[1], s[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[IxDyn(&[ci, i, j])] = self.image[IxDyn(&[0, i, j])];
                }
            }
        }
        out
    }
}

// ----------------------------------------------------------------- loading

/// Parse a manifest: one id per line; blank lines and `#` comments skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_string())
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct DatasetOptions {
    /// Optional manifest of ids to drop (paper-style exclusion lists).
    pub exclude: Option<PathBuf>,
    /// Resize every sample to `(h, w)` on load (bilinear image, nearest
    /// mask) — the eval-resize rule.
    pub resize_to: Option<(usize, usize)>,
}

/// A lazily-loading dataset split: ids in manifest order.
pub struct Dataset {
    root: PathBuf,
    ids: Vec<String>,
    options: DatasetOptions,
}

impl Dataset {
    pub fn open(root: &Path, manifest: &Path, options: DatasetOptions) -> Result<Self> {
        let mut ids = read_manifest(manifest)?;
        if let Some(ex) = &options.exclude {
            let drop: std::collections::BTreeSet<String> =
                read_manifest(ex)?.into_iter().collect();
            ids.retain(|id| !drop.contains(id));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            ids,
            options,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let id = &self.ids[index];
        let img_path = self.root.join("images").join(format!("{id}.png"));
        let mask_path = self.root.join("masks").join(format!("{id}.png"));
        if !mask_path.exists() {
            return Err(Error::Data(format!(
                "no mask for image stem '{id}' (expected {})",
                mask_path.display()
            )));
        }
        let image = load_gray_png(&img_path)?;
        let (mask, was_binary) = load_mask_png(&mask_path)?;
        if !was_binary {
            log::warn!("mask for '{id}' held non-binary values; binarized at 128/255");
        }
        if image.dim() != mask.dim() {
            return Err(Error::Data(format!(
                "sample {id}: image {:?} vs mask {:?}",
                image.dim(),
                mask.dim()
            )));
        }
        let (mut image, mut mask) = (image, mask);
        if let Some((h, w)) = self.options.resize_to {
            image = bilinear_resize_gray(&image, h, w);
            mask = nearest_resize_mask(&mask, h, w);
        }
        let (h, w) = image.dim();
        let image = image
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .expect("image reshape");
        let s = Sample {
            id: id.clone(),
            image,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.len()).map(|i| self.load(i))
    }
}

/// Load a grayscale image file as `[1, h, w]` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ArrayD<f64>> {
    let gray = load_gray_png(path)?;
    let (h, w) = gray.dim();
    Ok(gray
        .into_dyn()
        .into_shape_with_order(IxDyn(&[1, h, w]))
        .expect("image reshape"))
}

/// Load a mask file, binarized at 128/255; the flag reports whether the
/// stored values were strictly binary.
pub fn load_mask(path: &Path) -> Result<(Array2<bool>, bool)> {
    load_mask_png(path)
}

/// Write a binary mask as an 8-bit `{0, 255}` image file.
pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut m = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = if mask[(i, j)] { 255u8 } else { 0 };
            m.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    m.save(path)
        .map_err(|e| Error::Data(format!("saving {}: {e}", path.display())))
}

fn load_gray_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        gray.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0
    }))
}

fn load_mask_png(path: &Path) -> Result<(Array2<bool>, bool)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    // 128/255 in 16-bit units.
    let threshold = 128u32 * 65535 / 255;
    let mut was_binary = true;
    let mask = Array2::from_shape_fn((h, w), |(i, j)| {
        let v = gray.get_pixel(j as u32, i as u32).0[0] as u32;
        if v != 0 && v != 65535 {
            was_binary = false;
        }
        v >= threshold
    });
    Ok((mask, was_binary))
}

/// Write samples to the standard layout (`images/`, `masks/`, `manifest.txt`).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for s in samples {
        s.validate()?;
        let shape = s.image.shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let v = (s.image[IxDyn(&[0, i, j])].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(j as u32, i as u32, image::Luma([v]));
            }
        }
        img.save(dir.join("images").join(format!("{}.png", s.id)))
            .map_err(|e| Error::Data(format!("saving {}: {e}", s.id)))?;
        save_mask(&dir.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

// ------------------------------------------------------------ resampling

/// Bilinear resize of a single-channel `[h, w]` map.
pub fn bilinear_resize_gray(x: &Array2<f64>, ho: usize, wo: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let wrapped = x
        .clone()
        .into_dyn()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .expect("wrap");
    let out = bilinear_resize_value(&wrapped, ho, wo);
    out.into_shape_with_order(IxDyn(&[ho, wo]))
        .expect("unwrap")
        .into_dimensionality()
        .expect("2d")
}

/// Nearest-neighbour resize of a binary mask (half-pixel centres).
pub fn nearest_resize_mask(m: &Array2<bool>, ho: usize, wo: usize) -> Array2<bool> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((ho, wo), |(i, j)| {
        let si = (((i as f64 + 0.5) * h as f64 / ho as f64) as usize).min(h - 1);
        let sj = (((j as f64 + 0.5) * w as f64 / wo as f64) as usize).min(w - 1);
        m[(si, sj)]
    })
}

// ---------------------------------------------------------- augmentation

/// Random resize by a uniform scale then fixed-size crop, applied
/// identically to image and mask (bilinear image, nearest mask). Undersized
/// intermediates are zero-padded before the crop.
pub fn augment<R: Rng>(
    sample: &Sample,
    scale_range: (f64, f64),
    crop: (usize, usize),
    rng: &mut R,
) -> Sample {
    let shape = sample.image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let scale = if scale_range.0 == scale_range.1 {
        scale_range.0
    } else {
        rng.gen_range(scale_range.0..scale_range.1)
    };
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);

    let resized_img = if (nh, nw) == (h, w) {
        sample.image.clone()
    } else {
        let wrapped = sample
            .image
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, h, w]))
            .expect("wrap");
        bilinear_resize_value(&wrapped, nh, nw)
            .into_shape_with_order(IxDyn(&[c, nh, nw]))
            .expect("unwrap")
    };
    let resized_mask = if (nh, nw) == (h, w) {
        sample.mask.clone()
    } else {
        nearest_resize_mask(&sample.mask, nh, nw)
    };

    // Zero-pad up to the crop size if the resize undershot it.
    let (ph, pw) = (nh.max(crop.0), nw.max(crop.1));
    let (padded_img, padded_mask) = if (ph, pw) == (nh, nw) {
        (resized_img, resized_mask)
    } else {
        let mut img = ArrayD::zeros(IxDyn(&[c, ph, pw]));
        for ci in 0..c {
            for i in 0..nh {
                for j in 0..nw {
                    img[IxDyn(&[ci, i, j])] = resized_img[IxDyn(&[ci, i, j])];
                }
            }
        }
        let mut mask = Array2::from_elem((ph, pw), false);
        for i in 0..nh {
            for j in 0..nw {
                mask[(i, j)] = resized_mask[(i, j)];
            }
        }
        (img, mask)
    };

    let oy = if ph > crop.0 {
        rng.gen_range(0..=(ph - crop.0))
    } else {
        0
    };
    let ox = if pw > crop.1 {
        rng.gen_range(0..=(pw - crop.1))
    } else {
        0
    };
    let mut image = ArrayD::zeros(IxDyn(&[c, crop.0, crop.1]));
    for ci in 0..c {
        for i in 0..crop.0 {
            for j in 0..crop.1 {
                image[IxDyn(&[ci, i, j])] = padded_img[IxDyn(&[ci, oy + i, ox + j])];
            }
        }
    }
    let mask = Array2::from_shape_fn((crop.0, crop.1), |(i, j)| padded_mask[(oy + i, ox + j)]);
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

// -------------------------------------------------------------- synthesis

/// Synthetic scene parameters.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of targets per image.
    pub n_targets: (usize, usize),
    /// Target half-peak radius range, pixels.
    pub radius: (f64, f64),
    /// Peak intensity above the local background.
    pub contrast: (f64, f64),
    /// Value-noise octaves in the background.
    pub clutter_octaves: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            n_targets: (1, 3),
            radius: (1.5, 4.0),
            contrast: (0.4, 0.9),
            clutter_octaves: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let canvas = self.height.min(self.width) as f64;
        if self.radius.0 < 1.0 || self.radius.1 > canvas / 8.0 || self.radius.0 > self.radius.1 {
            return Err(Error::Config(format!(
                "synth radius range {:?} must sit within [1, {}]",
                self.radius,
                canvas / 8.0
            )));
        }
        if self.contrast.0 <= 0.0 || self.contrast.0 > self.contrast.1 {
            return Err(Error::Config(format!(
                "synth contrast range {:?} must be positive",
                self.contrast
            )));
        }
        if self.n_targets.0 > self.n_targets.1 {
            return Err(Error::Config(format!(
                "synth n_targets range {:?} inverted",
                self.n_targets
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("synth canvas must be at least 8x8".into()));
        }
        Ok(())
    }
}

/// Generate the `index`-th sample of the stream: a pure function of
/// `(config.seed, index)`.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, &format!("synth.{index}")));
    let (h, w) = (cfg.height, cfg.width);

    // Background: multi-octave value noise, normalized, plus a smooth ramp.
    let mut bg = Array2::<f64>::zeros((h, w));
    let mut total_amp = 0.0;
    for o in 0..cfg.clutter_octaves.max(1) {
        let n = (1usize << (o + 1)) + 1;
        let grid = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>());
        let up = bilinear_resize_gray(&grid, h, w);
        let amp = 0.5f64.powi(o as i32);
        bg.scaled_add(amp, &up);
        total_amp += amp;
    }
    bg.mapv_inplace(|v| v / total_amp * 0.35);
    let theta = rng.gen::<f64>() * std::f64::consts::TAU;
    for i in 0..h {
        for j in 0..w {
            let y = i as f64 / h as f64;
            let x = j as f64 / w as f64;
            bg[(i, j)] += (theta.cos() * x + theta.sin() * y + 1.0) / 2.0 * 0.15;
        }
    }

    // Targets: Gaussian blobs; the GT mask is the half-peak disk.
    let n_targets = if cfg.n_targets.0 == cfg.n_targets.1 {
        cfg.n_targets.0
    } else {
        rng.gen_range(cfg.n_targets.0..=cfg.n_targets.1)
    };
    let mut image = bg;
    let mut mask = Array2::from_elem((h, w), false);
    let mut centers: Vec<(f64, f64, f64)> = Vec::new(); // (cy, cx, r)
    for _ in 0..n_targets {
        let r = if cfg.radius.0 == cfg.radius.1 {
            cfg.radius.0
        } else {
            rng.gen_range(cfg.radius.0..cfg.radius.1)
        };
        let margin = (2.0 * r + 1.0).ceil();
        let mut placed = None;
        for _attempt in 0..50 {
            let cy = rng.gen_range(margin..(h as f64 - margin));
            let cx = rng.gen_range(margin..(w as f64 - margin));
            let clear = centers
                .iter()
                .all(|&(py, px, pr)| {
                    let d = ((cy - py).powi(2) + (cx - px).powi(2)).sqrt();
                    d > 2.0 * (r + pr)
                });
            if clear {
                placed = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = placed else { continue };
        centers.push((cy, cx, r));
        let a = if cfg.contrast.0 == cfg.contrast.1 {
            cfg.contrast.0
        } else {
            rng.gen_range(cfg.contrast.0..cfg.contrast.1)
        };
        // Half peak at distance r: sigma = r / sqrt(2 ln 2).
        let sigma2 = r * r / (2.0 * std::f64::consts::LN_2);
        let reach = (3.0 * r).ceil() as isize;
        let (icy, icx) = (cy.round() as isize, cx.round() as isize);
        for i in (icy - reach).max(0)..(icy + reach + 1).min(h as isize) {
            for j in (icx - reach).max(0)..(icx + reach + 1).min(w as isize) {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let contrib = a * (-d2 / (2.0 * sigma2)).exp();
                image[(i as usize, j as usize)] += contrib;
                if contrib > a / 2.0 {
                    mask[(i as usize, j as usize)] = true;
                }
            }
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let image = image
        .into_dyn()
        .into_shape_with_order(IxDyn(&[1, h, w]))
        .expect("image shape");
    Sample {
        id: format!("synth-{index:05}"),
        image,
        mask,
    }
}

/// Generate `count` samples.
pub fn synth_generate(cfg: &SynthConfig, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..count).map(|i| synth_sample(cfg, i)).collect())
}

/// Validate that every sample shares one `[c, h, w]` geometry and return it.
/// Training loops require a uniform batch shape, so a mixed dataset is a
/// data error, not a shape error deep inside the model.
pub fn uniform_geometry(samples: &[Sample]) -> Result<(usize, usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let s = first.image.shape().to_vec();
    for sample in samples {
        if sample.image.shape() != s.as_slice() {
            return Err(Error::Data(format!(
                "sample {}: image shape {:?} differs from {:?}",
                sample.id,
                sample.image.shape(),
                s
            )));
        }
        sample.validate()?;
    }
    Ok((s[0], s[1], s[2]))
}
