use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use super::png::{self, Plane};
use crate::error::{PdfnetError, Result};
use crate::ops;

pub const IMAGES_DIR: &str = "images";
pub const DEPTHS_DIR: &str = "depths";
pub const DEPTHS_HQ_DIR: &str = "depths_hq";
pub const MASKS_DIR: &str = "masks";

/// Aligned image / pseudo-depth / mask sample, batched along dim 0.
///
/// `depth` is the network input; `depth_target` is the supervision depth used
/// by the depth decoder and the integrity-prior loss (the high-quality map when
/// one was found on disk, otherwise the input depth again).
#[derive(Debug, Clone)]
pub struct DepthTriplet {
    pub image: Tensor,
    pub depth: Tensor,
    pub depth_target: Tensor,
    pub mask: Tensor,
    pub sample_id: String,
}

impl DepthTriplet {
    /// Validates shapes and value ranges before constructing the triplet.
    pub fn new(image: Tensor, depth: Tensor, depth_target: Option<Tensor>, mask: Tensor, sample_id: impl Into<String>) -> Result<Self> {
        let depth_target = depth_target.unwrap_or_else(|| depth.clone());
        let (b, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(PdfnetError::shape(format!("image must have 3 channels, got {c}")));
        }
        for (name, t) in [("depth", &depth), ("depth target", &depth_target), ("mask", &mask)] {
            if t.dims() != [b, 1, h, w] {
                return Err(PdfnetError::shape(format!(
                    "{name} shape {:?} does not match image {:?}",
                    t.dims(),
                    image.dims()
                )));
            }
        }
        let check_range = |t: &Tensor, name: &str| -> Result<()> {
            for v in ops::to_f64_vec(t)? {
                if !v.is_finite() {
                    return Err(PdfnetError::Data(format!("{name} has a non-finite pixel")));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(PdfnetError::Data(format!("{name} value {v} outside [0, 1]")));
                }
            }
            Ok(())
        };
        check_range(&image, "image")?;
        check_range(&depth, "depth")?;
        check_range(&depth_target, "depth target")?;
        if ops::to_f64_vec(&mask)?.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(PdfnetError::Data("mask is not binary".into()));
        }
        Ok(Self {
            image,
            depth,
            depth_target,
            mask,
            sample_id: sample_id.into(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.image.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.image.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[3]
    }

    /// Concatenates samples along the batch axis; ids are joined with `+`.
    pub fn stack(items: &[DepthTriplet]) -> Result<Self> {
        if items.is_empty() {
            return Err(PdfnetError::EmptyInput("cannot stack zero triplets".into()));
        }
        let cat = |f: fn(&DepthTriplet) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = items.iter().map(f).collect();
            Ok(Tensor::cat(&ts, 0)?)
        };
        Ok(Self {
            image: cat(|t| &t.image)?,
            depth: cat(|t| &t.depth)?,
            depth_target: cat(|t| &t.depth_target)?,
            mask: cat(|t| &t.mask)?,
            sample_id: items.iter().map(|t| t.sample_id.as_str()).collect::<Vec<_>>().join("+"),
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            image: self.image.to_dtype(dtype)?,
            depth: self.depth.to_dtype(dtype)?,
            depth_target: self.depth_target.to_dtype(dtype)?,
            mask: self.mask.to_dtype(dtype)?,
            sample_id: self.sample_id.clone(),
        })
    }

    /// Builds a batch-1 triplet from decoded planes.
    pub fn from_planes(image: &Plane, depth: &Plane, depth_target: Option<&Plane>, mask: &Plane, sample_id: &str) -> Result<Self> {
        let dev = Device::Cpu;
        let to_tensor = |p: &Plane| -> Result<Tensor> {
            Ok(Tensor::from_vec(p.data.clone(), (1, p.channels, p.height, p.width), &dev)?)
        };
        let target = depth_target.map(to_tensor).transpose()?;
        Self::new(to_tensor(image)?, to_tensor(depth)?, target, to_tensor(mask)?, sample_id)
    }

    /// Extracts batch element `index` as CHW planes (image, depth, depth target, mask).
    pub fn planes(&self, index: usize) -> Result<(Plane, Plane, Plane, Plane)> {
        let (h, w) = (self.height(), self.width());
        let take = |t: &Tensor, c: usize| -> Result<Plane> {
            let v = t.get(index)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            Ok(Plane::new(c, h, w, v))
        };
        Ok((
            take(&self.image, 3)?,
            take(&self.depth, 1)?,
            take(&self.depth_target, 1)?,
            take(&self.mask, 1)?,
        ))
    }
}

pub fn sample_path(root: &Path, dir: &str, sample_id: &str) -> PathBuf {
    root.join(dir).join(format!("{sample_id}.png"))
}

/// Loads `images/`, `depths/` and `masks/` PNGs sharing the stem `sample_id`.
///
/// When `resolution` is set, image and depth are resized bilinearly and the mask
/// with nearest neighbour; the mask is binarized at 0.5 afterwards. A sibling
/// `depths_hq/` file, if present, becomes the supervision depth.
pub fn load_triplet(root: &Path, sample_id: &str, resolution: Option<(usize, usize)>) -> Result<DepthTriplet> {
    let image = png::read_rgb(&sample_path(root, IMAGES_DIR, sample_id))?;
    let depth = png::read_gray(&sample_path(root, DEPTHS_DIR, sample_id))?;
    let mask_path = sample_path(root, MASKS_DIR, sample_id);
    let mask = png::read_gray(&mask_path)?;
    let hq_path = sample_path(root, DEPTHS_HQ_DIR, sample_id);
    let depth_hq = if hq_path.exists() {
        Some(png::read_gray(&hq_path)?)
    } else {
        None
    };

    let (image, depth, depth_hq, mask) = match resolution {
        Some((h, w)) => {
            if h == 0 || w == 0 {
                return Err(PdfnetError::shape(format!("invalid resolution {h}x{w}")));
            }
            (
                png::resize_smooth(&image, h, w),
                png::resize_smooth(&depth, h, w),
                depth_hq.map(|d| png::resize_smooth(&d, h, w)),
                png::resize_nearest(&mask, h, w),
            )
        }
        None => (image, depth, depth_hq, mask),
    };

    let dims = (image.height, image.width);
    for (name, p) in [("depth", Some(&depth)), ("depth_hq", depth_hq.as_ref()), ("mask", Some(&mask))] {
        if let Some(p) = p {
            if (p.height, p.width) != dims {
                return Err(PdfnetError::shape(format!(
                    "{sample_id}: {name} is {}x{} but image is {}x{}",
                    p.height, p.width, dims.0, dims.1
                )));
            }
        }
    }
    for (name, p) in [("image", &image), ("depth", &depth), ("mask", &mask)] {
        if p.data.iter().any(|v| !v.is_finite()) {
            return Err(PdfnetError::Data(format!("{sample_id}: non-finite pixel in {name}")));
        }
    }
    let clamp = |p: Plane| Plane {
        data: p.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        ..p
    };
    let mask = Plane {
        data: mask.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        ..mask
    };
    DepthTriplet::from_planes(&clamp(image), &clamp(depth), depth_hq.map(clamp).as_ref(), &mask, sample_id)
}

/// Sorted sample stems found under `root/images`.
pub fn list_samples(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(IMAGES_DIR);
    if !dir.is_dir() {
        return Err(PdfnetError::NotFound(dir));
    }
    let mut ids: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| PdfnetError::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_sample(root: &Path, id: &str, mask: &[f32], depth16: &[f32]) {
        let n = mask.len();
        let side = (n as f64).sqrt() as usize;
        png::write_rgb8(&sample_path(root, IMAGES_DIR, id), &Plane::new(3, side, side, vec![0.5; 3 * n])).unwrap();
        png::write_gray16(&sample_path(root, DEPTHS_DIR, id), &Plane::new(1, side, side, depth16.to_vec())).unwrap();
        png::write_gray8(&sample_path(root, MASKS_DIR, id), &Plane::new(1, side, side, mask.to_vec())).unwrap();
    }

    #[test]
    fn black_mask_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", &[0.0; 16], &[0.3; 16]);
        let t = load_triplet(dir.path(), "a", None).unwrap();
        assert!(ops::to_f64_vec(&t.mask).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_16bit_depth_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", &[1.0; 16], &[1.0; 16]);
        let t = load_triplet(dir.path(), "a", None).unwrap();
        assert!(ops::to_f64_vec(&t.depth).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masked_depth_mean_of_fixture() {
        // 4x4 fixture, centre 2x2 foreground at depth 0.5, background ramp
        let dir = tempfile::tempdir().unwrap();
        let mut mask = vec![0.0f32; 16];
        let mut depth = vec![0.0f32; 16];
        for y in 0..4 {
            for x in 0..4 {
                let i = y * 4 + x;
                if (1..3).contains(&y) && (1..3).contains(&x) {
                    mask[i] = 1.0;
                    depth[i] = 0.5;
                } else {
                    depth[i] = x as f32 / 3.0;
                }
            }
        }
        write_sample(dir.path(), "fx", &mask, &depth);
        let t = load_triplet(dir.path(), "fx", None).unwrap();
        let d = ops::to_f64_vec(&t.depth).unwrap();
        let m = ops::to_f64_vec(&t.mask).unwrap();
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..16 {
            s += d[i] * m[i];
            n += m[i];
        }
        // 0.5 quantized to 16 bit is 32768/65535
        assert!((s / n - 0.5).abs() < 1e-4);
        assert_eq!(n, 4.0);
    }

    #[test]
    fn missing_depth_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", &[0.0; 16], &[0.3; 16]);
        std::fs::remove_file(sample_path(dir.path(), DEPTHS_DIR, "a")).unwrap();
        assert!(matches!(load_triplet(dir.path(), "a", None), Err(PdfnetError::NotFound(_))));
    }

    #[test]
    fn native_size_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", &[0.0; 16], &[0.3; 16]);
        png::write_gray8(&sample_path(dir.path(), MASKS_DIR, "a"), &Plane::new(1, 2, 2, vec![0.0; 4])).unwrap();
        assert!(matches!(load_triplet(dir.path(), "a", None), Err(PdfnetError::Shape(_))));
        // an explicit resolution resamples all three to agree
        assert!(load_triplet(dir.path(), "a", Some((8, 8))).is_ok());
    }

    #[test]
    fn loading_is_idempotent_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let mask: Vec<f32> = (0..16).map(|i| (i % 2) as f32).collect();
        write_sample(dir.path(), "a", &mask, &[0.25; 16]);
        let a = load_triplet(dir.path(), "a", Some((8, 8))).unwrap();
        let b = load_triplet(dir.path(), "a", Some((8, 8))).unwrap();
        assert_eq!(a.image.dims(), &[1, 3, 8, 8]);
        assert_eq!(ops::to_f64_vec(&a.mask).unwrap(), ops::to_f64_vec(&b.mask).unwrap());
        assert_eq!(ops::to_f64_vec(&a.depth).unwrap(), ops::to_f64_vec(&b.depth).unwrap());
    }

    #[test]
    fn hq_depth_becomes_target() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", &[0.0; 16], &[0.3; 16]);
        png::write_gray16(&sample_path(dir.path(), DEPTHS_HQ_DIR, "a"), &Plane::new(1, 4, 4, vec![1.0; 16])).unwrap();
        let t = load_triplet(dir.path(), "a", None).unwrap();
        assert!(ops::to_f64_vec(&t.depth_target).unwrap().iter().all(|&v| v == 1.0));
        assert!(ops::to_f64_vec(&t.depth).unwrap().iter().all(|&v| v < 0.31));
    }
}
