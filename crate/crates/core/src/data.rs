//! Image I/O, paired dataset indexing, patch sampling and flips.
//!
//! Decoded images stay as 8-bit [`Image8`] buffers and are converted to
//! floats (`k / 255`) only when a patch or full image is extracted.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => format_error(path, other.to_string()),
    }
}

impl Image8 {
    /// Decode an 8-bit RGB PNG or JPEG. Other color types are rejected.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?;
        match reader.format() {
            Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
            Some(f) => return Err(format_error(path, format!("{f:?} images are not supported"))),
            None => return Err(format_error(path, "not a PNG or JPEG file")),
        }
        let img = reader.decode().map_err(|e| image_error(path, e))?;
        if img.color() != ColorType::Rgb8 {
            return Err(format_error(
                path,
                format!("expected 8-bit RGB, found {:?}", img.color()),
            ));
        }
        let rgb = img.into_rgb8();
        Ok(Image8 {
            height: rgb.height() as usize,
            width: rgb.width() as usize,
            rgb: rgb.into_raw(),
        })
    }

    /// Write as PNG. The path must end in `.png`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            return Err(format_error(path, "images are written as PNG; use a .png extension"));
        }
        image::save_buffer_with_format(
            path,
            &self.rgb,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            ImageFormat::Png,
        )
        .map_err(|e| image_error(path, e))
    }

    /// The `size×size` window at `(y, x)` as a `(1, 3, size, size)` tensor,
    /// optionally flipped.
    pub fn patch<T: Scalar>(&self, y: usize, x: usize, size: usize, hflip: bool, vflip: bool) -> Result<Tensor<T>> {
        self.window(y, x, size, size, hflip, vflip)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.window(0, 0, self.height, self.width, false, false)
            .expect("full window fits")
    }

    fn window<T: Scalar>(
        &self,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
        hflip: bool,
        vflip: bool,
    ) -> Result<Tensor<T>> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width,
            "window {h}x{w} at ({y0}, {x0}) does not fit a {}x{} image",
            self.height,
            self.width
        );
        let lut: Vec<T> = (0..=255u8).map(|k| byte_to_unit(k)).collect();
        Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
            let sy = y0 + if vflip { h - 1 - y } else { y };
            let sx = x0 + if hflip { w - 1 - x } else { x };
            lut[self.rgb[(sy * self.width + sx) * 3 + c] as usize]
        }))
    }

    /// Clamp to `[0, 1]` and round `v·255` to the nearest byte.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        ensure!(s.n == 1 && s.c == 3, "expected a (1, 3, h, w) image tensor, got {s}");
        let mut rgb = vec![0u8; s.h * s.w * 3];
        for c in 0..3 {
            for (i, v) in t.plane(0, c).iter().enumerate() {
                rgb[i * 3 + c] = unit_to_byte(v.to_f64().unwrap_or(0.0));
            }
        }
        Ok(Image8 {
            height: s.h,
            width: s.w,
            rgb,
        })
    }
}

/// `k / 255`, correctly rounded in the target precision.
pub fn byte_to_unit<T: Scalar>(k: u8) -> T {
    T::from_u8(k).unwrap() / T::from_u8(255).unwrap()
}

/// Clamp to `[0, 1]` then round to the nearest of the 256 levels. NaN maps to 0.
pub fn unit_to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decode an 8-bit RGB PNG/JPEG into a `(1, 3, h, w)` tensor with values `k/255`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(Image8::open(path)?.to_tensor())
}

/// Save a `(1, 3, h, w)` tensor as PNG after clamping and rounding.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    Image8::from_tensor(t)?.save_png(path)
}

/// A low-light / ground-truth pair sharing one filename.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePairRecord {
    pub name: String,
    pub low_path: PathBuf,
    pub gt_path: PathBuf,
    /// `(height, width)`, identical for both files.
    pub dims: (usize, usize),
}

impl ImagePairRecord {
    pub fn load(&self) -> Result<(Image8, Image8)> {
        let low = Image8::open(&self.low_path)?;
        let gt = Image8::open(&self.gt_path)?;
        ensure!(
            (low.height, low.width) == self.dims && (gt.height, gt.width) == self.dims,
            "pair {} changed size since it was indexed",
            self.name
        );
        Ok((low, gt))
    }
}

/// Pairs found in two sibling directories, ordered by filename.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<ImagePairRecord>,
    /// Image files present in only one of the two directories.
    pub orphans: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn min_dims(&self) -> (usize, usize) {
        self.records
            .iter()
            .fold((usize::MAX, usize::MAX), |(h, w), r| (h.min(r.dims.0), w.min(r.dims.1)))
    }
}

fn is_image_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    [".png", ".jpg", ".jpeg"].iter().any(|ext| lower.ends_with(ext))
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let is_file = entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file();
        if let Some(name) = entry.file_name().to_str() {
            if is_file && is_image_name(name) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn read_dims(path: &Path) -> Result<(usize, usize)> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let (w, h) = reader.into_dimensions().map_err(|e| image_error(path, e))?;
    Ok((h as usize, w as usize))
}

/// Pair files with identical names in `low_dir` and `gt_dir`.
pub fn index_dataset(low_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let (low_dir, gt_dir) = (low_dir.as_ref(), gt_dir.as_ref());
    let low = list_images(low_dir)?;
    let gt = list_images(gt_dir)?;
    let mut records = Vec::new();
    let mut orphans = Vec::new();
    for name in &low {
        if gt.binary_search(name).is_ok() {
            let low_path = low_dir.join(name);
            let gt_path = gt_dir.join(name);
            let dims = read_dims(&low_path)?;
            let gt_dims = read_dims(&gt_path)?;
            if dims != gt_dims {
                return Err(Error::InvalidDataset(format!(
                    "{name}: low is {}x{} but ground truth is {}x{}",
                    dims.0, dims.1, gt_dims.0, gt_dims.1
                )));
            }
            records.push(ImagePairRecord {
                name: name.clone(),
                low_path,
                gt_path,
                dims,
            });
        } else {
            orphans.push(low_dir.join(name));
        }
    }
    for name in &gt {
        if low.binary_search(name).is_err() {
            orphans.push(gt_dir.join(name));
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no image pairs with matching names in {} and {}",
            low_dir.display(),
            gt_dir.display()
        )));
    }
    Ok(DatasetIndex { records, orphans })
}

/// Index `<root>/low` against `<root>/high`.
pub fn index_root(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    index_dataset(root.join("low"), root.join("high"))
}

/// Where and how one training patch is cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSample {
    pub record: usize,
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
}

/// The random stream for one sample, independent of every other sample.
pub fn sample_rng(seed: u64, record: usize, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((record as u64) << 40) ^ sample);
    rng
}

impl PatchSample {
    /// Uniform origin over the valid range and two fair flips.
    pub fn draw(record: usize, dims: (usize, usize), size: usize, rng: &mut impl Rng) -> Result<Self> {
        let (h, w) = dims;
        ensure!(
            size > 0 && size <= h && size <= w,
            "patch size {size} does not fit a {h}x{w} image"
        );
        Ok(PatchSample {
            record,
            y: rng.gen_range(0..=h - size),
            x: rng.gen_range(0..=w - size),
            size,
            hflip: rng.gen(),
            vflip: rng.gen(),
        })
    }

    /// Cut the same window, with the same flips, from both images.
    pub fn extract<T: Scalar>(&self, low: &Image8, gt: &Image8) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((
            low.patch(self.y, self.x, self.size, self.hflip, self.vflip)?,
            gt.patch(self.y, self.x, self.size, self.hflip, self.vflip)?,
        ))
    }
}

/// Draw and extract one patch pair.
pub fn sample_patch<T: Scalar>(
    record: usize,
    low: &Image8,
    gt: &Image8,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>, PatchSample)> {
    ensure!(
        (low.height, low.width) == (gt.height, gt.width),
        "pair sizes differ: {}x{} vs {}x{}",
        low.height,
        low.width,
        gt.height,
        gt.width
    );
    let sample = PatchSample::draw(record, (low.height, low.width), size, rng)?;
    let (a, b) = sample.extract(low, gt)?;
    Ok((a, b, sample))
}

/// The `size×size` window at `((h-size)/2, (w-size)/2)`.
pub fn center_crop<T: Scalar>(t: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    ensure!(
        size > 0 && size <= s.h && size <= s.w,
        "center crop {size} does not fit {}x{}",
        s.h,
        s.w
    );
    let (y0, x0) = ((s.h - size) / 2, (s.w - size) / 2);
    Ok(Tensor::from_fn([s.n, s.c, size, size], |n, c, y, x| {
        t.at(n, c, y0 + y, x0 + x)
    }))
}

pub fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.at(n, c, y, s.w - 1 - x))
}

pub fn flip_vertical<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.at(n, c, s.h - 1 - y, x))
}

/// Apply the same flips to both tensors of a pair.
pub fn augment_flip<T: Scalar>(
    pair: (&Tensor<T>, &Tensor<T>),
    horizontal: bool,
    vertical: bool,
) -> (Tensor<T>, Tensor<T>) {
    let apply = |t: &Tensor<T>| {
        let t = if horizontal { flip_horizontal(t) } else { t.clone() };
        if vertical {
            flip_vertical(&t)
        } else {
            t
        }
    };
    (apply(pair.0), apply(pair.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coordinate_image(h: usize, w: usize) -> Image8 {
        let mut rgb = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                rgb.extend_from_slice(&[y as u8, x as u8, ((y + x) % 256) as u8]);
            }
        }
        Image8 {
            height: h,
            width: w,
            rgb,
        }
    }

    #[test]
    fn byte_mapping() {
        assert_eq!(byte_to_unit::<f32>(255), 1.0);
        assert_eq!(byte_to_unit::<f32>(0), 0.0);
        assert_eq!(byte_to_unit::<f64>(128), 128.0 / 255.0);
        for k in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit::<f32>(k) as f64), k);
        }
        assert_eq!(unit_to_byte(-0.3), 0);
        assert_eq!(unit_to_byte(7.0), 255);
    }

    #[test]
    fn center_crop_origin() {
        let t = Tensor::<f32>::from_fn([1, 1, 400, 600], |_, _, y, x| (y * 1000 + x) as f32);
        let c = center_crop(&t, 256).unwrap();
        assert_eq!(c.at(0, 0, 0, 0), (72 * 1000 + 172) as f32);
        assert_eq!(center_crop(&t, 400).unwrap().shape().h, 400);
        assert!(center_crop(&t, 401).is_err());
    }

    #[test]
    fn flips() {
        let t = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(flip_horizontal(&t).data(), &[2.0, 1.0]);
        let u = Tensor::<f32>::from_fn([1, 2, 3, 4], |_, c, y, x| (c * 12 + y * 4 + x) as f32);
        assert_eq!(flip_vertical(&flip_vertical(&u)), u);
        let (a, b) = augment_flip((&u, &u), true, true);
        assert_eq!(a, b);
        assert_eq!(a.at(0, 1, 0, 0), u.at(0, 1, 2, 3));
    }

    #[test]
    fn patch_pairs_share_window_and_flips() {
        let low = coordinate_image(40, 50);
        let gt = coordinate_image(40, 50);
        for s in 0..20u64 {
            let mut rng = sample_rng(9, 0, s);
            let (a, b, p) = sample_patch::<f32>(0, &low, &gt, 16, &mut rng).unwrap();
            assert_eq!(a, b);
            let corner_y = if p.vflip { p.y + 15 } else { p.y };
            let corner_x = if p.hflip { p.x + 15 } else { p.x };
            assert_eq!(a.at(0, 0, 0, 0), byte_to_unit(corner_y as u8));
            assert_eq!(a.at(0, 1, 0, 0), byte_to_unit(corner_x as u8));
        }
    }

    #[test]
    fn origin_range() {
        let mut seen = (usize::MAX, 0, usize::MAX, 0);
        for s in 0..2000 {
            let p = PatchSample::draw(0, (400, 600), 256, &mut sample_rng(1, 3, s)).unwrap();
            assert!(p.y <= 144 && p.x <= 344);
            seen = (seen.0.min(p.y), seen.1.max(p.y), seen.2.min(p.x), seen.3.max(p.x));
        }
        assert!(seen.0 < 10 && seen.1 > 134 && seen.2 < 20 && seen.3 > 324);
        assert!(PatchSample::draw(0, (100, 300), 256, &mut sample_rng(1, 0, 0)).is_err());
    }

    #[test]
    fn sample_streams_are_keyed() {
        let a = PatchSample::draw(0, (400, 600), 64, &mut sample_rng(5, 2, 7)).unwrap();
        let b = PatchSample::draw(0, (400, 600), 64, &mut sample_rng(5, 2, 7)).unwrap();
        let c = PatchSample::draw(0, (400, 600), 64, &mut sample_rng(5, 2, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!((a.y, a.x), (c.y, c.x));
    }
}
