//! Image decoding, dataset assembly, map export and checkpoints.

pub mod checkpoint;

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::model::EigenMaps;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{Checkpoint, OptimizerSection};

/// Magic prefix of raw map files.
pub const RAW_MAGIC: &[u8; 4] = b"SSGM";

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn open_decoded(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| decode_err(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        Some(other) => return Err(decode_err(path, format!("unsupported format {other:?}; use PNG or PPM"))),
        None => return Err(decode_err(path, "unrecognized image format")),
    }
    reader.decode().map_err(|e| decode_err(path, e))
}

fn is_16bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    )
}

fn to_tensor<T: Real>(img: &DynamicImage) -> Result<Tensor<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    // gray inputs come out of the rgb conversions replicated
    if is_16bit(img) {
        let rgb = img.to_rgb16();
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + p] = T::of(px[c] as f64 / 65535.0);
            }
        }
    } else {
        let rgb = img.to_rgb8();
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + p] = T::of(px[c] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec([3, h, w], data)
}

/// Decodes an 8/16-bit PNG or a PPM/PGM into a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    to_tensor(&open_decoded(path)?)
}

/// Writes one `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb_png<T: Real>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::dim(format!("expected [3, H, W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            buf.push(quantize(image.data()[ch * plane + p].f64()));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from shape");
    write_png(DynamicImage::ImageRgb8(img), path.as_ref())
}

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn write_png(img: DynamicImage, path: &Path) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    img.write_with_encoder(image::codecs::png::PngEncoder::new(file))
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Writes a single plane as an 8-bit gray PNG, `round(255 * v)` after
/// clamping to `[0, 1]`.
pub fn save_plane_png<T: Real>(plane: &[T], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if plane.len() != height * width {
        return Err(Error::dim(format!("{} values for a {height}x{width} plane", plane.len())));
    }
    let buf = plane.iter().map(|v| quantize(v.f64())).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, buf).expect("buffer sized from shape");
    write_png(DynamicImage::ImageLuma8(img), path.as_ref())
}

/// Export formats for [`save_maps`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapFormats {
    pub png8: bool,
    pub raw_f32: bool,
}

impl Default for MapFormats {
    fn default() -> Self {
        Self {
            png8: true,
            raw_f32: true,
        }
    }
}

/// Writes every batch item's maps into `out_dir`: `{stem}_{k}.png` per
/// channel and one `{stem}.ssgm` raw file. With a batch larger than one the
/// stem gets a `_{b}` suffix.
pub fn save_maps<T: Real>(y: &EigenMaps<T>, out_dir: impl AsRef<Path>, stem: &str, formats: MapFormats) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for b in 0..y.batch() {
        let stem = if y.batch() == 1 {
            stem.to_string()
        } else {
            format!("{stem}_{b}")
        };
        if formats.png8 {
            for k in 0..y.n() {
                let path = dir.join(format!("{stem}_{k}.png"));
                save_plane_png(y.channel(b, k), y.height(), y.width(), &path)?;
                written.push(path);
            }
        }
        if formats.raw_f32 {
            let path = dir.join(format!("{stem}.ssgm"));
            let mut out = BufWriter::new(fs::File::create(&path)?);
            write_raw_maps(y, b, &mut out)?;
            out.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Raw layout: `SSGM`, then `n`, `H`, `W` as little-endian u32, then
/// `n * H * W` little-endian f32 values, channel-major.
pub fn write_raw_maps<T: Real, W: Write>(y: &EigenMaps<T>, b: usize, mut out: W) -> Result<()> {
    out.write_all(RAW_MAGIC)?;
    for d in [y.n(), y.height(), y.width()] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for k in 0..y.n() {
        for v in y.channel(b, k) {
            out.write_all(&(v.f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a raw map file back as a batch of one.
pub fn load_raw_maps(path: impl AsRef<Path>) -> Result<EigenMaps<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(decode_err(path, "not a raw map file"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, h, w) = (dim(0), dim(1), dim(2));
    let count = n * h * w;
    if bytes.len() != 16 + 4 * count {
        return Err(decode_err(path, format!("expected {} bytes for {n}x{h}x{w}, found {}", 16 + 4 * count, bytes.len())));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    EigenMaps::new(Tensor::from_vec([1, n, h, w], data)?)
}

/// Index into `0..n` after mirroring about the edges without repeating them.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Smallest multiple of `m` not below `v`.
pub fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Reflect-pads the last two axes at the bottom and right up to the next
/// multiple of `multiple`. Returns the input unchanged when already aligned.
pub fn pad_reflect<T: Real>(x: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::dim(format!("cannot pad shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (ph, pw) = (round_up(h, multiple), round_up(w, multiple));
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let outer: usize = shape[..shape.len() - 2].iter().product();
    let mut data = Vec::with_capacity(outer * ph * pw);
    for o in 0..outer {
        let src = &x.data()[o * h * w..(o + 1) * h * w];
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for xx in 0..pw {
                data.push(src[sy * w + reflect_index(xx as isize, w)]);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = ph;
    out_shape[n - 1] = pw;
    Tensor::from_vec(out_shape, data)
}

/// How images are brought to the training resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CropMode {
    #[default]
    ResizeBilinear,
    CenterCrop,
}

/// Training images on disk and how to normalize their size.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
    pub resolution: usize,
    pub crop_mode: CropMode,
}

impl DatasetSpec {
    /// Every `.png`, `.ppm` and `.pgm` directly under `root`, sorted by name.
    pub fn discover(root: impl AsRef<Path>, resolution: usize, crop_mode: CropMode) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut files: Vec<PathBuf> = fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::contract(format!("no PNG or PPM images in {}", root.display())));
        }
        Ok(Self {
            root,
            files,
            resolution,
            crop_mode,
        })
    }

    /// Decodes every file at `resolution x resolution`.
    pub fn load<T: Real>(&self) -> Result<Vec<Tensor<T>>> {
        self.files.iter().map(|f| load_resized(f, self.resolution, self.crop_mode)).collect()
    }
}

/// Decodes an image and brings it to `res x res`.
pub fn load_resized<T: Real>(path: &Path, res: usize, mode: CropMode) -> Result<Tensor<T>> {
    let img = open_decoded(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) == (res, res) {
        return to_tensor(&img);
    }
    let img = match mode {
        CropMode::ResizeBilinear => {
            let deep = is_16bit(&img);
            let resized = img.resize_exact(res as u32, res as u32, image::imageops::FilterType::Triangle);
            if deep {
                DynamicImage::ImageRgb16(resized.to_rgb16())
            } else {
                resized
            }
        }
        CropMode::CenterCrop => {
            if w < res || h < res {
                return Err(Error::contract(format!(
                    "{} is {w}x{h}, too small for a {res}x{res} center crop",
                    path.display()
                )));
            }
            img.crop_imm(((w - res) / 2) as u32, ((h - res) / 2) as u32, res as u32, res as u32)
        }
    };
    to_tensor(&img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_does_not_repeat_edges() {
        let idx: Vec<usize> = (0..7).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(idx, [0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_to_multiple_of_four() {
        let x = Tensor::<f32>::from_vec([1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let p = pad_reflect(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 2.0, 1.0]);
        assert_eq!(&p.data()[12..], &[3.0, 4.0, 5.0, 4.0]);
        let aligned = Tensor::<f32>::zeros([2, 4, 8]);
        assert_eq!(pad_reflect(&aligned, 4).unwrap(), aligned);
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let y = EigenMaps::new(Tensor::from_vec([1, 2, 3, 4], data).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_maps(&y, dir.path(), "m", MapFormats { png8: false, raw_f32: true }).unwrap();
        assert_eq!(fs::metadata(&files[0]).unwrap().len(), 16 + 4 * 24);
        let back = load_raw_maps(&files[0]).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.maps), bits(&y.maps));
    }

    #[test]
    fn constant_third_exports_as_85() {
        let y = EigenMaps::new(Tensor::<f64>::full([1, 3, 2, 2], 1.0 / 3.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_maps(&y, dir.path(), "m", MapFormats { png8: true, raw_f32: false }).unwrap();
        assert_eq!(files.len(), 3);
        let img = image::open(&files[1]).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p[0] == 85));
    }

    #[test]
    fn ppm_primaries_decode_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
        fs::write(&path, bytes).unwrap();
        let t = load_image::<f64>(&path).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_white_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g16.png");
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![65535u16, 0]).unwrap();
        img.save(&path).unwrap();
        let t = load_image::<f64>(&path).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn eight_bit_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.png");
        let pixels: Vec<u8> = (0..48).map(|i| (i * 37 % 256) as u8).collect();
        image::RgbImage::from_raw(4, 4, pixels.clone()).unwrap().save(&src).unwrap();
        let t = load_image::<f32>(&src).unwrap();
        let dst = dir.path().join("dst.png");
        save_rgb_png(&t, &dst).unwrap();
        assert_eq!(image::open(&dst).unwrap().to_rgb8().into_raw(), pixels);
    }

    #[test]
    fn decode_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        fs::write(&path, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        let err = load_image::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }
}
