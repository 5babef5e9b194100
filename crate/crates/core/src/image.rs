//! 8-bit raster types and PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode PNG: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: cannot encode PNG: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("image buffer has {len} bytes, expected {expected}")]
    Size { len: usize, expected: usize },
}

/// Single-channel 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

/// Binary mask; values are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != rows * cols {
            return Err(ImageError::Size { len: data.len(), expected: rows * cols });
        }
        Ok(Self { rows, cols, data })
    }
}

impl RgbImage {
    pub fn pixel(&self, i: usize) -> [u8; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }
}

impl BinaryMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    /// Any nonzero byte counts as foreground.
    pub fn from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() != rows * cols {
            return Err(ImageError::Size { len: bytes.len(), expected: rows * cols });
        }
        Ok(Self { rows, cols, data: bytes.iter().map(|&b| (b != 0) as u8).collect() })
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// 0/255 rendering for PNG export.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * 255).collect() }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io { path: path.to_path_buf(), source }
}

/// Reads a PNG as 8-bit grayscale. Colour images are reduced by channel mean; 16-bit
/// samples keep their high byte.
pub fn read_gray_png(path: &Path) -> Result<GrayImage, ImageError> {
    let file = File::open(path).map_err(io_err(path))?;
    let decode = |message: String| ImageError::Decode { path: path.to_path_buf(), message };
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| decode(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode(e.to_string()))?;
    let (rows, cols) = (info.height as usize, info.width as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Grayscale => bytes.to_vec(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).map(|p| p[0]).collect(),
        png::ColorType::Rgb | png::ColorType::Rgba => bytes
            .chunks_exact(channels)
            .map(|p| ((p[0] as u16 + p[1] as u16 + p[2] as u16) / 3) as u8)
            .collect(),
        png::ColorType::Indexed => return Err(decode("palette images are not expanded".into())),
    };
    GrayImage::new(rows, cols, data)
}

fn write_png(path: &Path, rows: usize, cols: usize, color: png::ColorType, data: &[u8]) -> Result<(), ImageError> {
    let file = File::create(path).map_err(io_err(path))?;
    let encode = |message: String| ImageError::Encode { path: path.to_path_buf(), message };
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| encode(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| encode(e.to_string()))?;
    writer.finish().map_err(|e| encode(e.to_string()))
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<(), ImageError> {
    write_png(path, img.rows, img.cols, png::ColorType::Grayscale, &img.data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<(), ImageError> {
    write_png(path, img.rows, img.cols, png::ColorType::Rgb, &img.data)
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask, ImageError> {
    let g = read_gray_png(path)?;
    BinaryMask::from_bytes(g.rows, g.cols, &g.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 128, 254, 255]).unwrap();
        write_gray_png(&p, &img).unwrap();
        assert_eq!(read_gray_png(&p).unwrap(), img);
    }

    #[test]
    fn mask_read_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_gray_png(&p, &GrayImage::new(1, 4, vec![0, 1, 255, 0]).unwrap()).unwrap();
        assert_eq!(read_mask_png(&p).unwrap().data, vec![0, 1, 1, 0]);
    }

    #[test]
    fn rgb_reads_as_mean() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let img = RgbImage { rows: 1, cols: 1, data: vec![255, 0, 0] };
        write_rgb_png(&p, &img).unwrap();
        assert_eq!(read_gray_png(&p).unwrap().data, vec![85]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_gray_png(Path::new("/nonexistent/x.png")), Err(ImageError::Io { .. })));
    }
}
