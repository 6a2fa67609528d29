//! On-disk frame format: a directory with a line-oriented manifest and one
//! raw little-endian f32 file per map.
//!
//! ```text
//! manifest.txt
//! input_0000.raw  force_0000.raw  [sigma2_0000.raw]
//! input_0001.raw  force_0001.raw  [sigma2_0001.raw]
//! ...
//! ```
//!
//! The manifest:
//!
//! ```text
//! format tfm-frameset
//! version 1
//! width 64
//! height 64
//! frames 20
//! dtype f32le
//! units arbitrary
//! hetero 0
//! ```
//!
//! `sigma2_*.raw` files exist only for heteroscedastic sets (`hetero 1`):
//! the generator's true log-variance maps, kept for calibration tests.
//! Write→read→write round-trips are byte-exact.

use crate::augment::SamplePair;
use crate::grid::Grid;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FramesetError {
    #[error("manifest missing: {0}")]
    ManifestMissing(PathBuf),
    #[error("manifest malformed: {0}")]
    ManifestMalformed(String),
    #[error("frame {index} truncated: {path}")]
    TruncatedFrame { index: usize, path: PathBuf },
    #[error("frame {index} size does not match manifest dims: {path}")]
    DimensionMismatch { index: usize, path: PathBuf },
    #[error("frame shape {got_h}x{got_w} differs from set {want_h}x{want_w}")]
    ShapeMismatch { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, FramesetError>;

/// Ordered (input, force) frames of one size, with optional per-frame true
/// noise variance maps for heteroscedastic synthetic data.
#[derive(Debug, Clone)]
pub struct FrameSet {
    width: usize,
    height: usize,
    pub frames: Vec<SamplePair>,
    pub noise_sigma2: Option<Vec<Grid<f32>>>,
}

impl FrameSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self { width, height, frames: Vec::new(), noise_sigma2: None }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, pair: SamplePair) -> Result<()> {
        if pair.height() != self.height || pair.width() != self.width {
            return Err(FramesetError::ShapeMismatch {
                got_h: pair.height(),
                got_w: pair.width(),
                want_h: self.height,
                want_w: self.width,
            });
        }
        self.frames.push(pair);
        Ok(())
    }

    pub fn is_hetero(&self) -> bool {
        self.noise_sigma2.is_some()
    }
}

fn write_raw(path: &Path, grid: &Grid<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(grid.len() * 4);
    for v in grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_raw(path: &Path, height: usize, width: usize, index: usize) -> Result<Grid<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| FramesetError::TruncatedFrame { index, path: path.to_path_buf() })?
        .read_to_end(&mut bytes)?;
    let expected = height * width * 4;
    if bytes.len() < expected {
        return Err(FramesetError::TruncatedFrame { index, path: path.to_path_buf() });
    }
    if bytes.len() > expected || bytes.len() % 4 != 0 {
        return Err(FramesetError::DimensionMismatch { index, path: path.to_path_buf() });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Grid::from_vec(height, width, data))
}

/// Write a frameset directory. Existing same-named files are overwritten.
pub fn write_frameset(fs: &FrameSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = format!(
        "format tfm-frameset\nversion 1\nwidth {}\nheight {}\nframes {}\ndtype f32le\nunits arbitrary\nhetero {}\n",
        fs.width(),
        fs.height(),
        fs.len(),
        if fs.is_hetero() { 1 } else { 0 },
    );
    let mut f = std::fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(manifest.as_bytes())?;
    for (i, frame) in fs.frames.iter().enumerate() {
        write_raw(&dir.join(format!("input_{i:04}.raw")), &frame.input)?;
        write_raw(&dir.join(format!("force_{i:04}.raw")), &frame.force)?;
    }
    if let Some(sigmas) = &fs.noise_sigma2 {
        for (i, s) in sigmas.iter().enumerate() {
            write_raw(&dir.join(format!("sigma2_{i:04}.raw")), s)?;
        }
    }
    Ok(())
}

/// Read a frameset directory written by [`write_frameset`].
pub fn read_frameset(dir: &Path) -> Result<FrameSet> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(FramesetError::ManifestMissing(manifest_path));
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut width = None;
    let mut height = None;
    let mut frames = None;
    let mut hetero = false;
    for line in text.lines() {
        let mut it = line.splitn(2, ' ');
        let key = it.next().unwrap_or("");
        let val = it.next().unwrap_or("");
        match key {
            "format" if val != "tfm-frameset" => {
                return Err(FramesetError::ManifestMalformed(format!("format {val}")))
            }
            "version" if val != "1" => {
                return Err(FramesetError::ManifestMalformed(format!("version {val}")))
            }
            "dtype" if val != "f32le" => {
                return Err(FramesetError::ManifestMalformed(format!("dtype {val}")))
            }
            "width" => width = val.parse::<usize>().ok(),
            "height" => height = val.parse::<usize>().ok(),
            "frames" => frames = val.parse::<usize>().ok(),
            "hetero" => hetero = val == "1",
            _ => {}
        }
    }
    let (Some(width), Some(height), Some(frames)) = (width, height, frames) else {
        return Err(FramesetError::ManifestMalformed(
            "missing width/height/frames".into(),
        ));
    };
    if width == 0 || height == 0 {
        return Err(FramesetError::ManifestMalformed("zero dimensions".into()));
    }
    let mut fs = FrameSet::new(height, width);
    for i in 0..frames {
        let input = read_raw(&dir.join(format!("input_{i:04}.raw")), height, width, i)?;
        let force = read_raw(&dir.join(format!("force_{i:04}.raw")), height, width, i)?;
        fs.push(SamplePair { input, force })?;
    }
    if hetero {
        let mut sigmas = Vec::with_capacity(frames);
        for i in 0..frames {
            sigmas.push(read_raw(&dir.join(format!("sigma2_{i:04}.raw")), height, width, i)?);
        }
        fs.noise_sigma2 = Some(sigmas);
    }
    Ok(fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn sample_set(seed: u64, n: usize) -> FrameSet {
        let mut rng = SeedStream::new(seed);
        let mut fs = FrameSet::new(8, 12);
        for _ in 0..n {
            let input = Grid::from_fn(8, 12, |_, _| rng.unit_f32() * 100.0);
            let force = Grid::from_fn(8, 12, |_, _| rng.unit_f32() * 10.0);
            fs.push(SamplePair::new(input, force).unwrap()).unwrap();
        }
        fs
    }

    #[test]
    fn round_trip_is_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let fs = sample_set(3, 4);
        write_frameset(&fs, dir.path()).unwrap();
        let back = read_frameset(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in fs.frames.iter().zip(&back.frames) {
            assert_eq!(a.input.data(), b.input.data());
            assert_eq!(a.force.data(), b.force.data());
        }
        // second write produces identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        write_frameset(&back, dir2.path()).unwrap();
        for name in ["manifest.txt", "input_0002.raw", "force_0003.raw"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_file_names_frame_index() {
        let dir = tempfile::tempdir().unwrap();
        let fs = sample_set(4, 3);
        write_frameset(&fs, dir.path()).unwrap();
        let victim = dir.path().join("force_0001.raw");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 10]).unwrap();
        match read_frameset(dir.path()) {
            Err(FramesetError::TruncatedFrame { index: 1, .. }) => {}
            other => panic!("expected TruncatedFrame(1), got {other:?}"),
        }
    }

    #[test]
    fn oversized_file_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let fs = sample_set(5, 2);
        write_frameset(&fs, dir.path()).unwrap();
        let victim = dir.path().join("input_0000.raw");
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&victim, bytes).unwrap();
        match read_frameset(dir.path()) {
            Err(FramesetError::DimensionMismatch { index: 0, .. }) => {}
            other => panic!("expected DimensionMismatch(0), got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_frameset(dir.path()),
            Err(FramesetError::ManifestMissing(_))
        ));
    }

    #[test]
    fn missing_frame_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let fs = sample_set(6, 2);
        write_frameset(&fs, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("input_0001.raw")).unwrap();
        assert!(matches!(
            read_frameset(dir.path()),
            Err(FramesetError::TruncatedFrame { index: 1, .. })
        ));
    }

    #[test]
    fn hetero_sigma_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut fs = sample_set(7, 2);
        let mut rng = SeedStream::new(9);
        fs.noise_sigma2 =
            Some((0..2).map(|_| Grid::from_fn(8, 12, |_, _| rng.unit_f32() * 0.2)).collect());
        write_frameset(&fs, dir.path()).unwrap();
        let back = read_frameset(dir.path()).unwrap();
        assert!(back.is_hetero());
        let a = fs.noise_sigma2.as_ref().unwrap();
        let b = back.noise_sigma2.as_ref().unwrap();
        assert_eq!(a[1].data(), b[1].data());
    }

    #[test]
    fn rejects_wrong_shape_push() {
        let mut fs = FrameSet::new(8, 8);
        let p = SamplePair::new(Grid::from_fill(4, 8, 0.0), Grid::from_fill(4, 8, 0.0)).unwrap();
        assert!(matches!(fs.push(p), Err(FramesetError::ShapeMismatch { .. })));
    }
}
