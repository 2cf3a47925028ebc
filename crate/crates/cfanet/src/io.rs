//! On-disk formats: binary PGM/PPM images, DMAP density rasters, annotation
//! manifests (JSON), and CFCK parameter checkpoints. All numeric payloads are
//! little-endian; all writers are deterministic functions of their input.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::groundtruth::{DensityMap, GroundTruthError, PointAnnotation};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DENSITY_MAGIC: &[u8; 4] = b"DMAP";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: String, expected: String },
    #[error("{path}: truncated, needed {needed} more bytes")]
    Truncated { path: String, needed: usize },
    #[error("{path}: unsupported version {found}, this build reads version {supported}")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },
    #[error("{path}: malformed header: {detail}")]
    MalformedHeader { path: String, detail: String },
    #[error("{path}: {detail}")]
    BadManifest { path: String, detail: String },
    #[error("{path}: image is {got_w}x{got_h} but annotation `{image}` declares {want_w}x{want_h}")]
    DimensionMismatch {
        path: String,
        image: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error(transparent)]
    Annotation(#[from] GroundTruthError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Forward-only view over a fully-read file; makes truncation explicit.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Cursor { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated {
                path: self.path.display().to_string(),
                needed: self.pos + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

// ── images ───────────────────────────────────────────────────────────────

/// 8-bit raster, interleaved row-major; 1 channel (PGM) or 3 (PPM).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(FormatError::MalformedHeader {
                path: "<memory>".into(),
                detail: format!("images must have 1 or 3 channels, got {channels}"),
            });
        }
        if data.len() != width * height * channels {
            return Err(FormatError::MalformedHeader {
                path: "<memory>".into(),
                detail: format!(
                    "payload length {} does not match {width}x{height}x{channels}",
                    data.len()
                ),
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Planar (1, c, h, w) float tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![0.0f32; w * h * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[ch * h * w + y * w + x] =
                        self.data[(y * w + x) * c + ch] as f32 / 255.0;
                }
            }
        }
        Tensor::new(Shape::new(1, c, h, w), data).expect("image payload length is validated")
    }
}

/// Write P5 (1 channel) or P6 (3 channels) with maxval 255.
pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(image.data.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", image.width, image.height).unwrap();
    out.extend_from_slice(&image.data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a binary PGM/PPM with maxval 255. `#` comments are honored.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let header_err = |detail: String| FormatError::MalformedHeader {
        path: path.display().to_string(),
        detail,
    };
    if buf.len() < 2 {
        return Err(header_err("file shorter than a magic number".into()));
    }
    let channels = match &buf[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(FormatError::BadMagic {
                path: path.display().to_string(),
                expected: "P5 or P6".into(),
            })
        }
    };
    // Header = magic + three whitespace-separated numbers, then one byte of
    // whitespace before the payload.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < buf.len() {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else if buf[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err("expected a decimal header field".into()));
        }
        let text = std::str::from_utf8(&buf[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| header_err(format!("header field `{text}` out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(header_err(format!("maxval must be 255, got {maxval}")));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(header_err("missing whitespace before payload".into()));
    }
    pos += 1;
    let needed = width * height * channels;
    let have = buf.len() - pos;
    if have < needed {
        return Err(FormatError::Truncated {
            path: path.display().to_string(),
            needed: needed - have,
        });
    }
    Image::new(width, height, channels, buf[pos..pos + needed].to_vec())
}

// ── density rasters ──────────────────────────────────────────────────────

/// Write the DMAP format: magic, u32 h, u32 w, then h·w f32 row-major.
pub fn write_density(path: impl AsRef<Path>, dm: &DensityMap) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(12 + dm.data.len() * 4);
    out.extend_from_slice(DENSITY_MAGIC);
    out.extend_from_slice(&(dm.height as u32).to_le_bytes());
    out.extend_from_slice(&(dm.width as u32).to_le_bytes());
    for &v in &dm.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_density(path: impl AsRef<Path>) -> Result<DensityMap> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor::new(&buf, path);
    if cur.take(4)? != DENSITY_MAGIC {
        return Err(FormatError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(DENSITY_MAGIC).into_owned(),
        });
    }
    let height = cur.u32()? as usize;
    let width = cur.u32()? as usize;
    let data = cur.f32s(width * height)?;
    Ok(DensityMap::new(width, height, data).expect("payload length matches header"))
}

// ── annotation manifests ─────────────────────────────────────────────────

/// One dataset entry: the manifest couples each annotation to an image path
/// (stored in `image_id`, relative to the manifest).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub annotation: PointAnnotation,
}

pub fn write_manifest(path: impl AsRef<Path>, annotations: &[PointAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(annotations).expect("annotations serialize");
    fs::write(path, json).map_err(|e| io_err(path, e))
}

/// Parse and validate a manifest; every annotation must be in-bounds.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PointAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let annotations: Vec<PointAnnotation> =
        serde_json::from_str(&text).map_err(|e| FormatError::BadManifest {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    for ann in &annotations {
        ann.validate()?;
    }
    Ok(annotations)
}

/// Load a manifest plus the images it names (paths relative to the manifest
/// directory), checking that raster sizes match the declared extents.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for annotation in read_manifest(manifest_path)? {
        let image_path: PathBuf = dir.join(&annotation.image_id);
        let image = read_image(&image_path)?;
        if image.width != annotation.width || image.height != annotation.height {
            return Err(FormatError::DimensionMismatch {
                path: image_path.display().to_string(),
                image: annotation.image_id.clone(),
                got_w: image.width,
                got_h: image.height,
                want_w: annotation.width,
                want_h: annotation.height,
            });
        }
        samples.push(Sample { image, annotation });
    }
    Ok(samples)
}

// ── checkpoints ──────────────────────────────────────────────────────────

/// Named f32 tensors in sorted-name order: model parameters plus optimizer
/// and config entries under reserved prefixes. Sorted order makes the file
/// a pure function of its contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, (Shape, Vec<f32>)>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, shape: Shape, data: Vec<f32>) {
        debug_assert_eq!(shape.numel(), data.len());
        self.entries.insert(name.into(), (shape, data));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f32) {
        self.insert(name, Shape::scalar(), vec![value]);
    }

    pub fn scalar(&self, name: &str) -> Option<f32> {
        match self.entries.get(name) {
            Some((shape, data)) if shape.numel() == 1 => Some(data[0]),
            _ => None,
        }
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    for (name, (shape, _)) in &ckpt.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for dim in [shape.n, shape.c, shape.h, shape.w] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
    }
    for (_, (_, data)) in &ckpt.entries {
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor::new(&buf, path);
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            path: path.display().to_string(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name_bytes = cur.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| FormatError::MalformedHeader {
                path: path.display().to_string(),
                detail: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let dims: Vec<usize> = (0..4)
            .map(|_| cur.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        manifest.push((name, Shape::new(dims[0], dims[1], dims[2], dims[3])));
    }
    let mut ckpt = Checkpoint::default();
    for (name, shape) in manifest {
        let data = cur.f32s(shape.numel())?;
        ckpt.entries.insert(name, (shape, data));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the handle so the directory outlives the helper.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    fn random_image(seed: u64, w: usize, h: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.gen()).collect();
        Image::new(w, h, c, data).unwrap()
    }

    #[test]
    fn image_round_trips_both_channel_counts() {
        for &(c, name) in &[(1, "a.pgm"), (3, "a.ppm")] {
            let path = tmp(name);
            let img = random_image(c as u64, 13, 7, c);
            write_image(&path, &img).unwrap();
            assert_eq!(read_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn image_write_is_deterministic_bytes() {
        let (p1, p2) = (tmp("x1.ppm"), tmp("x2.ppm"));
        let img = random_image(9, 8, 8, 3);
        write_image(&p1, &img).unwrap();
        write_image(&p2, &img).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn image_header_accepts_comments() {
        let path = tmp("c.pgm");
        fs::write(&path, b"P5\n# generated\n2 2\n255\n\x01\x02\x03\x04").unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn image_rejects_bad_magic_maxval_and_truncation() {
        let path = tmp("bad.pgm");
        fs::write(&path, b"P4\n2 2\n255\n....").unwrap();
        assert!(matches!(read_image(&path), Err(FormatError::BadMagic { .. })));
        fs::write(&path, b"P5\n2 2\n65535\n....").unwrap();
        assert!(matches!(
            read_image(&path),
            Err(FormatError::MalformedHeader { .. })
        ));
        fs::write(&path, b"P5\n2 2\n255\n\x01\x02").unwrap();
        assert!(matches!(
            read_image(&path),
            Err(FormatError::Truncated { needed: 2, .. })
        ));
    }

    #[test]
    fn image_tensor_is_planar_and_unit_scaled() {
        let img = Image::new(2, 1, 3, vec![255, 0, 51, 0, 255, 102]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        let want = [1.0, 0.0, 0.0, 1.0, 0.2, 0.4];
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn density_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..64 * 64).map(|_| rng.gen::<f32>() * 10.0).collect();
        let dm = DensityMap::new(64, 64, data).unwrap();
        let path = tmp("d.dmap");
        write_density(&path, &dm).unwrap();
        let back = read_density(&path).unwrap();
        assert_eq!(back, dm);
        // write(read(f)) reproduces the file byte for byte.
        let path2 = tmp("d2.dmap");
        write_density(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn density_zero_size_is_header_only() {
        let path = tmp("z.dmap");
        write_density(&path, &DensityMap::zeros(0, 0)).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 12);
        let back = read_density(&path).unwrap();
        assert_eq!((back.width, back.height), (0, 0));
    }

    #[test]
    fn density_rejects_bad_magic_and_truncation() {
        let path = tmp("b.dmap");
        fs::write(&path, b"DMAQ\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            read_density(&path),
            Err(FormatError::BadMagic { .. })
        ));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DMAP");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 10]); // 6 bytes short of 4 floats
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_density(&path),
            Err(FormatError::Truncated { needed: 6, .. })
        ));
    }

    #[test]
    fn manifest_round_trips_and_validates() {
        let path = tmp("m.json");
        let anns = vec![
            PointAnnotation::new("a.ppm", 16, 16, vec![(1.0, 2.0), (3.5, 4.5)]).unwrap(),
            PointAnnotation::new("b.ppm", 8, 8, vec![]).unwrap(),
        ];
        write_manifest(&path, &anns).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), anns);
    }

    #[test]
    fn manifest_rejects_boundary_point_naming_image() {
        let path = tmp("oob.json");
        fs::write(
            &path,
            r#"[{"image": "bad.ppm", "width": 16, "height": 16, "points": [[16.0, 3.0]]}]"#,
        )
        .unwrap();
        match read_manifest(&path) {
            Err(FormatError::Annotation(GroundTruthError::PointOutOfBounds {
                image, ..
            })) => assert_eq!(image, "bad.ppm"),
            other => panic!("expected out-of-bounds rejection, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_unparseable_json() {
        let path = tmp("junk.json");
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(FormatError::BadManifest { .. })
        ));
    }

    #[test]
    fn dataset_loads_images_next_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(1, 6, 4, 3);
        write_image(dir.path().join("s.ppm"), &img).unwrap();
        let ann = PointAnnotation::new("s.ppm", 6, 4, vec![(2.0, 2.0)]).unwrap();
        write_manifest(dir.path().join("m.json"), std::slice::from_ref(&ann)).unwrap();
        let samples = load_dataset(dir.path().join("m.json")).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].image, img);
        assert_eq!(samples[0].annotation, ann);
    }

    #[test]
    fn dataset_rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path().join("s.ppm"), &random_image(1, 6, 4, 3)).unwrap();
        let ann = PointAnnotation::new("s.ppm", 7, 4, vec![]).unwrap();
        write_manifest(dir.path().join("m.json"), std::slice::from_ref(&ann)).unwrap();
        assert!(matches!(
            load_dataset(dir.path().join("m.json")),
            Err(FormatError::DimensionMismatch { .. })
        ));
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, shape) in [
            ("enc.w1", Shape::new(4, 3, 3, 3)),
            ("enc.b1", Shape::new(1, 4, 1, 1)),
            ("head.w", Shape::new(1, 4, 1, 1)),
        ] {
            let data = (0..shape.numel()).map(|_| rng.gen::<f32>() - 0.5).collect();
            ckpt.insert(name, shape, data);
        }
        ckpt.insert_scalar("meta/k", 6.0);
        ckpt
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_deterministic() {
        let ckpt = sample_checkpoint();
        let (p1, p2) = (tmp("c1.cfck"), tmp("c2.cfck"));
        write_checkpoint(&p1, &ckpt).unwrap();
        write_checkpoint(&p2, &ckpt).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = read_checkpoint(&p1).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.scalar("meta/k"), Some(6.0));
        assert_eq!(back.scalar("enc.w1"), None, "non-scalar entry");
    }

    #[test]
    fn checkpoint_rejects_magic_version_and_truncation() {
        let ckpt = sample_checkpoint();
        let path = tmp("c.cfck");
        write_checkpoint(&path, &ckpt).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(FormatError::BadMagic { .. })
        ));

        let mut bad = good.clone();
        bad[4] = 99;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(FormatError::UnsupportedVersion { found: 99, .. })
        ));

        for cut in [3, 10, good.len() / 2, good.len() - 1] {
            fs::write(&path, &good[..cut]).unwrap();
            assert!(
                matches!(read_checkpoint(&path), Err(FormatError::Truncated { .. })),
                "cut at {cut} must be a clean truncation error"
            );
        }
    }
}
