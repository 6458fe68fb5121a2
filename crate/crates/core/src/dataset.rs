//! Training data: scene loading, patch extraction, dihedral augmentation,
//! motion-aware oversampling and the binary patch store.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::ssim_plane;
use crate::radiance::{
    build_network_input, linearize, CrfTable, ExposureStack, RadianceImage, DEFAULT_GAMMA,
};

/// One captured scene: an exposure stack with backgrounds aligned, and the
/// ground-truth radiance registered to its reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub stack: ExposureStack,
    pub ground_truth: RadianceImage,
}

impl Scene {
    pub fn new(
        name: impl Into<String>,
        stack: ExposureStack,
        ground_truth: RadianceImage,
    ) -> Result<Self> {
        if stack.dims() != ground_truth.dims() {
            return Err(Error::Shape(format!(
                "ground truth {:?} vs frames {:?}",
                ground_truth.dims(),
                stack.dims()
            )));
        }
        Ok(Scene {
            name: name.into(),
            stack,
            ground_truth,
        })
    }
}

/// One training example. `inputs` holds `k` planes of `size x size x 6`
/// (`[I | H]` per pixel) and `target` one `size x size x 3` radiance patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub k: usize,
    pub size: usize,
    pub inputs: Vec<f32>,
    pub target: Vec<f32>,
    pub motion_flag: bool,
    /// `scene@y<row>x<col>`, with `#d<id>` appended by augmentation.
    pub provenance: String,
}

impl PatchRecord {
    pub fn new(
        k: usize,
        size: usize,
        inputs: Vec<f32>,
        target: Vec<f32>,
        motion_flag: bool,
        provenance: String,
    ) -> Result<Self> {
        if inputs.len() != k * size * size * 6 || target.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "record with k={k}, size={size} has {} input and {} target samples",
                inputs.len(),
                target.len()
            )));
        }
        if let Some(v) = inputs
            .iter()
            .chain(&target)
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Parameter(format!("patch sample {v} outside [0, 1]")));
        }
        Ok(PatchRecord {
            k,
            size,
            inputs,
            target,
            motion_flag,
            provenance,
        })
    }

    pub fn input_plane(&self, i: usize) -> &[f32] {
        let n = self.size * self.size * 6;
        &self.inputs[i * n..(i + 1) * n]
    }
}

/// Disjoint train/test scene lists, stored as `{"train": [...], "test": [...]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(alias = "train_scenes")]
    pub train: Vec<String>,
    #[serde(alias = "test_scenes", default)]
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self, available: &[String]) -> Result<()> {
        if let Some(s) = self.train.iter().find(|s| self.test.contains(s)) {
            return Err(Error::Parameter(format!(
                "scene '{s}' is in both train and test"
            )));
        }
        if let Some(s) = self
            .train
            .iter()
            .chain(&self.test)
            .find(|s| !available.contains(s))
        {
            return Err(Error::Parameter(format!("scene '{s}' is not available")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchOptions {
    pub size: usize,
    pub stride: usize,
    pub gamma: f64,
    /// Patches whose motion score exceeds this are flagged.
    pub motion_threshold: f64,
}

impl Default for PatchOptions {
    fn default() -> Self {
        PatchOptions {
            size: 256,
            stride: 64,
            gamma: DEFAULT_GAMMA,
            motion_threshold: 0.2,
        }
    }
}

/// Top-left corners of every full patch on the stride grid, row-major.
pub fn patch_offsets(
    height: usize,
    width: usize,
    size: usize,
    stride: usize,
) -> Vec<(usize, usize)> {
    if size == 0 || stride == 0 || height < size || width < size {
        return Vec::new();
    }
    let rows = (height - size) / stride + 1;
    let cols = (width - size) / stride + 1;
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i * stride, j * stride)))
        .collect()
}

/// Luminance in the exposure-normalised domain, clipped to the range every frame can
/// represent and rescaled to `[0, 1]`, so exposure differences and
/// saturation are not mistaken for motion.
pub fn motion_planes(stack: &ExposureStack, gamma: f64) -> Vec<Vec<f64>> {
    let ceiling = stack
        .frames()
        .iter()
        .map(|f| 1.0 / f.exposure_time())
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    stack
        .frames()
        .iter()
        .map(|f| {
            let t = f.exposure_time();
            f.pixels()
                .luminance()
                .into_iter()
                .map(|l| (l.powf(gamma) / t).min(ceiling) / ceiling)
                .collect()
        })
        .collect()
}

fn crop_plane(plane: &[f64], width: usize, row: usize, col: usize, h: usize, w: usize) -> Vec<f64> {
    (row..row + h)
        .flat_map(|r| plane[r * width + col..r * width + col + w].iter().copied())
        .collect()
}

fn region_score(
    planes: &[Vec<f64>],
    width: usize,
    (row, col, h, w): (usize, usize, usize, usize),
) -> f64 {
    let crops: Vec<Vec<f64>> = planes
        .iter()
        .map(|p| crop_plane(p, width, row, col, h, w))
        .collect();
    let mut min_ssim: f64 = 1.0;
    for i in 0..crops.len() {
        for j in i + 1..crops.len() {
            min_ssim = min_ssim.min(ssim_plane(&crops[i], &crops[j], h, w));
        }
    }
    (1.0 - min_ssim).clamp(0.0, 1.0)
}

/// `1 - min` pairwise SSIM of exposure-normalized luminance over the region
/// `(row, col, height, width)`; higher means more motion.
pub fn motion_score(
    stack: &ExposureStack,
    gamma: f64,
    region: (usize, usize, usize, usize),
) -> Result<f64> {
    let (h, w) = stack.dims();
    let (row, col, rh, rw) = region;
    if row + rh > h || col + rw > w || rh == 0 || rw == 0 {
        return Err(Error::Shape(format!(
            "region {region:?} outside {h}x{w} frames"
        )));
    }
    Ok(region_score(&motion_planes(stack, gamma), w, region))
}

pub fn extract_patches(scene: &Scene, size: usize, stride: usize) -> Result<Vec<PatchRecord>> {
    extract_patches_with(
        scene,
        &PatchOptions {
            size,
            stride,
            ..PatchOptions::default()
        },
    )
}

/// Cuts aligned input/target patches on the stride grid and flags those
/// whose motion score exceeds the threshold.
pub fn extract_patches_with(scene: &Scene, opts: &PatchOptions) -> Result<Vec<PatchRecord>> {
    let (h, w) = scene.stack.dims();
    let s = opts.size;
    let offsets = patch_offsets(h, w, s, opts.stride);
    if offsets.is_empty() {
        warn!(
            "scene {}: {}x{} is smaller than a {s}x{s} patch",
            scene.name, h, w
        );
        return Ok(Vec::new());
    }
    let input = build_network_input(&scene.stack, opts.gamma)?;
    let planes = input.planes.data();
    let k = scene.stack.len();
    let gt = scene.ground_truth.pixels().data();
    let motion = motion_planes(&scene.stack, opts.gamma);
    let records = offsets
        .par_iter()
        .map(|&(row, col)| {
            let mut inputs = Vec::with_capacity(k * s * s * 6);
            for f in 0..k {
                let base = f * h * w * 6;
                for r in row..row + s {
                    let start = base + (r * w + col) * 6;
                    inputs.extend_from_slice(&planes[start..start + s * 6]);
                }
            }
            let mut target = Vec::with_capacity(s * s * 3);
            for r in row..row + s {
                let start = (r * w + col) * 3;
                target.extend(gt[start..start + s * 3].iter().map(|&v| v as f32));
            }
            let score = region_score(&motion, w, (row, col, s, s));
            PatchRecord {
                k,
                size: s,
                inputs,
                target,
                motion_flag: score > opts.motion_threshold,
                provenance: format!("{}@y{}x{}", scene.name, row, col),
            }
        })
        .collect();
    Ok(records)
}

/// Destination of pixel `(r, c)` of an `n x n` patch under dihedral element
/// `id`: an optional horizontal flip (`id >= 4`) followed by `id % 4`
/// quarter turns, each mapping `(r, c)` to `(c, n - 1 - r)`.
pub fn dihedral_map(n: usize, id: usize, r: usize, c: usize) -> (usize, usize) {
    let (mut r, mut c) = if id >= 4 { (r, n - 1 - c) } else { (r, c) };
    for _ in 0..id % 4 {
        (r, c) = (c, n - 1 - r);
    }
    (r, c)
}

fn transform_plane(src: &[f32], n: usize, channels: usize, id: usize, dst: &mut Vec<f32>) {
    let start = dst.len();
    dst.resize(start + src.len(), 0.0);
    let out = &mut dst[start..];
    for r in 0..n {
        for c in 0..n {
            let (rr, cc) = dihedral_map(n, id, r, c);
            let s = (r * n + c) * channels;
            let d = (rr * n + cc) * channels;
            out[d..d + channels].copy_from_slice(&src[s..s + channels]);
        }
    }
}

/// Applies dihedral element `id` (0 is the identity) to every input plane and the target.
pub fn transform_record(record: &PatchRecord, id: usize) -> PatchRecord {
    let n = record.size;
    let mut inputs = Vec::with_capacity(record.inputs.len());
    for i in 0..record.k {
        transform_plane(record.input_plane(i), n, 6, id, &mut inputs);
    }
    let mut target = Vec::with_capacity(record.target.len());
    transform_plane(&record.target, n, 3, id, &mut target);
    PatchRecord {
        k: record.k,
        size: n,
        inputs,
        target,
        motion_flag: record.motion_flag,
        provenance: format!("{}#d{}", record.provenance, id),
    }
}

/// The eight flips and rotations of a record, identity first.
pub fn augment(record: &PatchRecord) -> Vec<PatchRecord> {
    (0..8).map(|id| transform_record(record, id)).collect()
}

/// Repeats motion-flagged records `factor` times in total and shuffles the
/// result deterministically.
pub fn oversample(records: Vec<PatchRecord>, factor: usize, seed: u64) -> Vec<PatchRecord> {
    let factor = factor.max(1);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.motion_flag {
            for _ in 1..factor {
                out.push(r.clone());
            }
        }
        out.push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    out
}

const STORE_MAGIC: &[u8; 4] = b"HDRP";
const STORE_VERSION: u32 = 1;

pub fn write_store<W: Write>(w: W, records: &[PatchRecord]) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(STORE_MAGIC)?;
    w.write_u32::<LittleEndian>(STORE_VERSION)?;
    w.write_u32::<LittleEndian>(
        u32::try_from(records.len()).map_err(|_| Error::Parameter("too many records".into()))?,
    )?;
    for r in records {
        let k = u8::try_from(r.k)
            .map_err(|_| Error::Parameter(format!("k = {} does not fit the store", r.k)))?;
        let size = u16::try_from(r.size)
            .map_err(|_| Error::Parameter(format!("size {} does not fit the store", r.size)))?;
        w.write_u8(k)?;
        w.write_u16::<LittleEndian>(size)?;
        for &v in r.inputs.iter().chain(&r.target) {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.write_u8(r.motion_flag as u8)?;
        let p = r.provenance.as_bytes();
        let len =
            u16::try_from(p.len()).map_err(|_| Error::Parameter("provenance too long".into()))?;
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(p)?;
    }
    w.flush()?;
    Ok(())
}

struct Tracked<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for Tracked<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn store_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "patch store",
        offset,
        reason: reason.into(),
    }
}

pub fn read_store<R: Read>(r: R) -> Result<Vec<PatchRecord>> {
    let mut r = Tracked {
        inner: BufReader::new(r),
        offset: 0,
    };
    // maps I/O failures (mostly truncation) onto the offset where they occurred
    macro_rules! rd {
        ($e:expr, $what:expr) => {{
            let at = r.offset;
            $e.map_err(|e| store_err(at, format!("{}: {}", $what, e)))?
        }};
    }
    let mut magic = [0u8; 4];
    rd!(r.read_exact(&mut magic), "magic");
    if &magic != STORE_MAGIC {
        return Err(store_err(0, "bad magic"));
    }
    let version = rd!(r.read_u32::<LittleEndian>(), "version");
    if version != STORE_VERSION {
        return Err(store_err(4, format!("unsupported version {version}")));
    }
    let count = rd!(r.read_u32::<LittleEndian>(), "record count");
    let mut out = Vec::with_capacity((count as usize).min(1 << 16));
    for i in 0..count {
        let start = r.offset;
        let k = rd!(r.read_u8(), format!("record {i} k")) as usize;
        let size = rd!(r.read_u16::<LittleEndian>(), format!("record {i} size")) as usize;
        if k == 0 || size == 0 {
            return Err(store_err(
                start,
                format!("record {i} has k={k}, size={size}"),
            ));
        }
        let n_in = k * size * size * 6;
        let mut vals = vec![0f32; n_in + size * size * 3];
        rd!(
            r.read_f32_into::<LittleEndian>(&mut vals),
            format!("record {i} samples")
        );
        let target = vals.split_off(n_in);
        let flag_at = r.offset;
        let motion_flag = match rd!(r.read_u8(), format!("record {i} flag")) {
            0 => false,
            1 => true,
            f => {
                return Err(store_err(
                    flag_at,
                    format!("record {i} has motion flag {f}"),
                ))
            }
        };
        let len = rd!(
            r.read_u16::<LittleEndian>(),
            format!("record {i} provenance length")
        ) as usize;
        let mut p = vec![0u8; len];
        let p_at = r.offset;
        rd!(r.read_exact(&mut p), format!("record {i} provenance"));
        let provenance =
            String::from_utf8(p).map_err(|_| store_err(p_at, "provenance is not UTF-8"))?;
        out.push(PatchRecord {
            k,
            size,
            inputs: vals,
            target,
            motion_flag,
            provenance,
        });
    }
    let mut probe = [0u8; 1];
    let end = r.offset;
    if rd!(r.read(&mut probe), "trailer") != 0 {
        return Err(store_err(end, "trailing bytes after the last record"));
    }
    Ok(out)
}

pub fn save_store(path: &Path, records: &[PatchRecord]) -> Result<()> {
    write_store(File::create(path)?, records)
}

pub fn load_store(path: &Path) -> Result<Vec<PatchRecord>> {
    read_store(File::open(path)?)
}

/// Input frames of a scene directory (`input_<n>.{tif,tiff,png}`), ordered by `n`.
fn input_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some((stem, ext)) = name.rsplit_once('.') else {
            continue;
        };
        if !matches!(ext.to_ascii_lowercase().as_str(), "tif" | "tiff" | "png") {
            continue;
        }
        if let Some(n) = stem
            .strip_prefix("input_")
            .and_then(|s| s.parse::<u32>().ok())
        {
            found.push((n, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Loads `<dir>/input_*.tif`, `<dir>/exposures.txt` and `<dir>/gt.hdr`.
/// Frames are ordered by exposure bias; the reference defaults to the
/// middle one. Ground-truth samples above 1 are clamped.
pub fn load_scene(dir: &Path, reference: Option<usize>, crf: Option<&CrfTable>) -> Result<Scene> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_string();
    let exposures = dir.join("exposures.txt");
    if !exposures.is_file() {
        return Err(Error::data(&exposures, "missing"));
    }
    let gt_path = dir.join("gt.hdr");
    if !gt_path.is_file() {
        return Err(Error::data(&gt_path, "missing"));
    }
    let biases = io::read_exposures(&exposures)?;
    let paths = input_frames(dir)?;
    if paths.len() != biases.len() {
        return Err(Error::data(
            dir,
            format!(
                "{} input frames but {} exposure values",
                paths.len(),
                biases.len()
            ),
        ));
    }
    let mut frames: Vec<(f64, crate::radiance::RgbImage)> = biases
        .iter()
        .zip(&paths)
        .map(|(&b, p)| Ok((b, io::read_ldr(p)?)))
        .collect::<Result<_>>()?;
    frames.sort_by(|a, b| a.0.total_cmp(&b.0));
    let biases: Vec<f64> = frames.iter().map(|f| f.0).collect();
    let reference = reference.unwrap_or(ExposureStack::middle_index(frames.len()));
    let mut stack = ExposureStack::from_biases(
        frames.into_iter().map(|f| f.1).collect(),
        &biases,
        reference,
    )?;
    if let Some(crf) = crf {
        let lin = stack
            .frames()
            .iter()
            .map(|f| linearize(f, Some(crf)).pixels().clone())
            .collect();
        stack = stack.with_rasters(lin)?;
    }
    let gt = io::read_hdr(&gt_path)?;
    let over = gt.data().iter().filter(|&&v| v > 1.0).count();
    if over > 0 {
        warn!(
            "{}: {} ground-truth samples above 1 clamped",
            gt_path.display(),
            over
        );
    }
    Scene::new(name, stack, RadianceImage::clamped(gt))
}

/// Writes a scene in the directory layout read by [`load_scene`] (16-bit TIFF inputs).
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in scene.stack.frames().iter().enumerate() {
        io::write_ldr16(&dir.join(format!("input_{}.tif", i + 1)), f.pixels())?;
    }
    let biases: Vec<f64> = scene
        .stack
        .frames()
        .iter()
        .map(|f| f.exposure_bias())
        .collect();
    io::write_exposures(&dir.join("exposures.txt"), &biases)?;
    io::write_hdr(&dir.join("gt.hdr"), scene.ground_truth.pixels())?;
    Ok(())
}

/// Sub-directories of `data_dir`, sorted by name.
pub fn scene_dirs(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}
