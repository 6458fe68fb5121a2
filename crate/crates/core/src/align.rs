//! Background registration by homography: Shi-Tomasi corners, NCC patch
//! matching, RANSAC and a normalized DLT refit on the inliers.

use log::warn;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::radiance::{ExposureStack, LdrImage, RgbImage, DEFAULT_GAMMA};

pub type Point = (f64, f64);

/// Projective map of pixel coordinates `(x = column, y = row)`, scaled so `m[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: Matrix3::identity(),
        }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("homography has non-finite entries".into()));
        }
        let s = m[(2, 2)];
        if s.abs() < 1e-12 {
            return Err(Error::Parameter(
                "homography cannot be normalized (m22 = 0)".into(),
            ));
        }
        let m = m / s;
        if m.determinant().abs() <= 1e-12 {
            return Err(Error::Parameter("homography is singular".into()));
        }
        Ok(Homography { m })
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }

    pub fn row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography {
            m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Parameter("homography is singular".into()))?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    pub fn apply(&self, (x, y): Point) -> Point {
        project(&self.m, (x, y))
    }

    /// Mean distance between the images of `points` under `self` and `other`.
    pub fn mean_transfer_distance(&self, other: &Homography, points: &[Point]) -> f64 {
        let total: f64 = points
            .iter()
            .map(|&p| {
                let (a, b) = (self.apply(p), other.apply(p));
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
            })
            .sum();
        total / points.len().max(1) as f64
    }
}

fn project(m: &Matrix3<f64>, (x, y): Point) -> Point {
    let v = m * Vector3::new(x, y, 1.0);
    (v[0] / v[2], v[1] / v[2])
}

/// Putative correspondences `(moving, reference)` with the RANSAC verdict.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<(Point, Point)>,
    pub inlier_mask: Vec<bool>,
}

impl MatchSet {
    pub fn new(pairs: Vec<(Point, Point)>) -> Self {
        let n = pairs.len();
        MatchSet {
            pairs,
            inlier_mask: vec![false; n],
        }
    }

    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }

    pub fn inliers(&self) -> Vec<(Point, Point)> {
        self.pairs
            .iter()
            .zip(&self.inlier_mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect()
    }
}

/// Similarity transform moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(points: impl Iterator<Item = Point> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (cx, cy) = (sx / n, sy / n);
    let mean_d = points
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_d > 1e-12 {
        std::f64::consts::SQRT_2 / mean_d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over `pairs` (at least 4).
pub fn fit_dlt(pairs: &[(Point, Point)]) -> Option<Matrix3<f64>> {
    if pairs.len() < 4 {
        return None;
    }
    let ts = normalizer(pairs.iter().map(|p| p.0));
    let td = normalizer(pairs.iter().map(|p| p.1));
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, &(s, d)) in pairs.iter().enumerate() {
        let (x, y) = project(&ts, s);
        let (u, v) = project(&td, d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = vt.row(idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let m = td.try_inverse()? * hn * ts;
    if m.iter().any(|v| !v.is_finite()) || m[(2, 2)].abs() < 1e-15 {
        return None;
    }
    Some(m / m[(2, 2)])
}

fn transfer_error_sq(m: &Matrix3<f64>, (s, d): (Point, Point)) -> f64 {
    let v = m * Vector3::new(s.0, s.1, 1.0);
    if v[2].abs() < 1e-12 {
        return f64::INFINITY;
    }
    (v[0] / v[2] - d.0).powi(2) + (v[1] / v[2] - d.1).powi(2)
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs() < 1e-6
}

fn degenerate(s: &[Point]) -> bool {
    (0..4).any(|i| {
        let o: Vec<Point> = (0..4).filter(|&j| j != i).map(|j| s[j]).collect();
        collinear(o[0], o[1], o[2])
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RansacOptions {
    /// Inlier threshold on the forward transfer error, pixels.
    pub threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        RansacOptions {
            threshold: 2.0,
            max_iterations: 2000,
            confidence: 0.995,
            seed: 0x5eed,
        }
    }
}

/// Robust homography from putative matches (`moving -> reference`).
pub fn ransac_homography(
    pairs: &[(Point, Point)],
    opts: &RansacOptions,
) -> Result<(Homography, MatchSet)> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::Alignment(format!("{n} matches, need at least 4")));
    }
    let thr2 = opts.threshold * opts.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let score = |m: &Matrix3<f64>| -> (usize, f64) {
        pairs.iter().fold((0, 0.0), |(c, e), &p| {
            let d = transfer_error_sq(m, p);
            if d < thr2 {
                (c + 1, e + d)
            } else {
                (c, e)
            }
        })
    };
    let mut best: Option<(Matrix3<f64>, usize, f64)> = None;
    let mut needed = opts.max_iterations;
    let mut it = 0;
    while it < needed.min(opts.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let sel: Vec<(Point, Point)> = idx.iter().map(|i| pairs[i]).collect();
        let src: Vec<Point> = sel.iter().map(|p| p.0).collect();
        let dst: Vec<Point> = sel.iter().map(|p| p.1).collect();
        if degenerate(&src) || degenerate(&dst) {
            continue;
        }
        let Some(m) = fit_dlt(&sel) else { continue };
        let (count, err) = score(&m);
        let better = match &best {
            None => true,
            Some((_, c, e)) => count > *c || (count == *c && err < *e),
        };
        if better {
            best = Some((m, count, err));
            let w = count as f64 / n as f64;
            let p_fail = 1.0 - w.powi(4);
            needed = if p_fail <= 0.0 {
                0
            } else if p_fail < 1.0 {
                ((1.0 - opts.confidence).ln() / p_fail.ln()).ceil() as usize
            } else {
                opts.max_iterations
            };
        }
    }
    let (mut m, mut count, _) =
        best.ok_or_else(|| Error::Alignment("no non-degenerate sample".into()))?;
    let mut set = MatchSet::new(pairs.to_vec());
    // refit on the consensus set until it stops changing
    for _ in 0..10 {
        for (flag, &p) in set.inlier_mask.iter_mut().zip(pairs) {
            *flag = transfer_error_sq(&m, p) < thr2;
        }
        let inl = set.inliers();
        if inl.len() < 4 {
            break;
        }
        let Some(refit) = fit_dlt(&inl) else { break };
        let (c, _) = score(&refit);
        if c < count {
            break;
        }
        let converged = c == count && (refit - m).abs().max() < 1e-12;
        m = refit;
        count = c;
        if converged {
            break;
        }
    }
    for (flag, &p) in set.inlier_mask.iter_mut().zip(pairs) {
        *flag = transfer_error_sq(&m, p) < thr2;
    }
    if set.inlier_count() < 4 {
        return Err(Error::Alignment(format!(
            "{} inliers, need at least 4",
            set.inlier_count()
        )));
    }
    Ok((
        Homography::from_matrix(m).map_err(|e| Error::Alignment(e.to_string()))?,
        set,
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct AlignOptions {
    pub gamma: f64,
    pub max_corners: usize,
    /// Corner response floor relative to the strongest response.
    pub quality: f64,
    pub nms_radius: usize,
    pub descriptor_radius: usize,
    pub min_correlation: f64,
    /// Matches further apart than this fraction of the larger image side are ignored.
    pub max_shift_fraction: f64,
    pub ransac: RansacOptions,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            gamma: DEFAULT_GAMMA,
            max_corners: 1500,
            quality: 0.01,
            nms_radius: 4,
            descriptor_radius: 7,
            min_correlation: 0.8,
            max_shift_fraction: 0.25,
            ransac: RansacOptions::default(),
        }
    }
}

/// Single-channel plane.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.w + c]
    }
}

/// Luminance mapped through the exposure normalisation and gamma-lifted back,
/// then standardized so that a global intensity scale has no effect.
fn matching_plane(frame: &LdrImage, gamma: f64) -> Plane {
    let (h, w) = frame.dims();
    let t = frame.exposure_time();
    let mut v: Vec<f64> = frame
        .pixels()
        .luminance()
        .into_iter()
        .map(|l| (l.powf(gamma) / t).powf(1.0 / gamma))
        .collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let s = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * s);
    Plane { w, h, v }
}

fn blur(p: &Plane, sigma: f64) -> Plane {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / s).collect();
    let (w, h) = (p.w as isize, p.h as isize);
    let mut tmp = vec![0.0; p.v.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * p.v[(y * w + (x + i as isize - r).clamp(0, w - 1)) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; p.v.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[((y + i as isize - r).clamp(0, h - 1) * w + x) as usize])
                .sum();
        }
    }
    Plane {
        w: p.w,
        h: p.h,
        v: out,
    }
}

struct Corner {
    x: f64,
    y: f64,
    descriptor: Vec<f64>,
}

/// Shi-Tomasi corners with sub-pixel peak refinement and NCC descriptors.
fn detect_corners(p: &Plane, opts: &AlignOptions) -> Vec<Corner> {
    let (w, h) = (p.w, p.h);
    let margin = opts.descriptor_radius + 2;
    if w <= 2 * margin + 2 || h <= 2 * margin + 2 {
        return Vec::new();
    }
    let mut gxx = Plane {
        w,
        h,
        v: vec![0.0; w * h],
    };
    let mut gyy = Plane {
        w,
        h,
        v: vec![0.0; w * h],
    };
    let mut gxy = Plane {
        w,
        h,
        v: vec![0.0; w * h],
    };
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let gx = (p.at(r, c + 1) - p.at(r, c - 1)) * 0.5;
            let gy = (p.at(r + 1, c) - p.at(r - 1, c)) * 0.5;
            let i = r * w + c;
            gxx.v[i] = gx * gx;
            gyy.v[i] = gy * gy;
            gxy.v[i] = gx * gy;
        }
    }
    let (a, b, c) = (blur(&gxx, 1.5), blur(&gxy, 1.5), blur(&gyy, 1.5));
    let resp: Vec<f64> = (0..w * h)
        .map(|i| {
            let (a, b, c) = (a.v[i], b.v[i], c.v[i]);
            (a + c) * 0.5 - (((a - c) * 0.5).powi(2) + b * b).sqrt()
        })
        .collect();
    let max = resp.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let floor = opts.quality * max;
    let nr = opts.nms_radius;
    let mut peaks = Vec::new();
    for r in margin..h - margin {
        for c in margin..w - margin {
            let v = resp[r * w + c];
            if v < floor {
                continue;
            }
            let mut is_max = true;
            'win: for rr in r.saturating_sub(nr)..=(r + nr).min(h - 1) {
                for cc in c.saturating_sub(nr)..=(c + nr).min(w - 1) {
                    let o = resp[rr * w + cc];
                    // ties broken by scan order so plateaus yield one peak
                    if o > v || (o == v && (rr, cc) < (r, c)) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                peaks.push((v, r, c));
            }
        }
    }
    peaks.sort_by(|x, y| y.0.total_cmp(&x.0));
    peaks.truncate(opts.max_corners);
    let refine = |l: f64, m: f64, r: f64| {
        let d = l - 2.0 * m + r;
        if d.abs() < 1e-15 {
            0.0
        } else {
            (0.5 * (l - r) / d).clamp(-0.5, 0.5)
        }
    };
    let dr = opts.descriptor_radius;
    peaks
        .into_iter()
        .filter_map(|(_, r, c)| {
            let ox = refine(resp[r * w + c - 1], resp[r * w + c], resp[r * w + c + 1]);
            let oy = refine(
                resp[(r - 1) * w + c],
                resp[r * w + c],
                resp[(r + 1) * w + c],
            );
            let mut d: Vec<f64> = Vec::with_capacity((2 * dr + 1).pow(2));
            for rr in r - dr..=r + dr {
                d.extend_from_slice(&p.v[rr * w + c - dr..=rr * w + c + dr]);
            }
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            d.iter_mut().for_each(|v| *v -= mean);
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return None;
            }
            d.iter_mut().for_each(|v| *v /= norm);
            Some(Corner {
                x: c as f64 + ox,
                y: r as f64 + oy,
                descriptor: d,
            })
        })
        .collect()
}

/// Mutual-best NCC matches between corner sets, `(moving, reference)`.
fn match_corners(
    mv: &[Corner],
    rf: &[Corner],
    opts: &AlignOptions,
    max_shift: f64,
) -> Vec<(Point, Point)> {
    let ncc = |a: &Corner, b: &Corner| -> f64 {
        if (a.x - b.x).abs() > max_shift || (a.y - b.y).abs() > max_shift {
            return -1.0;
        }
        a.descriptor
            .iter()
            .zip(&b.descriptor)
            .map(|(x, y)| x * y)
            .sum()
    };
    let scores: Vec<Vec<f64>> = mv
        .par_iter()
        .map(|a| rf.iter().map(|b| ncc(a, b)).collect())
        .collect();
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| it.max_by(|x, y| x.1.total_cmp(&y.1));
    let best_for_ref: Vec<Option<(usize, f64)>> = (0..rf.len())
        .map(|j| argmax(&mut (0..mv.len()).map(|i| (i, scores[i][j]))))
        .collect();
    let mut out = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        let Some((j, s)) = argmax(&mut row.iter().copied().enumerate()) else {
            continue;
        };
        if s < opts.min_correlation {
            continue;
        }
        if best_for_ref[j].map(|b| b.0) != Some(i) {
            continue;
        }
        out.push(((mv[i].x, mv[i].y), (rf[j].x, rf[j].y)));
    }
    out
}

/// Homography taking `moving` pixel coordinates onto `reference`, i.e.
/// `warp(moving, h)` lines up with `reference`.
pub fn estimate_homography(moving: &LdrImage, reference: &LdrImage) -> Result<Homography> {
    estimate_homography_with(moving, reference, &AlignOptions::default()).map(|(h, _)| h)
}

pub fn estimate_homography_with(
    moving: &LdrImage,
    reference: &LdrImage,
    opts: &AlignOptions,
) -> Result<(Homography, MatchSet)> {
    if moving.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "moving frame {:?} vs reference {:?}",
            moving.dims(),
            reference.dims()
        )));
    }
    let (pm, pr) = rayon::join(
        || matching_plane(moving, opts.gamma),
        || matching_plane(reference, opts.gamma),
    );
    let (cm, cr) = rayon::join(|| detect_corners(&pm, opts), || detect_corners(&pr, opts));
    let (h, w) = reference.dims();
    let max_shift = opts.max_shift_fraction * h.max(w) as f64;
    let pairs = match_corners(&cm, &cr, opts, max_shift);
    ransac_homography(&pairs, &opts.ransac)
}

/// Bilinear sample with coordinates clamped to the raster.
#[inline]
fn sample_bilinear(img: &RgbImage, x: f64, y: f64, out: &mut [f64]) {
    let (h, w) = img.dims();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let d = img.data();
    for ch in 0..3 {
        let p = |r: usize, c: usize| d[(r * w + c) * 3 + ch];
        let top = if fx == 0.0 {
            p(y0, x0)
        } else {
            p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx
        };
        let bot = if fx == 0.0 {
            p(y1, x0)
        } else {
            p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx
        };
        out[ch] = if fy == 0.0 {
            top
        } else {
            top * (1.0 - fy) + bot * fy
        };
    }
}

/// Resamples `img` so that content at `p` moves to `h(p)`; output size is unchanged.
pub fn warp_rgb(img: &RgbImage, h: &Homography) -> RgbImage {
    let inv =
        h.m.try_inverse()
            .expect("homography invariant guarantees invertibility");
    let (height, width) = img.dims();
    let mut out = RgbImage::new(width, height);
    out.data_mut()
        .par_chunks_mut(width * 3)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..width {
                let (x, y) = project(&inv, (c as f64, r as f64));
                sample_bilinear(img, x, y, &mut row[c * 3..c * 3 + 3]);
            }
        });
    out
}

pub fn warp(image: &LdrImage, h: &Homography) -> LdrImage {
    image.with_pixels(warp_rgb(image.pixels(), h))
}

/// Per-frame outcome of [`align_stack`].
#[derive(Debug, Clone, PartialEq)]
pub enum FrameAlignment {
    Reference,
    Aligned(Homography),
    /// Left unwarped.
    Failed(String),
}

/// Warps every non-reference frame onto the reference background. Failures
/// are logged and leave the frame untouched.
pub fn align_stack(stack: &ExposureStack) -> (ExposureStack, Vec<FrameAlignment>) {
    align_stack_with(stack, &AlignOptions::default())
}

pub fn align_stack_with(
    stack: &ExposureStack,
    opts: &AlignOptions,
) -> (ExposureStack, Vec<FrameAlignment>) {
    let ri = stack.reference_index();
    let reference = stack.reference();
    let results: Vec<(RgbImage, FrameAlignment)> = stack
        .frames()
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            if i == ri {
                return (f.pixels().clone(), FrameAlignment::Reference);
            }
            match estimate_homography_with(f, reference, opts) {
                Ok((h, _)) => (warp_rgb(f.pixels(), &h), FrameAlignment::Aligned(h)),
                Err(e) => {
                    warn!("frame {i}: {e}; leaving it unaligned");
                    (f.pixels().clone(), FrameAlignment::Failed(e.to_string()))
                }
            }
        })
        .collect();
    let (rasters, report): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let aligned = stack
        .with_rasters(rasters)
        .expect("warping preserves frame count and size");
    (aligned, report)
}

/// Applies precomputed homographies (one per frame, e.g. from a sidecar file).
pub fn apply_homographies(stack: &ExposureStack, hs: &[Homography]) -> Result<ExposureStack> {
    if hs.len() != stack.len() {
        return Err(Error::Parameter(format!(
            "{} homographies for {} frames",
            hs.len(),
            stack.len()
        )));
    }
    let rasters = stack
        .frames()
        .par_iter()
        .zip(hs)
        .map(|(f, h)| warp_rgb(f.pixels(), h))
        .collect();
    stack.with_rasters(rasters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::Rng;

    fn frame(img: RgbImage) -> LdrImage {
        LdrImage::new(img, 0.0, 1.0).unwrap()
    }

    fn grid(w: usize, h: usize) -> Vec<Point> {
        let mut pts = Vec::new();
        for r in (0..h).step_by(16) {
            for c in (0..w).step_by(16) {
                pts.push((c as f64, r as f64));
            }
        }
        pts
    }

    #[test]
    fn dlt_recovers_exact_homography() {
        let truth =
            Homography::from_row_major([1.02, 0.03, 4.0, -0.02, 0.98, -6.0, 1e-4, -5e-5, 1.0])
                .unwrap();
        let pts = grid(200, 150);
        let pairs: Vec<_> = pts.iter().map(|&p| (p, truth.apply(p))).collect();
        let corners: Vec<_> = [(0.0, 0.0), (199.0, 0.0), (199.0, 149.0), (0.0, 149.0)]
            .iter()
            .map(|&p| (p, truth.apply(p)))
            .collect();
        let m = Homography::from_matrix(fit_dlt(&corners).unwrap()).unwrap();
        assert!(m.mean_transfer_distance(&truth, &pts) < 1e-8);
        let m = Homography::from_matrix(fit_dlt(&pairs).unwrap()).unwrap();
        assert!(m.mean_transfer_distance(&truth, &pts) < 1e-8);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let truth =
            Homography::from_row_major([0.99, -0.02, 3.0, 0.01, 1.01, 2.0, 2e-5, 1e-5, 1.0])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pairs = Vec::new();
        for i in 0..200 {
            let p = (rng.gen_range(0.0..300.0), rng.gen_range(0.0..200.0));
            let q = if i % 3 == 0 {
                (rng.gen_range(0.0..300.0), rng.gen_range(0.0..200.0))
            } else {
                truth.apply(p)
            };
            pairs.push((p, q));
        }
        let (h, set) = ransac_homography(&pairs, &RansacOptions::default()).unwrap();
        assert!(h.mean_transfer_distance(&truth, &grid(300, 200)) < 1e-6);
        assert!(set.inlier_count() >= 133 && set.inlier_count() < 140);
    }

    #[test]
    fn too_few_matches_is_an_alignment_error() {
        let pairs = vec![((0.0, 0.0), (1.0, 1.0)); 3];
        assert!(matches!(
            ransac_homography(&pairs, &RansacOptions::default()),
            Err(Error::Alignment(_))
        ));
        let flat = frame(RgbImage::filled(64, 64, 0.5));
        assert!(matches!(
            estimate_homography(&flat, &flat),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn self_alignment_is_identity() {
        let img = frame(synth::texture(160, 128, 3));
        let h = estimate_homography(&img, &img).unwrap();
        let id = Homography::identity();
        for (a, b) in h.row_major().iter().zip(id.row_major()) {
            assert!((a - b).abs() < 1e-3, "{:?}", h.row_major());
        }
    }

    #[test]
    fn recovers_translation() {
        let base = synth::texture(200, 160, 4);
        let reference = frame(warp_rgb(&base, &Homography::translation(5.0, -3.0)));
        let h = estimate_homography(&frame(base), &reference).unwrap();
        let (dx, dy) = h.apply((100.0, 80.0));
        assert!(
            (dx - 105.0).abs() < 0.5 && (dy - 77.0).abs() < 0.5,
            "{dx} {dy}"
        );
    }

    #[test]
    fn recovers_projective_warp_and_ignores_intensity_scale() {
        let base = synth::texture(240, 200, 5);
        let truth =
            Homography::from_row_major([1.01, 0.02, 2.0, -0.015, 0.995, 3.0, 3e-5, -2e-5, 1.0])
                .unwrap();
        let moving = frame(base.clone());
        let reference = frame(warp_rgb(&base, &truth));
        let h = estimate_homography(&moving, &reference).unwrap();
        let pts = grid(240, 200);
        assert!(h.mean_transfer_distance(&truth, &pts) < 0.5);

        let dim = moving.with_pixels(moving.pixels().map(|v| v * 0.5));
        let h2 = estimate_homography(&dim, &reference).unwrap();
        assert!(h2.mean_transfer_distance(&h, &pts) < 1e-6);

        // estimating the other way round gives the inverse
        let back = estimate_homography(&reference, &moving).unwrap();
        assert!(back.mean_transfer_distance(&truth.inverse().unwrap(), &pts) < 0.5);
    }

    #[test]
    fn warp_identity_and_integer_shift_are_exact() {
        let img = synth::texture(40, 30, 6);
        assert_eq!(warp_rgb(&img, &Homography::identity()), img);
        let shifted = warp_rgb(&img, &Homography::translation(2.0, 0.0));
        for r in 0..30 {
            for c in 2..40 {
                for ch in 0..3 {
                    assert_eq!(shifted.get(r, c, ch), img.get(r, c - 2, ch));
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_and_range() {
        let img = synth::texture(120, 100, 7);
        let h = Homography::from_row_major([1.02, 0.01, 1.5, -0.01, 0.99, -2.5, 1e-5, 2e-5, 1.0])
            .unwrap();
        let fwd = warp_rgb(&img, &h);
        let back = warp_rgb(&fwd, &h.inverse().unwrap());
        let mut worst: f64 = 0.0;
        for r in 10..90 {
            for c in 10..110 {
                for ch in 0..3 {
                    worst = worst.max((back.get(r, c, ch) - img.get(r, c, ch)).abs());
                }
            }
        }
        // the synthetic texture is band-limited, so two bilinear resamplings stay close
        assert!(worst < 0.02, "{worst}");
        assert!(fwd.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn align_stack_removes_shift() {
        let base = synth::texture(200, 160, 8);
        let shifted = warp_rgb(&base, &Homography::translation(-4.0, 2.0));
        let dark = shifted.map(|v| v * 0.5);
        let stack = ExposureStack::from_biases(
            vec![dark, base.clone(), base.clone()],
            &[-1.0, 0.0, 0.0],
            1,
        )
        .unwrap();
        let (aligned, report) = align_stack(&stack);
        assert_eq!(report[1], FrameAlignment::Reference);
        assert_eq!(aligned.frames()[1], stack.frames()[1]);
        let FrameAlignment::Aligned(h) = &report[0] else {
            panic!("{:?}", report[0])
        };
        let (x, y) = h.apply((50.0, 50.0));
        assert!((x - 54.0).abs() < 0.5 && (y - 48.0).abs() < 0.5);
        let FrameAlignment::Aligned(h2) = &report[2] else {
            panic!()
        };
        assert!(h2.mean_transfer_distance(&Homography::identity(), &grid(200, 160)) < 0.05);

        let single = ExposureStack::from_biases(vec![base], &[0.0], 0).unwrap();
        assert_eq!(align_stack(&single).0, single);
    }
}
