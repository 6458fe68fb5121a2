//! Radiometric primitives: linearization, gamma-domain exposure encoding and
//! mu-law range compression, plus assembly of the 6-channel network input.

use crate::error::{Error, Result};
use crate::net::Tensor;

/// Gamma used for the LDR to HDR-domain mapping when none is configured.
pub const DEFAULT_GAMMA: f64 = 2.2;
/// Compression level of the mu-law tonemapper used for training and evaluation.
pub const DEFAULT_MU: f64 = 5000.0;

/// Interleaved RGB raster, row-major, `height * width * 3` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} samples, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        RgbImage {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    /// Builds an image by evaluating `f(row, col, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    data.push(f(r, c, ch));
                }
            }
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * 3 + ch] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `size_h x size_w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<RgbImage> {
        if row + size_h > self.height || col + size_w > self.width {
            return Err(Error::Shape(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{} image",
                size_h, size_w, row, col, self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size_h * size_w * 3);
        for r in row..row + size_h {
            let start = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[start..start + size_w * 3]);
        }
        Ok(RgbImage {
            width: size_w,
            height: size_h,
            data,
        })
    }

    /// Rec. 709 luminance of every pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
            .collect()
    }

    pub fn same_dims(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_unit_range(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => Err(Error::Parameter(format!(
                "{} sample {} = {} outside [0, 1]",
                what, i, self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

/// A calibrated low-dynamic-range frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage {
    pixels: RgbImage,
    exposure_bias: f64,
    exposure_time: f64,
}

impl LdrImage {
    pub fn new(pixels: RgbImage, exposure_bias: f64, exposure_time: f64) -> Result<Self> {
        pixels.check_unit_range("LDR")?;
        if !(exposure_time > 0.0 && exposure_time.is_finite()) {
            return Err(Error::Parameter(format!(
                "exposure time must be positive, got {exposure_time}"
            )));
        }
        Ok(LdrImage {
            pixels,
            exposure_bias,
            exposure_time,
        })
    }

    /// Frame whose exposure time is `2^bias`, i.e. relative to a zero-bias shot.
    pub fn with_bias(pixels: RgbImage, exposure_bias: f64) -> Result<Self> {
        Self::new(pixels, exposure_bias, exposure_bias.exp2())
    }

    #[inline]
    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    #[inline]
    pub fn exposure_bias(&self) -> f64 {
        self.exposure_bias
    }

    #[inline]
    pub fn exposure_time(&self) -> f64 {
        self.exposure_time
    }

    pub fn with_exposure_time(&self, exposure_time: f64) -> Result<Self> {
        Self::new(self.pixels.clone(), self.exposure_bias, exposure_time)
    }

    /// Replaces the raster, keeping exposure metadata. Samples are clamped to `[0, 1]`.
    pub fn with_pixels(&self, pixels: RgbImage) -> Self {
        LdrImage {
            pixels: pixels.map(|v| v.clamp(0.0, 1.0)),
            exposure_bias: self.exposure_bias,
            exposure_time: self.exposure_time,
        }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }
}

/// HDR-domain radiance bounded to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceImage {
    pixels: RgbImage,
}

impl RadianceImage {
    pub fn new(pixels: RgbImage) -> Result<Self> {
        pixels.check_unit_range("radiance")?;
        Ok(RadianceImage { pixels })
    }

    /// Clamps every sample into `[0, 1]`; non-finite samples become 0.
    pub fn clamped(pixels: RgbImage) -> Self {
        RadianceImage {
            pixels: pixels.map(|v| {
                if v.is_finite() {
                    v.clamp(0.0, 1.0)
                } else {
                    0.0
                }
            }),
        }
    }

    #[inline]
    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }
}

/// Frames of one scene, ascending by exposure bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureStack {
    frames: Vec<LdrImage>,
    reference_index: usize,
}

impl ExposureStack {
    pub fn new(frames: Vec<LdrImage>, reference_index: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Parameter("exposure stack has no frames".into()));
        }
        if reference_index >= frames.len() {
            return Err(Error::Parameter(format!(
                "reference index {} out of range for {} frames",
                reference_index,
                frames.len()
            )));
        }
        if frames
            .windows(2)
            .any(|w| w[1].exposure_bias < w[0].exposure_bias)
        {
            return Err(Error::Parameter(
                "frames must be sorted ascending by exposure bias".into(),
            ));
        }
        let dims = frames[0].dims();
        if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
            return Err(Error::Shape(format!(
                "frame size {:?} differs from {:?}",
                f.dims(),
                dims
            )));
        }
        Ok(ExposureStack {
            frames,
            reference_index,
        })
    }

    /// Builds a stack from rasters and their biases. Exposure times are
    /// normalized so the reference frame has `t = 1` and every other frame
    /// `t = 2^(bias - reference_bias)`.
    pub fn from_biases(
        pixels: Vec<RgbImage>,
        biases: &[f64],
        reference_index: usize,
    ) -> Result<Self> {
        if pixels.len() != biases.len() {
            return Err(Error::Parameter(format!(
                "{} frames but {} exposure biases",
                pixels.len(),
                biases.len()
            )));
        }
        let ref_bias = *biases.get(reference_index).ok_or_else(|| {
            Error::Parameter(format!(
                "reference index {} out of range for {} frames",
                reference_index,
                biases.len()
            ))
        })?;
        let frames = pixels
            .into_iter()
            .zip(biases)
            .map(|(p, &b)| LdrImage::new(p, b, (b - ref_bias).exp2()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, reference_index)
    }

    /// Index of the middle frame, the default reference.
    pub fn middle_index(len: usize) -> usize {
        len / 2
    }

    #[inline]
    pub fn frames(&self) -> &[LdrImage] {
        &self.frames
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    #[inline]
    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    #[inline]
    pub fn reference(&self) -> &LdrImage {
        &self.frames[self.reference_index]
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn into_frames(self) -> Vec<LdrImage> {
        self.frames
    }

    /// Same frames with rasters replaced; metadata is preserved.
    pub fn with_rasters(&self, rasters: Vec<RgbImage>) -> Result<Self> {
        if rasters.len() != self.frames.len() {
            return Err(Error::Shape("raster count differs from frame count".into()));
        }
        let frames = self
            .frames
            .iter()
            .zip(rasters)
            .map(|(f, r)| f.with_pixels(r))
            .collect();
        Self::new(frames, self.reference_index)
    }
}

/// Sampled inverse camera response: intensity to linear irradiance, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfTable {
    /// `(intensity, irradiance)` knots per channel, intensity strictly increasing.
    channels: [Vec<(f64, f64)>; 3],
}

impl CrfTable {
    pub fn new(channels: [Vec<(f64, f64)>; 3]) -> Result<Self> {
        for (ch, knots) in channels.iter().enumerate() {
            if knots.len() < 2 {
                return Err(Error::Calibration(format!(
                    "channel {ch}: need at least 2 samples, got {}",
                    knots.len()
                )));
            }
            for w in knots.windows(2) {
                if !(w[1].0 > w[0].0) {
                    return Err(Error::Calibration(format!(
                        "channel {ch}: intensity axis not increasing at {}",
                        w[1].0
                    )));
                }
                if w[1].1 < w[0].1 {
                    return Err(Error::Calibration(format!(
                        "channel {ch}: response decreases between {} and {}",
                        w[0].0, w[1].0
                    )));
                }
            }
            let (first, last) = (knots[0], knots[knots.len() - 1]);
            let near = |a: f64, b: f64| (a - b).abs() <= 1e-9;
            if !(near(first.0, 0.0) && near(first.1, 0.0) && near(last.0, 1.0) && near(last.1, 1.0))
            {
                return Err(Error::Calibration(format!(
                    "channel {ch}: endpoints must map 0->0 and 1->1"
                )));
            }
        }
        Ok(CrfTable { channels })
    }

    /// Table with irradiance values sampled at evenly spaced intensities,
    /// the same curve for all channels.
    pub fn from_uniform_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Calibration("need at least 2 samples".into()));
        }
        let knots: Vec<(f64, f64)> = samples
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as f64 / (n - 1) as f64, v))
            .collect();
        Self::new([knots.clone(), knots.clone(), knots])
    }

    pub fn identity(samples: usize) -> Self {
        let n = samples.max(2);
        let v: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Self::from_uniform_samples(&v).expect("identity table is valid")
    }

    pub fn channel(&self, ch: usize) -> &[(f64, f64)] {
        &self.channels[ch]
    }

    /// Piecewise-linear lookup of the irradiance for `intensity` on channel `ch`.
    pub fn apply(&self, ch: usize, intensity: f64) -> f64 {
        let knots = &self.channels[ch];
        let x = intensity.clamp(0.0, 1.0);
        let hi = knots.partition_point(|k| k.0 < x).clamp(1, knots.len() - 1);
        let (x0, y0) = knots[hi - 1];
        let (x1, y1) = knots[hi];
        let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
        (y0 + t * (y1 - y0)).clamp(0.0, 1.0)
    }
}

/// Compression level of the mu-law tonemapper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TonemapParams {
    mu: f64,
}

impl TonemapParams {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Parameter(format!("mu must be positive, got {mu}")));
        }
        Ok(TonemapParams { mu })
    }

    #[inline]
    pub fn mu(&self) -> f64 {
        self.mu
    }
}

impl Default for TonemapParams {
    fn default() -> Self {
        TonemapParams { mu: DEFAULT_MU }
    }
}

/// `I^gamma / t`, clamped to `[0, 1]`.
#[inline]
pub fn gamma_encode(intensity: f64, gamma: f64, exposure_time: f64) -> f64 {
    (intensity.powf(gamma) / exposure_time).clamp(0.0, 1.0)
}

/// `log(1 + mu h) / log(1 + mu)`.
#[inline]
pub fn mu_law(h: f64, mu: f64) -> f64 {
    (mu * h).ln_1p() / mu.ln_1p()
}

/// `((1 + mu)^t - 1) / mu`, the exact inverse of [`mu_law`].
#[inline]
pub fn mu_law_inverse(t: f64, mu: f64) -> f64 {
    (t * mu.ln_1p()).exp_m1() / mu
}

/// Derivative of [`mu_law`] with respect to `h`.
#[inline]
pub fn mu_law_derivative(h: f64, mu: f64) -> f64 {
    mu / ((1.0 + mu * h) * mu.ln_1p())
}

/// Maps an image through the inverse camera response. Without a table the
/// frame is returned unchanged and gamma encoding alone approximates the
/// response.
pub fn linearize(image: &LdrImage, crf: Option<&CrfTable>) -> LdrImage {
    match crf {
        None => image.clone(),
        Some(table) => {
            let src = image.pixels();
            let mut out = src.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = table.apply(i % 3, *v);
            }
            image.with_pixels(out)
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 1.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "gamma must exceed 1, got {gamma}"
        )))
    }
}

/// Maps an LDR frame into the HDR domain with `H = I^gamma / t`, clamped to `[0, 1]`.
pub fn to_hdr_domain(image: &LdrImage, gamma: f64) -> Result<RadianceImage> {
    check_gamma(gamma)?;
    let t = image.exposure_time();
    Ok(RadianceImage {
        pixels: image.pixels().map(|v| gamma_encode(v, gamma, t)),
    })
}

pub fn tonemap(h: &RadianceImage, params: TonemapParams) -> RadianceImage {
    let mu = params.mu();
    RadianceImage {
        pixels: h.pixels().map(|v| mu_law(v, mu)),
    }
}

pub fn tonemap_inverse(t: &RadianceImage, params: TonemapParams) -> RadianceImage {
    let mu = params.mu();
    RadianceImage {
        pixels: t.pixels().map(|v| mu_law_inverse(v, mu).clamp(0.0, 1.0)),
    }
}

/// Network input for one stack: `k x H x W x 6` planes, each `[I_i | H_i]`
/// with channels R, G, B of the LDR frame followed by R, G, B of its HDR-domain
/// mapping.
#[derive(Debug, Clone)]
pub struct NetworkInput {
    pub planes: Tensor<f32>,
    pub reference_index: usize,
}

pub fn build_network_input(stack: &ExposureStack, gamma: f64) -> Result<NetworkInput> {
    check_gamma(gamma)?;
    if stack.len() < 2 {
        return Err(Error::Parameter(format!(
            "network input needs at least 2 frames, got {}",
            stack.len()
        )));
    }
    let (h, w) = stack.dims();
    let k = stack.len();
    let mut data = Vec::with_capacity(k * h * w * 6);
    for frame in stack.frames() {
        if frame.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "frame {:?} differs from {:?}",
                frame.dims(),
                (h, w)
            )));
        }
        let hdr = to_hdr_domain(frame, gamma)?;
        for (ldr_px, hdr_px) in frame
            .pixels()
            .data()
            .chunks_exact(3)
            .zip(hdr.pixels().data().chunks_exact(3))
        {
            data.extend(ldr_px.iter().chain(hdr_px).map(|&v| v as f32));
        }
    }
    Ok(NetworkInput {
        planes: Tensor::from_vec(vec![k, h, w, 6], data)?,
        reference_index: stack.reference_index(),
    })
}
