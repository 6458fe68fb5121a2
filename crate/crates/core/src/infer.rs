//! Inference over whole images: reflect padding, overlapping tiles with
//! linear blending, and the slot rule that feeds stacks of any size to a
//! network trained for `k` inputs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{Network, Tensor};
use crate::radiance::{build_network_input, ExposureStack, RadianceImage, RgbImage};

pub const DEFAULT_TILE: usize = 256;
pub const DEFAULT_OVERLAP: usize = 32;
/// Margin discarded at shared tile edges; the trained networks' outputs settle
/// to within 1e-3 of whole-image inference about 60 pixels from an edge.
pub const DEFAULT_CONTEXT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileOptions {
    pub tile: usize,
    pub overlap: usize,
    pub context: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions {
            tile: DEFAULT_TILE,
            overlap: DEFAULT_OVERLAP,
            context: DEFAULT_CONTEXT,
        }
    }
}

/// Frame index for each of the `k` network slots. The middle slot holds the
/// reference; slot `mid + d` takes frame `reference + d`, repeating the
/// darkest or brightest frame when the stack runs out. Frames `[L, M]` with
/// reference `L` thus become `L, L, M`.
pub fn slot_order(len: usize, reference: usize, k: usize) -> Result<Vec<usize>> {
    if len == 0 || reference >= len {
        return Err(Error::Parameter(format!(
            "reference {reference} invalid for {len} frames"
        )));
    }
    if len > k {
        return Err(Error::Parameter(format!(
            "{len} frames cannot be fed to a network taking {k}"
        )));
    }
    let mid = (k / 2) as isize;
    Ok((0..k as isize)
        .map(|s| (reference as isize + s - mid).clamp(0, len as isize - 1) as usize)
        .collect())
}

/// Re-arranges `stack` into the network's `k` slots (see [`slot_order`]).
pub fn arrange_stack(stack: &ExposureStack, k: usize) -> Result<ExposureStack> {
    let order = slot_order(stack.len(), stack.reference_index(), k)?;
    let frames = order.iter().map(|&i| stack.frames()[i].clone()).collect();
    ExposureStack::new(frames, k / 2)
}

/// Mirror index without repeating the edge sample (`..., 2, 1, 0, 1, 2, ...`).
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Reflect-pads `[k, h, w, c]` planes to `[k, h + top + bottom, w + left + right, c]`.
pub fn reflect_pad(
    planes: &Tensor<f32>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Tensor<f32> {
    let s = planes.shape();
    let (k, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (h + top + bottom, w + left + right);
    let src = planes.data();
    let mut out = Vec::with_capacity(k * ph * pw * c);
    for f in 0..k {
        for r in 0..ph {
            let sr = mirror(r as isize - top as isize, h);
            for col in 0..pw {
                let sc = mirror(col as isize - left as isize, w);
                let at = ((f * h + sr) * w + sc) * c;
                out.extend_from_slice(&src[at..at + c]);
            }
        }
    }
    Tensor::from_vec(vec![k, ph, pw, c], out).expect("sizes agree")
}

/// Copies the `[k, th, tw, c]` window at `(row, col)`.
fn window(planes: &Tensor<f32>, row: usize, col: usize, th: usize, tw: usize) -> Tensor<f32> {
    let s = planes.shape();
    let (k, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = planes.data();
    let mut out = Vec::with_capacity(k * th * tw * c);
    for f in 0..k {
        for r in row..row + th {
            let at = ((f * h + r) * w + col) * c;
            out.extend_from_slice(&src[at..at + tw * c]);
        }
    }
    Tensor::from_vec(vec![k, th, tw, c], out).expect("sizes agree")
}

struct Padding {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

fn pad_to_divisor(planes: &Tensor<f32>, div: usize) -> (Tensor<f32>, Padding) {
    let s = planes.shape();
    let (h, w) = (s[1], s[2]);
    let (eh, ew) = (round_up(h, div) - h, round_up(w, div) - w);
    let (top, left) = (eh / 2, ew / 2);
    (
        reflect_pad(planes, top, eh - top, left, ew - left),
        Padding { top, left, h, w },
    )
}

fn crop_output(y: &Tensor<f32>, pad: &Padding) -> Tensor<f32> {
    let s = y.shape();
    let pw = s[s.len() - 2];
    let data = y.data();
    let mut out = Vec::with_capacity(pad.h * pad.w * 3);
    for r in pad.top..pad.top + pad.h {
        let at = (r * pw + pad.left) * 3;
        out.extend_from_slice(&data[at..at + pad.w * 3]);
    }
    Tensor::from_vec(vec![pad.h, pad.w, 3], out).expect("sizes agree")
}

fn check_planes(net: &Network<f32>, planes: &Tensor<f32>) -> Result<()> {
    let s = planes.shape();
    if s.len() != 4 || s[0] != net.spec().k_inputs || s[3] != 6 {
        return Err(Error::Shape(format!(
            "expected [{}, h, w, 6] planes, got {:?}",
            net.spec().k_inputs,
            s
        )));
    }
    Ok(())
}

/// Runs the network on the whole (reflect-padded) image; returns `[h, w, 3]`.
pub fn infer_whole(net: &Network<f32>, planes: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_planes(net, planes)?;
    let (padded, pad) = pad_to_divisor(planes, net.spec().variant.divisor());
    let y = net.predict(&padded)?;
    Ok(crop_output(&y, &pad))
}

/// Tile origins along one axis of length `n`; the last tile is flush with the
/// end. Consecutive cores (tiles minus `context` on shared sides) overlap by at
/// least `overlap`.
pub fn tile_starts(n: usize, tile: usize, overlap: usize, context: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let step = tile - overlap - 2 * context;
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * step)
        .take_while(|&s| s + tile < n)
        .collect();
    starts.push(n - tile);
    starts.dedup();
    starts
}

/// Trusted output range `[lo, hi)` in local coordinates of a tile at `start`:
/// `context` pixels are dropped on every side that borders another tile.
pub fn tile_core(start: usize, tile: usize, n: usize, context: usize) -> (usize, usize) {
    let lo = if start > 0 { context } else { 0 };
    let hi = if start + tile < n {
        tile - context
    } else {
        tile
    };
    (lo, hi)
}

/// Blend weight of local position `i` in a tile at `start`: zero outside the
/// core, linear ramps of width `overlap` at core edges shared with another
/// tile, 1 elsewhere.
fn ramp(i: usize, start: usize, tile: usize, n: usize, overlap: usize, context: usize) -> f32 {
    let (lo, hi) = tile_core(start, tile, n, context);
    if i < lo || i >= hi {
        return 0.0;
    }
    if overlap == 0 {
        return 1.0;
    }
    let mut wgt: f32 = 1.0;
    if start > 0 {
        wgt = wgt.min(((i - lo) as f32 + 0.5) / overlap as f32);
    }
    if start + tile < n {
        wgt = wgt.min(((hi - i) as f32 - 0.5) / overlap as f32);
    }
    wgt
}

/// Tiled inference: the padded image is covered by `tile x tile` windows.
/// Each window's output is kept only in its core, `context` pixels away from
/// edges it shares with another window, and neighbouring cores are blended
/// linearly over `overlap` pixels. Returns `[h, w, 3]`.
pub fn infer_tiled(
    net: &Network<f32>,
    planes: &Tensor<f32>,
    opts: TileOptions,
) -> Result<Tensor<f32>> {
    check_planes(net, planes)?;
    let div = net.spec().variant.divisor();
    if opts.tile == 0 || !opts.tile.is_multiple_of(div) {
        return Err(Error::Parameter(format!(
            "tile size {} must be a positive multiple of {}",
            opts.tile, div
        )));
    }
    if opts.overlap + 2 * opts.context >= opts.tile {
        return Err(Error::Parameter(format!(
            "overlap {} plus twice the context {} must be smaller than the tile {}",
            opts.overlap, opts.context, opts.tile
        )));
    }
    let (padded, pad) = pad_to_divisor(planes, div);
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let (th, tw) = (opts.tile.min(ph), opts.tile.min(pw));
    let rows = tile_starts(ph, th, opts.overlap, opts.context);
    let cols = tile_starts(pw, tw, opts.overlap, opts.context);
    let jobs: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let outputs: Vec<Tensor<f32>> = jobs
        .par_iter()
        .map(|&(r, c)| net.predict(&window(&padded, r, c, th, tw)))
        .collect::<Result<_>>()?;
    let mut acc = vec![0f32; ph * pw * 3];
    let mut norm = vec![0f32; ph * pw];
    for (&(r0, c0), y) in jobs.iter().zip(&outputs) {
        let y = y.data();
        for i in 0..th {
            let wr = ramp(i, r0, th, ph, opts.overlap, opts.context);
            if wr == 0.0 {
                continue;
            }
            for j in 0..tw {
                let wgt = wr * ramp(j, c0, tw, pw, opts.overlap, opts.context);
                if wgt == 0.0 {
                    continue;
                }
                let p = (r0 + i) * pw + c0 + j;
                norm[p] += wgt;
                for ch in 0..3 {
                    acc[p * 3 + ch] += wgt * y[(i * tw + j) * 3 + ch];
                }
            }
        }
    }
    for (p, &n) in norm.iter().enumerate() {
        for ch in 0..3 {
            acc[p * 3 + ch] /= n;
        }
    }
    let full = Tensor::from_vec(vec![ph, pw, 3], acc).expect("sizes agree");
    Ok(crop_output(&full, &pad))
}

pub fn tensor_to_radiance(y: &Tensor<f32>) -> Result<RadianceImage> {
    let s = y.shape();
    let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
    let img = RgbImage::from_vec(w, h, y.data().iter().map(|&v| v as f64).collect())?;
    Ok(RadianceImage::clamped(img))
}

/// Arranges `stack` into the network's slots, assembles the LDR + HDR-domain inputs and runs
/// tiled inference. The output has the stack's dimensions.
pub fn merge_stack(
    net: &Network<f32>,
    stack: &ExposureStack,
    gamma: f64,
    opts: TileOptions,
) -> Result<RadianceImage> {
    let arranged = arrange_stack(stack, net.spec().k_inputs)?;
    let input = build_network_input(&arranged, gamma)?;
    tensor_to_radiance(&infer_tiled(net, &input.planes, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetOptions, NetworkSpec, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(variant: Variant) -> Network<f32> {
        let opts = NetOptions {
            base_channels: 4,
            max_channels: 8,
            residual_blocks: 1,
            ..NetOptions::default()
        };
        let div = variant.divisor();
        Network::new(NetworkSpec::build(variant, 3, div, opts).unwrap(), 1)
    }

    fn planes(k: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![k, h, w, 6],
            (0..k * h * w * 6).map(|_| rng.gen()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn slot_rule() {
        assert_eq!(slot_order(3, 1, 3).unwrap(), vec![0, 1, 2]);
        // low as reference with only low and medium shots: Low-Low-Medium
        assert_eq!(slot_order(2, 0, 3).unwrap(), vec![0, 0, 1]);
        assert_eq!(slot_order(3, 0, 3).unwrap(), vec![0, 0, 1]);
        assert_eq!(slot_order(3, 2, 3).unwrap(), vec![1, 2, 2]);
        assert_eq!(slot_order(5, 2, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(slot_order(4, 1, 3).is_err());
    }

    #[test]
    fn mirror_padding() {
        let idx: Vec<usize> = (-3..6).map(|i| mirror(i, 3)).collect();
        assert_eq!(idx, vec![1, 2, 1, 0, 1, 2, 1, 0, 1]);
        let p = planes(1, 2, 3, 0);
        let q = reflect_pad(&p, 1, 2, 0, 1);
        assert_eq!(q.shape(), &[1, 5, 4, 6]);
        // row 0 of the padded tensor mirrors source row 1
        assert_eq!(&q.data()[0..6], &p.data()[3 * 6..4 * 6]);
    }

    #[test]
    fn tiles_cover_the_axis() {
        assert_eq!(tile_starts(256, 256, 32, 64), vec![0]);
        assert_eq!(tile_starts(512, 256, 32, 0), vec![0, 224, 256]);
        assert_eq!(tile_starts(512, 256, 32, 64), vec![0, 96, 192, 256]);
        assert_eq!(tile_starts(100, 256, 32, 64), vec![0]);
        for n in [300, 513, 1024] {
            for context in [0, 64] {
                let s = tile_starts(n, 256, 32, context);
                assert_eq!(*s.last().unwrap() + 256, n);
                // neighbouring cores overlap by at least 32
                for w in s.windows(2) {
                    let a = w[0] + tile_core(w[0], 256, n, context).1;
                    let b = w[1] + tile_core(w[1], 256, n, context).0;
                    assert!(a >= b + 32, "{n} {context} {w:?}");
                }
            }
        }
    }

    #[test]
    fn single_tile_equals_whole_image() {
        let net = tiny_net(Variant::Resnet);
        let p = planes(3, 20, 28, 2);
        let whole = infer_whole(&net, &p).unwrap();
        let tiled = infer_tiled(
            &net,
            &p,
            TileOptions {
                tile: 32,
                overlap: 8,
                context: 4,
            },
        )
        .unwrap();
        assert_eq!(whole.shape(), &[20, 28, 3]);
        assert_eq!(whole, tiled);
    }

    #[test]
    fn tiled_output_keeps_input_size_and_bounds() {
        let net = tiny_net(Variant::Resnet);
        let p = planes(3, 45, 70, 3);
        let y = infer_tiled(
            &net,
            &p,
            TileOptions {
                tile: 16,
                overlap: 4,
                context: 2,
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[45, 70, 3]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(infer_tiled(
            &net,
            &p,
            TileOptions {
                tile: 12,
                overlap: 4,
                context: 0
            }
        )
        .is_err());
        assert!(infer_tiled(
            &net,
            &p,
            TileOptions {
                tile: 16,
                overlap: 4,
                context: 6
            }
        )
        .is_err());
    }

    #[test]
    fn every_pixel_gets_weight() {
        for context in [0, 4] {
            let n = 100;
            let starts = tile_starts(n, 32, 8, context);
            for i in 0..n {
                let total: f32 = starts
                    .iter()
                    .filter(|&&s| i >= s && i < s + 32)
                    .map(|&s| ramp(i - s, s, 32, n, 8, context))
                    .sum();
                assert!(total > 0.0, "pixel {i} uncovered");
            }
        }
    }

    #[test]
    fn merge_accepts_two_frames() {
        let net = tiny_net(Variant::Resnet);
        let img = crate::synth::texture(24, 16, 1);
        let stack =
            ExposureStack::from_biases(vec![img.map(|v| v * 0.5), img], &[-2.0, 0.0], 0).unwrap();
        let out = merge_stack(&net, &stack, 2.2, TileOptions::default()).unwrap();
        assert_eq!(out.dims(), (16, 24));
    }
}
