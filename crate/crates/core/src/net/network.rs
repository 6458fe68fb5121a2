use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::layers::{
    Activation, ActivationKind, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Mode, Param,
    ParamVisitor, ResidualBlock,
};
use crate::net::spec::{
    LayerKind, LayerSpec, NetworkSpec, StageSpec, Stride, INPUT_CHANNELS, OUTPUT_CHANNELS,
};
use crate::net::{Float, Tensor};

/// Anything trainable by the optimizer and checkable by finite differences.
pub trait Model<T: Float> {
    /// Runs the model, caching what [`Model::backward`] needs.
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Accumulates parameter gradients for the upstream gradient of the last
    /// forward output.
    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<()>;

    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>);

    /// Hash of the rectifier sign pattern of the last forward pass.
    fn kink_signature(&self) -> u64;

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn trainable_parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    /// Copies of all trainable gradients, keyed by parameter name.
    fn gradients(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| {
            if p.trainable {
                out.push((name.to_string(), p.grad.clone()));
            }
        });
        out
    }
}

type Stage<T> = Vec<Layer<T>>;

fn build_layer<T: Float>(
    spec: &LayerSpec,
    init_std: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Layer<T>> {
    Some(match spec.kind {
        LayerKind::Conv => Layer::Conv(Conv2d::new(
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            if spec.stride == Stride::Two { 2 } else { 1 },
            init_std,
            true,
            rng,
        )),
        LayerKind::Deconv => Layer::Deconv(ConvTranspose2d::new(
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            2,
            init_std,
            true,
            rng,
        )),
        LayerKind::BatchNorm => Layer::Norm(BatchNorm2d::new(spec.out_channels)),
        LayerKind::LeakyRelu => Layer::Act(Activation::new(ActivationKind::LeakyRelu)),
        LayerKind::Relu => Layer::Act(Activation::new(ActivationKind::Relu)),
        LayerKind::Sigmoid => Layer::Act(Activation::new(ActivationKind::Sigmoid)),
        LayerKind::ResidualBlock => Layer::Residual(ResidualBlock::new(
            spec.in_channels,
            spec.kernel,
            init_std,
            rng,
        )),
        LayerKind::ConcatSkip => return None,
    })
}

fn build_stage<T: Float>(spec: &StageSpec, init_std: f64, rng: &mut ChaCha8Rng) -> Stage<T> {
    spec.layers
        .iter()
        .filter_map(|l| build_layer(l, init_std, rng))
        .collect()
}

fn run_stage<T: Float>(stage: &mut Stage<T>, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
    for layer in stage.iter_mut() {
        x = layer.forward(x, mode);
    }
    x
}

fn infer_stage<T: Float>(stage: &Stage<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut iter = stage.iter();
    let mut y = match iter.next() {
        Some(l) => l.infer(x),
        None => return x.clone(),
    };
    for layer in iter {
        y = layer.infer(&y);
    }
    y
}

fn backprop_stage<T: Float>(stage: &mut Stage<T>, mut g: Tensor<T>) -> Tensor<T> {
    for layer in stage.iter_mut().rev() {
        g = layer.backward(&g);
    }
    g
}

fn check_finite<T: Float>(t: &Tensor<T>, layer: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

/// Encoder / merger / decoder network with one encoder branch per exposure.
///
/// Input is `[n, k, h, w, 6]` (or `[k, h, w, 6]` for a single sample), output
/// `[n, h, w, 3]` with every value in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    branches: Vec<Vec<Stage<T>>>,
    merger: Vec<Stage<T>>,
    decoder: Vec<Stage<T>>,
    /// Per-branch channel widths of the two per-exposure levels.
    branch_widths: [usize; 2],
    /// Channel widths of skip sources, recorded at forward time.
    level_widths: Vec<usize>,
    observed: Vec<(String, Vec<usize>)>,
    batch: usize,
    has_cache: bool,
}

impl<T: Float> Network<T> {
    pub fn new(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = spec.options.init_std;
        let branches = (0..spec.k_inputs)
            .map(|_| {
                spec.encoder
                    .iter()
                    .map(|s| build_stage(s, std, &mut rng))
                    .collect()
            })
            .collect();
        let merger = spec
            .merger
            .iter()
            .map(|s| build_stage(s, std, &mut rng))
            .collect();
        let decoder = spec
            .decoder
            .iter()
            .map(|s| build_stage(s, std, &mut rng))
            .collect();
        let branch_widths = [
            spec.encoder[0].output_channels(),
            spec.encoder[1].output_channels(),
        ];
        Network {
            spec,
            branches,
            merger,
            decoder,
            branch_widths,
            level_widths: Vec::new(),
            observed: Vec::new(),
            batch: 0,
            has_cache: false,
        }
    }

    #[inline]
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// `(stage name, [c, h, w])` of every stage output in the last forward pass.
    pub fn observed_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.observed
    }

    fn split_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize, Vec<Tensor<T>>)> {
        let s = input.shape();
        let (n, k, h, w, c) = match s.len() {
            5 => (s[0], s[1], s[2], s[3], s[4]),
            4 => (1, s[0], s[1], s[2], s[3]),
            _ => {
                return Err(Error::Shape(format!(
                    "expected [n, k, h, w, 6] input, got {s:?}"
                )))
            }
        };
        if k != self.spec.k_inputs || c != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "network takes {} planes of {} channels, got {:?}",
                self.spec.k_inputs, INPUT_CHANNELS, s
            )));
        }
        let div = self.spec.variant.divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "{} input sides must be multiples of {}, got {}x{}",
                self.spec.variant, div, h, w
            )));
        }
        let plane = h * w;
        let data = input.data();
        let branches = (0..k)
            .map(|i| {
                let mut t = Tensor::zeros(vec![n, c, h, w]);
                let dst = t.data_mut();
                for b in 0..n {
                    let src = &data[(b * k + i) * plane * c..(b * k + i + 1) * plane * c];
                    for p in 0..plane {
                        for ch in 0..c {
                            dst[(b * c + ch) * plane + p] = src[p * c + ch];
                        }
                    }
                }
                t
            })
            .collect();
        Ok((n, h, w, branches))
    }

    fn to_hwc(y: Tensor<T>) -> Tensor<T> {
        let s = y.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = y.data();
        let mut out = vec![T::zero(); n * plane * c];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    out[(b * plane + p) * c + ch] = src[(b * c + ch) * plane + p];
                }
            }
        }
        Tensor::from_vec(vec![n, h, w, c], out).expect("sizes agree")
    }

    fn to_chw(g: &Tensor<T>) -> Tensor<T> {
        let s = g.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = g.data();
        let mut out = vec![T::zero(); n * plane * c];
        for b in 0..n {
            for p in 0..plane {
                for ch in 0..c {
                    out[(b * c + ch) * plane + p] = src[(b * plane + p) * c + ch];
                }
            }
        }
        Tensor::from_vec(vec![n, c, h, w], out).expect("sizes agree")
    }

    fn record(&mut self, name: &str, t: &Tensor<T>) {
        self.observed
            .push((name.to_string(), t.shape()[1..].to_vec()));
    }

    fn forward_impl(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, _, _, inputs) = self.split_input(input)?;
        self.observed.clear();
        self.has_cache = false;
        let names: Vec<String> = self.spec.encoder.iter().map(|s| s.name.clone()).collect();
        let mut levels: Vec<Tensor<T>> = Vec::new();
        let mut per_level: [Vec<Tensor<T>>; 2] = [Vec::new(), Vec::new()];
        for (branch, x) in self.branches.iter_mut().zip(inputs) {
            let a0 = run_stage(&mut branch[0], x, mode);
            check_finite(&a0, &names[0])?;
            let a1 = run_stage(&mut branch[1], a0.clone(), mode);
            check_finite(&a1, &names[1])?;
            per_level[0].push(a0);
            per_level[1].push(a1);
        }
        self.record(&names[0], &per_level[0][0]);
        self.record(&names[1], &per_level[1][0]);
        for parts in &per_level {
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            levels.push(Tensor::concat_channels(&refs)?);
        }

        let mut x = levels[1].clone();
        for (stage, spec) in self.merger.iter_mut().zip(&self.spec.merger) {
            x = run_stage(stage, x, mode);
            check_finite(&x, &spec.name)?;
            self.observed
                .push((spec.name.clone(), x.shape()[1..].to_vec()));
            if spec.level.is_some() {
                levels.push(x.clone());
            }
        }

        for (stage, spec) in self.decoder.iter_mut().zip(&self.spec.decoder) {
            if let Some(level) = spec.layers.first().and_then(|l| l.skip_from) {
                x = Tensor::concat_channels(&[&x, &levels[level]])?;
            }
            x = run_stage(stage, x, mode);
            check_finite(&x, &spec.name)?;
            self.observed
                .push((spec.name.clone(), x.shape()[1..].to_vec()));
        }
        self.level_widths = levels.iter().map(|l| l.shape()[1]).collect();
        self.batch = n;
        self.has_cache = true;
        Ok(Self::to_hwc(x))
    }

    /// Eval-mode prediction without caching; usable from many threads.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, _, inputs) = self.split_input(input)?;
        let mut per_level: [Vec<Tensor<T>>; 2] = [Vec::new(), Vec::new()];
        for (branch, x) in self.branches.iter().zip(inputs) {
            let a0 = infer_stage(&branch[0], &x);
            let a1 = infer_stage(&branch[1], &a0);
            per_level[0].push(a0);
            per_level[1].push(a1);
        }
        let mut levels = Vec::new();
        for parts in &per_level {
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            levels.push(Tensor::concat_channels(&refs)?);
        }
        let mut x = levels[1].clone();
        for (stage, spec) in self.merger.iter().zip(&self.spec.merger) {
            x = infer_stage(stage, &x);
            check_finite(&x, &spec.name)?;
            if spec.level.is_some() {
                levels.push(x.clone());
            }
        }
        for (stage, spec) in self.decoder.iter().zip(&self.spec.decoder) {
            if let Some(level) = spec.layers.first().and_then(|l| l.skip_from) {
                x = Tensor::concat_channels(&[&x, &levels[level]])?;
            }
            x = infer_stage(stage, &x);
            check_finite(&x, &spec.name)?;
        }
        Ok(Self::to_hwc(x))
    }

    fn backward_impl(&mut self, grad_output: &Tensor<T>) -> Result<()> {
        if !self.has_cache {
            return Err(Error::State(
                "backward called without a cached forward pass".into(),
            ));
        }
        let expected_c = OUTPUT_CHANNELS;
        let s = grad_output.shape();
        if s.len() != 4 || s[0] != self.batch || s[3] != expected_c {
            return Err(Error::Shape(format!("output gradient has shape {s:?}")));
        }
        let mut level_grads: Vec<Option<Tensor<T>>> = vec![None; self.level_widths.len()];
        let mut g = Self::to_chw(grad_output);
        for (stage, spec) in self.decoder.iter_mut().zip(&self.spec.decoder).rev() {
            g = backprop_stage(stage, g);
            if let Some(level) = spec.layers.first().and_then(|l| l.skip_from) {
                let skip_w = self.level_widths[level];
                let main_w = g.shape()[1] - skip_w;
                let mut parts = g.split_channels(&[main_w, skip_w]);
                let skip = parts.pop().expect("two parts");
                g = parts.pop().expect("two parts");
                match &mut level_grads[level] {
                    Some(acc) => acc.add_assign(&skip),
                    slot => *slot = Some(skip),
                }
            }
        }
        let mut level = self.level_widths.len();
        for (stage, spec) in self.merger.iter_mut().zip(&self.spec.merger).rev() {
            if spec.level.is_some() {
                level -= 1;
                if let Some(extra) = &level_grads[level] {
                    g.add_assign(extra);
                }
            }
            g = backprop_stage(stage, g);
        }
        // g is now the gradient of the concatenated second level
        if let Some(extra) = &level_grads[1] {
            g.add_assign(extra);
        }
        let k = self.spec.k_inputs;
        let g1 = g.split_channels(&vec![self.branch_widths[1]; k]);
        let g0_skip = level_grads[0]
            .as_ref()
            .map(|t| t.split_channels(&vec![self.branch_widths[0]; k]));
        for (i, (branch, gb)) in self.branches.iter_mut().zip(g1).enumerate() {
            let mut g0 = backprop_stage(&mut branch[1], gb);
            if let Some(skips) = &g0_skip {
                g0.add_assign(&skips[i]);
            }
            backprop_stage(&mut branch[0], g0);
        }
        Ok(())
    }

    /// Drops all cached activations.
    pub fn clear_cache(&mut self) {
        let all = self
            .branches
            .iter_mut()
            .flatten()
            .chain(self.merger.iter_mut())
            .chain(self.decoder.iter_mut());
        for stage in all {
            stage.iter_mut().for_each(Layer::clear_cache);
        }
        self.has_cache = false;
    }

    /// Same weights at a different precision.
    pub fn cast<U: Float>(&self) -> Network<U> {
        let mut out = Network::<U>::new(self.spec.clone(), 0);
        let mut values: Vec<Vec<f64>> = Vec::new();
        let mut me = self.clone();
        me.visit_params(&mut |_, p| {
            values.push(p.value.iter().map(|v| v.to_f64_lossy()).collect())
        });
        let mut it = values.into_iter();
        out.visit_params(&mut |_, p: &mut Param<U>| {
            let v = it.next().expect("same structure");
            p.value = v.into_iter().map(U::from_f64_lossy).collect();
        });
        out
    }
}

impl<T: Float> Model<T> for Network<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_impl(input, mode)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<()> {
        self.backward_impl(grad_output)
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for (b, branch) in self.branches.iter_mut().enumerate() {
            for (stage, spec) in branch.iter_mut().zip(&self.spec.encoder) {
                for (i, layer) in stage.iter_mut().enumerate() {
                    layer.visit(&format!("branch{b}.{}.{i}", spec.name), f);
                }
            }
        }
        for (stage, spec) in self
            .merger
            .iter_mut()
            .zip(&self.spec.merger)
            .chain(self.decoder.iter_mut().zip(&self.spec.decoder))
        {
            for (i, layer) in stage.iter_mut().enumerate() {
                layer.visit(&format!("{}.{i}", spec.name), f);
            }
        }
    }

    fn kink_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let all = self
            .branches
            .iter()
            .flatten()
            .chain(self.merger.iter())
            .chain(self.decoder.iter());
        for stage in all {
            for layer in stage {
                layer.fold_kinks(&mut h);
            }
        }
        h
    }
}

/// Plain layer chain on NCHW tensors, for small experiments and gradient checks.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Float> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }
}

impl<T: Float> Model<T> for Sequential<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if input.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "expected NCHW input, got {:?}",
                input.shape()
            )));
        }
        let mut x = input.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            x = layer.forward(x, mode);
            check_finite(&x, &format!("layer{i}"))?;
        }
        Ok(x)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<()> {
        if !self.layers.iter().all(Layer::has_cache) {
            return Err(Error::State(
                "backward called without a cached forward pass".into(),
            ));
        }
        let mut g = grad_output.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        Ok(())
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("layer{i}"), f);
        }
    }

    fn kink_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        self.layers.iter().for_each(|l| l.fold_kinks(&mut h));
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::spec::{NetOptions, Variant};
    use rand::Rng;

    fn tiny(variant: Variant, k: usize) -> NetworkSpec {
        let opts = NetOptions {
            base_channels: 2,
            max_channels: 8,
            residual_blocks: 2,
            ..NetOptions::default()
        };
        let patch = variant.divisor();
        NetworkSpec::build(variant, k, patch, opts).unwrap()
    }

    fn random_input<T: Float>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| T::from_f64_lossy(rng.gen())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn observed_shapes_follow_shape_algebra() {
        for variant in [Variant::Unet, Variant::Resnet] {
            let spec = tiny(variant, 3);
            let p = spec.patch;
            let mut net = Network::<f32>::new(spec.clone(), 1);
            let y = net
                .forward(&random_input(vec![2, 3, p, p, 6], 2), Mode::Train)
                .unwrap();
            assert_eq!(y.shape(), &[2, p, p, 3]);
            let algebra: Vec<(String, Vec<usize>)> = spec
                .stage_shapes(p, p)
                .into_iter()
                .map(|(n, (c, h, w))| (n, vec![c, h, w]))
                .collect();
            assert_eq!(net.observed_shapes(), algebra.as_slice());
        }
    }

    #[test]
    fn predict_matches_eval_forward() {
        let spec = tiny(Variant::Resnet, 2);
        let mut net = Network::<f64>::new(spec, 3);
        let x = random_input(vec![1, 2, 8, 16, 6], 4);
        // move running stats off their initial values
        net.forward(&x, Mode::Train).unwrap();
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        assert!(b.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn wrong_input_shapes_are_rejected() {
        let spec = tiny(Variant::Resnet, 3);
        let mut net = Network::<f32>::new(spec, 1);
        let bad_k = random_input(vec![1, 2, 8, 8, 6], 1);
        assert!(matches!(
            net.forward(&bad_k, Mode::Eval),
            Err(Error::Shape(_))
        ));
        let bad_side = random_input(vec![1, 3, 12, 8, 6], 1);
        assert!(matches!(
            net.forward(&bad_side, Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::<f32>::new(tiny(Variant::Resnet, 2), 1);
        let g = Tensor::zeros(vec![1, 8, 8, 3]);
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut net = Network::<f64>::new(tiny(Variant::Unet, 2), 5);
        let p = net.spec().patch;
        net.forward(&random_input(vec![2, 2, p, p, 6], 6), Mode::Train)
            .unwrap();
        net.zero_grad();
        net.backward(&Tensor::zeros(vec![2, p, p, 3])).unwrap();
        for (name, g) in net.gradients() {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn non_finite_activation_names_the_stage() {
        let mut net = Network::<f32>::new(tiny(Variant::Resnet, 2), 1);
        let mut x = random_input::<f32>(vec![1, 2, 8, 8, 6], 1);
        x.data_mut()[0] = f32::NAN;
        match net.forward(&x, Mode::Eval) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "enc1"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn cast_preserves_outputs() {
        let net = Network::<f32>::new(tiny(Variant::Resnet, 2), 9);
        let wide: Network<f64> = net.cast();
        let x32 = random_input::<f32>(vec![1, 2, 8, 8, 6], 3);
        let y32 = net.predict(&x32).unwrap();
        let y64 = wide.predict(&x32.cast()).unwrap();
        for (a, b) in y32.data().iter().zip(y64.data()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}
