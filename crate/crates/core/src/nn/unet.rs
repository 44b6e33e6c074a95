//! Residual 3D U-Net with four strided encoder levels, a bottleneck unit and
//! four transposed-convolution decoder levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::sigmoid;
use crate::nn::act::{Activation, ActivationKind};
use crate::nn::conv::{Conv3d, ConvTranspose3d};
use crate::nn::norm::BatchNorm3d;
use crate::nn::param::Param;
use crate::nn::tensor::{concat_channels, split_channels, Tensor};
use crate::scalar::Scalar;

pub const LEVELS: usize = 4;
pub const KERNEL: usize = 3;
pub const DOWNSAMPLE: usize = 2;
/// Spatial dims must be multiples of this.
pub const DIVISOR: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: [usize; LEVELS],
    pub bottleneck: usize,
    /// `false` gives the plain U-Net baseline (no residual paths, ReLU).
    pub residual: bool,
    /// Seed for weight initialisation.
    pub init_seed: u64,
    /// Initial bias of the output layer; `None` keeps the uniform default.
    /// `ln(π / (1 - π))` starts every voxel at foreground probability π.
    pub output_bias: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64, 128],
            bottleneck: 256,
            residual: true,
            init_seed: 0,
            output_bias: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) || self.bottleneck == 0 {
            return Err(Error::domain("channel widths must be positive"));
        }
        if self.output_bias.is_some_and(|b| !b.is_finite()) {
            return Err(Error::domain("output_bias must be finite"));
        }
        Ok(())
    }

    pub fn activation(&self) -> ActivationKind {
        if self.residual {
            ActivationKind::PRelu
        } else {
            ActivationKind::Relu
        }
    }

    /// Number of trainable scalars, computed from the widths alone.
    pub fn param_count(&self) -> usize {
        let taps = KERNEL.pow(3);
        let conv = |i: usize, o: usize, k: usize| o * i * k + o;
        let prelu = usize::from(self.residual);
        let block = |i: usize, o: usize| conv(i, o, taps) + 2 * o + prelu;
        let c = self.channels;
        let mut total = 0;
        let mut prev = 1;
        for &ch in &c {
            total += block(prev, ch) + block(ch, ch);
            if self.residual {
                total += conv(prev, ch, taps);
            }
            prev = ch;
        }
        total += block(c[3], self.bottleneck) + block(self.bottleneck, self.bottleneck);
        if self.residual && c[3] != self.bottleneck {
            total += conv(c[3], self.bottleneck, 1);
        }
        let mut below = self.bottleneck;
        for lvl in (1..LEVELS).rev() {
            let (i, o) = (c[lvl] + below, c[lvl - 1]);
            total += conv(i, o, taps) + 2 * o + prelu + block(o, o);
            below = o;
        }
        total + conv(c[0] + below, 1, taps)
    }
}

/// conv → batch norm → activation.
#[derive(Clone, Debug)]
struct Block<T> {
    conv: Conv3d<T>,
    bn: BatchNorm3d<T>,
    act: Activation<T>,
}

impl<T: Scalar> Block<T> {
    fn new(i: usize, o: usize, stride: usize, act: ActivationKind, rng: &mut ChaCha8Rng) -> Self {
        Block {
            conv: Conv3d::new(i, o, KERNEL, stride, rng),
            bn: BatchNorm3d::new(o),
            act: Activation::new(act),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.act.infer(&self.bn.infer(&self.conv.infer(x)))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.conv.forward(x);
        let y = self.bn.forward(&y);
        self.act.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.act.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        let [w, b] = self.conv.params();
        out.push((format!("{prefix}.conv.weight"), w));
        out.push((format!("{prefix}.conv.bias"), b));
        let [g, be] = self.bn.params();
        out.push((format!("{prefix}.bn.gamma"), g));
        out.push((format!("{prefix}.bn.beta"), be));
        for p in self.act.params() {
            out.push((format!("{prefix}.act.slope"), p));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        let [w, b] = self.conv.params_mut();
        out.push((format!("{prefix}.conv.weight"), w));
        out.push((format!("{prefix}.conv.bias"), b));
        let [g, be] = self.bn.params_mut();
        out.push((format!("{prefix}.bn.gamma"), g));
        out.push((format!("{prefix}.bn.beta"), be));
        for p in self.act.params_mut() {
            out.push((format!("{prefix}.act.slope"), p));
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &mut self.bn.running_var));
    }
}

#[derive(Clone, Debug)]
enum Skip<T> {
    None,
    Identity,
    Conv(Conv3d<T>),
}

/// A chain of blocks, optionally with a residual path added to its output.
#[derive(Clone, Debug)]
struct Unit<T> {
    blocks: Vec<Block<T>>,
    skip: Skip<T>,
}

impl<T: Scalar> Unit<T> {
    fn new(
        i: usize,
        o: usize,
        stride: usize,
        depth: usize,
        residual: bool,
        act: ActivationKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|d| if d == 0 { Block::new(i, o, stride, act, rng) } else { Block::new(o, o, 1, act, rng) })
            .collect();
        let skip = if !residual {
            Skip::None
        } else if stride != 1 {
            Skip::Conv(Conv3d::new(i, o, KERNEL, stride, rng))
        } else if i != o {
            Skip::Conv(Conv3d::new(i, o, 1, 1, rng))
        } else {
            Skip::Identity
        };
        Unit { blocks, skip }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.infer(&y);
        }
        match &self.skip {
            Skip::None => {}
            Skip::Identity => y.add_assign(x),
            Skip::Conv(c) => y.add_assign(&c.infer(x)),
        }
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y);
        }
        match &mut self.skip {
            Skip::None => {}
            Skip::Identity => y.add_assign(x),
            Skip::Conv(c) => y.add_assign(&c.forward(x)),
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        match &mut self.skip {
            Skip::None => {}
            Skip::Identity => d.add_assign(dy),
            Skip::Conv(c) => d.add_assign(&c.backward(dy)),
        }
        d
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{k}"), out);
        }
        if let Skip::Conv(c) = &self.skip {
            let [w, b] = c.params();
            out.push((format!("{prefix}.skip.weight"), w));
            out.push((format!("{prefix}.skip.bias"), b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{k}"), out);
        }
        if let Skip::Conv(c) = &mut self.skip {
            let [w, b] = c.params_mut();
            out.push((format!("{prefix}.skip.weight"), w));
            out.push((format!("{prefix}.skip.bias"), b));
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.buffers_mut(&format!("{prefix}.block{k}"), out);
        }
    }
}

/// Transposed conv → batch norm → activation, refined by a one-block unit.
#[derive(Clone, Debug)]
struct Up<T> {
    tconv: ConvTranspose3d<T>,
    bn: BatchNorm3d<T>,
    act: Activation<T>,
    unit: Unit<T>,
}

impl<T: Scalar> Up<T> {
    fn new(i: usize, o: usize, residual: bool, act: ActivationKind, rng: &mut ChaCha8Rng) -> Self {
        Up {
            tconv: ConvTranspose3d::new(i, o, KERNEL, DOWNSAMPLE, rng),
            bn: BatchNorm3d::new(o),
            act: Activation::new(act),
            unit: Unit::new(o, o, 1, 1, residual, act, rng),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.act.infer(&self.bn.infer(&self.tconv.infer(x)));
        self.unit.infer(&y)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.tconv.forward(x);
        let y = self.bn.forward(&y);
        let y = self.act.forward(&y);
        self.unit.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.unit.backward(dy);
        let d = self.act.backward(&d);
        let d = self.bn.backward(&d);
        self.tconv.backward(&d)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        let [w, b] = self.tconv.params();
        out.push((format!("{prefix}.tconv.weight"), w));
        out.push((format!("{prefix}.tconv.bias"), b));
        let [g, be] = self.bn.params();
        out.push((format!("{prefix}.bn.gamma"), g));
        out.push((format!("{prefix}.bn.beta"), be));
        for p in self.act.params() {
            out.push((format!("{prefix}.act.slope"), p));
        }
        self.unit.visit(&format!("{prefix}.unit"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        let [w, b] = self.tconv.params_mut();
        out.push((format!("{prefix}.tconv.weight"), w));
        out.push((format!("{prefix}.tconv.bias"), b));
        let [g, be] = self.bn.params_mut();
        out.push((format!("{prefix}.bn.gamma"), g));
        out.push((format!("{prefix}.bn.beta"), be));
        for p in self.act.params_mut() {
            out.push((format!("{prefix}.act.slope"), p));
        }
        self.unit.visit_mut(&format!("{prefix}.unit"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &mut self.bn.running_var));
        self.unit.buffers_mut(&format!("{prefix}.unit"), out);
    }
}

/// Single-channel in, single-channel logits out.
#[derive(Clone, Debug)]
pub struct ResUNet<T> {
    config: ModelConfig,
    down: Vec<Unit<T>>,
    bottom: Unit<T>,
    /// `up[k]` maps level `k + 1` onto level `k`.
    up: Vec<Up<T>>,
    top: ConvTranspose3d<T>,
}

impl<T: Scalar> ResUNet<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (res, act) = (config.residual, config.activation());
        let c = config.channels;
        let mut down = Vec::with_capacity(LEVELS);
        let mut prev = 1;
        for &ch in &c {
            down.push(Unit::new(prev, ch, DOWNSAMPLE, 2, res, act, &mut rng));
            prev = ch;
        }
        let bottom = Unit::new(c[3], config.bottleneck, 1, 2, res, act, &mut rng);
        let mut up = Vec::with_capacity(LEVELS - 1);
        let mut below = config.bottleneck;
        let mut rev = Vec::new();
        for lvl in (1..LEVELS).rev() {
            rev.push(Up::new(c[lvl] + below, c[lvl - 1], res, act, &mut rng));
            below = c[lvl - 1];
        }
        up.extend(rev.into_iter().rev());
        let mut top = ConvTranspose3d::new(c[0] + below, 1, KERNEL, DOWNSAMPLE, &mut rng);
        if let Some(b) = config.output_bias {
            top.bias.value.fill(T::lit(b));
        }
        Ok(ResUNet { config: config.clone(), down, bottom, up, top })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 1 {
            return Err(Error::shape(format!("expected 1 input channel, got {}", x.c)));
        }
        if x.n == 0 || x.dims.iter().any(|&d| d == 0 || d % DIVISOR != 0) {
            return Err(Error::shape(format!(
                "spatial dims {:?} must be nonzero multiples of {DIVISOR}",
                x.dims
            )));
        }
        Ok(())
    }

    /// Evaluation-mode logits (batch norm uses running statistics).
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        let mut h = x.clone();
        for u in &self.down {
            h = u.infer(&h);
            skips.push(h.clone());
        }
        h = self.bottom.infer(&h);
        for lvl in (0..LEVELS).rev() {
            let cat = concat_channels(&skips[lvl], &h);
            h = if lvl == 0 { self.top.infer(&cat) } else { self.up[lvl - 1].infer(&cat) };
        }
        Ok(h)
    }

    /// Evaluation-mode probabilities.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.infer(x)?;
        for v in &mut y.data {
            *v = sigmoid(*v);
        }
        Ok(y)
    }

    /// Training-mode logits; caches activations for [`ResUNet::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        let mut h = x.clone();
        for u in &mut self.down {
            h = u.forward(&h);
            skips.push(h.clone());
        }
        h = self.bottom.forward(&h);
        for lvl in (0..LEVELS).rev() {
            let cat = concat_channels(&skips[lvl], &h);
            h = if lvl == 0 { self.top.forward(&cat) } else { self.up[lvl - 1].forward(&cat) };
        }
        Ok(h)
    }

    /// Backpropagates the logit gradient, accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let c = self.config.channels;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; LEVELS];
        let mut d = dlogits.clone();
        for lvl in 0..LEVELS {
            let dcat = if lvl == 0 { self.top.backward(&d) } else { self.up[lvl - 1].backward(&d) };
            let (ds, dh) = split_channels(&dcat, c[lvl]);
            skip_grads[lvl] = Some(ds);
            d = dh;
        }
        d = self.bottom.backward(&d);
        for lvl in (0..LEVELS).rev() {
            if let Some(ds) = &skip_grads[lvl] {
                d.add_assign(ds);
            }
            d = self.down[lvl].backward(&d);
        }
    }

    /// Named trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (k, u) in self.down.iter().enumerate() {
            u.visit(&format!("down{k}"), &mut out);
        }
        self.bottom.visit("bottom", &mut out);
        for (k, u) in self.up.iter().enumerate() {
            u.visit(&format!("up{}", k + 1), &mut out);
        }
        let [w, b] = self.top.params();
        out.push(("up0.tconv.weight".into(), w));
        out.push(("up0.tconv.bias".into(), b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (k, u) in self.down.iter_mut().enumerate() {
            u.visit_mut(&format!("down{k}"), &mut out);
        }
        self.bottom.visit_mut("bottom", &mut out);
        for (k, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&format!("up{}", k + 1), &mut out);
        }
        let [w, b] = self.top.params_mut();
        out.push(("up0.tconv.weight".into(), w));
        out.push(("up0.tconv.bias".into(), b));
        out
    }

    /// Batch-norm running statistics in a fixed order.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (k, u) in self.down.iter_mut().enumerate() {
            u.buffers_mut(&format!("down{k}"), &mut out);
        }
        self.bottom.buffers_mut("bottom", &mut out);
        for (k, u) in self.up.iter_mut().enumerate() {
            u.buffers_mut(&format!("up{}", k + 1), &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Zeroes the output layer so every probability is exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        self.top.weight.value.fill(T::zero());
        self.top.bias.value.fill(T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{combined_loss_logits, LossConfig};
    use rand::{Rng, SeedableRng};

    fn tiny(residual: bool) -> ModelConfig {
        ModelConfig { channels: [2, 3, 3, 4], bottleneck: 4, residual, init_seed: 9, output_bias: None }
    }

    fn random_input(n: usize, dims: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = n * dims.iter().product::<usize>();
        Tensor::from_vec((0..v).map(|_| rng.random_range(0.0..1.0)).collect(), n, 1, dims).unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let net = ResUNet::<f32>::new(&tiny(true)).unwrap();
        let x = random_input(2, [32, 32, 32], 1);
        let x = Tensor::from_vec(x.data.iter().map(|&v| v as f32).collect(), 2, 1, x.dims).unwrap();
        let y = net.predict_proba(&x).unwrap();
        assert_eq!(y.shape(), [2, 1, 32, 32, 32]);
        assert!(y.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn rejects_indivisible_dims() {
        let net = ResUNet::<f64>::new(&tiny(true)).unwrap();
        let x = Tensor::zeros(1, 1, [16, 16, 8]);
        assert!(matches!(net.infer(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut net = ResUNet::<f64>::new(&tiny(true)).unwrap();
        net.zero_output_layer();
        let y = net.predict_proba(&random_input(1, [16, 16, 16], 2)).unwrap();
        assert!(y.data.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn identical_samples_give_identical_outputs() {
        let net = ResUNet::<f64>::new(&tiny(true)).unwrap();
        let one = random_input(1, [16, 16, 16], 3);
        let mut two = one.data.clone();
        two.extend_from_slice(&one.data);
        let y = net.infer(&Tensor::from_vec(two, 2, 1, one.dims).unwrap()).unwrap();
        assert_eq!(y.sample(0), y.sample(1));
    }

    #[test]
    fn param_count_is_a_function_of_config() {
        for residual in [true, false] {
            let cfg = tiny(residual);
            assert_eq!(ResUNet::<f32>::new(&cfg).unwrap().param_count(), cfg.param_count());
        }
        let def = ModelConfig::default();
        assert_eq!(ResUNet::<f32>::new(&def).unwrap().param_count(), def.param_count());
        assert_eq!(def.param_count(), 4_807_937);
        let vanilla = ModelConfig { residual: false, ..def };
        assert_eq!(vanilla.param_count(), 4_483_921);
    }

    #[test]
    fn vanilla_variant_has_no_skip_or_slope_params() {
        let net = ResUNet::<f32>::new(&tiny(false)).unwrap();
        assert!(net.params().iter().all(|(n, _)| !n.contains("skip") && !n.contains("slope")));
        let res = ResUNet::<f32>::new(&tiny(true)).unwrap();
        assert!(res.params().iter().any(|(n, _)| n.contains("skip")));
    }

    fn loss_of(net: &ResUNet<f64>, x: &Tensor<f64>, t: &[f64]) -> f64 {
        let mut n = net.clone();
        let y = n.forward(x).unwrap();
        combined_loss_logits(&y.data, t, &LossConfig::default()).unwrap().0
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for residual in [true, false] {
            let net = ResUNet::<f64>::new(&tiny(residual)).unwrap();
            let x = random_input(2, [16, 16, 16], 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let t: Vec<f64> = (0..x.data.len()).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect();
            let mut g = net.clone();
            let y = g.forward(&x).unwrap();
            let (_, dy) = combined_loss_logits(&y.data, &t, &LossConfig::default()).unwrap();
            g.backward(&Tensor::from_vec(dy, y.n, y.c, y.dims).unwrap());
            let grads: Vec<(String, Vec<f64>)> =
                g.params().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
            let h = 1e-6;
            let mut checked = 0;
            while checked < 10 {
                let pi = rng.random_range(0..grads.len());
                let ei = rng.random_range(0..grads[pi].1.len());
                let analytic = grads[pi].1[ei];
                if analytic.abs() < 1e-7 {
                    continue;
                }
                let (mut p, mut m) = (net.clone(), net.clone());
                p.params_mut()[pi].1.value[ei] += h;
                m.params_mut()[pi].1.value[ei] -= h;
                let fd = (loss_of(&p, &x, &t) - loss_of(&m, &x, &t)) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
                assert!(rel < 1e-3, "{} [{ei}]: fd {fd} vs {analytic} (rel {rel})", grads[pi].0);
                checked += 1;
            }
        }
    }
}
