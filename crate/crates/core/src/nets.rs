//! Seeded network builders on top of the tape.
//!
//! A builder registers its parameters under a name prefix at construction
//! and replays the same graph on any tape at forward time. Initialization
//! draws from a seeded generator, so a (seed, architecture) pair always
//! produces the same parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Element, ParamStore, Tape, Tensor, Var};

/// Kaiming-uniform fan-in bound for relu stacks.
fn he_uniform<T: Element>(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
}

fn conv_weight<T: Element>(rng: &mut ChaCha8Rng, o: usize, c: usize, k: usize) -> Tensor<T> {
    Tensor::new(vec![o, c, k, k], he_uniform(rng, c * k * k, o * c * k * k))
}

fn dense_weight<T: Element>(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Tensor<T> {
    Tensor::new(vec![k, m], he_uniform(rng, k, k * m))
}

/// Largest of 8, 4, 1 that divides the channel count.
pub fn gn_groups(c: usize) -> usize {
    if c % 8 == 0 {
        8
    } else if c % 4 == 0 {
        4
    } else {
        1
    }
}

const GN_EPS: f64 = 1e-5;

/// 3x3 convolution, optional group norm, relu.
///
/// Group norm pools statistics over the whole map, so blocks that must stay
/// local to their receptive field (the pixel-aligned feature stack) skip it.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub norm: bool,
}

impl ConvBlock {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        norm: bool,
    ) -> Self {
        store.register(&format!("{name}.w"), conv_weight(rng, out_c, in_c, 3));
        store.register(&format!("{name}.b"), Tensor::zeros(&[out_c]));
        if norm {
            store.register(&format!("{name}.gn_w"), Tensor::full(&[out_c], T::ONE));
            store.register(&format!("{name}.gn_b"), Tensor::zeros(&[out_c]));
        }
        Self { name: name.to_string(), in_c, out_c, stride, norm }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, &format!("{}.w", self.name));
        let b = tape.param(store, &format!("{}.b", self.name));
        let mut y = tape.conv2d(x, w, Some(b), self.stride);
        if self.norm {
            let gw = tape.param(store, &format!("{}.gn_w", self.name));
            let gb = tape.param(store, &format!("{}.gn_b", self.name));
            y = tape.group_norm(y, gw, gb, gn_groups(self.out_c), GN_EPS);
        }
        tape.relu(y)
    }
}

/// Plain 3x3 convolution without norm or activation, for output heads.
#[derive(Debug, Clone)]
pub struct ConvHead {
    name: String,
    pub out_c: usize,
}

impl ConvHead {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        store.register(&format!("{name}.w"), conv_weight(rng, out_c, in_c, 3));
        store.register(&format!("{name}.b"), Tensor::zeros(&[out_c]));
        Self { name: name.to_string(), out_c }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, &format!("{}.w", self.name));
        let b = tape.param(store, &format!("{}.b", self.name));
        tape.conv2d(x, w, Some(b), 1)
    }
}

/// Four-level encoder-decoder with skip connections, full-resolution output.
///
/// Channel widths run base, 2b, 4b, 8b down the encoder; each decoder level
/// upsamples, concatenates the matching encoder activation and applies one
/// block. The head is a bare convolution, so callers pick the output
/// nonlinearity. Input height and width must be divisible by 8.
#[derive(Debug, Clone)]
pub struct UNet {
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: ConvHead,
    pub in_c: usize,
    pub out_c: usize,
    pub base: usize,
}

impl UNet {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        base: usize,
    ) -> Self {
        let b = base;
        let enc = vec![
            ConvBlock::register(store, rng, &format!("{name}.enc0"), in_c, b, 1, true),
            ConvBlock::register(store, rng, &format!("{name}.enc1"), b, 2 * b, 2, true),
            ConvBlock::register(store, rng, &format!("{name}.enc2"), 2 * b, 4 * b, 2, true),
            ConvBlock::register(store, rng, &format!("{name}.enc3"), 4 * b, 8 * b, 2, true),
        ];
        let dec = vec![
            ConvBlock::register(store, rng, &format!("{name}.dec2"), 8 * b + 4 * b, 4 * b, 1, true),
            ConvBlock::register(store, rng, &format!("{name}.dec1"), 4 * b + 2 * b, 2 * b, 1, true),
            ConvBlock::register(store, rng, &format!("{name}.dec0"), 2 * b + b, b, 1, true),
        ];
        let head = ConvHead::register(store, rng, &format!("{name}.head"), b, out_c);
        Self { enc, dec, head, in_c, out_c, base }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let xs = tape.shape(x);
        assert_eq!(xs[0], self.in_c, "unet input channels");
        assert!(xs[1] % 8 == 0 && xs[2] % 8 == 0, "unet input size must be divisible by 8");
        let e0 = self.enc[0].forward(tape, store, x);
        let e1 = self.enc[1].forward(tape, store, e0);
        let e2 = self.enc[2].forward(tape, store, e1);
        let e3 = self.enc[3].forward(tape, store, e2);
        let u2 = tape.upsample2x(e3, true);
        let d2 = {
            let cat = tape.concat(&[u2, e2], 0);
            self.dec[0].forward(tape, store, cat)
        };
        let u1 = tape.upsample2x(d2, true);
        let d1 = {
            let cat = tape.concat(&[u1, e1], 0);
            self.dec[1].forward(tape, store, cat)
        };
        let u0 = tape.upsample2x(d1, true);
        let d0 = {
            let cat = tape.concat(&[u0, e0], 0);
            self.dec[2].forward(tape, store, cat)
        };
        self.head.forward(tape, store, d0)
    }
}

/// Feed-forward convolutional feature extractor for pixel-aligned lookups.
///
/// A plain stack without skips, so the receptive field is exactly the
/// arithmetic over kernel sizes and strides and locality is testable.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub in_ch: usize,
    pub width: usize,
    pub out_stride: usize,
    pub blocks: usize,
}

impl EncoderConfig {
    /// Compact setting: full feature width `width`, output at half input
    /// resolution.
    pub fn desk(in_ch: usize, width: usize) -> Self {
        Self { in_ch, width, out_stride: 2, blocks: 4 }
    }

    /// High-resolution setting: quarter-resolution output, deeper stack.
    pub fn large(in_ch: usize, width: usize) -> Self {
        Self { in_ch, width, out_stride: 4, blocks: 5 }
    }

    /// (in_c, out_c, stride) per block.
    fn plan(&self) -> Vec<(usize, usize, usize)> {
        assert!(self.out_stride == 2 || self.out_stride == 4, "out_stride must be 2 or 4");
        let half = (self.width / 2).max(1);
        let mut plan = vec![(self.in_ch, half, 2)];
        if self.out_stride == 4 {
            plan.push((half, half, 2));
        }
        plan.push((half, self.width, 1));
        while plan.len() < self.blocks {
            plan.push((self.width, self.width, 1));
        }
        assert_eq!(plan.len(), self.blocks, "blocks too few for out_stride");
        plan
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(
            h % self.out_stride == 0 && w % self.out_stride == 0,
            "input size not divisible by out_stride"
        );
        (h / self.out_stride, w / self.out_stride)
    }

    /// Receptive field edge length in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut jump = 1usize;
        for (_, _, s) in self.plan() {
            rf += 2 * jump;
            jump *= s;
        }
        rf
    }
}

#[derive(Debug, Clone)]
pub struct PixelEncoder {
    blocks: Vec<ConvBlock>,
    pub config: EncoderConfig,
}

impl PixelEncoder {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: EncoderConfig,
    ) -> Self {
        let blocks = config
            .plan()
            .into_iter()
            .enumerate()
            .map(|(i, (ic, oc, s))| {
                ConvBlock::register(store, rng, &format!("{name}.b{i}"), ic, oc, s, false)
            })
            .collect();
        Self { blocks, config }
    }

    /// `[in_ch, H, W] -> [width, H/out_stride, W/out_stride]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let xs = tape.shape(x);
        assert_eq!(xs[0], self.config.in_ch, "encoder input channels");
        self.config.out_hw(xs[1], xs[2]);
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, store, h);
        }
        h
    }
}

/// Dense stack with relu between layers and the input re-fed into chosen
/// layers. `widths` are activation sizes including input and output;
/// `skip_layers` indexes weight layers (0-based) whose input is the previous
/// activation concatenated with the network input.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
    pub skip_layers: Vec<usize>,
}

impl MlpConfig {
    pub fn layer_in(&self, i: usize) -> usize {
        self.widths[i] + if self.skip_layers.contains(&i) { self.widths[0] } else { 0 }
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    name: String,
    pub config: MlpConfig,
}

impl Mlp {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: MlpConfig,
    ) -> Self {
        assert!(config.widths.len() >= 2, "mlp needs at least one layer");
        assert!(!config.skip_layers.contains(&0), "skip into the first layer is redundant");
        for i in 0..config.layers() {
            let (k, m) = (config.layer_in(i), config.widths[i + 1]);
            store.register(&format!("{name}.w{i}"), dense_weight(rng, k, m));
            store.register(&format!("{name}.b{i}"), Tensor::zeros(&[m]));
        }
        Self { name: name.to_string(), config }
    }

    /// `[N, widths[0]] -> [N, widths.last()]`, no output activation.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        assert_eq!(tape.shape(x)[1], self.config.widths[0], "mlp input width");
        let mut h = x;
        for i in 0..self.config.layers() {
            let inp = if self.config.skip_layers.contains(&i) {
                tape.concat(&[h, x], 1)
            } else {
                h
            };
            let w = tape.param(store, &format!("{}.w{i}", self.name));
            let b = tape.param(store, &format!("{}.b{i}", self.name));
            h = tape.dense(inp, w, Some(b));
            if i + 1 < self.config.layers() {
                h = tape.relu(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_gradients, max_grad_error};
    use crate::seed;
    use rand::RngCore;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn unet_output_shape_and_determinism() {
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        let net1 = UNet::register(&mut s1, &mut seed::rng(3, "unet"), "n", 3, 2, 8);
        let _net2 = UNet::register(&mut s2, &mut seed::rng(3, "unet"), "n", 3, 2, 8);
        for (name, t, _) in s1.iter() {
            assert_eq!(t.data(), s2.get(name).data(), "{name} differs across same-seed builds");
        }
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut seed::rng(4, "x"), vec![3, 16, 16]));
        let y = net1.forward(&mut tape, &s1, x);
        assert_eq!(tape.shape(y), &[2, 16, 16]);
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let net = UNet::register(&mut store, &mut seed::rng(5, "unet-g"), "n", 2, 1, 4);
        let x = rand_tensor(&mut seed::rng(6, "x"), vec![2, 8, 8]);
        let run = |s: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = net.forward(&mut tape, s, xv);
            let sq = tape.mul(y, y);
            let loss = tape.mean(sq);
            (tape, loss)
        };
        let (tape, loss) = run(&store);
        let grads = tape.backward(loss);
        let fd = finite_diff_gradients(&store, 1e-5, |s| {
            let (tape, loss) = run(s);
            tape.value(loss).item()
        });
        let err = max_grad_error(&grads, &fd);
        assert!(err < 1e-6, "unet grad error {err}");
    }

    #[test]
    fn encoder_desk_and_large_contracts() {
        let desk = EncoderConfig::desk(3, 64);
        assert_eq!(desk.out_hw(128, 128), (64, 64));
        let large = EncoderConfig::large(3, 256);
        assert_eq!(large.out_hw(512, 512), (128, 128));
        assert!(large.receptive_field() > desk.receptive_field());

        let mut store = ParamStore::<f32>::new();
        let enc =
            PixelEncoder::register(&mut store, &mut seed::rng(8, "enc"), "e", desk.clone());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 128, 128], 0.5f32));
        let y = enc.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[64, 64, 64]);

        let mut store2 = ParamStore::<f32>::new();
        let enc2 = PixelEncoder::register(
            &mut store2,
            &mut seed::rng(8, "enc"),
            "e",
            EncoderConfig { in_ch: 3, width: 256, out_stride: 4, blocks: 5 },
        );
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(Tensor::full(&[3, 64, 64], 0.5f32));
        let y2 = enc2.forward(&mut tape2, &store2, x2);
        assert_eq!(tape2.shape(y2), &[256, 16, 16]);
    }

    #[test]
    fn encoder_feature_ignores_input_outside_receptive_field() {
        let cfg = EncoderConfig::desk(1, 8);
        let rf = cfg.receptive_field();
        assert_eq!(rf, 15);
        let mut store = ParamStore::<f64>::new();
        let enc = PixelEncoder::register(&mut store, &mut seed::rng(9, "enc-rf"), "e", cfg);
        let base = rand_tensor(&mut seed::rng(10, "x"), vec![1, 32, 32]);
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = enc.forward(&mut tape, &store, xv);
            tape.value(y).clone()
        };
        let y0 = run(base.clone());
        // Output texel (2,2) sees input pixels around (4,4) within rf/2;
        // pixel (31,31) is far outside that window.
        let mut poked = base.clone();
        poked.data_mut()[31 * 32 + 31] += 10.0;
        let y1 = run(poked);
        let (oh, ow) = (16, 16);
        for c in 0..8 {
            let idx = (c * oh + 2) * ow + 2;
            assert_eq!(y0.data()[idx], y1.data()[idx], "far pixel leaked into local feature");
        }
        // A poke inside the window changes the feature in some channel.
        let mut near = base.clone();
        near.data_mut()[4 * 32 + 4] += 10.0;
        let y2 = run(near);
        let changed = (0..8).any(|c| {
            let idx = (c * oh + 2) * ow + 2;
            y0.data()[idx] != y2.data()[idx]
        });
        assert!(changed, "near pixel had no effect on local feature");
    }

    #[test]
    fn mlp_skip_widths_and_gradients() {
        let cfg = MlpConfig { widths: vec![5, 8, 8, 6, 1], skip_layers: vec![1, 2] };
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::register(&mut store, &mut seed::rng(11, "mlp"), "m", cfg);
        assert_eq!(store.get("m.w0").shape(), &[5, 8]);
        assert_eq!(store.get("m.w1").shape(), &[13, 8]);
        assert_eq!(store.get("m.w2").shape(), &[13, 6]);
        assert_eq!(store.get("m.w3").shape(), &[6, 1]);

        let x = rand_tensor(&mut seed::rng(12, "x"), vec![4, 5]);
        let run = |s: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = mlp.forward(&mut tape, s, xv);
            assert_eq!(tape.shape(y), &[4, 1]);
            let sq = tape.mul(y, y);
            let loss = tape.mean(sq);
            (tape, loss)
        };
        let (tape, loss) = run(&store);
        let grads = tape.backward(loss);
        let fd = finite_diff_gradients(&store, 1e-6, |s| {
            let (tape, loss) = run(s);
            tape.value(loss).item()
        });
        let err = max_grad_error(&grads, &fd);
        assert!(err < 1e-6, "mlp grad error {err}");
    }

    #[test]
    fn init_depends_on_seed_not_call_count() {
        let mut s1 = ParamStore::<f64>::new();
        let mut rng = seed::rng(13, "warm");
        rng.next_u64();
        let mut s2 = ParamStore::<f64>::new();
        let _ = ConvBlock::register(&mut s1, &mut seed::rng(14, "cb"), "c", 3, 8, 1, true);
        let _ = ConvBlock::register(&mut s2, &mut seed::rng(14, "cb"), "c", 3, 8, 1, true);
        assert_eq!(s1.get("c.w").data(), s2.get("c.w").data());
        let mut s3 = ParamStore::<f64>::new();
        let _ = ConvBlock::register(&mut s3, &mut seed::rng(15, "cb"), "c", 3, 8, 1, true);
        assert_ne!(s1.get("c.w").data(), s3.get("c.w").data());
    }
}
