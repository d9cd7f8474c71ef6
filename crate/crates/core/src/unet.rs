//! Encoder-decoder network for [N, C, S, S] patches: per level two 3x3
//! convolutions with ReLU and a 2x2 max pool, a two-convolution bottleneck,
//! and a decoder of stride-2 transpose convolutions with skip concatenations.
//! The head is three convolutions, the last mapping back to the input band
//! count, followed by a sigmoid so outputs stay in (0,1).
//!
//! Weights container (little-endian): `"UNW1"` | config words as u32
//! (input_channels, input_size, depth, base_channels, final_convs,
//! seed low word, seed high word) | repeated records of
//! `name_len u32 | name utf-8 | rank u32 | extents u32[] | f32 payload`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"UNW1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Number of pooling levels.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Channels at the first encoder level; doubles per level.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_final_convs")]
    pub final_convs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_input_channels() -> usize {
    5
}
fn default_input_size() -> usize {
    128
}
fn default_depth() -> usize {
    4
}
fn default_base_channels() -> usize {
    16
}
fn default_final_convs() -> usize {
    3
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 5,
            input_size: 128,
            depth: 4,
            base_channels: 16,
            final_convs: 3,
            seed: 0,
        }
    }
}

impl UNetConfig {
    /// Desk-scale variant used by the CV harness defaults. The single-conv
    /// head avoids ReLU channel death in the narrow 4-channel head stack,
    /// which at this width can silently flatten one output band.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            base_channels: 4,
            final_convs: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_channels < 1 {
            return Err(Error::Config(format!(
                "depth and base_channels must be >= 1, got depth {}, base {}",
                self.depth, self.base_channels
            )));
        }
        if self.input_channels < 1 || self.final_convs < 1 {
            return Err(Error::Config(
                "input_channels and final_convs must be >= 1".into(),
            ));
        }
        let divisor = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % divisor != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^depth = {divisor}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Channels at encoder level `i` (0-based); the bottleneck sits at
    /// `level_channels(depth)`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: Tensor, // [out, in, 3, 3]
    b: Tensor, // [out]
}

#[derive(Debug, Clone)]
struct UpLayer {
    w: Tensor, // [in, out, 2, 2]
    b: Tensor, // [out]
}

#[derive(Debug, Clone)]
pub struct UNetModel {
    config: UNetConfig,
    encoders: Vec<(ConvLayer, ConvLayer)>,
    bottleneck: (ConvLayer, ConvLayer),
    /// Deepest level first.
    decoders: Vec<(UpLayer, ConvLayer, ConvLayer)>,
    head: Vec<ConvLayer>,
}

fn he_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> ConvLayer {
    let fan_in = (in_c * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    let mut w = Tensor::new(
        vec![out_c, in_c, k, k],
        (0..out_c * in_c * k * k)
            .map(|_| normal.sample(rng))
            .collect(),
    )
    .unwrap();
    w.quantize_f32();
    ConvLayer {
        w,
        b: Tensor::zeros(&[out_c]),
    }
}

fn he_up(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> UpLayer {
    let fan_in = (in_c * 4) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    let mut w = Tensor::new(
        vec![in_c, out_c, 2, 2],
        (0..in_c * out_c * 4).map(|_| normal.sample(rng)).collect(),
    )
    .unwrap();
    w.quantize_f32();
    UpLayer {
        w,
        b: Tensor::zeros(&[out_c]),
    }
}

pub fn build_unet(config: &UNetConfig) -> Result<UNetModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoders = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let in_c = if i == 0 {
            config.input_channels
        } else {
            config.level_channels(i - 1)
        };
        let c = config.level_channels(i);
        encoders.push((he_conv(&mut rng, c, in_c, 3), he_conv(&mut rng, c, c, 3)));
    }
    let cb = config.level_channels(config.depth);
    let bottleneck = (
        he_conv(&mut rng, cb, config.level_channels(config.depth - 1), 3),
        he_conv(&mut rng, cb, cb, 3),
    );
    let mut decoders = Vec::with_capacity(config.depth);
    for i in (0..config.depth).rev() {
        let upper = config.level_channels(i + 1);
        let c = config.level_channels(i);
        decoders.push((
            he_up(&mut rng, upper, c),
            he_conv(&mut rng, c, 2 * c, 3),
            he_conv(&mut rng, c, c, 3),
        ));
    }
    let c0 = config.level_channels(0);
    let mut head = Vec::with_capacity(config.final_convs);
    for i in 0..config.final_convs {
        let out_c = if i + 1 == config.final_convs {
            config.input_channels
        } else {
            c0
        };
        head.push(he_conv(&mut rng, out_c, c0, 3));
    }
    Ok(UNetModel {
        config: config.clone(),
        encoders,
        bottleneck,
        decoders,
        head,
    })
}

impl UNetModel {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Canonical (name, tensor) walk; save/load and the optimizer all rely
    /// on this order being stable.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, (c1, c2)) in self.encoders.iter().enumerate() {
            f(format!("enc{i}.conv1.weight"), &c1.w);
            f(format!("enc{i}.conv1.bias"), &c1.b);
            f(format!("enc{i}.conv2.weight"), &c2.w);
            f(format!("enc{i}.conv2.bias"), &c2.b);
        }
        f("bottleneck.conv1.weight".into(), &self.bottleneck.0.w);
        f("bottleneck.conv1.bias".into(), &self.bottleneck.0.b);
        f("bottleneck.conv2.weight".into(), &self.bottleneck.1.w);
        f("bottleneck.conv2.bias".into(), &self.bottleneck.1.b);
        for (i, (up, c1, c2)) in self.decoders.iter().enumerate() {
            f(format!("dec{i}.up.weight"), &up.w);
            f(format!("dec{i}.up.bias"), &up.b);
            f(format!("dec{i}.conv1.weight"), &c1.w);
            f(format!("dec{i}.conv1.bias"), &c1.b);
            f(format!("dec{i}.conv2.weight"), &c2.w);
            f(format!("dec{i}.conv2.bias"), &c2.b);
        }
        for (i, c) in self.head.iter().enumerate() {
            f(format!("head.conv{i}.weight"), &c.w);
            f(format!("head.conv{i}.bias"), &c.b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for (c1, c2) in self.encoders.iter_mut() {
            f(&mut c1.w);
            f(&mut c1.b);
            f(&mut c2.w);
            f(&mut c2.b);
        }
        f(&mut self.bottleneck.0.w);
        f(&mut self.bottleneck.0.b);
        f(&mut self.bottleneck.1.w);
        f(&mut self.bottleneck.1.b);
        for (up, c1, c2) in self.decoders.iter_mut() {
            f(&mut up.w);
            f(&mut up.b);
            f(&mut c1.w);
            f(&mut c1.b);
            f(&mut c2.w);
            f(&mut c2.b);
        }
        for c in self.head.iter_mut() {
            f(&mut c.w);
            f(&mut c.b);
        }
    }

    /// Mutable borrows of every parameter, canonical order (optimizer slots).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (c1, c2) in self.encoders.iter_mut() {
            out.extend([&mut c1.w, &mut c1.b, &mut c2.w, &mut c2.b]);
        }
        out.extend([
            &mut self.bottleneck.0.w,
            &mut self.bottleneck.0.b,
            &mut self.bottleneck.1.w,
            &mut self.bottleneck.1.b,
        ]);
        for (up, c1, c2) in self.decoders.iter_mut() {
            out.extend([&mut up.w, &mut up.b]);
            out.extend([&mut c1.w, &mut c1.b, &mut c2.w, &mut c2.b]);
        }
        for c in self.head.iter_mut() {
            out.extend([&mut c.w, &mut c.b]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        let c = self.config.input_channels;
        match batch.shape() {
            [_, bc, bh, bw] if *bc == c && *bh == s && *bw == s => Ok(()),
            other => Err(Error::Shape(format!(
                "batch shape {other:?} does not match configured [N,{c},{s},{s}]"
            ))),
        }
    }

    /// Record a forward pass on `g`. Returns the sigmoid output and the
    /// parameter vars in canonical order (for gradient collection).
    pub fn forward(&self, g: &mut Graph, input: Var, train: bool) -> Result<(Var, Vec<Var>)> {
        self.check_batch(g.value(input))?;
        let mut pvars = Vec::new();
        let conv_relu = |g: &mut Graph,
                             pvars: &mut Vec<Var>,
                             layer: &ConvLayer,
                             x: Var,
                             relu: bool|
         -> Result<Var> {
            let w = g.leaf(layer.w.clone(), train);
            let b = g.leaf(layer.b.clone(), train);
            pvars.push(w);
            pvars.push(b);
            let y = g.conv2d(x, w, b)?;
            Ok(if relu { g.relu(y) } else { y })
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for (c1, c2) in &self.encoders {
            x = conv_relu(g, &mut pvars, c1, x, true)?;
            x = conv_relu(g, &mut pvars, c2, x, true)?;
            skips.push(x);
            x = g.max_pool2d(x)?;
        }
        x = conv_relu(g, &mut pvars, &self.bottleneck.0, x, true)?;
        x = conv_relu(g, &mut pvars, &self.bottleneck.1, x, true)?;
        for (i, (up, c1, c2)) in self.decoders.iter().enumerate() {
            let w = g.leaf(up.w.clone(), train);
            let b = g.leaf(up.b.clone(), train);
            pvars.push(w);
            pvars.push(b);
            x = g.transpose_conv2d(x, w, b)?;
            let skip = skips[self.config.depth - 1 - i];
            x = g.concat_channels(skip, x)?;
            x = conv_relu(g, &mut pvars, c1, x, true)?;
            x = conv_relu(g, &mut pvars, c2, x, true)?;
        }
        for (i, c) in self.head.iter().enumerate() {
            let last = i + 1 == self.head.len();
            x = conv_relu(g, &mut pvars, c, x, !last)?;
        }
        let out = g.sigmoid(x);
        Ok((out, pvars))
    }

    /// Inference convenience: forward one batch, no gradients kept.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.leaf(batch.clone(), false);
        let (out, _) = self.forward(&mut g, input, false)?;
        Ok(g.value(out).clone())
    }

    /// Overwrite parameters from grads in canonical order using `apply`.
    pub fn update_params(&mut self, apply: &mut dyn FnMut(&mut Tensor)) {
        self.visit_params_mut(apply);
    }
}

pub fn save_weights(model: &UNetModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    let c = &model.config;
    for word in [
        c.input_channels as u32,
        c.input_size as u32,
        c.depth as u32,
        c.base_channels as u32,
        c.final_convs as u32,
        (c.seed & 0xffff_ffff) as u32,
        (c.seed >> 32) as u32,
    ] {
        w.write_u32::<LittleEndian>(word)?;
    }
    let mut err = None;
    model.visit_params(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for d in t.shape() {
                w.write_u32::<LittleEndian>(*d as u32)?;
            }
            for v in t.data() {
                w.write_f32::<LittleEndian>(*v as f32)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    w.flush()?;
    Ok(())
}

/// Load a model. When `expect` is given, its architecture fields must match
/// the file's config.
pub fn load_weights(path: &Path, expect: Option<&UNetConfig>) -> Result<UNetModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("weights file truncated before magic".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "bad weights magic {:?}, expected {:?}",
            magic, WEIGHTS_MAGIC
        )));
    }
    let mut words = [0u32; 7];
    for word in &mut words {
        *word = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format("weights file truncated in config block".into()))?;
    }
    let config = UNetConfig {
        input_channels: words[0] as usize,
        input_size: words[1] as usize,
        depth: words[2] as usize,
        base_channels: words[3] as usize,
        final_convs: words[4] as usize,
        seed: (words[5] as u64) | ((words[6] as u64) << 32),
    };
    if let Some(exp) = expect {
        if (
            exp.input_channels,
            exp.input_size,
            exp.depth,
            exp.base_channels,
            exp.final_convs,
        ) != (
            config.input_channels,
            config.input_size,
            config.depth,
            config.base_channels,
            config.final_convs,
        ) {
            return Err(Error::Config(format!(
                "weights config {config:?} does not match expected {exp:?}"
            )));
        }
    }
    let mut model = build_unet(&config)?;
    let mut expected = Vec::new();
    model.visit_params(&mut |name, t| expected.push((name, t.shape().to_vec())));
    let mut loaded: Vec<Tensor> = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let name_len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format(format!("weights file truncated before record '{name}'")))?
            as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::Format("weights file truncated in record name".into()))?;
        let got_name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("record name is not utf-8".into()))?;
        if &got_name != name {
            return Err(Error::Format(format!(
                "record name '{got_name}', expected '{name}'"
            )));
        }
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format("weights file truncated at rank".into()))?
            as usize;
        let mut got_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            got_shape.push(r.read_u32::<LittleEndian>().map_err(|_| {
                Error::Format("weights file truncated in extents".into())
            })? as usize);
        }
        if &got_shape != shape {
            return Err(Error::Format(format!(
                "record '{name}' has shape {got_shape:?}, expected {shape:?}"
            )));
        }
        let n: usize = got_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f32::<LittleEndian>().map_err(|_| {
                Error::Format(format!("weights file truncated in payload of '{name}'"))
            })? as f64);
        }
        loaded.push(Tensor::new(got_shape, data)?);
    }
    let mut it = loaded.into_iter();
    model.visit_params_mut(&mut |t| *t = it.next().unwrap());
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny8() -> UNetConfig {
        UNetConfig {
            input_channels: 5,
            input_size: 8,
            depth: 1,
            base_channels: 2,
            final_convs: 3,
            seed: 42,
        }
    }

    #[test]
    fn default_config_forward_shape() {
        let config = UNetConfig {
            depth: 2,
            base_channels: 2,
            seed: 1,
            ..UNetConfig::default()
        };
        let model = build_unet(&config).unwrap();
        let out = model.infer(&Tensor::full(&[1, 5, 128, 128], 0.5)).unwrap();
        assert_eq!(out.shape(), &[1, 5, 128, 128]);
    }

    #[test]
    fn output_strictly_in_unit_interval() {
        let model = build_unet(&tiny8()).unwrap();
        let out = model.infer(&Tensor::full(&[2, 5, 8, 8], 0.3)).unwrap();
        for v in out.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn same_seed_identical_params() {
        let a = build_unet(&tiny8()).unwrap();
        let b = build_unet(&tiny8()).unwrap();
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        a.visit_params(&mut |_, t| pa.push(t.clone()));
        b.visit_params(&mut |_, t| pb.push(t.clone()));
        assert_eq!(pa, pb);
    }

    #[test]
    fn param_count_matches_hand_formula() {
        // depth 1, base 2, 5 input channels, 3 head convs:
        //   enc0:   conv(5->2) 2*5*9+2,   conv(2->2) 2*2*9+2
        //   bottleneck: conv(2->4) 4*2*9+4, conv(4->4) 4*4*9+4
        //   dec0:   up(4->2) 4*2*4+2, conv(4->2) 2*4*9+2, conv(2->2) 2*2*9+2
        //   head:   conv(2->2) x2, conv(2->5) 5*2*9+5
        let expected = (2 * 5 * 9 + 2)
            + (2 * 2 * 9 + 2)
            + (4 * 2 * 9 + 4)
            + (4 * 4 * 9 + 4)
            + (4 * 2 * 4 + 2)
            + (2 * 4 * 9 + 2)
            + (2 * 2 * 9 + 2)
            + (2 * 2 * 9 + 2) * 2
            + (5 * 2 * 9 + 5);
        let model = build_unet(&tiny8()).unwrap();
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn invalid_input_size_rejected() {
        let config = UNetConfig {
            input_size: 100,
            depth: 3,
            ..UNetConfig::default()
        };
        assert!(matches!(build_unet(&config), Err(Error::Config(_))));
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let model = build_unet(&tiny8()).unwrap();
        assert!(model.infer(&Tensor::full(&[1, 5, 16, 16], 0.5)).is_err());
        assert!(model.infer(&Tensor::full(&[1, 3, 8, 8], 0.5)).is_err());
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.unw");
        let model = build_unet(&tiny8()).unwrap();
        let input = Tensor::full(&[1, 5, 8, 8], 0.4);
        let before = model.infer(&input).unwrap();
        save_weights(&model, &path).unwrap();
        let back = load_weights(&path, Some(&tiny8())).unwrap();
        let after = back.infer(&input).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn truncated_weights_file_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.unw");
        let model = build_unet(&tiny8()).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_weights(&path, None), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch_names_both_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.unw");
        let model = build_unet(&tiny8()).unwrap();
        save_weights(&model, &path).unwrap();
        let other = UNetConfig {
            depth: 2,
            input_size: 16,
            ..tiny8()
        };
        match load_weights(&path, Some(&other)) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("depth: 1") && msg.contains("depth: 2"), "{msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn encoder_decoder_spatial_symmetry() {
        // depth 2 on a 16x16 input: levels 16 -> 8 -> 4 and back
        let config = UNetConfig {
            input_size: 16,
            depth: 2,
            base_channels: 2,
            ..UNetConfig::default()
        };
        let model = build_unet(&config).unwrap();
        let out = model.infer(&Tensor::full(&[1, 5, 16, 16], 0.2)).unwrap();
        assert_eq!(out.shape(), &[1, 5, 16, 16]);
    }
}
