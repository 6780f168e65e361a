//! The heatmap-classification tracker model.
//!
//! A shared 2D-convolutional encoder maps a `D x T` spectrogram to a latent
//! map of identical shape. Per-formant decoder heads then read a probability
//! heatmap off that latent map with 1D convolutions over time, treating the
//! frequency axis as channels. Each head is conditioned on the formants
//! below it: the latent rows at and below the lower formant's bin are zeroed
//! before the head runs, and the head's output distribution is renormalized
//! over the surviving rows, which makes predicted bins strictly increasing
//! across heads by construction.

pub mod checkpoint;
pub mod nn;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
pub use nn::{Grid, ParamMut, ParamView, Real};
use nn::{BatchNorm, ConvLayer, Dropout, Relu};

/// Sentinel for "no lower formant": the first head masks nothing.
pub const NO_LOWER_BIN: i32 = -1;

/// Encoder architecture. The channel plan starts and ends at one channel so
/// the latent map has the spectrogram's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub channel_plan: Vec<usize>,
    pub kernel: usize,
    pub dropout_rate: f64,
    pub uses_batchnorm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channel_plan: vec![1, 16, 32, 64, 128, 128, 64, 32, 1],
            kernel: 3,
            dropout_rate: 0.2,
            uses_batchnorm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channel_plan.len() < 2 {
            problems.push("encoder channel_plan needs at least two entries".into());
        }
        if self.channel_plan.first() != Some(&1) || self.channel_plan.last() != Some(&1) {
            problems.push("encoder channel_plan must start and end with 1".into());
        }
        if self.channel_plan.iter().any(|&c| c == 0) {
            problems.push("encoder channel counts must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            problems.push(format!("encoder kernel must be odd, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!(
                "encoder dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Decoder-head architecture. The bottleneck plan must start and end at the
/// number of frequency bins, and heads never carry bias parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub bottleneck_plan: Vec<usize>,
    pub time_kernel: usize,
    /// Must stay false: additive per-channel constants would let a head
    /// memorize a prototypical formant location and ignore its input.
    pub bias_enabled: bool,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub uses_batchnorm: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            bottleneck_plan: vec![257, 64, 257],
            time_kernel: 3,
            bias_enabled: false,
            num_heads: 3,
            dropout_rate: 0.2,
            uses_batchnorm: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, num_bins: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.bottleneck_plan.len() < 2 {
            problems.push("decoder bottleneck_plan needs at least two entries".into());
        }
        if self.bottleneck_plan.first() != Some(&num_bins)
            || self.bottleneck_plan.last() != Some(&num_bins)
        {
            problems.push(format!(
                "decoder bottleneck_plan must start and end at num_bins = {num_bins}, got {:?}",
                self.bottleneck_plan
            ));
        }
        if self.time_kernel == 0 || self.time_kernel % 2 == 0 {
            problems.push(format!(
                "decoder time_kernel must be odd, got {}",
                self.time_kernel
            ));
        }
        if self.bias_enabled {
            problems.push("decoder bias_enabled must be false".into());
        }
        if self.num_heads == 0 {
            problems.push("decoder num_heads must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!(
                "decoder dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Per-formant probability heatmaps, one `D x T` map per head.
#[derive(Debug, Clone)]
pub struct HeatmapSet<T> {
    pub maps: Vec<Array2<T>>,
}

impl<T: Real> HeatmapSet<T> {
    pub fn num_heads(&self) -> usize {
        self.maps.len()
    }

    /// Elementwise maximum across heads, for visualization export.
    pub fn aggregate(&self) -> Array2<T> {
        let mut out = self.maps[0].clone();
        for map in &self.maps[1..] {
            for (o, &v) in out.iter_mut().zip(map.iter()) {
                if v > *o {
                    *o = v;
                }
            }
        }
        out
    }
}

#[derive(Clone)]
struct EncoderBlock<T> {
    conv: ConvLayer<T>,
    bn: Option<BatchNorm<T>>,
    relu: Relu,
    dropout: Dropout,
    /// Learned 1x1 projection for the skip when channel counts differ;
    /// `None` means an identity skip.
    proj: Option<ConvLayer<T>>,
    /// The final block is a bare convolution plus skip.
    is_last: bool,
}

impl<T: Real> EncoderBlock<T> {
    fn forward(
        &mut self,
        x: &Array2<T>,
        g: &Grid,
        valid: &[bool],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Array2<T> {
        let mut main = self.conv.forward(x, g, train);
        zero_invalid_cols(&mut main, valid);
        if !self.is_last {
            if let Some(bn) = &mut self.bn {
                main = bn.forward(&main, valid, train);
                zero_invalid_cols(&mut main, valid);
            }
            self.relu.forward(&mut main, train);
            self.dropout.forward(&mut main, train, rng);
        }
        match &mut self.proj {
            Some(proj) => {
                let skip = proj.forward(x, g, train);
                main += &skip;
            }
            None => main += x,
        }
        main
    }

    fn backward(&mut self, dy: &Array2<T>, g: &Grid, valid: &[bool]) -> Array2<T> {
        let mut dmain = dy.clone();
        zero_invalid_cols(&mut dmain, valid);
        let dskip = dmain.clone();
        if !self.is_last {
            self.dropout.backward(&mut dmain);
            self.relu.backward(&mut dmain);
            if let Some(bn) = &mut self.bn {
                dmain = bn.backward(&dmain);
            }
        }
        let mut dx = self.conv.backward(&dmain, g);
        match &mut self.proj {
            Some(proj) => {
                let dproj = proj.backward(&dskip, g);
                dx += &dproj;
            }
            None => dx += &dskip,
        }
        zero_invalid_cols(&mut dx, valid);
        dx
    }
}

#[derive(Clone)]
struct DecoderHead<T> {
    convs: Vec<ConvLayer<T>>,
    bns: Vec<Option<BatchNorm<T>>>,
    relus: Vec<Relu>,
    dropouts: Vec<Dropout>,
    cached_input: Option<Array2<T>>,
}

impl<T: Real> DecoderHead<T> {
    fn forward(
        &mut self,
        z: &Array2<T>,
        g: &Grid,
        valid: &[bool],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Array2<T> {
        let mut h = z.clone();
        let last = self.convs.len() - 1;
        for j in 0..self.convs.len() {
            h = self.convs[j].forward(&h, g, train);
            zero_invalid_cols(&mut h, valid);
            if j < last {
                if let Some(bn) = &mut self.bns[j] {
                    h = bn.forward(&h, valid, train);
                    zero_invalid_cols(&mut h, valid);
                }
                self.relus[j].forward(&mut h, train);
                self.dropouts[j].forward(&mut h, train, rng);
            }
        }
        // Identity residual: input and output widths both equal num_bins.
        h += z;
        if train {
            self.cached_input = Some(z.clone());
        }
        h
    }

    fn backward(&mut self, dy: &Array2<T>, g: &Grid, valid: &[bool]) -> Array2<T> {
        self.cached_input.take().expect("forward(train) before backward");
        let mut dh = dy.clone();
        zero_invalid_cols(&mut dh, valid);
        let dres = dh.clone();
        let last = self.convs.len() - 1;
        for j in (0..self.convs.len()).rev() {
            if j < last {
                self.dropouts[j].backward(&mut dh);
                self.relus[j].backward(&mut dh);
                if let Some(bn) = &mut self.bns[j] {
                    dh = bn.backward(&dh);
                }
            }
            dh = self.convs[j].backward(&dh, g);
            zero_invalid_cols(&mut dh, valid);
        }
        dh += &dres;
        dh
    }
}

/// Shared encoder plus `K` decoder heads.
#[derive(Clone)]
pub struct FormantModel<T> {
    blocks: Vec<EncoderBlock<T>>,
    heads: Vec<DecoderHead<T>>,
    pub encoder_config: EncoderConfig,
    pub decoder_config: DecoderConfig,
    pub num_bins: usize,
}

impl<T: Real> FormantModel<T> {
    pub fn new(
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        num_bins: usize,
        seed: u64,
    ) -> Result<Self> {
        encoder_config.validate()?;
        decoder_config.validate(num_bins)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let plan = &encoder_config.channel_plan;
        let mut blocks = Vec::with_capacity(plan.len() - 1);
        for i in 0..plan.len() - 1 {
            let (cin, cout) = (plan[i], plan[i + 1]);
            let is_last = i == plan.len() - 2;
            let conv = ConvLayer::new(
                cin,
                cout,
                encoder_config.kernel,
                encoder_config.kernel,
                true,
                &mut rng,
            );
            let bn = (!is_last && encoder_config.uses_batchnorm)
                .then(|| BatchNorm::new(cout, true));
            let proj = (cin != cout).then(|| ConvLayer::new(cin, cout, 1, 1, false, &mut rng));
            blocks.push(EncoderBlock {
                conv,
                bn,
                relu: Relu::new(),
                dropout: Dropout::new(encoder_config.dropout_rate),
                proj,
                is_last,
            });
        }

        let dplan = &decoder_config.bottleneck_plan;
        let mut heads = Vec::with_capacity(decoder_config.num_heads);
        for _ in 0..decoder_config.num_heads {
            let mut convs = Vec::new();
            let mut bns = Vec::new();
            let mut relus = Vec::new();
            let mut dropouts = Vec::new();
            for j in 0..dplan.len() - 1 {
                convs.push(ConvLayer::new(
                    dplan[j],
                    dplan[j + 1],
                    1,
                    decoder_config.time_kernel,
                    false,
                    &mut rng,
                ));
                let inner = j < dplan.len() - 2;
                // Scale-only normalization: an affine shift would be a bias.
                bns.push(
                    (inner && decoder_config.uses_batchnorm)
                        .then(|| BatchNorm::new(dplan[j + 1], false)),
                );
                relus.push(Relu::new());
                dropouts.push(Dropout::new(decoder_config.dropout_rate));
            }
            heads.push(DecoderHead {
                convs,
                bns,
                relus,
                dropouts,
                cached_input: None,
            });
        }

        Ok(Self {
            blocks,
            heads,
            encoder_config,
            decoder_config,
            num_bins,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Encoder pass over a batch laid out as `[1, batch * D * T]`.
    pub fn encode_batch(
        &mut self,
        x: &Array2<T>,
        g: &Grid,
        valid: &[bool],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Array2<T> {
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.forward(&h, g, valid, train, rng);
        }
        h
    }

    /// Encoder backward; `dz` has the same `[1, batch * D * T]` layout.
    pub fn encode_backward(&mut self, dz: &Array2<T>, g: &Grid, valid: &[bool]) -> Array2<T> {
        let mut dh = dz.clone();
        for block in self.blocks.iter_mut().rev() {
            dh = block.backward(&dh, g, valid);
        }
        dh
    }

    /// One decoder head over a batch laid out as `[D, batch * T]`.
    pub fn head_forward(
        &mut self,
        head: usize,
        z_masked: &Array2<T>,
        g: &Grid,
        valid: &[bool],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Array2<T> {
        self.heads[head].forward(z_masked, g, valid, train, rng)
    }

    pub fn head_backward(
        &mut self,
        head: usize,
        dlogits: &Array2<T>,
        g: &Grid,
        valid: &[bool],
    ) -> Array2<T> {
        self.heads[head].backward(dlogits, g, valid)
    }

    /// Encodes a single spectrogram in eval mode; returns the `D x T` latent.
    pub fn encode(&mut self, s: &Spectrogram) -> Result<Array2<T>> {
        if s.num_bins() != self.num_bins {
            return Err(Error::shape("encoder input bins", self.num_bins, s.num_bins()));
        }
        let (d, t) = (s.num_bins(), s.num_frames());
        let g = Grid { batch: 1, height: d, width: t };
        let x = Array2::from_shape_fn((1, d * t), |(_, i)| T::from_f64(s.values[(i / t, i % t)] as f64));
        let valid = vec![true; d * t];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = self.encode_batch(&x, &g, &valid, false, &mut rng);
        Ok(latent_rows_to_matrix(&z, d, t))
    }

    /// Runs head `head` on a masked `D x T` latent in eval mode and returns
    /// the probability map. `lower_bins` restricts each column's support to
    /// the rows above the given bin; `None` applies a plain softmax.
    pub fn decode_head(
        &mut self,
        head: usize,
        z_masked: &Array2<T>,
        lower_bins: Option<&[i32]>,
    ) -> Result<Array2<T>> {
        let (d, t) = z_masked.dim();
        if d != self.num_bins {
            return Err(Error::shape("decoder input bins", self.num_bins, d));
        }
        if let Some(lower) = lower_bins {
            if lower.len() != t {
                return Err(Error::shape("lower_bins length", t, lower.len()));
            }
        }
        let g = Grid { batch: 1, height: 1, width: t };
        let valid = vec![true; t];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.head_forward(head, z_masked, &g, &valid, false, &mut rng);
        Ok(masked_softmax_columns(&logits, lower_bins))
    }

    /// Sum of parameter element counts per component: `(encoder, one head)`.
    pub fn param_counts(&self) -> (usize, usize) {
        let mut encoder = 0;
        for b in &self.blocks {
            encoder += b.conv.num_params();
            if let Some(bn) = &b.bn {
                encoder += bn.num_params();
            }
            if let Some(p) = &b.proj {
                encoder += p.num_params();
            }
        }
        let mut head = 0;
        if let Some(h) = self.heads.first() {
            for c in &h.convs {
                head += c.num_params();
            }
            for bn in h.bns.iter().flatten() {
                head += bn.num_params();
            }
        }
        (encoder, head)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p: ParamView<'_, T>| n += p.value.len());
        n
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.conv.zero_grads();
            if let Some(bn) = &mut b.bn {
                bn.zero_grads();
            }
            if let Some(p) = &mut b.proj {
                p.zero_grads();
            }
        }
        for h in &mut self.heads {
            for c in &mut h.convs {
                c.zero_grads();
            }
            for bn in h.bns.iter_mut().flatten() {
                bn.zero_grads();
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = format!("encoder.block{}", i + 1);
            visit_conv(&b.conv, &format!("{prefix}.conv"), f);
            if let Some(bn) = &b.bn {
                visit_bn(bn, &format!("{prefix}.bn"), f);
            }
            if let Some(p) = &b.proj {
                visit_conv(p, &format!("{prefix}.proj"), f);
            }
        }
        for (k, h) in self.heads.iter().enumerate() {
            let prefix = format!("decoder{}", k + 1);
            for (j, c) in h.convs.iter().enumerate() {
                visit_conv(c, &format!("{prefix}.conv{}", j + 1), f);
            }
            for (j, bn) in h.bns.iter().enumerate() {
                if let Some(bn) = bn {
                    visit_bn(bn, &format!("{prefix}.bn{}", j + 1), f);
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("encoder.block{}", i + 1);
            visit_conv_mut(&mut b.conv, &format!("{prefix}.conv"), f);
            if let Some(bn) = &mut b.bn {
                visit_bn_mut(bn, &format!("{prefix}.bn"), f);
            }
            if let Some(p) = &mut b.proj {
                visit_conv_mut(p, &format!("{prefix}.proj"), f);
            }
        }
        for (k, h) in self.heads.iter_mut().enumerate() {
            let prefix = format!("decoder{}", k + 1);
            for (j, c) in h.convs.iter_mut().enumerate() {
                visit_conv_mut(c, &format!("{prefix}.conv{}", j + 1), f);
            }
            for (j, bn) in h.bns.iter_mut().enumerate() {
                if let Some(bn) = bn {
                    visit_bn_mut(bn, &format!("{prefix}.bn{}", j + 1), f);
                }
            }
        }
    }

    /// Batch-norm running statistics: persisted with checkpoints but never
    /// touched by the optimizer.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(bn) = &b.bn {
                visit_bn_buffers(bn, &format!("encoder.block{}.bn", i + 1), f);
            }
        }
        for (k, h) in self.heads.iter().enumerate() {
            for (j, bn) in h.bns.iter().enumerate() {
                if let Some(bn) = bn {
                    visit_bn_buffers(bn, &format!("decoder{}.bn{}", k + 1, j + 1), f);
                }
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(bn) = &mut b.bn {
                let prefix = format!("encoder.block{}.bn", i + 1);
                f(&format!("{prefix}.running_mean"), bn.running_mean.as_slice_mut().unwrap());
                f(&format!("{prefix}.running_var"), bn.running_var.as_slice_mut().unwrap());
            }
        }
        for (k, h) in self.heads.iter_mut().enumerate() {
            for (j, bn) in h.bns.iter_mut().enumerate() {
                if let Some(bn) = bn {
                    let prefix = format!("decoder{}.bn{}", k + 1, j + 1);
                    f(&format!("{prefix}.running_mean"), bn.running_mean.as_slice_mut().unwrap());
                    f(&format!("{prefix}.running_var"), bn.running_var.as_slice_mut().unwrap());
                }
            }
        }
    }
}

fn visit_conv<'a, T: Real>(
    c: &'a ConvLayer<T>,
    prefix: &str,
    f: &mut dyn FnMut(ParamView<'a, T>),
) {
    f(ParamView {
        name: format!("{prefix}.weight"),
        shape: vec![c.cout, c.cin, c.kh, c.kw],
        value: c.weight.as_slice().unwrap(),
    });
    if let Some(b) = &c.bias {
        f(ParamView {
            name: format!("{prefix}.bias"),
            shape: vec![c.cout],
            value: b.as_slice().unwrap(),
        });
    }
}

fn visit_conv_mut<T: Real>(c: &mut ConvLayer<T>, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
    f(ParamMut {
        name: format!("{prefix}.weight"),
        value: c.weight.as_slice_mut().unwrap(),
        grad: c.grad_weight.as_slice_mut().unwrap(),
    });
    if let (Some(b), Some(gb)) = (&mut c.bias, &mut c.grad_bias) {
        f(ParamMut {
            name: format!("{prefix}.bias"),
            value: b.as_slice_mut().unwrap(),
            grad: gb.as_slice_mut().unwrap(),
        });
    }
}

fn visit_bn<'a, T: Real>(
    bn: &'a BatchNorm<T>,
    prefix: &str,
    f: &mut dyn FnMut(ParamView<'a, T>),
) {
    f(ParamView {
        name: format!("{prefix}.gamma"),
        shape: vec![bn.gamma.len()],
        value: bn.gamma.as_slice().unwrap(),
    });
    if let Some(beta) = &bn.beta {
        f(ParamView {
            name: format!("{prefix}.beta"),
            shape: vec![beta.len()],
            value: beta.as_slice().unwrap(),
        });
    }
}

fn visit_bn_buffers<'a, T: Real>(
    bn: &'a BatchNorm<T>,
    prefix: &str,
    f: &mut dyn FnMut(ParamView<'a, T>),
) {
    f(ParamView {
        name: format!("{prefix}.running_mean"),
        shape: vec![bn.running_mean.len()],
        value: bn.running_mean.as_slice().unwrap(),
    });
    f(ParamView {
        name: format!("{prefix}.running_var"),
        shape: vec![bn.running_var.len()],
        value: bn.running_var.as_slice().unwrap(),
    });
}

fn visit_bn_mut<T: Real>(bn: &mut BatchNorm<T>, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
    f(ParamMut {
        name: format!("{prefix}.gamma"),
        value: bn.gamma.as_slice_mut().unwrap(),
        grad: bn.grad_gamma.as_slice_mut().unwrap(),
    });
    if let (Some(beta), Some(gbeta)) = (&mut bn.beta, &mut bn.grad_beta) {
        f(ParamMut {
            name: format!("{prefix}.beta"),
            value: beta.as_slice_mut().unwrap(),
            grad: gbeta.as_slice_mut().unwrap(),
        });
    }
}

/// Zeroes the columns marked invalid (padding frames/pixels).
pub fn zero_invalid_cols<T: Real>(x: &mut Array2<T>, valid: &[bool]) {
    debug_assert_eq!(x.ncols(), valid.len());
    if valid.iter().all(|&v| v) {
        return;
    }
    for mut row in x.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        for (v, &ok) in row.iter_mut().zip(valid) {
            if !ok {
                *v = T::zero();
            }
        }
    }
}

/// Repacks an encoder output `[1, batch * D * T]` into `[D, batch * T]` so
/// frequency bins become decoder channels. For `batch = 1` this is the
/// `D x T` latent itself.
pub fn latent_rows_to_matrix<T: Real>(z: &Array2<T>, d: usize, t: usize) -> Array2<T> {
    let batch = z.ncols() / (d * t);
    debug_assert_eq!(z.nrows(), 1);
    let zs = z.as_slice().unwrap();
    let mut out = Array2::<T>::zeros((d, batch * t));
    for b in 0..batch {
        for di in 0..d {
            let src = &zs[b * d * t + di * t..b * d * t + (di + 1) * t];
            out.as_slice_mut().unwrap()[di * batch * t + b * t..di * batch * t + (b + 1) * t]
                .copy_from_slice(src);
        }
    }
    out
}

/// Inverse repack for gradients: `[D, batch * T]` back to `[1, batch * D * T]`.
pub fn matrix_to_latent_rows<T: Real>(dz: &Array2<T>, d: usize, t: usize) -> Array2<T> {
    let batch = dz.ncols() / t;
    let ds = dz.as_slice().unwrap();
    let mut out = Array2::<T>::zeros((1, batch * d * t));
    let os = out.as_slice_mut().unwrap();
    for b in 0..batch {
        for di in 0..d {
            os[b * d * t + di * t..b * d * t + (di + 1) * t]
                .copy_from_slice(&ds[di * batch * t + b * t..di * batch * t + (b + 1) * t]);
        }
    }
    out
}

/// Zeroes latent rows `0..=lower_bins[t]` per column; `NO_LOWER_BIN` leaves
/// the column untouched.
pub fn mask_lower<T: Real>(z: &Array2<T>, lower_bins: &[i32]) -> Array2<T> {
    let mut out = z.clone();
    mask_lower_in_place(&mut out, lower_bins);
    out
}

pub fn mask_lower_in_place<T: Real>(z: &mut Array2<T>, lower_bins: &[i32]) {
    let (d, t) = z.dim();
    debug_assert_eq!(t, lower_bins.len());
    for (ti, &lb) in lower_bins.iter().enumerate() {
        if lb < 0 {
            continue;
        }
        let top = (lb as usize).min(d - 1);
        for di in 0..=top {
            z[(di, ti)] = T::zero();
        }
    }
}

/// Column-wise softmax restricted to the rows above each column's lower bin.
/// Masked rows get probability zero. A column with no surviving rows
/// degenerates to all mass on the top bin.
pub fn masked_softmax_columns<T: Real>(logits: &Array2<T>, lower_bins: Option<&[i32]>) -> Array2<T> {
    let (d, t) = logits.dim();
    let mut out = Array2::<T>::zeros((d, t));
    for ti in 0..t {
        let start = match lower_bins {
            Some(lb) => (lb[ti] + 1).max(0) as usize,
            None => 0,
        };
        if start >= d {
            out[(d - 1, ti)] = T::one();
            continue;
        }
        let mut max = logits[(start, ti)];
        for di in start + 1..d {
            if logits[(di, ti)] > max {
                max = logits[(di, ti)];
            }
        }
        let mut sum = T::zero();
        for di in start..d {
            let e = (logits[(di, ti)] - max).exp();
            out[(di, ti)] = e;
            sum += e;
        }
        for di in start..d {
            out[(di, ti)] = out[(di, ti)] / sum;
        }
    }
    out
}

/// Per-column argmax with ties broken toward the lowest bin.
pub fn argmax_columns<T: Real>(map: &Array2<T>) -> Vec<usize> {
    let (d, t) = map.dim();
    (0..t)
        .map(|ti| {
            let mut best = 0;
            let mut best_v = map[(0, ti)];
            for di in 1..d {
                if map[(di, ti)] > best_v {
                    best_v = map[(di, ti)];
                    best = di;
                }
            }
            best
        })
        .collect()
}
