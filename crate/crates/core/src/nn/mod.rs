//! The fixed-architecture convolutional network fusing the packed feature
//! patch into a salient / non-salient probability pair.
//!
//! Layer chain (valid convolutions, stride 1):
//! 32x32x6 -> conv(6,5) sig -> pool(mean,2) -> conv(12,5) sig -> pool(mean,2)
//! -> conv(24,3) sig -> fc(200) relu dropout -> fc(2) softmax,
//! i.e. spatial sizes 32 -> 28 -> 14 -> 10 -> 5 -> 3 -> 216 -> 200 -> 2.
//!
//! Parameters are stored as f32 (the on-disk format), every computation runs
//! in f64; gradient checking against central finite differences needs the
//! extra precision.

mod augment;
mod io;
mod train;

pub use augment::{augment, crop, flip_horizontal, jitter_rgb};
pub use io::{load_model, save_model};
pub use train::{
    learning_rate, sgd_step, train_on_patches, write_loss_log, EpochStats, TrainConfig, Velocity,
};

pub(crate) use train::accumulate_sample as train_accumulate_sample;
pub(crate) use train::dropout_rng as train_dropout_rng;
pub(crate) use train::fnv1a as hash_bytes;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeaturePatch, PATCH_CHANNELS, PATCH_LEN, PATCH_SIDE};

pub const INPUT_SIDE: usize = PATCH_SIDE; // 32
pub const INPUT_CHANNELS: usize = PATCH_CHANNELS; // 6
pub const CONV1_FILTERS: usize = 6;
pub const CONV1_KERNEL: usize = 5;
pub const CONV2_FILTERS: usize = 12;
pub const CONV2_KERNEL: usize = 5;
pub const CONV3_FILTERS: usize = 24;
pub const CONV3_KERNEL: usize = 3;
pub const FC4_UNITS: usize = 200;
pub const FC4_INPUT: usize = 216; // 3*3*24
pub const CLASSES: usize = 2;

/// Index 0 of every 2-vector is the salient class, index 1 non-salient.
pub const CLASS_SALIENT: usize = 0;
pub const CLASS_NON_SALIENT: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    /// `[out_c][in_c][ky][kx]` row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub out: usize,
    pub inp: usize,
    /// `[out][inp]` row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub fc4: DenseLayer,
    pub fc5: DenseLayer,
}

/// Per-unit dropout multipliers for the fc4 output: 0 for dropped units,
/// 1/keep for survivors. Inference uses no mask.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub factors: Vec<f64>,
}

impl DropoutMask {
    pub fn sample<R: Rng>(rng: &mut R, keep: f64) -> Self {
        assert!(keep > 0.0 && keep <= 1.0);
        let factors = (0..FC4_UNITS)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        DropoutMask { factors }
    }

    fn ones() -> Self {
        DropoutMask {
            factors: vec![1.0; FC4_UNITS],
        }
    }
}

/// All intermediate activations of one forward pass, kept for backprop.
pub struct ForwardCache {
    input: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    a3: Vec<f64>,
    a4: Vec<f64>,
    a4_dropped: Vec<f64>,
    drop: Vec<f64>,
    pub probs: [f64; 2],
}

impl ForwardCache {
    /// Post-ReLU fc4 activations (before dropout).
    pub fn fc4_activations(&self) -> &[f64] {
        &self.a4
    }

    /// Observed layer output sizes along the forward chain: the spatial
    /// sides after conv1, pool1, conv2, pool2, conv3, then the flattened,
    /// hidden and class counts.
    pub fn shape_chain(&self) -> [usize; 8] {
        let side = |len: usize, ch: usize| (len / ch).isqrt();
        [
            side(self.a1.len(), CONV1_FILTERS),
            side(self.p1.len(), CONV1_FILTERS),
            side(self.a2.len(), CONV2_FILTERS),
            side(self.p2.len(), CONV2_FILTERS),
            side(self.a3.len(), CONV3_FILTERS),
            self.a3.len(),
            self.a4.len(),
            self.probs.len(),
        ]
    }
}

/// Gradients (or momentum state) with the same shapes as the parameters,
/// accumulated in f64.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub conv3_w: Vec<f64>,
    pub conv3_b: Vec<f64>,
    pub fc4_w: Vec<f64>,
    pub fc4_b: Vec<f64>,
    pub fc5_w: Vec<f64>,
    pub fc5_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros() -> Self {
        Gradients {
            conv1_w: vec![0.0; CONV1_FILTERS * INPUT_CHANNELS * CONV1_KERNEL * CONV1_KERNEL],
            conv1_b: vec![0.0; CONV1_FILTERS],
            conv2_w: vec![0.0; CONV2_FILTERS * CONV1_FILTERS * CONV2_KERNEL * CONV2_KERNEL],
            conv2_b: vec![0.0; CONV2_FILTERS],
            conv3_w: vec![0.0; CONV3_FILTERS * CONV2_FILTERS * CONV3_KERNEL * CONV3_KERNEL],
            conv3_b: vec![0.0; CONV3_FILTERS],
            fc4_w: vec![0.0; FC4_UNITS * FC4_INPUT],
            fc4_b: vec![0.0; FC4_UNITS],
            fc5_w: vec![0.0; CLASSES * FC4_UNITS],
            fc5_b: vec![0.0; CLASSES],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 10] {
        [
            ("conv1.weight", &self.conv1_w),
            ("conv1.bias", &self.conv1_b),
            ("conv2.weight", &self.conv2_w),
            ("conv2.bias", &self.conv2_b),
            ("conv3.weight", &self.conv3_w),
            ("conv3.bias", &self.conv3_b),
            ("fc4.weight", &self.fc4_w),
            ("fc4.bias", &self.fc4_b),
            ("fc5.weight", &self.fc5_w),
            ("fc5.bias", &self.fc5_b),
        ]
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.fc4_w,
            &mut self.fc4_b,
            &mut self.fc5_w,
            &mut self.fc5_b,
        ]
        .into_iter()
    }

    /// `self += other * factor`
    pub fn accumulate(&mut self, other: &Gradients, factor: f64) {
        for (dst, src) in self.iter_mut().zip(
            [
                &other.conv1_w,
                &other.conv1_b,
                &other.conv2_w,
                &other.conv2_b,
                &other.conv3_w,
                &other.conv3_b,
                &other.fc4_w,
                &other.fc4_b,
                &other.fc5_w,
                &other.fc5_b,
            ],
        ) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s * factor;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.iter_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Deterministic Glorot-uniform initialization; biases start at zero.
pub fn init_weights(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |out_c: usize, in_c: usize, k: usize| {
        let bound = glorot_bound(in_c * k * k, out_c * k * k);
        ConvLayer {
            out_c,
            in_c,
            k,
            weight: (0..out_c * in_c * k * k)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect(),
            bias: vec![0.0; out_c],
        }
    };
    let conv1 = conv(CONV1_FILTERS, INPUT_CHANNELS, CONV1_KERNEL);
    let conv2 = conv(CONV2_FILTERS, CONV1_FILTERS, CONV2_KERNEL);
    let conv3 = conv(CONV3_FILTERS, CONV2_FILTERS, CONV3_KERNEL);
    let mut dense = |out: usize, inp: usize| {
        let bound = glorot_bound(inp, out);
        DenseLayer {
            out,
            inp,
            weight: (0..out * inp)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect(),
            bias: vec![0.0; out],
        }
    };
    let fc4 = dense(FC4_UNITS, FC4_INPUT);
    let fc5 = dense(CLASSES, FC4_UNITS);
    Network {
        conv1,
        conv2,
        conv3,
        fc4,
        fc5,
    }
}

fn promote(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

fn sigmoid_inplace(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Valid convolution, stride 1, channel-planar buffers. The inner loop runs
/// along output rows so it vectorizes.
fn conv_forward(
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    in_c: usize,
    k: usize,
    input: &[f64],
    side: usize,
) -> Vec<f64> {
    let os = side - k + 1;
    let mut out = vec![0.0f64; out_c * os * os];
    for oc in 0..out_c {
        let out_plane = &mut out[oc * os * os..(oc + 1) * os * os];
        out_plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..in_c {
            let w_base = (oc * in_c + ic) * k * k;
            let in_plane = &input[ic * side * side..(ic + 1) * side * side];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weight[w_base + ky * k + kx];
                    for oy in 0..os {
                        let in_row = &in_plane[(oy + ky) * side + kx..][..os];
                        let out_row = &mut out_plane[oy * os..][..os];
                        for (o, i) in out_row.iter_mut().zip(in_row) {
                            *o += w * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 mean pooling with stride 2 (sides here are always even).
fn mean_pool(input: &[f64], channels: usize, side: usize) -> Vec<f64> {
    let os = side / 2;
    let mut out = vec![0.0f64; channels * os * os];
    for c in 0..channels {
        let ip = &input[c * side * side..(c + 1) * side * side];
        let op = &mut out[c * os * os..(c + 1) * os * os];
        for y in 0..os {
            for x in 0..os {
                let i = 2 * y * side + 2 * x;
                op[y * os + x] = 0.25 * (ip[i] + ip[i + 1] + ip[i + side] + ip[i + side + 1]);
            }
        }
    }
    out
}

fn mean_pool_backward(dout: &[f64], channels: usize, out_side: usize) -> Vec<f64> {
    let side = out_side * 2;
    let mut din = vec![0.0f64; channels * side * side];
    for c in 0..channels {
        let dp = &dout[c * out_side * out_side..(c + 1) * out_side * out_side];
        let di = &mut din[c * side * side..(c + 1) * side * side];
        for y in 0..out_side {
            for x in 0..out_side {
                let g = 0.25 * dp[y * out_side + x];
                let i = 2 * y * side + 2 * x;
                di[i] = g;
                di[i + 1] = g;
                di[i + side] = g;
                di[i + side + 1] = g;
            }
        }
    }
    din
}

fn dense_forward(weight: &[f64], bias: &[f64], out: usize, inp: usize, input: &[f64]) -> Vec<f64> {
    let mut result = Vec::with_capacity(out);
    for o in 0..out {
        let row = &weight[o * inp..(o + 1) * inp];
        let sum: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
        result.push(sum + bias[o]);
    }
    result
}

fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

/// Cross-entropy of the predicted distribution against the true class.
pub fn cross_entropy(probs: &[f64; 2], salient: bool) -> f64 {
    let p = if salient {
        probs[CLASS_SALIENT]
    } else {
        probs[CLASS_NON_SALIENT]
    };
    -p.max(1e-12).ln()
}

impl Network {
    fn check_input(data: &[f32]) -> Result<()> {
        if data.len() != PATCH_LEN {
            return Err(Error::Shape(format!(
                "patch has {} values, expected {PATCH_LEN}",
                data.len()
            )));
        }
        Ok(())
    }

    /// Inference forward pass: deterministic, dropout disabled.
    pub fn forward(&self, patch: &FeaturePatch) -> Result<[f64; 2]> {
        Ok(self.forward_cached(&patch.data, None)?.probs)
    }

    /// Forward pass keeping activations. `mask` enables train-mode dropout.
    pub fn forward_cached(&self, data: &[f32], mask: Option<&DropoutMask>) -> Result<ForwardCache> {
        Self::check_input(data)?;
        let input = data.iter().map(|&v| v as f64).collect::<Vec<f64>>();

        let mut a1 = conv_forward(
            &promote(&self.conv1.weight),
            &promote(&self.conv1.bias),
            CONV1_FILTERS,
            INPUT_CHANNELS,
            CONV1_KERNEL,
            &input,
            INPUT_SIDE,
        );
        sigmoid_inplace(&mut a1); // 6 x 28 x 28
        let p1 = mean_pool(&a1, CONV1_FILTERS, 28); // 6 x 14 x 14

        let mut a2 = conv_forward(
            &promote(&self.conv2.weight),
            &promote(&self.conv2.bias),
            CONV2_FILTERS,
            CONV1_FILTERS,
            CONV2_KERNEL,
            &p1,
            14,
        );
        sigmoid_inplace(&mut a2); // 12 x 10 x 10
        let p2 = mean_pool(&a2, CONV2_FILTERS, 10); // 12 x 5 x 5

        let mut a3 = conv_forward(
            &promote(&self.conv3.weight),
            &promote(&self.conv3.bias),
            CONV3_FILTERS,
            CONV2_FILTERS,
            CONV3_KERNEL,
            &p2,
            5,
        );
        sigmoid_inplace(&mut a3); // 24 x 3 x 3 = 216

        let mut a4 = dense_forward(
            &promote(&self.fc4.weight),
            &promote(&self.fc4.bias),
            FC4_UNITS,
            FC4_INPUT,
            &a3,
        );
        a4.iter_mut().for_each(|v| *v = v.max(0.0)); // ReLU

        let drop = match mask {
            Some(m) => {
                assert_eq!(m.factors.len(), FC4_UNITS);
                m.factors.clone()
            }
            None => DropoutMask::ones().factors,
        };
        let a4_dropped: Vec<f64> = a4.iter().zip(&drop).map(|(a, d)| a * d).collect();

        let logits = dense_forward(
            &promote(&self.fc5.weight),
            &promote(&self.fc5.bias),
            CLASSES,
            FC4_UNITS,
            &a4_dropped,
        );
        let probs = softmax2(&logits);

        Ok(ForwardCache {
            input,
            a1,
            p1,
            a2,
            p2,
            a3,
            a4,
            a4_dropped,
            drop,
            probs,
        })
    }

    /// Exact gradients of the cross-entropy loss for the cached forward
    /// pass; the dropout mask used forward is reused.
    pub fn backward(&self, cache: &ForwardCache, salient: bool) -> Gradients {
        let mut g = Gradients::zeros();

        // softmax + cross-entropy
        let mut delta5 = [cache.probs[0], cache.probs[1]];
        delta5[if salient { CLASS_SALIENT } else { CLASS_NON_SALIENT }] -= 1.0;

        // fc5
        let mut d_a4_dropped = vec![0.0f64; FC4_UNITS];
        for o in 0..CLASSES {
            g.fc5_b[o] = delta5[o];
            let row = &self.fc5.weight[o * FC4_UNITS..(o + 1) * FC4_UNITS];
            for i in 0..FC4_UNITS {
                g.fc5_w[o * FC4_UNITS + i] = delta5[o] * cache.a4_dropped[i];
                d_a4_dropped[i] += delta5[o] * row[i] as f64;
            }
        }

        // dropout, then ReLU
        let mut d_z4 = vec![0.0f64; FC4_UNITS];
        for i in 0..FC4_UNITS {
            let d_a4 = d_a4_dropped[i] * cache.drop[i];
            d_z4[i] = if cache.a4[i] > 0.0 { d_a4 } else { 0.0 };
        }

        // fc4
        let mut d_a3 = vec![0.0f64; FC4_INPUT];
        for o in 0..FC4_UNITS {
            g.fc4_b[o] = d_z4[o];
            if d_z4[o] == 0.0 {
                continue;
            }
            let row = &self.fc4.weight[o * FC4_INPUT..(o + 1) * FC4_INPUT];
            for i in 0..FC4_INPUT {
                g.fc4_w[o * FC4_INPUT + i] = d_z4[o] * cache.a3[i];
                d_a3[i] += d_z4[o] * row[i] as f64;
            }
        }

        // sigmoid 3
        let d_z3: Vec<f64> = d_a3
            .iter()
            .zip(&cache.a3)
            .map(|(d, a)| d * a * (1.0 - a))
            .collect();
        let d_p2 = conv_backward(
            &promote(&self.conv3.weight),
            CONV3_FILTERS,
            CONV2_FILTERS,
            CONV3_KERNEL,
            &cache.p2,
            5,
            &d_z3,
            &mut g.conv3_w,
            &mut g.conv3_b,
            true,
        );

        // pool 2, sigmoid 2
        let d_a2 = mean_pool_backward(&d_p2, CONV2_FILTERS, 5);
        let d_z2: Vec<f64> = d_a2
            .iter()
            .zip(&cache.a2)
            .map(|(d, a)| d * a * (1.0 - a))
            .collect();
        let d_p1 = conv_backward(
            &promote(&self.conv2.weight),
            CONV2_FILTERS,
            CONV1_FILTERS,
            CONV2_KERNEL,
            &cache.p1,
            14,
            &d_z2,
            &mut g.conv2_w,
            &mut g.conv2_b,
            true,
        );

        // pool 1, sigmoid 1
        let d_a1 = mean_pool_backward(&d_p1, CONV1_FILTERS, 14);
        let d_z1: Vec<f64> = d_a1
            .iter()
            .zip(&cache.a1)
            .map(|(d, a)| d * a * (1.0 - a))
            .collect();
        conv_backward(
            &promote(&self.conv1.weight),
            CONV1_FILTERS,
            INPUT_CHANNELS,
            CONV1_KERNEL,
            &cache.input,
            INPUT_SIDE,
            &d_z1,
            &mut g.conv1_w,
            &mut g.conv1_b,
            false,
        );

        g
    }

    pub fn tensors(&self) -> [(&'static str, Vec<usize>, &[f32]); 10] {
        [
            (
                "conv1.weight",
                vec![CONV1_FILTERS, INPUT_CHANNELS, CONV1_KERNEL, CONV1_KERNEL],
                &self.conv1.weight[..],
            ),
            ("conv1.bias", vec![CONV1_FILTERS], &self.conv1.bias[..]),
            (
                "conv2.weight",
                vec![CONV2_FILTERS, CONV1_FILTERS, CONV2_KERNEL, CONV2_KERNEL],
                &self.conv2.weight[..],
            ),
            ("conv2.bias", vec![CONV2_FILTERS], &self.conv2.bias[..]),
            (
                "conv3.weight",
                vec![CONV3_FILTERS, CONV2_FILTERS, CONV3_KERNEL, CONV3_KERNEL],
                &self.conv3.weight[..],
            ),
            ("conv3.bias", vec![CONV3_FILTERS], &self.conv3.bias[..]),
            ("fc4.weight", vec![FC4_UNITS, FC4_INPUT], &self.fc4.weight[..]),
            ("fc4.bias", vec![FC4_UNITS], &self.fc4.bias[..]),
            ("fc5.weight", vec![CLASSES, FC4_UNITS], &self.fc5.weight[..]),
            ("fc5.bias", vec![CLASSES], &self.fc5.bias[..]),
        ]
    }

    fn params_mut(&mut self) -> [&mut Vec<f32>; 10] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.fc4.weight,
            &mut self.fc4.bias,
            &mut self.fc5.weight,
            &mut self.fc5.bias,
        ]
    }
}

/// Gradient of a valid convolution: fills `gw`/`gb` and returns the input
/// gradient when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    weight: &[f64],
    out_c: usize,
    in_c: usize,
    k: usize,
    input: &[f64],
    side: usize,
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let os = side - k + 1;
    let mut din = vec![0.0f64; if need_input_grad { in_c * side * side } else { 0 }];
    for oc in 0..out_c {
        let dp = &dout[oc * os * os..(oc + 1) * os * os];
        gb[oc] += dp.iter().sum::<f64>();
        for ic in 0..in_c {
            let w_base = (oc * in_c + ic) * k * k;
            let ip = &input[ic * side * side..(ic + 1) * side * side];
            for ky in 0..k {
                for kx in 0..k {
                    let mut s = 0.0;
                    for oy in 0..os {
                        let g_row = &dp[oy * os..][..os];
                        let in_row = &ip[(oy + ky) * side + kx..][..os];
                        s += g_row
                            .iter()
                            .zip(in_row)
                            .map(|(g, i)| g * i)
                            .sum::<f64>();
                    }
                    gw[w_base + ky * k + kx] += s;
                }
            }
            if need_input_grad {
                let dip = &mut din[ic * side * side..(ic + 1) * side * side];
                for ky in 0..k {
                    for kx in 0..k {
                        let w = weight[w_base + ky * k + kx];
                        for oy in 0..os {
                            let g_row = &dp[oy * os..][..os];
                            let d_row = &mut dip[(oy + ky) * side + kx..][..os];
                            for (d, g) in d_row.iter_mut().zip(g_row) {
                                *d += w * g;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::PATCH_LEN;

    fn random_patch(seed: u64) -> FeaturePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeaturePatch {
            region: 0,
            data: (0..PATCH_LEN).map(|_| rng.gen::<f32>()).collect(),
            label: None,
        }
    }

    fn zero_network() -> Network {
        let mut net = init_weights(0);
        for t in net.params_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        net
    }

    #[test]
    fn zero_network_outputs_half_half() {
        let net = zero_network();
        let probs = net.forward(&random_patch(1)).unwrap();
        assert_eq!(probs, [0.5, 0.5]);
    }

    #[test]
    fn inference_is_deterministic() {
        let net = init_weights(42);
        let patch = random_patch(7);
        let a = net.forward(&patch).unwrap();
        let b = net.forward(&patch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let net = init_weights(3);
        for seed in 0..20 {
            let probs = net.forward(&random_patch(seed)).unwrap();
            assert!((probs[0] + probs[1] - 1.0).abs() < 1e-9);
            assert!(probs[0] > 0.0 && probs[1] > 0.0);
        }
    }

    #[test]
    fn shape_chain_is_exact() {
        let net = init_weights(5);
        let cache = net.forward_cached(&random_patch(9).data, None).unwrap();
        assert_eq!(cache.input.len(), 6 * 32 * 32);
        assert_eq!(cache.a1.len(), 6 * 28 * 28);
        assert_eq!(cache.p1.len(), 6 * 14 * 14);
        assert_eq!(cache.a2.len(), 12 * 10 * 10);
        assert_eq!(cache.p2.len(), 12 * 5 * 5);
        assert_eq!(cache.a3.len(), 216);
        assert_eq!(cache.a4.len(), 200);
        assert_eq!(cache.probs.len(), 2);
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let net = init_weights(5);
        let err = net.forward_cached(&vec![0.0f32; 100], None);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn mean_pooling_preserves_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input: Vec<f64> = (0..6 * 28 * 28).map(|_| rng.gen::<f64>()).collect();
        let pooled = mean_pool(&input, 6, 28);
        let mean_in: f64 = input.iter().sum::<f64>() / input.len() as f64;
        let mean_out: f64 = pooled.iter().sum::<f64>() / pooled.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-9);
    }

    #[test]
    fn loss_values() {
        assert_eq!(cross_entropy(&[1.0, 0.0], true), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], true) - std::f64::consts::LN_2).abs() < 1e-12);
        let p = [0.73, 0.27];
        assert!((cross_entropy(&p, false) - (-(0.27f64).ln())).abs() < 1e-12);
        // clamp keeps the loss finite
        assert!(cross_entropy(&[0.0, 1.0], true).is_finite());
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = init_weights(1234);
        let b = init_weights(1234);
        assert_eq!(a, b);
        let c = init_weights(1235);
        assert_ne!(a, c);
        // conv1: fan_in = fan_out = 150 -> bound sqrt(6/300)
        let bound = (6.0f64 / 300.0).sqrt() as f32;
        assert!((bound - 0.1414).abs() < 1e-3);
        assert!(a.conv1.weight.iter().all(|w| w.abs() < bound));
        assert!(a.conv1.bias.iter().all(|&b| b == 0.0));
    }

    /// Straight-loop reference forward written independently of the
    /// implementation above: nested Vec tensors, pixel-at-a-time indexing.
    mod reference {
        pub fn conv(
            input: &[Vec<Vec<f64>>],
            weight: &[f32],
            bias: &[f32],
            in_c: usize,
            out_c: usize,
            k: usize,
        ) -> Vec<Vec<Vec<f64>>> {
            let side = input[0].len();
            let os = side - k + 1;
            let mut out = vec![vec![vec![0.0f64; os]; os]; out_c];
            for oc in 0..out_c {
                for y in 0..os {
                    for x in 0..os {
                        let mut s = bias[oc] as f64;
                        for ic in 0..in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let w =
                                        weight[((oc * in_c + ic) * k + ky) * k + kx] as f64;
                                    s += w * input[ic][y + ky][x + kx];
                                }
                            }
                        }
                        out[oc][y][x] = s;
                    }
                }
            }
            out
        }

        pub fn sigmoid(t: &mut [Vec<Vec<f64>>]) {
            for p in t.iter_mut() {
                for r in p.iter_mut() {
                    for v in r.iter_mut() {
                        *v = 1.0 / (1.0 + (-*v).exp());
                    }
                }
            }
        }

        pub fn pool(input: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
            let c = input.len();
            let os = input[0].len() / 2;
            let mut out = vec![vec![vec![0.0f64; os]; os]; c];
            for ch in 0..c {
                for y in 0..os {
                    for x in 0..os {
                        out[ch][y][x] = (input[ch][2 * y][2 * x]
                            + input[ch][2 * y][2 * x + 1]
                            + input[ch][2 * y + 1][2 * x]
                            + input[ch][2 * y + 1][2 * x + 1])
                            / 4.0;
                    }
                }
            }
            out
        }
    }

    #[test]
    fn forward_matches_straight_loop_reference() {
        let net = init_weights(77);
        let patch = random_patch(78);

        // reference pipeline on nested tensors
        let to_nested = |flat: &[f32], c: usize, side: usize| -> Vec<Vec<Vec<f64>>> {
            (0..c)
                .map(|ch| {
                    (0..side)
                        .map(|y| {
                            (0..side)
                                .map(|x| flat[(ch * side + y) * side + x] as f64)
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let input = to_nested(&patch.data, 6, 32);
        let mut a1 = reference::conv(&input, &net.conv1.weight, &net.conv1.bias, 6, 6, 5);
        reference::sigmoid(&mut a1);
        let p1 = reference::pool(&a1);
        let mut a2 = reference::conv(&p1, &net.conv2.weight, &net.conv2.bias, 6, 12, 5);
        reference::sigmoid(&mut a2);
        let p2 = reference::pool(&a2);
        let mut a3 = reference::conv(&p2, &net.conv3.weight, &net.conv3.bias, 12, 24, 3);
        reference::sigmoid(&mut a3);
        let mut flat = Vec::new();
        for p in &a3 {
            for r in p {
                flat.extend(r.iter().cloned());
            }
        }
        let mut a4 = vec![0.0f64; 200];
        for (o, a) in a4.iter_mut().enumerate() {
            let mut s = net.fc4.bias[o] as f64;
            for (i, f) in flat.iter().enumerate() {
                s += net.fc4.weight[o * 216 + i] as f64 * f;
            }
            *a = s.max(0.0);
        }
        let mut logits = [0.0f64; 2];
        for (o, l) in logits.iter_mut().enumerate() {
            let mut s = net.fc5.bias[o] as f64;
            for (i, a) in a4.iter().enumerate() {
                s += net.fc5.weight[o * 200 + i] as f64 * a;
            }
            *l = s;
        }
        let m = logits[0].max(logits[1]);
        let (e0, e1) = ((logits[0] - m).exp(), (logits[1] - m).exp());
        let expect = [e0 / (e0 + e1), e1 / (e0 + e1)];

        let got = net.forward(&patch).unwrap();
        assert!((got[0] - expect[0]).abs() < 1e-6);
        assert!((got[1] - expect[1]).abs() < 1e-6);
    }

    #[test]
    fn gradients_scale_linearly() {
        let net = init_weights(21);
        let patch = random_patch(22);
        let cache = net.forward_cached(&patch.data, None).unwrap();
        let g = net.backward(&cache, true);
        let mut doubled = Gradients::zeros();
        doubled.accumulate(&g, 2.0);
        for ((_, a), (_, b)) in g.tensors().iter().zip(doubled.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_input_zeroes_conv1_weight_gradients() {
        let net = init_weights(31);
        let patch = FeaturePatch {
            region: 0,
            data: vec![0.0; PATCH_LEN],
            label: None,
        };
        let cache = net.forward_cached(&patch.data, None).unwrap();
        let g = net.backward(&cache, true);
        assert!(
            g.conv1_w.iter().all(|&v| v == 0.0),
            "conv1 weight gradients touch only the zero input"
        );
    }

    #[test]
    fn gradient_check_sampled_parameters() {
        // Small spot check; the acceptance suite runs the full sweep.
        let net = init_weights(1001);
        let patch = random_patch(1002);
        let mut rng = ChaCha8Rng::seed_from_u64(1003);
        let mask = DropoutMask::sample(&mut rng, 0.5);
        let salient = true;

        let cache = net.forward_cached(&patch.data, Some(&mask)).unwrap();
        let analytic = net.backward(&cache, salient);

        let loss_of = |net: &Network| -> f64 {
            let c = net.forward_cached(&patch.data, Some(&mask)).unwrap();
            cross_entropy(&c.probs, salient)
        };

        let mut worst = 0.0f64;
        let mut probe = ChaCha8Rng::seed_from_u64(1004);
        for t in 0..10 {
            let len = net.tensors()[t].2.len();
            let grads = analytic.tensors()[t].1;
            for _ in 0..12 {
                let idx = probe.gen_range(0..len);
                let mut plus = net.clone();
                let mut minus = net.clone();
                let step = 1e-3f32;
                let (orig, eff) = {
                    let p = &mut plus.params_mut()[t][idx];
                    let orig = *p;
                    *p = orig + step;
                    let hi = *p as f64;
                    let m = &mut minus.params_mut()[t][idx];
                    *m = orig - step;
                    (orig, hi - *m as f64)
                };
                let _ = orig;
                let fd = (loss_of(&plus) - loss_of(&minus)) / eff;
                let an = grads[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                worst = worst.max((fd - an).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
