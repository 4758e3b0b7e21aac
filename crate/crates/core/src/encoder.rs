//! A small convolutional pixel-embedding network with hand-written forward
//! and backward passes.
//!
//! The stack is `conv3x3 + relu` blocks over the hidden channels followed by
//! a linear `1x1` projection to the embedding dimension. Same padding keeps
//! the spatial size, so every image pixel gets an embedding vector.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::activation::VisualEmbeddingMap;
use crate::image::Image;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("expected {expected} input channels, image has {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Channel plan of the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channels of the 3x3 relu blocks.
    pub hidden_channels: Vec<usize>,
    /// Output dimension of the final 1x1 projection; must equal the
    /// embedding-table dimension.
    pub dim: usize,
}

impl EncoderConfig {
    pub fn new(hidden_channels: Vec<usize>, dim: usize) -> Self {
        EncoderConfig {
            in_channels: 3,
            hidden_channels,
            dim,
        }
    }

    /// Channel counts per layer, input first.
    pub fn channels(&self) -> Vec<usize> {
        let mut channels = vec![self.in_channels];
        channels.extend(&self.hidden_channels);
        channels.push(self.dim);
        channels
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::new(vec![16, 32], 16)
    }
}

/// One convolution layer, weights stored `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weights = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        ConvLayer {
            in_channels,
            out_channels,
            kernel,
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }
}

/// All encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer>,
}

impl Encoder {
    /// Seeded init: uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = config.channels();
        let mut layers = Vec::with_capacity(channels.len() - 1);
        for w in channels.windows(2) {
            let kernel = if layers.len() == channels.len() - 2 { 1 } else { 3 };
            layers.push(ConvLayer::init(w[0], w[1], kernel, &mut rng));
        }
        Encoder { config, layers }
    }

    /// Names of the parameter tensors, in layer order; each layer
    /// contributes `convN.weight` and `convN.bias`.
    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("conv{i}.weight"), format!("conv{i}.bias")])
            .collect()
    }

    /// The name of the final projection layer's weight prefix (gets the
    /// scaled-up learning rate, like the textual path).
    pub fn head_prefix(&self) -> String {
        format!("conv{}", self.layers.len() - 1)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    width: usize,
    height: usize,
    /// Input of every layer (the image, then each post-relu map).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every layer.
    preacts: Vec<Vec<f64>>,
}

fn conv2d_same(
    input: &[f64],
    in_channels: usize,
    height: usize,
    width: usize,
    layer: &ConvLayer,
) -> Vec<f64> {
    let k = layer.kernel;
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; layer.out_channels * height * width];
    for o in 0..layer.out_channels {
        let out_plane = &mut out[o * height * width..(o + 1) * height * width];
        for v in out_plane.iter_mut() {
            *v = layer.bias[o];
        }
        for i in 0..in_channels {
            let in_plane = &input[i * height * width..(i + 1) * height * width];
            for ky in 0..k {
                for kx in 0..k {
                    let w = layer.weight(o, i, ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    // y + ky - pad in bounds
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (height + pad).saturating_sub(ky).min(height);
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (width + pad).saturating_sub(kx).min(width);
                    for y in y_lo..y_hi {
                        let sy = y + ky - pad;
                        let src = &in_plane[sy * width..(sy + 1) * width];
                        let dst = &mut out_plane[y * width..(y + 1) * width];
                        for x in x_lo..x_hi {
                            dst[x] += w * src[x + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs the encoder; returns the pixel embeddings and the cache the
/// backward pass needs.
pub fn forward(
    image: &Image,
    encoder: &Encoder,
) -> Result<(VisualEmbeddingMap, ForwardCache), EncoderError> {
    if image.channels != encoder.config.in_channels {
        return Err(EncoderError::ShapeMismatch {
            expected: encoder.config.in_channels,
            got: image.channels,
        });
    }
    let (width, height) = (image.width, image.height);
    let mut cache = ForwardCache {
        width,
        height,
        inputs: Vec::with_capacity(encoder.layers.len()),
        preacts: Vec::with_capacity(encoder.layers.len()),
    };
    let mut current = image.data.clone();
    let last = encoder.layers.len() - 1;
    for (idx, layer) in encoder.layers.iter().enumerate() {
        cache.inputs.push(current.clone());
        let preact = conv2d_same(&current, layer.in_channels, height, width, layer);
        cache.preacts.push(preact.clone());
        current = if idx == last {
            preact
        } else {
            preact.into_iter().map(|v| v.max(0.0)).collect()
        };
    }

    // transpose CHW to pixel-major
    let dim = encoder.config.dim;
    let mut evis = VisualEmbeddingMap::new(width, height, dim);
    for d in 0..dim {
        let plane = &current[d * height * width..(d + 1) * height * width];
        for (p, v) in plane.iter().enumerate() {
            evis.data[p * dim + d] = *v;
        }
    }
    Ok((evis, cache))
}

/// Per-layer parameter gradients, aligned with `Encoder::layers`.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backpropagates dLoss/dE_vis through the encoder.
pub fn backward(
    grad_evis: &VisualEmbeddingMap,
    encoder: &Encoder,
    cache: &ForwardCache,
) -> Vec<LayerGrads> {
    let (width, height) = (cache.width, cache.height);
    let plane = width * height;
    let dim = encoder.config.dim;

    // transpose pixel-major gradient to CHW
    let mut grad_out = vec![0.0; dim * plane];
    for p in 0..plane {
        for d in 0..dim {
            grad_out[d * plane + p] = grad_evis.data[p * dim + d];
        }
    }

    let mut grads: Vec<LayerGrads> = encoder
        .layers
        .iter()
        .map(|l| LayerGrads {
            weights: vec![0.0; l.weights.len()],
            bias: vec![0.0; l.bias.len()],
        })
        .collect();

    for idx in (0..encoder.layers.len()).rev() {
        let layer = &encoder.layers[idx];
        let input = &cache.inputs[idx];
        let k = layer.kernel;
        let pad = (k - 1) / 2;
        let grad = &mut grads[idx];

        let mut grad_in = vec![0.0; layer.in_channels * plane];
        for o in 0..layer.out_channels {
            let gout = &grad_out[o * plane..(o + 1) * plane];
            grad.bias[o] += gout.iter().sum::<f64>();
            for i in 0..layer.in_channels {
                let in_plane = &input[i * plane..(i + 1) * plane];
                let gin_plane = &mut grad_in[i * plane..(i + 1) * plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let w = layer.weight(o, i, ky, kx);
                        let widx = ((o * layer.in_channels + i) * k + ky) * k + kx;
                        let mut dw = 0.0;
                        let y_lo = pad.saturating_sub(ky);
                        let y_hi = (height + pad).saturating_sub(ky).min(height);
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (width + pad).saturating_sub(kx).min(width);
                        for y in y_lo..y_hi {
                            let sy = y + ky - pad;
                            let src = &in_plane[sy * width..(sy + 1) * width];
                            let g = &gout[y * width..(y + 1) * width];
                            let gin = &mut gin_plane[sy * width..(sy + 1) * width];
                            for x in x_lo..x_hi {
                                let sx = x + kx - pad;
                                dw += g[x] * src[sx];
                                gin[sx] += g[x] * w;
                            }
                        }
                        grad.weights[widx] += dw;
                    }
                }
            }
        }

        // through the relu of the previous block (the image itself has none)
        if idx > 0 {
            let preact = &cache.preacts[idx - 1];
            for (g, &a) in grad_in.iter_mut().zip(preact) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grad_out = grad_in;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_encoder(seed: u64) -> Encoder {
        Encoder::init(
            EncoderConfig {
                in_channels: 3,
                hidden_channels: vec![4],
                dim: 5,
            },
            seed,
        )
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_embedding() {
        let encoder = tiny_encoder(0);
        let image = Image::new(6, 4, 3);
        let (evis, _) = forward(&image, &encoder).unwrap();
        assert!(evis.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_contract() {
        let encoder = Encoder::init(EncoderConfig::new(vec![16, 32], 16), 1);
        let image = Image::new(8, 8, 3);
        let (evis, _) = forward(&image, &encoder).unwrap();
        assert_eq!(evis.pixels(), 64);
        assert_eq!(evis.dim, 16);
        assert_eq!(evis.data.len(), 64 * 16);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let encoder = tiny_encoder(0);
        let image = Image::new(4, 4, 1);
        assert!(matches!(
            forward(&image, &encoder),
            Err(EncoderError::ShapeMismatch {
                expected: 3,
                got: 1
            })
        ));
    }

    #[test]
    fn conv_stack_with_symmetric_kernels_is_flip_equivariant() {
        let mut encoder = tiny_encoder(3);
        // symmetrize kernels horizontally so the stack commutes with flips
        for layer in &mut encoder.layers {
            let k = layer.kernel;
            for o in 0..layer.out_channels {
                for i in 0..layer.in_channels {
                    for ky in 0..k {
                        for kx in 0..(k / 2) {
                            let a = ((o * layer.in_channels + i) * k + ky) * k + kx;
                            let b = ((o * layer.in_channels + i) * k + ky) * k + (k - 1 - kx);
                            let mean = 0.5 * (layer.weights[a] + layer.weights[b]);
                            layer.weights[a] = mean;
                            layer.weights[b] = mean;
                        }
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut image = Image::new(8, 8, 3);
        for v in &mut image.data {
            *v = rng.gen_range(0.0..1.0);
        }
        let (evis, _) = forward(&image, &encoder).unwrap();
        let (evis_f, _) = forward(&image.flip_horizontal(), &encoder).unwrap();
        let flipped = evis.flip_horizontal();
        for (a, b) in flipped.data.iter().zip(&evis_f.data) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_pixel_net_matches_chain_rule() {
        // one pixel, 1x1 kernels: the net is w2 * relu(w1 * x + b1) + b2
        let mut encoder = Encoder::init(
            EncoderConfig {
                in_channels: 1,
                hidden_channels: vec![1],
                dim: 1,
            },
            0,
        );
        encoder.layers[0].kernel = 1;
        encoder.layers[0].weights = vec![0.8];
        encoder.layers[0].bias = vec![0.1];
        encoder.layers[1].weights = vec![-1.5];
        encoder.layers[1].bias = vec![0.2];
        let mut image = Image::new(1, 1, 1);
        image.data = vec![0.6];

        let (evis, cache) = forward(&image, &encoder).unwrap();
        let hidden = 0.8 * 0.6 + 0.1;
        assert_relative_eq!(evis.data[0], -1.5 * hidden + 0.2, max_relative = 1e-12);

        let mut grad_evis = VisualEmbeddingMap::new(1, 1, 1);
        grad_evis.data[0] = 1.0;
        let grads = backward(&grad_evis, &encoder, &cache);
        // d out / d w2 = relu(w1 x + b1); d out / d b2 = 1
        assert_relative_eq!(grads[1].weights[0], hidden, max_relative = 1e-12);
        assert_relative_eq!(grads[1].bias[0], 1.0, max_relative = 1e-12);
        // d out / d w1 = w2 * x; d out / d b1 = w2
        assert_relative_eq!(grads[0].weights[0], -1.5 * 0.6, max_relative = 1e-12);
        assert_relative_eq!(grads[0].bias[0], -1.5, max_relative = 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let encoder = tiny_encoder(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut image = Image::new(5, 3, 3);
        for v in &mut image.data {
            *v = rng.gen_range(0.0..1.0);
        }
        let (evis, cache) = forward(&image, &encoder).unwrap();
        let grad_evis = VisualEmbeddingMap::new(5, 3, evis.dim);
        let grads = backward(&grad_evis, &encoder, &cache);
        for g in &grads {
            assert!(g.weights.iter().all(|&v| v == 0.0));
            assert!(g.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut encoder = tiny_encoder(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut image = Image::new(4, 4, 3);
        for v in &mut image.data {
            *v = rng.gen_range(0.0..1.0);
        }
        // fixed linear loss over the embedding map
        let weights: Vec<f64> = (0..16 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |enc: &Encoder| -> f64 {
            let (evis, _) = forward(&image, enc).unwrap();
            evis.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (evis, cache) = forward(&image, &encoder).unwrap();
        let mut grad_evis = VisualEmbeddingMap::new(4, 4, 5);
        grad_evis.data.copy_from_slice(&weights);
        let _ = evis;
        let grads = backward(&grad_evis, &encoder, &cache);

        let h = 1e-6;
        for l in 0..encoder.layers.len() {
            for w in 0..encoder.layers[l].weights.len() {
                let orig = encoder.layers[l].weights[w];
                encoder.layers[l].weights[w] = orig + h;
                let up = loss(&encoder);
                encoder.layers[l].weights[w] = orig - h;
                let down = loss(&encoder);
                encoder.layers[l].weights[w] = orig;
                let fd = (up - down) / (2.0 * h);
                assert_relative_eq!(grads[l].weights[w], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
            for b in 0..encoder.layers[l].bias.len() {
                let orig = encoder.layers[l].bias[b];
                encoder.layers[l].bias[b] = orig + h;
                let up = loss(&encoder);
                encoder.layers[l].bias[b] = orig - h;
                let down = loss(&encoder);
                encoder.layers[l].bias[b] = orig;
                let fd = (up - down) / (2.0 * h);
                assert_relative_eq!(grads[l].bias[b], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }
}
