//! Class-conditional generator: learned per-class embedding added to a
//! Gaussian latent, followed by an upsampling conv trunk with a tanh
//! head. Output pixels live in [-1, 1] and are mapped into the
//! classifier's normalized input space with dataset constants.

use crate::error::{DfqError, Result};
use crate::nn::init::ParamInit;
use crate::nn::layers::BnMode;
use crate::nn::model::{
    BatchNorm, Block, Conv2d, Layer, Linear, ModelCache, ModelGraph, ParamView, StateView,
};
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Per-channel normalization constants of the dataset the generator
/// imitates (mean/std of pixels in [0, 1]).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorGraph<F: Scalar> {
    pub embedding: Array2<F>, // (num_classes, noise_dim)
    pub dembed: Array2<F>,
    pub trunk: ModelGraph<F>,
    pub noise_dim: usize,
    pub num_classes: usize,
}

/// Generator outputs for one synthetic batch.
#[derive(Debug, Clone)]
pub struct SyntheticBatch<F: Scalar> {
    /// Images in the classifier's normalized input space.
    pub images: ArrayD<F>,
    pub pseudo_labels: Vec<usize>,
    pub noise: Array2<F>,
    /// Filled by a teacher forward pass.
    pub teacher_logits: Option<ArrayD<F>>,
}

pub struct GenForwardCache<F: Scalar> {
    pub cache: ModelCache<F>,
    pub gen_out: ArrayD<F>,
}

pub const ARCH_TINY_GEN: &str = "tiny-gen";

pub fn build_generator<F: Scalar>(
    spec: &str,
    num_classes: usize,
    seed: u64,
) -> Result<GeneratorGraph<F>> {
    if spec != ARCH_TINY_GEN {
        return Err(DfqError::UnknownArchitecture(spec.to_string()));
    }
    let noise_dim = 64;
    let mut init = ParamInit::new(seed);
    let embedding = init
        .normal::<F>(&[num_classes, noise_dim], 1.0)
        .into_dimensionality::<Ix2>()
        .unwrap();
    let slope = F::from_real(0.2);
    let blocks = vec![
        Block::Plain(Layer::Linear(Linear::new(noise_dim, 32 * 8 * 8, &mut init))),
        Block::Plain(Layer::Reshape(vec![32, 8, 8])),
        Block::Plain(Layer::Bn(BatchNorm::new(32))),
        Block::Plain(Layer::Upsample(2)),
        Block::Plain(Layer::Conv(Conv2d::new(32, 16, 3, 1, 1, &mut init))),
        Block::Plain(Layer::Bn(BatchNorm::new(16))),
        Block::Plain(Layer::LeakyRelu(slope)),
        Block::Plain(Layer::Upsample(2)),
        Block::Plain(Layer::Conv(Conv2d::new(16, 8, 3, 1, 1, &mut init))),
        Block::Plain(Layer::Bn(BatchNorm::new(8))),
        Block::Plain(Layer::LeakyRelu(slope)),
        Block::Plain(Layer::Conv(Conv2d::new(8, 3, 3, 1, 1, &mut init))),
        Block::Plain(Layer::Tanh),
    ];
    let trunk = ModelGraph::new(blocks, num_classes, spec, vec![3, 32, 32]);
    Ok(GeneratorGraph {
        dembed: Array2::zeros((num_classes, noise_dim)),
        embedding,
        trunk,
        noise_dim,
        num_classes,
    })
}

impl<F: Scalar> GeneratorGraph<F> {
    pub fn from_parts(embedding: Array2<F>, trunk: ModelGraph<F>) -> Self {
        let (num_classes, noise_dim) = embedding.dim();
        GeneratorGraph {
            dembed: Array2::zeros((num_classes, noise_dim)),
            embedding,
            trunk,
            noise_dim,
            num_classes,
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        for &l in labels {
            if l >= self.num_classes {
                return Err(DfqError::LabelOutOfRange {
                    label: l,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    /// Forward: images in normalized input space. BN layers run on batch
    /// statistics; running stats are never consulted or updated.
    pub fn forward(
        &mut self,
        noise: &Array2<F>,
        labels: &[usize],
        norm: &Normalization,
    ) -> Result<(ArrayD<F>, GenForwardCache<F>)> {
        self.check_labels(labels)?;
        if noise.nrows() != labels.len() {
            return Err(DfqError::ShapeMismatch(
                "noise batch and label count differ".into(),
            ));
        }
        let mut z = noise.clone();
        for (i, &l) in labels.iter().enumerate() {
            let e = self.embedding.row(l);
            let mut row = z.row_mut(i);
            row += &e;
        }
        let (gen_out, cache) = self
            .trunk
            .forward_full(&z.clone().into_dyn(), BnMode::Train, false, None)?;
        let images = map_to_input_space(&gen_out, norm);
        Ok((
            images,
            GenForwardCache {
                cache,
                gen_out,
            },
        ))
    }

    /// Backward from a gradient in normalized-image space; accumulates
    /// trunk and embedding gradients.
    pub fn backward(
        &mut self,
        fwd: &GenForwardCache<F>,
        labels: &[usize],
        d_images: &ArrayD<F>,
        norm: &Normalization,
    ) {
        let d_gen = map_to_input_space_backward(d_images, norm);
        let dz = self.trunk.backward(&fwd.cache, &d_gen, None);
        let dz2 = dz.into_dimensionality::<Ix2>().unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let mut row = self.dembed.row_mut(l);
            row += &dz2.row(i);
        }
    }

    pub fn zero_grads(&mut self) {
        self.trunk.zero_grads();
        self.dembed.fill(F::zero());
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<F>)) {
        let shape = vec![self.num_classes, self.noise_dim];
        f(ParamView {
            name: "embedding".into(),
            value: self.embedding.as_slice_mut().unwrap(),
            grad: self.dembed.as_slice_mut().unwrap(),
            shape,
        });
        self.trunk.visit_params(f);
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(StateView<F>)) {
        self.trunk.visit_state(f);
    }

    /// Deterministic Gaussian latents for a batch.
    pub fn draw_noise(&self, batch: usize, noise_seed: u64) -> Array2<F> {
        let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
        let mut z = Array2::<F>::zeros((batch, self.noise_dim));
        for v in z.iter_mut() {
            let s: f64 = StandardNormal.sample(&mut rng);
            *v = F::from_real(s);
        }
        z
    }

    /// Produce a synthetic batch. Teacher logits are left unfilled.
    pub fn sample_synthetic(
        &mut self,
        labels: &[usize],
        noise_seed: u64,
        norm: &Normalization,
    ) -> Result<SyntheticBatch<F>> {
        let noise = self.draw_noise(labels.len(), noise_seed);
        let (images, _) = self.forward(&noise, labels, norm)?;
        Ok(SyntheticBatch {
            images,
            pseudo_labels: labels.to_vec(),
            noise,
            teacher_logits: None,
        })
    }

    pub fn content_hash(&mut self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p: ParamView<F>| {
            for v in p.value.iter() {
                hasher.update(v.to_real().to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }
}

/// tanh output in [-1, 1] -> pixels in [0, 1] -> dataset-normalized.
pub fn map_to_input_space<F: Scalar>(gen_out: &ArrayD<F>, norm: &Normalization) -> ArrayD<F> {
    let mut out = gen_out.clone();
    let v4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = v4.dim();
    let mut v4 = v4;
    for ci in 0..c {
        let mean = F::from_real(norm.mean[ci % 3]);
        let std = F::from_real(norm.std[ci % 3]);
        let half = F::from_real(0.5);
        for ni in 0..n {
            for yy in 0..h {
                for xx in 0..w {
                    let px = (v4[[ni, ci, yy, xx]] + F::one()) * half;
                    v4[[ni, ci, yy, xx]] = (px - mean) / std;
                }
            }
        }
    }
    out
}

pub fn map_to_input_space_backward<F: Scalar>(
    d_images: &ArrayD<F>,
    norm: &Normalization,
) -> ArrayD<F> {
    let mut out = d_images.clone();
    let mut v4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = v4.dim();
    for ci in 0..c {
        let scale = F::from_real(0.5 / norm.std[ci % 3]);
        for ni in 0..n {
            for yy in 0..h {
                for xx in 0..w {
                    v4[[ni, ci, yy, xx]] *= scale;
                }
            }
        }
    }
    out
}
