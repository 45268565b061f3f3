//! Multi-modal feature extractor: an image encoder and a text encoder
//! trained so that matching image/caption pairs land on the same point of a
//! shared `d`-dimensional space. The difference `z = F_image - F_text` is the
//! input of the feature-based attack.
//!
//! The text encoder is a three-layer perceptron over a multi-hot
//! bag-of-words vector, so word order is ignored.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::captioner::TrainConfig;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, ConvEncoder, EncoderCache, Init, Linear, Params, ParamsBuilder};
use crate::optim::check_divergence;
use crate::seed;
use crate::synthdata::{ImageTensor, ImageTextPair, CHANNELS, IMAGE_SIZE};
use crate::textsim::TokenSeq;
use crate::vocab::Vocab;

const KIND: &str = "mfe";
pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Layer sizes of an extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfeShape {
    /// `(channels, height, width)` of input images.
    pub image: (usize, usize, usize),
    pub conv_channels: Vec<usize>,
    pub text_hidden: usize,
    pub feature_dim: usize,
}

impl Default for MfeShape {
    fn default() -> Self {
        MfeShape {
            image: (CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
            conv_channels: vec![8, 8, 16, 16],
            text_hidden: 64,
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Net {
    image: ConvEncoder,
    text: [Linear; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfeModel {
    pub shape: MfeShape,
    pub vocab: Vocab,
    pub params: Params,
    net: Net,
}

/// The difference vector between image and text features.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalFeature(pub Vec<f64>);

impl MultiModalFeature {
    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }
}

pub fn build_mfe(vocab: Vocab, shape: MfeShape, seed: u64) -> Result<MfeModel> {
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("vocabulary has no words".into()));
    }
    if shape.conv_channels.is_empty() || shape.feature_dim == 0 || shape.text_hidden == 0 {
        return Err(Error::InvalidArgument(format!("degenerate extractor shape {shape:?}")));
    }
    let mut rng = seed::rng(seed, "mfe-init");
    let mut b = ParamsBuilder::new(&mut rng);
    let d = shape.feature_dim;
    let h = shape.text_hidden;
    let image = ConvEncoder::alloc(&mut b, "image", shape.image, &shape.conv_channels, false, d);
    let v = vocab.len();
    let text = [
        Linear::alloc(&mut b, "text.l1", v, h, Init::he(v)),
        Linear::alloc(&mut b, "text.l2", h, h, Init::he(h)),
        Linear::alloc(&mut b, "text.l3", h, d, Init::lecun(h)),
    ];
    Ok(MfeModel {
        shape,
        vocab,
        params: b.finish(),
        net: Net { image, text },
    })
}

#[derive(Default)]
struct TextCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl MfeModel {
    pub fn feature_dim(&self) -> usize {
        self.shape.feature_dim
    }

    /// Multi-hot presence vector over the vocabulary; unknown words share
    /// the `<unk>` slot.
    pub fn multi_hot(&self, tokens: &TokenSeq) -> Vec<f64> {
        let mut x = vec![0.0; self.vocab.len()];
        for w in tokens.tokens() {
            x[self.vocab.id(w)] = 1.0;
        }
        x
    }

    fn image_forward(&self, p: &[f64], image: &[f64], cache: &mut EncoderCache) -> Vec<f64> {
        let mut f = vec![0.0; self.feature_dim()];
        self.net.image.forward(p, image, cache, &mut f);
        f
    }

    fn text_forward(&self, p: &[f64], input: &[f64], cache: &mut TextCache) -> Vec<f64> {
        let [l1, l2, l3] = &self.net.text;
        let mut h1 = vec![0.0; l1.n_out];
        l1.forward(p, input, &mut h1);
        relu_inplace(&mut h1);
        let mut h2 = vec![0.0; l2.n_out];
        l2.forward(p, &h1, &mut h2);
        relu_inplace(&mut h2);
        let mut out = vec![0.0; l3.n_out];
        l3.forward(p, &h2, &mut out);
        cache.input = input.to_vec();
        cache.h1 = h1;
        cache.h2 = h2;
        out
    }

    fn text_backward(&self, p: &[f64], cache: &TextCache, dout: &[f64], g: &mut [f64]) {
        let [l1, l2, l3] = &self.net.text;
        let mut dh2 = vec![0.0; l3.n_in];
        l3.backward(p, &cache.h2, dout, g, Some(&mut dh2));
        relu_backward(&cache.h2, &mut dh2);
        let mut dh1 = vec![0.0; l2.n_in];
        l2.backward(p, &cache.h1, &dh2, g, Some(&mut dh1));
        relu_backward(&cache.h1, &mut dh1);
        l1.backward(p, &cache.input, &dh1, g, None);
    }

    pub fn encode_image(&self, image: &ImageTensor) -> Vec<f64> {
        self.image_forward(&self.params.values, &image.to_f64(), &mut EncoderCache::default())
    }

    pub fn encode_text(&self, tokens: &TokenSeq) -> Vec<f64> {
        self.text_forward(&self.params.values, &self.multi_hot(tokens), &mut TextCache::default())
    }

    /// `z = encode_image(image) - encode_text(tokens)`.
    pub fn extract_feature(&self, image: &ImageTensor, tokens: &TokenSeq) -> MultiModalFeature {
        let fi = self.encode_image(image);
        let ft = self.encode_text(tokens);
        MultiModalFeature(fi.iter().zip(&ft).map(|(a, b)| a - b).collect())
    }

    /// `||z||^2` for one pair at parameters `p`, adding its gradient into
    /// `grad` when given.
    pub fn sample_loss(&self, p: &[f64], image: &[f64], multi_hot: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut icache = EncoderCache::default();
        let mut tcache = TextCache::default();
        let fi = self.image_forward(p, image, &mut icache);
        let ft = self.text_forward(p, multi_hot, &mut tcache);
        let z: Vec<f64> = fi.iter().zip(&ft).map(|(a, b)| a - b).collect();
        let loss = z.iter().map(|v| v * v).sum();
        if let Some(g) = grad {
            let dz: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
            self.net.image.backward(p, &icache, &dz, g);
            let neg: Vec<f64> = dz.iter().map(|v| -v).collect();
            self.text_backward(p, &tcache, &neg, g);
        }
        loss
    }

    /// `||F_i - F_t||^2` for precomputed image features, differentiating the
    /// text encoder only.
    fn text_only_loss(&self, p: &[f64], image_feature: &[f64], multi_hot: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut tcache = TextCache::default();
        let ft = self.text_forward(p, multi_hot, &mut tcache);
        let z: Vec<f64> = image_feature.iter().zip(&ft).map(|(a, b)| a - b).collect();
        if let Some(g) = grad {
            let dft: Vec<f64> = z.iter().map(|v| -2.0 * v).collect();
            self.text_backward(p, &tcache, &dft, g);
        }
        z.iter().map(|v| v * v).sum()
    }

    /// `||F_i - F_t||^2` for precomputed text features, differentiating the
    /// image encoder only.
    fn image_only_loss(&self, p: &[f64], image: &[f64], text_feature: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut icache = EncoderCache::default();
        let fi = self.image_forward(p, image, &mut icache);
        let z: Vec<f64> = fi.iter().zip(text_feature).map(|(a, b)| a - b).collect();
        if let Some(g) = grad {
            let dz: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
            self.net.image.backward(p, &icache, &dz, g);
        }
        z.iter().map(|v| v * v).sum()
    }

    /// Offset of the first text-encoder parameter; image-encoder parameters
    /// occupy everything before it.
    fn text_offset(&self) -> usize {
        self.net.text[0].w
    }

    /// Mean `||z||^2` and its gradient over `pairs` at parameters `p`.
    pub fn batch_loss_grad(&self, p: &[f64], pairs: &[&ImageTextPair]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; p.len()];
        let mut loss = 0.0;
        for pair in pairs {
            loss += self.sample_loss(p, &pair.image.to_f64(), &self.multi_hot(pair.caption()), Some(&mut g));
        }
        let n = pairs.len() as f64;
        g.iter_mut().for_each(|x| *x /= n);
        (loss / n, g)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = &self.shape;
        let channels: Vec<String> = s.conv_channels.iter().map(ToString::to_string).collect();
        Checkpoint {
            kind: KIND.into(),
            meta: [
                ("image".to_owned(), format!("{}x{}x{}", s.image.0, s.image.1, s.image.2)),
                ("conv_channels".to_owned(), channels.join(",")),
                ("text_hidden".to_owned(), s.text_hidden.to_string()),
                ("feature_dim".to_owned(), s.feature_dim.to_string()),
            ]
            .into(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let bad = |k: &str| Error::Checkpoint(format!("bad `{k}` entry"));
        let dims: Vec<usize> = ckpt
            .meta("image")?
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("image")))
            .collect::<Result<_>>()?;
        let [c, h, w] = dims.as_slice() else {
            return Err(bad("image"));
        };
        let shape = MfeShape {
            image: (*c, *h, *w),
            conv_channels: ckpt
                .meta("conv_channels")?
                .split(',')
                .map(|d| d.parse().map_err(|_| bad("conv_channels")))
                .collect::<Result<_>>()?,
            text_hidden: ckpt.meta("text_hidden")?.parse().map_err(|_| bad("text_hidden"))?,
            feature_dim: ckpt.meta("feature_dim")?.parse().map_err(|_| bad("feature_dim"))?,
        };
        let mut model = build_mfe(ckpt.vocab.clone(), shape, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.expect_layout(KIND, &model.params)?;
        model.params.values = ckpt.params.values;
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Mean squared Euclidean norm of the difference vectors.
pub fn mfe_loss(batch: &[MultiModalFeature]) -> f64 {
    assert!(!batch.is_empty(), "mfe_loss needs at least one feature");
    batch.iter().map(MultiModalFeature::squared_norm).sum::<f64>() / batch.len() as f64
}

/// What [`pretrain_mfe_with`] updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfeTraining {
    /// Only the image encoder is fitted; the text encoder stays at its
    /// random initialization and acts as a fixed caption embedding.
    #[default]
    ImageOnly,
    /// Only the text encoder is fitted against a fixed random image encoder.
    TextOnly,
    /// Both encoders are fitted jointly.
    Joint,
}

/// [`pretrain_mfe_with`] using the default [`MfeTraining`].
pub fn pretrain_mfe(mfe: MfeModel, public_pairs: &[ImageTextPair], cfg: &TrainConfig) -> Result<(MfeModel, Vec<f64>)> {
    pretrain_mfe_with(mfe, public_pairs, cfg, MfeTraining::default())
}

/// Fits the extractor on ground-truth pairs by minimizing the mean squared
/// feature distance. Returns the model and per-epoch mean loss.
///
/// With [`MfeTraining::Joint`] and only matching pairs in the objective, both
/// encoders can drift towards a shared constant output. The single-encoder
/// modes cannot, since the fixed side gives a target that varies between
/// samples.
pub fn pretrain_mfe_with(
    mut mfe: MfeModel,
    public_pairs: &[ImageTextPair],
    cfg: &TrainConfig,
    mode: MfeTraining,
) -> Result<(MfeModel, Vec<f64>)> {
    cfg.validate()?;
    if public_pairs.is_empty() {
        return Err(Error::InvalidArgument("no public pairs to pretrain on".into()));
    }
    let images: Vec<Vec<f64>> = public_pairs.iter().map(|p| p.image.to_f64()).collect();
    let texts: Vec<Vec<f64>> = public_pairs.iter().map(|p| mfe.multi_hot(p.caption())).collect();
    // features of the fixed encoder never change, compute them once
    let p0 = &mfe.params.values;
    let fixed: Vec<Vec<f64>> = match mode {
        MfeTraining::ImageOnly => texts.iter().map(|x| mfe.text_forward(p0, x, &mut TextCache::default())).collect(),
        MfeTraining::TextOnly => images.iter().map(|x| mfe.image_forward(p0, x, &mut EncoderCache::default())).collect(),
        MfeTraining::Joint => Vec::new(),
    };
    let loss_at = |m: &MfeModel, p: &[f64], i: usize, g: Option<&mut [f64]>| -> f64 {
        match mode {
            MfeTraining::Joint => m.sample_loss(p, &images[i], &texts[i], g),
            MfeTraining::ImageOnly => m.image_only_loss(p, &images[i], &fixed[i], g),
            MfeTraining::TextOnly => m.text_only_loss(p, &fixed[i], &texts[i], g),
        }
    };
    let initial_loss = (0..images.len()).map(|i| loss_at(&mfe, &mfe.params.values, i, None)).sum::<f64>() / images.len() as f64;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = seed::rng(cfg.seed, "mfe-order");
    let mut opt = cfg.optimizer();
    let mut params = std::mem::take(&mut mfe.params.values);
    let split = mfe.text_offset();
    let frozen = match mode {
        MfeTraining::ImageOnly => split..params.len(),
        MfeTraining::TextOnly => 0..split,
        MfeTraining::Joint => 0..0,
    };
    let frozen_values = params[frozen.clone()].to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        opt.lr = cfg.lr_at(epoch);
        let loss = opt.epoch(&mut params, &order, cfg.batch_size, |p, i, g| loss_at(&mfe, p, i, Some(g)));
        // undo weight decay or DP noise on the fixed encoder
        params[frozen.clone()].copy_from_slice(&frozen_values);
        check_divergence(epoch, loss, initial_loss, &params)?;
        debug!("mfe epoch {epoch}: loss {loss:.5}");
        history.push(loss);
    }
    mfe.params.values = params;
    mfe.params.snap_to_f32();
    Ok((mfe, history))
}
