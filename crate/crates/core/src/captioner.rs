//! Encoder-decoder image captioner: a small convolutional image encoder
//! whose embedding initializes a GRU language model over the corpus
//! vocabulary. Trained with teacher forcing on next-token cross-entropy;
//! decoded greedily.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::defenses::{augment_image, DpConfig};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, ConvEncoder, EncoderCache, GruCache, GruCell, Init, Linear, Params, ParamsBuilder};
use crate::optim::{check_divergence, Sgd};
use crate::seed;
use crate::synthdata::{ImageTensor, ImageTextPair, CHANNELS, IMAGE_SIZE};
use crate::textsim::TokenSeq;
use crate::vocab::{Vocab, BOS, EOS, PAD, UNK};

pub const WORD_DIM: usize = 32;
pub const HIDDEN: usize = 64;
const KIND: &str = "captioner";

/// Encoder architecture.
///
/// `R` is deep and narrow (four conv blocks, 64-d embedding); `V` is shallow
/// and wide (two conv blocks plus pooling, 128-d embedding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    R,
    V,
}

impl ArchId {
    pub const ALL: [ArchId; 2] = [ArchId::R, ArchId::V];

    pub fn letter(self) -> char {
        match self {
            ArchId::R => 'R',
            ArchId::V => 'V',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'R' => Some(ArchId::R),
            'V' => Some(ArchId::V),
            _ => None,
        }
    }

    fn channels(self) -> &'static [usize] {
        match self {
            ArchId::R => &[8, 8, 16, 16],
            ArchId::V => &[12, 16],
        }
    }

    fn pool(self) -> bool {
        matches!(self, ArchId::V)
    }

    pub fn embed_dim(self) -> usize {
        match self {
            ArchId::R => 64,
            ArchId::V => 128,
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next().and_then(ArchId::from_letter), chars.next()) {
            (Some(a), None) => Ok(a),
            _ => Err(Error::InvalidArgument(format!("unknown architecture `{s}`"))),
        }
    }
}

/// Per-epoch learning-rate policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` in the first epoch down to a small
    /// fraction of it in the last.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// l2 coefficient; 0 disables the penalty.
    pub weight_decay: f64,
    pub augment: bool,
    pub dp: Option<DpConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 4,
            learning_rate: 0.1,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            augment: false,
            dp: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = (epoch.saturating_sub(1)) as f64 / self.epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub(crate) fn optimizer(&self) -> Sgd {
        Sgd {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            dp: self
                .dp
                .map(|dp| (dp, seed::rng(seed::derive(dp.seed, &self.seed.to_string()), "dp-noise"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Net {
    encoder: ConvEncoder,
    init: Linear,
    embed: usize,
    gru: GruCell,
    out: Linear,
}

impl Net {
    fn alloc(builder: &mut ParamsBuilder<'_>, arch: ArchId, vocab_len: usize) -> Self {
        let e = arch.embed_dim();
        let encoder = ConvEncoder::alloc(builder, "encoder", (CHANNELS, IMAGE_SIZE, IMAGE_SIZE), arch.channels(), arch.pool(), e);
        let init = Linear::alloc(builder, "decoder.init", e, HIDDEN, Init::lecun(e));
        let embed = builder.alloc("decoder.embed", &[vocab_len, WORD_DIM], Init::Uniform(0.5));
        let gru = GruCell::alloc(builder, "decoder.gru", WORD_DIM, HIDDEN);
        let out = Linear::alloc(builder, "decoder.out", HIDDEN, vocab_len, Init::lecun(HIDDEN));
        Net {
            encoder,
            init,
            embed,
            gru,
            out,
        }
    }
}

/// A trained (or freshly initialized) captioning model.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub arch: ArchId,
    pub vocab: Vocab,
    pub params: Params,
    pub trained_epochs: usize,
    net: Net,
}

/// Builds a model with deterministic random initialization.
pub fn build_model(arch: ArchId, vocab: Vocab, seed: u64) -> Result<CaptionModel> {
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("vocabulary has no words".into()));
    }
    let mut rng = seed::rng(seed, &format!("captioner-init-{arch}"));
    let mut builder = ParamsBuilder::new(&mut rng);
    let net = Net::alloc(&mut builder, arch, vocab.len());
    Ok(CaptionModel {
        arch,
        vocab,
        params: builder.finish(),
        trained_epochs: 0,
        net,
    })
}

impl CaptionModel {
    fn embedding<'p>(&self, p: &'p [f64], token: usize) -> &'p [f64] {
        let start = self.net.embed + token * WORD_DIM;
        &p[start..start + WORD_DIM]
    }

    /// Teacher-forced mean token cross-entropy of one caption; adds the
    /// gradient into `grad` when given.
    pub fn sample_loss(&self, p: &[f64], image: &[f64], caption: &[usize], grad: Option<&mut [f64]>) -> f64 {
        let net = &self.net;
        let v = self.vocab.len();
        let mut enc_cache = EncoderCache::default();
        let mut feat = vec![0.0; self.arch.embed_dim()];
        net.encoder.forward(p, image, &mut enc_cache, &mut feat);
        let mut h0 = vec![0.0; HIDDEN];
        net.init.forward(p, &feat, &mut h0);
        h0.iter_mut().for_each(|x| *x = x.tanh());

        let inputs: Vec<usize> = std::iter::once(BOS).chain(caption.iter().copied()).collect();
        let targets: Vec<usize> = caption.iter().copied().chain(std::iter::once(EOS)).collect();
        let steps = inputs.len();
        let scale = 1.0 / steps as f64;

        let mut states = Vec::with_capacity(steps + 1);
        states.push(h0);
        let mut caches: Vec<GruCache> = Vec::with_capacity(steps);
        let mut dlogits = Vec::with_capacity(steps);
        let mut loss = 0.0;
        let mut logits = vec![0.0; v];
        for (&inp, &tgt) in inputs.iter().zip(&targets) {
            let mut h = vec![0.0; HIDDEN];
            let cache = net.gru.forward(p, self.embedding(p, inp), states.last().expect("h0"), &mut h);
            net.out.forward(p, &h, &mut logits);
            let mut d = vec![0.0; v];
            loss += softmax_cross_entropy(&logits, tgt, &mut d);
            d.iter_mut().for_each(|x| *x *= scale);
            caches.push(cache);
            dlogits.push(d);
            states.push(h);
        }
        let loss = loss * scale;

        let Some(g) = grad else {
            return loss;
        };
        let mut dh_next = vec![0.0; HIDDEN];
        for t in (0..steps).rev() {
            let mut dh = dh_next;
            net.out.backward(p, &states[t + 1], &dlogits[t], g, Some(&mut dh));
            let mut dx = vec![0.0; WORD_DIM];
            dh_next = net.gru.backward(p, &caches[t], &dh, g, Some(&mut dx));
            let start = net.embed + inputs[t] * WORD_DIM;
            for (ge, d) in g[start..start + WORD_DIM].iter_mut().zip(&dx) {
                *ge += d;
            }
        }
        let h0 = &states[0];
        let dpre: Vec<f64> = dh_next.iter().zip(h0).map(|(d, h)| d * (1.0 - h * h)).collect();
        let mut dfeat = vec![0.0; feat.len()];
        net.init.backward(p, &feat, &dpre, g, Some(&mut dfeat));
        net.encoder.backward(p, &enc_cache, &dfeat, g);
        loss
    }

    /// Mean loss and gradient over a batch at parameters `p`.
    pub fn batch_loss_grad(&self, p: &[f64], pairs: &[&ImageTextPair]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; p.len()];
        let mut loss = 0.0;
        for pair in pairs {
            loss += self.sample_loss(p, &pair.image.to_f64(), &self.vocab.encode(pair.caption()), Some(&mut g));
        }
        let n = pairs.len() as f64;
        g.iter_mut().for_each(|x| *x /= n);
        (loss / n, g)
    }

    /// Greedy decoding from `<bos>` until `<eos>` or `max_len` tokens.
    pub fn caption(&self, image: &ImageTensor, max_len: usize) -> TokenSeq {
        assert!(max_len >= 1, "max_len must be >= 1");
        if self.trained_epochs == 0 {
            debug!("captioning with an untrained model");
        }
        let p = &self.params.values;
        let net = &self.net;
        let mut cache = EncoderCache::default();
        let mut feat = vec![0.0; self.arch.embed_dim()];
        net.encoder.forward(p, &image.to_f64(), &mut cache, &mut feat);
        let mut h = vec![0.0; HIDDEN];
        net.init.forward(p, &feat, &mut h);
        h.iter_mut().for_each(|x| *x = x.tanh());
        let mut logits = vec![0.0; self.vocab.len()];
        let mut token = BOS;
        let mut words = Vec::new();
        for _ in 0..max_len {
            let mut next = vec![0.0; HIDDEN];
            net.gru.forward(p, self.embedding(p, token), &h, &mut next);
            h = next;
            net.out.forward(p, &h, &mut logits);
            token = logits
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != PAD && *i != BOS)
                .fold((EOS, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
                .0;
            if token == EOS {
                break;
            }
            if token != UNK {
                words.push(self.vocab.word(token).to_owned());
            }
        }
        TokenSeq::from_generated(words)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: KIND.into(),
            meta: [
                ("arch".to_owned(), self.arch.to_string()),
                ("trained_epochs".to_owned(), self.trained_epochs.to_string()),
            ]
            .into(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let arch: ArchId = ckpt.meta("arch")?.parse().map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let trained_epochs = ckpt
            .meta("trained_epochs")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad trained_epochs".into()))?;
        let mut model = build_model(arch, ckpt.vocab.clone(), 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.expect_layout(KIND, &model.params)?;
        model.params.values = ckpt.params.values;
        model.trained_epochs = trained_epochs;
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Same as [`load_checkpoint`](Self::load_checkpoint) but also requires
    /// the stored architecture to be `arch`.
    pub fn load_checkpoint_as(path: &Path, arch: ArchId) -> Result<Self> {
        let model = Self::load_checkpoint(path)?;
        if model.arch != arch {
            return Err(Error::Checkpoint(format!("checkpoint holds arch {}, expected {arch}", model.arch)));
        }
        Ok(model)
    }
}

/// Mini-batch SGD on teacher-forced cross-entropy. Returns the model and the
/// per-epoch mean objective.
pub fn train(mut model: CaptionModel, pairs: &[ImageTextPair], cfg: &TrainConfig) -> Result<(CaptionModel, Vec<f64>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let images: Vec<Vec<f64>> = pairs.iter().map(|p| p.image.to_f64()).collect();
    let captions: Vec<Vec<usize>> = pairs.iter().map(|p| model.vocab.encode(p.caption())).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut order_rng = seed::rng(cfg.seed, "captioner-order");
    let mut opt = cfg.optimizer();
    let mut history = Vec::with_capacity(cfg.epochs);
    let probe = pairs.len().min(64);
    let initial_loss = (0..probe)
        .map(|i| model.sample_loss(&model.params.values, &images[i], &captions[i], None))
        .sum::<f64>()
        / probe as f64;
    let mut params = std::mem::take(&mut model.params.values);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let augmented: Option<Vec<Vec<f64>>> = cfg.augment.then(|| {
            let mut rng = seed::rng(seed::derive(cfg.seed, "captioner-augment"), &epoch.to_string());
            pairs.iter().map(|p| augment_image(&p.image, &mut rng).to_f64()).collect()
        });
        let imgs = augmented.as_ref().unwrap_or(&images);
        opt.lr = cfg.lr_at(epoch);
        let loss = opt.epoch(&mut params, &order, cfg.batch_size, |p, i, g| {
            model.sample_loss(p, &imgs[i], &captions[i], Some(g))
        });
        check_divergence(epoch, loss, initial_loss, &params)?;
        debug!("captioner {} epoch {epoch}: loss {loss:.4}", model.arch);
        history.push(loss);
    }
    model.params.values = params;
    model.params.snap_to_f32();
    model.trained_epochs += cfg.epochs;
    if history.last() >= history.first() && cfg.epochs > 1 {
        warn!("captioner loss did not decrease ({:?} -> {:?})", history.first(), history.last());
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusSpec, Family};

    fn corpus(n: usize) -> Vec<ImageTextPair> {
        generate_corpus(&CorpusSpec {
            family: Family::C,
            size: n.max(20),
            seed: 1,
        })
        .unwrap()
        .into_iter()
        .take(n)
        .collect()
    }

    fn vocab_of(pairs: &[ImageTextPair]) -> Vocab {
        Vocab::from_captions(pairs.iter().map(ImageTextPair::caption))
    }

    #[test]
    fn build_is_deterministic_and_arch_specific() {
        let pairs = corpus(20);
        let a = build_model(ArchId::R, vocab_of(&pairs), 3).unwrap();
        let b = build_model(ArchId::R, vocab_of(&pairs), 3).unwrap();
        assert_eq!(a.params, b.params);
        let v = build_model(ArchId::V, vocab_of(&pairs), 3).unwrap();
        let shapes = |m: &CaptionModel| m.params.segments.iter().map(|s| s.shape.clone()).collect::<Vec<_>>();
        assert_ne!(shapes(&a), shapes(&v));
        assert_eq!(a.trained_epochs, 0);
        assert!(build_model(ArchId::R, Vocab::from_captions([]), 0).is_err());
    }

    #[test]
    fn caption_length_contract() {
        let pairs = corpus(20);
        let m = build_model(ArchId::V, vocab_of(&pairs), 0).unwrap();
        let c1 = m.caption(&pairs[0].image, 1);
        assert!(c1.len() <= 1);
        assert_eq!(m.caption(&pairs[0].image, 12), m.caption(&pairs[0].image, 12));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let pairs = corpus(20);
        let m = build_model(ArchId::R, vocab_of(&pairs), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 1e3,
            ..TrainConfig::default()
        };
        match train(m, &pairs, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|(_, h)| h)),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let pairs = corpus(20);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (m, _) = train(build_model(ArchId::R, vocab_of(&pairs), 0).unwrap(), &pairs, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint(&path).unwrap();
        let back = CaptionModel::load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        for p in &pairs {
            assert_eq!(back.caption(&p.image, 12), m.caption(&p.image, 12));
        }
        assert!(matches!(
            CaptionModel::load_checkpoint_as(&path, ArchId::V),
            Err(Error::Checkpoint(_))
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x55;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(CaptionModel::load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, &bytes[..n / 2]).unwrap();
        assert!(matches!(CaptionModel::load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn cross_arch_layout_is_rejected() {
        let pairs = corpus(20);
        let r = build_model(ArchId::R, vocab_of(&pairs), 0).unwrap();
        let mut ckpt = r.to_checkpoint();
        ckpt.meta.insert("arch".into(), "V".into());
        assert!(matches!(CaptionModel::from_checkpoint(ckpt), Err(Error::Checkpoint(_))));
    }
}
