//! End-to-end experiment runner. A [`Config`] describes one scenario; its
//! stages read and write artifacts under a run directory laid out as
//!
//! ```text
//! <run>/config.toml
//! <run>/corpora/<family>/{manifest.tsv,images/,splits.tsv}
//! <run>/checkpoints/{target,shadow,mfe,attack_mlp}.ckpt, mb_attacker.toml, *_loss.csv
//! <run>/scores/{shadow,target}.csv
//! <run>/features/{shadow,target}.csv
//! <run>/reports/{mb,fb}/...
//! ```
//!
//! Every stage only reads files written by earlier stages, so running the
//! stages one at a time gives the same artifacts as [`run_scenario`].

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::captioner::{build_model, train, ArchId, CaptionModel, LrSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{emit_report, tsne_2d, AttackReport, Membership, ReportRow, TsneConfig};
use crate::fb_attack::{build_attack_dataset, build_attack_mlp, features_csv, parse_features_csv, run_fb_attack, train_attack, AttackMlp};
use crate::mb_attack::{collect_scores, fit_margin_classifier, fit_threshold_attacker, infer_mb, metric_index, parse_scores_csv, scores_csv, MarginConfig, MbAttacker};
use crate::mfe::{build_mfe, pretrain_mfe_with, MfeModel, MfeShape, MfeTraining};
use crate::scenario::{AttackKind, DefenseSpec, ModelSpec, ScenarioSpec};
use crate::seed::derive;
use crate::synthdata::{generate_corpus, load_corpus, load_splits, save_corpus, save_splits, split_corpus, splits_file, CorpusSpec, DatasetBundle, Family};
use crate::vocab::Vocab;

/// Environment variable naming the default directory that holds runs.
pub const RUNS_DIR_ENV: &str = "MMI_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Pairs generated per data family.
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { size: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitsConfig {
    /// Size of each of the member and non-member splits.
    pub member: usize,
    /// Size of each of the shadow member and shadow non-member splits.
    pub shadow: usize,
}

impl Default for SplitsConfig {
    fn default() -> Self {
        SplitsConfig { member: 300, shadow: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub arch: ArchId,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::F,
            arch: ArchId::R,
            epochs: 120,
            batch_size: 4,
            learning_rate: 0.15,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

impl ModelConfig {
    fn spec(&self) -> ModelSpec {
        ModelSpec {
            family: self.family,
            arch: self.arch,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_schedule: self.lr_schedule,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfeConfig {
    pub feature_dim: usize,
    pub conv_channels: Vec<usize>,
    pub text_hidden: usize,
    pub training: MfeTraining,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for MfeConfig {
    fn default() -> Self {
        let shape = MfeShape::default();
        MfeConfig {
            feature_dim: shape.feature_dim,
            conv_channels: shape.conv_channels,
            text_hidden: shape.text_hidden,
            training: MfeTraining::default(),
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MbMode {
    #[default]
    Margin,
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub mb_mode: MbMode,
    /// Metric used in threshold mode: `bleu1`, `bleu2`, `bleu3` or `rougeL`.
    pub mb_metric: String,
    pub margin_c: f64,
    pub margin_epochs: usize,
    pub margin_learning_rate: f64,
    pub mlp_epochs: usize,
    pub mlp_batch_size: usize,
    pub mlp_learning_rate: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let margin = MarginConfig::default();
        let mlp = crate::fb_attack::default_attack_config();
        AttackConfig {
            kind: AttackKind::default(),
            mb_mode: MbMode::default(),
            mb_metric: "rougeL".into(),
            margin_c: margin.c,
            margin_epochs: margin.epochs,
            margin_learning_rate: margin.learning_rate,
            mlp_epochs: mlp.epochs,
            mlp_batch_size: mlp.batch_size,
            mlp_learning_rate: mlp.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Maximum generated caption length in tokens.
    pub max_caption_len: usize,
    /// Whether the report stage draws a t-SNE plot of the target features.
    pub tsne: bool,
    pub perplexity: f64,
    pub tsne_iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_caption_len: 12,
            tsne: true,
            perplexity: 30.0,
            tsne_iterations: 1000,
        }
    }
}

/// One experiment. Every key has a default, so an empty file is a valid
/// unrestricted `FRFR` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Run directory name under the runs root.
    pub name: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub splits: SplitsConfig,
    pub target: ModelConfig,
    pub shadow: ModelConfig,
    pub mfe: MfeConfig,
    pub attack: AttackConfig,
    /// Applied to the target model only.
    pub defense: DefenseSpec,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            name: "default".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            splits: SplitsConfig::default(),
            target: ModelConfig::default(),
            shadow: ModelConfig::default(),
            mfe: MfeConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name `{}` is not a plain directory name", self.name));
        }
        if self.eval.max_caption_len == 0 {
            return bad("eval.max_caption_len must be >= 1".into());
        }
        metric_index(&self.attack.mb_metric).map_err(|e| Error::Config(e.to_string()))?;
        let checks = [
            ("target", self.target.train_config(0).validate()),
            ("shadow", self.shadow.train_config(0).validate()),
            ("mfe", self.mfe_train_config().validate()),
            ("attack", self.mlp_train_config().validate()),
            ("defense", self.target_train_config().validate()),
        ];
        for (section, r) in checks {
            if let Err(e) = r {
                return bad(format!("[{section}] {e}"));
            }
        }
        Ok(())
    }

    pub fn scenario(&self) -> ScenarioSpec {
        ScenarioSpec {
            shadow: self.shadow.spec(),
            target: self.target.spec(),
            attack: self.attack.kind,
            defense: (!self.defense.is_none()).then_some(self.defense),
        }
    }

    /// Sets families, architectures, attack kind and (when given) the defense
    /// from a scenario.
    pub fn apply_scenario(&mut self, s: &ScenarioSpec) {
        self.shadow.family = s.shadow.family;
        self.shadow.arch = s.shadow.arch;
        self.target.family = s.target.family;
        self.target.arch = s.target.arch;
        self.attack.kind = s.attack;
        if let Some(d) = s.defense {
            self.defense = d;
        }
    }

    fn seed_for(&self, what: &str) -> u64 {
        derive(self.seed, what)
    }

    pub fn target_train_config(&self) -> TrainConfig {
        TrainConfig {
            weight_decay: self.defense.l2,
            augment: self.defense.augment,
            dp: self.defense.dp,
            ..self.target.train_config(self.seed_for("target"))
        }
    }

    pub fn shadow_train_config(&self) -> TrainConfig {
        self.shadow.train_config(self.seed_for("shadow"))
    }

    pub fn mfe_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.mfe.epochs,
            batch_size: self.mfe.batch_size,
            learning_rate: self.mfe.learning_rate,
            lr_schedule: self.mfe.lr_schedule,
            seed: self.seed_for("mfe"),
            ..TrainConfig::default()
        }
    }

    pub fn mlp_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.attack.mlp_epochs,
            batch_size: self.attack.mlp_batch_size,
            learning_rate: self.attack.mlp_learning_rate,
            seed: self.seed_for("attack-mlp"),
            ..crate::fb_attack::default_attack_config()
        }
    }

    fn margin_config(&self) -> MarginConfig {
        MarginConfig {
            c: self.attack.margin_c,
            epochs: self.attack.margin_epochs,
            learning_rate: self.attack.margin_learning_rate,
            seed: self.seed_for("margin"),
        }
    }

    fn families(&self) -> Vec<Family> {
        let mut f = vec![self.target.family];
        if self.shadow.family != self.target.family {
            f.push(self.shadow.family);
        }
        f
    }

    /// `<root>/<name>` where root is `out`, else `$MMI_RUNS_DIR`, else `runs`.
    pub fn run_dir(&self, out: Option<&Path>) -> PathBuf {
        let root = match out {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR), PathBuf::from),
        };
        root.join(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    GenData,
    TrainTarget,
    TrainShadow,
    TrainMfe,
    AttackMb,
    AttackFb,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainTarget,
        Stage::TrainShadow,
        Stage::TrainMfe,
        Stage::AttackMb,
        Stage::AttackFb,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainTarget => "train-target",
            Stage::TrainShadow => "train-shadow",
            Stage::TrainMfe => "train-mfe",
            Stage::AttackMb => "attack-mb",
            Stage::AttackFb => "attack-fb",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Whether the stage has work to do under `kind`.
    pub fn applies(self, kind: AttackKind) -> bool {
        match self {
            Stage::TrainMfe | Stage::AttackFb => kind.runs_fb(),
            Stage::AttackMb => kind.runs_mb(),
            _ => true,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Paths of every artifact in a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn corpus_dir(&self, family: Family) -> PathBuf {
        self.root.join("corpora").join(family.to_string())
    }

    pub fn checkpoint(&self, file: &str) -> PathBuf {
        self.root.join("checkpoints").join(file)
    }

    pub fn scores(&self, who: &str) -> PathBuf {
        self.root.join("scores").join(format!("{who}.csv"))
    }

    pub fn features(&self, who: &str) -> PathBuf {
        self.root.join("features").join(format!("{who}.csv"))
    }

    pub fn report_dir(&self, attack: &str) -> PathBuf {
        self.root.join("reports").join(attack)
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join(".stages").join(format!("{}.done", stage.name()))
    }
}

fn need(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(path.to_path_buf()))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    need(path)?;
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(s, "{},{l}", i + 1).unwrap();
    }
    s
}

fn load_bundle(layout: &Layout, family: Family) -> Result<DatasetBundle> {
    let dir = layout.corpus_dir(family);
    need(&dir.join("manifest.tsv"))?;
    need(&splits_file(&dir))?;
    let corpus = load_corpus(&dir)?;
    load_splits(&corpus, &splits_file(&dir))
}

fn load_caption_model(path: &Path) -> Result<CaptionModel> {
    need(path)?;
    CaptionModel::load_checkpoint(path)
}

fn gen_data(cfg: &Config, layout: &Layout) -> Result<()> {
    for family in cfg.families() {
        let spec = CorpusSpec {
            family,
            size: cfg.corpus.size,
            seed: cfg.seed_for(&format!("corpus-{family}")),
        };
        let corpus = generate_corpus(&spec)?;
        let bundle = split_corpus(&corpus, cfg.splits.member, cfg.splits.shadow, cfg.seed_for(&format!("splits-{family}")))?;
        let dir = layout.corpus_dir(family);
        save_corpus(&corpus, &dir)?;
        save_splits(&bundle, &splits_file(&dir))?;
        info!("corpus {family}: {} pairs, public split {}", corpus.len(), bundle.public.len());
    }
    Ok(())
}

fn train_captioner(layout: &Layout, model: &ModelConfig, who: &str, pick: fn(&DatasetBundle) -> &[crate::synthdata::ImageTextPair], tc: &TrainConfig) -> Result<()> {
    let bundle = load_bundle(layout, model.family)?;
    let pairs = pick(&bundle);
    let vocab = Vocab::from_captions(pairs.iter().map(|p| p.caption()));
    let (trained, history) = train(build_model(model.arch, vocab, tc.seed)?, pairs, tc)?;
    trained.save_checkpoint(&layout.checkpoint(&format!("{who}.ckpt")))?;
    write(&layout.checkpoint(&format!("{who}_loss.csv")), &loss_csv(&history))?;
    info!("{who}: final loss {:.4}", history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_mfe(cfg: &Config, layout: &Layout) -> Result<()> {
    let bundle = load_bundle(layout, cfg.shadow.family)?;
    let vocab = Vocab::from_captions(bundle.public.iter().map(|p| p.caption()));
    let shape = MfeShape {
        conv_channels: cfg.mfe.conv_channels.clone(),
        text_hidden: cfg.mfe.text_hidden,
        feature_dim: cfg.mfe.feature_dim,
        ..MfeShape::default()
    };
    let tc = cfg.mfe_train_config();
    let (mfe, history) = pretrain_mfe_with(build_mfe(vocab, shape, tc.seed)?, &bundle.public, &tc, cfg.mfe.training)?;
    mfe.save_checkpoint(&layout.checkpoint("mfe.ckpt"))?;
    write(&layout.checkpoint("mfe_loss.csv"), &loss_csv(&history))
}

fn attack_mb(cfg: &Config, layout: &Layout) -> Result<()> {
    let shadow = load_caption_model(&layout.checkpoint("shadow.ckpt"))?;
    let bundle = load_bundle(layout, cfg.shadow.family)?;
    let max_len = cfg.eval.max_caption_len;
    let mut records = collect_scores(&shadow, &bundle.shadow_member, Some(Membership::Member), max_len)?;
    records.extend(collect_scores(&shadow, &bundle.shadow_nonmember, Some(Membership::Nonmember), max_len)?);
    write(&layout.scores("shadow"), &scores_csv(&records))?;
    let attacker = match cfg.attack.mb_mode {
        MbMode::Margin => MbAttacker::Margin(fit_margin_classifier(&records, &cfg.margin_config())?),
        MbMode::Threshold => fit_threshold_attacker(&records, metric_index(&cfg.attack.mb_metric)?)?.0,
    };
    write(&layout.checkpoint("mb_attacker.toml"), &attacker.to_toml())
}

fn attack_fb(cfg: &Config, layout: &Layout) -> Result<()> {
    let shadow = load_caption_model(&layout.checkpoint("shadow.ckpt"))?;
    let mfe_path = layout.checkpoint("mfe.ckpt");
    need(&mfe_path)?;
    let mfe = MfeModel::load_checkpoint(&mfe_path)?;
    let bundle = load_bundle(layout, cfg.shadow.family)?;
    let dataset = build_attack_dataset(&mfe, &shadow, &bundle.shadow_member, &bundle.shadow_nonmember, cfg.eval.max_caption_len);
    write(&layout.features("shadow"), &features_csv(&dataset))?;
    let tc = cfg.mlp_train_config();
    let (mlp, history) = train_attack(build_attack_mlp(mfe.feature_dim(), tc.seed)?, &dataset, &tc)?;
    mlp.save_checkpoint(&layout.checkpoint("attack_mlp.ckpt"))?;
    write(&layout.checkpoint("attack_mlp_loss.csv"), &loss_csv(&history))
}

fn predictions_path(layout: &Layout, attack: &str) -> PathBuf {
    layout.report_dir(attack).join("predictions.csv")
}

fn evaluate(cfg: &Config, layout: &Layout) -> Result<()> {
    let kind = cfg.attack.kind;
    let attacker_path = layout.checkpoint("mb_attacker.toml");
    let mlp_path = layout.checkpoint("attack_mlp.ckpt");
    let mfe_path = layout.checkpoint("mfe.ckpt");
    if kind.runs_mb() {
        need(&attacker_path)?;
    }
    if kind.runs_fb() {
        need(&mlp_path)?;
        need(&mfe_path)?;
    }
    let target = load_caption_model(&layout.checkpoint("target.ckpt"))?;
    let bundle = load_bundle(layout, cfg.target.family)?;
    let max_len = cfg.eval.max_caption_len;

    let mut records = collect_scores(&target, &bundle.member, Some(Membership::Member), max_len)?;
    records.extend(collect_scores(&target, &bundle.nonmember, Some(Membership::Nonmember), max_len)?);
    write(&layout.scores("target"), &scores_csv(&records))?;

    if kind.runs_mb() {
        let attacker = MbAttacker::from_toml(&read(&attacker_path)?)?;
        let rows: Vec<ReportRow> = records
            .iter()
            .map(|r| ReportRow {
                sample_id: r.sample_id.clone(),
                value: attacker.decision_value(&r.scores),
                pred: infer_mb(&attacker, &r.scores),
                truth: r.label.expect("target records are labelled"),
            })
            .collect();
        let report = AttackReport::new(&cfg.scenario().code(), "mb", "score", rows)?;
        write(&predictions_path(layout, "mb"), &report.predictions_csv())?;
    }
    if kind.runs_fb() {
        let mfe = MfeModel::load_checkpoint(&mfe_path)?;
        let mlp = AttackMlp::load_checkpoint(&mlp_path)?;
        let mut pairs = bundle.member.clone();
        pairs.extend(bundle.nonmember.iter().cloned());
        let truths: Vec<Membership> = (0..pairs.len()).map(|i| Membership::from_bool(i < bundle.member.len())).collect();
        let (features, rows) = run_fb_attack(&mfe, &target, &mlp, &pairs, &truths, max_len)?;
        write(&layout.features("target"), &features_csv(&features))?;
        let report = AttackReport::new(&cfg.scenario().code(), "fb", "prob", rows)?;
        write(&predictions_path(layout, "fb"), &report.predictions_csv())?;
    }
    Ok(())
}

/// Mean ROUGE-L of the target's captions on members and non-members.
fn utility(layout: &Layout) -> Result<(f64, f64)> {
    let records = parse_scores_csv(&read(&layout.scores("target"))?)?;
    let mean = |want: Membership| {
        let v: Vec<f64> = records.iter().filter(|r| r.label == Some(want)).map(|r| r.scores.rouge_l).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok((mean(Membership::Member), mean(Membership::Nonmember)))
}

fn report(cfg: &Config, layout: &Layout) -> Result<()> {
    let scenario = cfg.scenario();
    let (member_rl, nonmember_rl) = utility(layout)?;
    let defense = match scenario.defense {
        None => "none".to_owned(),
        Some(d) => {
            let mut parts = Vec::new();
            if d.l2 > 0.0 {
                parts.push(format!("l2({})", d.l2));
            }
            if d.augment {
                parts.push("augment".to_owned());
            }
            if let Some(dp) = d.dp {
                parts.push(format!("dp(C={},sigma={})", dp.clip_norm, dp.noise_multiplier));
            }
            parts.join("+")
        }
    };
    for attack in ["mb", "fb"] {
        let runs = if attack == "mb" { scenario.attack.runs_mb() } else { scenario.attack.runs_fb() };
        if !runs {
            continue;
        }
        let mut rep = AttackReport::from_predictions_csv(&scenario.code(), attack, &read(&predictions_path(layout, attack))?)?;
        rep.extra = vec![
            ("class".to_owned(), scenario.class().to_string()),
            ("defense".to_owned(), defense.clone()),
            ("seed".to_owned(), cfg.seed.to_string()),
            ("target_member_rougeL".to_owned(), format!("{member_rl:.6}")),
            ("target_nonmember_rougeL".to_owned(), format!("{nonmember_rl:.6}")),
        ];
        let embedding = if attack == "fb" && cfg.eval.tsne {
            let feats = parse_features_csv(&read(&layout.features("target"))?)?;
            let xs: Vec<Vec<f64>> = feats.iter().map(|f| f.feature.0.clone()).collect();
            let labels: Vec<Membership> = feats.iter().map(|f| f.label.unwrap_or(Membership::Nonmember)).collect();
            let tsne = TsneConfig {
                perplexity: cfg.eval.perplexity,
                iterations: cfg.eval.tsne_iterations,
                seed: cfg.seed_for("tsne"),
                ..TsneConfig::default()
            };
            Some((tsne_2d(&xs, &tsne)?, labels))
        } else {
            None
        };
        emit_report(&rep, embedding.as_ref().map(|(p, l)| (p.as_slice(), l.as_slice())), &layout.report_dir(attack))?;
        info!("{} {attack}: accuracy {:.3}, auc {:.3}", rep.scenario, rep.accuracy, rep.roc.auc);
    }
    Ok(())
}

/// Runs one stage against the run directory `dir`. Stages that do not apply
/// to the configured attack kind do nothing. Errors carry the stage name.
pub fn run_stage(cfg: &Config, dir: &Path, stage: Stage) -> Result<()> {
    let layout = Layout::new(dir);
    let result = (|| {
        if !stage.applies(cfg.attack.kind) {
            return Ok(());
        }
        info!("stage {stage}");
        match stage {
            Stage::GenData => gen_data(cfg, &layout),
            Stage::TrainTarget => train_captioner(&layout, &cfg.target, "target", |b| &b.member, &cfg.target_train_config()),
            Stage::TrainShadow => train_captioner(&layout, &cfg.shadow, "shadow", |b| &b.shadow_member, &cfg.shadow_train_config()),
            Stage::TrainMfe => train_mfe(cfg, &layout),
            Stage::AttackMb => attack_mb(cfg, &layout),
            Stage::AttackFb => attack_fb(cfg, &layout),
            Stage::Evaluate => evaluate(cfg, &layout),
            Stage::Report => report(cfg, &layout),
        }?;
        write(&layout.marker(stage), "")
    })();
    result.map_err(|e| e.in_stage(stage.name()))
}

/// Runs every stage in order. With `resume`, stages already completed under
/// an identical config are skipped; a changed config reruns everything.
pub fn run_scenario(cfg: &Config, dir: &Path, resume: bool) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(dir);
    let snapshot = cfg.to_toml();
    let same_config = fs::read_to_string(layout.config()).is_ok_and(|old| old == snapshot);
    if !(resume && same_config) {
        let markers = layout.root.join(".stages");
        if markers.exists() {
            fs::remove_dir_all(&markers).map_err(|e| Error::io(&markers, e))?;
        }
    }
    write(&layout.config(), &snapshot)?;
    for stage in Stage::ALL {
        if resume && layout.marker(stage).exists() {
            info!("stage {stage}: already done");
            continue;
        }
        run_stage(cfg, dir, stage)?;
    }
    Ok(())
}

/// Accuracy and AUC from a finished report directory's summary.
pub fn read_summary(dir: &Path, attack: &str) -> Result<(f64, f64)> {
    let path = Layout::new(dir).report_dir(attack).join("summary.txt");
    let text = read(&path)?;
    let get = |key: &str| -> Result<f64> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path.display().to_string(), format!("missing `{key}`")))
    };
    Ok((get("accuracy")?, get("auc")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.scenario().code(), "FRFR");
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [("bogus = 1", "bogus"), ("[target]\nepoch = 3", "epoch"), ("[defense]\nnoise = 1.0", "noise")] {
            match Config::from_toml(text) {
                Err(Error::Config(msg)) => assert!(msg.contains(key), "{msg}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(Config::from_toml("[target]\nepochs = 0"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[attack]\nmb_metric = \"cider\""), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[defense.dp]\nclip_norm = 0.0\nnoise_multiplier = 1.0"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("name = \"../x\""), Err(Error::Config(_))));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn scenario_applies() {
        let mut c = Config::default();
        c.apply_scenario(&"CRFV".parse().unwrap());
        assert_eq!(c.scenario().code(), "CRFV");
        assert_eq!(c.families(), vec![Family::F, Family::C]);
    }
}
