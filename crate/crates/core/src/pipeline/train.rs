// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Reference-codec training, the three PACE training stages and
//! prosody-swap inference.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, LossHistory, StageTag};
use super::config::{Config, ScheduleConfig};
use super::synth::{generate_synthetic_dataset, standard_corpus};
use crate::audio::ingest;
use crate::codec::{AudioClip, ModelDims, PaceCodec, ReferenceCodec, ScaleLayer, Through, FRAME_HOP};
use crate::disentangle::{fit_q_step, mi_loss_grouped, ClubEstimator, ClubTarget};
use crate::error::{PaceError, Result};
use crate::eval::Variant;
use crate::losses::{
    adversarial_losses, recon_embedding_loss, spectral_loss, total_generator_loss, Discriminator, LossParts,
};
use crate::optim::Adam;
use crate::prosody::{extract_f0, ProsodyFeatures};
use crate::tensor::{no_grad, Tensor};

/// Columns of the per-step training log.
pub const LOG_COLUMNS: [&str; 12] = [
    "step", "l_mi", "l_recon_e", "l_adv", "l_feat", "l_rec", "l_disc", "total", "mi_f0", "mi_uv", "q_nll_f0",
    "q_nll_uv",
];
pub const REFERENCE_LOG_COLUMNS: [&str; 5] = ["step", "l_rec", "l_wave", "commitment", "total"];

/// RNG stream per training run, so that runs do not share random draws.
fn stream_for(stage: StageTag) -> u64 {
    match stage {
        StageTag::Reference => 100,
        StageTag::Stage1 => 101,
        StageTag::Stage2 => 102,
        StageTag::Stage3 => 103,
    }
}

/// A training clip with its pitch track computed once.
#[derive(Clone, Debug)]
pub struct DataClip {
    pub clip: AudioClip,
    pub raw_f0_hz: Vec<f64>,
    pub uv: Vec<u8>,
}

impl DataClip {
    pub fn new(clip: AudioClip) -> Result<Self> {
        clip.validate()?;
        let (raw_f0_hz, uv) = extract_f0(&clip)?;
        Ok(Self { clip, raw_f0_hz, uv })
    }

    /// Audio and prosody of `len` samples from `offset`; both must be
    /// multiples of the frame hop. Bins are re-quantized over the segment,
    /// as they would be for a prompt of that length.
    pub fn segment(&self, offset: usize, len: usize) -> Result<(AudioClip, ProsodyFeatures)> {
        if offset % FRAME_HOP != 0 || len % FRAME_HOP != 0 || offset + len > self.clip.len() {
            return Err(PaceError::contract(format!(
                "segment {offset}+{len} does not fit a clip of {} samples on the frame grid",
                self.clip.len()
            )));
        }
        let audio = AudioClip::new(self.clip.samples()[offset..offset + len].to_vec(), self.clip.sample_rate());
        let (a, b) = (offset / FRAME_HOP, (offset + len) / FRAME_HOP);
        let features = ProsodyFeatures::from_raw(self.raw_f0_hz[a..b].to_vec(), self.uv[a..b].to_vec())?;
        Ok((audio, features))
    }
}

/// Training and held-out clips. For the synthetic corpus `test_meta`
/// records the (timbre, contour) of each held-out clip.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<DataClip>,
    pub test: Vec<DataClip>,
    pub test_meta: Vec<(usize, usize)>,
}

impl Dataset {
    /// The standard synthetic corpus for `cfg.data`.
    pub fn synthetic(cfg: &Config) -> Result<Self> {
        let plan = standard_corpus(&cfg.data);
        let render = |items: &[super::synth::CorpusItem], seed: u64| -> Result<Vec<DataClip>> {
            let specs: Vec<_> = items.iter().map(|i| i.spec.clone()).collect();
            generate_synthetic_dataset(&specs, seed)?
                .into_iter()
                .map(|c| DataClip::new(c.clip))
                .collect()
        };
        Ok(Self {
            train: render(&plan.train, cfg.seed)?,
            test: render(&plan.test, cfg.seed.wrapping_add(1))?,
            test_meta: plan.test.iter().map(|i| (i.timbre, i.contour)).collect(),
        })
    }

    /// WAV files of `dir` in name order, each ingested to a 2 s clip.
    /// Every `test_stride`-th file is held out. A `manifest.csv` with
    /// `file,timbre,contour` columns, if present, labels held-out clips;
    /// otherwise every clip gets its own label.
    pub fn from_wav_dir(dir: &Path, cfg: &Config) -> Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(PaceError::config(format!("no WAV files in {}", dir.display())));
        }
        let labels = read_manifest(&dir.join("manifest.csv"))?;
        let mut data = Self::default();
        for (i, f) in files.iter().enumerate() {
            let clip = DataClip::new(ingest(f, cfg.seed.wrapping_add(i as u64))?.clip)?;
            if i % cfg.data.test_stride == 0 {
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                data.test_meta.push(labels.get(name).copied().unwrap_or((i, i)));
                data.test.push(clip);
            } else {
                data.train.push(clip);
            }
        }
        Ok(data)
    }

    /// The WAV corpus named by `cfg.data.wav_dir`, else the synthetic corpus.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        match &cfg.data.wav_dir {
            Some(dir) => Self::from_wav_dir(dir, cfg),
            None => Self::synthetic(cfg),
        }
    }

    /// Fixed evaluation batch: the first segment of the first held-out clips.
    pub fn probe(&self, cfg: &Config) -> Result<Vec<(AudioClip, ProsodyFeatures)>> {
        let source = if self.test.is_empty() { &self.train } else { &self.test };
        source
            .iter()
            .take(cfg.training.probe_clips.max(1))
            .map(|c| c.segment(0, cfg.training.segment_samples.min(c.clip.len())))
            .collect()
    }

    fn draw(&self, len: usize, rng: &mut impl Rng) -> Result<(AudioClip, ProsodyFeatures)> {
        let c = &self.train[rng.random_range(0..self.train.len())];
        let len = len.min(c.clip.len() / crate::codec::CODEC_HOP * crate::codec::CODEC_HOP);
        let slots = (c.clip.len() - len) / FRAME_HOP;
        let offset = rng.random_range(0..=slots) * FRAME_HOP;
        c.segment(offset, len)
    }
}

fn read_manifest(path: &Path) -> Result<HashMap<String, (usize, usize)>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PaceError::Format(format!("{} lacks column {name}", path.display())))
    };
    let (f, t, c) = (col("file")?, col("timbre")?, col("contour")?);
    for row in r.records() {
        let row = row?;
        let num = |i: usize| {
            row[i]
                .parse::<usize>()
                .map_err(|_| PaceError::Format(format!("{}: bad label {:?}", path.display(), &row[i])))
        };
        out.insert(row[f].to_string(), (num(t)?, num(c)?));
    }
    Ok(out)
}

/// SHA-256 over parameter names, shapes and exact values.
pub fn parameter_hash(named: &[(String, Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.values().iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn set_trainable(named: &[(String, Tensor)], flag: bool) {
    for (_, p) in named {
        p.set_requires_grad(flag);
    }
}

fn tensors(named: &[(String, Tensor)]) -> Vec<Tensor> {
    named.iter().map(|(_, t)| t.clone()).collect()
}

fn adam(s: &ScheduleConfig, cfg: &Config) -> Adam {
    let a = Adam::new(s.learning_rate);
    if cfg.training.grad_clip > 0.0 {
        a.with_clip(cfg.training.grad_clip)
    } else {
        a
    }
}

fn dims_meta(dims: &ModelDims) -> Result<String> {
    toml::to_string(dims).map_err(|e| PaceError::Format(e.to_string()))
}

fn dims_from(ckpt: &Checkpoint) -> Result<ModelDims> {
    toml::from_str(ckpt.meta("dims")?).map_err(|e| PaceError::Format(format!("bad dims metadata: {e}")))
}

/// Signal-to-noise ratio in dB of `estimate` against `clean`.
pub fn snr_db(clean: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = clean.iter().map(|x| x * x).sum();
    let noise: f64 = clean.iter().zip(estimate).map(|(x, y)| (x - y).powi(2)).sum();
    10.0 * (signal / noise.max(1e-300)).log10()
}

/// Loads the reference codec stored in a reference (or later) checkpoint.
pub fn load_reference(ckpt: &Checkpoint) -> Result<ReferenceCodec> {
    let dims = dims_from(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut codec = ReferenceCodec::new(&dims, &mut rng);
    ckpt.load_into(&codec.named_parameters())?;
    codec.rvq.load_state("reference.rvq", &ckpt.lookup())?;
    codec.set_trainable(false);
    let expected = ckpt.meta("reference_hash")?;
    let found = parameter_hash(&codec.encoder_parameters());
    if expected != found {
        return Err(PaceError::Format(format!(
            "reference encoder hash mismatch: checkpoint says {expected}, parameters give {found}"
        )));
    }
    Ok(codec)
}

/// Trains the plain codec whose encoder produces the embedding targets.
///
/// Loss per clip: multi-scale spectral loss, a weighted waveform L1 term
/// and the quantizer commitment term. Codebooks are seeded by k-means on
/// initial encoder outputs and then follow EMA updates.
pub fn train_reference(data: &Dataset, cfg: &Config) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(PaceError::config("reference training needs a non-empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream_for(StageTag::Reference));
    let mut codec = ReferenceCodec::new(&cfg.model, &mut rng);
    codec.rvq.settings = cfg.rvq.clone();

    let pool = no_grad(|| -> Result<Vec<f64>> {
        let mut v = Vec::new();
        for c in data.train.iter().take(cfg.training.kmeans_clips.max(1)) {
            v.extend(codec.encode(&c.clip)?.values.to_vec());
        }
        Ok(v)
    })?;
    codec.rvq.init_kmeans(&pool, &mut rng)?;

    let params = codec.named_parameters();
    set_trainable(&params, true);
    let params = tensors(&params);
    let mut opt = adam(&cfg.reference, cfg);
    let mut history = LossHistory::with_columns(&REFERENCE_LOG_COLUMNS);
    let b = cfg.reference.batch_size;
    for step in 0..cfg.reference.steps {
        let mut stats = codec.rvq.new_stats();
        let mut terms = Vec::with_capacity(b);
        let (mut l_rec, mut l_wave, mut l_commit) = (0.0, 0.0, 0.0);
        for _ in 0..b {
            let (clip, _) = data.draw(cfg.training.segment_samples, &mut rng)?;
            let out = codec.forward(&clip)?;
            let x = clip.to_tensor();
            let rec = spectral_loss(&x, &out.audio)?;
            let wave = out.audio.sub(&x)?.abs().mean();
            l_rec += rec.item();
            l_wave += wave.item();
            l_commit += out.rvq.commitment.item();
            terms.push(Tensor::sum_all(&[
                rec,
                wave.scale(cfg.training.waveform_weight),
                out.rvq.commitment.scale(cfg.rvq.commitment_weight),
            ])?);
            codec.rvq.accumulate(&mut stats, &out.rvq);
        }
        let total = Tensor::sum_all(&terms)?.scale(1.0 / b as f64);
        total.backward()?;
        opt.step(&params);
        codec.rvq.apply_ema(&stats, &mut rng);
        let n = b as f64;
        history.push_row(&[step as f64, l_rec / n, l_wave / n, l_commit / n, total.item()])?;
    }
    codec.set_trainable(false);

    let mut ckpt = Checkpoint::new(StageTag::Reference, cfg.reference.steps as u64, &rng);
    ckpt.metadata.insert("dims".into(), dims_meta(&cfg.model)?);
    ckpt.metadata.insert("reference_hash".into(), parameter_hash(&codec.encoder_parameters()));
    ckpt.add_tensors(&codec.named_state());
    ckpt.history = history;
    Ok(ckpt)
}

/// Which loss components a stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSet {
    pub mi: bool,
    pub recon_e: bool,
    pub adv: bool,
    pub feat: bool,
    pub rec: bool,
    pub disc: bool,
}

/// One training stage of one model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub stage: StageTag,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub losses_enabled: LossSet,
}

impl StageSchedule {
    pub fn new(stage: StageTag, cfg: &Config) -> Result<Self> {
        let (s, losses) = match stage {
            StageTag::Stage1 => (&cfg.stage1, LossSet { mi: false, recon_e: true, adv: false, feat: false, rec: false, disc: false }),
            StageTag::Stage2 => (&cfg.stage2, LossSet { mi: true, recon_e: true, adv: false, feat: false, rec: false, disc: false }),
            StageTag::Stage3 => (&cfg.stage3, LossSet { mi: true, recon_e: true, adv: true, feat: true, rec: true, disc: true }),
            StageTag::Reference => return Err(PaceError::config("the reference codec is trained by train_reference")),
        };
        Ok(Self {
            stage,
            steps: s.steps,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            losses_enabled: losses,
        })
    }
}

/// Everything a PACE training stage reads and writes.
pub struct PaceState {
    pub variant: Variant,
    pub stage: StageTag,
    pub reference: ReferenceCodec,
    pub reference_hash: String,
    pub codec: PaceCodec,
    pub f0_est: ClubEstimator,
    pub uv_est: ClubEstimator,
    pub disc: Discriminator,
    pub rng: ChaCha8Rng,
    pub history: LossHistory,
    pub probe_recon_e: Vec<(usize, f64)>,
}

/// Stage each variant's stage `k` builds on.
pub fn prerequisite(variant: Variant, stage: StageTag) -> Result<StageTag> {
    use StageTag::*;
    Ok(match (variant, stage) {
        (Variant::NoReconE, Stage3) => Reference,
        (Variant::NoReconE, s) => {
            return Err(PaceError::config(format!(
                "variant no-recon-e trains stage 3 only, not {}",
                s.name()
            )))
        }
        (Variant::NoMi, Stage2) => return Err(PaceError::config("variant no-mi skips stage 2")),
        (Variant::NoMi, Stage3) => Stage1,
        (_, Stage1) => Reference,
        (_, Stage2) => Stage1,
        (_, Stage3) => Stage2,
        (_, Reference) => return Err(PaceError::config("the reference codec is trained by train_reference")),
    })
}

fn dependency(stage: StageTag) -> PaceError {
    let needed = match stage {
        StageTag::Reference => "train-ref",
        StageTag::Stage1 => "stage 1",
        StageTag::Stage2 => "stage 2",
        StageTag::Stage3 => "stage 3",
    };
    PaceError::Dependency {
        what: format!("{} checkpoint", stage.name()),
        needed: needed.into(),
    }
}

impl PaceState {
    /// Fresh PACE model around a trained reference codec.
    pub fn initial(reference_ckpt: &Checkpoint, variant: Variant, cfg: &Config) -> Result<Self> {
        if reference_ckpt.stage != StageTag::Reference {
            return Err(dependency(StageTag::Reference));
        }
        let reference = load_reference(reference_ckpt)?;
        let reference_hash = reference_ckpt.meta("reference_hash")?.to_string();
        let dims = reference.dims.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream_for(StageTag::Stage1));
        let mut codec = PaceCodec::from_reference(&reference, &mut rng);
        codec.rvq.settings = cfg.rvq.clone();
        if variant == Variant::NoScale {
            codec.scale = ScaleLayer::identity(dims.codec_dim, dims.scale_hidden);
        }
        let fd = dims.frame_dim();
        let f0_est = ClubEstimator::new(fd, fd, cfg.club.hidden, ClubTarget::F0, &mut rng);
        let uv_est = ClubEstimator::new(fd, fd, cfg.club.hidden, ClubTarget::Uv, &mut rng);
        let disc = Discriminator::new(cfg.discriminator.channels, &mut rng);
        Ok(Self {
            variant,
            stage: StageTag::Reference,
            reference,
            reference_hash,
            codec,
            f0_est,
            uv_est,
            disc,
            rng,
            history: LossHistory::default(),
            probe_recon_e: Vec::new(),
        })
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = self.reference.named_state();
        v.extend(self.codec.named_state());
        v.extend(self.f0_est.named_parameters("club.f0"));
        v.extend(self.uv_est.named_parameters("club.uv"));
        v.extend(self.disc.named_parameters("disc"));
        v
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.stage, step, &self.rng);
        c.metadata.insert("dims".into(), dims_meta(&self.reference.dims)?);
        c.metadata.insert("variant".into(), self.variant.name().into());
        c.metadata.insert("reference_hash".into(), self.reference_hash.clone());
        c.metadata.insert("club_hidden".into(), self.f0_est.mean_net.hidden().to_string());
        c.metadata.insert("disc_channels".into(), self.disc.channels().to_string());
        for (s, v) in &self.probe_recon_e {
            c.metadata.insert(format!("probe_recon_e_step_{s}"), format!("{v:e}"));
        }
        c.add_tensors(&self.named_tensors());
        c.history = self.history.clone();
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &Config) -> Result<Self> {
        if ckpt.stage == StageTag::Reference {
            return Err(PaceError::State("a reference checkpoint holds no PACE model".into()));
        }
        let variant = Variant::parse(ckpt.meta("variant")?)?;
        let dims = dims_from(ckpt)?;
        let hidden: usize = ckpt.meta("club_hidden")?.parse().map_err(|_| PaceError::Format("bad club_hidden".into()))?;
        let channels: usize =
            ckpt.meta("disc_channels")?.parse().map_err(|_| PaceError::Format("bad disc_channels".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reference = ReferenceCodec::new(&dims, &mut rng);
        let mut codec = PaceCodec::new(&dims, &mut rng);
        if variant == Variant::NoScale {
            codec.scale = ScaleLayer::identity(dims.codec_dim, dims.scale_hidden);
        }
        let fd = dims.frame_dim();
        let f0_est = ClubEstimator::new(fd, fd, hidden, ClubTarget::F0, &mut rng);
        let uv_est = ClubEstimator::new(fd, fd, hidden, ClubTarget::Uv, &mut rng);
        let disc = Discriminator::new(channels, &mut rng);
        reference.rvq.load_state("reference.rvq", &ckpt.lookup())?;
        codec.rvq.load_state("pace.rvq", &ckpt.lookup())?;
        reference.rvq.settings = cfg.rvq.clone();
        codec.rvq.settings = cfg.rvq.clone();
        let s = Self {
            variant,
            stage: ckpt.stage,
            reference,
            reference_hash: ckpt.meta("reference_hash")?.to_string(),
            codec,
            f0_est,
            uv_est,
            disc,
            rng: ckpt.rng.restore(),
            history: ckpt.history.clone(),
            probe_recon_e: Vec::new(),
        };
        let named: Vec<_> = s.named_tensors().into_iter().filter(|(n, _)| !n.contains(".rvq.")).collect();
        ckpt.load_into(&named)?;
        s.reference.set_trainable(false);
        if parameter_hash(&s.reference.encoder_parameters()) != s.reference_hash {
            return Err(PaceError::Format("reference encoder does not match its recorded hash".into()));
        }
        Ok(s)
    }

    fn trainable(&self, stage: StageTag) -> Vec<(String, Tensor)> {
        let c = &self.codec;
        let scale = if self.variant == Variant::NoScale {
            Vec::new()
        } else {
            c.scale_parameters()
        };
        match stage {
            StageTag::Stage1 => [c.stage1_parameters(), c.stage2_parameters(), scale].concat(),
            StageTag::Stage2 => [c.stage1_parameters(), c.prosody_parameters()].concat(),
            _ => [
                c.stage1_parameters(),
                c.stage2_parameters(),
                scale,
                c.prosody_parameters(),
                c.decoder_parameters(),
            ]
            .concat(),
        }
    }

    /// Relabels a stage-1 model of the full variant as the no-mi variant
    /// (and back); their stage-1 training is identical.
    pub fn as_variant(mut self, variant: Variant) -> Result<Self> {
        let interchangeable = |v| matches!(v, Variant::Full | Variant::NoMi);
        if self.variant != variant
            && !(self.stage == StageTag::Stage1 && interchangeable(self.variant) && interchangeable(variant))
        {
            return Err(PaceError::State(format!(
                "a {} {} model cannot serve as {}",
                self.variant.name(),
                self.stage.name(),
                variant.name()
            )));
        }
        self.variant = variant;
        Ok(self)
    }

    /// Mean `L_recon^e` over a fixed batch, without gradients.
    pub fn probe_recon_e(&self, probe: &[(AudioClip, ProsodyFeatures)], with_prosody: bool) -> Result<f64> {
        no_grad(|| {
            let mut total = 0.0;
            for (clip, feats) in probe {
                let target = self.reference.encode(clip)?;
                let out = self.codec.forward(clip, with_prosody.then_some(feats), Through::Scale)?;
                total += recon_embedding_loss(&out.scaled, &target)?.item();
            }
            Ok(total / probe.len() as f64)
        })
    }

    /// Runs one training stage and returns its checkpoint.
    pub fn run_stage(&mut self, stage: StageTag, data: &Dataset, cfg: &Config) -> Result<Checkpoint> {
        cfg.validate()?;
        let needed = prerequisite(self.variant, stage)?;
        if self.stage != needed {
            return Err(dependency(needed));
        }
        if data.train.is_empty() {
            return Err(PaceError::config("training needs a non-empty dataset"));
        }
        let sched = StageSchedule::new(stage, cfg)?;
        let mut weights = cfg.loss.clone();
        if self.variant == Variant::NoReconE {
            weights.lambda_recon_e = 0.0;
        }
        if self.variant == Variant::NoMi {
            weights.lambda_mi = 0.0;
        }
        let enabled = sched.losses_enabled;
        let with_prosody = stage != StageTag::Stage1;
        let probe = data.probe(cfg)?;

        self.rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.rng.set_stream(stream_for(stage));
        set_trainable(&self.codec.named_parameters(), false);
        let trainable = self.trainable(stage);
        set_trainable(&trainable, true);
        let params = tensors(&trainable);
        let disc_params = self.disc.parameters();
        let mut opt = adam(
            &ScheduleConfig {
                steps: sched.steps,
                learning_rate: sched.learning_rate,
                batch_size: sched.batch_size,
            },
            cfg,
        );
        let mut disc_opt = Adam::new(cfg.discriminator.learning_rate);
        let mut history = LossHistory::with_columns(&LOG_COLUMNS);
        self.probe_recon_e.clear();
        let group = cfg.club.frames_per_utterance;

        for step in 0..sched.steps {
            if step == cfg.training.probe_step {
                self.probe_recon_e.push((step, self.probe_recon_e(&probe, with_prosody)?));
            }
            let mut stats = self.codec.rvq.new_stats();
            let mut recon_terms = Vec::new();
            let mut rec_terms = Vec::new();
            let mut adv_terms = Vec::new();
            let mut feat_terms = Vec::new();
            let mut disc_terms = Vec::new();
            let (mut xs, mut f0s, mut uvs) = (Vec::new(), Vec::new(), Vec::new());
            let through = if enabled.rec { Through::Decode } else { Through::Scale };
            for _ in 0..sched.batch_size {
                let (clip, feats) = data.draw(cfg.training.segment_samples, &mut self.rng)?;
                let target = no_grad(|| self.reference.encode(&clip))?;
                let out = self.codec.forward(&clip, with_prosody.then_some(&feats), through)?;
                recon_terms.push(recon_embedding_loss(&out.scaled, &target)?);
                if enabled.mi {
                    let frames = out.e_f.frames();
                    if frames < group {
                        return Err(PaceError::config(format!(
                            "segments of {frames} frames are shorter than club.frames_per_utterance = {group}"
                        )));
                    }
                    let mut idx = sample(&mut self.rng, frames, group).into_vec();
                    idx.sort_unstable();
                    let pros = out.prosody.as_ref().expect("prosody present");
                    xs.push(out.e_f.values.gather_rows(&idx)?);
                    f0s.push(pros.e_f0.detach().gather_rows(&idx)?);
                    uvs.push(pros.e_uv.detach().gather_rows(&idx)?);
                }
                if enabled.rec {
                    let rvq = out.rvq.as_ref().expect("quantized");
                    let audio = out.audio.as_ref().expect("decoded");
                    let x = clip.to_tensor();
                    rec_terms.push(spectral_loss(&x, audio)?.add(&rvq.commitment.scale(cfg.rvq.commitment_weight))?);
                    let a = adversarial_losses(&self.disc, &x, audio)?;
                    adv_terms.push(a.adv);
                    feat_terms.push(a.feat);
                    disc_terms.push(a.disc);
                    self.codec.rvq.accumulate(&mut stats, rvq);
                }
            }
            let mean = |v: &[Tensor]| -> Result<Option<Tensor>> {
                if v.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(Tensor::sum_all(v)?.scale(1.0 / v.len() as f64)))
                }
            };
            let (mut nll_f0, mut nll_uv) = (0.0, 0.0);
            let mut mi_parts = None;
            if enabled.mi {
                let x = Tensor::concat_rows(&xs)?;
                let y_f0 = Tensor::concat_rows(&f0s)?;
                let y_uv = Tensor::concat_rows(&uvs)?;
                for _ in 0..cfg.club.fit_steps {
                    nll_f0 = fit_q_step(&x, &y_f0, &mut self.f0_est, cfg.club.learning_rate)?;
                    nll_uv = fit_q_step(&x, &y_uv, &mut self.uv_est, cfg.club.learning_rate)?;
                }
                mi_parts = Some(mi_loss_grouped(&x, &y_f0, &y_uv, &self.f0_est, &self.uv_est, group)?);
            }
            let parts = LossParts {
                mi: mi_parts.as_ref().map(|m| m.total.clone()),
                recon_e: mean(&recon_terms)?,
                adv: mean(&adv_terms)?,
                feat: mean(&feat_terms)?,
                rec: mean(&rec_terms)?,
            };
            let total = total_generator_loss(&parts, &weights)?;
            if total.requires_grad() {
                total.backward()?;
            }
            opt.step(&params);
            let l_disc = mean(&disc_terms)?;
            if let Some(d) = &l_disc {
                d.backward()?;
                disc_opt.step(&disc_params);
                self.codec.rvq.apply_ema(&stats, &mut self.rng);
            }
            let v = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::item);
            history.push_row(&[
                step as f64,
                v(&parts.mi),
                v(&parts.recon_e),
                v(&parts.adv),
                v(&parts.feat),
                v(&parts.rec),
                v(&l_disc),
                total.item(),
                mi_parts.as_ref().map_or(0.0, |m| m.f0.item()),
                mi_parts.as_ref().map_or(0.0, |m| m.uv.item()),
                nll_f0,
                nll_uv,
            ])?;
        }
        self.probe_recon_e.push((sched.steps, self.probe_recon_e(&probe, with_prosody)?));
        set_trainable(&self.codec.named_parameters(), false);
        self.stage = stage;
        self.history = history;
        self.to_checkpoint(sched.steps as u64)
    }

    /// Converts `target` to follow the pitch of `prosody_prompt`. Content
    /// and timbre come from `target`; the prompt's features are trimmed or
    /// padded to the target's frame count.
    pub fn prosody_swap_inference(&self, target: &AudioClip, prosody_prompt: &AudioClip) -> Result<AudioClip> {
        if self.stage != StageTag::Stage3 {
            return Err(PaceError::State(format!(
                "inference needs a stage 3 model, this one finished {}",
                self.stage.name()
            )));
        }
        target.validate()?;
        prosody_prompt.validate()?;
        let features = ProsodyFeatures::extract(prosody_prompt)?.fit_to(target.len() / FRAME_HOP);
        no_grad(|| {
            let codes = self.codec.encode_codes(target, &features)?;
            self.codec.decode_codes(&codes)
        })
    }
}

/// Held-out MI estimate: fresh estimators (seeded by `seed`) are fitted on
/// the frame embeddings of `probe` for `fit_steps` steps at `lr`, then the
/// grouped bound is evaluated on the same batch.
pub fn probe_mi(
    codec: &PaceCodec,
    probe: &[(AudioClip, ProsodyFeatures)],
    cfg: &Config,
    fit_steps: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let group = cfg.club.frames_per_utterance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut xs, mut f0s, mut uvs) = (Vec::new(), Vec::new(), Vec::new());
    no_grad(|| -> Result<()> {
        for (clip, feats) in probe {
            let e_f = codec.encode_stage1(clip)?;
            let pros = codec.embed_prosody(feats)?;
            let frames = e_f.frames();
            let mut idx = sample(&mut rng, frames, group.min(frames)).into_vec();
            idx.sort_unstable();
            xs.push(e_f.values.gather_rows(&idx)?);
            f0s.push(pros.e_f0.gather_rows(&idx)?);
            uvs.push(pros.e_uv.gather_rows(&idx)?);
        }
        Ok(())
    })?;
    let x = Tensor::concat_rows(&xs)?;
    let y_f0 = Tensor::concat_rows(&f0s)?;
    let y_uv = Tensor::concat_rows(&uvs)?;
    let fd = codec.dims.frame_dim();
    let mut f0_est = ClubEstimator::new(fd, fd, cfg.club.hidden, ClubTarget::F0, &mut rng);
    let mut uv_est = ClubEstimator::new(fd, fd, cfg.club.hidden, ClubTarget::Uv, &mut rng);
    for _ in 0..fit_steps {
        fit_q_step(&x, &y_f0, &mut f0_est, lr)?;
        fit_q_step(&x, &y_uv, &mut uv_est, lr)?;
    }
    no_grad(|| Ok(mi_loss_grouped(&x, &y_f0, &y_uv, &f0_est, &uv_est, group.min(x.dim(0)))?.total.item()))
}
