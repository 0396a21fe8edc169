//! Reproducible experiment orchestration.
//!
//! One output root per run. Stages (`train-teacher`, `train-diffusion`,
//! `generate`, `distill`, `evaluate`, `ablate-lca`, `visualize`) read and
//! write artifacts under that root, record themselves in an append-only run
//! manifest with wall-clock and artifact digests, and verify that every
//! consumed artifact was produced under the same config hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::config::{CodecKind, OutputLayout, RunConfig};
use crate::data::{
    self, generate_dataset, generate_roster_corpus, generic_domain, teacher_domain, ImageDataset,
};
use crate::diffusion::NoiseSchedule;
use crate::distill::{distill_round, DistillEpochMetric, MsarcHead};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::checkpoint::{file_sha256, Checkpoint};
use crate::nn::classifier::CnnClassifier;
use crate::nn::codec::{AnyCodec, Codec, ConvAutoencoder, IdentityCodec};
use crate::nn::denoiser::CondUnet;
use crate::nn::train::{train_classifier, train_codec, train_denoiser};
use crate::rng::derive_seed;
use crate::synthesis::{
    build_dataset, AugmentMode, SyntheticManifest, SynthesisConfig, SynthesisContext,
};

// ---- run manifest -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub status: String,
    pub wall_clock_s: f64,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub stages: Vec<StageEntry>,
}

impl RunManifest {
    fn load_or_new(path: &Path, config_hash: &str) -> Result<Self> {
        if path.exists() {
            let m: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
            if m.config_hash != config_hash {
                return Err(Error::HashMismatch {
                    artifact: format!("run manifest {}", path.display()),
                    found: m.config_hash,
                    expected: config_hash.to_string(),
                });
            }
            Ok(m)
        } else {
            Ok(RunManifest {
                config_hash: config_hash.to_string(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                stages: Vec::new(),
            })
        }
    }

    fn append(&mut self, path: &Path, entry: StageEntry) -> Result<()> {
        self.stages.push(entry);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

// ---- evaluation report ------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

/// Top-1 accuracy, per-class recall and confusion counts. Deterministic.
pub fn evaluate(net: &CnnClassifier, ds: &ImageDataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    if ds.num_classes != net.cfg.num_classes {
        return Err(Error::ClassSpaceMismatch(format!(
            "evaluation set has {} classes, classifier {}",
            ds.num_classes, net.cfg.num_classes
        )));
    }
    let c = ds.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut done = 0usize;
    while done < ds.len() {
        let hi = (done + 256).min(ds.len());
        let idx: Vec<usize> = (done..hi).collect();
        let (images, labels) = ds.batch(&idx);
        for (pred, y) in net.predict(&images).into_iter().zip(labels) {
            confusion[y][pred] += 1;
        }
        done = hi;
    }
    let mut correct = 0usize;
    let mut recall = Vec::with_capacity(c);
    for (y, row) in confusion.iter().enumerate() {
        let class_total: usize = row.iter().sum();
        correct += row[y];
        recall.push(if class_total == 0 {
            0.0
        } else {
            row[y] as f64 / class_total as f64
        });
    }
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        per_class_recall: recall,
        confusion,
        count: ds.len(),
    })
}

// ---- ablation ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub accuracies: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<ArmResult>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---- harness ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Eval,
}

pub struct Harness {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: OutputLayout,
}

impl Harness {
    pub fn new(cfg: RunConfig, out_root_override: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let root = cfg.resolved_output_dir(out_root_override);
        Ok(Harness {
            cfg,
            hash,
            out: OutputLayout::new(root),
        })
    }

    fn run_stage<F>(&self, name: &str, f: F) -> Result<StageEntry>
    where
        F: FnOnce() -> Result<BTreeMap<String, String>>,
    {
        let mut manifest = RunManifest::load_or_new(&self.out.run_manifest(), &self.hash)?;
        let start = Instant::now();
        match f() {
            Ok(outputs) => {
                let entry = StageEntry {
                    name: name.to_string(),
                    status: "ok".into(),
                    wall_clock_s: start.elapsed().as_secs_f64(),
                    outputs,
                };
                manifest.append(&self.out.run_manifest(), entry.clone())?;
                Ok(entry)
            }
            Err(e) => {
                let mut outputs = BTreeMap::new();
                outputs.insert("error".into(), e.to_string());
                let entry = StageEntry {
                    name: name.to_string(),
                    status: "failed".into(),
                    wall_clock_s: start.elapsed().as_secs_f64(),
                    outputs,
                };
                let _ = manifest.append(&self.out.run_manifest(), entry);
                Err(e)
            }
        }
    }

    // ---- data -----------------------------------------------------------

    /// Materialize the teacher-domain splits and the generic corpus on disk
    /// (deterministic, so re-materializing overwrites identical content).
    pub fn materialize_data(&self) -> Result<()> {
        let d = &self.cfg.dataset;
        let train = generate_dataset(
            &d.classes,
            d.train_per_class,
            d.resolution,
            &teacher_domain(),
            derive_seed(self.cfg.seed, "data-train", &[]),
        )?;
        data::save_dataset(&self.out.train_data(), &train)?;
        let eval = generate_dataset(
            &d.classes,
            d.eval_per_class,
            d.resolution,
            &teacher_domain(),
            derive_seed(self.cfg.seed, "data-eval", &[]),
        )?;
        data::save_dataset(&self.out.eval_data(), &eval)?;
        let corpus = generate_roster_corpus(
            d.corpus_per_class,
            d.resolution,
            &generic_domain(),
            derive_seed(self.cfg.seed, "data-corpus", &[]),
        )?;
        data::save_dataset(&self.out.corpus_data(), &corpus)?;
        Ok(())
    }

    pub fn load_split(&self, split: EvalSplit) -> Result<ImageDataset> {
        let dir = match split {
            EvalSplit::Train => self.out.train_data(),
            EvalSplit::Eval => self.out.eval_data(),
        };
        if !dir.join("meta.json").exists() {
            self.materialize_data()?;
        }
        data::load_dataset(&dir)
    }

    // ---- checkpoint plumbing ---------------------------------------------

    fn check_hash(&self, ckpt: &Checkpoint, what: &str) -> Result<()> {
        if ckpt.config_hash != self.hash {
            return Err(Error::HashMismatch {
                artifact: what.to_string(),
                found: ckpt.config_hash.clone(),
                expected: self.hash.clone(),
            });
        }
        Ok(())
    }

    pub fn load_teacher(&self) -> Result<CnnClassifier> {
        let ckpt = Checkpoint::load(&self.out.teacher_ckpt())?;
        self.check_hash(&ckpt, "teacher checkpoint")?;
        CnnClassifier::from_checkpoint(&ckpt)
    }

    pub fn load_denoiser(&self) -> Result<CondUnet> {
        let ckpt = Checkpoint::load(&self.out.denoiser_ckpt())?;
        self.check_hash(&ckpt, "denoiser checkpoint")?;
        CondUnet::from_checkpoint(&ckpt)
    }

    pub fn load_codec(&self) -> Result<AnyCodec> {
        match self.cfg.codec.kind {
            CodecKind::Identity => Ok(AnyCodec::Identity(IdentityCodec)),
            CodecKind::Autoencoder => {
                let ckpt = Checkpoint::load(&self.out.codec_ckpt())?;
                self.check_hash(&ckpt, "codec checkpoint")?;
                Ok(AnyCodec::Autoencoder(ConvAutoencoder::from_checkpoint(
                    &ckpt,
                )?))
            }
        }
    }

    pub fn fresh_student(&self) -> Result<CnnClassifier> {
        CnnClassifier::new(
            self.cfg.student_classifier_config(),
            derive_seed(self.cfg.seed, "student-init", &[]),
        )
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_kind(self.cfg.schedule.kind, self.cfg.synthesis.total_steps)
    }

    // ---- stages -----------------------------------------------------------

    pub fn train_teacher(&self) -> Result<StageEntry> {
        self.run_stage("train-teacher", || {
            self.materialize_data()?;
            let train = data::load_dataset(&self.out.train_data())?;
            let eval = data::load_dataset(&self.out.eval_data())?;
            let mut teacher = CnnClassifier::new(
                self.cfg.teacher_classifier_config(),
                derive_seed(self.cfg.seed, "teacher-init", &[]),
            )?;
            let curve = train_classifier(
                &mut teacher,
                &train,
                Some(&eval),
                &self.cfg.teacher_train,
                derive_seed(self.cfg.seed, "train-teacher", &[]),
            )?;
            metrics::write_training_curve(&self.out.teacher_curve(), &self.hash, &curve)?;
            teacher
                .to_checkpoint(&self.hash)
                .save(&self.out.teacher_ckpt())?;
            let last = curve.last().unwrap();
            let mut outputs = BTreeMap::new();
            outputs.insert(
                "teacher_ckpt_sha256".into(),
                file_sha256(&self.out.teacher_ckpt())?,
            );
            outputs.insert("train_accuracy".into(), last.train_accuracy.to_string());
            outputs.insert(
                "eval_accuracy".into(),
                last.eval_accuracy.unwrap_or(0.0).to_string(),
            );
            outputs.insert(
                "metrics".into(),
                self.out.teacher_curve().display().to_string(),
            );
            Ok(outputs)
        })
    }

    pub fn train_diffusion(&self) -> Result<StageEntry> {
        self.run_stage("train-diffusion", || {
            self.materialize_data()?;
            let corpus = data::load_dataset(&self.out.corpus_data())?;
            let mut outputs = BTreeMap::new();

            let codec: AnyCodec = match self.cfg.codec.kind {
                CodecKind::Identity => AnyCodec::Identity(IdentityCodec),
                CodecKind::Autoencoder => {
                    let mut ae = ConvAutoencoder::new(
                        1,
                        self.cfg.codec.latent_channels,
                        self.cfg.codec.hidden,
                        derive_seed(self.cfg.seed, "codec-init", &[]),
                    );
                    let curve = train_codec(
                        &mut ae,
                        &corpus,
                        self.cfg.codec.train_steps,
                        32,
                        2e-3,
                        derive_seed(self.cfg.seed, "train-codec", &[]),
                    )?;
                    metrics::write_step_curve(&self.out.codec_curve(), &self.hash, &curve)?;
                    ae.to_checkpoint(&self.hash).save(&self.out.codec_ckpt())?;
                    outputs.insert(
                        "codec_ckpt_sha256".into(),
                        file_sha256(&self.out.codec_ckpt())?,
                    );
                    AnyCodec::Autoencoder(ae)
                }
            };

            // The denoiser models the codec's latent space.
            let latents = codec.encode(&corpus.images);
            let latent_corpus = ImageDataset {
                images: latents,
                labels: corpus.labels.clone(),
                num_classes: corpus.num_classes,
            };
            let schedule = self.schedule()?;
            let mut denoiser = CondUnet::new(
                self.cfg.denoiser_config(),
                derive_seed(self.cfg.seed, "denoiser-init", &[]),
            )?;
            let curve = train_denoiser(
                &mut denoiser,
                &latent_corpus,
                &schedule,
                &self.cfg.denoiser.train,
                derive_seed(self.cfg.seed, "train-denoiser", &[]),
            )?;
            metrics::write_step_curve(&self.out.denoiser_curve(), &self.hash, &curve)?;
            let mut ckpt = denoiser.to_checkpoint(&self.hash);
            ckpt.meta.insert(
                "schedule_alpha_bar".into(),
                serde_json::to_value(schedule.coefficients())?,
            );
            ckpt.save(&self.out.denoiser_ckpt())?;
            outputs.insert(
                "denoiser_ckpt_sha256".into(),
                file_sha256(&self.out.denoiser_ckpt())?,
            );
            outputs.insert(
                "final_loss".into(),
                curve.last().map(|m| m.loss).unwrap_or(f64::NAN).to_string(),
            );
            Ok(outputs)
        })
    }

    /// Stage-2 entry: synthesize the dataset. In alternating mode the stage
    /// interleaves generation rounds with distillation epochs and records the
    /// student checkpoint hash chain.
    pub fn generate(&self) -> Result<StageEntry> {
        self.run_stage("generate", || {
            self.cfg.synthesis.validate()?;
            let teacher = self.load_teacher()?;
            let denoiser = self.load_denoiser()?;
            let codec = self.load_codec()?;
            let schedule = self.schedule()?;
            let mut outputs = BTreeMap::new();
            outputs.insert(
                "teacher_ckpt_sha256".into(),
                file_sha256(&self.out.teacher_ckpt())?,
            );
            outputs.insert(
                "denoiser_ckpt_sha256".into(),
                file_sha256(&self.out.denoiser_ckpt())?,
            );

            if self.cfg.distill.alternating {
                self.generate_alternating(&teacher, &denoiser, &codec, &schedule, &mut outputs)?;
            } else {
                let student = self.fresh_student()?;
                let ctx = SynthesisContext {
                    teacher: &teacher,
                    student: &student,
                    denoiser: &denoiser,
                    codec: &codec,
                    schedule: &schedule,
                    cfg: &self.cfg.synthesis,
                    class_conditions: &self.cfg.dataset.classes,
                };
                let (manifest, synth_metrics) = build_dataset(
                    &ctx,
                    &self.out.synth_dir(),
                    &self.hash,
                    derive_seed(self.cfg.seed, "generate", &[]),
                )?;
                metrics::write_synthesis_metrics(
                    &self.out.synthesis_metrics(),
                    &self.hash,
                    &synth_metrics,
                )?;
                outputs.insert("records".into(), manifest.records.len().to_string());
                outputs.insert(
                    "per_class_counts".into(),
                    format!("{:?}", manifest.meta.per_class_counts),
                );
            }
            Ok(outputs)
        })
    }

    fn generate_alternating(
        &self,
        teacher: &CnnClassifier,
        denoiser: &CondUnet,
        codec: &AnyCodec,
        schedule: &NoiseSchedule,
        outputs: &mut BTreeMap<String, String>,
    ) -> Result<()> {
        let mut student = self.fresh_student()?;
        let mut msarc = MsarcHead::new(
            &student,
            teacher,
            &self.cfg.distill.kd,
            derive_seed(self.cfg.seed, "msarc-init", &[]),
        )?;
        let eval = self.load_split(EvalSplit::Eval)?;
        let mut all_records = Vec::new();
        let mut all_synth_metrics = Vec::new();
        let mut all_distill_metrics = Vec::new();
        for round in 1..=self.cfg.synthesis.rounds {
            // Hash of the student checkpoint this round's generation uses.
            student
                .to_checkpoint(&self.hash)
                .save(&self.out.student_ckpt())?;
            let student_in = file_sha256(&self.out.student_ckpt())?;
            let ctx = SynthesisContext {
                teacher,
                student: &student,
                denoiser,
                codec,
                schedule,
                cfg: &self.cfg.synthesis,
                class_conditions: &self.cfg.dataset.classes,
            };
            let out = crate::synthesis::generate_round(
                &ctx,
                round,
                derive_seed(self.cfg.seed, "generate-round", &[round as u64]),
            )?;
            all_records.extend(out.records);
            all_synth_metrics.extend(out.metrics);
            let manifest = SyntheticManifest::write(
                &self.out.synth_dir(),
                &self.hash,
                teacher.cfg.num_classes,
                round,
                &all_records,
            )?;
            let dataset = manifest.load_as_dataset(teacher.cfg.num_classes)?;
            let dm = distill_round(
                &mut student,
                teacher,
                &mut msarc,
                &dataset,
                Some(&eval),
                &self.cfg.distill.kd,
                round,
                derive_seed(self.cfg.seed, "distill-round", &[round as u64]),
            )?;
            all_distill_metrics.extend(dm);
            student
                .to_checkpoint(&self.hash)
                .save(&self.out.student_ckpt())?;
            let student_out = file_sha256(&self.out.student_ckpt())?;
            outputs.insert(format!("round{round}_student_in_sha256"), student_in);
            outputs.insert(format!("round{round}_student_out_sha256"), student_out);
        }
        metrics::write_synthesis_metrics(
            &self.out.synthesis_metrics(),
            &self.hash,
            &all_synth_metrics,
        )?;
        metrics::write_distill_metrics(
            &self.out.distill_metrics(),
            &self.hash,
            &all_distill_metrics,
        )?;
        outputs.insert("records".into(), all_records.len().to_string());
        outputs.insert(
            "student_ckpt_sha256".into(),
            file_sha256(&self.out.student_ckpt())?,
        );
        Ok(())
    }

    /// Distill a fresh student on a pre-built manifest. Never touches the
    /// denoiser checkpoint.
    pub fn distill(&self, manifest_dir: Option<&Path>) -> Result<StageEntry> {
        self.run_stage("distill", || {
            let dir = manifest_dir
                .map(Path::to_path_buf)
                .unwrap_or_else(|| self.out.synth_dir());
            let manifest = SyntheticManifest::load(&dir)?;
            if manifest.meta.config_hash != self.hash {
                return Err(Error::HashMismatch {
                    artifact: format!("synthetic manifest {}", dir.display()),
                    found: manifest.meta.config_hash.clone(),
                    expected: self.hash.clone(),
                });
            }
            let teacher = self.load_teacher()?;
            let dataset = manifest.load_as_dataset(teacher.cfg.num_classes)?;
            let eval = self.load_split(EvalSplit::Eval)?;
            let (student, dm) = self.distill_fresh_student(&teacher, &dataset, Some(&eval), 0)?;
            metrics::write_distill_metrics(&self.out.distill_metrics(), &self.hash, &dm)?;
            student
                .to_checkpoint(&self.hash)
                .save(&self.out.student_ckpt())?;
            let mut outputs = BTreeMap::new();
            outputs.insert(
                "student_ckpt_sha256".into(),
                file_sha256(&self.out.student_ckpt())?,
            );
            outputs.insert("records".into(), manifest.records.len().to_string());
            if let Some(m) = dm.last() {
                outputs.insert(
                    "final_eval_accuracy".into(),
                    m.eval_accuracy.unwrap_or(0.0).to_string(),
                );
            }
            Ok(outputs)
        })
    }

    /// Fresh student + projection heads, trained on `dataset` with the run's
    /// KD config. `seed_salt` decorrelates repeated runs (ablation arms).
    pub fn distill_fresh_student(
        &self,
        teacher: &CnnClassifier,
        dataset: &ImageDataset,
        eval: Option<&ImageDataset>,
        seed_salt: u64,
    ) -> Result<(CnnClassifier, Vec<DistillEpochMetric>)> {
        let mut student = CnnClassifier::new(
            self.cfg.student_classifier_config(),
            derive_seed(self.cfg.seed, "student-init", &[seed_salt]),
        )?;
        let mut msarc = MsarcHead::new(
            &student,
            teacher,
            &self.cfg.distill.kd,
            derive_seed(self.cfg.seed, "msarc-init", &[seed_salt]),
        )?;
        let dm = distill_round(
            &mut student,
            teacher,
            &mut msarc,
            dataset,
            eval,
            &self.cfg.distill.kd,
            1,
            derive_seed(self.cfg.seed, "distill", &[seed_salt]),
        )?;
        Ok((student, dm))
    }

    pub fn evaluate_stage(&self, ckpt: Option<&Path>, split: EvalSplit) -> Result<EvalReport> {
        let mut report: Option<EvalReport> = None;
        self.run_stage("evaluate", || {
            let path = ckpt
                .map(Path::to_path_buf)
                .unwrap_or_else(|| self.out.student_ckpt());
            let loaded = Checkpoint::load(&path)?;
            self.check_hash(&loaded, "evaluated checkpoint")?;
            let net = CnnClassifier::from_checkpoint(&loaded)?;
            let ds = self.load_split(split)?;
            let rep = evaluate(&net, &ds)?;
            if let Some(parent) = self.out.eval_report().parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(
                self.out.eval_report(),
                serde_json::to_string_pretty(&rep)?,
            )?;
            let mut outputs = BTreeMap::new();
            outputs.insert("accuracy".into(), rep.accuracy.to_string());
            outputs.insert("count".into(), rep.count.to_string());
            outputs.insert(
                "report".into(),
                self.out.eval_report().display().to_string(),
            );
            report = Some(rep);
            Ok(outputs)
        })?;
        Ok(report.unwrap())
    }

    /// Run the four latent-augmentation arms with paired seeds and report
    /// per-arm accuracies plus medians.
    pub fn ablate_lca(&self, seeds: usize) -> Result<AblationTable> {
        let mut table: Option<AblationTable> = None;
        self.run_stage("ablate-lca", || {
            if seeds == 0 {
                return Err(Error::Config("ablation needs at least one seed".into()));
            }
            let teacher = self.load_teacher()?;
            let denoiser = self.load_denoiser()?;
            let codec = self.load_codec()?;
            let schedule = self.schedule()?;
            let eval = self.load_split(EvalSplit::Eval)?;
            let arms = [
                AugmentMode::None,
                AugmentMode::Traditional,
                AugmentMode::Mixup,
                AugmentMode::Cutmix,
            ];
            let mut rows = Vec::new();
            for arm in arms {
                let mut synthesis = self.cfg.synthesis.clone();
                synthesis.augment = arm;
                let mut accuracies = Vec::new();
                for k in 0..seeds {
                    let acc = self.run_arm(
                        &teacher,
                        &denoiser,
                        &codec,
                        &schedule,
                        &synthesis,
                        &eval,
                        &format!("{arm}_s{k}"),
                        // seeds are shared across arms so comparisons pair up
                        derive_seed(self.cfg.seed, "ablate-seed", &[k as u64]),
                        k as u64,
                    )?;
                    accuracies.push(acc);
                }
                rows.push(ArmResult {
                    arm: arm.to_string(),
                    median: median(&accuracies),
                    accuracies,
                });
            }
            let t = AblationTable { rows };
            fs::create_dir_all(self.out.ablation_dir())?;
            let mut csv = String::from("arm,median,accuracies\n");
            for row in &t.rows {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    row.arm,
                    row.median,
                    row.accuracies
                        .iter()
                        .map(|a| a.to_string())
                        .collect::<Vec<_>>()
                        .join(";")
                ));
            }
            fs::write(self.out.ablation_table(), csv)?;
            let mut outputs = BTreeMap::new();
            for row in &t.rows {
                outputs.insert(format!("median_{}", row.arm), row.median.to_string());
            }
            outputs.insert(
                "table".into(),
                self.out.ablation_table().display().to_string(),
            );
            table = Some(t);
            Ok(outputs)
        })?;
        Ok(table.unwrap())
    }

    /// One generate+distill+evaluate pass with an overridden synthesis
    /// config, used by the ablation arms.
    #[allow(clippy::too_many_arguments)]
    fn run_arm(
        &self,
        teacher: &CnnClassifier,
        denoiser: &CondUnet,
        codec: &AnyCodec,
        schedule: &NoiseSchedule,
        synthesis: &SynthesisConfig,
        eval: &ImageDataset,
        tag: &str,
        gen_seed: u64,
        seed_salt: u64,
    ) -> Result<f64> {
        let student = CnnClassifier::new(
            self.cfg.student_classifier_config(),
            derive_seed(self.cfg.seed, "student-init", &[seed_salt]),
        )?;
        let ctx = SynthesisContext {
            teacher,
            student: &student,
            denoiser,
            codec,
            schedule,
            cfg: synthesis,
            class_conditions: &self.cfg.dataset.classes,
        };
        let dir = self.out.ablation_dir().join(tag);
        let (manifest, _metrics) = build_dataset(&ctx, &dir, &self.hash, gen_seed)?;
        let dataset = manifest.load_as_dataset(teacher.cfg.num_classes)?;
        let (student, _dm) = self.distill_fresh_student(teacher, &dataset, None, seed_salt)?;
        Ok(evaluate(&student, eval)?.accuracy)
    }

    /// Compose a per-class grid of harvested samples into one PNG.
    pub fn visualize(&self, manifest_dir: Option<&Path>, per_class: usize) -> Result<PathBuf> {
        let mut path_out: Option<PathBuf> = None;
        self.run_stage("visualize", || {
            let dir = manifest_dir
                .map(Path::to_path_buf)
                .unwrap_or_else(|| self.out.synth_dir());
            let manifest = SyntheticManifest::load(&dir)?;
            let num_classes = manifest.meta.per_class_counts.len();
            let mut grid_rows: Vec<Vec<Array3<f64>>> = vec![Vec::new(); num_classes];
            // Prefer fully denoised records (smallest harvest_t) per class.
            let mut recs = manifest.records.clone();
            recs.sort_by_key(|r| (r.label, r.harvest_t, r.round));
            for rec in &recs {
                if grid_rows[rec.label].len() < per_class {
                    grid_rows[rec.label].push(data::load_image(&manifest.root.join(&rec.path))?);
                }
            }
            let sample = grid_rows
                .iter()
                .flatten()
                .next()
                .ok_or_else(|| Error::Manifest("no records to visualize".into()))?;
            let (c, h, w) = (sample.shape()[0], sample.shape()[1], sample.shape()[2]);
            let pad = 1usize;
            let gh = num_classes * (h + pad) + pad;
            let gw = per_class * (w + pad) + pad;
            let mut grid = Array3::from_elem((c, gh, gw), 1.0);
            for (row, images) in grid_rows.iter().enumerate() {
                for (col, img) in images.iter().enumerate() {
                    let y0 = pad + row * (h + pad);
                    let x0 = pad + col * (w + pad);
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                grid[[ci, y0 + y, x0 + x]] = img[[ci, y, x]];
                            }
                        }
                    }
                }
            }
            fs::create_dir_all(self.out.figures_dir())?;
            data::save_image(&self.out.sample_grid(), grid.view())?;
            let mut outputs = BTreeMap::new();
            outputs.insert("grid".into(), self.out.sample_grid().display().to_string());
            path_out = Some(self.out.sample_grid());
            Ok(outputs)
        })?;
        Ok(path_out.unwrap())
    }
}
