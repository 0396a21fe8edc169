//! Margin probe for the distillation comparison arms on a configurable class
//! subset, reusing a roster-trained denoiser checkpoint.

use std::path::PathBuf;

use dfkd::config::RunConfig;
use dfkd::data::{generate_dataset, teacher_domain, ImageDataset};
use dfkd::harness::{evaluate, Harness};
use dfkd::nn::classifier::CnnClassifier;
use dfkd::nn::train::{train_classifier, SupervisedTrainConfig};
use dfkd::synthesis::{build_dataset, uniform_noise_dataset, SynthesisContext};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("/tmp/probe_cli"));
    let eta: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let classes: Vec<usize> = args
        .get(3)
        .map(|s| s.split('-').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0, 8, 1, 9]);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let rounds: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2);

    let mut cfg = RunConfig::load(&PathBuf::from("configs/desk.toml")).unwrap();
    cfg.output_dir = root.clone();
    cfg.dataset.classes = classes.clone();
    cfg.synthesis.weights.eta = eta;
    cfg.synthesis.rounds = rounds;
    let h = Harness::new(cfg.clone(), None).unwrap();
    let denoiser = dfkd::nn::denoiser::CondUnet::from_checkpoint(
        &dfkd::nn::checkpoint::Checkpoint::load(&root.join("checkpoints/denoiser.json")).unwrap(),
    )
    .unwrap();
    let codec = dfkd::nn::codec::AnyCodec::Identity(dfkd::nn::codec::IdentityCodec);
    let schedule = h.schedule().unwrap();

    let train = generate_dataset(&classes, 100, 16, &teacher_domain(), 1001).unwrap();
    let eval = generate_dataset(&classes, 100, 16, &teacher_domain(), 1002).unwrap();
    let mut teacher = CnnClassifier::new(cfg.teacher_classifier_config(), 1003).unwrap();
    train_classifier(
        &mut teacher,
        &train,
        Some(&eval),
        &SupervisedTrainConfig::default(),
        1004,
    )
    .unwrap();
    println!(
        "teacher eval acc {:.4}",
        evaluate(&teacher, &eval).unwrap().accuracy
    );

    for seed in 0..seeds {
        let gen = |eta_arm: f64, tag: &str| {
            let mut syn = cfg.synthesis.clone();
            syn.weights.eta = eta_arm;
            let student = h.fresh_student().unwrap();
            let ctx = SynthesisContext {
                teacher: &teacher,
                student: &student,
                denoiser: &denoiser,
                codec: &codec,
                schedule: &schedule,
                cfg: &syn,
                class_conditions: &classes,
            };
            let dir = root.join(format!("margin_{tag}_s{seed}"));
            let (manifest, _) = build_dataset(&ctx, &dir, &h.hash, 13_000 + seed).unwrap();
            manifest.load_as_dataset(teacher.cfg.num_classes).unwrap()
        };
        let full = gen(eta, "full");
        let ung = gen(0.0, "ung");
        let noise = uniform_noise_dataset(full.len(), classes.len(), 1, 16, 20_000 + seed);
        let mut accs = Vec::new();
        for (name, ds) in [("full", &full), ("unguided", &ung), ("noise", &noise)] {
            let (student, _) = h.distill_fresh_student(&teacher, ds, None, seed).unwrap();
            let acc = evaluate(&student, &eval).unwrap().accuracy;
            accs.push(acc);
            println!("seed {seed} arm {name}: student acc {acc:.4} (n={})", ds.len());
        }
        println!(
            "seed {seed} margins: full-noise {:.1}pts, full-unguided {:.1}pts",
            100.0 * (accs[0] - accs[2]),
            100.0 * (accs[0] - accs[1])
        );
    }
}
