//! Tuning probe: guidance efficacy (teacher CE with/without edits) and the
//! distillation comparison arms, against a pre-trained run directory.

use std::path::PathBuf;

use dfkd::config::RunConfig;
use dfkd::data::ImageDataset;
use dfkd::harness::{evaluate, EvalSplit, Harness};
use dfkd::nn::codec::Codec;
use dfkd::synthesis::{build_dataset, uniform_noise_dataset, SynthesisContext};

fn mean_teacher_ce(
    teacher: &dfkd::nn::classifier::CnnClassifier,
    ds: &ImageDataset,
) -> f64 {
    let logits = teacher.logits(&ds.images);
    let mut total = 0.0;
    for (i, &y) in ds.labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[y];
    }
    total / ds.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("/tmp/probe_cli"));
    let eta: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let edit_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut cfg = RunConfig::load(&PathBuf::from("configs/desk.toml")).unwrap();
    cfg.output_dir = root.clone();
    cfg.synthesis.weights.eta = eta;
    cfg.synthesis.edit_steps_per_t = edit_steps;
    let h = Harness::new(cfg.clone(), None).unwrap();
    // load directly: the probe's config edits change the hash on purpose
    let teacher = dfkd::nn::classifier::CnnClassifier::from_checkpoint(
        &dfkd::nn::checkpoint::Checkpoint::load(&h.out.teacher_ckpt()).unwrap(),
    )
    .unwrap();
    let denoiser = dfkd::nn::denoiser::CondUnet::from_checkpoint(
        &dfkd::nn::checkpoint::Checkpoint::load(&h.out.denoiser_ckpt()).unwrap(),
    )
    .unwrap();
    let codec = dfkd::nn::codec::AnyCodec::Identity(dfkd::nn::codec::IdentityCodec);
    let schedule = h.schedule().unwrap();
    let eval = h.load_split(EvalSplit::Eval).unwrap();

    let gen = |eta: f64, tag: &str, batch: usize, rounds: usize| {
        let mut syn = cfg.synthesis.clone();
        syn.weights.eta = eta;
        syn.batch_size = batch;
        syn.rounds = rounds;
        let student = h.fresh_student().unwrap();
        let ctx = SynthesisContext {
            teacher: &teacher,
            student: &student,
            denoiser: &denoiser,
            codec: &codec,
            schedule: &schedule,
            cfg: &syn,
            class_conditions: &cfg.dataset.classes,
        };
        let dir = root.join(format!("probe_{tag}"));
        let (manifest, _) = build_dataset(&ctx, &dir, &h.hash, 777).unwrap();
        manifest.load_as_dataset(teacher.cfg.num_classes).unwrap()
    };

    // ---- criterion 5 probe: teacher CE on t=0 harvests, 64 items ----
    let t0_only = |ds: &ImageDataset, manifest_dir: &str| {
        let m = dfkd::synthesis::SyntheticManifest::load(&root.join(manifest_dir)).unwrap();
        let idx: Vec<usize> = m
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.harvest_t == 0)
            .map(|(i, _)| i)
            .collect();
        let (images, labels) = ds.batch(&idx);
        ImageDataset {
            images,
            labels,
            num_classes: ds.num_classes,
        }
    };
    let guided = gen(eta, "guided", 64, 1);
    let unguided = gen(0.0, "unguided", 64, 1);
    let g0 = t0_only(&guided, "probe_guided");
    let u0 = t0_only(&unguided, "probe_unguided");
    let ce_g = mean_teacher_ce(&teacher, &g0);
    let ce_u = mean_teacher_ce(&teacher, &u0);
    println!(
        "criterion5: CE guided {ce_g:.4} vs unguided {ce_u:.4}  reduction {:.1}%",
        100.0 * (ce_u - ce_g) / ce_u
    );
    println!(
        "teacher acc on guided t0 {:.3} unguided t0 {:.3}",
        evaluate(&teacher, &g0).map(|r| r.accuracy).unwrap_or(0.0),
        evaluate(&teacher, &u0).map(|r| r.accuracy).unwrap_or(0.0),
    );

    // ---- criterion 6 probe: distill arms (single seed) ----
    let full_ds = gen(eta, "full", 32, 2);
    let ung_ds = gen(0.0, "ung", 32, 2);
    let noise = uniform_noise_dataset(
        full_ds.len(),
        2,
        1,
        cfg.dataset.resolution,
        999,
    );
    for (name, ds) in [("full", &full_ds), ("unguided", &ung_ds), ("noise", &noise)] {
        let (student, _) = h.distill_fresh_student(&teacher, ds, None, 0).unwrap();
        let acc = evaluate(&student, &eval).unwrap().accuracy;
        println!("criterion6 arm {name}: student acc {acc:.4} (n={})", ds.len());
    }
}
