//! End-to-end toy run: synthetic shapes → teacher cache → encoder
//! distillation → decoder fine-tuning → Dice evaluation.
//!
//! `cargo run --release --example toy_pipeline [-- <workdir>]`

use std::path::PathBuf;
use std::time::Instant;

use kdseg::data::{
    cache_teacher_embeddings, generate_synthetic, ManifestSplit, Preprocessing, Split, SplitSpec, SyntheticSpec,
};
use kdseg::eval::{evaluate, Pipeline};
use kdseg::models::{Decoder, DecoderSpec, Encoder, EncoderSpec, PerceptualExtractor, PerceptualSpec, PromptPolicy};
use kdseg::train::{distill_encoder, finetune_decoder, Phase, TeacherTargets, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let work: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("kdseg_toy"));
    let (size, embed) = (64, 16);
    let t0 = Instant::now();

    let prep = Preprocessing {
        resize_to: [size, size],
        mean: [0.5; 3],
        std: [0.25; 3],
    };
    let split = SplitSpec {
        fractions: [0.64, 0.16, 0.20],
        seed: 0,
    };
    let syn = SyntheticSpec {
        n: 100,
        canvas: [size, size],
        seed: 0,
    };
    let manifest = generate_synthetic(&work.join("data"), &syn, &split, prep)?;
    let teacher = Encoder::<f32>::build(&EncoderSpec::toy_teacher(size, embed), 3)?;
    let (manifest, stats) = cache_teacher_embeddings(&manifest, &teacher, &work.join("cache"))?;
    println!("cache: {stats:?}");

    let train = ManifestSplit::new(&manifest, Split::Train).materialize::<f32>()?;
    let val = ManifestSplit::new(&manifest, Split::Val).materialize::<f32>()?;
    let test = ManifestSplit::new(&manifest, Split::Test);

    let mut c1 = TrainConfig::for_phase(Phase::EncoderDistill);
    c1.max_epochs = 50;
    c1.batch_size = 8;
    c1.optimizer.lr = 1e-3;
    let student = Encoder::<f32>::build(&EncoderSpec::toy_student(size, embed), 1)?;
    let extractor = PerceptualExtractor::build(&PerceptualSpec::toy(), embed, 2)?;
    let (student, s1) = distill_encoder(&c1, &train, &val, TeacherTargets::Cached, student, extractor)?;
    let first = s1.history[0].val_loss;
    println!(
        "phase 1: {} epochs, val {first:.5} → best {:.5} (ratio {:.3}) [{:.1?}]",
        s1.epoch,
        s1.best_val_loss.unwrap(),
        s1.best_val_loss.unwrap() / first,
        t0.elapsed()
    );

    let mut c2 = TrainConfig::for_phase(Phase::DecoderFinetune);
    c2.max_epochs = 30;
    c2.batch_size = 8;
    c2.optimizer.lr = 1e-2;
    let decoder = Decoder::<f32>::build(&DecoderSpec::toy(size, embed), 4)?;
    let (decoder, s2) = finetune_decoder(&c2, &train, &val, student.clone(), decoder)?;
    println!(
        "phase 2: {} epochs, best val dice loss {:.4} [{:.1?}]",
        s2.epoch,
        s2.best_val_loss.unwrap(),
        t0.elapsed()
    );

    let pipeline = Pipeline {
        encoder: &student,
        decoder: &decoder,
    };
    let r = evaluate(
        "synthetic",
        "toy",
        &test,
        &pipeline,
        PromptPolicy::CentroidPoint,
        0.5,
        "-",
    )?;
    println!(
        "test dice {:.4} ± {:.4} over {} [{:.1?}]",
        r.mean_dice,
        r.std_dice,
        r.n_samples,
        t0.elapsed()
    );
    Ok(())
}
