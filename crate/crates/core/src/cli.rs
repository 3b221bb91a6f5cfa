//! Command-line front end. `main` only forwards `std::env::args_os()` to [`run`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, Overrides, RunSpec};
use crate::data::{
    attach_cache, cache_teacher_embeddings, generate_synthetic, load_dataset, DatasetManifest, ManifestSplit, Split,
};
use crate::error::Error;
use crate::eval::{compare_report, emit_figures, evaluate, write_results_csv, EvalResult, Pipeline, ReferenceTable};
use crate::models::{count_parameters, Decoder, Encoder, HasParams, PerceptualExtractor, WeightsSource};
use crate::scalar::{DType, Scalar};
use crate::train::{
    write_history_csv, Checkpoint, DecoderFinetune, DistillExample, EncoderDistill, ModelSpecs, Phase, SegExample,
    TeacherTargets, Trainer,
};
use crate::weights;

#[derive(Debug, Parser)]
#[command(
    name = "kdseg",
    version,
    about = "Two-phase encoder distillation and prompt-guided decoder fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, value_name = "PATH")]
    output_dir: Option<PathBuf>,
    /// Overrides the top-level `seed` from the config.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Validate the configuration and print the plan without computing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic shapes dataset described by `[dataset.synthetic]`.
    GenSynthetic(Common),
    /// Run the teacher once per record and store embeddings in the cache.
    CacheEmbeddings(Common),
    /// Phase 1: distill the teacher encoder into the student.
    DistillEncoder {
        #[command(flatten)]
        common: Common,
        /// Continue from a phase-1 checkpoint directory.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Phase 2: fine-tune the decoder on the frozen distilled encoder.
    FinetuneDecoder {
        #[command(flatten)]
        common: Common,
        /// Phase-1 checkpoint (default: <output_dir>/encoder_distill/checkpoint).
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// Continue from a phase-2 checkpoint directory.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Dice evaluation of a phase-2 checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Phase-2 checkpoint directory.
        #[arg(long, value_name = "CHECKPOINT", required = true)]
        checkpoint: PathBuf,
    },
    /// Comparison tables, figures and sidecars from the latest evaluation.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenSynthetic(c) | Command::CacheEmbeddings(c) | Command::Report(c) => c,
            Command::DistillEncoder { common, .. }
            | Command::FinetuneDecoder { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }

    /// Directory under `output_dir` holding this stage's outputs and provenance.
    fn stage_dir(&self) -> &'static str {
        match self {
            Command::DistillEncoder { .. } => "encoder_distill",
            Command::FinetuneDecoder { .. } => "decoder_finetune",
            Command::GenSynthetic(_) => "gen_synthetic",
            Command::CacheEmbeddings(_) => "cache_embeddings",
            Command::Evaluate { .. } => "evaluate",
            Command::Report(_) => "report",
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::CacheEmbeddings(_) => "cache-embeddings",
            Command::DistillEncoder { .. } => "distill-encoder",
            Command::FinetuneDecoder { .. } => "finetune-decoder",
            Command::Evaluate { .. } => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            if is_config_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))))
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Removes the lock file when the run ends, however it ends.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".kdseg.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is in use by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(config_err(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_weights(source: &WeightsSource, what: &str) -> anyhow::Result<()> {
    if let Some(p) = source.path() {
        if !p.is_file() {
            return Err(config_err(format!("{what} weights {} not found", p.display())));
        }
    }
    Ok(())
}

fn phase1_checkpoint(spec: &RunSpec) -> PathBuf {
    spec.output_dir.join("encoder_distill").join("checkpoint")
}

fn phase2_checkpoint(spec: &RunSpec) -> PathBuf {
    spec.output_dir.join("decoder_finetune").join("checkpoint")
}

fn eval_result_path(spec: &RunSpec) -> PathBuf {
    spec.output_dir.join("evaluate").join("eval_result.json")
}

/// Filesystem checks for one stage, all before any computation.
fn validate_paths(cmd: &Command, spec: &RunSpec) -> anyhow::Result<()> {
    let models = spec.models();
    let dataset_ready = || {
        require_dir(&spec.dataset.root.join("images"), "dataset image directory")?;
        require_dir(&spec.dataset.root.join("masks"), "dataset mask directory")
    };
    match cmd {
        Command::GenSynthetic(_) => {
            if spec.dataset.synthetic.is_none() {
                return Err(config_err("gen-synthetic needs a [dataset.synthetic] section"));
            }
        }
        Command::CacheEmbeddings(_) => {
            dataset_ready()?;
            require_weights(&models.teacher.weights, "teacher")?;
        }
        Command::DistillEncoder { resume, .. } => {
            dataset_ready()?;
            require_weights(&models.student.weights, "student")?;
            require_weights(&models.perceptual.weights, "perceptual")?;
            if let Some(r) = resume {
                require_dir(r, "resume checkpoint")?;
            }
        }
        Command::FinetuneDecoder { checkpoint, resume, .. } => {
            dataset_ready()?;
            require_weights(&models.decoder.weights, "decoder")?;
            let ck = checkpoint.clone().unwrap_or_else(|| phase1_checkpoint(spec));
            require_dir(&ck, "phase-1 checkpoint")?;
            if let Some(r) = resume {
                require_dir(r, "resume checkpoint")?;
            }
        }
        Command::Evaluate { checkpoint, .. } => {
            dataset_ready()?;
            require_dir(checkpoint, "checkpoint")?;
        }
        Command::Report(_) => {}
    }
    Ok(())
}

fn plan(cmd: &Command, spec: &RunSpec) -> Vec<String> {
    let m = spec.models();
    let out = &spec.output_dir;
    let d = &spec.dataset;
    let mut p = vec![format!(
        "run {} (seed {}, precision {})",
        spec.run_name,
        spec.seed,
        spec.precision.name()
    )];
    match cmd {
        Command::GenSynthetic(_) => {
            let s = d.synthetic.as_ref().expect("validated");
            p.push(format!(
                "generate {} synthetic images of {}x{} (seed {}) under {}",
                s.n,
                s.canvas[0],
                s.canvas[1],
                s.seed,
                d.root.display()
            ));
        }
        Command::CacheEmbeddings(_) => {
            p.push(format!("load dataset {} from {}", d.name, d.root.display()));
            p.push(format!("embed every record with the {:?} teacher", m.teacher.family));
            p.push(format!(
                "write embeddings to {}",
                spec.cache_dir().join(&d.name).display()
            ));
        }
        Command::DistillEncoder { resume, .. } => {
            let c = &spec.train.encoder_distill;
            p.push(format!(
                "load dataset {} from {} with cached teacher embeddings",
                d.name,
                d.root.display()
            ));
            if let Some(r) = resume {
                p.push(format!("resume from {}", r.display()));
            }
            p.push(format!(
                "distill into {:?} student: up to {} epochs, batch {}, adam lr {} wd {}, loss {:?}",
                m.student.family, c.max_epochs, c.batch_size, c.optimizer.lr, c.optimizer.weight_decay, c.loss_mode
            ));
            p.push(format!("checkpoint to {}", phase1_checkpoint(spec).display()));
        }
        Command::FinetuneDecoder { checkpoint, .. } => {
            let c = &spec.train.decoder_finetune;
            let ck = checkpoint.clone().unwrap_or_else(|| phase1_checkpoint(spec));
            p.push(format!("load frozen encoder from {}", ck.display()));
            p.push(format!(
                "fine-tune decoder with Dice loss: up to {} epochs, batch {}, adam lr {}, prompts {:?}",
                c.max_epochs, c.batch_size, c.optimizer.lr, c.prompt_policy
            ));
            p.push(format!("checkpoint to {}", phase2_checkpoint(spec).display()));
        }
        Command::Evaluate { checkpoint, .. } => {
            p.push(format!("load {}", checkpoint.display()));
            p.push(format!(
                "score the test split of {} (prompts {:?}, threshold {})",
                d.name, spec.eval.prompt_policy, spec.eval.threshold
            ));
            p.push(format!("write {}", eval_result_path(spec).display()));
        }
        Command::Report(_) => {
            p.push(format!("read {}", eval_result_path(spec).display()));
            p.push(format!(
                "write report.json, report.md, results.csv and figures to {}",
                out.join("report").display()
            ));
        }
    }
    p
}

fn dispatch(cmd: &Command) -> anyhow::Result<()> {
    let c = cmd.common();
    let overrides = Overrides {
        output_dir: c.output_dir.clone(),
        seed: c.seed,
    };
    let spec = RunSpec::parse_file(&c.config, &overrides)?;
    validate_paths(cmd, &spec)?;
    if c.dry_run {
        let (path, _) = spec.write_effective()?;
        println!("dry run: {} (effective config: {})", cmd.name(), path.display());
        for (i, line) in plan(cmd, &spec).iter().enumerate() {
            println!("  {}. {line}", i + 1);
        }
        return Ok(());
    }
    let _lock = RunLock::acquire(&spec.output_dir)?;
    let (_, config_hash) = spec.write_effective()?;
    match spec.precision {
        DType::F32 => execute::<f32>(cmd, &spec, &config_hash),
        DType::F64 => execute::<f64>(cmd, &spec, &config_hash),
    }
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    stage: &'a str,
    run_name: &'a str,
    version: &'a str,
    precision: DType,
    seed: u64,
    sub_seeds: BTreeMap<&'static str, u64>,
    effective_config_sha256: &'a str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sub_seeds(spec: &RunSpec) -> BTreeMap<&'static str, u64> {
    let mut m: BTreeMap<&'static str, u64> = ["teacher", "student", "perceptual", "decoder"]
        .into_iter()
        .map(|s| (s, derive_seed(spec.seed, s)))
        .collect();
    m.insert("split", spec.split().seed);
    m.insert("encoder_distill", spec.train.encoder_distill.seed);
    m.insert("decoder_finetune", spec.train.decoder_finetune.seed);
    m
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hash over every record's id, split and file contents.
fn dataset_hash(manifest: &DatasetManifest) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    for r in &manifest.records {
        h.update(r.id.as_bytes());
        h.update(r.split.as_str().as_bytes());
        h.update(file_sha256(&r.image_path)?.as_bytes());
        h.update(file_sha256(&r.mask_path)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

struct StageOutput {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn execute<T: Scalar>(cmd: &Command, spec: &RunSpec, config_hash: &str) -> anyhow::Result<()> {
    let stage_dir = spec.output_dir.join(cmd.stage_dir());
    std::fs::create_dir_all(&stage_dir).with_context(|| format!("creating {}", stage_dir.display()))?;
    let out = match cmd {
        Command::GenSynthetic(_) => gen_synthetic(spec)?,
        Command::CacheEmbeddings(_) => cache_embeddings::<T>(spec)?,
        Command::DistillEncoder { resume, .. } => distill::<T>(spec, resume.as_deref())?,
        Command::FinetuneDecoder { checkpoint, resume, .. } => {
            let ck = checkpoint.clone().unwrap_or_else(|| phase1_checkpoint(spec));
            finetune::<T>(spec, &ck, resume.as_deref())?
        }
        Command::Evaluate { checkpoint, .. } => run_evaluate::<T>(spec, checkpoint)?,
        Command::Report(_) => report::<T>(spec)?,
    };
    let prov = Provenance {
        stage: cmd.name(),
        run_name: &spec.run_name,
        version: env!("CARGO_PKG_VERSION"),
        precision: spec.precision,
        seed: spec.seed,
        sub_seeds: sub_seeds(spec),
        effective_config_sha256: config_hash,
        inputs: out.inputs,
        outputs: out.outputs,
    };
    write_json(&stage_dir.join("provenance.json"), &prov)
}

fn load_manifest(spec: &RunSpec) -> anyhow::Result<DatasetManifest> {
    Ok(load_dataset(
        &spec.dataset.root,
        &spec.dataset.name,
        &spec.split(),
        spec.dataset.preprocessing.clone(),
    )?)
}

fn gen_synthetic(spec: &RunSpec) -> anyhow::Result<StageOutput> {
    let syn = spec.dataset.synthetic.as_ref().expect("validated");
    let manifest = generate_synthetic(
        &spec.dataset.root,
        syn,
        &spec.split(),
        spec.dataset.preprocessing.clone(),
    )?;
    let hash = dataset_hash(&manifest)?;
    println!(
        "generated {} records ({} train / {} val / {} test) in {}",
        manifest.records.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test),
        spec.dataset.root.display()
    );
    Ok(StageOutput {
        inputs: BTreeMap::new(),
        outputs: BTreeMap::from([("dataset".to_string(), hash)]),
    })
}

fn cache_embeddings<T: Scalar>(spec: &RunSpec) -> anyhow::Result<StageOutput> {
    let manifest = load_manifest(spec)?;
    let teacher = Encoder::<T>::build(&spec.models().teacher, derive_seed(spec.seed, "teacher"))?;
    let (_, stats) = cache_teacher_embeddings(&manifest, &teacher, &spec.cache_dir())?;
    println!(
        "embeddings computed: {}, already cached: {}",
        stats.computed, stats.skipped
    );
    let index = spec.cache_dir().join(&manifest.name).join("index.json");
    Ok(StageOutput {
        inputs: BTreeMap::from([
            ("dataset".to_string(), dataset_hash(&manifest)?),
            ("teacher".to_string(), teacher.params().content_hash()),
        ]),
        outputs: BTreeMap::from([("cache_index".to_string(), file_sha256(&index)?)]),
    })
}

fn save_stage_checkpoint<T: Scalar>(ck: &Checkpoint<T>, dir: &Path) -> anyhow::Result<String> {
    let hash = ck.save(dir)?;
    write_history_csv(&dir.parent().expect("stage dir").join("history.csv"), &ck.state.history)?;
    Ok(hash)
}

fn distill<T: Scalar>(spec: &RunSpec, resume: Option<&Path>) -> anyhow::Result<StageOutput> {
    let manifest = load_manifest(spec)?;
    let models = spec.models();
    let cache_index = spec.cache_dir().join(&manifest.name).join("index.json");
    let (manifest, teacher) = if cache_index.is_file() {
        (attach_cache(&manifest, &spec.cache_dir())?, None)
    } else {
        log::warn!(
            "no embedding cache at {}; running the teacher live",
            cache_index.display()
        );
        (
            manifest,
            Some(Encoder::<T>::build(&models.teacher, derive_seed(spec.seed, "teacher"))?),
        )
    };
    let targets = match &teacher {
        Some(t) => TeacherTargets::Live(t),
        None => TeacherTargets::Cached,
    };
    let train = DistillExample::collect(&ManifestSplit::new(&manifest, Split::Train), &targets)?;
    let val = DistillExample::collect(&ManifestSplit::new(&manifest, Split::Val), &targets)?;
    let config = &spec.train.encoder_distill;
    let student = Encoder::<T>::build(&models.student, derive_seed(spec.seed, "student"))?;
    let extractor = PerceptualExtractor::<T>::build(
        &models.perceptual,
        models.student.embed_channels,
        derive_seed(spec.seed, "perceptual"),
    )?;
    let perceptual_hash = extractor.params().content_hash();
    let objective = EncoderDistill::new(config, student, extractor, train, val)?;
    let mut trainer = match resume {
        Some(r) => {
            let ck = Checkpoint::<T>::load(r)?;
            if ck.phase != Phase::EncoderDistill {
                return Err(config_err("--resume expects a phase-1 checkpoint"));
            }
            Trainer::resume(objective, &ck, Some(config.max_epochs))?
        }
        None => Trainer::new(config.clone(), objective)?,
    };
    let specs = ModelSpecs {
        encoder: Some(models.student.clone()),
        decoder: None,
        perceptual: Some(models.perceptual.clone()),
    };
    let ck_dir = phase1_checkpoint(spec);
    while !trainer.is_finished() {
        trainer.step_epoch()?;
        save_stage_checkpoint(&trainer.checkpoint(specs.clone()), &ck_dir)?;
    }
    let hash = save_stage_checkpoint(&trainer.checkpoint(specs), &ck_dir)?;
    let st = trainer.state();
    if trainer.objective().extractor.params().content_hash() != perceptual_hash {
        bail!("perceptual extractor weights changed during training");
    }
    println!(
        "phase 1 finished after {} epochs; best val loss {:.6} at epoch {}",
        st.epoch,
        st.best_val_loss.unwrap_or(f64::NAN),
        st.best_epoch
    );
    Ok(StageOutput {
        inputs: BTreeMap::from([
            ("dataset".to_string(), dataset_hash(&manifest)?),
            ("perceptual".to_string(), perceptual_hash),
        ]),
        outputs: BTreeMap::from([("checkpoint".to_string(), hash)]),
    })
}

fn encoder_from_checkpoint<T: Scalar>(ck: &Checkpoint<T>, blob: &str) -> anyhow::Result<Encoder<T>> {
    let es = ck
        .specs
        .encoder
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("checkpoint records no encoder spec"))?;
    let mut es = es.clone();
    es.weights = WeightsSource::RandomSeeded;
    let mut enc = Encoder::<T>::build(&es, 0)?;
    weights::fill_store(enc.params_mut(), ck.blob(blob)?.clone())?;
    Ok(enc)
}

fn finetune<T: Scalar>(spec: &RunSpec, phase1: &Path, resume: Option<&Path>) -> anyhow::Result<StageOutput> {
    let p1 = Checkpoint::<T>::load(phase1)?;
    if p1.phase != Phase::EncoderDistill {
        return Err(config_err(format!("{} is not a phase-1 checkpoint", phase1.display())));
    }
    let encoder = encoder_from_checkpoint(&p1, "best_weights")?;
    let encoder_hash = encoder.params().content_hash();
    let manifest = load_manifest(spec)?;
    let config = &spec.train.decoder_finetune;
    let models = spec.models();
    let train = SegExample::collect(
        &ManifestSplit::new(&manifest, Split::Train),
        &encoder,
        config.prompt_policy,
    )?;
    let val = SegExample::collect(
        &ManifestSplit::new(&manifest, Split::Val),
        &encoder,
        config.prompt_policy,
    )?;
    let decoder = Decoder::<T>::build(&models.decoder, derive_seed(spec.seed, "decoder"))?;
    let objective = DecoderFinetune::new(config, encoder.clone(), decoder, train, val)?;
    let mut trainer = match resume {
        Some(r) => {
            let ck = Checkpoint::<T>::load(r)?;
            if ck.phase != Phase::DecoderFinetune {
                return Err(config_err("--resume expects a phase-2 checkpoint"));
            }
            Trainer::resume(objective, &ck, Some(config.max_epochs))?
        }
        None => Trainer::new(config.clone(), objective)?,
    };
    let specs = ModelSpecs {
        encoder: Some(encoder.spec().clone()),
        decoder: Some(models.decoder.clone()),
        perceptual: None,
    };
    let ck_dir = phase2_checkpoint(spec);
    while !trainer.is_finished() {
        trainer.step_epoch()?;
        save_stage_checkpoint(&trainer.checkpoint(specs.clone()), &ck_dir)?;
    }
    let hash = save_stage_checkpoint(&trainer.checkpoint(specs), &ck_dir)?;
    if trainer.objective().encoder.params().content_hash() != encoder_hash {
        bail!("encoder weights changed during decoder fine-tuning");
    }
    let st = trainer.state();
    println!(
        "phase 2 finished after {} epochs; best val Dice loss {:.6} at epoch {}",
        st.epoch,
        st.best_val_loss.unwrap_or(f64::NAN),
        st.best_epoch
    );
    Ok(StageOutput {
        inputs: BTreeMap::from([
            ("dataset".to_string(), dataset_hash(&manifest)?),
            ("encoder".to_string(), encoder_hash),
            ("phase1_checkpoint".to_string(), p1.content_hash()?),
        ]),
        outputs: BTreeMap::from([("checkpoint".to_string(), hash)]),
    })
}

fn run_evaluate<T: Scalar>(spec: &RunSpec, checkpoint: &Path) -> anyhow::Result<StageOutput> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    if ck.phase != Phase::DecoderFinetune {
        return Err(config_err(format!(
            "{} is not a phase-2 checkpoint",
            checkpoint.display()
        )));
    }
    let encoder = encoder_from_checkpoint(&ck, "frozen.encoder")?;
    let mut ds = ck
        .specs
        .decoder
        .clone()
        .ok_or_else(|| anyhow::anyhow!("checkpoint records no decoder spec"))?;
    ds.weights = WeightsSource::RandomSeeded;
    let mut decoder = Decoder::<T>::build(&ds, 0)?;
    weights::fill_store(decoder.params_mut(), ck.best_weights()?.clone())?;
    let identity = ck.content_hash()?;
    let manifest = load_manifest(spec)?;
    let test = ManifestSplit::new(&manifest, Split::Test);
    let pipeline = Pipeline {
        encoder: &encoder,
        decoder: &decoder,
    };
    let result = evaluate(
        &manifest.name,
        &spec.eval.model_name,
        &test,
        &pipeline,
        spec.eval.prompt_policy,
        spec.eval.threshold,
        &identity,
    )?;
    let path = eval_result_path(spec);
    write_json(&path, &result)?;
    write_results_csv(&path.with_file_name("results.csv"), std::slice::from_ref(&result))?;
    println!(
        "{} on {}: mean Dice {:.4} ± {:.4} over {} test samples",
        result.model, result.dataset_name, result.mean_dice, result.std_dice, result.n_samples
    );
    Ok(StageOutput {
        inputs: BTreeMap::from([
            ("dataset".to_string(), dataset_hash(&manifest)?),
            ("checkpoint".to_string(), identity),
        ]),
        outputs: BTreeMap::from([("eval_result".to_string(), file_sha256(&path)?)]),
    })
}

fn report<T: Scalar>(spec: &RunSpec) -> anyhow::Result<StageOutput> {
    let path = eval_result_path(spec);
    let results: Vec<EvalResult> = if path.is_file() {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        vec![serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?]
    } else {
        log::warn!(
            "no evaluation result at {}; reporting reference values only",
            path.display()
        );
        Vec::new()
    };
    let models = spec.models();
    let mut counts = BTreeMap::new();
    let mut student_spec = models.student.clone();
    student_spec.weights = WeightsSource::RandomSeeded;
    let student = Encoder::<T>::build(&student_spec, 0)?;
    let mut decoder_spec = models.decoder.clone();
    decoder_spec.weights = WeightsSource::RandomSeeded;
    let decoder = Decoder::<T>::build(&decoder_spec, 0)?;
    let name = &spec.eval.model_name;
    counts.insert(format!("{name} encoder"), count_parameters(&student));
    counts.insert(format!("{name} decoder"), count_parameters(&decoder));
    let reference = spec.eval.include_reference.then(ReferenceTable::shipped);
    let mut report = compare_report(results, reference, counts);
    let dir = spec.output_dir.join("report");
    report.artifacts = emit_figures(&report, &dir)?;
    let results_csv = dir.join("results.csv");
    write_results_csv(&results_csv, &report.eval_results)?;
    let md = dir.join("report.md");
    std::fs::write(&md, report.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
    report.artifacts.insert("results.csv".into(), results_csv);
    report.artifacts.insert("report.md".into(), md);
    let json = dir.join("report.json");
    write_json(&json, &report)?;
    print!("{}", report.to_markdown());
    let mut outputs = BTreeMap::new();
    for (k, p) in &report.artifacts {
        outputs.insert(k.clone(), file_sha256(p)?);
    }
    outputs.insert("report.json".into(), file_sha256(&json)?);
    Ok(StageOutput {
        inputs: BTreeMap::new(),
        outputs,
    })
}
