mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use melt::data::{
    build_samples, generate_split, held_out_samples, lexicon, load_split, write_split, Image, SampleOptions, Split,
};
use melt::eval::{
    caption_generation, caption_token_accuracy, classify_eval, grounding_eval, retrieval_eval, vqa_eval,
    write_predictions, MetricsReport, Prediction,
};
use melt::inference::{
    generate_with_prefix, ground_batch, prefix_with_text, retrieve, task_prefix, EmbeddingIndex, GroundingDecode,
};
use melt::model::{Checkpoint, Model, ModelConfig};
use melt::objectives::write_loss_log;
use melt::training::{
    train_retrieval, train_stage1_vg, train_stage2_multitask, wise_ft_merge, RunConfig, StageConfig, DEFAULT_ALPHA,
};
use melt::vocab::{Prompt, Vocabulary};

use manifest::{with_suffix, RunManifest};

#[derive(Parser)]
#[command(name = "melt", version = manifest::BUILD_ID, about = "Multimodal encoder: data, training, merging, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes and write train, test and held-out manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training VQA questions per scene.
        #[arg(long, default_value_t = melt::data::DESK_VQA_PER_SCENE)]
        vqa_per_scene: usize,
        /// Unseen questions per training scene in the held-out split.
        #[arg(long, default_value_t = 2)]
        held_out: usize,
        /// Replace the outputs of an earlier run in a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// key=value settings; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup_epochs: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        p_mask: Option<f64>,
    },
    /// Interpolate two checkpoints: alpha * a + (1 - alpha) * b.
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one task of a data split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Defaults to the report path with `.predictions.jsonl` appended.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DecodeArg::Joint)]
        decode: DecodeArg,
    },
    /// Decode text (or a box) for one image.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// short, long, vqa, bbox, or a full prompt such as "vqa:".
        #[arg(long)]
        task: String,
        /// Question or grounding query.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Embed a data split into a retrieval index.
    Index {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank index entries against a text or image query.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// A PPM file path, or query text.
        #[arg(long)]
        query: String,
        #[arg(short = 'k', default_value_t = 5)]
        k: usize,
    },
    /// Print parameter counts for the desk and published configurations.
    ParamCount {
        #[arg(long, default_value_t = lexicon_vocab_size())]
        vocab: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Vg,
    Multitask,
    RetrievalOnly,
}

impl StageArg {
    fn parse(s: &str) -> Option<Self> {
        <Self as ValueEnum>::from_str(s, true).ok()
    }

    fn name(self) -> &'static str {
        match self {
            StageArg::Vg => "vg",
            StageArg::Multitask => "multitask",
            StageArg::RetrievalOnly => "retrieval-only",
        }
    }

    fn preset(self) -> StageConfig {
        match self {
            StageArg::Vg => StageConfig::desk_stage1(),
            StageArg::Multitask => StageConfig::desk_stage2(),
            StageArg::RetrievalOnly => StageConfig::desk_retrieval(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalTask {
    Retrieval,
    Caption,
    Grounding,
    Vqa,
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecodeArg {
    Joint,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Image,
    Text,
}

/// A mistake in how the command was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn lexicon_vocab_size() -> usize {
    Vocabulary::build(&lexicon()).len()
}

fn vocab_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".vocab")
}

fn load_model(ckpt: &Path) -> anyhow::Result<(Model, Vocabulary)> {
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let vocab = Vocabulary::load(&vocab_path(ckpt))
        .with_context(|| format!("checkpoint {} has no vocabulary sidecar", ckpt.display()))?;
    if vocab.len() != model.config().vocab_size {
        return Err(melt::Error::Malformed(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        ))
        .into());
    }
    Ok((model, vocab))
}

fn data_vocab(dir: &Path) -> anyhow::Result<Vocabulary> {
    let path = dir.join("vocab.txt");
    if path.exists() {
        Ok(Vocabulary::load(&path)?)
    } else {
        Ok(Vocabulary::build(&lexicon()))
    }
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Split::parse(s).ok_or_else(|| usage(format!("unknown split {s:?} (train, test, heldout)")))
}

const DATA_FILES: &[&str] = &[
    "train.jsonl",
    "test.jsonl",
    "heldout.jsonl",
    "vocab.txt",
    "data.json",
    "run.json",
];

fn gen_data(
    out: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
    vqa_per_scene: usize,
    held_out: usize,
    force: bool,
) -> anyhow::Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(usage(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        let images = out.join("images");
        if images.exists() {
            fs::remove_dir_all(&images).with_context(|| format!("clearing {}", images.display()))?;
        }
        for f in DATA_FILES {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    fs::create_dir_all(out.join("images")).with_context(|| format!("creating {}", out.display()))?;
    let mut run = RunManifest::new("gen-data");
    run.seed = Some(seed);
    run.config = serde_json::json!({
        "train": n_train, "test": n_test, "seed": seed,
        "vqa_per_scene": vqa_per_scene, "held_out_per_scene": held_out,
    });
    let opts = SampleOptions {
        vqa_per_scene,
        tasks: [true; 4],
        seed,
    };
    run.time("generate", || -> anyhow::Result<()> {
        let train = generate_split(Split::Train, n_train, seed);
        write_split(out, Split::Train, &build_samples(&train, &opts))?;
        write_split(out, Split::HeldOut, &held_out_samples(&train, &opts, held_out))?;
        let test = generate_split(Split::Test, n_test, seed);
        write_split(out, Split::Test, &build_samples(&test, &opts))?;
        Vocabulary::build(&lexicon()).save(&out.join("vocab.txt"))?;
        Ok(())
    })?;
    fs::write(out.join("data.json"), serde_json::to_string_pretty(&run.config)? + "\n")?;
    run.output("data", out);
    run.write(&out.join("run.json"))?;
    println!("wrote {n_train} train and {n_test} test scenes to {}", out.display());
    Ok(())
}

fn train(stage: Option<StageArg>, config: Option<PathBuf>, flags: RunConfig) -> anyhow::Result<()> {
    let file = match &config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let rc = file.overlay(flags);
    let stage = match (stage, rc.stage.as_deref()) {
        (Some(s), _) => s,
        (None, Some(s)) => StageArg::parse(s).ok_or_else(|| usage(format!("unknown stage {s:?}")))?,
        (None, None) => return Err(usage("no stage given (--stage or stage= in the config)")),
    };
    let data = rc
        .data
        .clone()
        .ok_or_else(|| usage("no data directory (--data or data=)"))?;
    let out = rc
        .out
        .clone()
        .ok_or_else(|| usage("no output checkpoint (--out or out=)"))?;
    let mut cfg = stage.preset();
    rc.apply(&mut cfg);
    cfg.validate()?;

    let mut run = RunManifest::new("train");
    run.seed = Some(cfg.seed);
    let samples = run.time("load", || load_split(&data, Split::Train))?;
    let (init, vocab) = match &rc.init {
        Some(p) => load_model(p)?,
        None => {
            let vocab = data_vocab(&data)?;
            (Model::new(ModelConfig::desk(vocab.len()), cfg.seed)?, vocab)
        }
    };
    run.config = serde_json::json!({
        "stage": stage.name(),
        "data": data,
        "init": rc.init,
        "out": out,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.learning_rate,
        "warmup_epochs": cfg.warmup_epochs,
        "seed": cfg.seed,
        "tasks": cfg.tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
        "weight_decay": cfg.weight_decay,
        "p_mask": cfg.p_mask,
        "gamma": cfg.gamma,
        "clip_norm": cfg.clip_norm,
        "model": init.config(),
    });
    let progress = |e: &melt::objectives::EpochLog| {
        eprintln!(
            "epoch {:>3}  mlm {:.4}  infonce {:.4}  weights ({:.3}, {:.3})",
            e.epoch, e.l_mlm, e.l_infonce, e.weights.mlm, e.weights.infonce
        )
    };
    let result = run.time("train", || match stage {
        StageArg::Vg => train_stage1_vg(&init, &samples, &vocab, &cfg, progress),
        StageArg::Multitask => train_stage2_multitask(&init, &samples, &vocab, &cfg, progress),
        StageArg::RetrievalOnly => train_retrieval(&init, &samples, &vocab, &cfg, progress),
    })?;
    result.checkpoint.save(&out)?;
    vocab.save(&vocab_path(&out))?;
    let log = with_suffix(&out, ".log.csv");
    write_loss_log(&log, &result.log)?;
    run.output("checkpoint", &out);
    run.output("log", &log);
    run.write(&with_suffix(&out, ".manifest.json"))?;
    println!("saved {}", out.display());
    Ok(())
}

fn merge(a: &Path, b: &Path, alpha: f64, out: &Path) -> anyhow::Result<()> {
    let mut run = RunManifest::new("merge");
    run.config = serde_json::json!({ "a": a, "b": b, "alpha": alpha, "out": out });
    let merged = run.time("merge", || -> anyhow::Result<Checkpoint> {
        Ok(wise_ft_merge(&Checkpoint::load(a)?, &Checkpoint::load(b)?, alpha)?)
    })?;
    let va = Vocabulary::load(&vocab_path(a)).ok();
    let vb = Vocabulary::load(&vocab_path(b)).ok();
    if let (Some(x), Some(y)) = (&va, &vb) {
        if x != y {
            return Err(melt::Error::Malformed("the two checkpoints use different vocabularies".into()).into());
        }
    }
    merged.save(out)?;
    if let Some(v) = va.or(vb) {
        v.save(&vocab_path(out))?;
    }
    run.output("checkpoint", out);
    run.write(&with_suffix(out, ".manifest.json"))?;
    println!("saved {}", out.display());
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: &Path,
    task: EvalTask,
    split: Split,
    report_path: &Path,
    predictions_path: Option<PathBuf>,
    decode: GroundingDecode,
) -> anyhow::Result<()> {
    let mut run = RunManifest::new("eval");
    let (model, vocab) = run.time("load", || load_model(ckpt))?;
    let samples = load_split(data, split)?;
    let mut report = MetricsReport::new();
    let predictions: Vec<Prediction> = run.time("evaluate", || -> anyhow::Result<Vec<Prediction>> {
        Ok(match task {
            EvalTask::Retrieval => {
                let r = retrieval_eval(&model, &vocab, &samples)?;
                r.report(&mut report)?;
                let mut preds = Vec::new();
                for (i, ranked) in r.image_to_text.rankings.iter().enumerate() {
                    preds.push(Prediction {
                        id: r.image_ids[i].clone(),
                        task: "image_to_text".into(),
                        output: ranked.first().cloned().unwrap_or_default(),
                        gold: r.image_to_text.relevant[i]
                            .iter()
                            .cloned()
                            .collect::<Vec<_>>()
                            .join(" "),
                    });
                }
                for (i, ranked) in r.text_to_image.rankings.iter().enumerate() {
                    preds.push(Prediction {
                        id: r.text_ids[i].clone(),
                        task: "text_to_image".into(),
                        output: ranked.first().cloned().unwrap_or_default(),
                        gold: r.text_to_image.relevant[i]
                            .iter()
                            .cloned()
                            .collect::<Vec<_>>()
                            .join(" "),
                    });
                }
                preds
            }
            EvalTask::Caption => {
                let c = caption_generation(&model, &vocab, &samples)?;
                report.insert("caption.bleu1", c.bleu1);
                report.insert("caption.bleu4", c.bleu4);
                if let Some(v) = c.cider {
                    report.insert("caption.cider", v);
                }
                report.insert(
                    "caption.token_accuracy",
                    caption_token_accuracy(&model, &vocab, &samples)?,
                );
                c.predictions
            }
            EvalTask::Grounding => {
                let g = grounding_eval(&model, &vocab, &samples, decode)?;
                report.insert("grounding.acc@0.5", g.score.accuracy);
                report.insert("grounding.miou", g.score.mean_iou);
                g.predictions
            }
            EvalTask::Vqa => {
                let q = vqa_eval(&model, &vocab, &samples)?;
                report.insert("vqa.avg", q.score.average);
                report.insert("vqa.overall", q.score.overall);
                for (t, v) in &q.score.per_type {
                    report.insert(format!("vqa.{t}"), *v);
                }
                q.predictions
            }
            EvalTask::Classify => {
                let c = classify_eval(&model, &vocab, &samples)?;
                report.insert("classify.accuracy", c.accuracy);
                c.predictions
            }
        })
    })?;
    let pred_path = predictions_path.unwrap_or_else(|| with_suffix(report_path, ".predictions.jsonl"));
    write_predictions(&pred_path, &predictions)?;
    report.save(report_path)?;
    run.config = serde_json::json!({
        "ckpt": ckpt, "data": data, "split": split.name(),
        "task": task.to_possible_value().map(|v| v.get_name().to_string()), "decode": format!("{decode:?}"),
    });
    run.output("report", report_path);
    run.output("predictions", &pred_path);
    run.write(&with_suffix(report_path, ".manifest.json"))?;
    print!("{}", report.table());
    Ok(())
}

fn parse_prompt(s: &str) -> anyhow::Result<Prompt> {
    let p = match s.trim().to_lowercase().as_str() {
        "short" | "caption" => Prompt::ShortCaption,
        "long" => Prompt::LongCaption,
        "vqa" => Prompt::Vqa,
        "bbox" | "grounding" => Prompt::BoundingBox,
        other => Prompt::parse(other).ok_or_else(|| usage(format!("unknown task prompt {s:?}")))?,
    };
    Ok(p)
}

fn generate_cmd(
    ckpt: &Path,
    image: &Path,
    task: &str,
    text: Option<&str>,
    max_len: Option<usize>,
) -> anyhow::Result<()> {
    let prompt = parse_prompt(task)?;
    let (model, vocab) = load_model(ckpt)?;
    let img = Image::load_ppm(image)?;
    let needs_text = matches!(prompt, Prompt::Vqa | Prompt::BoundingBox);
    let prefix = match (needs_text, text) {
        (true, Some(t)) => prefix_with_text(prompt, t, &vocab)?,
        (true, None) => return Err(usage(format!("--text is required for {:?}", prompt.as_str()))),
        (false, _) => task_prefix(prompt),
    };
    if prompt == Prompt::BoundingBox {
        let b = ground_batch(&model, &[(&img, &prefix)], GroundingDecode::Joint)?.remove(0);
        println!("{} {} {} {}", b[0], b[1], b[2], b[3]);
        return Ok(());
    }
    let max_len = max_len.unwrap_or(model.config().max_text_len);
    let g = generate_with_prefix(&model, &img, &prefix, max_len)?;
    println!("{}", vocab.decode(&g.body)?);
    Ok(())
}

fn index_cmd(ckpt: &Path, data: &Path, split: Split, modality: ModalityArg, out: &Path) -> anyhow::Result<()> {
    let (model, vocab) = load_model(ckpt)?;
    let samples = load_split(data, split)?;
    let r = retrieval_eval(&model, &vocab, &samples)?;
    let index = match modality {
        ModalityArg::Image => EmbeddingIndex::new(r.image_ids, r.image_vectors, None)?,
        ModalityArg::Text => EmbeddingIndex::new(r.text_ids, r.text_vectors, None)?,
    };
    index.save(out)?;
    println!("indexed {} entries into {}", index.len(), out.display());
    Ok(())
}

fn retrieve_cmd(ckpt: &Path, index: &Path, query: &str, k: usize) -> anyhow::Result<()> {
    let (model, vocab) = load_model(ckpt)?;
    let index = EmbeddingIndex::load(index)?;
    let as_path = Path::new(query);
    let vector = if as_path.extension().is_some_and(|e| e == "ppm") || as_path.is_file() {
        let img = Image::load_ppm(as_path)?;
        model.encode_images(&[&img])?.remove(0)
    } else {
        let ids = melt::data::retrieval_text(query, &vocab)?;
        model.encode_texts(&[&ids])?.remove(0)
    };
    for hit in retrieve(&vector, &index, k)? {
        println!("{}\t{:.6}", hit.id, hit.score);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            train,
            test,
            seed,
            vqa_per_scene,
            held_out,
            force,
        } => gen_data(&out, train, test, seed, vqa_per_scene, held_out, force),
        Command::Train {
            stage,
            config,
            init,
            out,
            data,
            seed,
            epochs,
            batch_size,
            lr,
            warmup_epochs,
            gamma,
            p_mask,
        } => train(
            stage,
            config,
            RunConfig {
                init,
                out,
                data,
                seed,
                epochs,
                batch_size,
                lr,
                warmup_epochs,
                gamma,
                p_mask,
                ..RunConfig::default()
            },
        ),
        Command::Merge { a, b, alpha, out } => merge(&a, &b, alpha, &out),
        Command::Eval {
            ckpt,
            data,
            task,
            report,
            split,
            predictions,
            decode,
        } => {
            let decode = match decode {
                DecodeArg::Joint => GroundingDecode::Joint,
                DecodeArg::Sequential => GroundingDecode::Sequential,
            };
            eval(&ckpt, &data, task, parse_split(&split)?, &report, predictions, decode)
        }
        Command::Generate {
            ckpt,
            image,
            task,
            text,
            max_len,
        } => generate_cmd(&ckpt, &image, &task, text.as_deref(), max_len),
        Command::Index {
            ckpt,
            data,
            split,
            modality,
            out,
        } => index_cmd(&ckpt, &data, parse_split(&split)?, modality, &out),
        Command::Retrieve { ckpt, index, query, k } => retrieve_cmd(&ckpt, &index, &query, k),
        Command::ParamCount { vocab } => {
            let desk = ModelConfig::desk(vocab);
            println!("desk\t{}", desk.param_count());
            println!("published\t{}", ModelConfig::paper_scale().param_count());
            Ok(())
        }
    }
}

/// 0 success, 1 usage, 2 data, 3 non-finite loss.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<melt::Error>() {
            return match e {
                melt::Error::NonFiniteLoss { .. } => 3,
                melt::Error::Config(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn exit_codes_by_error_kind() {
        let nan: anyhow::Error = melt::Error::NonFiniteLoss { epoch: 1, step: 0 }.into();
        assert_eq!(exit_code(&nan), 3);
        let cfg: anyhow::Error = melt::Error::Config("line 1: unknown key \"lr0\"".into()).into();
        assert_eq!(exit_code(&cfg), 1);
        let data: anyhow::Error = melt::Error::EmptyDataset("no grounding samples".into()).into();
        assert_eq!(exit_code(&data.context("training")), 2);
        assert_eq!(exit_code(&usage("bad")), 1);
        assert_eq!(exit_code(&anyhow!("io")), 2);
    }

    #[test]
    fn prompts_by_short_name() {
        assert_eq!(parse_prompt("long").unwrap(), Prompt::LongCaption);
        assert_eq!(parse_prompt("vqa:").unwrap(), Prompt::Vqa);
        assert!(parse_prompt("poem").is_err());
        assert_eq!(StageArg::parse("retrieval-only"), Some(StageArg::RetrievalOnly));
    }
}
