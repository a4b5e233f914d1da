//! Sample sets built from generated scenes, and their on-disk form
//! (PPM images plus a JSON-lines manifest).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::sample::{Sample, Task};
use super::scene::{
    generate_scene, sample_questions, AnswerType, Category, Color, GeneratedScene, LandCover, PixelBox, QaPair,
};
use crate::error::{Error, Result};
use crate::seed;

/// Template for zero-shot class prompts.
pub const CLASS_PROMPT_PREFIX: &str = "a satellite photo of";

pub fn class_prompt(class: &str) -> String {
    format!("{CLASS_PROMPT_PREFIX} {class}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    /// Unseen questions about the training scenes.
    HeldOut,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::HeldOut => "heldout",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        [Split::Train, Split::Test, Split::HeldOut]
            .into_iter()
            .find(|x| x.name() == s)
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x74_7261_696e,
            Split::Test => 0x7465_7374,
            Split::HeldOut => 0x6865_6c64,
        }
    }
}

/// A generated scene with a stable identifier.
#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub id: String,
    pub generated: GeneratedScene,
    pub image: Arc<Image>,
}

/// Scenes for one split; seeds for the two splits come from disjoint streams.
pub fn generate_split(split: Split, count: usize, run_seed: u64) -> Vec<SceneEntry> {
    let base = seed::mix(run_seed, split.tag());
    (0..count)
        .map(|i| {
            let generated = generate_scene(seed::mix(base, i as u64));
            SceneEntry {
                id: format!("{}-{i:05}", split.name()),
                image: Arc::new(generated.scene.image.clone()),
                generated,
            }
        })
        .collect()
}

/// Every line the generator can emit, so the vocabulary is closed over all
/// scenes, held-out questions, and class prompts.
pub fn lexicon() -> Vec<String> {
    let mut lines = vec![
        "zero one two three four and in a the area of yes no ?".to_string(),
        "is there how many are more than".to_string(),
        "top left right bottom center".to_string(),
        CLASS_PROMPT_PREFIX.to_string(),
    ];
    for c in Category::ALL {
        lines.push(format!("{} {}", c.word(), c.plural()));
    }
    for c in Color::ALL {
        lines.push(c.word().to_string());
    }
    for l in LandCover::ALL {
        lines.push(l.word().to_string());
    }
    lines
}

/// Training questions per scene in the desk-scale runs.
pub const DESK_VQA_PER_SCENE: usize = 4;

/// Options for turning scenes into samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub vqa_per_scene: usize,
    pub tasks: [bool; 4],
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            vqa_per_scene: 1,
            tasks: [true; 4],
            seed: 0,
        }
    }
}

fn sample_for(entry: &SceneEntry, task: Task, suffix: &str) -> Sample {
    Sample {
        id: format!("{}-{suffix}", entry.id),
        image_id: entry.id.clone(),
        image: entry.image.clone(),
        task,
        text: String::new(),
        answer: None,
        bbox_px: None,
        retrieval_eligible: task.retrieval_eligible(),
    }
}

/// The VQA items a scene contributes to training: its primary question plus
/// further balanced draws from its question pool.
pub fn training_questions(entry: &SceneEntry, n: usize, run_seed: u64) -> Vec<QaPair> {
    if n == 0 {
        return Vec::new();
    }
    let primary = entry.generated.qa.clone();
    let rest: Vec<QaPair> = entry
        .generated
        .scene
        .question_pool()
        .into_iter()
        .filter(|q| q.question != primary.question)
        .collect();
    let mut rng = seed::substream(seed::mix(run_seed, hash_id(&entry.id)), "questions");
    let mut out = vec![primary];
    out.extend(sample_questions(&rest, n - 1, &mut rng));
    out
}

/// Questions about a scene that are absent from its training questions.
pub fn held_out_questions(entry: &SceneEntry, train: &[QaPair], n: usize, run_seed: u64) -> Vec<QaPair> {
    let pool: Vec<QaPair> = entry
        .generated
        .scene
        .question_pool()
        .into_iter()
        .filter(|q| train.iter().all(|t| t.question != q.question))
        .collect();
    let mut rng = seed::substream(seed::mix(run_seed, hash_id(&entry.id)), "held-out");
    sample_questions(&pool, n, &mut rng)
}

fn hash_id(id: &str) -> u64 {
    id.bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)))
}

pub fn build_samples(scenes: &[SceneEntry], opts: &SampleOptions) -> Vec<Sample> {
    let mut out = Vec::new();
    for entry in scenes {
        let g = &entry.generated;
        if opts.tasks[0] {
            let mut s = sample_for(entry, Task::CaptionShort, "short");
            s.text = g.caption_short.clone();
            out.push(s);
        }
        if opts.tasks[1] {
            let mut s = sample_for(entry, Task::CaptionLong, "long");
            s.text = g.caption_long.clone();
            out.push(s);
        }
        if opts.tasks[2] {
            for (k, qa) in training_questions(entry, opts.vqa_per_scene, opts.seed)
                .into_iter()
                .enumerate()
            {
                let mut s = sample_for(entry, Task::Vqa, &format!("vqa{k}"));
                s.text = qa.question;
                s.answer = Some(qa.answer);
                out.push(s);
            }
        }
        if opts.tasks[3] {
            let mut s = sample_for(entry, Task::Grounding, "vg");
            s.text = g.grounding_query.clone();
            s.bbox_px = Some(g.grounding_box);
            out.push(s);
        }
    }
    out
}

/// VQA samples asking each scene `per_scene` questions it was not trained
/// on (given the same options used for `build_samples`).
pub fn held_out_samples(scenes: &[SceneEntry], opts: &SampleOptions, per_scene: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for entry in scenes {
        let seen = training_questions(entry, opts.vqa_per_scene, opts.seed);
        for (k, qa) in held_out_questions(entry, &seen, per_scene, opts.seed)
            .into_iter()
            .enumerate()
        {
            let mut s = sample_for(entry, Task::Vqa, &format!("held{k}"));
            s.text = qa.question;
            s.answer = Some(qa.answer);
            out.push(s);
        }
    }
    out
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub task: Task,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_px: Option<[usize; 4]>,
    pub retrieval_eligible: bool,
}

pub fn image_path(image_id: &str) -> String {
    format!("images/{image_id}.ppm")
}

impl ManifestRecord {
    pub fn from_sample(s: &Sample) -> Self {
        ManifestRecord {
            id: s.id.clone(),
            image: image_path(&s.image_id),
            task: s.task,
            text: s.text.clone(),
            answer: s.answer.clone(),
            bbox_px: s.bbox_px.map(PixelBox::to_array),
            retrieval_eligible: s.retrieval_eligible,
        }
    }
}

pub fn manifest_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Writes the images (once per scene) and the manifest for one split.
pub fn write_split(dir: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut written = std::collections::HashSet::new();
    for s in samples {
        if written.insert(s.image_id.clone()) {
            s.image.save_ppm(&dir.join(image_path(&s.image_id)))?;
        }
    }
    let path = manifest_path(dir, split);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&ManifestRecord::from_sample(s)).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads a split's samples, reading each referenced image once.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let records = read_manifest(&manifest_path(dir, split))?;
    let mut cache: HashMap<String, Arc<Image>> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let image = match cache.get(&r.image) {
            Some(img) => img.clone(),
            None => {
                let img = Arc::new(Image::load_ppm(&dir.join(&r.image))?);
                cache.insert(r.image.clone(), img.clone());
                img
            }
        };
        let image_id = Path::new(&r.image)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&r.image)
            .to_string();
        out.push(Sample {
            id: r.id,
            image_id,
            image,
            task: r.task,
            text: r.text,
            answer: r.answer,
            bbox_px: r.bbox_px.map(PixelBox::from_array),
            retrieval_eligible: r.retrieval_eligible,
        });
    }
    Ok(out)
}

/// Answer family of a VQA sample, recovered from its question template.
pub fn answer_type(sample: &Sample) -> Option<AnswerType> {
    AnswerType::of_question(&sample.text)
}
