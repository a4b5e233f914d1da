use super::*;
use crate::data::{build_samples, generate_split, lexicon, SampleOptions, Split, Task};
use crate::error::Error;
use crate::model::{Model, ModelConfig};
use crate::objectives::TaskWeights;
use crate::vocab::Vocabulary;

fn small_model(vocab: &Vocabulary, seed: u64) -> Model {
    let mut c = ModelConfig::desk(vocab.len());
    c.layers = 2;
    c.vl_expert_layers = 1;
    c.hidden = 32;
    c.ffn_hidden = 64;
    c.proj_dim = 16;
    Model::new(c, seed).unwrap()
}

fn fixture(scenes: usize) -> (Vocabulary, Vec<crate::data::Sample>) {
    let vocab = Vocabulary::build(&lexicon());
    let entries = generate_split(Split::Train, scenes, 3);
    let samples = build_samples(&entries, &SampleOptions::default());
    (vocab, samples)
}

fn quick(epochs: usize, tasks: &[Task]) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 4,
        warmup_epochs: 0,
        tasks: tasks.to_vec(),
        ..StageConfig::desk_stage2()
    }
}

#[test]
fn schedule_shape() {
    let (base, total, warm) = (1.0, 100, 10);
    assert!((lr_at(base, 0, total, warm) - 0.1).abs() < 1e-15);
    assert!((lr_at(base, 9, total, warm) - 1.0).abs() < 1e-15);
    assert!((lr_at(base, 10, total, warm) - 1.0).abs() < 1e-15);
    assert!((lr_at(base, 55, total, warm) - 0.5).abs() < 1e-12);
    assert!(lr_at(base, 99, total, warm) < 1e-3);
    for s in 10..99 {
        assert!(lr_at(base, s + 1, total, warm) <= lr_at(base, s, total, warm));
    }
}

#[test]
fn clipping() {
    let mut g = vec![vec![3.0], vec![4.0]];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut g = vec![vec![0.3, 0.4]];
    clip_global_norm(&mut g, 1.0);
    assert_eq!(g, vec![vec![0.3, 0.4]]);
}

#[test]
fn zero_epochs_is_identity() {
    let (vocab, samples) = fixture(4);
    let m = small_model(&vocab, 1);
    let cfg = StageConfig {
        epochs: 0,
        warmup_epochs: 0,
        ..StageConfig::desk_stage1()
    };
    let r = train_stage1_vg(&m, &samples, &vocab, &cfg, |_| {}).unwrap();
    assert_eq!(r.checkpoint, crate::model::Checkpoint::from_model(&m));
    assert!(r.log.is_empty() && r.first_step_loss.is_none());
}

#[test]
fn empty_dataset() {
    let (vocab, samples) = fixture(3);
    let m = small_model(&vocab, 1);
    let captions: Vec<_> = samples.into_iter().filter(|s| s.task != Task::Grounding).collect();
    assert!(matches!(
        train_stage1_vg(&m, &captions, &vocab, &StageConfig::desk_stage1(), |_| {}),
        Err(Error::EmptyDataset(_))
    ));
    assert!(matches!(
        train_stage1_vg(&m, &[], &vocab, &StageConfig::desk_stage1(), |_| {}),
        Err(Error::EmptyDataset(_))
    ));
}

#[test]
fn reruns_are_bitwise_identical() {
    let (vocab, samples) = fixture(6);
    let m = small_model(&vocab, 2);
    let cfg = quick(2, &Task::ALL);
    let a = train_stage2_multitask(&m, &samples, &vocab, &cfg, |_| {}).unwrap();
    let b = train_stage2_multitask(&m, &samples, &vocab, &cfg, |_| {}).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = train_stage2_multitask(&m, &samples, &vocab, &other, |_| {}).unwrap();
    assert_ne!(a.checkpoint, c.checkpoint);
}

#[test]
fn weights_sum_to_two_on_caption_only_data() {
    let (vocab, samples) = fixture(6);
    let m = small_model(&vocab, 3);
    let cfg = quick(4, &[Task::CaptionShort, Task::CaptionLong]);
    let mut seen = Vec::new();
    let r = train_stage2_multitask(&m, &samples, &vocab, &cfg, |row| seen.push(row.weights)).unwrap();
    assert_eq!(seen.len(), 4);
    for row in &r.log {
        assert_eq!(row.weights.sum(), 2.0);
        assert!(row.l_infonce > 0.0);
    }
    assert_eq!(r.log[0].weights, TaskWeights::EQUAL);
}

#[test]
fn grounding_warmup_lowers_loss() {
    let (vocab, samples) = fixture(8);
    let m = small_model(&vocab, 4);
    let cfg = StageConfig {
        epochs: 6,
        batch_size: 4,
        ..StageConfig::desk_stage1()
    };
    let r = train_stage1_vg(&m, &samples, &vocab, &cfg, |_| {}).unwrap();
    let last = r.log.last().unwrap().l_mlm;
    // the log records plain MLM; the step loss carries the weight 2
    assert!(
        last < r.first_step_loss.unwrap() / 2.0,
        "{last} vs {:?}",
        r.first_step_loss
    );
    assert!(r
        .log
        .iter()
        .all(|row| row.weights == TaskWeights { mlm: 2.0, infonce: 0.0 }));
}

#[test]
fn retrieval_only_moves_dual_path() {
    let (vocab, samples) = fixture(6);
    let m = small_model(&vocab, 5);
    let cfg = quick(1, &[Task::CaptionShort, Task::CaptionLong]);
    let r = train_retrieval(&m, &samples, &vocab, &cfg, |_| {}).unwrap();
    let out = r.checkpoint.to_model().unwrap();
    // vision-language experts never see a retrieval pass: only the
    // decoupled decay (at most lr * wd per step, 3 steps) can move them
    let bound = 3.0 * cfg.learning_rate * cfg.weight_decay;
    for i in m.expert_param_indices(crate::model::Expert::VisionLanguage) {
        for (a, b) in m.params()[i].data().iter().zip(out.params()[i].data()) {
            let rounding = f64::from(f32::EPSILON) * a.abs();
            assert!((b - a).abs() <= a.abs() * bound + rounding);
        }
    }
    let moved = m.index_of("proj.text.weight").unwrap();
    assert!(m.params()[moved]
        .data()
        .iter()
        .zip(out.params()[moved].data())
        .any(|(a, b)| (a - b).abs() > 1e-4));
    assert_ne!(r.checkpoint, crate::model::Checkpoint::from_model(&m));
}

#[test]
fn non_finite_loss_aborts() {
    let (vocab, samples) = fixture(3);
    let mut m = small_model(&vocab, 6);
    m.params_mut()[0].data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    assert!(matches!(
        train_stage2_multitask(&m, &samples, &vocab, &quick(1, &Task::ALL), |_| {}),
        Err(Error::NonFiniteLoss { epoch: 1, step: 0 })
    ));
}

#[test]
fn fixed_batch_overfits_monotonically() {
    use crate::data::{apply_mask, build_sequence};
    use crate::model::{CrossInput, Graph};
    use crate::numerics::{adamw_step, AdamState, AdamWConfig};
    use crate::objectives::mlm_loss_rows;

    let (vocab, samples) = fixture(2);
    let mut m = small_model(&vocab, 7);
    let mut rng = crate::seed::substream(0, "masking");
    let masked: Vec<_> = samples
        .iter()
        .map(|s| apply_mask(&build_sequence(s, &vocab).unwrap(), s.task, 0.3, &mut rng))
        .collect();
    let mut adam = AdamState::default();
    let opt = AdamWConfig {
        lr: 3e-4,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut prev = f64::INFINITY;
    for _ in 0..20 {
        let mut g = Graph::new(&m);
        let inputs: Vec<CrossInput> = samples
            .iter()
            .zip(&masked)
            .map(|(s, mk)| CrossInput {
                image: &s.image,
                tokens: &mk.tokens,
            })
            .collect();
        let rows: Vec<Vec<usize>> = masked.iter().map(|mk| mk.positions.clone()).collect();
        let targets: Vec<usize> = masked
            .iter()
            .flat_map(|mk| mk.targets.iter().map(|&t| t as usize))
            .collect();
        let logits = g.cross_logits(&inputs, &rows).unwrap();
        let loss = mlm_loss_rows(g.tape(), logits, &targets).unwrap();
        let value = g.value(loss).item();
        assert!(value < prev, "{value} !< {prev}");
        prev = value;
        let grads = g.param_grads(loss).unwrap();
        drop(g);
        adamw_step(m.params_mut(), &grads, &mut adam, &opt).unwrap();
    }
}

#[test]
fn checkpoint_file_helpers() {
    let (vocab, _) = fixture(1);
    let m = small_model(&vocab, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.melt");
    let c = crate::model::Checkpoint::from_model(&m);
    save_checkpoint(&c, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), c);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));
}
