use pcl_core::codebook;
use pcl_core::datagen::{self, StreamSpec, TaskStream};
use pcl_core::trainer::{bytes_contain_samples, combine, total_loss, Encoded, StateKind};
use pcl_core::{Mode, ModelConfig, RunConfig, ToyModel, TrainConfig, Trainer};
use pcl_tensor::{Tape, Tensor};

fn small_spec(seed: u64) -> StreamSpec {
    StreamSpec {
        tasks: 3,
        train_per_class: 8,
        test_per_class: 4,
        ..StreamSpec::class_inc_default(seed)
    }
}

fn setup(mode: Mode, seed: u64, spec: StreamSpec) -> (TaskStream, Trainer) {
    let stream = datagen::generate(&spec).unwrap();
    let model_cfg = ModelConfig {
        classes: spec.total_classes(),
        seed,
        ..ModelConfig::default()
    };
    let model = ToyModel::new(model_cfg, &spec).unwrap();
    let cfg = TrainConfig {
        mode,
        seed,
        ..TrainConfig::default()
    };
    (stream, Trainer::new(model, cfg).unwrap())
}

#[test]
fn zero_penalty_weights_leave_pure_cross_entropy() {
    let (stream, trainer) = setup(Mode::Pc, 0, small_spec(0));
    let cfg = TrainConfig {
        lambda: 0.0,
        beta: 0.0,
        ..trainer.cfg.clone()
    };
    let model = &trainer.model;
    let batch: Vec<Encoded> = stream.tasks[0]
        .train
        .iter()
        .take(4)
        .map(|s| Encoded {
            sample: s,
            query: model.encode_query(&s.x).unwrap(),
        })
        .collect();
    let tape = Tape::new();
    let (loss, terms) = total_loss(&tape, model, &batch, &cfg, 0..4).unwrap();
    assert_eq!(loss.item(), terms.ce);
    assert!(terms.orth > 0.0 && terms.ce > 0.0);
}

#[test]
fn perfect_fit_gives_near_zero_total() {
    let tape = Tape::new();
    let mut logits = Tensor::zeros(1, 3);
    logits.set(0, 1, 1000.0);
    let ce = tape.constant(logits).cross_entropy(&[1]).unwrap();
    let m = Tensor::eye(4);
    let orth = codebook::orth_loss(&tape, tape.constant(m.clone())).unwrap();
    let reg = codebook::reg_loss(&tape, tape.constant(m.clone()), &m).unwrap();
    let (total, terms) = combine(ce, Some(orth), Some(reg), None, &TrainConfig::default()).unwrap();
    assert!(total.item() < 1e-6, "{terms:?}");
}

#[test]
fn training_reduces_loss_and_keeps_backbone_frozen() {
    let (stream, mut trainer) = setup(Mode::Pc, 1, small_spec(1));
    let before = trainer.model.frozen_hash();
    let log = trainer.train_task(&stream.tasks[0], 4).unwrap();
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = log.iter().filter(|s| s.epoch == e).map(|s| s.terms.total).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(epoch_mean(4) < epoch_mean(0));
    assert!(log.iter().all(|s| s.terms.ce >= 0.0 && s.terms.orth >= 0.0 && s.terms.reg >= 0.0));
    assert_eq!(trainer.model.frozen_hash(), before);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (stream, mut trainer) = setup(Mode::Pc, 2, small_spec(2));
    trainer.cfg.lr = 0.0;
    let before = trainer.model.named_params();
    trainer.train_stream(&stream, |_, _| Ok(())).unwrap();
    assert_eq!(trainer.model.named_params(), before);
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let run = || {
        let (stream, mut trainer) = setup(Mode::Pc, 3, small_spec(3));
        let outcome = trainer.train_stream(&stream, |_, _| Ok(())).unwrap();
        (trainer.model.named_params(), outcome.matrix.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn stream_updates_ensemble_once_per_task() {
    let (stream, mut trainer) = setup(Mode::PgmOnly, 4, small_spec(4));
    let mut counts = Vec::new();
    let outcome = trainer
        .train_stream(&stream, |t, r| {
            counts.push((r.task, t.model.codebook.ema_updates()));
            Ok(())
        })
        .unwrap();
    assert_eq!(counts, [(1, 1), (2, 2), (3, 3)]);
    assert!(outcome.matrix.is_complete());
    assert_eq!(outcome.stages[2].accuracies.len(), 3);
}

#[test]
fn single_task_stream_has_no_forgetting() {
    let spec = StreamSpec {
        tasks: 1,
        ..small_spec(5)
    };
    let (stream, mut trainer) = setup(Mode::FrozenBaseline, 5, spec);
    let outcome = trainer.train_stream(&stream, |_, _| Ok(())).unwrap();
    assert_eq!((outcome.matrix.tasks(), outcome.matrix.stages()), (1, 1));
    assert!(outcome.matrix.forgetting(1).is_err());
    assert!(outcome.stages[0].forgetting.is_none());
}

#[test]
fn inter_task_state_holds_no_samples() {
    let (stream, mut trainer) = setup(Mode::Pc, 6, small_spec(6));
    let mut audited = 0;
    trainer
        .train_stream(&stream, |t, r| {
            let state = t.state();
            for (name, kind, shape) in state.inventory() {
                let expected = match kind {
                    StateKind::Param => t.model.store.find(&name).map(|id| t.model.store.value(id).shape()),
                    StateKind::AdamFirstMoment | StateKind::AdamSecondMoment => {
                        let base = name.splitn(3, '.').nth(2).unwrap();
                        t.model.store.find(base).map(|id| t.model.store.value(id).shape())
                    }
                    StateKind::CodebookEnsemble => Some(t.model.codebook.shape()),
                };
                assert_eq!(expected, Some(shape), "{name}");
            }
            let bytes = state.to_bytes();
            for task in &stream.tasks[..r.task] {
                assert!(!bytes_contain_samples(&bytes, &task.train));
                assert!(!bytes_contain_samples(&bytes, &task.test));
            }
            audited += 1;
            Ok(())
        })
        .unwrap();
    assert_eq!(audited, 3);
}

#[test]
fn sample_scan_detects_planted_rows() {
    let stream = datagen::generate(&small_spec(7)).unwrap();
    let s = &stream.tasks[0].train[3];
    let mut bytes = vec![0u8; 13];
    bytes.extend(s.x.row(5).iter().flat_map(|v| v.to_le_bytes()));
    assert!(bytes_contain_samples(&bytes, &stream.tasks[0].train));
    assert!(!bytes_contain_samples(&bytes, &stream.tasks[1].train));
}

#[test]
fn past_class_mask_changes_only_the_training_objective() {
    let mut cfg = RunConfig::new("class_inc_default", Mode::FrozenBaseline, 8).unwrap();
    cfg.stream = small_spec(8);
    let masked = pcl_core::run::run(&cfg, None, |_, _| Ok(())).unwrap();
    cfg.train.mask_past_classes = !cfg.train.mask_past_classes;
    let unmasked = pcl_core::run::run(&cfg, None, |_, _| Ok(())).unwrap();
    let first = |r: &pcl_core::run::RunResult| r.outcome.log.iter().take(5).map(|s| s.terms.ce).collect::<Vec<_>>();
    assert_eq!(first(&masked), first(&unmasked));
    assert_ne!(masked.model.named_params(), unmasked.model.named_params());
}
