use kvadapt::backbone::{BackboneBundle, BackboneConfig};
use kvadapt::engine::{Engine, TrainConfig};
use kvadapt::metrics::{audit_forgetting, audit_retrieval, bench, PromptMode};
use kvadapt::storage::AdaptorStore;
use kvadapt::tasks::{Dataset, Level, Split, IMAGE_SIDE};
use kvadapt::vocab::Vocabulary;
use kvadapt::workflow::{acceptance_tasks, vocabulary_specs};

struct Setup {
    bundle: BackboneBundle,
    vocab: Vocabulary,
    datasets: Vec<Dataset>,
}

/// Small random backbone with one patch and one slide task.
fn setup() -> Setup {
    let all = acceptance_tasks();
    let mut plans = vec![all[0].clone(), all[1].clone()];
    for p in &mut plans {
        p.n_per_class = 10;
    }
    let vocab = Vocabulary::build(&vocabulary_specs(&plans, &[])).unwrap();
    let cfg = BackboneConfig {
        image_size: IMAGE_SIDE,
        d_v: 16,
        d_t: 16,
        n_layers_v: 1,
        n_layers_t: 1,
        n_heads: 2,
        vocab_size: vocab.len(),
        ..BackboneConfig::default()
    };
    Setup {
        bundle: BackboneBundle::init(cfg, 3).unwrap().freeze(),
        vocab,
        datasets: plans.iter().map(|p| p.generate(5).unwrap()).collect(),
    }
}

fn quick(level: Level) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ..TrainConfig::for_level(level)
    }
}

fn train_all(engine: &Engine, datasets: &[Dataset]) -> AdaptorStore {
    let mut store = AdaptorStore::new(&engine.bundle.checksum());
    for d in datasets {
        let out = engine.train_task(&d.spec, d, &store, &quick(d.spec.level)).unwrap();
        store.add_task(out.key, out.set).unwrap();
    }
    store
}

#[test]
fn forgetting_audit_is_zero_for_appends_and_catches_corruption() {
    let s = setup();
    let engine = Engine::new(&s.bundle, &s.vocab).unwrap();
    let store = train_all(&engine, &s.datasets);
    let before = store.prefix(1);
    let same = audit_forgetting(&engine, &before, &before, &s.datasets, 8).unwrap();
    assert_eq!(same.iter().map(|r| r.changed).sum::<usize>(), 0);
    let rows = audit_forgetting(&engine, &before, &store, &s.datasets, 8).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].n, s.datasets[0].split_len(Split::Test));
    assert_eq!(rows[0].changed, 0);

    // Overwrite every blob of the first task on disk with a different payload.
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    let task_dir = dir.path().join(&s.datasets[0].spec.task_id);
    for entry in std::fs::read_dir(&task_dir).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap() == "key.bin" {
            continue;
        }
        let bytes = std::fs::read(&p).unwrap();
        let floats: Vec<u8> = bytes
            .chunks(4)
            .enumerate()
            .flat_map(|(i, _)| (((i % 7) as f32 - 3.0) * 0.7).to_le_bytes())
            .collect();
        std::fs::write(&p, floats).unwrap();
    }
    let corrupted = AdaptorStore::load(dir.path(), Some(&s.bundle.checksum())).unwrap();
    let rows = audit_forgetting(&engine, &before, &corrupted, &s.datasets, 8).unwrap();
    assert!(rows[0].changed >= 1, "{rows:?}");
}

#[test]
fn retrieval_audit_accounting() {
    let s = setup();
    let engine = Engine::new(&s.bundle, &s.vocab).unwrap();
    let store = train_all(&engine, &s.datasets);
    let single = store.prefix(1);
    for mode in PromptMode::ALL {
        let rows = audit_retrieval(&engine, &single, &s.datasets[..1], mode).unwrap();
        assert_eq!(rows[0].wrong, 0);
        let rows = audit_retrieval(&engine, &store, &s.datasets, mode).unwrap();
        for (r, d) in rows.iter().zip(&s.datasets) {
            assert_eq!(r.n, d.split_len(Split::Test));
            assert!(r.wrong <= r.n);
            assert!((0.0..=1.0).contains(&r.rate()));
        }
    }
}

#[test]
fn bench_reports_positive_times_and_exact_bytes() {
    let s = setup();
    let engine = Engine::new(&s.bundle, &s.vocab).unwrap();
    let report = bench(&engine, &s.datasets, |level| TrainConfig {
        epochs: 1,
        ..TrainConfig::for_level(level)
    })
    .unwrap();
    let store = train_all(&engine, &s.datasets);
    for (i, row) in report.rows.iter().enumerate() {
        assert!(row.adaptor_ms_per_image > 0.0 && row.full_ms_per_image > 0.0);
        assert!(row.adaptor_bytes < row.full_bytes);
        assert_eq!(row.adaptor_bytes, store.entry_bytes(i));
    }
    assert_eq!(report.curve.last().unwrap().adaptor_cumulative, store.blob_bytes());
    assert!(report.storage_ratio() < 1.0);
}
