use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use jcrnet::checkpoint::{Checkpoint, MAGIC, VERSION};
use jcrnet::data::{collect_inputs, pair_directory, Dataset};
use jcrnet::fixture::synthetic_dataset;
use jcrnet::image::{decode_ppm, encode_ppm, load_image, save_image, ImageBuffer};
use jcrnet::train::{train_loop, PatchSpec, Schedule, TrainConfig, Trainer};
use jcrnet::{Error, Jcrnet, ModelConfig, ParamStore, Tensor};

fn tiny_run() -> (Jcrnet, Checkpoint) {
    let model = Jcrnet::new(ModelConfig::tiny()).unwrap();
    let data = synthetic_dataset(1, 16).unwrap();
    let cfg = TrainConfig {
        schedule: Schedule { total_steps: 4, ..Schedule::default() },
        patch: PatchSpec { patch: 16, batch: 1 },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, model.init_params(cfg.seed), cfg).unwrap();
    for _ in 0..2 {
        trainer.step(&data).unwrap();
    }
    let ck = Checkpoint::new(&model.cfg, trainer.params.clone(), Some(trainer.state.clone()));
    (model, ck)
}

#[test]
fn ppm_scaling_example() {
    let bytes = [b"P6\n2 1\n255\n".as_slice(), &[255, 0, 0, 0, 0, 255]].concat();
    let img = decode_ppm(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (2, 1));
    assert_eq!(img.get(0, 0), [1.0, 0.0, 0.0]);
    assert_eq!(img.get(0, 1), [0.0, 0.0, 1.0]);
    assert_eq!(encode_ppm(&img), bytes);
}

#[test]
fn truncated_ppm_names_both_counts() {
    let bytes = [b"P6 # two by two\n2 2\n255\n".as_slice(), &[7; 9]].concat();
    match decode_ppm(&bytes) {
        Err(Error::Format { offset, detail }) => {
            assert_eq!(offset, 24);
            assert!(detail.contains("expected 12"), "{detail}");
            assert!(detail.contains("found 9"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(decode_ppm(b"P6\n2 2\n65535\n"), Err(Error::Format { .. })));
    assert!(matches!(decode_ppm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn quantization_on_save() {
    let dir = tempdir().unwrap();
    let img = ImageBuffer::new(2, 1, vec![1.0, 0.5, 1.2, -0.3, 0.0, 0.49]).unwrap();
    let path = dir.path().join("q.ppm");
    save_image(&img, &path).unwrap();
    let raw = std::fs::read(&path).unwrap();
    assert_eq!(&raw[raw.len() - 6..], &[255, 128, 255, 0, 0, 125]);
}

#[test]
fn file_round_trips_are_pixel_identical() {
    let dir = tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let bytes: Vec<u8> = (0..7 * 5 * 3).map(|_| r.gen()).collect();
    let img = ImageBuffer::from_bytes(7, 5, &bytes).unwrap();
    for name in ["a.ppm", "b.png", "C.PNG"] {
        let path = dir.path().join(name);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.to_bytes(), bytes, "{name}");
        let again = dir.path().join(format!("again-{name}"));
        save_image(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
    assert!(matches!(save_image(&img, dir.path().join("x.jpg")), Err(Error::Config(_))));
    assert!(matches!(save_image(&img, dir.path().join("missing/x.ppm")), Err(Error::Io { .. })));
    assert!(matches!(load_image(dir.path().join("none.ppm")), Err(Error::Io { .. })));
}

#[test]
fn loader_prefixes_the_path() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.ppm");
    std::fs::write(&path, b"P6\n4 4\n255\n\x00").unwrap();
    let msg = load_image(&path).unwrap_err().to_string();
    assert!(msg.contains("bad.ppm") && msg.contains("truncated"), "{msg}");
}

#[test]
fn pairing_is_strict_by_name() {
    let dir = tempdir().unwrap();
    let img = ImageBuffer::new(16, 16, vec![0.5; 768]).unwrap();
    for sub in ["low", "high"] {
        std::fs::create_dir(dir.path().join(sub)).unwrap();
    }
    save_image(&img, dir.path().join("low/a.ppm")).unwrap();
    save_image(&img, dir.path().join("high/a.ppm")).unwrap();
    save_image(&img, dir.path().join("low/b.png")).unwrap();
    save_image(&img, dir.path().join("high/c.png")).unwrap();
    std::fs::write(dir.path().join("low/notes.txt"), "ignored").unwrap();

    let pairing = pair_directory(dir.path()).unwrap();
    assert!(!pairing.is_complete());
    let report = pairing.report().join("\n");
    assert!(report.contains("b.png") && report.contains("c.png"), "{report}");
    let (data, _) = Dataset::load(dir.path()).unwrap();
    assert_eq!(data.len(), 1);
    assert_eq!(data.pairs[0].name, "a");

    assert_eq!(collect_inputs(&dir.path().join("low")).unwrap().len(), 2);
    assert_eq!(collect_inputs(&dir.path().join("low/a.ppm")).unwrap().len(), 1);
    assert!(Dataset::load(dir.path().join("low")).is_err());
}

#[test]
fn checkpoint_file_is_byte_stable() {
    let dir = tempdir().unwrap();
    let (_, ck) = tiny_run();
    let first = dir.path().join("a.jcrn");
    let second = dir.path().join("b.jcrn");
    ck.save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    assert_eq!(loaded.echo, ck.echo);
    assert_eq!(loaded.state, ck.state);
    for ((n1, a), (n2, b)) in loaded.params.iter().zip(ck.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.data(), b.data());
    }
    loaded.save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(&std::fs::read(&first).unwrap()[..4], MAGIC);
}

#[test]
fn inference_checkpoint_cannot_resume() {
    let (model, ck) = tiny_run();
    let bare = Checkpoint { state: None, ..ck.clone() };
    let back = Checkpoint::from_bytes(&bare.to_bytes().unwrap()).unwrap();
    assert!(matches!(back.require_state(), Err(Error::Config(_))));
    let params = back.params.cast::<f32>();
    let x = Tensor::<f32>::full([1, 3, 8, 8], 0.2);
    assert_eq!(model.enhance(&params, &x).unwrap().shape(), &[1, 3, 8, 8]);
    assert_eq!(back.model_config().unwrap(), ModelConfig::tiny());

    // the saved state reproduces the rest of the run
    let data = synthetic_dataset(1, 16).unwrap();
    let cfg = TrainConfig {
        schedule: Schedule { total_steps: 4, ..Schedule::default() },
        patch: PatchSpec { patch: 16, batch: 1 },
        ..TrainConfig::default()
    };
    let (full, _) = train_loop(&model, &data, cfg).unwrap();
    let state = ck.require_state().unwrap().clone();
    let mut resumed = Trainer::resume(&model, ck.params.clone(), state, cfg).unwrap();
    resumed.run(&data, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.params, full);
}

#[test]
fn any_flipped_record_byte_is_rejected() {
    let (_, ck) = tiny_run();
    let bare = Checkpoint { state: None, ..ck };
    let bytes = bare.to_bytes().unwrap();
    let echo_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let records = 12 + echo_len..bytes.len() - 1;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let at = r.gen_range(records.clone());
        let mut bad = bytes.clone();
        bad[at] ^= 1 << r.gen_range(0..8);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })), "byte {at}");
    }
}

fn record(name: &str, shape: &[u32], payload: &[f32]) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend((name.len() as u32).to_le_bytes());
    w.extend(name.as_bytes());
    w.extend((shape.len() as u32).to_le_bytes());
    for e in shape {
        w.extend(e.to_le_bytes());
    }
    w.extend((payload.len() as u64 * 4).to_le_bytes());
    for v in payload {
        w.extend(v.to_le_bytes());
    }
    let crc = crc32fast::hash(&w);
    w.extend(crc.to_le_bytes());
    w
}

fn file(records: &[Vec<u8>]) -> Vec<u8> {
    let mut w = MAGIC.to_vec();
    w.extend(VERSION.to_le_bytes());
    w.extend(0u32.to_le_bytes());
    w.extend((records.len() as u32).to_le_bytes());
    for r in records {
        w.extend(r);
    }
    w.push(0);
    w
}

#[test]
fn hand_built_files() {
    let ok = file(&[record("a", &[2], &[1.0, 2.0]), record("b", &[1], &[3.0])]);
    let ck = Checkpoint::from_bytes(&ok).unwrap();
    assert_eq!(ck.params.get("a").unwrap().data(), &[1.0, 2.0]);
    assert_eq!(ck.to_bytes().unwrap(), ok);

    let dup = file(&[record("a", &[1], &[1.0]), record("a", &[1], &[2.0])]);
    match Checkpoint::from_bytes(&dup) {
        Err(Error::Format { detail, .. }) => assert!(detail.contains("duplicate"), "{detail}"),
        other => panic!("{other:?}"),
    }

    let huge = file(&[record("h", &[u32::MAX, u32::MAX, u32::MAX], &[])]);
    match Checkpoint::from_bytes(&huge) {
        Err(Error::Format { detail, .. }) => assert!(detail.contains("overflow"), "{detail}"),
        other => panic!("{other:?}"),
    }

    let mut trailing = ok.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format { .. })));
    let mut magic = ok;
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn store_insert_rejects_duplicates() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::zeros([1])).unwrap();
    assert!(store.insert("w", Tensor::zeros([1])).is_err());
}
