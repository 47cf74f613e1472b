use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchguide::checkpoint::{read_tensor, tensor_to_bytes, write_tensor, Checkpoint, ModelKind};
use sketchguide::model::EpsilonNetwork;
use sketchguide::schedule::NoiseSchedule;
use sketchguide::sketch::NoisyClassifier;
use sketchguide::{Error, TensorF64};

#[test]
fn checkpoint_file_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let sched = NoiseSchedule::standard();
    let model = EpsilonNetwork::init(true, 8);
    let first = dir.path().join("nested/a.ckpt");
    Checkpoint::epsilon(&model, &sched).with_meta("iteration", 12).save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    assert_eq!(loaded.kind, ModelKind::Epsilon);
    assert_eq!(loaded.metadata["iteration"], "12");
    assert_eq!(loaded.schedule().unwrap().spec(), sched.spec());
    let second = dir.path().join("b.ckpt");
    loaded.save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(Checkpoint::load(&second).unwrap().into_epsilon().unwrap(), model);
}

#[test]
fn checkpoint_kinds_are_not_interchangeable() {
    let sched = NoiseSchedule::standard();
    let ckpt = Checkpoint::classifier(&NoisyClassifier::init(1), &sched);
    let bytes = ckpt.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes).unwrap().into_epsilon().is_err());
    assert!(Checkpoint::from_bytes(&bytes).unwrap().into_classifier().is_ok());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = Checkpoint::epsilon(&EpsilonNetwork::init(false, 1), &NoiseSchedule::standard()).to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    for damaged in [&bad_magic[..], &bad_version[..], &bytes[..bytes.len() - 3], &[][..]] {
        assert!(matches!(Checkpoint::from_bytes(damaged), Err(Error::Checkpoint(_))));
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(Checkpoint::load(&dir.path().join("absent.ckpt")).is_err());
}

#[test]
fn tensor_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = TensorF64::randn(vec![2, 1, 3, 5], &mut ChaCha8Rng::seed_from_u64(4));
    let path = dir.path().join("x/latent.tensor");
    write_tensor(&path, &t, "latent of img_00003").unwrap();
    let (back, note) = read_tensor(&path).unwrap();
    assert_eq!(back, t);
    assert_eq!(note, "latent of img_00003");
    let bytes = tensor_to_bytes(&t, "");
    assert_eq!(&bytes[..8], b"SKGTENS\0");
    assert_eq!(bytes.len(), 8 + 4 + 4 + 4 + 4 * 8 + 30 * 8);
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(read_tensor(&path).is_err());
}
