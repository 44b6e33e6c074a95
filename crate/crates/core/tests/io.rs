use patcnn::metrics::{evaluate, read_eval_csv, write_eval_csv};
use patcnn::nn::{Checkpoint, ModelConfig, ResUNet, TrainingMeta};
use patcnn::phantom::{generate_case, PhantomSpec};
use patcnn::stats::{read_patv_csv, write_patv_csv};
use patcnn::trainer::predict_proba;
use patcnn::volumes::{load_mask, load_volume, save_mask, save_volume, LabelMask};
use patcnn::{Error, Volume};

#[test]
fn nifti_round_trip_keeps_data_and_spacing() {
    let dir = tempfile::tempdir().unwrap();
    let case = generate_case::<f32>(&PhantomSpec { dims: [20, 18, 7], seed: 4, ..Default::default() }).unwrap();
    for name in ["image.nii", "image.nii.gz"] {
        let p = dir.path().join(name);
        save_volume(&case.volume, &p).unwrap();
        let back: Volume = load_volume(&p).unwrap();
        assert_eq!(back.dims(), [20, 18, 7]);
        assert_eq!(back.spacing(), case.volume.spacing());
        assert_eq!(back.data(), case.volume.data());
    }
    let p = dir.path().join("pat.nii.gz");
    save_mask(&case.pat, &p).unwrap();
    assert_eq!(load_mask(&p).unwrap(), case.pat);
}

#[test]
fn loading_garbage_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.nii");
    std::fs::write(&p, b"not an image").unwrap();
    assert!(matches!(load_volume::<f32>(&p), Err(Error::Format(_))));
    assert!(matches!(load_volume::<f32>(dir.path().join("missing.nii")), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_file_round_trip_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { channels: [2, 3, 3, 4], bottleneck: 5, init_seed: 8, ..Default::default() };
    let model = ResUNet::<f64>::new(&cfg).unwrap();
    let meta = TrainingMeta { epochs_run: 3, seed: 8, train_losses: vec![0.9, 0.8, 0.7], ..Default::default() };
    let mut ck = Checkpoint::new(model, meta);
    let p = dir.path().join("model.ckpt");
    ck.save(&p).unwrap();
    let back = Checkpoint::<f64>::load(&p).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.model.config(), &cfg);

    let case = generate_case::<f64>(&PhantomSpec { dims: [20, 20, 9], seed: 1, ..Default::default() }).unwrap();
    assert_eq!(
        predict_proba(&ck.model, &case.volume).unwrap(),
        predict_proba(&back.model, &case.volume).unwrap()
    );
    // values are converted when loading at another precision
    let narrow = Checkpoint::<f32>::load(&p).unwrap();
    assert_eq!(narrow.model.param_count(), back.model.param_count());
    std::fs::write(&p, &std::fs::read(&p).unwrap()[..100]).unwrap();
    assert!(matches!(Checkpoint::<f64>::load(&p), Err(Error::Format(_))));
}

#[test]
fn csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let case = generate_case::<f32>(&PhantomSpec { seed: 2, ..Default::default() }).unwrap();
    let empty = LabelMask::zeros_like(&case.volume);
    let rows = vec![
        ("case_000".to_string(), evaluate(&case.pat, &case.pat).unwrap()),
        ("case_001".to_string(), evaluate(&empty, &case.pat).unwrap()),
    ];
    let p = dir.path().join("eval.csv");
    write_eval_csv(&rows, &p).unwrap();
    let back = read_eval_csv(&p).unwrap();
    assert_eq!(back.len(), 2);
    // six decimals
    let (a, b) = (&back[0].1, &rows[0].1);
    assert_eq!(a.dice, 1.0);
    assert!((a.patv_true_cm3 - b.patv_true_cm3).abs() < 1e-6);
    assert_eq!(back[1].1.hausdorff_mm, None);
    assert_eq!(back[1].1.dice, 0.0);

    let patv = vec![("a".to_string(), 139.6), ("b".to_string(), 0.0)];
    let p = dir.path().join("patv.csv");
    write_patv_csv(&patv, &p).unwrap();
    assert_eq!(read_patv_csv(&p).unwrap(), patv);
}
