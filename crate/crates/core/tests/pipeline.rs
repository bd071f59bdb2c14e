use rgmm_core::evaluation::{generate_phantom, mae, masked_ct, OraclePredictor, Phantom, PhantomSpec};
use rgmm_core::mixture::TissueGmm;
use rgmm_core::predictor::{predict_ct, read_bundle, train_pipeline, write_bundle, RgmmConfig, RgmmModel};
use rgmm_core::volume::{extract_unlabeled, Volume};
use rgmm_core::Error;

fn small_config() -> RgmmConfig {
    let mut cfg = RgmmConfig {
        j_candidates: vec![vec![1, 2], vec![1, 2]],
        ..RgmmConfig::default()
    };
    cfg.boost.n_learners = 8;
    cfg.tree.max_splits = 40;
    cfg
}

fn phantom(seed: u64) -> Phantom {
    let spec = PhantomSpec::standard([12, 12, 10], 2).unwrap();
    generate_phantom(&spec, 3, seed).unwrap()
}

#[test]
fn trains_and_predicts_on_phantom() {
    let ph = phantom(1);
    let (model, report) = train_pipeline(&ph.patients[..2], &small_config(), 3).unwrap();
    assert_eq!(report.selections.len(), 2);
    assert!(report.selections.iter().all(|s| [1, 2].contains(&s.n_components) && s.candidates.len() == 2));
    assert_eq!(report.validation_patient, "p02");
    assert_eq!(report.n_rows, 2 * 12 * 12 * 10);
    assert!(report.classifier_cv.is_none());

    let test = &ph.patients[2];
    let pred = predict_ct(&model, test.mr_channels(), test.mask()).unwrap();
    assert_eq!(pred.ct.dims(), test.ct().dims());
    assert_eq!(pred.ct.spacing(), test.ct().spacing());
    assert_eq!(pred.n_predicted, test.masked_count());
    assert!(pred.labels.data().iter().all(|&l| l == 0.0 || l == 1.0));
    let est: Vec<f64> = pred.ct.data().iter().map(|&v| v as f64).collect();
    assert!(mae(&masked_ct(test), &est).unwrap() < 60.0);
}

#[test]
fn bundle_round_trip_and_determinism() {
    let ph = phantom(2);
    let (a, _) = train_pipeline(&ph.patients, &small_config(), 7).unwrap();
    let (b, _) = train_pipeline(&ph.patients, &small_config(), 7).unwrap();
    let (c, _) = train_pipeline(&ph.patients, &small_config(), 8).unwrap();
    let text = write_bundle(&a);
    assert_eq!(text, write_bundle(&b));
    assert_ne!(text, write_bundle(&c));
    let back = read_bundle(&text).unwrap();
    assert_eq!(write_bundle(&back), text);

    let p = &ph.patients[0];
    let x = predict_ct(&a, p.mr_channels(), p.mask()).unwrap();
    let y = predict_ct(&back, p.mr_channels(), p.mask()).unwrap();
    assert_eq!(x.ct, y.ct);

    assert!(read_bundle(&text.replace("[gmm]", "[gm]")).is_err());
    assert!(read_bundle(&text.replacen("channels 2", "channels 3", 1)).is_err());
}

#[test]
fn patient_order_does_not_matter() {
    let ph = phantom(3);
    let mut reversed = ph.patients.clone();
    reversed.reverse();
    let (a, _) = train_pipeline(&ph.patients, &small_config(), 1).unwrap();
    let (b, _) = train_pipeline(&reversed, &small_config(), 1).unwrap();
    assert_eq!(write_bundle(&a), write_bundle(&b));
}

#[test]
fn duplicate_ids_rejected() {
    let ph = phantom(4);
    let twice = vec![ph.patients[0].clone(), ph.patients[0].clone()];
    assert!(matches!(train_pipeline(&twice, &small_config(), 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn empty_mask_and_channel_mismatch() {
    let ph = phantom(5);
    let (model, _) = train_pipeline(&ph.patients[..2], &small_config(), 0).unwrap();
    let p = &ph.patients[2];
    let empty = Volume::filled(p.dims(), [1.0; 3], 0.0).unwrap();
    let pred = predict_ct(&model, p.mr_channels(), &empty).unwrap();
    assert_eq!(pred.n_predicted, 0);
    assert!(pred.ct.data().iter().all(|&v| v == -1000.0));
    assert!(pred.labels.data().iter().all(|&v| v == -1.0));

    let err = predict_ct(&model, &p.mr_channels()[..1], p.mask()).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
}

fn masked_rows(model: &RgmmModel, p: &rgmm_core::volume::PatientDataset) -> Vec<f64> {
    extract_unlabeled(p.mr_channels(), p.mask(), model.config().order).unwrap().1
}

#[test]
fn hard_gating_ignores_the_other_class() {
    let ph = phantom(6);
    let (model, _) = train_pipeline(&ph.patients[..2], &small_config(), 2).unwrap();
    let truth = &ph.spec.class_models;
    let swap_bone = RgmmModel::new(
        model.config().clone(),
        model.seed(),
        model.n_channels(),
        model.classifier().clone(),
        TissueGmm::new(vec![model.regressors().class(0).clone(), truth[1].clone()]).unwrap(),
    )
    .unwrap();
    let rows = masked_rows(&model, &ph.patients[2]);
    let (la, ya) = model.predict_rows(&rows).unwrap();
    let (lb, yb) = swap_bone.predict_rows(&rows).unwrap();
    assert_eq!(la, lb);
    let mut checked = 0;
    for i in 0..la.len() {
        if la[i] == 0 {
            assert_eq!(ya[i], yb[i]);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn true_parameters_match_oracle_where_labels_agree() {
    let ph = phantom(7);
    let (trained, _) = train_pipeline(&ph.patients[..2], &small_config(), 4).unwrap();
    let model = RgmmModel::new(
        trained.config().clone(),
        0,
        trained.n_channels(),
        trained.classifier().clone(),
        TissueGmm::new(ph.spec.class_models.clone()).unwrap(),
    )
    .unwrap();
    let p = &ph.patients[2];
    let oracle = OraclePredictor::new(&ph.spec).unwrap().predict_patient(p).unwrap();
    let (labels, est) = model.predict_rows(&masked_rows(&model, p)).unwrap();
    let truth_labels: Vec<u8> = masked_ct(p).iter().map(|&y| (y > 100.0) as u8).collect();
    let mut agree = 0;
    for i in 0..labels.len() {
        if labels[i] == truth_labels[i] {
            assert_eq!(est[i], oracle[i]);
            agree += 1;
        }
    }
    assert!(agree as f64 > 0.9 * labels.len() as f64);
}

#[test]
fn oracle_labels_never_worse_on_average() {
    let (mut with_true, mut with_pred) = (0.0, 0.0);
    for seed in 0..5 {
        let ph = phantom(100 + seed);
        let (model, _) = train_pipeline(&ph.patients[..2], &small_config(), seed).unwrap();
        let p = &ph.patients[2];
        let rows = masked_rows(&model, p);
        let truth = masked_ct(p);
        let labels: Vec<u8> = truth.iter().map(|&y| (y > 100.0) as u8).collect();
        let (_, est) = model.predict_rows(&rows).unwrap();
        with_pred += mae(&truth, &est).unwrap();
        with_true += mae(&truth, &model.regress_rows(&rows, &labels).unwrap()).unwrap();
    }
    assert!(with_true <= with_pred, "true labels {with_true} vs predicted {with_pred}");
}

#[test]
fn classifier_cv_is_reported_when_requested() {
    let ph = phantom(8);
    let mut cfg = small_config();
    cfg.classifier_cv_folds = Some(3);
    cfg.boost.n_learners = 3;
    let (_, report) = train_pipeline(&ph.patients[..2], &cfg, 0).unwrap();
    let cv = report.classifier_cv.unwrap();
    assert_eq!(cv.total(), report.n_rows as u64);
    assert!(cv.err < 0.2);
}

#[test]
fn too_few_voxels_for_smallest_candidate() {
    let ph = phantom(9);
    let mut cfg = small_config();
    cfg.j_candidates[1] = vec![100_000];
    assert!(matches!(train_pipeline(&ph.patients[..2], &cfg, 0), Err(Error::TooFewSamples { .. })));
}
