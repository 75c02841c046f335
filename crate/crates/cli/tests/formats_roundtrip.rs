//! Artifact files must reproduce their values exactly on reload.

use proptest::prelude::*;

use ctp_cli::formats::checkpoint::{
    read_checkpoint, read_ensemble, write_checkpoint, write_ensemble, Checkpoint, Provenance,
};
use ctp_cli::formats::dataset::{import_csv, read_dataset, write_dataset};
use ctp_cli::formats::reports::{
    read_bounds, read_series, read_train_log, read_treatment_file, write_bounds, write_series,
    write_train_log, write_treatment_file, BoundsRecord, FeatureRef, TreatmentFile,
};
use ctp_cli::CliError;
use ctp_core::dynsim::{degrade, simulate_hao, split_dataset};
use ctp_core::eval::SeriesTable;
use ctp_core::model::{CausalMask, CtpConfig, CtpModel};
use ctp_core::rng::Rng;
use ctp_core::trainer::TrainLogRecord;
use ctp_core::treatment::TreatmentSpec;

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("ctp-fmt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn dataset_roundtrip_is_bit_exact() {
    let raw = simulate_hao(24, 7).unwrap();
    let mut rng = Rng::new(1);
    let noisy = degrade(&raw, 0.1, 0.02, &mut rng).unwrap();
    let (train_d, _, _) = split_dataset(&noisy, (16, 4, 4), 7).unwrap();
    let path = tmp("data.ndjson");
    write_dataset(&train_d, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.samples.len(), train_d.samples.len());
    for (a, b) in train_d.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.oracle_init, b.oracle_init);
        for (va, vb) in a.visits.iter().zip(&b.visits) {
            assert_eq!(va.t.to_bits(), vb.t.to_bits());
            assert_eq!(va.missing, vb.missing);
            for (x, y) in va.values.iter().zip(&vb.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
    assert_eq!(train_d.oracle_adj, back.oracle_adj);
    assert_eq!(train_d.fingerprint, back.fingerprint);
    let (sa, sb) = (train_d.system.unwrap(), back.system.unwrap());
    assert_eq!(sa, sb);
    let (na, nb) = (train_d.norm.unwrap(), back.norm.unwrap());
    assert_eq!(na, nb);
}

#[test]
fn checkpoint_roundtrip_and_digest_guard() {
    let mut cfg = CtpConfig::new(3);
    cfg.enc_hidden = 4;
    cfg.deriv_hidden = vec![5];
    let mut rng = Rng::new(9);
    let model = CtpModel::init(cfg.clone(), &mut rng).unwrap();
    let mask = CausalMask::init(cfg.dim(), true);
    let ckpt = Checkpoint {
        model: model.clone(),
        mask: mask.clone(),
        provenance: Provenance {
            stage: "pilot".into(),
            root_seed: 11,
            dataset_digest: "abc123".into(),
            parent: None,
            val_seed: 99,
            val_loss: 1.25,
            val_tail: vec![1.3, 1.25, 1.27],
        },
    };
    let path = tmp("model.ckpt.json");
    write_checkpoint(&ckpt, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.model.cfg, cfg);
    assert_eq!(back.mask, mask);
    for i in 0..model.params.len() {
        let a = model.params.buf(i);
        let j = back.model.params.index_of(model.params.name(i)).unwrap();
        let b = back.model.params.buf(j);
        assert_eq!(a.data.len(), b.data.len());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    assert_eq!(back.provenance, ckpt.provenance);

    // A tampered provenance digest is a stale artifact.
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replace("\"root_seed\":11", "\"root_seed\":12");
    let bad = tmp("tampered.ckpt.json");
    std::fs::write(&bad, tampered).unwrap();
    assert!(matches!(
        read_checkpoint(&bad),
        Err(CliError::Stale(_))
    ));
}

#[test]
fn ensemble_roundtrip() {
    let mut cfg = CtpConfig::new(2);
    cfg.enc_hidden = 3;
    cfg.deriv_hidden = vec![4];
    let mut rng = Rng::new(21);
    let members: Vec<CtpModel> = (0..3)
        .map(|_| CtpModel::init(cfg.clone(), &mut rng).unwrap())
        .collect();
    let mask = CausalMask::init(cfg.dim(), true);
    let prov = Provenance {
        stage: "ensemble".into(),
        root_seed: 5,
        dataset_digest: "d".into(),
        parent: Some("p".into()),
        val_seed: 1,
        val_loss: 0.5,
        val_tail: vec![],
    };
    let path = tmp("ens.json");
    write_ensemble(&members, &mask, &prov, &path).unwrap();
    let back = read_ensemble(&path).unwrap();
    assert_eq!(back.members.len(), 3);
    for (a, b) in members.iter().zip(&back.members) {
        for i in 0..a.params.len() {
            assert_eq!(a.params.buf(i).data, b.params.buf(i).data);
        }
    }
}

#[test]
fn train_log_and_treatment_and_series_roundtrip() {
    let log = vec![
        TrainLogRecord {
            step: 100,
            l_final: 12.5,
            l_data: 11.0,
            sparse: 1.5,
            dag: 0.125,
            alpha: 0.001,
            rho: 1.0,
        },
        TrainLogRecord {
            step: 200,
            l_final: 9.0,
            l_data: 8.25,
            sparse: 1.25,
            dag: 0.0625,
            alpha: 0.01,
            rho: 1.5,
        },
    ];
    let lp = tmp("train.log.jsonl");
    write_train_log(&log, &lp).unwrap();
    assert_eq!(read_train_log(&lp).unwrap(), log);

    let t = TreatmentFile {
        feature: FeatureRef::Name("n".into()),
        time: 52.0,
        value: 0.0,
        observe_from: 52.0,
        observe_to: 60.0,
        num_points: 9,
    };
    let tp = tmp("treatment.json");
    write_treatment_file(&t, &tp).unwrap();
    let back = read_treatment_file(&tp).unwrap();
    assert!(matches!(back.feature, FeatureRef::Name(ref n) if n == "n"));
    assert_eq!(back.num_points, 9);

    let table = SeriesTable {
        times: vec![52.0, 53.0],
        features: vec!["a".into(), "b".into()],
        predicted: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        oracle: Some(vec![vec![1.1, 2.1], vec![3.1, 4.1]]),
        lo: Some(vec![vec![0.5, 1.5], vec![2.5, 3.5]]),
        hi: Some(vec![vec![1.5, 2.5], vec![3.5, 4.5]]),
    };
    let sp = tmp("series.json");
    write_series(&table, &sp).unwrap();
    let back = read_series(&sp).unwrap();
    assert!(back.bounds_present);
    assert_eq!(back.predicted, table.predicted);
    assert_eq!(back.oracle.unwrap(), table.oracle.clone().unwrap());

    // bounds omitted: flag reflects it and columns go null
    let bare = SeriesTable {
        lo: None,
        hi: None,
        oracle: None,
        ..table
    };
    let sp2 = tmp("series_bare.json");
    write_series(&bare, &sp2).unwrap();
    let back = read_series(&sp2).unwrap();
    assert!(!back.bounds_present);
    assert!(back.min.is_none() && back.max.is_none());

    // csv flavour parses as csv
    let sc = tmp("series.csv");
    write_series(&bare, &sc).unwrap();
    let text = std::fs::read_to_string(&sc).unwrap();
    assert!(text.starts_with("t,a_predicted,b_predicted"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn bounds_roundtrip() {
    let spec = TreatmentSpec {
        feature: 1,
        t_start: 52.0,
        value: -0.7,
        observe_from: 52.0,
        observe_to: 54.0,
        n_points: 3,
    };
    let rec = BoundsRecord {
        sample_id: 4,
        times: vec![52.0, 53.0, 54.0],
        lo: vec![vec![0.0, 1.0]; 3],
        mean: vec![vec![0.5, 1.5]; 3],
        hi: vec![vec![1.0, 2.0]; 3],
        oracle: Some(vec![vec![0.4, 1.4]; 3]),
    };
    let path = tmp("bounds.json");
    write_bounds(
        &spec,
        &["a".into(), "b".into()],
        &[rec],
        "dataset-digest",
        "model-digest",
        &path,
    )
    .unwrap();
    let back = read_bounds(&path).unwrap();
    assert_eq!(back.samples.len(), 1);
    assert_eq!(back.samples[0].mean[1], vec![0.5, 1.5]);
    assert_eq!(back.treatment.n_points, 3);
    assert_eq!(back.dataset, "dataset-digest");
}

#[test]
fn csv_import_builds_irregular_samples() {
    let csv = tmp("long.csv");
    std::fs::write(
        &csv,
        "sample_id,time,feature,value\n\
         p1,0.0,hr,60\n\
         p1,1.5,hr,62\n\
         p1,1.5,med,1\n\
         p1,3.0,hr,65\n\
         p2,0.0,hr,70\n\
         p2,2.0,med,0\n\
         p2,2.5,hr,71\n",
    )
    .unwrap();
    let data = import_csv(&csv, 0.5).unwrap();
    assert_eq!(data.n_features(), 2); // hr, med (sorted)
    assert_eq!(data.samples.len(), 2);
    let hr = data.features.iter().position(|f| f.name == "hr").unwrap();
    let med = data.features.iter().position(|f| f.name == "med").unwrap();
    assert!(!data.features[hr].discrete);
    assert!(data.features[med].discrete);
    let p1 = &data.samples[0];
    assert_eq!(p1.visits.len(), 3);
    assert_eq!(p1.visits[1].t, 1.5);
    assert_eq!(p1.visits[1].missing[hr], 0);
    assert_eq!(p1.visits[0].missing[med], 1);
    assert_eq!(p1.n_input + p1.n_label, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn float17_roundtrips_any_finite_f64(bits in any::<u64>()) {
        let x = f64::from_bits(bits);
        prop_assume!(x.is_finite());
        let mut w = ctp_cli::formats::json::JsonWriter::new();
        w.begin_arr().f64(x).end_arr();
        let parsed: Vec<f64> = serde_json::from_str(&w.finish()).unwrap();
        prop_assert_eq!(parsed[0].to_bits(), x.to_bits());
    }
}
