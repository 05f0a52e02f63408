mod common;

use common::{eom_oracle, fixture12, pqd_oracle, record, FIXTURE8_S, FIXTURE8_Y};
use rand::seq::SliceRandom;
use stride_core::data::UNCERTAIN;
use stride_core::metrics::{
    eom, pqd, read_predictions, report, subgroup_accuracy, subgroup_report, write_predictions, Grouping, PredictionRecord,
    CLASSES,
};

fn fixture8(bits: u32) -> (Vec<i64>, Vec<PredictionRecord>) {
    let y_hat: Vec<i64> = (0..8).map(|i| i64::from((bits >> i) & 1)).collect();
    let records = (0..8).map(|i| record(i, FIXTURE8_S[i], 0, FIXTURE8_Y[i], y_hat[i])).collect();
    (y_hat, records)
}

#[test]
fn every_prediction_pattern_matches_brute_force() {
    for bits in 0..256u32 {
        let (y_hat, records) = fixture8(bits);
        let accs: Vec<f64> = subgroup_accuracy(&records, Grouping::Race).values().map(|a| a.acc).collect();
        match (pqd(&accs), pqd_oracle(&FIXTURE8_Y, &y_hat, &FIXTURE8_S, 2)) {
            (Ok(v), Some(o)) => assert_eq!(v.to_bits(), o.to_bits(), "pqd bits={bits:08b}"),
            (Err(_), None) => {}
            (got, want) => panic!("pqd bits={bits:08b}: {got:?} vs {want:?}"),
        }
        match (eom(&records, Grouping::Race, &CLASSES, false), eom_oracle(&FIXTURE8_Y, &y_hat, &FIXTURE8_S, 2)) {
            (Ok(v), Some(o)) => assert_eq!(v.value.to_bits(), o.to_bits(), "eom bits={bits:08b}"),
            (Err(_), None) => {}
            (got, want) => panic!("eom bits={bits:08b}: {got:?} vs {want:?}"),
        }
    }
}

#[test]
fn twelve_record_fixture_by_hand() {
    let r = report(&fixture12(), false).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let accs: Vec<f64> = r.race.groups.iter().map(|g| g.acc).collect();
    assert!(close(accs[0], 4.0 / 6.0) && close(accs[1], 5.0 / 6.0));
    assert!(close(r.race.pqd, 0.8));
    assert!(close(r.race.eom, 5.0 / 6.0));
    assert!(close(r.race.acc_overall, 0.75));

    let accs: Vec<f64> = r.race_gender.groups.iter().map(|g| g.acc).collect();
    for (a, want) in accs.iter().zip([2.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0]) {
        assert!(close(*a, want));
    }
    assert!(close(r.race_gender.pqd, 2.0 / 3.0));
    assert!(close(r.race_gender.eom, 0.5));
    assert!(close(r.race_gender.acc_macro, 0.75));
}

#[test]
fn perfect_predictor_scores_one() {
    let records: Vec<PredictionRecord> = fixture12().into_iter().map(|mut r| {
        r.y_hat = r.y;
        r
    }).collect();
    for g in [Grouping::Race, Grouping::RaceGender] {
        let r = subgroup_report(&records, g, true).unwrap();
        assert_eq!((r.acc_overall, r.pqd, r.eom), (1.0, 1.0, 1.0));
    }
}

#[test]
fn record_order_does_not_matter() {
    let base = report(&fixture12(), false).unwrap();
    let mut rng = common::rng(7);
    for _ in 0..10 {
        let mut shuffled = fixture12();
        shuffled.shuffle(&mut rng);
        let r = report(&shuffled, false).unwrap();
        assert_eq!(r.race.pqd.to_bits(), base.race.pqd.to_bits());
        assert_eq!(r.race.eom.to_bits(), base.race.eom.to_bits());
        assert_eq!(r.race_gender.eom.to_bits(), base.race_gender.eom.to_bits());
    }
}

#[test]
fn lowering_the_worst_group_never_raises_pqd() {
    let mut accs = vec![0.9, 0.75, 0.8];
    let mut last = pqd(&accs).unwrap();
    for _ in 0..5 {
        accs[1] -= 0.1;
        let v = pqd(&accs).unwrap();
        assert!(v <= last);
        last = v;
    }
    assert_eq!(pqd(&[0.42]).unwrap(), 1.0);
}

#[test]
fn pqd_examples() {
    assert!((pqd(&[0.81, 0.9]).unwrap() - 0.9).abs() < 1e-12);
    assert!((pqd(&[0.9, 0.85, 0.8]).unwrap() - 0.8888888888888888).abs() < 1e-12);
    assert!(pqd(&[]).is_err());
}

#[test]
fn single_evaluable_class_is_its_own_mean() {
    // Class 0 appears only in group 0, so only class 1 is evaluated.
    let records = vec![record(0, 0, 0, 0, 0), record(1, 0, 0, 1, 1), record(2, 1, 0, 1, 0), record(3, 1, 0, 1, 1)];
    let e = eom(&records, Grouping::Race, &CLASSES, false).unwrap();
    assert_eq!(e.skipped.len(), 1);
    assert_eq!(e.skipped[0].class, 0);
    assert!((e.value - 0.5).abs() < 1e-12);
    assert!(eom(&records, Grouping::Race, &CLASSES, true).is_err());
}

#[test]
fn uncertain_labels_are_left_out() {
    let mut records = fixture12();
    let base = report(&records, false).unwrap();
    records.push(record(99, 0, 0, UNCERTAIN, 1));
    let r = report(&records, false).unwrap();
    assert_eq!(r, base);
}

#[test]
fn report_csv_columns_and_prediction_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = report(&fixture12(), false).unwrap();
    let prefix = dir.path().join("report");
    r.write(&prefix).unwrap();
    let text = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "grouping,Acc/Avg,PQD,EOM");
    assert!(lines.next().unwrap().starts_with("race,0.75,"));
    assert!(lines.next().unwrap().starts_with("race_gender,"));
    assert!(prefix.with_extension("json").exists());

    let path = dir.path().join("pred.csv");
    write_predictions(&path, &fixture12()).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), fixture12());

    std::fs::write(&path, "id,y,y_hat,s_race,s_gender\n").unwrap();
    assert!(read_predictions(&path).is_err());
}
