mod common;

use common::{tiny_config, tiny_dataset};
use mtunet_core::loss::SchemeKind;
use mtunet_core::metrics::{median, population_std};
use mtunet_core::model::Variant;
use mtunet_lab::ablate::{self, parse_cell, read_runs, write_ablation, ARMS, RUNS_FILE, TABLE_FILE};

fn quick() -> mtunet_lab::TrainConfig {
    let mut cfg = tiny_config(Variant::Mt, SchemeKind::Mtls3);
    cfg.max_epochs = 2;
    cfg
}

#[test]
fn table_has_every_arm_and_metric() {
    let ds = tiny_dataset();
    let ablation = ablate::ablate(&quick(), &ds, &ARMS, &[0], |_, _, _| Ok(())).unwrap();
    let table = ablation.table_csv().unwrap();
    let mut rows = csv::Reader::from_reader(table.as_bytes());
    let header: Vec<String> = rows.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header.len(), 1 + ARMS.len());
    assert_eq!(header[1], "MT/MTLS1");
    let metrics: Vec<String> = rows.records().map(|r| r.unwrap()[0].to_string()).collect();
    for m in [
        "total", "KLD", "PCC", "HS", "ACC", "AUC", "AUC-Y1", "AUC-Y3", "sigma_s", "sigma_c",
    ] {
        assert!(metrics.iter().any(|x| x == m), "missing {m}");
    }
    for row in csv::Reader::from_reader(table.as_bytes()).records() {
        for cell in row.unwrap().iter().skip(1).filter(|c| !c.is_empty()) {
            let (_, std) = parse_cell(cell).unwrap();
            assert_eq!(std, 0.0, "a single seed has no spread");
        }
    }
    let unet_s = ablation.report(ARMS[5]).unwrap();
    assert!(unet_s.summary("ACC").is_none());
}

#[test]
fn medians_match_the_written_runs() {
    let ds = tiny_dataset();
    let arms = [ARMS[0], ARMS[2]];
    let ablation = ablate::ablate(&quick(), &ds, &arms, &[3, 4, 5], |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_ablation(&ablation, dir.path()).unwrap();
    assert!(dir.path().join(TABLE_FILE).exists());
    for arm in arms {
        let runs = read_runs(&dir.path().join(arm.slug()).join(RUNS_FILE)).unwrap();
        assert_eq!(runs.len(), 3);
        let report = ablation.report(arm).unwrap();
        for m in ["total", "KLD", "ACC"] {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(m)).collect();
            let s = report.summary(m).unwrap();
            assert_eq!(s.median, median(&vals).unwrap());
            assert!((s.std - population_std(&vals).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_seeds_is_an_error() {
    let ds = tiny_dataset();
    assert!(ablate::ablate(&quick(), &ds, &ARMS, &[], |_, _, _| Ok(())).is_err());
}
