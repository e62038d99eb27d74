//! Checks against the real IDX files. Each test skips with a note when the
//! data root (`CAMFORGE_DATA`, else the workspace `data` directory) lacks them.

use std::path::{Path, PathBuf};

use camforge::data::{load_split, split_train_val, Dataset, LabeledDataset};
use camforge::prototypes::build_prototypes;

fn load(dataset: Dataset, train: bool) -> Option<LabeledDataset> {
    let root = std::env::var_os("CAMFORGE_DATA")
        .map_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"), PathBuf::from);
    match load_split(&root, dataset, train) {
        Ok(ds) => Some(ds),
        Err(e) => {
            eprintln!("skipping: {e}");
            None
        }
    }
}

fn counts(ds: &LabeledDataset) -> Vec<usize> {
    let mut c = vec![0; 10];
    for &l in &ds.labels {
        c[l] += 1;
    }
    c
}

/// NumPy over the test file: per class `(Σ prototype, P[14,14], P[7,20], argmax)`.
const TEST_PROTOTYPES: [(f64, f64, f64, usize); 10] = [
    (174.285_723_873_392_16, 0.011_517_751_586_207_553, 0.644_008_032_999_312_2, 627),
    (61.975_921_410_901_99, 1.0, 0.107_978_145_966_435_46, 406),
    (164.692_749_663_819_34, 0.706_526_418_734_684_9, 0.409_194_070_467_675_6, 570),
    (141.730_323_320_092_08, 0.764_736_999_358_355, 0.276_367_412_310_278_7, 350),
    (111.459_435_442_440_22, 0.569_704_206_643_432_2, 0.407_172_907_901_861_45, 436),
    (149.640_941_729_681_6, 0.707_758_785_028_913_7, 0.647_359_725_487_703_6, 346),
    (133.945_965_035_339_55, 0.582_051_019_761_997_4, 0.022_246_252_916_563_077, 575),
    (116.630_198_892_680_77, 0.183_715_198_719_816_18, 0.250_475_376_720_616_2, 464),
    (143.292_893_322_952_8, 1.0, 0.484_890_862_431_878_9, 406),
    (115.685_211_467_499_04, 0.710_817_393_533_735_3, 0.193_369_836_924_174_95, 409),
];

#[test]
fn mnist_test_prototypes_match_numpy() {
    let Some(test) = load(Dataset::Mnist, false) else { return };
    assert_eq!(test.len(), 10000);
    assert_eq!(counts(&test), [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
    let protos = build_prototypes(&test).unwrap();
    assert_eq!(protos.side(), 28);
    for (c, &(sum, centre, off, argmax)) in TEST_PROTOTYPES.iter().enumerate() {
        let p = protos.prototype_for(c).unwrap();
        let got: f64 = p.iter().map(|&v| f64::from(v)).sum();
        assert!((got - sum).abs() < 1e-3, "class {c}: sum {got} vs {sum}");
        assert!((f64::from(p[14 * 28 + 14]) - centre).abs() < 1e-5, "class {c}");
        assert!((f64::from(p[7 * 28 + 20]) - off).abs() < 1e-5, "class {c}");
        let top = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
        assert_eq!(top, argmax, "class {c}");
    }
}

#[test]
fn mnist_train_split_is_disjoint_and_exhaustive() {
    let Some(full) = load(Dataset::Mnist, true) else { return };
    assert_eq!(full.len(), 60000);
    let (train, val) = split_train_val(&full, 0.9, 42).unwrap();
    assert_eq!((train.len(), val.len()), (54000, 6000));
    let total: Vec<usize> = counts(&train).iter().zip(counts(&val)).map(|(a, b)| a + b).collect();
    assert_eq!(total, counts(&full));
    assert!(counts(&val).iter().all(|&n| n > 400));
}

#[test]
fn fashion_mnist_loads() {
    let Some(train) = load(Dataset::FashionMnist, true) else { return };
    let Some(test) = load(Dataset::FashionMnist, false) else { return };
    assert_eq!(counts(&train), vec![6000; 10]);
    assert_eq!(test.len(), 9947);
    assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
