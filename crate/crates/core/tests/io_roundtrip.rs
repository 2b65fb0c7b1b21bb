use fqe_core::approx::{Approximator, FeatureMap};
use fqe_core::experiments::canonical_b;
use fqe_core::fqe::{run_fqe, FqeConfig};
use fqe_core::io::{
    dataset_from_str, dataset_to_string, estimate_from_str, estimate_to_string, header_fields, read_to_string,
    write_string,
};
use fqe_core::mdp::{generate_dataset, Dataset};

#[test]
fn dataset_survives_a_file_round_trip() {
    let inst = canonical_b::<f64>();
    let data = generate_dataset(&inst.mdp, &inst.behavior, 50, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_string(&path, &dataset_to_string(&data, &[("note".into(), "x".into())])).unwrap();
    let text = read_to_string(&path).unwrap();
    let back: Dataset<f64> = dataset_from_str(&text).unwrap();
    assert_eq!(back, data);
    let header = header_fields(&text);
    assert!(header.iter().any(|(k, v)| k == "note" && v == "x"));
}

#[test]
fn estimate_survives_a_round_trip() {
    let inst = canonical_b::<f64>();
    let data = generate_dataset(&inst.mdp, &inst.behavior, 80, 22).unwrap();
    let fmap = FeatureMap::random_linear(4, 3, 3, 1).unwrap();
    let est = run_fqe(&data, &inst.target, inst.mdp.initial_dist(), &Approximator::smooth_net(3, 2), &fmap, &FqeConfig::default(), None)
        .unwrap();
    let back = estimate_from_str::<f64>(&estimate_to_string(&est).unwrap()).unwrap();
    assert_eq!(back, est);
}

#[test]
fn corrupted_dataset_is_rejected() {
    let inst = canonical_b::<f64>();
    let data = generate_dataset(&inst.mdp, &inst.behavior, 3, 23).unwrap();
    let text = dataset_to_string(&data, &[]);
    let mut lines: Vec<&str> = text.lines().collect();
    let last = lines.len() - 1;
    lines.swap(last, last - 1);
    assert!(dataset_from_str::<f64>(&lines.join("\n")).is_err());
}
