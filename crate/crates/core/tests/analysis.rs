use mtplan_core::analysis::*;
use mtplan_core::autodiff::{Tape, Tensor};
use mtplan_core::matrix::{BinaryMatrix, Matrix};
use mtplan_core::model::{ModelConfig, MtpModel, TokenBatch, TransferKind};
use mtplan_core::Error;

fn linear_model() -> MtpModel {
    MtpModel::new(
        ModelConfig::next_token(6, 8, 10).with_mtp(2, TransferKind::Linear, true),
        3,
    )
    .unwrap()
}

#[test]
fn raw_projection_is_the_transfer_matrix() {
    let model = linear_model();
    let p = project_transfer(&model, 1, Projection::Raw).unwrap();
    assert_eq!(p.as_slice(), model.param("transfer1.matrix").unwrap().data());
}

#[test]
fn composed_projection_with_identity_pieces() {
    let mut model = MtpModel::zeros(ModelConfig::next_token(4, 4, 8).with_mtp(2, TransferKind::Linear, false)).unwrap();
    let eye = Matrix::identity(4);
    for name in ["tok_emb", "head.out", "transfer1.matrix"] {
        model
            .set_param(name, Tensor::new(&[4, 4], eye.as_slice().to_vec()).unwrap())
            .unwrap();
    }
    assert_eq!(project_transfer(&model, 1, Projection::Composed).unwrap(), eye);
}

#[test]
fn nonlinear_or_missing_transfers_are_unsupported() {
    let tf = MtpModel::new(
        ModelConfig::next_token(6, 8, 10).with_mtp(2, TransferKind::Transformer { depth: 1 }, true),
        0,
    )
    .unwrap();
    assert!(matches!(
        project_transfer(&tf, 1, Projection::Raw),
        Err(Error::Unsupported(_))
    ));
    let plain = MtpModel::new(ModelConfig::next_token(6, 8, 10), 0).unwrap();
    assert!(matches!(
        project_transfer(&plain, 1, Projection::Raw),
        Err(Error::Unsupported(_))
    ));
    let indep = MtpModel::new(ModelConfig::next_token(6, 8, 10).independent(2), 0).unwrap();
    assert!(project_transfer(&indep, 1, Projection::Raw).is_err());
    assert!(project_transfer(&linear_model(), 2, Projection::Raw).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let model = linear_model();
    let seqs = vec![vec![0, 3, 0, 1, 3, 5], vec![1, 4, 1, 4, 5], vec![2, 2, 2, 3, 2, 5, 5]];
    let maps = average_attention(&model, &seqs).unwrap();
    assert_eq!(maps.length, 5);
    let a = &maps.maps[0][0];
    for r in 0..5 {
        let row = a.row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row[r + 1..].iter().all(|&x| x == 0.0));
        // Small init logits keep rows close to uniform over the prefix.
        for &x in &row[..=r] {
            assert!((x - 1.0 / (r + 1) as f64).abs() < 0.05);
        }
    }
}

#[test]
fn single_sequence_average_is_its_attention() {
    let model = linear_model();
    let seq = vec![0, 3, 0, 1, 3, 5];
    let maps = average_attention(&model, std::slice::from_ref(&seq)).unwrap();
    let batch = TokenBatch::new(std::slice::from_ref(&seq), 5).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let out = model.forward(&mut tape, &p, &batch).unwrap();
    assert_eq!(maps.maps[0][0].as_slice(), tape.value(out.attention[0][0]).data());
}

#[test]
fn deeper_models_report_every_layer_and_head() {
    let mut cfg = ModelConfig::next_token(6, 8, 10);
    cfg.depth = 2;
    cfg.heads = 2;
    let model = MtpModel::new(cfg, 1).unwrap();
    let maps = average_attention(&model, &[vec![0, 1, 0, 1, 5]]).unwrap();
    assert_eq!(maps.maps.len(), 2);
    assert!(maps.maps.iter().all(|l| l.len() == 2));
    assert_eq!(maps.row_argmax(0, 0)[0], 0);
}

#[test]
fn exports_land_under_run_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = export_csv(dir.path(), "run7", "wt", &Matrix::identity(2).to_csv()).unwrap();
    assert_eq!(path, dir.path().join("run7").join("wt.csv"));
    assert!(std::fs::read_to_string(&path).unwrap().lines().count() == 2);
    let mut diag = BinaryMatrix::zeros(2);
    diag.set(0, 0, true);
    diag.set(1, 1, true);
    let stats = entry_stats(&Matrix::identity(2), &[("diag", &diag)]).unwrap();
    let j = export_json(dir.path(), "run7", "stats", &stats).unwrap();
    assert!(std::fs::read_to_string(j).unwrap().contains("\"other\""));
}
