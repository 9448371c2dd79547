//! End-to-end checks across modules on a small dataset.

use pcmp_core::codec::{decode_cloud, truncate_stream, Bitstream, CodecConfig};
use pcmp_core::eval::{evaluate_on_table, evaluate_policy, oracle_indices, rd_csv, rd_sweep, Policy};
use pcmp_core::octree::{CandidateLevels, DepthLevel};
use pcmp_core::pointcloud::{
    format_ply, generate_dataset, generate_shape, load_cloud, parse_ply, write_cloud, CloudFormat, DatasetConfig,
    LabeledCloud, ShapeKind,
};
use pcmp_core::predictor::{train_predictor, PredictorModel, PredictorTrainConfig, TemperatureSchedule};
use pcmp_core::tasks::{build_rate_loss_table, RateLossTable, TaskKind, TaskModel, TaskTrainConfig};

fn dataset(seed: u64, per_class: usize) -> Vec<LabeledCloud> {
    generate_dataset(&DatasetConfig {
        per_class,
        points: 256,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn short_predictor(lambda: f64, seed: u64) -> PredictorTrainConfig {
    PredictorTrainConfig {
        lambda,
        seed,
        epochs: 4,
        batch: 16,
        lr_drop_epoch: 3,
        schedule: TemperatureSchedule::new(3.0, 0.01, 4).unwrap(),
        ..PredictorTrainConfig::default()
    }
}

#[test]
fn classification_pipeline_end_to_end() {
    let train = dataset(11, 40);
    let test = dataset(12, 15);
    let task = TaskModel::train(
        TaskKind::Classification,
        &train,
        &TaskTrainConfig {
            epochs: 6,
            ..TaskTrainConfig::default()
        },
    )
    .unwrap();
    assert!(task.is_frozen());
    let held_out = test.iter().map(|s| task.evaluate_raw(s).score).sum::<f64>() / test.len() as f64;
    assert!(held_out > 0.6, "held-out accuracy {held_out}");

    let codec = CodecConfig::new(7).unwrap();
    let levels = CandidateLevels::new(2, 7).unwrap();
    let table = build_rate_loss_table(&test, &codec, &task, levels).unwrap();

    // The table survives a save/load round trip bit for bit.
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("table");
    table.save(&stem).unwrap();
    let reloaded = RateLossTable::load(&stem).unwrap();
    assert_eq!(reloaded, table);

    // Rate grows with depth for every sample.
    for i in 0..table.len() {
        let bpp = table.bpp_vec(i);
        assert!(bpp.windows(2).all(|w| w[0] < w[1]), "sample {i}: {bpp:?}");
    }

    let lambdas = [0.001, 0.1];
    let models: Vec<PredictorModel> = lambdas
        .iter()
        .map(|&l| train_predictor(&test, &table, &short_predictor(l, 0)).unwrap().0)
        .collect();

    // A checkpoint reloads to the same selections.
    let path = dir.path().join("pred.bin");
    models[0].save(&path).unwrap();
    let back = PredictorModel::load(&path).unwrap();
    let a = evaluate_on_table(&Policy::Learned(&models[0]), &test, &table, 0.001).unwrap();
    let b = evaluate_on_table(&Policy::Learned(&back), &test, &table, 0.001).unwrap();
    assert_eq!(a, b);

    // Decoding the selected prefixes reproduces the table's numbers.
    for policy in [Policy::Learned(&models[1]), Policy::Oracle(0.1), Policy::Fixed(DepthLevel::new(3).unwrap())] {
        let real = evaluate_policy(&policy, &test, &table, &codec, &task, 0.1).unwrap();
        let cached = evaluate_on_table(&policy, &test, &table, 0.1).unwrap();
        assert_eq!(real, cached, "{}", policy.name());
    }

    let rows = rd_sweep(&lambdas, &test, &table, &models).unwrap();
    for &l in &lambdas {
        let at: Vec<_> = rows.iter().filter(|r| r.lambda == l).collect();
        let oracle = at.iter().find(|r| r.policy == "oracle").unwrap();
        assert!(at.iter().all(|r| oracle.objective <= r.objective + 1e-12));
    }
    let csv = rd_csv(&rows);
    assert_eq!(csv.lines().count(), 1 + rows.len());

    // Oracle depth cannot grow with lambda.
    let depth = |l: f64| oracle_indices(&table, l).iter().sum::<usize>();
    assert!(depth(0.1) <= depth(0.001));
}

#[test]
fn segmentation_table_is_well_formed() {
    let train = dataset(21, 10);
    let test = dataset(22, 4);
    let task = TaskModel::train(
        TaskKind::Segmentation,
        &train,
        &TaskTrainConfig {
            epochs: 2,
            ..TaskTrainConfig::default()
        },
    )
    .unwrap();
    let codec = CodecConfig::new(6).unwrap();
    let table = build_rate_loss_table(&test, &codec, &task, CandidateLevels::new(2, 6).unwrap()).unwrap();
    assert_eq!(table.len(), test.len());
    for row in table.rows() {
        for e in row {
            assert!(e.loss.is_finite() && e.loss >= 0.0);
            assert!((0.0..=1.0).contains(&e.score), "mIoU {}", e.score);
        }
    }
    let model = train_predictor(&test, &table, &short_predictor(0.01, 1)).unwrap().0;
    let r = evaluate_on_table(&Policy::Learned(&model), &test, &table, 0.01).unwrap();
    assert_eq!(r.samples, test.len());
    assert!((r.selection.iter().sum::<f64>() - 100.0).abs() < 1e-9);
}

#[test]
fn files_to_streams_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = generate_shape(ShapeKind::TwoSpheres, 900, 3, 0.02).cloud;
    let ply = dir.path().join("c.ply");
    write_cloud(&ply, &cloud, CloudFormat::PlyAscii).unwrap();
    let loaded = load_cloud(&ply, CloudFormat::PlyAscii).unwrap();
    assert_eq!(loaded, cloud);

    let codec = CodecConfig::new(8).unwrap();
    let stream = codec.encode(&loaded).unwrap();
    let bytes = stream.to_bytes();
    let parsed = Bitstream::from_bytes(&bytes).unwrap();
    assert_eq!(parsed, stream);
    for d in 1..=8 {
        let depth = DepthLevel::new(d).unwrap();
        let prefix = truncate_stream(&parsed, depth).unwrap();
        let (_, rec) = decode_cloud(&prefix, depth).unwrap();
        assert!(rec.len() <= 8usize.pow(d));
        // Cell centres lie within half a cell of the source bounding box.
        let (lo, hi) = (cloud.bbox().min, cloud.bbox().max);
        let tol = 0.5 * cloud.bbox().max_edge() * 1.000_001 / f64::from(1u32 << d) + 1e-12;
        for p in rec.points() {
            assert!(p.x >= lo.x - tol && p.y >= lo.y - tol && p.z >= lo.z - tol);
            assert!(p.x <= hi.x + tol && p.y <= hi.y + tol && p.z <= hi.z + tol);
        }
        let text = format_ply(&rec);
        assert_eq!(parse_ply(&text, "mem").unwrap(), rec);
    }
}
