// Temporary calibration harness for the desk-scale defaults. Not part of the
// deliverable surface; run with:
//   cargo run -p tpkd-core --example calib --release
use std::time::Instant;

use tpkd_core::data::{corrupt, gen_synthetic, CorruptionLevel, ModelData, PiDataset};
use tpkd_core::distill::{
    train_student, train_teacher, DistillConfig, FeatureTransfer, StudentOptions, TrainHyper,
};
use tpkd_core::metrics::evaluate;
use tpkd_core::nn::model::{InputKind, Model, ModelSpec};
use tpkd_core::nn::optim::LrSchedule;
use tpkd_core::topology::{batch_extract, PiConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(900.0);
    let seeds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let student_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let classes = 4;
    let channels = 3;
    let length = 128;
    let t0 = Instant::now();
    let train = gen_synthetic(classes, 140, channels, length, 7).unwrap();
    let val = gen_synthetic(classes, 30, channels, length, 8).unwrap();
    let test = gen_synthetic(classes, 30, channels, length, 9).unwrap();
    println!("gen: {:?}", t0.elapsed());

    let pi_cfg = PiConfig::default();
    let t0 = Instant::now();
    let pi = |ds: &tpkd_core::data::Dataset, seed| PiDataset {
        images: batch_extract(&ds.windows, &pi_cfg).unwrap(),
        labels: ds.labels(),
        classes: ds.classes,
        split: ds.split,
        generator_seed: seed,
    };
    let pi_train = pi(&train, 7);
    let pi_val = pi(&val, 8);
    let pi_test = pi(&test, 9);
    println!("pi extract ({} windows): {:?}", train.len() + val.len() + test.len(), t0.elapsed());

    let teacher_spec = ModelSpec::series(channels, classes);
    let teacher2_spec = ModelSpec {
        input_kind: InputKind::Image2d,
        ..ModelSpec::series(channels, classes)
    };
    let student_spec = ModelSpec::series(channels, classes).with_width(vec![4, 8, 16]);

    let t3 = epochs / 3;
    let series_sched = LrSchedule::new(
        0.05,
        vec![(10, 0.2), (t3, 0.1), (2 * t3, 0.1), (3 * t3, 0.1)],
    )
    .unwrap();
    let student_sched = LrSchedule::new(
        student_lr,
        vec![(10, 0.2), (t3, 0.1), (2 * t3, 0.1), (3 * t3, 0.1)],
    )
    .unwrap();
    let image_sched = LrSchedule::new(0.1, vec![(10, 0.5), (40, 0.2), (80, 0.2)]).unwrap();
    let hyper = TrainHyper { epochs, batch_size: 64, momentum: 0.9, weight_decay: 1e-4 };

    let t0 = Instant::now();
    let t1_out = train_teacher(
        &ModelData::Series(&train), &ModelData::Series(&val),
        &teacher_spec, &series_sched, &hyper, 1001,
    ).unwrap();
    println!("teacher1: best val {:.4} @ epoch {} ({:?})", t1_out.best_val_acc, t1_out.best_epoch, t0.elapsed());
    let t0 = Instant::now();
    let t2_out = train_teacher(
        &ModelData::Images(&pi_train), &ModelData::Images(&pi_val),
        &teacher2_spec, &image_sched, &hyper, 1002,
    ).unwrap();
    println!("teacher2: best val {:.4} @ epoch {} ({:?})", t2_out.best_val_acc, t2_out.best_epoch, t0.elapsed());

    let teacher1 = Model::from_checkpoint(&t1_out.best).unwrap();
    let teacher2 = Model::from_checkpoint(&t2_out.best).unwrap();
    let t1_test = evaluate(&teacher1, &ModelData::Series(&test)).unwrap();
    let t2_test = evaluate(&teacher2, &ModelData::Images(&pi_test)).unwrap();
    println!("teacher1 test acc {:.4}; teacher2 test acc {:.4}", t1_test.accuracy, t2_test.accuracy);

    let cfg = DistillConfig { beta, ..DistillConfig::default() };
    let mut results: Vec<(String, Vec<[f64; 4]>)> = vec![
        ("scratch".into(), vec![]),
        ("ann".into(), vec![]),
        ("noorth".into(), vec![]),
        ("orth".into(), vec![]),
    ];
    for s in 0..seeds {
        let seed = 2000 + s as u64;
        let levels_of = |m: &Model| -> [f64; 4] {
            let mut out = [0.0; 4];
            for (li, slot) in out.iter_mut().enumerate() {
                let c = corrupt(&test, CorruptionLevel::numbered(li).unwrap(), 7000 + li as u64).unwrap();
                *slot = evaluate(m, &ModelData::Series(&c)).unwrap().accuracy;
            }
            out
        };
        let t0 = Instant::now();
        let scratch = train_teacher(
            &ModelData::Series(&train), &ModelData::Series(&val),
            &student_spec, &series_sched, &hyper, seed,
        ).unwrap();
        let scratch_model = Model::from_checkpoint(&scratch.best).unwrap();
        let sc_acc = levels_of(&scratch_model);
        let dt_scratch = t0.elapsed();

        let run = |feature: FeatureTransfer, init: Option<&tpkd_core::container::Checkpoint>| {
            let opts = StudentOptions { cfg: cfg.clone(), feature, single_teacher: false };
            let out = train_student(
                &train, Some(&pi_train), &val,
                &teacher1, Some(&teacher2),
                &student_spec, init, &opts, &student_sched, &hyper, seed,
            ).unwrap();
            let m = Model::from_checkpoint(&out.best).unwrap();
            levels_of(&m)
        };
        let ann = run(FeatureTransfer::None, Some(&scratch.final_model));
        let t0 = Instant::now();
        let noorth = run(FeatureTransfer::MergedMapMse, Some(&scratch.final_model));
        let dt_no = t0.elapsed();
        let t0 = Instant::now();
        let orth = run(FeatureTransfer::OrthogonalPatchGram, Some(&scratch.final_model));
        let dt_o = t0.elapsed();
        let f = |a: [f64; 4]| format!("{:.3}/{:.3}/{:.3}/{:.3}", a[0], a[1], a[2], a[3]);
        println!(
            "seed {seed}: scratch {} ({dt_scratch:?}) ann {} noorth {} ({dt_no:?}) orth {} ({dt_o:?})",
            f(sc_acc), f(ann), f(noorth), f(orth)
        );
        results[0].1.push(sc_acc);
        results[1].1.push(ann);
        results[2].1.push(noorth);
        results[3].1.push(orth);
    }
    for (name, accs) in &results {
        let n = accs.len() as f64;
        let means: Vec<f64> = (0..4)
            .map(|l| accs.iter().map(|a| a[l]).sum::<f64>() / n)
            .collect();
        println!(
            "{name}: mean levels {:.4}/{:.4}/{:.4}/{:.4}",
            means[0], means[1], means[2], means[3]
        );
    }
}
