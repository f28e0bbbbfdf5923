//! Scratch calibration probe used during development.

use pvp_core::dataset::DatasetConfig;
use pvp_core::model::TrainSchedule;
use pvp_core::pipeline::{train_in_memory, ModelSettings, RunConfig, Seeds, SteeringConfig};
use pvp_core::report::accuracy_matrix;
use pvp_core::vocab::{PromptKind, Variant, Task};

fn main() {
    let mut args = std::env::args().skip(1);
    let text_most: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(4);
    let most_img: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(2);
    let epochs: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(40);
    let lr: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let scale: String = args.next().unwrap_or_else(|| "tiny".to_string());

    let config = if scale == "tiny" {
        RunConfig {
            schema_version: 1,
            dataset: DatasetConfig {
                n_objects: 8,
                canvas_px: 16,
                color_blob_px: 12,
                n_eval_objects: 2,
                heldout_cf_per_object: 2,
                train_cf_per_object: 3,
                train_this_repeats: 2,
                train_most_repeats: most_img,
                train_text_most_repeats: text_most,
                steer_repeats: 1,
                eval_wk_repeats: 2,
                eval_cf_repeats: 1,
                eval_relation_fraction: 0.34,
                size_this_repeats: 2,
                size_most_repeats: 2,
                size_text_most_repeats: 4,
                size_steer_repeats: 2,
                size_eval_wk_repeats: 1,
                size_eval_cf_repeats: 1,
                size_aux_pairs: 8,
                size_aux_repeats: 1,
                ..DatasetConfig::default()
            },
            model: ModelSettings {
                n_layers: 4,
                d_model: 32,
                n_heads: 4,
                mlp_hidden: 64,
                patch_px: 8,
                max_seq: 16,
                tie_unembedding: true,
            },
            train: TrainSchedule {
                epochs,
                batch_size: 16,
                learning_rate: lr,
                ..TrainSchedule::default()
            },
            steering: SteeringConfig {
                start_min: 0,
                start_max: 3,
                window_max: 2,
                probe_pairs: 6,
                ..SteeringConfig::default()
            },
            seeds: Seeds::default(),
        }
    } else {
        let mut c = RunConfig::default();
        c.dataset.train_text_most_repeats = text_most;
        c.dataset.train_most_repeats = most_img;
        c.train.epochs = epochs;
        c.train.learning_rate = lr;
        c
    };

    let t0 = std::time::Instant::now();
    let bundle = pvp_core::dataset::generate_dataset(&config.dataset, config.seeds.dataset).unwrap();
    let model_cfg = config.model_config(bundle.vocab.len());
    let mut params = pvp_core::model::Params::init(&model_cfg, config.seeds.init).unwrap();
    pvp_core::pipeline::run_curriculum(
        &mut params,
        &bundle,
        &config.train,
        config.seeds.train,
        |phase, log| {
            if phase == "grounded" {
                let acc: Vec<String> = log
                    .accuracy
                    .iter()
                    .map(|(q, a)| format!("{}={a:.0}", q.replace("color/", "c").replace("size/", "s")))
                    .collect();
                println!("ep {:>3} loss {:.3} | {}", log.epoch, log.mean_loss, acc.join(" "));
            }
        },
    )
    .unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    let _ = train_in_memory;

    let (matrix, ledger) = accuracy_matrix(&params, &bundle.eval).unwrap();
    for (cell, acc) in &matrix.cells {
        println!("{cell}: {:.1}% ({}/{})", acc.accuracy_pct, acc.n_correct, acc.n);
    }
    for task in [Task::Color, Task::Size] {
        for kind in [PromptKind::Most, PromptKind::This] {
            let cell = bundle.eval_cell(task, kind, Variant::Cf);
            let mut wk = 0;
            let mut cf = 0;
            let mut other = 0;
            for s in &cell {
                let rec = ledger.iter().find(|r| r.sample_id == s.id).unwrap();
                if rec.predicted == s.wk_answer {
                    wk += 1;
                } else if Some(rec.predicted) == s.cf_answer {
                    cf += 1;
                } else {
                    other += 1;
                }
            }
            println!(
                "{} {}+cf answers: wk={wk} cf={cf} other={other}",
                task.label(),
                kind.label()
            );
        }
    }
}
