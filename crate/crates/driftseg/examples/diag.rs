use driftseg::data::{gen_synthetic_domains, LabeledImage, SyntheticConfig};
use driftseg::net::NetworkConfig;
use driftseg::net::StageConfig;
use driftseg::train::{train, ClassCounts, TrainConfig};

fn fg_iou(
    state: &driftseg::net::ModelState,
    cfg: &NetworkConfig,
    images: &[LabeledImage],
) -> f64 {
    let mut counts = vec![ClassCounts::default(); 2];
    for img in images {
        let pred = driftseg::train::predict(state, cfg, &img.pixels);
        driftseg::train::accumulate_counts(
            &mut counts,
            &pred,
            img.mask.as_ref().unwrap().read(),
            None,
        );
    }
    driftseg::train::foreground_counts(&counts).iou()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(12);
    let warmup: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(epochs);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);

    let synth = SyntheticConfig {
        lesion_radius_range: (3.0, 6.0),
        lesion_count_range: (2, 4),
        ..SyntheticConfig::default()
    };
    let (source, target) = gen_synthetic_domains(&synth, 1).unwrap();

    let config = TrainConfig {
        network: NetworkConfig {
            stages: vec![
                StageConfig { patch_size: 5, stride: 4, embed_dim: 16, num_heads: 2, num_blocks: 1 },
                StageConfig { patch_size: 3, stride: 2, embed_dim: 32, num_heads: 2, num_blocks: 2 },
            ],
            num_classes: 2,
            fpn_channels: 16,
            local_proj_dim: 8,
            local_proj_grid: 4,
            global_proj_dim: 16,
            mlp_ratio: 2,
        },
        epochs,
        warmup_epochs: warmup,
        steps_per_epoch: 25,
        batch_size: 4,
        lr_encoder: 1e-3,
        lr_decoder: 3e-3,
        val_cases: 4,
        selection_target_cap: 32,
        queue_capacity: 256,
        aalp_images_per_step: 2,
        ema: driftseg::teacher::EmaSchedule {
            alpha_start: 0.95,
            alpha_end: 0.99,
            warmup_steps: 100,
        },
        ..TrainConfig::default()
    };

    let t0 = std::time::Instant::now();
    let outcome = train(&config, seed, &source, &target).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    for row in outcome.epoch_rows.iter().step_by(2.max(epochs / 8)) {
        println!(
            "ep {:2}: seg {:.4} cons {:.4} sel {:.4} srcval {:.4}",
            row.epoch, row.seg, row.consistency, row.selection_score, row.source_val_metric
        );
    }
    let src_iou = fg_iou(&outcome.best.student, &config.network, &source);
    let tgt_iou = fg_iou(&outcome.best.student, &config.network, &target);
    println!(
        "[{}s] best_ep {} | source IoU {:.4} | target IoU {:.4} | ratio {:.3}",
        secs.round(),
        outcome.best_epoch,
        src_iou,
        tgt_iou,
        tgt_iou / src_iou.max(1e-9)
    );
}
