//! Temporary calibration harness (deleted before release).
use std::path::PathBuf;

use depthcl_core::augment::{center_crop, compute_modality_stats, normalize_sample};
use depthcl_core::data::{load_dataset, make_splits, stratified_folds, LoadedDataset, SplitProtocol};
use depthcl_core::model::{init_params, ModelConfig, ModelParams};
use depthcl_core::pipeline::{
    finetune, linear_eval, pretrain, sub_seed, TrainConfig, TrainMode,
};
use depthcl_core::synth::{generate_synthetic_dataset, GeneratorConfig};
use depthcl_core::tensor::Tensor;

fn embed_stats(dataset: &LoadedDataset, pool: &[String], params: &ModelParams<f64>, label: &str) {
    let samples: Vec<_> = pool.iter().take(64).map(|id| dataset.sample(id).unwrap()).collect();
    let stats = compute_modality_stats(samples.clone()).unwrap();
    let mut views = Vec::new();
    for s in &samples {
        let n = normalize_sample(s, &stats).unwrap();
        let pair = center_crop(&n, (32, 32), 1).unwrap();
        let plane = 32 * 32;
        let mut v = Vec::with_capacity(3 * plane);
        v.extend_from_slice(&pair.view_dep.values[..plane]);
        v.extend_from_slice(&pair.view_ref.values[..plane]);
        v.extend_from_slice(&pair.view_dep.values[..plane]);
        views.extend(v);
    }
    let images = Tensor::<f64>::from_f64_slice(vec![samples.len(), 3, 32, 32], &views).unwrap();
    let h = params.embed(&images).unwrap();
    let d = h.dim(1);
    let n = h.dim(0);
    let mut zero_dims = 0;
    let mut stds = Vec::new();
    for c in 0..d {
        let col: Vec<f64> = (0..n).map(|r| h.values()[r * d + c]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        stds.push(var.sqrt());
        if col.iter().all(|&v| v == 0.0) {
            zero_dims += 1;
        }
    }
    stds.sort_by(|a, b| a.total_cmp(b));
    println!(
        "{label}: h dims {d}, dead dims {zero_dims}, std quartiles {:.4}/{:.4}/{:.4}, max {:.4}",
        stds[d / 4],
        stds[d / 2],
        stds[3 * d / 4],
        stds[d - 1]
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pre_epochs: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let le_epochs: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(50);
    let stage = args.get(3).map(String::as_str).unwrap_or("a4");

    let dir = PathBuf::from(
        std::env::var("CALIB_DIR").unwrap_or_else(|_| "/tmp/calib_ds".into()),
    );
    if !dir.join("manifest.tsv").exists() {
        let cfg = GeneratorConfig { image_height: 64, image_width: 64, scale: 0.233 };
        let m = generate_synthetic_dataset(&cfg, 1001, &dir).unwrap();
        println!("generated {} samples", m.len());
    }
    let dataset = load_dataset(&dir.join("manifest.tsv")).unwrap();
    println!("dataset: {} samples, pretrain {pre_epochs} epochs, le {le_epochs} epochs", dataset.samples.len());

    let plan = stratified_folds(&dataset.manifest, 5, 2002).unwrap();
    let splits_full = make_splits(&dataset.manifest, &plan, &SplitProtocol::FullySupervised, 0).unwrap();

    let t0 = std::time::Instant::now();
    let mut pre_cfg = TrainConfig::desk_pretrain(3003);
    pre_cfg.epochs = pre_epochs;
    let init: ModelParams<f64> = init_params(&ModelConfig::default(), 7007).unwrap();
    let mut pretrained = init.clone();
    let rec = pretrain(&dataset, &splits_full.pretrain_pool, &mut pretrained, &pre_cfg).unwrap();
    println!("pretrain took {:?}", t0.elapsed());
    let show: Vec<f64> = rec.epoch_loss.iter().map(|l| (l * 100.0).round() / 100.0).collect();
    println!("loss curve: {show:?}");
    println!(
        "A3 ratio final/first = {:.3} (need < 0.5)",
        rec.epoch_loss.last().unwrap() / rec.epoch_loss[0]
    );
    embed_stats(&dataset, &splits_full.pretrain_pool, &init, "random  features");
    embed_stats(&dataset, &splits_full.pretrain_pool, &pretrained, "pretrain features");

    if stage == "a3" {
        return;
    }

    let mut gaps = Vec::new();
    for s in 0..3u64 {
        let seed = sub_seed(4004, "le", s);
        let mut le_cfg = TrainConfig::desk_downstream(TrainMode::LinearEval, seed);
        le_cfg.epochs = le_epochs;
        let mut p1 = pretrained.clone();
        let r1 = linear_eval(&dataset, &splits_full, &mut p1, &le_cfg).unwrap();
        let f1_pre = r1.final_metrics.as_ref().unwrap().macro_f1;

        let mut p2: ModelParams<f64> =
            init_params(&ModelConfig::default(), sub_seed(5005, "init", s)).unwrap();
        le_cfg.seed = sub_seed(4004, "le-rand", s);
        let r2 = linear_eval(&dataset, &splits_full, &mut p2, &le_cfg).unwrap();
        let f1_rand = r2.final_metrics.as_ref().unwrap().macro_f1;
        println!(
            "A4 seed {s}: LE pretrained {f1_pre:.4} vs random {f1_rand:.4} gap {:.4}",
            f1_pre - f1_rand
        );
        gaps.push(f1_pre - f1_rand);
    }
    println!("A4 mean gap = {:.4} (need >= 0.10)", gaps.iter().sum::<f64>() / 3.0);

    if stage != "a5" {
        return;
    }

    let mut semi_pre = Vec::new();
    let mut semi_rand = Vec::new();
    let mut full_pre = Vec::new();
    for s in 0..3u64 {
        let splits_semi = make_splits(
            &dataset.manifest,
            &plan,
            &SplitProtocol::SemiSupervised { subsample_seed: sub_seed(6006, "sub", s) },
            0,
        )
        .unwrap();
        let seed = sub_seed(6006, "ft", s);
        let ft_cfg = TrainConfig::desk_downstream(TrainMode::Finetune, seed);

        let mut p1 = pretrained.clone();
        let r1 = finetune(&dataset, &splits_semi, &mut p1, &ft_cfg).unwrap();
        semi_pre.push(r1.final_metrics.as_ref().unwrap().macro_f1);

        let mut p2: ModelParams<f64> =
            init_params(&ModelConfig::default(), sub_seed(6006, "init", s)).unwrap();
        let r2 = finetune(&dataset, &splits_semi, &mut p2, &ft_cfg).unwrap();
        semi_rand.push(r2.final_metrics.as_ref().unwrap().macro_f1);

        let mut p3 = pretrained.clone();
        let r3 = finetune(&dataset, &splits_full, &mut p3, &ft_cfg).unwrap();
        full_pre.push(r3.final_metrics.as_ref().unwrap().macro_f1);
        println!(
            "A5 seed {s}: semi-pre {:.4} semi-rand {:.4} full-pre {:.4}",
            semi_pre[s as usize], semi_rand[s as usize], full_pre[s as usize]
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "A5: semi-pre {:.4} >= semi-rand {:.4}? {}; semi-pre <= full-pre {:.4}? {}",
        mean(&semi_pre),
        mean(&semi_rand),
        mean(&semi_pre) >= mean(&semi_rand),
        mean(&full_pre),
        mean(&semi_pre) <= mean(&full_pre)
    );
}
