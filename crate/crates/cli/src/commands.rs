//! Command implementations, generic over the run width.

use std::fs;
use std::path::{Path, PathBuf};

use depthcl_core::checkpoint::{read_checkpoint, write_checkpoint};
use depthcl_core::data::{load_dataset, make_splits, stratified_folds, MaterialClass, SplitProtocol};
use depthcl_core::error::{Error, Result};
use depthcl_core::gradcheck::{grad_check, GradCheckSettings};
use depthcl_core::model::{
    classifier_forward, encoder_forward, init_params, projector_forward, ClassifierHeadConfig,
    ConvStage, EncoderConfig, ModelConfig, ModelParams, ProjectionHeadConfig, TrainableSet,
};
use depthcl_core::pipeline::{
    cross_entropy_graph, finetune, linear_eval, pretrain, run_protocol, sub_seed, ProtocolId,
    ProtocolSettings, RunRecord, TrainMode,
};
use depthcl_core::scalar::Scalar;
use depthcl_core::stream;
use depthcl_core::synth::generate_synthetic_dataset;
use depthcl_core::tensor::Tensor;

use crate::config::ResolvedRun;

pub const CLASS_NAMES: [&str; 7] = [
    "Mixed1",
    "Mixed2",
    "Ore1",
    "Ore2",
    "Ore3",
    "Agglomerated",
    "Cylindrical",
];

/// Outcome a command hands back to main for exit-code mapping.
pub enum CommandOutcome {
    Ok,
    /// A training run aborted on a non-finite step.
    NumericalAbort(String),
    /// Gradient check breached its tolerance.
    ToleranceBreach(String),
}

pub fn cmd_gen_data(run: &ResolvedRun, out: &Path, seed: u64) -> Result<CommandOutcome> {
    let manifest = generate_synthetic_dataset(&run.generator, seed, out)?;
    println!("dataset written to {}", out.display());
    println!("class\tcount");
    let counts = manifest.class_counts();
    for class in MaterialClass::ALL {
        println!("{}\t{}", class.name(), counts[class.index()]);
    }
    println!("total\t{}", manifest.len());
    Ok(CommandOutcome::Ok)
}

fn manifest_path(data_dir: &Path) -> PathBuf {
    data_dir.join("manifest.tsv")
}

fn write_record(path: &Path, record: &RunRecord, echo: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = String::new();
    for line in echo.lines() {
        text.push_str(&format!("# {line}\n"));
    }
    text.push_str(&record.to_tsv());
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_pretrain<S: Scalar>(
    run: &ResolvedRun,
    data_dir: &Path,
    out: &Path,
    record_path: Option<&Path>,
    test_fold: usize,
) -> Result<CommandOutcome> {
    let dataset = load_dataset(&manifest_path(data_dir))?;
    let plan = stratified_folds(&dataset.manifest, 5, run.fold_seed)?;
    let splits = make_splits(
        &dataset.manifest,
        &plan,
        &SplitProtocol::FullySupervised,
        test_fold,
    )?;

    let init_seed = sub_seed(run.train.seed, "init", 0);
    let mut params: ModelParams<S> = init_params(&run.model, init_seed)?;
    let mut cfg = run.train;
    cfg.mode = TrainMode::Pretrain;
    let record = pretrain(&dataset, &splits.pretrain_pool, &mut params, &cfg)?;

    let record_file = record_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("run.tsv"));
    write_record(&record_file, &record, &run.echo())?;
    write_checkpoint(out, &params, &run.echo())?;
    println!("checkpoint: {}", out.display());
    println!("run record: {}", record_file.display());

    if let Some(batch) = &record.aborted {
        return Ok(CommandOutcome::NumericalAbort(format!(
            "pretraining aborted at {batch}"
        )));
    }
    if !record.all_losses_finite() {
        return Ok(CommandOutcome::NumericalAbort(
            "non-finite loss recorded".into(),
        ));
    }
    Ok(CommandOutcome::Ok)
}

pub enum InitSource<'a> {
    Checkpoint(&'a Path),
    Random,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_downstream<S: Scalar>(
    run: &ResolvedRun,
    mode: TrainMode,
    data_dir: &Path,
    init: InitSource<'_>,
    out_dir: &Path,
    semi: bool,
    test_fold: usize,
) -> Result<CommandOutcome> {
    let dataset = load_dataset(&manifest_path(data_dir))?;
    let plan = stratified_folds(&dataset.manifest, 5, run.fold_seed)?;
    let protocol = if semi {
        SplitProtocol::SemiSupervised {
            subsample_seed: sub_seed(run.train.seed, "subsample", 0),
        }
    } else {
        SplitProtocol::FullySupervised
    };
    let splits = make_splits(&dataset.manifest, &plan, &protocol, test_fold)?;

    let mut params: ModelParams<S> = match init {
        InitSource::Checkpoint(path) => {
            let (params, _) = read_checkpoint::<S>(path)?;
            params
        }
        InitSource::Random => init_params(&run.model, sub_seed(run.train.seed, "init", 0))?,
    };

    let mut cfg = run.train;
    cfg.mode = mode;
    let record = match mode {
        TrainMode::Finetune => finetune(&dataset, &splits, &mut params, &cfg)?,
        TrainMode::LinearEval => linear_eval(&dataset, &splits, &mut params, &cfg)?,
        TrainMode::Pretrain => unreachable!("downstream command"),
    };

    fs::create_dir_all(out_dir)?;
    write_checkpoint(&out_dir.join("model.dckp"), &params, &run.echo())?;
    write_record(&out_dir.join("run.tsv"), &record, &run.echo())?;
    if let Some(metrics) = &record.final_metrics {
        fs::write(
            out_dir.join("test_metrics.tsv"),
            metrics.to_tsv(Some(&CLASS_NAMES)),
        )?;
        println!("test macro F1 = {:.4}", metrics.macro_f1);
    }
    for event in &record.events {
        if event.starts_with("encoder_freeze_check") {
            println!("{event}");
        }
    }
    println!("outputs in {}", out_dir.display());

    if let Some(batch) = &record.aborted {
        return Ok(CommandOutcome::NumericalAbort(format!(
            "training aborted at {batch}"
        )));
    }
    Ok(CommandOutcome::Ok)
}

pub fn cmd_protocol<S: Scalar>(
    run: &ResolvedRun,
    name: &str,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<CommandOutcome> {
    let protocol = ProtocolId::parse(name)?;
    let dataset = load_dataset(&manifest_path(data_dir))?;
    let mut pretrain_cfg = run.train;
    pretrain_cfg.mode = TrainMode::Pretrain;
    let settings = ProtocolSettings {
        pretrain: pretrain_cfg,
        downstream_epochs: run.downstream_epochs,
        downstream_lr: run.downstream_learning_rate,
        downstream_batch: run.downstream_batch_size,
        fold_seed: run.fold_seed,
        base_seed: run.train.seed,
    };
    let report = run_protocol::<S>(&dataset, protocol, &settings)?;

    fs::create_dir_all(out_dir)?;
    let out_file = out_dir.join(format!("protocol_{}.tsv", protocol.name()));
    fs::write(&out_file, report.to_tsv(Some(&CLASS_NAMES)))?;
    println!("{}", report.ordering_line());
    println!("report: {}", out_file.display());

    if report.any_aborted() {
        return Ok(CommandOutcome::NumericalAbort("an arm aborted".into()));
    }
    Ok(CommandOutcome::Ok)
}

/// The tiny fixture shared by the gradient-check command: a 2-stage encoder
/// with a scaled projector on 8×8 inputs, 4 pairs per batch.
pub fn gradcheck_fixture() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_channels: 3,
            stages: vec![
                ConvStage {
                    out_channels: 4,
                    kernel_size: 3,
                    stride: 2,
                },
                ConvStage {
                    out_channels: 8,
                    kernel_size: 3,
                    stride: 2,
                },
            ],
            embedding_dim: 8,
        },
        projector: ProjectionHeadConfig {
            hidden_sizes: vec![16, 8],
            output_dim: 4,
            relu: vec![true, true],
            batch_norm: vec![true, false],
        },
        classifier: ClassifierHeadConfig {
            hidden: 16,
            dropout_rate: 0.3,
            num_classes: 7,
        },
    }
}

fn random_images<S: Scalar>(count: usize, extent: usize, seed: u64) -> Tensor<S> {
    use rand::Rng;
    let mut rng = stream::derive(seed, "gradcheck-images", &[]);
    let values: Vec<f64> = (0..count * 3 * extent * extent)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::from_f64_slice(vec![count, 3, extent, extent], &values)
        .expect("random image batch")
}

/// Runs central-difference checks over the full contrastive and
/// classification losses. `corrupt` is the negative-control hook: it biases
/// the analytic gradients so the check must fail.
pub fn cmd_gradcheck(corrupt: bool) -> Result<CommandOutcome> {
    let config = gradcheck_fixture();
    let params: ModelParams<f64> = init_params(&config, 12_345)?;
    let settings = GradCheckSettings {
        eps: 1e-5,
        tolerance: 1e-4,
        analytic_bias: if corrupt { 0.02 } else { 0.0 },
    };
    let pairs = 4usize;
    let contrastive_images = random_images::<f64>(2 * pairs, 8, 1);
    let classification_images = random_images::<f64>(4, 8, 2);
    let labels = [0usize, 2, 4, 6];

    let select = |prefixes: &[&str]| -> Vec<(String, Tensor<f64>)> {
        params
            .named_trainable()
            .into_iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| (n, t.clone()))
            .collect()
    };

    println!("== contrastive path (encoder + projector, NT-Xent) ==");
    let checked = select(&["encoder.", "projector."]);
    let names: Vec<String> = checked.iter().map(|(n, _)| n.clone()).collect();
    let contrastive_report = grad_check(
        |tape, ids| {
            let mut bound = params.bind(tape, TrainableSet::None);
            for (name, id) in names.iter().zip(ids) {
                bound.insert(name, *id);
            }
            let x = tape.constant(contrastive_images.clone());
            let h = encoder_forward(tape, &params, &bound, x)?;
            let (z, _) = projector_forward(tape, &params, &bound, h, true)?;
            let nodes = depthcl_core::contrastive::nt_xent_graph(tape, z, pairs, 0.1)?;
            Ok(nodes.loss)
        },
        &checked,
        &settings,
    )?;
    print!("{}", contrastive_report.to_text());

    println!("== classification path (encoder + classifier, cross-entropy) ==");
    let checked = select(&["encoder.", "classifier."]);
    let names: Vec<String> = checked.iter().map(|(n, _)| n.clone()).collect();
    let classification_report = grad_check(
        |tape, ids| {
            let mut bound = params.bind(tape, TrainableSet::None);
            for (name, id) in names.iter().zip(ids) {
                bound.insert(name, *id);
            }
            let x = tape.constant(classification_images.clone());
            let h = encoder_forward(tape, &params, &bound, x)?;
            let logits = classifier_forward(tape, &params, &bound, h, true, 777)?;
            cross_entropy_graph(tape, logits, &labels, 7)
        },
        &checked,
        &settings,
    )?;
    print!("{}", classification_report.to_text());

    let all_ok = contrastive_report.all_passed() && classification_report.all_passed();
    if all_ok {
        println!("gradcheck: PASS");
        Ok(CommandOutcome::Ok)
    } else {
        let worst = [contrastive_report.worst(), classification_report.worst()]
            .into_iter()
            .flatten()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|p| format!("{} (max rel err {:.3e})", p.name, p.max_rel_err))
            .unwrap_or_default();
        println!("gradcheck: FAIL, worst offender {worst}");
        Ok(CommandOutcome::ToleranceBreach(worst))
    }
}

/// Maps an error to the documented exit codes: 2 config, 3 I/O, 4 numeric.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Format { .. } => 3,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonScalarLoss { .. } => 4,
        _ => 2,
    }
}
