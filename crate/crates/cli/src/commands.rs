use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nmsparse::io::{
    load_idx, load_masks, load_model, save_masks, save_model, write_idx, MaskRecord, MaskSet,
};
use nmsparse::magnitude::{magnitude_prune_matrix, permutation_search, random_mask};
use nmsparse::model::{
    evaluate_topk, freeze_all, small_convnet, split_holdout, top_k, train_masks, train_weights,
    CompositionalClassifier, Mode, Sample, TrainConfig, WeightTrainConfig,
};
use nmsparse::sparse_kernel::BenchSize;
use nmsparse::stability::{
    certify_batch, lipschitz_bound, mask_to_perturbation, perturbed_lipschitz_bound, CertifyRequest,
};
use nmsparse::synth::{synth_digits, SynthConfig};
use nmsparse::{
    bench_compare, mask_stats, BenchConfig, Error, FreezeMode, Matrix, StabilityCertificate,
};

use crate::{Command, DataArgs, EvalMode, FreezeArg};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out_images,
            out_labels,
            count,
            side,
            noise,
            seed,
        } => {
            let data = synth_digits(&SynthConfig {
                side,
                count,
                seed,
                noise,
                ..Default::default()
            });
            write_idx(&data, &out_images, &out_labels)?;
            println!("wrote {count} {side}x{side} images");
            Ok(())
        }
        Command::Pretrain {
            data,
            out,
            channels,
            classes,
            epochs,
            lr,
            batch_size,
            seed,
        } => pretrain(
            &data, &out, &channels, classes, epochs, lr, batch_size, seed,
        ),
        Command::TrainMask {
            data,
            model,
            out,
            history,
            epochs,
            lr,
            tau,
            anneal,
            weight_decay,
            batch_size,
            holdout,
            freeze,
            seed,
        } => {
            let anneal = match anneal.as_deref() {
                None => None,
                Some(&[start, end]) => Some((start, end)),
                Some(_) => bail!("--anneal takes start,end"),
            };
            let cfg = TrainConfig {
                learning_rate: lr,
                weight_decay,
                epochs,
                batch_size,
                temperature: tau,
                anneal,
                seed,
                freeze: match freeze {
                    FreezeArg::Deterministic => FreezeMode::Deterministic,
                    FreezeArg::Stochastic => FreezeMode::Stochastic { seed },
                },
                ..Default::default()
            };
            train_mask(&data, &model, &out, history.as_deref(), holdout, &cfg)
        }
        Command::Eval {
            data,
            model,
            mask,
            mode,
        } => eval(&data, &model, mask.as_deref(), mode),
        Command::PruneMagnitude {
            data,
            model,
            mask,
            budget,
            seed,
            out,
        } => prune_magnitude(&data, &model, mask.as_deref(), budget, seed, out.as_deref()),
        Command::Bench {
            sizes,
            reps,
            seed,
            parallel,
            out,
        } => {
            let cfg = BenchConfig {
                sizes: sizes.into_iter().map(BenchSize::cube).collect(),
                reps,
                seed,
                parallel,
            };
            let report = bench_compare(&cfg)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                write_text(&out, &report.to_records())?;
            }
            Ok(())
        }
        Command::Certify {
            model,
            lemma,
            layer,
            mask,
            update,
            delta_norm,
            dataset_images,
            dataset_labels,
            mean,
            std,
            limit,
            out,
        } => {
            let data = match (dataset_images, dataset_labels) {
                (Some(i), Some(l)) => Some(DataArgs {
                    dataset_images: i,
                    dataset_labels: l,
                    mean,
                    std,
                    limit,
                }),
                (None, None) => None,
                _ => bail!("--dataset-images and --dataset-labels go together"),
            };
            certify(
                &model,
                lemma,
                layer,
                mask.as_deref(),
                update.as_deref(),
                delta_norm,
                data.as_ref(),
                out.as_deref(),
            )
        }
        Command::Inspect { mask } => inspect(&mask),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_samples(data: &DataArgs) -> Result<Vec<Sample>> {
    let set = load_idx(&data.dataset_images, &data.dataset_labels)?
        .with_normalization(data.mean, data.std);
    let mut samples = set.samples();
    if let Some(n) = data.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        bail!("dataset is empty");
    }
    Ok(samples)
}

fn layer_index(model: &CompositionalClassifier, name: &str) -> Result<usize> {
    model
        .layers()
        .iter()
        .position(|l| l.name() == name)
        .ok_or_else(|| anyhow!("mask names layer {name:?}, which the model does not have"))
}

fn install_masks(model: &mut CompositionalClassifier, set: &MaskSet) -> Result<()> {
    if set.config != model.config() {
        bail!(
            "mask file is {}:{}, model is {}:{}",
            set.config.kept(),
            set.config.block_len(),
            model.config().kept(),
            model.config().block_len()
        );
    }
    for rec in &set.layers {
        let i = layer_index(model, &rec.name)?;
        model.set_frozen_mask(i, rec.mask.clone())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    data: &DataArgs,
    out: &Path,
    channels: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let set = load_idx(&data.dataset_images, &data.dataset_labels)?;
    if set.rows != set.cols {
        bail!(
            "pretrain needs square images, got {}x{}",
            set.rows,
            set.cols
        );
    }
    let &[c0, c1] = channels else {
        bail!("--channels takes two values");
    };
    let mut samples = set.with_normalization(data.mean, data.std).samples();
    if let Some(n) = data.limit {
        samples.truncate(n);
    }
    let side = (samples.first().map_or(0, |s| s.input.len()) as f64).sqrt() as usize;
    let mut model = small_convnet(side, (c0, c1), classes, seed)?;
    let cfg = WeightTrainConfig {
        learning_rate: lr,
        epochs,
        batch_size,
        seed,
        ..Default::default()
    };
    let losses = train_weights(&mut model, &samples, &cfg)?;
    println!("epoch\tloss");
    for (e, l) in losses.iter().enumerate() {
        println!("{e}\t{l:.6}");
    }
    save_model(out, &model)?;
    Ok(())
}

fn train_mask(
    data: &DataArgs,
    model_path: &Path,
    out: &Path,
    history: Option<&Path>,
    holdout: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut model = load_model(model_path)?;
    let samples = load_samples(data)?;
    let (train, val) = split_holdout(&samples, holdout, cfg.seed);
    model.enable_conv_masking(cfg.temperature, cfg.seed)?;
    let outcome = match train_masks(&mut model, &train, &val, cfg) {
        Ok(o) => o,
        Err(e @ Error::Diverged { .. }) => {
            // keep what was learned up to the last finite step
            let dump = out.with_extension("diverged.nmsk");
            let masks = freeze_all(&mut model, FreezeMode::Deterministic)?;
            save_masks(&dump, &mask_set(&model, &masks, FreezeMode::Deterministic))?;
            return Err(anyhow!(e).context(format!("mask state dumped to {}", dump.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let records = outcome.history.to_records();
    print!("{records}");
    if let Some(h) = history {
        write_text(h, &records)?;
    }
    save_masks(out, &mask_set(&model, &outcome.masks, cfg.freeze))?;
    Ok(())
}

fn mask_set(
    model: &CompositionalClassifier,
    masks: &[(usize, nmsparse::BitMask)],
    freeze: FreezeMode,
) -> MaskSet {
    MaskSet {
        config: model.config(),
        layers: masks
            .iter()
            .map(|(i, m)| MaskRecord {
                name: model.layers()[*i].name().to_string(),
                mask: m.clone(),
                freeze,
            })
            .collect(),
    }
}

fn eval(data: &DataArgs, model_path: &Path, mask: Option<&Path>, mode: EvalMode) -> Result<()> {
    let mut model = load_model(model_path)?;
    let samples = load_samples(data)?;
    let mode = match (mode, mask) {
        (EvalMode::Dense, _) => Mode::Dense,
        (EvalMode::Hard, Some(m)) => {
            install_masks(&mut model, &load_masks(m)?)?;
            Mode::Hard
        }
        (EvalMode::Hard, None) => bail!("--mode hard needs --mask"),
        (EvalMode::Soft, _) => {
            bail!("--mode soft needs mask logits; mask files hold frozen choices only")
        }
    };
    let k5 = model.classes().min(5);
    let top1 = evaluate_topk(&model, &samples, 1, mode)?;
    let top5 = evaluate_topk(&model, &samples, k5, mode)?;
    let digest: String = model
        .weights_digest()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let name = match mode {
        Mode::Dense => "dense",
        _ => "hard",
    };
    println!("mode\tsamples\ttop1\ttop5\tweights_sha256");
    println!("{name}\t{}\t{top1:.6}\t{top5:.6}\t{digest}", samples.len());
    Ok(())
}

fn accuracy(
    model: &CompositionalClassifier,
    masks: &[Option<Matrix>],
    samples: &[Sample],
) -> Result<(f64, f64)> {
    let eff = model.effective_weights(masks)?;
    let k5 = model.classes().min(5);
    let (mut h1, mut h5) = (0usize, 0usize);
    for s in samples {
        let top = top_k(&model.forward_with(&eff, &s.input)?, k5);
        h1 += usize::from(top[0] == s.label);
        h5 += usize::from(top.contains(&s.label));
    }
    let n = samples.len() as f64;
    Ok((h1 as f64 / n, h5 as f64 / n))
}

/// `Σ|W ⊙ M| / Σ|W|` pooled over the masked layers.
fn pooled_efficacy(model: &CompositionalClassifier, masks: &[Option<Matrix>]) -> f64 {
    let (mut kept, mut total) = (0.0, 0.0);
    for (layer, m) in model.layers().iter().zip(masks) {
        if let Some(m) = m {
            let w = layer.weights().matrix();
            for (a, b) in w.as_slice().iter().zip(m.as_slice()) {
                kept += a.abs() * b;
                total += a.abs();
            }
        }
    }
    if total == 0.0 {
        1.0
    } else {
        kept / total
    }
}

fn prune_magnitude(
    data: &DataArgs,
    model_path: &Path,
    learned: Option<&Path>,
    budget: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let mut model = load_model(model_path)?;
    // pads conv weights to whole blocks, as mask training does
    model.enable_conv_masking(0.1, seed)?;
    let samples = load_samples(data)?;
    let p = model.patterns().clone();
    let depth = model.depth();
    let (mut mag, mut perm, mut rnd) = (vec![None; depth], vec![None; depth], vec![None; depth]);
    let mut mag_masks = Vec::new();
    for i in model.maskable_layers() {
        let w = model.layers()[i].weights();
        let m = magnitude_prune_matrix(w, &p)?;
        mag[i] = Some(m.to_matrix());
        mag_masks.push((i, m));
        let (plan, pm) = permutation_search(w, &p, budget)?;
        let pmm = pm.to_matrix();
        let real = w.real_cols();
        perm[i] = Some(Matrix::from_fn(pmm.rows(), pmm.cols(), |r, c| {
            if c < real {
                pmm[(r, plan.inverse[c])]
            } else {
                pmm[(r, c)]
            }
        }));
        rnd[i] = Some(
            random_mask(w.rows(), w.cols(), real, &p, seed.wrapping_add(i as u64))?.to_matrix(),
        );
    }
    let mut rows = Vec::new();
    if let Some(path) = learned {
        let mut probe = model.clone();
        install_masks(&mut probe, &load_masks(path)?)?;
        let lm = probe.masks_for(Mode::Hard)?;
        rows.push(("learned", lm));
    }
    rows.push(("permuted_magnitude", perm));
    rows.push(("magnitude", mag));
    rows.push(("random", rnd));
    let mut report = String::from("method\ttop1\ttop5\tefficacy\n");
    for (name, masks) in &rows {
        let (t1, t5) = accuracy(&model, masks, &samples)?;
        let _ = writeln!(
            report,
            "{name}\t{t1:.6}\t{t5:.6}\t{:.6}",
            pooled_efficacy(&model, masks)
        );
    }
    print!("{report}");
    if let Some(out) = out {
        save_masks(
            out,
            &mask_set(&model, &mag_masks, FreezeMode::Deterministic),
        )?;
    }
    Ok(())
}

fn layer_mask(model: &CompositionalClassifier, set: &MaskSet, layer: usize) -> Result<Matrix> {
    let name = model.layer(layer)?.name();
    let rec = set
        .get(name)
        .ok_or_else(|| anyhow!("mask file has no entry for layer {name:?}"))?;
    let m = rec.mask.to_matrix();
    let w = model.layers()[layer].weights().matrix();
    if m.rows() != w.rows() || m.cols() < w.cols() {
        bail!(
            "mask {:?} does not cover layer {name:?} weights {:?}",
            m.shape(),
            w.shape()
        );
    }
    // the stored model has no padding columns
    Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| m[(r, c)]))
}

#[allow(clippy::too_many_arguments)]
fn certify(
    model_path: &Path,
    lemma: u8,
    layer: usize,
    mask: Option<&Path>,
    update: Option<&Path>,
    delta_norm: Option<f64>,
    data: Option<&DataArgs>,
    out: Option<&Path>,
) -> Result<()> {
    let model = load_model(model_path)?;
    model.layer(layer)?;
    let perturbation = |needed: bool| -> Result<Option<(Matrix, f64)>> {
        match mask {
            Some(path) => {
                let b = layer_mask(&model, &load_masks(path)?, layer)?;
                Ok(Some(mask_to_perturbation(
                    &b,
                    model.layers()[layer].weights().matrix(),
                )?))
            }
            None if needed => bail!("lemma {lemma} needs --mask"),
            None => Ok(None),
        }
    };
    let mut report = String::new();
    match lemma {
        1..=3 => {
            report.push_str("lemma\tlayer\tquantity\tvalue\n");
            match lemma {
                1 => {
                    let _ = writeln!(report, "L1\t-\tlipschitz\t{:.9e}", lipschitz_bound(&model));
                }
                2 => {
                    let norm = match (delta_norm, perturbation(false)?) {
                        (Some(n), _) => n,
                        (None, Some((_, n))) => n,
                        (None, None) => bail!("lemma 2 needs --mask or --delta-norm"),
                    };
                    let b = perturbed_lipschitz_bound(&model, layer, norm)?;
                    let _ = writeln!(report, "L2\t{layer}\tperturbed_lipschitz\t{b:.9e}");
                }
                _ => {
                    let (_, n) = perturbation(true)?.expect("mask required");
                    let _ = writeln!(report, "L3\t{layer}\tperturbation_norm\t{n:.9e}");
                }
            }
        }
        _ => {
            let data = data.ok_or_else(|| {
                anyhow!("lemma {lemma} needs --dataset-images and --dataset-labels")
            })?;
            let inputs: Vec<Vec<f64>> = load_samples(data)?.into_iter().map(|s| s.input).collect();
            let held;
            let request = match lemma {
                4 => {
                    held = perturbation(true)?.expect("mask required").0;
                    CertifyRequest::Perturbation(&held)
                }
                5 => CertifyRequest::AnyMask,
                _ => {
                    let path = update.ok_or_else(|| anyhow!("lemma 6 needs --update"))?;
                    let updated = load_model(path)?;
                    let w = model.layers()[layer].weights().matrix();
                    let w2 = updated.layer(layer)?.weights().matrix();
                    held = w2
                        .add(&w.scale(-1.0))
                        .context("update model has a different shape")?;
                    CertifyRequest::MaskThenUpdate(&held)
                }
            };
            let certs = certify_batch(&model, &inputs, layer, request)?;
            report.push_str(StabilityCertificate::HEADER);
            report.push('\n');
            for c in &certs {
                report.push_str(&c.record());
                report.push('\n');
            }
            let ok = certs.iter().filter(|c| c.stable_guaranteed).count();
            let vacuous = certs.iter().filter(|c| c.vacuous).count();
            eprintln!(
                "certified {ok} of {} samples ({vacuous} vacuous bounds)",
                certs.len()
            );
        }
    }
    print!("{report}");
    if let Some(out) = out {
        write_text(out, &report)?;
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let set = load_masks(path)?;
    let patterns = nmsparse::enumerate_patterns(set.config);
    let n = set.config.pattern_count();
    let mut header = String::from("layer\trows\tcols\tblocks");
    for p in 0..n {
        let _ = write!(header, "\tp{p}");
    }
    println!("{header}\tsparsity");
    let (mut zeros, mut total) = (0.0, 0usize);
    for rec in &set.layers {
        let s = mask_stats(&rec.mask, &patterns)?;
        let hist: Vec<String> = s.histogram.iter().map(|h| h.to_string()).collect();
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.1}%",
            rec.name,
            s.rows,
            s.cols,
            s.blocks,
            hist.join("\t"),
            s.sparsity * 100.0
        );
        zeros += s.sparsity * (s.rows * s.cols) as f64;
        total += s.rows * s.cols;
    }
    let overall = if total == 0 {
        0.0
    } else {
        zeros / total as f64
    };
    println!("total\t-\t-\t-{}\t{:.1}%", "\t-".repeat(n), overall * 100.0);
    Ok(())
}
