//! Acceptance gate: runs every criterion and prints one line per result.
//! Exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nmsparse::conv::Tensor3;
use nmsparse::io::{
    decode_masks, decode_model, encode_idx_images, encode_idx_labels, encode_masks, encode_model,
    parse_idx_images, parse_idx_labels, MaskRecord, MaskSet,
};
use nmsparse::magnitude::{magnitude_prune_matrix, permutation_search, random_mask};
use nmsparse::mask_sampler::{gs_hard_sample, gs_soft_sample};
use nmsparse::matrix::matmul_counted;
use nmsparse::model::{
    batch_loss, evaluate_topk, grads_wrt_logits, init_conv, init_linear, small_convnet,
    split_holdout, top_k, train_masks, train_weights, Activation, CompositionalClassifier, Layer,
    Mode, Sample, TrainConfig, TrainHistory, WeightTrainConfig,
};
use nmsparse::nm_patterns::mask_stats;
use nmsparse::sparse_kernel::{spmm_counted, BenchSize};
use nmsparse::stability::{
    lipschitz_bound, mask_to_perturbation, masking_stability, perturbed_lipschitz_bound,
    stability_margin, update_masking_stability,
};
use nmsparse::synth::{synth_digits, SynthConfig};
use nmsparse::{
    bench_compare, compress, conv_direct, conv_matmul, enumerate_patterns, flop_count,
    kernels_to_weight_matrix, masked_conv, sample_gumbel, spmm, unfold, validate_mask, BenchConfig,
    BitMask, Error, FormatError, FreezeMode, KernelStack, MaskLogits, MaskRef, Matrix, NmConfig,
    NoiseKey,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn p24() -> nmsparse::PatternMatrix {
    enumerate_patterns(NmConfig::two_four())
}

// 1 ------------------------------------------------------------------------

fn conv_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = p24();
    let mut worst = 0.0f64;
    for _ in 0..120 {
        let c_in = rng.random_range(1..=8);
        let c_out = rng.random_range(1..=8);
        let b = rng.random_range(1..=16);
        let d = rng.random_range(1..=16);
        let kh = [1, 3, 5][rng.random_range(0..3)];
        let kw = [1, 3, 5][rng.random_range(0..3)];
        let x = Tensor3::new(
            c_in,
            b,
            d,
            (0..c_in * b * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let k = KernelStack::new(
            c_out,
            c_in,
            kh,
            kw,
            (0..c_out * c_in * kh * kw)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let direct = conv_direct(&x, &k).unwrap();
        let w = kernels_to_weight_matrix(&k, true);
        let u = unfold(&x, (kh, kw)).unwrap();
        let mm = conv_matmul(&w, &u).unwrap();
        let ones = Matrix::from_fn(w.rows(), w.cols(), |_, _| 1.0);
        let masked = masked_conv(&w, MaskRef::Soft(&ones), &u).unwrap();
        worst = worst
            .max(direct.max_abs_diff(&mm))
            .max(direct.max_abs_diff(&masked));
        // sparse path against direct convolution with masked kernels
        let choices: Vec<usize> = (0..w.rows() * w.cols() / 4)
            .map(|_| rng.random_range(0..6))
            .collect();
        let mask = BitMask::from_choices(w.rows(), w.cols(), &choices, &p).unwrap();
        let reference = conv_direct(&x, &k.masked(&mask).unwrap()).unwrap();
        let y = spmm(
            &compress(w.matrix(), &mask).unwrap(),
            u.padded_to(w.cols()).unwrap().matrix(),
        )
        .unwrap();
        let diff = y
            .as_slice()
            .iter()
            .zip(reference.as_slice())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff);
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-10, format!("max abs error {worst:e}"))?;
    ensure(
        elapsed < Duration::from_secs(10),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "120 instances, max abs error {worst:.2e}, {elapsed:.2?}"
    ))
}

// 2 ------------------------------------------------------------------------

fn sparsity_invariant() -> Check {
    let f = desk();
    let p = p24();
    let mut masks: Vec<&BitMask> = Vec::new();
    masks.extend(f.learned.iter());
    masks.extend(f.magnitude.iter());
    masks.extend(f.permuted_masks.iter());
    masks.extend(f.random.iter());
    let extra: Vec<BitMask> = (0..20)
        .map(|s| random_mask(5, 20, 18, &p, s).unwrap())
        .collect();
    masks.extend(extra.iter());
    for (i, m) in masks.iter().enumerate() {
        validate_mask(m).map_err(|e| format!("mask {i}: {e}"))?;
        let stats = mask_stats(m, &p).map_err(|e| e.to_string())?;
        ensure(
            stats.sparsity == 0.5,
            format!("mask {i} sparsity {}", stats.sparsity),
        )?;
        ensure(
            stats.histogram.iter().sum::<usize>() == stats.blocks,
            "histogram total",
        )?;
    }
    Ok(format!("{} masks valid, sparsity exactly 50%", masks.len()))
}

// 3 ------------------------------------------------------------------------

fn flop_model() -> Check {
    let p = p24();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shapes = [
        (1, 4, 1),
        (2, 8, 3),
        (4, 4, 4),
        (3, 12, 5),
        (8, 16, 7),
        (5, 20, 2),
        (16, 32, 9),
        (7, 36, 16),
        (12, 72, 144),
        (32, 64, 33),
        (64, 128, 64),
    ];
    for &(r, c, l) in &shapes {
        let f = flop_count(r, c, l, NmConfig::two_four()).map_err(|e| e.to_string())?;
        ensure(f.ratio == 2.0, format!("ratio {} at {r}x{c}x{l}", f.ratio))?;
        let choices: Vec<usize> = (0..r * c / 4).map(|_| rng.random_range(0..6)).collect();
        let mask = BitMask::from_choices(r, c, &choices, &p).unwrap();
        let w = Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let x = Matrix::from_fn(c, l, |_, _| rng.random_range(-1.0..1.0));
        let (mut dm, mut sm) = (0u64, 0u64);
        matmul_counted(&mask.apply(&w).unwrap(), &x, &mut dm).unwrap();
        spmm_counted(&compress(&w, &mask).unwrap(), &x, &mut sm).unwrap();
        ensure(
            dm == 2 * sm && sm == f.sparse_macs,
            format!("counted {dm} vs {sm} at {r}x{c}x{l}"),
        )?;
    }
    Ok(format!(
        "{} shapes: ratio 2.0, counted sparse MACs exactly half",
        shapes.len()
    ))
}

// 4 ------------------------------------------------------------------------

fn gumbel_fidelity() -> Check {
    let p = p24();
    let logits = [0.3, -1.2, 1.5, 0.0, -0.4, 0.9];
    let mut l = MaskLogits::uniform(0, 1, 4, &p, 0.01).unwrap();
    l.logits_mut().copy_from_slice(&logits);
    let draws = 100_000u64;
    let mut counts = [0f64; 6];
    for t in 0..draws {
        let g = sample_gumbel(1, 6, NoiseKey::new(2024, 0, t)).unwrap();
        counts[gs_hard_sample(&l, &g).unwrap().choices()[0]] += 1.0;
    }
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let stat: f64 = logits
        .iter()
        .zip(&counts)
        .map(|(v, c)| {
            let e = draws as f64 * v.exp() / z;
            (c - e).powi(2) / e
        })
        .sum();
    let pval = 1.0 - ChiSquared::new(5.0).unwrap().cdf(stat);
    ensure(pval > 0.01, format!("chi2 {stat:.3}, p {pval:.4}"))?;

    // soft at tau = 0.01 against the hard one-hot when the perturbed gap >= 1
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut worst = 0.0f64;
    for t in 0..5000u64 {
        let lg: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
        l.logits_mut().copy_from_slice(&lg);
        let g = sample_gumbel(1, 6, NoiseKey::new(7, 0, t)).unwrap();
        let mut s: Vec<f64> = lg.iter().zip(g.values()).map(|(a, b)| a + b).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if s[0] - s[1] < 1.0 {
            continue;
        }
        checked += 1;
        let hard = gs_hard_sample(&l, &g).unwrap().choices()[0];
        let soft = gs_soft_sample(&l, &g).unwrap();
        for (i, v) in soft.values().iter().enumerate() {
            worst = worst.max((v - f64::from(u8::from(i == hard))).abs());
        }
    }
    ensure(worst <= 1e-6, format!("soft/hard gap {worst:e}"))?;
    Ok(format!("chi2 {stat:.3} (p = {pval:.3}) over 1e5 draws; soft-vs-hard max {worst:.1e} on {checked} blocks"))
}

// 5 ------------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = vec![
        init_conv("c0", 1, 4, 3, (6, 6), Activation::Relu, &mut rng).unwrap(),
        init_conv("c1", 4, 4, 3, (6, 6), Activation::Relu, &mut rng).unwrap(),
        init_linear("head", 144, 5, Activation::Identity, &mut rng).unwrap(),
    ];
    let mut m = CompositionalClassifier::new(36, layers).unwrap();
    m.enable_conv_masking(1.0, 6).unwrap();
    let batch: Vec<Sample> = (0..4)
        .map(|i| Sample {
            input: (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: i % 5,
        })
        .collect();
    let noise = m.draw_noise(8, 0).unwrap();
    let (_, grads) = grads_wrt_logits(&m, &batch, &noise).unwrap();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (g, &layer) in grads.iter().zip(&m.maskable_layers()) {
        let base = m.layers()[layer].mask_logits().unwrap().logits().to_vec();
        for k in 0..g.len() {
            let h = 1e-5;
            let mut probe = m.clone();
            let mut v = base.clone();
            v[k] = base[k] + h;
            probe.set_mask_logits(layer, &v).unwrap();
            let up = batch_loss(&probe, &batch, Mode::Soft(&noise)).unwrap();
            v[k] = base[k] - h;
            probe.set_mask_logits(layer, &v).unwrap();
            let dn = batch_loss(&probe, &batch, Mode::Soft(&noise)).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(rel);
            count += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-4, format!("relative error {worst:e}"))?;
    ensure(
        elapsed < Duration::from_secs(60),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "{count} logits over 2 conv layers, max relative error {worst:.2e}, {elapsed:.2?}"
    ))
}

// desk-scale fixture shared by 2, 6, 7 and 10 ---------------------------------

struct Desk {
    baseline: f64,
    learned_acc: f64,
    magnitude_acc: f64,
    permuted_acc: f64,
    random_acc: f64,
    history: TrainHistory,
    digest_before: [u8; 32],
    digest_after: [u8; 32],
    learned: Vec<BitMask>,
    magnitude: Vec<BitMask>,
    permuted_masks: Vec<BitMask>,
    random: Vec<BitMask>,
    elapsed: Duration,
}

const DESK_SIDE: usize = 12;

fn desk() -> &'static Desk {
    static CELL: OnceLock<Desk> = OnceLock::new();
    CELL.get_or_init(build_desk)
}

fn build_desk() -> Desk {
    let start = Instant::now();
    let synth = |count, seed| {
        synth_digits(&SynthConfig {
            side: DESK_SIDE,
            count,
            seed,
            noise: 100,
            ..Default::default()
        })
        .with_normalization(0.2, 0.3)
        .samples()
    };
    let data = synth(10_000, 1);
    let test = synth(2_000, 2);
    let (train, val) = split_holdout(&data, 0.1, 7);

    let mut model = small_convnet(DESK_SIDE, (8, 16), 10, 1).unwrap();
    let wcfg = WeightTrainConfig {
        learning_rate: 3e-3,
        epochs: 3,
        batch_size: 32,
        ..Default::default()
    };
    train_weights(&mut model, &train, &wcfg).unwrap();
    let baseline = evaluate_topk(&model, &test, 1, Mode::Dense).unwrap();

    model.enable_conv_masking(0.1, 5).unwrap();
    let digest_before = model.weights_digest();
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 3,
        batch_size: 32,
        anneal: Some((1.0, 0.1)),
        seed: 10,
        ..Default::default()
    };
    let outcome = train_masks(&mut model, &train, &val, &cfg).unwrap();
    let digest_after = model.weights_digest();
    let learned_acc = evaluate_topk(&model, &test, 1, Mode::Hard).unwrap();

    let p = model.patterns().clone();
    let depth = model.depth();
    let (mut mag, mut perm, mut rnd) = (vec![None; depth], vec![None; depth], vec![None; depth]);
    let (mut magnitude, mut permuted_masks, mut random) = (Vec::new(), Vec::new(), Vec::new());
    for i in model.maskable_layers() {
        let w = model.layers()[i].weights();
        let m = magnitude_prune_matrix(w, &p).unwrap();
        mag[i] = Some(m.to_matrix());
        magnitude.push(m);
        let (plan, pm) = permutation_search(w, &p, 5000).unwrap();
        let pmm = pm.to_matrix();
        let real = w.real_cols();
        // back to the original column order
        perm[i] = Some(Matrix::from_fn(pmm.rows(), pmm.cols(), |r, c| {
            if c < real {
                pmm[(r, plan.inverse[c])]
            } else {
                pmm[(r, c)]
            }
        }));
        permuted_masks.push(pm);
        let rm = random_mask(w.rows(), w.cols(), real, &p, 11 + i as u64).unwrap();
        rnd[i] = Some(rm.to_matrix());
        random.push(rm);
    }
    let acc = |masks: &[Option<Matrix>]| {
        let eff = model.effective_weights(masks).unwrap();
        let hits = test
            .iter()
            .filter(|s| top_k(&model.forward_with(&eff, &s.input).unwrap(), 1)[0] == s.label)
            .count();
        hits as f64 / test.len() as f64
    };
    Desk {
        baseline,
        learned_acc,
        magnitude_acc: acc(&mag),
        permuted_acc: acc(&perm),
        random_acc: acc(&rnd),
        history: outcome.history,
        digest_before,
        digest_after,
        learned: outcome.masks.into_iter().map(|(_, m)| m).collect(),
        magnitude,
        permuted_masks,
        random,
        elapsed: start.elapsed(),
    }
}

// 6 ------------------------------------------------------------------------

fn accuracy_retention() -> Check {
    let f = desk();
    let entropies: Vec<f64> = f.history.epochs.iter().map(|e| e.mask_entropy).collect();
    ensure(f.history.len() <= 3, "more than 3 mask epochs")?;
    ensure(
        f.learned_acc >= f.baseline - 0.01,
        format!("hard top-1 {:.4} vs dense {:.4}", f.learned_acc, f.baseline),
    )?;
    ensure(
        entropies.windows(2).all(|w| w[1] <= w[0]),
        format!("mask entropy increased: {entropies:?}"),
    )?;
    Ok(format!(
        "dense top-1 {:.4}, hard-masked top-1 {:.4} after {} epochs, entropy {:.3} -> {:.3}, {:.1?}",
        f.baseline,
        f.learned_acc,
        f.history.len(),
        entropies[0],
        entropies[entropies.len() - 1],
        f.elapsed
    ))
}

// 7 ------------------------------------------------------------------------

fn mask_ordering() -> Check {
    let f = desk();
    let line = format!(
        "learned {:.4}, permuted magnitude {:.4}, magnitude {:.4}, random {:.4}",
        f.learned_acc, f.permuted_acc, f.magnitude_acc, f.random_acc
    );
    ensure(
        f.learned_acc > f.permuted_acc && f.learned_acc > f.magnitude_acc,
        format!("learned not best: {line}"),
    )?;
    ensure(
        f.permuted_acc >= f.magnitude_acc,
        format!("permuted below unpermuted: {line}"),
    )?;
    ensure(
        f.magnitude_acc >= f.random_acc,
        format!("magnitude below random: {line}"),
    )?;
    Ok(line)
}

// 8 ------------------------------------------------------------------------

fn scaled(rows: usize, cols: usize, norm: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    m.scale(norm / m.inf_norm())
}

fn norm_scaled_toy(seed: u64, margin: f64) -> CompositionalClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l0 = Layer::linear(
        "l0",
        scaled(4, 4, 0.5, &mut rng),
        vec![0.0; 4],
        Activation::Relu,
    )
    .unwrap();
    let l1 = Layer::linear(
        "l1",
        scaled(4, 4, 0.5, &mut rng),
        vec![0.0; 4],
        Activation::Relu,
    )
    .unwrap();
    let head = Layer::linear(
        "head",
        scaled(3, 4, 0.5, &mut rng),
        vec![margin, 0.0, 0.0],
        Activation::Identity,
    )
    .unwrap();
    CompositionalClassifier::new(4, vec![l0, l1, head]).unwrap()
}

fn argmax(m: &CompositionalClassifier, x: &[f64]) -> usize {
    top_k(&m.forward(x, Mode::Dense).unwrap(), 1)[0]
}

fn certificate_soundness() -> Check {
    let p = p24();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut trials, mut certified, mut violations) = ([0usize; 3], [0usize; 3], 0usize);
    for t in 0..1000u64 {
        let m = norm_scaled_toy(t % 16, (t % 8) as f64 * 0.1);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j = (t % 2) as usize;
        let w = m.layers()[j].weights().matrix().clone();
        let y = argmax(&m, &x);

        // Lemma 4: one concrete mask-induced perturbation
        let b = Matrix::from_fn(4, 4, |_, _| f64::from(rng.random_bool(0.5)));
        let (delta, _) = mask_to_perturbation(&b, &w).unwrap();
        trials[0] += 1;
        if stability_margin(&m, &x, j, &delta)
            .unwrap()
            .stable_guaranteed
        {
            certified[0] += 1;
            let pm = m.with_weights(j, &w.add(&delta).unwrap()).unwrap();
            violations += usize::from(argmax(&pm, &x) != y);
        }

        // Lemma 5: all 6^4 valid 2:4 masks of layer j
        trials[1] += 1;
        if masking_stability(&m, &x, j).unwrap().stable_guaranteed {
            certified[1] += 1;
            for code in 0..6usize.pow(4) {
                let choices: Vec<usize> = (0..4).map(|i| code / 6usize.pow(i) % 6).collect();
                let mask = BitMask::from_choices(4, 4, &choices, &p).unwrap();
                let pm = m.with_weights(j, &mask.apply(&w).unwrap()).unwrap();
                violations += usize::from(argmax(&pm, &x) != y);
            }
        }

        // Lemma 6: random mask applied to randomly updated weights
        let u = Matrix::from_fn(4, 4, |_, _| rng.random_range(-0.05..0.05));
        trials[2] += 1;
        if update_masking_stability(&m, &x, j, &u)
            .unwrap()
            .stable_guaranteed
        {
            certified[2] += 1;
            let v = w.add(&u).unwrap();
            let pm = m.with_weights(j, &b.hadamard(&v).unwrap()).unwrap();
            violations += usize::from(argmax(&pm, &x) != y);
        }
    }
    ensure(violations == 0, format!("{violations} violations"))?;
    ensure(
        certified.iter().all(|&c| c > 0),
        format!("nothing certified: {certified:?}"),
    )?;
    Ok(format!(
        "trials {trials:?}, certified {certified:?} (L4, L5, L6), 0 violations"
    ))
}

// 9 ------------------------------------------------------------------------

fn linear_chain(ws: &[Matrix]) -> CompositionalClassifier {
    let layers = ws
        .iter()
        .enumerate()
        .map(|(i, w)| {
            Layer::linear(
                format!("l{i}"),
                w.clone(),
                vec![0.0; w.rows()],
                Activation::Relu,
            )
            .unwrap()
        })
        .collect();
    CompositionalClassifier::new(ws[0].cols(), layers).unwrap()
}

fn m2(rows: [[f64; 2]; 2]) -> Matrix {
    Matrix::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap()
}

fn bound_arithmetic() -> Check {
    let close =
        |a: f64, b: f64, what: &str| ensure((a - b).abs() <= 1e-12, format!("{what}: {a} vs {b}"));
    let mut fixtures = Vec::new();

    // fixture A: one layer, norm 2
    let a = linear_chain(&[m2([[2.0, 0.0], [0.0, 2.0]])]);
    let xa = [0.5, -0.25];
    close(lipschitz_bound(&a), 2.0, "A L1")?;
    close(perturbed_lipschitz_bound(&a, 0, 1.0).unwrap(), 3.0, "A L2")?;
    let da = m2([[0.0, -1.0], [0.0, 0.0]]);
    close(
        stability_margin(&a, &xa, 0, &da).unwrap().bound,
        0.5,
        "A L4",
    )?;
    close(masking_stability(&a, &xa, 0).unwrap().bound, 1.0, "A L5")?;
    close(
        update_masking_stability(&a, &xa, 0, &m2([[0.5, 0.0], [0.0, 0.0]]))
            .unwrap()
            .bound,
        1.25,
        "A L6",
    )?;
    fixtures.push(a);

    // fixture B: norms 3 and 0.7
    let w2 = m2([[0.1, 0.2], [-0.3, 0.4]]);
    let b = linear_chain(&[m2([[1.0, -2.0], [0.5, 0.5]]), w2.clone()]);
    let xb = [1.0, -3.0];
    close(lipschitz_bound(&b), 2.1, "B L1")?;
    close(perturbed_lipschitz_bound(&b, 0, 0.5).unwrap(), 2.45, "B L2")?;
    let (db, nb) = mask_to_perturbation(&m2([[1.0, 0.0], [0.0, 1.0]]), &w2).unwrap();
    close(nb, 0.3, "B L3")?;
    close(
        stability_margin(&b, &xb, 1, &db).unwrap().bound,
        2.7,
        "B L4",
    )?;
    close(masking_stability(&b, &xb, 0).unwrap().bound, 6.3, "B L5")?;
    close(
        update_masking_stability(&b, &xb, 1, &m2([[0.05, -0.05], [0.0, 0.1]]))
            .unwrap()
            .bound,
        7.2,
        "B L6",
    )?;
    fixtures.push(b);

    // fixture C: norms 0.5, 0.25, 2
    let w0 = m2([[0.5, 0.0], [0.0, -0.5]]);
    let c = linear_chain(&[
        w0.clone(),
        m2([[0.25, 0.0], [0.0, 0.1]]),
        m2([[1.0, 1.0], [0.0, -2.0]]),
    ]);
    let xc = [0.2, 0.4];
    close(lipschitz_bound(&c), 0.25, "C L1")?;
    close(
        perturbed_lipschitz_bound(&c, 2, 1.0).unwrap(),
        0.375,
        "C L2",
    )?;
    let (dc, nc) = mask_to_perturbation(&Matrix::zeros(2, 2), &w0).unwrap();
    close(nc, 0.5, "C L3")?;
    close(
        stability_margin(&c, &xc, 0, &dc).unwrap().bound,
        0.1,
        "C L4",
    )?;
    close(masking_stability(&c, &xc, 1).unwrap().bound, 0.1, "C L5")?;
    close(
        update_masking_stability(&c, &xc, 2, &m2([[0.25, -0.25], [0.0, 0.0]]))
            .unwrap()
            .bound,
        0.125,
        "C L6",
    )?;
    fixtures.push(c);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for f in &fixtures {
        let bound = lipschitz_bound(f);
        for _ in 0..10_000 {
            let x1: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x2: Vec<f64> = x1.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
            let y1 = f.forward(&x1, Mode::Dense).unwrap();
            let y2 = f.forward(&x2, Mode::Dense).unwrap();
            let num = y1
                .iter()
                .zip(&y2)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let den = x1
                .iter()
                .zip(&x2)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if den > 0.0 {
                let q = num / den;
                ensure(q <= bound, format!("quotient {q} above bound {bound}"))?;
                worst = worst.max(q / bound);
            }
        }
    }
    Ok(format!(
        "3 fixtures match to 1e-12; 3x10^4 sampled quotients, max quotient/bound {worst:.3}"
    ))
}

// 10 -----------------------------------------------------------------------

fn frozen_weights() -> Check {
    let f = desk();
    ensure(f.digest_before == f.digest_after, "weight digest changed")?;
    let hex: String = f.digest_after[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(format!("weight digest {hex}... unchanged by mask training"))
}

// 11 -----------------------------------------------------------------------

fn expect_format(
    r: nmsparse::Result<impl std::fmt::Debug>,
    want: fn(&FormatError) -> bool,
    what: &str,
) -> Result<(), String> {
    match r {
        Err(Error::Format(e)) if want(&e) => Ok(()),
        other => Err(format!("{what}: got {other:?}")),
    }
}

fn format_roundtrips() -> Check {
    // IDX golden bytes
    let golden_images: Vec<u8> = vec![
        0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 64, 128, 255, 1, 2, 3, 4,
    ];
    let golden_labels: Vec<u8> = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
    let (n, r, c, px) = parse_idx_images(&golden_images).map_err(|e| e.to_string())?;
    ensure(
        (n, r, c) == (2, 2, 2) && px == [0, 64, 128, 255, 1, 2, 3, 4],
        "idx pixels",
    )?;
    ensure(
        parse_idx_labels(&golden_labels).map_err(|e| e.to_string())? == [7, 3],
        "idx labels",
    )?;
    ensure(
        encode_idx_images(2, 2, &px) == golden_images,
        "idx image encode",
    )?;
    ensure(
        encode_idx_labels(&[7, 3]) == golden_labels,
        "idx label encode",
    )?;
    ensure(
        matches!(
            parse_idx_images(&golden_labels),
            Err(FormatError::WrongMagic { .. })
        ),
        "idx magic",
    )?;
    ensure(
        matches!(
            parse_idx_images(&golden_images[..23]),
            Err(FormatError::Truncated { .. })
        ),
        "idx truncation",
    )?;

    // NMSK golden bytes: one layer "a", 1x4, pattern 5, deterministic
    let p = p24();
    let set = MaskSet {
        config: NmConfig::two_four(),
        layers: vec![MaskRecord {
            name: "a".into(),
            mask: BitMask::from_choices(1, 4, &[5], &p).unwrap(),
            freeze: FreezeMode::Deterministic,
        }],
    };
    let mut golden_mask = b"NMSK".to_vec();
    golden_mask.extend([1, 0, 4, 2, 1, 0, 0, 0, 1, 0, b'a', 1, 0, 0, 0, 4, 0, 0, 0]);
    golden_mask.extend(1u64.to_le_bytes());
    golden_mask.extend([5, 0]);
    golden_mask.extend(0u64.to_le_bytes());
    let bytes = encode_masks(&set).map_err(|e| e.to_string())?;
    ensure(bytes == golden_mask, "mask golden bytes")?;
    ensure(
        decode_masks(&bytes).map_err(|e| e.to_string())? == set,
        "mask decode",
    )?;
    let mut bad = bytes.clone();
    bad[31] = 6;
    expect_format(
        decode_masks(&bad),
        |e| matches!(e, FormatError::CorruptIndex { index: 6, .. }),
        "mask index",
    )?;
    let mut bad = bytes.clone();
    bad[4] = 9;
    expect_format(
        decode_masks(&bad),
        |e| matches!(e, FormatError::VersionMismatch { .. }),
        "mask version",
    )?;
    expect_format(
        decode_masks(&bytes[..bytes.len() - 1]),
        |e| matches!(e, FormatError::Truncated { .. }),
        "mask truncation",
    )?;
    let empty = MaskSet::new(NmConfig::two_four());
    ensure(
        decode_masks(&encode_masks(&empty).unwrap()).unwrap() == empty,
        "empty mask set",
    )?;

    // NMCL
    let model = small_convnet(6, (2, 3), 4, 12).unwrap();
    let bytes = encode_model(&model);
    let back = decode_model(&bytes).map_err(|e| e.to_string())?;
    ensure(
        back == model && encode_model(&back) == bytes,
        "model roundtrip",
    )?;
    let mut bad = bytes.clone();
    let mid = bytes.len() / 2;
    bad[mid] ^= 1;
    expect_format(
        decode_model(&bad),
        |e| matches!(e, FormatError::ChecksumMismatch),
        "model checksum",
    )?;
    let mut bad = bytes.clone();
    bad[0] = b'X';
    expect_format(
        decode_model(&bad),
        |e| matches!(e, FormatError::WrongMagic { .. }),
        "model magic",
    )?;
    Ok("IDX, NMSK and NMCL golden bytes and corruption classes".into())
}

// 12 -----------------------------------------------------------------------

fn benchmark_sanity() -> Check {
    let size = BenchSize::cube(1024);
    let report = bench_compare(&BenchConfig {
        sizes: vec![size],
        reps: 5,
        seed: 12,
        parallel: false,
    })
    .map_err(|e| e.to_string())?;
    let speedup = report.speedup(size).ok_or("missing entries")?;
    let median = |mode: &str| {
        report
            .entries
            .iter()
            .find(|e| e.mode.as_str() == mode)
            .map(|e| e.median_ns())
            .unwrap_or(0)
    };
    let (d, s) = (median("dense"), median("sparse24"));
    ensure(
        s < d,
        format!("sparse median {s} ns not below dense {d} ns"),
    )?;
    Ok(format!(
        "1024^3 dense {:.3} s, 2:4 sparse {:.3} s, measured ratio {speedup:.2}",
        d as f64 * 1e-9,
        s as f64 * 1e-9
    ))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("convolution equivalence", conv_equivalence),
        ("sparsity invariant", sparsity_invariant),
        ("FLOP model", flop_model),
        ("Gumbel-Max fidelity", gumbel_fidelity),
        ("gradient correctness", gradient_correctness),
        ("desk-scale accuracy retention", accuracy_retention),
        ("desk-scale mask ordering", mask_ordering),
        ("certificate soundness", certificate_soundness),
        ("bound arithmetic", bound_arithmetic),
        ("frozen-weights contract", frozen_weights),
        ("format round trips", format_roundtrips),
        ("benchmark sanity", benchmark_sanity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
