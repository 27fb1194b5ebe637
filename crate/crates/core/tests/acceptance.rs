//! Acceptance suite. Runs every criterion at its stated tolerance and runtime
//! budget, prints one PASS/FAIL line each, and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dacx::corpus::{generate_corpus, split, Corpus, CorpusSpec, Provenance, Split, TaskSchema, PAD};
use dacx::dac::{self, dac_loss, dac_loss_logits, ntask_loss_logits, DacConfig, EpochMetrics, TunerState};
use dacx::explain::{
    aggregate_words, explain_reports, grad_input, grad_input_weights, perturbation_explain, sign_agreement,
    Explainable, LinearBagModel, TargetKind, TargetScore,
};
use dacx::global_xai::{self, AleMatrix, CohortSpec, RowMeta};
use dacx::metrics;
use dacx::mtcnn::Model;
use dacx::nn::{self, Architecture, LayerParams, NumArray};
use dacx::pipeline::{self, PipelineConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn task_names(corpus: &Corpus) -> Vec<String> {
    corpus.schemas.iter().map(|s| s.name.clone()).collect()
}

fn train_on(corpus: &Corpus, sp: &Split, cfg: &DacConfig, model_seed: u64) -> Result<dac::TrainOutcome, String> {
    let arch = Architecture::desk(corpus.vocab.len(), corpus.class_counts());
    let model = Model::init(arch, task_names(corpus), model_seed).map_err(err)?;
    dac::train(model, corpus, sp, cfg).map_err(err)
}

// 1 ------------------------------------------------------------------------

fn loss_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..9);
        // Exponential draws normalised: a uniform point on the simplex.
        let mut p: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        p.push(0.0);
        let y = rng.gen_range(0..k);
        let alpha = rng.gen_range(0.01..10.0);
        let (l, _) = dac_loss(&p, y, alpha).map_err(err)?;
        worst = worst.max((l + p[y].ln()).abs());
    }
    let (a, _) = dac_loss(&[0.6, 0.3, 0.1], 0, 0.5).map_err(err)?;
    let (b, _) = dac_loss(&[0.05, 0.05, 0.9], 0, 1.0).map_err(err)?;
    let a_ref = 0.9 * -(0.6f64 / 0.9).ln() + 0.5 * (1.0f64 / 0.9).ln();
    let b_ref = 0.1 * -(0.5f64).ln() + 10f64.ln();
    let ok = worst < 1e-12
        && (a - a_ref).abs() < 1e-9
        && (b - b_ref).abs() < 1e-9
        && (a - 0.417599).abs() < 5e-7
        && (b - 2.371900).abs() < 5e-7;
    ensure(
        ok,
        format!("max |L - CE| = {worst:.1e}; examples {a:.6} (ref {a_ref:.6}), {b:.6} (ref {b_ref:.6})"),
    )
}

// 2 ------------------------------------------------------------------------

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

const H: f64 = 1e-5;

fn fd_logits(z: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut zz = z.to_vec();
    for i in 0..z.len() {
        zz[i] = z[i] + H;
        let fp = f(&zz);
        zz[i] = z[i] - H;
        let fm = f(&zz);
        zz[i] = z[i];
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * H)));
    }
    worst
}

fn tiny_arch(dummy_task: bool) -> Architecture {
    Architecture {
        vocab_size: 20,
        embed_dim: 4,
        filter_sizes: vec![3, 4, 5],
        n_filters: 2,
        hidden: 5,
        task_classes: vec![3, 2],
        dummy_task,
    }
}

struct Trial {
    tokens: Vec<usize>,
    labels: Vec<usize>,
    alphas: Vec<f64>,
    dummy_alpha: Option<f64>,
}

impl Trial {
    fn loss(&self, fwd: &nn::Forward) -> (f64, Vec<Vec<f64>>, Option<Vec<f64>>) {
        match (self.dummy_alpha, &fwd.dummy_logits) {
            (Some(da), Some(dz)) => {
                let out = ntask_loss_logits(&fwd.logits, &self.labels, &self.alphas, dz, da).unwrap();
                (out.total, out.task_grads, Some(out.dummy_grad))
            }
            _ => {
                let mut total = 0.0;
                let mut grads = Vec::new();
                for (t, z) in fwd.logits.iter().enumerate() {
                    let (l, g) = dac_loss_logits(z, self.labels[t], self.alphas[t]).unwrap();
                    total += l;
                    grads.push(g);
                }
                (total, grads, None)
            }
        }
    }
}

fn gradient_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_loss, mut worst_net, mut worst_input): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0usize, 0usize);
    for trial in 0..50 {
        // softmax ∘ per-task loss and softmax ∘ N-task loss, in logit space.
        let k = rng.gen_range(2..6);
        let z: Vec<f64> = (0..=k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = rng.gen_range(0..k);
        let alpha = rng.gen_range(0.1..3.0);
        let (_, g) = dac_loss_logits(&z, y, alpha).map_err(err)?;
        worst_loss = worst_loss.max(fd_logits(&z, &g, |zz| dac_loss_logits(zz, y, alpha).unwrap().0));

        let zs: Vec<Vec<f64>> = [4usize, 3]
            .iter()
            .map(|&n| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let dz: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys = [rng.gen_range(0..3), rng.gen_range(0..2)];
        let als = [rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)];
        let da = rng.gen_range(0.1..3.0);
        let out = ntask_loss_logits(&zs, &ys, &als, &dz, da).map_err(err)?;
        for t in 0..2 {
            let f = |zz: &[f64]| {
                let mut all = zs.clone();
                all[t] = zz.to_vec();
                ntask_loss_logits(&all, &ys, &als, &dz, da).unwrap().total
            };
            worst_loss = worst_loss.max(fd_logits(&zs[t], &out.task_grads[t], f));
        }
        worst_loss = worst_loss.max(fd_logits(&dz, &out.dummy_grad, |d| {
            ntask_loss_logits(&zs, &ys, &als, d, da).unwrap().total
        }));

        // Full network, alternating per-task and N-task objectives.
        let ntask = trial % 2 == 1;
        let arch = tiny_arch(ntask);
        let mut params = LayerParams::init(&arch, &mut rng);
        let len = rng.gen_range(5..13);
        let t = Trial {
            tokens: (0..len).map(|_| rng.gen_range(1..20)).collect(),
            labels: vec![rng.gen_range(0..3), rng.gen_range(0..2)],
            alphas: vec![rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)],
            dummy_alpha: ntask.then(|| rng.gen_range(0.2..3.0)),
        };
        let objective = |p: &LayerParams| {
            let fwd = nn::forward(p, &t.tokens).unwrap();
            (t.loss(&fwd).0, fwd.cache)
        };
        let fwd = nn::forward(&params, &t.tokens).map_err(err)?;
        let (_, dl, dd) = t.loss(&fwd);
        let back = nn::backward(&params, &fwd.cache, &dl, dd.as_deref()).map_err(err)?;
        let base = fwd.cache;
        for ti in 0..params.tensors().len() {
            for i in 0..params.tensors()[ti].len() {
                let orig = params.tensors()[ti].data()[i];
                params.tensors_mut()[ti].data_mut()[i] = orig + H;
                let (fp, cp) = objective(&params);
                params.tensors_mut()[ti].data_mut()[i] = orig - H;
                let (fm, cm) = objective(&params);
                params.tensors_mut()[ti].data_mut()[i] = orig;
                if !(cp.same_path(&base) && cm.same_path(&base)) {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                worst_net = worst_net.max(rel_err(back.params.tensors()[ti].data()[i], (fp - fm) / (2.0 * H)));
            }
        }
        // Gradient with respect to the looked-up embeddings.
        let mut emb = base.embedded.clone();
        for i in 0..emb.len() {
            let orig = emb.data()[i];
            let mut eval = |v: f64| {
                emb.data_mut()[i] = v;
                let f = nn::forward_embedded(&params, base.tokens.clone(), emb.clone()).unwrap();
                (t.loss(&f).0, f.cache)
            };
            let (fp, cp) = eval(orig + H);
            let (fm, cm) = eval(orig - H);
            emb.data_mut()[i] = orig;
            if !(cp.same_path(&base) && cm.same_path(&base)) {
                skipped += 1;
                continue;
            }
            checked += 1;
            worst_input = worst_input.max(rel_err(back.input.data()[i], (fp - fm) / (2.0 * H)));
        }
    }
    let worst = worst_loss.max(worst_net).max(worst_input);
    ensure(
        worst < 1e-4,
        format!(
            "max rel err: loss {worst_loss:.1e}, network {worst_net:.1e}, input {worst_input:.1e} \
             ({checked} coordinates, {skipped} kink crossings skipped)"
        ),
    )
}

// 3 ------------------------------------------------------------------------

/// Analytic classifier: abstention falls with α, retained accuracy rises with abstention.
fn simulated(alpha: f64) -> EpochMetrics {
    let abstention = 1.0 / (1.0 + alpha.sqrt());
    EpochMetrics {
        retained_accuracy: Some(1.0 - 0.25 * (-4.0 * abstention).exp()),
        abstention,
    }
}

fn clean_corpus() -> Result<(Corpus, Split), String> {
    let corpus = generate_corpus(&CorpusSpec::pathology(2000, 31)).map_err(err)?;
    let sp = split(&corpus.reports, (0.8, 0.1, 0.1), 32).map_err(err)?;
    Ok((corpus, sp))
}

fn tuner_convergence(clean: &mut Option<(Corpus, Split, Model)>) -> Check {
    let mut entered = Vec::new();
    for target in [0.80, 0.90, 0.975] {
        let cfg = DacConfig {
            accuracy_target: target,
            ..DacConfig::default()
        };
        let mut tuner = TunerState::new(&["sim".to_string()], &[1.0], &cfg);
        let mut hit = None;
        for it in 0..50 {
            let m = simulated(tuner.alphas()[0]);
            let acc = m.retained_accuracy.unwrap();
            if (acc - target).abs() <= cfg.accuracy_band {
                hit = Some(it);
                break;
            }
            tuner.update(it, &[m]);
        }
        entered.push((target, hit));
    }
    let sim_ok = entered.iter().all(|(_, h)| h.is_some());
    let sim = entered
        .iter()
        .map(|(t, h)| format!("{t}: {}", h.map_or("never".to_string(), |i| format!("iter {i}"))))
        .collect::<Vec<_>>()
        .join(", ");

    let (corpus, sp) = clean_corpus()?;
    let cfg = DacConfig::for_floor(0.97);
    let out = train_on(&corpus, &sp, &cfg, 33)?;
    let epochs = out.log.iter().map(|l| l.epoch + 1).max().unwrap_or(0);
    let test = corpus.select(&sp.test).map_err(err)?;
    let metrics = dac::evaluate(&out.model, &test).map_err(err)?;
    let train_ok = epochs <= 30
        && metrics
            .iter()
            .all(|m| m.retained_accuracy.is_some_and(|a| a >= cfg.accuracy_target) && m.abstention < 0.05);
    let per_task = metrics
        .iter()
        .zip(task_names(&corpus))
        .map(|(m, n)| {
            format!(
                "{n} acc {} abst {:.3}",
                metrics::fmt_opt(m.retained_accuracy),
                m.abstention
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    *clean = Some((corpus, sp, out.model));
    ensure(
        sim_ok && train_ok,
        format!("simulated band entry {sim}; clean corpus after {epochs} epochs: {per_task}"),
    )
}

// 4 ------------------------------------------------------------------------

fn noisy_corpus(seed: u64) -> Result<(Corpus, Split), String> {
    let mut spec = CorpusSpec::pathology(3000, seed);
    spec.noise_rate = 0.15;
    let corpus = generate_corpus(&spec).map_err(err)?;
    let sp = split(&corpus.reports, (0.6, 0.2, 0.2), seed + 1).map_err(err)?;
    Ok((corpus, sp))
}

fn noise_targeted_abstention() -> Check {
    let rows = [1u64, 2, 3]
        .par_iter()
        .map(|&seed| -> Result<(u64, f64, f64), String> {
            let (corpus, sp) = noisy_corpus(seed)?;
            let out = train_on(&corpus, &sp, &DacConfig::for_floor(0.97), seed + 2)?;
            let test = corpus.select(&sp.test).map_err(err)?;
            let preds = out.model.predict_reports(&test).map_err(err)?;
            let mut tally: BTreeMap<Provenance, (usize, usize)> = BTreeMap::new();
            for (p, r) in preds.iter().zip(&test) {
                let e = tally.entry(r.provenance).or_default();
                e.0 += 1;
                e.1 += usize::from(p.tasks.iter().any(|o| o.abstained));
            }
            let rate = |pv| tally.get(&pv).map_or(0.0, |&(n, a)| a as f64 / n.max(1) as f64);
            Ok((seed, rate(Provenance::LabelNoise), rate(Provenance::Clean)))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let ok = rows
        .iter()
        .all(|&(_, noise, clean)| noise > 0.0 && noise >= 2.0 * clean);
    let detail = rows
        .iter()
        .map(|(s, n, c)| format!("seed {s}: noise {n:.3} vs clean {c:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(ok, detail)
}

// 5 ------------------------------------------------------------------------

fn tradeoff_trend() -> Check {
    let (corpus, sp) = noisy_corpus(1)?;
    let arch = Architecture::desk(corpus.vocab.len(), corpus.class_counts());
    let targets = metrics::default_targets();
    let points = metrics::tradeoff_sweep(&corpus, &sp, &arch, &DacConfig::default(), 3, &targets).map_err(err)?;
    let abst: Vec<f64> = points.iter().map(|p| p.abstention).collect();
    let rising = abst.last() > abst.first();
    let monotone = abst.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let seq = points
        .iter()
        .map(|p| format!("{:.3}:{:.3}", p.target, p.abstention))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(rising && monotone, format!("target:abstention {seq}"))
}

// 6 ------------------------------------------------------------------------

fn report(id: usize, tokens: Vec<usize>) -> dacx::corpus::TokenizedReport {
    dacx::corpus::TokenizedReport {
        id,
        tokens,
        labels: vec![0],
        provenance: Provenance::Clean,
    }
}

fn grad_input_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (vocab, dim, outputs) = (30, 6, 4);
    let model = LinearBagModel::random(vocab, dim, outputs, &mut rng);
    let c = model.centroid();
    let mut worst: f64 = 0.0;
    for id in 0..100 {
        let len = rng.gen_range(1..25);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let class = rng.gen_range(0..outputs);
        for score in [TargetScore::Logit, TargetScore::Probability] {
            let w = grad_input_weights(&model, &tokens, 0, class, score).map_err(err)?;
            // d score / d z_j, then the closed form Σ_j g_j (E_t - c)·v_j.
            let z = model.logits(&tokens).map_err(err)?;
            let g: Vec<f64> = match score {
                TargetScore::Logit => (0..outputs).map(|j| f64::from(u8::from(j == class))).collect(),
                TargetScore::Probability => {
                    let p = nn::softmax(&z);
                    (0..outputs)
                        .map(|j| {
                            if j == class {
                                p[class] * (1.0 - p[j])
                            } else {
                                -p[class] * p[j]
                            }
                        })
                        .collect()
                }
            };
            for (p, &t) in tokens.iter().enumerate() {
                let expect = if t == PAD {
                    0.0
                } else {
                    let e = model.embedding.row(t);
                    (0..outputs)
                        .map(|j| {
                            g[j] * e
                                .iter()
                                .zip(&c)
                                .zip(&model.directions[j])
                                .map(|((e, c), v)| (e - c) * v)
                                .sum::<f64>()
                        })
                        .sum()
                };
                worst = worst.max((w[p] - expect).abs());
            }
        }
        let _ = id;
    }

    // A table built from ± pairs has centroid exactly 0; the odd row out sits on it.
    let mut emb = NumArray::zeros(&[vocab, dim]);
    for i in (1..vocab - 1).step_by(2) {
        let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        emb.row_mut(i).copy_from_slice(&row);
        let neg: Vec<f64> = row.iter().map(|x| -x).collect();
        emb.row_mut(i + 1).copy_from_slice(&neg);
    }
    let centre = vocab - 1;
    let linear = LinearBagModel {
        embedding: emb.clone(),
        ..model.clone()
    };
    let tokens = vec![3, centre, 8, centre, 11];
    let lin_w = grad_input(
        &linear,
        &report(0, tokens.clone()),
        0,
        TargetKind::TopPrediction,
        TargetScore::Probability,
    )
    .map_err(err)?
    .weights;
    let arch = Architecture::desk(vocab, vec![3]);
    let mut cnn = Model::init(arch, vec!["t".into()], 7).map_err(err)?;
    cnn.params.embedding = emb;
    let cnn_w = grad_input(
        &cnn,
        &report(1, tokens),
        0,
        TargetKind::TopPrediction,
        TargetScore::Probability,
    )
    .map_err(err)?
    .weights;
    let centroid_zero =
        [lin_w[1], lin_w[3], cnn_w[1], cnn_w[3]].iter().all(|&w| w == 0.0) && cnn.centroid().iter().all(|&x| x == 0.0);
    ensure(
        worst < 1e-10 && centroid_zero,
        format!("max |attr - closed form| = {worst:.1e}; centroid-token weights exactly 0: {centroid_zero}"),
    )
}

// 7 ------------------------------------------------------------------------

fn explainer_cross_check(clean: &Option<(Corpus, Split, Model)>) -> Check {
    let (corpus, sp, model) = clean
        .as_ref()
        .ok_or("clean model unavailable (criterion 3 failed early)")?;
    let reports = corpus.select(&sp.test[..50]).map_err(err)?;
    let task = 1;
    let pairs = reports
        .par_iter()
        .map(|r| {
            let out = model.task_output(&r.tokens, task).map_err(err)?;
            let class = out.answer();
            let g = grad_input_weights(model, &r.tokens, task, class, TargetScore::Probability).map_err(err)?;
            let p = perturbation_explain(
                model,
                &r.tokens,
                task,
                class,
                1000,
                r.id as u64,
                TargetScore::Probability,
            )
            .map_err(err)?;
            Ok((
                aggregate_words(r.id, &r.tokens, &g, &corpus.vocab),
                aggregate_words(r.id, &r.tokens, &p, &corpus.vocab),
            ))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let agreement = sign_agreement(&a, &b).map_err(err)?;
    ensure(
        agreement >= 0.8,
        format!("top-decile sign agreement {agreement:.3} on 50 reports"),
    )
}

// 8 ------------------------------------------------------------------------

fn ale_from(rows: usize, cols: usize, values: Vec<f64>) -> AleMatrix {
    AleMatrix {
        rows: (0..rows)
            .map(|i| RowMeta {
                report_id: i,
                truth: 0,
                prediction: 0,
                provenance: Provenance::Clean,
                target_kind: TargetKind::TopPrediction,
            })
            .collect(),
        words: (0..cols).map(|j| format!("w{j:02}")).collect(),
        values,
    }
}

fn pca_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut val_err, mut vec_err, mut trace_err, mut var_err): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut shapes = Vec::new();
    for i in 0..20 {
        let (n, m) = if i == 0 {
            (100, 50)
        } else {
            (rng.gen_range(3..=100), rng.gen_range(2..=50))
        };
        shapes.push((n, m));
        let scales: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..3.0)).collect();
        let values: Vec<f64> = (0..n * m).map(|k| scales[k % m] * rng.gen_range(-1.0..1.0)).collect();
        let ale = ale_from(n, m, values.clone());
        let res = global_xai::pca(&ale, 0.9).map_err(err)?;

        let x = DMatrix::from_row_slice(n, m, &values);
        let mean = x.row_mean();
        let centred = DMatrix::from_fn(n, m, |r, c| x[(r, c)] - mean[c]);
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov.clone());
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
        for (c, &o) in order.iter().enumerate() {
            let lambda = eig.eigenvalues[o];
            val_err = val_err.max((res.eigenvalues[c] - lambda).abs());
            // Eigenvectors are only unique (up to sign) for isolated eigenvalues.
            let gap = order
                .iter()
                .filter(|&&p| p != o)
                .map(|&p| (eig.eigenvalues[p] - lambda).abs())
                .fold(f64::INFINITY, f64::min);
            if gap > 1e-6 * scale {
                let mut v: Vec<f64> = eig.eigenvectors.column(o).iter().copied().collect();
                global_xai::fix_sign(&mut v);
                let d = v
                    .iter()
                    .zip(&res.eigenvectors[c])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                vec_err = vec_err.max(d);
            }
            // Residual ‖C v − λ v‖ covers the degenerate ones too.
            let v = nalgebra::DVector::from_column_slice(&res.eigenvectors[c]);
            let r = (&cov * &v - &v * res.eigenvalues[c]).amax();
            vec_err = vec_err.max(r);
        }
        let sum: f64 = res.eigenvalues.iter().sum();
        trace_err = trace_err.max((sum - cov.trace()).abs());
        for c in 0..res.retained {
            let proj: Vec<f64> = res.projections.iter().map(|p| p[c]).collect();
            let mu = proj.iter().sum::<f64>() / n as f64;
            let var = proj.iter().map(|p| (p - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let lambda = res.eigenvalues[c];
            var_err = var_err.max((var - lambda).abs() / lambda.abs().max(1e-12));
        }
    }
    let ok = val_err < 1e-8 && vec_err < 1e-8 && trace_err < 1e-8 && var_err < 1e-6;
    ensure(
        ok,
        format!(
            "20 matrices up to {:?}: eigenvalue err {val_err:.1e}, eigenvector err {vec_err:.1e}, \
             trace err {trace_err:.1e}, projection variance rel err {var_err:.1e}",
            shapes.iter().max().unwrap()
        ),
    )
}

// 9 ------------------------------------------------------------------------

const CLASS_KEYWORDS: [&str; 4] = ["melanoma", "sarcoma", "lymphoma", "glioma"];

fn keyword_corpus(seed: u64) -> Result<Corpus, String> {
    let schema = TaskSchema {
        name: "tumor".into(),
        classes: CLASS_KEYWORDS.iter().map(|k| format!("class_{k}")).collect(),
        keywords: CLASS_KEYWORDS.iter().map(|k| vec![k.to_string()]).collect(),
        hierarchy: vec![],
        parent: None,
    };
    let spec = CorpusSpec {
        schemas: vec![schema],
        class_prior: vec![vec![0.25; 4]],
        ..CorpusSpec::pathology(1200, seed)
    };
    generate_corpus(&spec).map_err(err)
}

fn pattern_recovery() -> Check {
    let rows = [1u64, 2, 3]
        .par_iter()
        .map(|&seed| -> Result<(u64, usize, f64, f64), String> {
            let corpus = keyword_corpus(seed)?;
            let sp = split(&corpus.reports, (0.6, 0.2, 0.2), seed + 1).map_err(err)?;
            let out = train_on(&corpus, &sp, &DacConfig::for_floor(0.97), seed + 2)?;
            let test = corpus.select(&sp.test).map_err(err)?;
            let preds = out.model.predict_reports(&test).map_err(err)?;
            let expl = explain_reports(&out.model, &test, 0, &corpus.vocab, TargetScore::Probability).map_err(err)?;
            let spec = CohortSpec {
                gating_task: None,
                gating_classes: None,
                task: 0,
                classes: vec![0, 1, 2, 3],
                cap: 1000,
                abstained: false,
                seed: seed + 4,
            };
            let ale = global_xai::build_cohort(&test, &preds, &expl, &spec).map_err(err)?;
            let pca = global_xai::pca(&ale, 0.9).map_err(err)?;

            let mut ranked: Vec<(f64, &str)> = pca
                .words
                .iter()
                .enumerate()
                .map(|(j, w)| (pca.eigenvectors[0][j].abs() + pca.eigenvectors[1][j].abs(), w.as_str()))
                .collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            let top: Vec<&str> = ranked.iter().take(8).map(|r| r.1).collect();
            let found = CLASS_KEYWORDS.iter().filter(|k| top.contains(k)).count();

            let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
            for (meta, p) in pca.rows.iter().zip(&pca.projections) {
                groups.entry(meta.truth).or_default().push((p[0], p[1]));
            }
            let centroids: Vec<(f64, f64)> = groups
                .values()
                .map(|g| {
                    let n = g.len() as f64;
                    (
                        g.iter().map(|p| p.0).sum::<f64>() / n,
                        g.iter().map(|p| p.1).sum::<f64>() / n,
                    )
                })
                .collect();
            let sds: Vec<f64> = groups
                .values()
                .zip(&centroids)
                .map(|(g, c)| {
                    let ss: f64 = g.iter().map(|p| (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sum();
                    (ss / (g.len() as f64 - 1.0).max(1.0)).sqrt()
                })
                .collect();
            let mut seps = Vec::new();
            for i in 0..centroids.len() {
                for j in i + 1..centroids.len() {
                    seps.push(
                        ((centroids[i].0 - centroids[j].0).powi(2) + (centroids[i].1 - centroids[j].1).powi(2)).sqrt(),
                    );
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let (sep, sd) = (mean(&seps), mean(&sds));
            if groups.len() < 4 {
                return Err(format!("seed {seed}: only {} classes in the cohort", groups.len()));
            }
            Ok((seed, found, sep, sd))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let ok = rows
        .iter()
        .all(|&(_, found, sep, sd)| found == CLASS_KEYWORDS.len() && sep > 2.0 * sd);
    let detail = rows
        .iter()
        .map(|(s, f, sep, sd)| format!("seed {s}: {f}/4 keywords in top 8, separation {sep:.3} vs sd {sd:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(ok, detail)
}

// 10 -----------------------------------------------------------------------

fn smoke_config() -> Result<PipelineConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    PipelineConfig::load(&path).map_err(err)
}

fn pipeline_determinism() -> Check {
    let cfg = smoke_config()?;
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let start = Instant::now();
    let first = pipeline::run_pipeline(&cfg, a.path()).map_err(err)?;
    let elapsed = start.elapsed();
    let second = pipeline::run_pipeline(&cfg, b.path()).map_err(err)?;
    let differing: Vec<&String> = first
        .files
        .keys()
        .chain(second.files.keys())
        .filter(|k| first.files.get(*k) != second.files.get(*k))
        .collect();
    let svgs = first.files.keys().filter(|k| k.ends_with(".svg")).count();
    let clean_verify = first.verify(a.path()).map_err(err)?.is_empty();
    ensure(
        elapsed < Duration::from_secs(60) && differing.is_empty() && svgs > 0 && clean_verify,
        format!(
            "smoke run {:.2} s; {} artifacts ({svgs} SVG), {} differ on rerun",
            elapsed.as_secs_f64(),
            first.files.len(),
            differing.len()
        ),
    )
}

// -------------------------------------------------------------------------

fn main() {
    let mut clean = None;
    let mut failures = 0;
    let mut record = |id: u32, name: &str, budget: Duration, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = f();
        let t = start.elapsed();
        let over = t > budget;
        let (status, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {status} [{:>7.2} s] {name}: {detail}",
            t.as_secs_f64()
        );
    };
    let secs = Duration::from_secs;
    record(1, "loss correctness", secs(1), &mut loss_correctness);
    record(2, "gradient fidelity", secs(30), &mut gradient_fidelity);
    record(3, "tuner convergence", secs(300), &mut || tuner_convergence(&mut clean));
    record(
        4,
        "noise-targeted abstention",
        secs(600),
        &mut noise_targeted_abstention,
    );
    record(5, "trade-off trend", secs(1800), &mut tradeoff_trend);
    record(6, "grad x input exactness", secs(5), &mut grad_input_exactness);
    record(7, "explainer cross-check", secs(120), &mut || {
        explainer_cross_check(&clean)
    });
    record(8, "PCA correctness", secs(10), &mut pca_correctness);
    record(9, "global-pattern recovery", secs(600), &mut pattern_recovery);
    record(
        10,
        "pipeline determinism and smoke",
        secs(60),
        &mut pipeline_determinism,
    );
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
