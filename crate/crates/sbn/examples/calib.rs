// Scratch calibration harness (not part of the deliverable): explores blob-task
// and sharding configurations so the acceptance thresholds can be pinned.

use sbn::analysis::{mean_offdiag_abs, pearson_matrix};
use sbn::microbn::{run_microbn, MicroBnConfig, MicroBnPolicy};
use sbn::net::data::make_blob_dataset;
use sbn::net::{train, LayerSpec, NormSetting, TrainConfig};
use sbn::sampling::{SamplingStrategy, StrategyKind};

fn specs(channels: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut s = Vec::new();
    for &c in channels {
        s.push(LayerSpec::Conv3x3 { out_c: c });
        s.push(LayerSpec::Bn);
        s.push(LayerSpec::Relu);
    }
    s.push(LayerSpec::GlobalAvgPool);
    s.push(LayerSpec::Dense { out_dim: classes });
    s
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("conv");

    let classes = 4usize;
    let noise = 0.45f64;
    let hw = 16usize;
    let channels = [4usize, 4, 4];
    let batch = 32usize;
    let lr = 0.1f64;
    let seeds = [1u64, 2, 3, 4, 5];

    let model = specs(&channels, classes);

    if which == "sweep" {
        // strategy comparison at the frozen task parameters
        let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.45);
        let n_seeds: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
        let per_class = 256usize;
        let epochs = 50usize;
        let lr = 0.1f64;
        let fs = SamplingStrategy::new(StrategyKind::Fs, 1.0 / 16.0).unwrap();
        let bs = SamplingStrategy::new(StrategyKind::Bs, 1.0 / 16.0).unwrap();
        let ns = SamplingStrategy::new(StrategyKind::Ns, 1.0 / 32.0).unwrap();
        for (name, setting) in [
            ("full", NormSetting::Strategy(SamplingStrategy::full())),
            ("fs", NormSetting::Strategy(fs)),
            ("vdnmix", NormSetting::Vdn { n_v: 1, mixed: Some((fs, 0.5)) }),
            ("bs", NormSetting::Strategy(bs)),
            ("ns", NormSetting::Strategy(ns)),
        ] {
            let mut accs = Vec::new();
            for &seed in &seeds[0..n_seeds] {
                let ds = make_blob_dataset(classes, per_class, 16, 16, noise, seed).unwrap();
                let mut cfg = TrainConfig::basic(epochs, batch, lr, seed, setting.clone());
                cfg.lr_decay_epochs = vec![epochs * 3 / 4, epochs * 9 / 10];
                cfg.decay = 0.7;
                let report = train(&model, &ds, &cfg).unwrap();
                accs.push(report.final_val_acc);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!("{name:>7}: mean {mean:.4} {accs:?}");
        }
    }

    if which == "emu" {
        // estimation errors per strategy on raw blob batches
        use sbn::analysis::estimation_errors;
        use sbn::rng::{RngStream, StreamPurpose};
        use sbn::tensor::{channel_moments, full_index_set};
        use sbn::sampling::{make_plan, plan_indices};
        let noise = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5f64);
        let ds = make_blob_dataset(classes, 96, 16, 16, noise, 1).unwrap();
        let n = 32usize;
        let dims = [(n, 16usize, 16usize, 1usize)];
        let fs = SamplingStrategy::new(StrategyKind::Fs, 1.0 / 16.0).unwrap();
        let bs = SamplingStrategy::new(StrategyKind::Bs, 1.0 / 16.0).unwrap();
        let ns = SamplingStrategy::new(StrategyKind::Ns, 1.0 / 32.0).unwrap();
        let mut sums = [0.0f64; 6];
        let trials = 200usize;
        for t in 0..trials {
            // random batch of 32 from the train split
            let mut rng = RngStream::new(t as u64).substream(0, 0, StreamPurpose::Shuffle);
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..ds.train.n()).collect();
            order.shuffle(&mut rng);
            let mut data = Vec::new();
            for &i in order[0..n].iter() {
                data.extend_from_slice(
                    &ds.train.data()[i * 256..(i + 1) * 256],
                );
            }
            let x = sbn::tensor::Tensor4::new(n, 16, 16, 1, data).unwrap();
            let full = channel_moments(&x, &full_index_set(&x)).unwrap();
            for (slot, strategy) in [(0usize, fs), (2, bs), (4, ns)] {
                let plan = make_plan(strategy, &dims, t as u64, &RngStream::new(50 + slot as u64)).unwrap();
                let stats = channel_moments(&x, &plan_indices(&plan, 0).unwrap()).unwrap();
                let (e_mu, e_sigma) = estimation_errors(&stats, &full).unwrap();
                sums[slot] += e_mu;
                sums[slot + 1] += e_sigma;
            }
        }
        println!("noise {noise} mean E_mu / E_sigma over {trials} batches:");
        println!("  fs: {:.4} / {:.4}", sums[0] / trials as f64, sums[1] / trials as f64);
        println!("  bs: {:.4} / {:.4}", sums[2] / trials as f64, sums[3] / trials as f64);
        println!("  ns: {:.4} / {:.4}", sums[4] / trials as f64, sums[5] / trials as f64);
    }

    if which == "fstrace" {
        let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
        let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
        let per_class: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(96);
        let epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(40);
        let ma_decay: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.9);
        let batch: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(batch);
        let fs = SamplingStrategy::new(StrategyKind::Fs, 1.0 / 16.0).unwrap();
        for (name, setting) in [
            ("full", NormSetting::Strategy(SamplingStrategy::full())),
            ("fs", NormSetting::Strategy(fs)),
        ] {
            let mut accs = Vec::new();
            let mut tail5 = Vec::new();
            for seed in [1u64, 2] {
                let ds = make_blob_dataset(classes, per_class, 16, 16, noise, seed).unwrap();
                let mut cfg = TrainConfig::basic(epochs, batch, lr, seed, setting.clone());
                cfg.lr_decay_epochs = vec![epochs * 3 / 4, epochs * 9 / 10];
                cfg.decay = ma_decay;
                let report = train(&model, &ds, &cfg).unwrap();
                accs.push(report.final_val_acc);
                let tail: Vec<f64> = report
                    .metrics
                    .iter()
                    .rev()
                    .take(5)
                    .map(|m| m.val_acc)
                    .collect();
                tail5.push(tail.iter().sum::<f64>() / tail.len() as f64);
                if name == "fs" {
                    let last: Vec<String> = report
                        .metrics
                        .iter()
                        .rev()
                        .take(8)
                        .map(|m| format!("{:.3}", m.val_acc))
                        .collect();
                    println!("   fs seed {seed} last epochs: {last:?}");
                }
            }
            println!("{name:>5}: final {accs:?} tail5 {tail5:?}");
        }
    }

    if which == "vartrace" {
        use sbn::net::{forward_single, Model, NormContext};
        use sbn::rng::RngStream;
        use sbn::sampling::make_plan;
        let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.3);
        let fs = SamplingStrategy::new(StrategyKind::Fs, 1.0 / 16.0).unwrap();
        let ds = make_blob_dataset(classes, 96, 16, 16, noise, 1).unwrap();
        let stream = RngStream::new(1);
        let m = Model::build(&model, (16, 16, 1), 1e-5, 0.9, &stream).unwrap();
        let x = ds.train.slice_samples(0, 32).unwrap();
        let dims = m.bn_dims(32);
        for epoch in 0..6u64 {
            let plan = make_plan(fs, &dims, epoch, &stream).unwrap();
            let ctx = NormContext { plan: Some(&plan), vdn: None };
            let fwd = forward_single(&m, &x, &ctx, true).unwrap();
            for (layer, (used, full)) in fwd
                .used_stats
                .iter()
                .zip(fwd.full_stats.as_ref().unwrap())
                .enumerate()
            {
                let min_used = used.variance.iter().cloned().fold(f64::INFINITY, f64::min);
                let min_full = full.variance.iter().cloned().fold(f64::INFINITY, f64::min);
                println!(
                    "epoch {epoch} bn{layer}: min used var {min_used:.3e} vs full {min_full:.3e}"
                );
            }
        }
    }

    if which == "itertrace" {
        use sbn::batchnorm::update_moving_average;
        use sbn::net::{
            backward_nodes, forward_single, softmax_cross_entropy, Layer, Model, NormContext,
        };
        use sbn::rng::{RngStream, StreamPurpose};
        use sbn::sampling::make_plan;
        use sbn::tensor::pairwise_sum;
        let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.3);
        let lr = 0.1f64;
        let fs = SamplingStrategy::new(StrategyKind::Fs, 1.0 / 16.0).unwrap();
        let ds = make_blob_dataset(classes, 96, 16, 16, noise, 1).unwrap();
        let stream = RngStream::new(1);
        let mut m = Model::build(&model, (16, 16, 1), 1e-5, 0.9, &stream).unwrap();
        let dims = m.bn_dims(32);
        let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for _ in 0..m.layers.len() {
            velocity.push((Vec::new(), Vec::new()));
        }
        use rand::seq::SliceRandom;
        for epoch in 0..3u64 {
            let plan = make_plan(fs, &dims, epoch, &stream).unwrap();
            let mut order: Vec<usize> = (0..ds.train.n()).collect();
            order.shuffle(&mut stream.substream(epoch, 0, StreamPurpose::Shuffle));
            for it in 0..order.len() / 32 {
                let slice = &order[it * 32..(it + 1) * 32];
                let mut data = Vec::new();
                let mut labels = Vec::new();
                for &i in slice {
                    data.extend_from_slice(&ds.train.data()[i * 256..(i + 1) * 256]);
                    labels.push(ds.train_labels[i]);
                }
                let x = sbn::tensor::Tensor4::new(32, 16, 16, 1, data).unwrap();
                let ctx = NormContext { plan: Some(&plan), vdn: None };
                let fwd = forward_single(&m, &x, &ctx, false).unwrap();
                let (losses, mut d_logits) = softmax_cross_entropy(&fwd.logits, &labels).unwrap();
                let loss = pairwise_sum(&losses).unwrap() / losses.len() as f64;
                for v in d_logits.data_mut() {
                    *v /= losses.len() as f64;
                }
                let (grads, _) = backward_nodes(
                    &m,
                    std::slice::from_ref(&fwd.caches),
                    vec![d_logits],
                    |_, p| Ok(p.to_vec()),
                )
                .unwrap();
                let gnorm: f64 = grads
                    .blocks
                    .iter()
                    .flat_map(|(a, b)| a.iter().chain(b.iter()))
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                // manual sgd with momentum
                for (layer_pos, layer) in m.layers.iter_mut().enumerate() {
                    let (gm, gb) = &grads.blocks[layer_pos];
                    let (vm, vb) = &mut velocity[layer_pos];
                    if vm.len() != gm.len() {
                        *vm = vec![0.0; gm.len()];
                        *vb = vec![0.0; gb.len()];
                    }
                    let (pm, pb): (&mut [f64], &mut [f64]) = match layer {
                        Layer::Conv(c) => (&mut c.weights, &mut c.bias),
                        Layer::Dense(d) => (&mut d.weights, &mut d.bias),
                        Layer::Bn { state, .. } => (&mut state.gamma, &mut state.beta),
                        _ => continue,
                    };
                    for ((p, v), g) in pm.iter_mut().zip(vm.iter_mut()).zip(gm) {
                        *v = 0.9 * *v - lr * g;
                        *p += *v;
                    }
                    for ((p, v), g) in pb.iter_mut().zip(vb.iter_mut()).zip(gb) {
                        *v = 0.9 * *v - lr * g;
                        *p += *v;
                    }
                }
                let mut stats_iter = fwd.used_stats.iter();
                for layer in &mut m.layers {
                    if let Layer::Bn { state, .. } = layer {
                        update_moving_average(state, stats_iter.next().unwrap()).unwrap();
                    }
                }
                println!("epoch {epoch} it {it}: loss {loss:.4} gnorm {gnorm:.3e}");
            }
        }
    }


    if which == "micro" {
        let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.45);
        let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
        let per_class = 256usize;
        for (name, policy) in [
            ("local", MicroBnPolicy::Local),
            (
                "local_vdn",
                MicroBnPolicy::LocalVdn { n_v: 1, mixed: true, mix: 0.5 },
            ),
            ("sync_full", MicroBnPolicy::SyncFull),
        ] {
            let mut accs = Vec::new();
            for &seed in &seeds {
                let ds = make_blob_dataset(classes, per_class, hw, hw, noise, seed).unwrap();
                let mut cfg = TrainConfig::basic(
                    epochs,
                    64,
                    lr,
                    seed,
                    NormSetting::Strategy(SamplingStrategy::full()),
                );
                cfg.lr_decay_epochs = vec![epochs * 3 / 4, epochs * 9 / 10];
                let mbn = MicroBnConfig {
                    gradient_batch: 64,
                    statistic_batch: 4,
                    policy,
                };
                let report = run_microbn(&model, &ds, &mbn, &cfg).unwrap();
                accs.push(report.final_val_acc);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!("{name:>10}: mean {mean:.4} accs {accs:?}");
        }
        // bitwise: sync_full at (64, 4) vs plain single-tensor training
        let seed = 9u64;
        let ds = make_blob_dataset(classes, per_class, hw, hw, noise, seed).unwrap();
        let cfg = TrainConfig::basic(
            3,
            64,
            lr,
            seed,
            NormSetting::Strategy(SamplingStrategy::full()),
        );
        let plain = train(&model, &ds, &cfg).unwrap();
        let sharded = run_microbn(
            &model,
            &ds,
            &MicroBnConfig {
                gradient_batch: 64,
                statistic_batch: 4,
                policy: MicroBnPolicy::SyncFull,
            },
            &cfg,
        )
        .unwrap();
        let bitwise = plain
            .metrics
            .iter()
            .zip(&sharded.metrics)
            .all(|(a, b)| a.train_loss.to_bits() == b.train_loss.to_bits()
                && a.val_acc.to_bits() == b.val_acc.to_bits());
        println!("sync_full bitwise == plain: {bitwise}");
    }

    if which == "corr" {
        let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.45);
        let per_class = 256usize;
        let ratio = 1.0 / 8.0;
        for kind in [StrategyKind::Ns, StrategyKind::Bs] {
            let strategy = SamplingStrategy::new(kind, ratio).unwrap();
            let mut offdiags = Vec::new();
            for &seed in &seeds {
                let ds = make_blob_dataset(classes, per_class, hw, hw, noise, seed).unwrap();
                let mut cfg =
                    TrainConfig::basic(2, batch, lr, seed, NormSetting::Strategy(strategy));
                cfg.decay = 0.7;
                cfg.record_errors = true;
                let report = train(&model, &ds, &cfg).unwrap();
                let matrix = pearson_matrix(report.trace.as_ref().unwrap(), false).unwrap();
                offdiags.push(mean_offdiag_abs(&matrix));
            }
            let mean = offdiags.iter().sum::<f64>() / offdiags.len() as f64;
            println!("{kind:?}: mean offdiag {mean:.4} per-seed {offdiags:?}");
        }
    }
}
