use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use hwmnet::checks::{gradient_suite, self_check};
use hwmnet::cost::count_cost;
use hwmnet::data::{index_dataset, index_root, Image8};
use hwmnet::train::{evaluate, Checkpoint, TrainPair, Trainer, LOSS_CSV_HEADER};
use hwmnet::{Error, HwmNet, NetworkConfig};

use crate::settings::ConfigFile;
use crate::{EvalArgs, Failure, FlopsArgs, InferArgs, Outcome, TrainArgs};

/// Reference FLOP count for one 400x592 image.
const REFERENCE_FLOPS: f64 = 0.92e12;
const REFERENCE_SIZE: (usize, usize) = (400, 592);

const PROGRESS_EVERY: u64 = 100;

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::from(Error::io(path, e))
}

fn open_sink(path: &Path) -> Outcome<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdout()));
    }
    let file = File::create(path).map_err(|e| io_failure(path, e))?;
    Ok(Box::new(BufWriter::new(file)))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    let mut sink = open_sink(path)?;
    sink.write_all(text.as_bytes())
        .and_then(|_| sink.flush())
        .map_err(|e| io_failure(path, e))
}

fn load_network(weights: &Path, file: &ConfigFile) -> Outcome<(HwmNet<f32>, Vec<u8>)> {
    let bytes = fs::read(weights).map_err(|e| io_failure(weights, e))?;
    let checkpoint = Checkpoint::from_bytes(&bytes, weights)?;
    file.check_network(&checkpoint.network, weights)?;
    Ok((checkpoint.into_net()?, bytes))
}

fn append_lines(path: &Path, header: &str, fresh: bool) -> Outcome<BufWriter<File>> {
    let exists = path.exists();
    let file = if fresh || !exists {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(|e| io_failure(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh || !exists {
        writeln!(w, "{header}").map_err(|e| io_failure(path, e))?;
    }
    Ok(w)
}

pub fn train(args: &TrainArgs, seed: Option<u64>, file: &ConfigFile) -> Outcome {
    let index = index_root(&args.data)?;
    for orphan in &index.orphans {
        eprintln!("warning: {} has no counterpart; skipped", orphan.display());
    }
    let pairs = TrainPair::load_all(&index)?;
    let val = match &args.val {
        Some(root) => Some(TrainPair::load_all(&index_root(root)?)?),
        None => None,
    };

    let mut trainer = match &args.resume {
        Some(path) => {
            file.check_resumable(args)?;
            let mut checkpoint = Checkpoint::load(path)?;
            let state = checkpoint.train.as_mut().ok_or_else(|| {
                Failure::Invalid(format!("--resume {}: checkpoint holds weights only", path.display()))
            })?;
            if let Some(s) = seed {
                if s != state.seed {
                    return Err(Failure::Invalid(format!(
                        "--seed {s} differs from the seed {} stored in {}",
                        state.seed,
                        path.display()
                    )));
                }
            }
            if let Some(n) = args.iters {
                if n < state.iteration {
                    return Err(Failure::Invalid(format!(
                        "--iters {n} is below the {} iterations already done in {}",
                        state.iteration,
                        path.display()
                    )));
                }
                state.config.iterations = n;
            }
            if let Some(n) = args.checkpoint_every {
                state.config.checkpoint_every = n;
            }
            if let Some(n) = args.eval_every {
                state.config.eval_every = n;
            }
            Trainer::resume(checkpoint, pairs)?
        }
        None => {
            let (network, config) = file.fresh_run(args, seed)?;
            let net = HwmNet::build(network, config.seed)?;
            Trainer::new(net, config, pairs)?
        }
    };
    let cfg = trainer.config().clone();
    if cfg.eval_every > 0 && val.is_none() {
        return Err(Failure::Invalid("--eval-every needs --val".into()));
    }

    fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let fresh = args.resume.is_none();
    let loss_path = args.out.join("loss.csv");
    let mut loss_csv = append_lines(&loss_path, LOSS_CSV_HEADER, fresh)?;
    let val_path = args.out.join("val.csv");
    let mut val_csv = match &val {
        Some(_) => Some(append_lines(&val_path, "iteration,psnr_db,ssim", fresh)?),
        None => None,
    };
    say!(
        "training {} parameters for {} iterations (from {}), batch {}, patch {}",
        trainer.net().num_params(),
        cfg.iterations,
        trainer.iteration(),
        cfg.batch,
        cfg.patch
    );

    let out = args.out.clone();
    let val_crop = args.val_crop;
    trainer.run(cfg.iterations, |t, record| {
        writeln!(loss_csv, "{}", record.csv_line())
            .and_then(|_| loss_csv.flush())
            .map_err(|e| Error::io(&loss_path, e))?;
        let done = t.iteration();
        if done % PROGRESS_EVERY == 0 || done == cfg.iterations {
            say!("iter {done:>7}  lr {:.3e}  loss {:.6}", record.lr, record.loss);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            t.checkpoint().save(out.join(format!("checkpoint_{done:07}.hwmn")))?;
        }
        if let (Some(pairs), Some(w)) = (&val, val_csv.as_mut()) {
            if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
                let report = t.evaluate(pairs, Some(val_crop))?;
                say!(
                    "iter {done:>7}  val psnr {:.4} dB  ssim {:.4}",
                    report.mean_psnr(),
                    report.mean_ssim()
                );
                writeln!(w, "{done},{:.6},{:.6}", report.mean_psnr(), report.mean_ssim())
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&val_path, e))?;
            }
        }
        Ok(())
    })?;
    let final_path = args.out.join("final.hwmn");
    trainer.checkpoint().save(&final_path)?;
    say!("wrote {}", final_path.display());
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn list_inputs(input: &Path) -> Outcome<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| io_failure(input, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_failure(input, e))?.path();
        if is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Failure::Invalid(format!(
            "--input {}: no .png/.jpg/.jpeg images",
            input.display()
        )));
    }
    Ok(files)
}

fn enhance(net: &HwmNet<f32>, src: &Path, dst: &Path) -> Outcome {
    let low = Image8::open(src)?.to_tensor::<f32>();
    let out = net.infer(&low)?.map(|v| v.clamp(0.0, 1.0));
    Image8::from_tensor(&out)?.save_png(dst)?;
    Ok(())
}

pub fn infer(args: &InferArgs, file: &ConfigFile, workers: usize) -> Outcome {
    let inputs = list_inputs(&args.input)?;
    let (net, bytes) = load_network(&args.weights, file)?;
    fs::create_dir_all(&args.output).map_err(|e| io_failure(&args.output, e))?;
    let mut jobs = Vec::with_capacity(inputs.len());
    for src in inputs {
        let stem = src.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
        let dst = args.output.join(stem).with_extension("png");
        if let (Ok(a), Ok(b)) = (src.canonicalize(), dst.canonicalize()) {
            if a == b {
                return Err(Failure::Invalid(format!(
                    "--output {}: would overwrite the input {}",
                    args.output.display(),
                    src.display()
                )));
            }
        }
        jobs.push((src, dst));
    }

    let workers = workers.min(jobs.len()).max(1);
    let results: Vec<Outcome> = if workers == 1 {
        jobs.iter().map(|(src, dst)| enhance(&net, src, dst)).collect()
    } else {
        // Parameters are reference counted, so each worker decodes its own copy.
        drop(net);
        let mut slots: Vec<Option<Outcome>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|k| {
                    let (jobs, bytes, weights) = (&jobs, &bytes, &args.weights);
                    scope.spawn(move || -> Vec<(usize, Outcome)> {
                        let net = match Checkpoint::from_bytes(bytes, weights).and_then(Checkpoint::into_net) {
                            Ok(net) => net,
                            Err(e) => return vec![(k, Err(Failure::from(e)))],
                        };
                        (k..jobs.len())
                            .step_by(workers)
                            .map(|i| (i, enhance(&net, &jobs[i].0, &jobs[i].1)))
                            .collect()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("inference worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.unwrap_or(Ok(()))).collect()
    };
    for ((src, dst), result) in jobs.iter().zip(results) {
        result?;
        say!("{} -> {}", src.display(), dst.display());
    }
    Ok(())
}

pub fn eval(args: &EvalArgs, file: &ConfigFile) -> Outcome {
    let (net, _) = load_network(&args.weights, file)?;
    let index = index_dataset(&args.low, &args.gt)?;
    for orphan in &index.orphans {
        eprintln!("warning: {} has no counterpart; skipped", orphan.display());
    }
    let pairs = TrainPair::load_all(&index)?;
    let report = evaluate(&net, &pairs, args.center_crop)?;
    say!("{report}");
    if let Some(path) = &args.csv {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

pub fn flops(args: &FlopsArgs, file: &ConfigFile) -> Outcome {
    let mut config = file.network()?.unwrap_or_default();
    if let Some(s) = args.schedule {
        let widths = match s {
            crate::Schedule::Doubling => NetworkConfig::doubling(config.levels, config.base_width).widths,
            crate::Schedule::Constant => NetworkConfig::constant(config.levels, config.base_width).widths,
        };
        config.widths = widths;
    }
    let report = count_cost(&config, args.height, args.width)?;
    if args.detail {
        say!("{:<36} {:<20} {:>10} {:>16}", "operation", "kind", "params", "flops");
        for e in &report.entries {
            say!(
                "{:<36} {:<20} {:>10} {:>16}",
                e.name,
                e.kind.to_string(),
                e.params,
                e.flops
            );
        }
        say!();
    }
    say!("{report}");
    if (args.height, args.width) == REFERENCE_SIZE {
        say!(
            "reference {:.2} T at {}x{}; ratio {:.3}",
            REFERENCE_FLOPS / 1e12,
            REFERENCE_SIZE.0,
            REFERENCE_SIZE.1,
            report.flops() as f64 / REFERENCE_FLOPS
        );
    }
    if let Some(path) = &args.csv {
        let mut text = String::from("name,kind,params,flops\n");
        for e in &report.entries {
            text.push_str(&format!("{},{},{},{}\n", e.name, e.kind, e.params, e.flops));
        }
        write_text(path, &text)?;
    }
    Ok(())
}

pub fn gradcheck() -> Outcome {
    let entries = gradient_suite()?;
    let mut failed = Vec::new();
    for e in &entries {
        let mark = if e.passed() { "ok" } else { "FAIL" };
        say!(
            "{mark:<4} {:<24} max rel err {:.3e}  tol {:.0e}  probes {}  excluded at kinks {}",
            e.name,
            e.max_error,
            e.tolerance,
            e.probes,
            e.excluded
        );
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn selfcheck() -> Outcome {
    let outcomes = self_check()?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let mark = if o.passed { "ok" } else { "FAIL" };
        say!("{mark:<4} {:<32} {}", o.name, o.detail);
        if !o.passed {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("self-check failed: {}", failed.join(", "))))
    }
}
