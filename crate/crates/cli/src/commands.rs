use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fgdiff::attention::{complexity_probe, probe_csv, AttentionConfig, Method};
use fgdiff::data::{export_image, generate, Dataset, DatasetSpec, Sample};
use fgdiff::diffusion::{guided_sample, trace_csv, TraceRow};
use fgdiff::eval::{class_accuracy, frechet_distance, inception_score_like, train_probe, FeatureExtractor};
use fgdiff::network::{Denoiser, FinetuneMode, ModelParams, TieredCondition};
use fgdiff::spectral::{high_freq_energy_ratio, image_dims};
use fgdiff::train::{loss_csv_row, OptimizerKind, Trainer, LOSS_CSV_HEADER};
use fgdiff::numerics::Tensor;
use fgdiff::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FeatureMode, RunConfig};
use crate::{rundir, Common};

fn load_config(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref())
}

fn start_run(parent: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = rundir::create(parent, command)?;
    rundir::write_resolved(&dir, cfg)?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

pub fn generate_data(
    runs: &Path,
    common: &Common,
    n_super: Option<usize>,
    subs_per_super: Option<usize>,
    samples: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let d = &mut cfg.data;
    d.n_super = n_super.unwrap_or(d.n_super);
    d.subs_per_super = subs_per_super.unwrap_or(d.subs_per_super);
    d.samples_per_sub = samples.unwrap_or(d.samples_per_sub);
    d.seed = seed.unwrap_or(d.seed);
    d.validate()?;
    let dir = start_run(runs, "generate-data", &cfg)?;
    let dataset = generate(&cfg.data)?;
    let path = out.unwrap_or_else(|| dir.join("dataset.efdd"));
    dataset.save(&path)?;
    println!("wrote {} samples to {}", dataset.len(), path.display());
    Ok(())
}

#[derive(Args, Clone, Default)]
pub struct TrainArgs {
    /// Dataset file; generated from the `[data]` section when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

fn dataset_for(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::load(p),
        None => generate(&cfg.data),
    }
}

fn check_dataset(model: &Denoiser, data: &Dataset) -> Result<()> {
    let m = model.config();
    if data.spec.size != m.image_size || data.spec.channels != m.channels {
        return Err(Error::Contract(format!(
            "dataset images are {0}×{0}×{1}, model expects {2}×{2}×{3}",
            data.spec.size, data.spec.channels, m.image_size, m.channels
        )));
    }
    if data.hierarchy() != *model.hierarchy() {
        return Err(Error::Contract("dataset label hierarchy does not match the model config".into()));
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Denoiser> {
    let params = ModelParams::load(checkpoint)?;
    let mut model = Denoiser::new(&cfg.model)?;
    model.set_params(params)?;
    Ok(model)
}

/// Shared body of `train` and `finetune`.
pub fn train(runs: &Path, common: &Common, args: &TrainArgs, base: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let t = &mut cfg.train;
    t.steps = args.steps.unwrap_or(t.steps);
    t.batch = args.batch.unwrap_or(t.batch);
    t.lr = args.lr.unwrap_or(t.lr);
    t.checkpoint_every = args.checkpoint_every.unwrap_or(t.checkpoint_every);
    t.seed = args.seed.unwrap_or(t.seed);
    if let Some(o) = args.optimizer {
        t.optimizer = match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        };
    }
    cfg.validate()?;
    let (model, mode, name) = match base {
        Some(path) => (load_model(&cfg, path)?, FinetuneMode::BiasNormEmbed, "finetune"),
        None => (Denoiser::new(&cfg.model)?, FinetuneMode::Full, "train"),
    };
    let data = dataset_for(&cfg, args.data.as_deref())?;
    check_dataset(&model, &data)?;
    let schedule = cfg.schedule.build()?;
    let size = cfg.model.image_size;
    let mut trainer = Trainer::new(
        model,
        cfg.train.clone(),
        cfg.loss.clone(),
        schedule,
        cfg.guidance.gamma,
        cfg.guidance.cutoff(size, size),
        mode,
    )?;
    let set = trainer.trainable();
    println!(
        "trainable parameters: {} of {} ({:.4}%)",
        set.selected_elements,
        set.total_elements,
        100.0 * set.ratio()
    );
    let dir = start_run(runs, name, &cfg)?;
    let save = |trainer: &Trainer, step: usize| -> Result<()> {
        trainer.model().params().save(dir.join(format!("checkpoint-{step:06}.efd1")))
    };
    save(&trainer, 0)?;
    let mut log = format!("{LOSS_CSV_HEADER}\n");
    let losses = dir.join("losses.csv");
    std::fs::write(&losses, &log)?;
    let every = cfg.train.checkpoint_every;
    for step in 1..=cfg.train.steps {
        let row = trainer.step(&data)?;
        writeln!(log, "{}", loss_csv_row(&row)).expect("writing to a String");
        if every > 0 && step % every == 0 || step == cfg.train.steps {
            std::fs::write(&losses, &log)?;
            save(&trainer, step)?;
        }
    }
    if cfg.train.steps > 0 {
        println!("mean step time: {:.1} ms", trainer.mean_step_time_ns() / 1e6);
    }
    trainer.model().params().save(dir.join("final.efd1"))?;
    Ok(())
}

#[derive(Args, Clone, Default)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub t_split: Option<usize>,
    #[arg(long)]
    pub w_sub: Option<f64>,
    #[arg(long)]
    pub w_super: Option<f64>,
    /// Sampler steps (evenly respaced).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub d0: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Images per subclass.
    #[arg(long)]
    pub per_sub: Option<usize>,
    /// Also write the per-step diagnostics to `trace.csv`.
    #[arg(long)]
    pub trace: bool,
}

/// Combines per-batch traces step by step: mean ratio, overall min and max.
fn merge_traces(traces: &[(Vec<TraceRow>, usize)]) -> Vec<TraceRow> {
    let total: usize = traces.iter().map(|(_, n)| n).sum();
    let Some((first, _)) = traces.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| TraceRow {
            step: first[i].step,
            hf_ratio: traces.iter().map(|(t, n)| t[i].hf_ratio * *n as f64).sum::<f64>() / total as f64,
            x0_min: traces.iter().map(|(t, _)| t[i].x0_min).fold(f64::INFINITY, f64::min),
            x0_max: traces.iter().map(|(t, _)| t[i].x0_max).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

pub fn sample(runs: &Path, common: &Common, args: &SampleArgs) -> Result<()> {
    let mut cfg = load_config(common)?;
    let g = &mut cfg.guidance;
    g.gamma = args.gamma.unwrap_or(g.gamma);
    g.t_split = args.t_split.unwrap_or(g.t_split);
    g.w_sub = args.w_sub.unwrap_or(g.w_sub);
    g.w_super = args.w_super.unwrap_or(g.w_super);
    g.steps = args.steps.or(g.steps);
    g.d0 = args.d0.or(g.d0);
    cfg.sample.seed = args.seed.unwrap_or(cfg.sample.seed);
    cfg.sample.per_sub = args.per_sub.unwrap_or(cfg.sample.per_sub);
    cfg.validate()?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let dir = start_run(runs, "sample", &cfg)?;
    let schedule = cfg.schedule.build()?;
    let h = *model.hierarchy();
    let conds: Vec<TieredCondition> = (0..h.n_sub())
        .flat_map(|s| std::iter::repeat_n(TieredCondition::full(s, &h), cfg.sample.per_sub))
        .collect();
    let params = model.frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample.seed);
    let mut samples = Vec::with_capacity(conds.len());
    let mut traces = Vec::new();
    for chunk in conds.chunks(cfg.sample.batch) {
        let out = guided_sample(&model, &params, &schedule, &cfg.guidance, chunk, &mut rng)?;
        let (_, hh, ww, cc) = image_dims(out.images.shape())?;
        let per = hh * ww * cc;
        for (i, c) in chunk.iter().enumerate() {
            let image = Tensor::new(vec![hh, ww, cc], out.images.data()[i * per..(i + 1) * per].to_vec())?;
            samples.push(Sample { image, label: *c });
        }
        traces.push((out.trace, chunk.len()));
    }
    for (i, s) in samples.iter().enumerate() {
        let sub = s.label.sub.expect("sampled with full labels");
        let ext = if cfg.model.channels == 3 { "ppm" } else { "pgm" };
        export_image(&s.image, dir.join(format!("sample-{i:04}-sub{sub:02}.{ext}")))?;
    }
    let set = Dataset {
        spec: DatasetSpec {
            n_super: h.n_super,
            subs_per_super: h.subs_per_super,
            samples_per_sub: cfg.sample.per_sub,
            size: cfg.model.image_size,
            channels: cfg.model.channels,
            seed: cfg.sample.seed,
        },
        samples,
    };
    set.save(dir.join("samples.efdd"))?;
    if args.trace {
        std::fs::write(dir.join("trace.csv"), trace_csv(&merge_traces(&traces)))?;
    }
    println!("wrote {} images", set.len());
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BenchMethod {
    Dense,
    Pro,
    Both,
}

#[derive(Args, Clone)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096, 8192])]
    pub lengths: Vec<usize>,
    /// Query/key width.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = BenchMethod::Both)]
    pub method: BenchMethod,
    /// Sampling factor; defaults to the model's `attention_c`.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn bench_attention(runs: &Path, common: &Common, args: &BenchArgs) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.model.attention_c = args.c.unwrap_or(cfg.model.attention_c);
    cfg.model.attention_seed = args.seed;
    let pro = AttentionConfig::new(cfg.model.attention_c, args.seed)?;
    let dir = start_run(runs, "bench-attention", &cfg)?;
    let mut rows = Vec::new();
    if matches!(args.method, BenchMethod::Pro | BenchMethod::Both) {
        rows.extend(complexity_probe(&args.lengths, args.d, Method::Pro, &pro)?);
    }
    if matches!(args.method, BenchMethod::Dense | BenchMethod::Both) {
        rows.extend(complexity_probe(&args.lengths, args.d, Method::Dense, &AttentionConfig::dense(args.seed))?);
    }
    let csv = probe_csv(&rows);
    std::fs::write(dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn stack(set: &Dataset) -> (Tensor, Vec<TieredCondition>) {
    let all: Vec<usize> = (0..set.len()).collect();
    set.batch(&all)
}

pub fn eval(runs: &Path, common: &Common, data: &Path, samples: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let real = Dataset::load(data)?;
    let fake = Dataset::load(samples)?;
    if real.spec.size != fake.spec.size || real.spec.channels != fake.spec.channels {
        return Err(Error::Contract("real and generated images have different shapes".into()));
    }
    if real.hierarchy() != fake.hierarchy() {
        return Err(Error::Contract("real and generated sets use different label hierarchies".into()));
    }
    let dir = start_run(runs, "eval", &cfg)?;
    let (rx, rl) = stack(&real);
    let (fx, fl) = stack(&fake);
    let probe = train_probe(&rx, &rl, real.hierarchy(), &cfg.probe)?;
    let extractor = match cfg.eval.features {
        FeatureMode::Probe => FeatureExtractor::Probe(probe.clone()),
        FeatureMode::RandomProjection => {
            let (_, h, w, c) = image_dims(rx.shape())?;
            FeatureExtractor::random_projection(h * w * c, cfg.eval.projection_dim, cfg.eval.projection_seed)
        }
    };
    let (rs, fs) = (extractor.stats(&rx)?, extractor.stats(&fx)?);
    if fs.underdetermined() {
        eprintln!(
            "warning: {} generated samples for {} feature dimensions; covariance is rank-deficient",
            fs.count,
            fs.dim()
        );
    }
    let fid = frechet_distance(&rs, &fs)?;
    let is = inception_score_like(&probe.probs(&fx)?)?;
    let (sub_acc, super_acc) = class_accuracy(&fx, &fl, &probe)?;
    let cutoff = cfg.guidance.cutoff(fake.spec.size, fake.spec.size);
    let hf = fake
        .samples
        .iter()
        .map(|s| high_freq_energy_ratio(&s.image, cutoff))
        .sum::<Result<f64>>()?
        / fake.len() as f64;
    let mut csv = String::from("metric,value\n");
    for (k, v) in [("fid_like", fid), ("is_like", is), ("sub_acc", sub_acc), ("super_acc", super_acc), ("hf_ratio_mean", hf)] {
        writeln!(csv, "{k},{v}").expect("writing to a String");
    }
    std::fs::write(dir.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
