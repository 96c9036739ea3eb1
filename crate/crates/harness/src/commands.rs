//! The five CLI commands. Each reads a [`RunConfig`] and writes into its `out` directory,
//! always finishing with `manifest.txt`.

use std::path::{Path, PathBuf};

use affiner::affiner::{count_params, trainable_fraction, AffinerParts, CountMethod, Method, ParamCountModel};
use affiner::backbone::{fingerprint_arrays, ArchConfig, Backbone, Fingerprint};
use affiner::diffusion::{SamplerConfig, Schedule};
use affiner::nn::derive_seed;
use affiner::registry::{load_adapter, load_backbone, save_adapter, save_backbone, AdapterSet, AdapterSpec};
use affiner::{Error, Tensor};
use anyhow::{bail, Context};

use crate::config::{parse_method, resolve_arch, Command, Dataset, RunConfig, TaskSpec};
use crate::data::{ImageSet, Split};
use crate::experiment::{
    adapt, image_label, pretrain, sample_images, sample_points, tail_mean, uncond, Source, TrainSpec,
};
use crate::metrics::MetricReport;
use crate::output::{csv, grid, ppm_bytes, scatter, Manifest};

/// Scalar type of every harness run.
pub type F = f32;

/// Images sampled per call to the sampler.
const IMAGE_CHUNK: usize = 32;

/// What a command wrote, plus lines for the terminal.
#[derive(Debug)]
pub struct Report {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub lines: Vec<String>,
}

pub fn run(config: &RunConfig) -> anyhow::Result<Report> {
    match config.command {
        Command::Pretrain => cmd_pretrain(config),
        Command::Adapt => cmd_adapt(config),
        Command::Sample => cmd_sample(config),
        Command::Ablate => cmd_ablate(config),
        Command::Count => cmd_count(config),
    }
}

fn prepare_out(c: &RunConfig) -> anyhow::Result<(PathBuf, Manifest)> {
    let dir = c.out.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut m = Manifest::default();
    m.set("command", c.command.name());
    m.set("seed", c.seed);
    m.set("version", env!("CARGO_PKG_VERSION"));
    m.set("dtype", "f32");
    m.write(&dir, "config.toml", c.to_toml().as_bytes())?;
    Ok((dir, m))
}

fn finish(dir: PathBuf, manifest: Manifest, lines: Vec<String>) -> anyhow::Result<Report> {
    manifest.finish(&dir)?;
    Ok(Report { dir, manifest, lines })
}

fn train_spec(c: &RunConfig, steps: usize) -> anyhow::Result<TrainSpec> {
    Ok(TrainSpec {
        steps,
        batch: c.batch,
        optim: c.optimizer.build()?,
        seed: c.seed,
    })
}

/// Recomputed from the arrays, so it proves the weights themselves did not move.
fn weight_hash(backbone: &Backbone<F>) -> Fingerprint {
    let arrays = backbone.named_arrays();
    fingerprint_arrays(arrays.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Resizes an image dataset to the architecture's resolution.
fn fit_dataset(ds: &Dataset, arch: &ArchConfig) -> Dataset {
    match ds {
        Dataset::Images { set, paired } if set.size != arch.height => Dataset::Images {
            set: ImageSet::new(arch.height, set.families.clone()),
            paired: *paired,
        },
        other => other.clone(),
    }
}

/// How one task labels its images.
#[derive(Debug, Clone, Copy)]
struct Labels {
    first: Option<usize>,
    dropout: f64,
}

impl Labels {
    fn pretrain() -> Self {
        Self {
            first: None,
            dropout: 0.1,
        }
    }

    fn for_set(arch: &ArchConfig, set: &AdapterSet<F>) -> Self {
        Self {
            first: (set.new_classes() > 0).then(|| uncond(arch) + 1),
            dropout: 0.1,
        }
    }

    fn label(&self, arch: &ArchConfig, images: &ImageSet, family: usize, table_rows: usize) -> usize {
        let l = image_label(images, family, self.first);
        if l < table_rows {
            l
        } else {
            uncond(arch)
        }
    }
}

fn source<'a>(ds: &'a Dataset, labels: Labels) -> Source<'a> {
    match ds {
        Dataset::Points(m) => Source::Points(m),
        Dataset::Images { set, paired } => Source::Images {
            set,
            paired: *paired,
            first_label: labels.first,
            label_dropout: labels.dropout,
        },
    }
}

fn rows(t: &Tensor<F>, start: usize, end: usize) -> Tensor<F> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * per..end * per].to_vec()).expect("row slice")
}

fn flat_images(t: &Tensor<F>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let per = t.numel() / n.max(1);
    t.data().chunks(per).map(|c| c.iter().map(|&v| v as f64).collect()).collect()
}

/// Samples `count` items from the model and compares them with the held-out split of `ds`.
/// Image labels follow `labels`; labels past the class table fall back to the unconditional row.
fn evaluate(
    backbone: &Backbone<F>,
    set: Option<&AdapterSet<F>>,
    ds: &Dataset,
    labels: Labels,
    count: usize,
    seed: u64,
    schedule: &Schedule,
    sampler: &SamplerConfig,
) -> anyhow::Result<MetricReport> {
    match ds {
        Dataset::Points(mix) => {
            let reference = mix.sample(count, seed, Split::Eval);
            let samples = sample_points(backbone, set, count, schedule, sampler)?;
            Ok(MetricReport::compute(&samples, &reference, Some(&mix.means)))
        }
        Dataset::Images { set: images, paired } => {
            let arch = backbone.config();
            let table_rows = uncond(arch) + 1 + set.map_or(0, |s| s.new_classes());
            let (x, cond, fams) = images.split_batch::<F>(count, seed, Split::Eval);
            let classes: Vec<usize> = fams.iter().map(|&f| labels.label(arch, images, f, table_rows)).collect();
            let use_cond = *paired && set.is_some_and(|s| s.cond.is_some());
            let mut samples = Vec::with_capacity(count);
            for start in (0..count).step_by(IMAGE_CHUNK) {
                let end = (start + IMAGE_CHUNK).min(count);
                let c = use_cond.then(|| rows(&cond, start, end));
                let cfg = SamplerConfig {
                    seed: derive_seed(sampler.seed, &format!("chunk/{start}")),
                    ..*sampler
                };
                let imgs = sample_images(backbone, set, &classes[start..end], c.as_ref(), schedule, &cfg)?;
                samples.extend(flat_images(&imgs));
            }
            Ok(MetricReport::compute(&samples, &flat_images(&x), None))
        }
    }
}

fn metric_row(stage: &str, r: &MetricReport) -> Vec<String> {
    vec![
        stage.to_string(),
        r.samples.to_string(),
        format!("{:.6}", r.energy_distance),
        format!("{:.6}", r.mmd),
        format!("{:.6}", r.bandwidth),
        r.modes_covered.map_or(String::new(), |v| format!("{v:.3}")),
    ]
}

const METRIC_HEADER: [&str; 6] = ["stage", "samples", "energy_distance", "mmd", "bandwidth", "modes_covered"];

fn loss_csv(curve: &[f64]) -> String {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), format!("{l:.6}")])
        .collect();
    csv(&["step", "loss"], &rows)
}

fn eval_sampler(c: &RunConfig) -> anyhow::Result<SamplerConfig> {
    c.sampler.build(derive_seed(c.seed, "eval"))
}

fn cmd_pretrain(c: &RunConfig) -> anyhow::Result<Report> {
    let (dir, mut m) = prepare_out(c)?;
    let arch = c.arch_config()?;
    let ds = fit_dataset(&c.dataset.build()?, &arch);
    let schedule = c.schedule.build()?;
    let sampler = eval_sampler(c)?;
    let mut backbone = Backbone::<F>::new(&arch, c.seed)?;
    let mut lines = Vec::new();

    let before = if c.count > 0 {
        Some(evaluate(&backbone, None, &ds, Labels::pretrain(), c.count, c.seed, &schedule, &sampler)?)
    } else {
        None
    };
    let spec = train_spec(c, c.steps)?;
    let curve = match pretrain(&mut backbone, source(&ds, Labels::pretrain()), &schedule, &spec) {
        Ok(curve) => curve,
        Err(e @ Error::Diverged { .. }) => {
            // the failing step was not applied, so the weights are the last good ones
            save_backbone(&backbone, &dir.join("backbone.afnr"))?;
            m.record(&dir, "backbone.afnr")?;
            m.set("status", "diverged");
            m.finish(&dir)?;
            return Err(anyhow::Error::new(e).context(format!(
                "pretraining diverged; last good checkpoint kept at {}",
                dir.join("backbone.afnr").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_backbone(&backbone, &dir.join("backbone.afnr"))?;
    m.record(&dir, "backbone.afnr")?;
    let fp = backbone.fingerprint().to_hex();
    m.set("fingerprint", &fp);
    m.write(&dir, "loss.csv", loss_csv(&curve).as_bytes())?;
    lines.push(format!("pretrained {} steps, final loss {:.5}", curve.len(), tail_mean(&curve, 50)));
    lines.push(format!("fingerprint {fp}"));

    if let Some(before) = before {
        let after = evaluate(&backbone, None, &ds, Labels::pretrain(), c.count, c.seed, &schedule, &sampler)?;
        let rows = vec![metric_row("init", &before), metric_row("pretrained", &after)];
        m.write(&dir, "metrics.csv", csv(&METRIC_HEADER, &rows).as_bytes())?;
        lines.push(format!(
            "energy distance {:.4} -> {:.4}",
            before.energy_distance, after.energy_distance
        ));
    }
    finish(dir, m, lines)
}

fn checkpoint(c: &RunConfig) -> anyhow::Result<Backbone<F>> {
    let path = c.checkpoint.as_ref().context("this command needs `checkpoint`")?;
    load_backbone(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn adapter_spec(c: &RunConfig, arch: &ArchConfig, task: &TaskSpec, ds: &Dataset) -> anyhow::Result<AdapterSpec> {
    let paired = matches!(ds, Dataset::Images { paired: true, .. });
    if let Dataset::Images { set, .. } = ds {
        if task.new_classes > 0 && set.families.len() > task.new_classes {
            bail!(
                "task `{}` has {} image families but only {} new classes",
                task.name,
                set.families.len(),
                task.new_classes
            );
        }
    }
    Ok(AdapterSpec::affiner(c.rank(arch), derive_seed(c.seed, &task.name))
        .with_method(c.method(arch)?)
        .with_parts(c.parts()?)
        .with_classes(task.new_classes)
        .with_cond(paired))
}

/// Result of adapting one task.
struct TaskRun {
    set: AdapterSet<F>,
    curve: Vec<f64>,
    base: Option<MetricReport>,
    adapted: Option<MetricReport>,
}

fn run_task(
    c: &RunConfig,
    backbone: &Backbone<F>,
    task: &TaskSpec,
    spec: &AdapterSpec,
    steps: usize,
    schedule: &Schedule,
    sampler: &SamplerConfig,
) -> anyhow::Result<TaskRun> {
    let arch = backbone.config();
    let ds = fit_dataset(&task.dataset.build()?, arch);
    let mut set = AdapterSet::create(backbone, &task.name, spec)?;
    let labels = Labels::for_set(arch, &set);
    let base = if c.count > 0 {
        Some(evaluate(backbone, None, &ds, labels, c.count, c.seed, schedule, sampler)?)
    } else {
        None
    };
    let curve = adapt(backbone, &mut set, source(&ds, labels), schedule, &train_spec(c, steps)?, c.mask_ratio)?;
    let adapted = if c.count > 0 {
        Some(evaluate(backbone, Some(&set), &ds, labels, c.count, c.seed, schedule, sampler)?)
    } else {
        None
    };
    Ok(TaskRun {
        set,
        curve,
        base,
        adapted,
    })
}

fn cmd_adapt(c: &RunConfig) -> anyhow::Result<Report> {
    if c.compare_arch.is_some() {
        return cmd_compare(c);
    }
    let (dir, mut m) = prepare_out(c)?;
    let backbone = checkpoint(c)?;
    let arch = backbone.config().clone();
    let schedule = c.schedule.build()?;
    let sampler = eval_sampler(c)?;
    let before = weight_hash(&backbone);
    m.set("backbone_fingerprint", before.to_hex());
    let mut lines = Vec::new();
    let (mut metric_rows, mut param_rows) = (Vec::new(), Vec::new());

    for task in c.task_list() {
        let ds = task.dataset.build()?;
        let spec = adapter_spec(c, &arch, &task, &ds)?;
        let run = run_task(c, &backbone, &task, &spec, c.steps, &schedule, &sampler)?;
        let file = format!("{}.afnr", task.name);
        save_adapter(&run.set, &dir.join(&file))?;
        m.record(&dir, &file)?;
        m.write(&dir, &format!("loss_{}.csv", task.name), loss_csv(&run.curve).as_bytes())?;

        let trainable = run.set.trainable_count();
        let frac = trainable_fraction(backbone.param_count(), trainable)?;
        param_rows.push(vec![
            task.name.clone(),
            Method::name(spec.method).to_string(),
            trainable.to_string(),
            backbone.param_count().to_string(),
            format!("{:.4}", frac.of_total),
            format!("{:.4}", frac.of_backbone),
        ]);
        lines.push(format!(
            "{}: {trainable} trainable parameters ({:.3}% of total), final loss {:.5}",
            task.name,
            frac.of_total,
            tail_mean(&run.curve, 50)
        ));
        if let (Some(base), Some(adapted)) = (&run.base, &run.adapted) {
            metric_rows.push(metric_row(&format!("{}/frozen", task.name), base));
            metric_rows.push(metric_row(&format!("{}/adapted", task.name), adapted));
            lines.push(format!(
                "{}: energy distance frozen {:.4}, adapted {:.4}",
                task.name, base.energy_distance, adapted.energy_distance
            ));
        }
    }

    let after = weight_hash(&backbone);
    if after != before {
        bail!("backbone weights changed during adaptation");
    }
    m.set("backbone_fingerprint_after", after.to_hex());
    lines.push(format!("backbone unchanged ({})", after.to_hex()));
    let header = ["task", "method", "trainable", "backbone", "percent_of_total", "percent_of_backbone"];
    m.write(&dir, "params.csv", csv(&header, &param_rows).as_bytes())?;
    if !metric_rows.is_empty() {
        m.write(&dir, "metrics.csv", csv(&METRIC_HEADER, &metric_rows).as_bytes())?;
    }
    finish(dir, m, lines)
}

/// Runs the same pretrain-then-adapt protocol on `arch` and `compare_arch` and reports both.
fn cmd_compare(c: &RunConfig) -> anyhow::Result<Report> {
    let (dir, mut m) = prepare_out(c)?;
    let schedule = c.schedule.build()?;
    let sampler = eval_sampler(c)?;
    let other = c.compare_arch.as_deref().expect("checked by caller");
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for name in [c.arch.as_str(), other] {
        let arch = resolve_arch(name)?;
        let ds = fit_dataset(&c.dataset.build()?, &arch);
        let mut backbone = Backbone::<F>::new(&arch, c.seed)?;
        let steps = c.pretrain_steps.unwrap_or(c.steps);
        pretrain(&mut backbone, source(&ds, Labels::pretrain()), &schedule, &train_spec(c, steps)?)?;
        for task in c.task_list() {
            let tds = task.dataset.build()?;
            let spec = adapter_spec(c, &arch, &task, &tds)?;
            let run = run_task(c, &backbone, &task, &spec, c.steps, &schedule, &sampler)?;
            let frac = trainable_fraction(backbone.param_count(), run.set.trainable_count())?;
            let ed = |r: &Option<MetricReport>| r.as_ref().map_or(String::new(), |r| format!("{:.6}", r.energy_distance));
            rows.push(vec![
                name.to_string(),
                task.name.clone(),
                run.set.trainable_count().to_string(),
                format!("{:.4}", frac.of_total),
                format!("{:.6}", tail_mean(&run.curve, 50)),
                ed(&run.base),
                ed(&run.adapted),
            ]);
            lines.push(format!(
                "{name}/{}: frozen {} adapted {}",
                task.name,
                ed(&run.base),
                ed(&run.adapted)
            ));
        }
    }
    let header = ["arch", "task", "trainable", "percent_of_total", "final_loss", "frozen_energy", "adapted_energy"];
    m.write(&dir, "compare.csv", csv(&header, &rows).as_bytes())?;
    finish(dir, m, lines)
}

fn cmd_sample(c: &RunConfig) -> anyhow::Result<Report> {
    let (dir, mut m) = prepare_out(c)?;
    let backbone = checkpoint(c)?;
    let arch = backbone.config().clone();
    let set = match &c.adapter {
        Some(p) => Some(load_adapter::<F>(p, Some(&backbone)).with_context(|| format!("loading adapter {}", p.display()))?),
        None => None,
    };
    if let Some(s) = &set {
        m.set("adapter", &s.task_name);
        m.set("adapter_hash", s.content_hash().to_hex());
    }
    m.set("backbone_fingerprint", backbone.fingerprint().to_hex());
    if c.count == 0 {
        return finish(dir, m, vec!["nothing to sample".into()]);
    }
    let schedule = c.schedule.build()?;
    let sampler = c.sampler.build(derive_seed(c.seed, "sample"))?;
    let ds = fit_dataset(&c.dataset.build()?, &arch);
    let mut lines = Vec::new();

    if arch.height == 1 {
        let pts = sample_points(&backbone, set.as_ref(), c.count, &schedule, &sampler)?;
        let rows: Vec<Vec<String>> = pts.iter().map(|p| vec![format!("{:.6}", p[0]), format!("{:.6}", p[1])]).collect();
        m.write(&dir, "samples.csv", csv(&["x", "y"], &rows).as_bytes())?;
        let reference = match &ds {
            Dataset::Points(mix) => mix.sample(1000, c.seed, Split::Eval),
            Dataset::Images { .. } => Vec::new(),
        };
        let size = 256;
        let img = scatter(&pts, &reference, size, 4.0);
        m.write(&dir, "grid.ppm", &ppm_bytes(&img, size, size))?;
        lines.push(format!("{} points written", pts.len()));
        return finish(dir, m, lines);
    }

    let class = c.class.unwrap_or_else(|| uncond(&arch));
    let cond = match (&set, &ds) {
        (Some(s), Dataset::Images { set: images, .. }) if s.cond.is_some() => {
            Some(images.split_batch::<F>(c.count, c.seed, Split::Eval).1)
        }
        (Some(s), _) if s.cond.is_some() => bail!("this adapter takes condition maps; set an image `dataset`"),
        _ => None,
    };
    let mut first = None;
    for start in (0..c.count).step_by(IMAGE_CHUNK) {
        let end = (start + IMAGE_CHUNK).min(c.count);
        let cfg = SamplerConfig {
            seed: derive_seed(sampler.seed, &format!("chunk/{start}")),
            ..sampler
        };
        let cmap = cond.as_ref().map(|t| rows(t, start, end));
        let imgs = sample_images(&backbone, set.as_ref(), &vec![class; end - start], cmap.as_ref(), &schedule, &cfg)?;
        let per = arch.height * arch.width * arch.channels;
        for (i, chunk) in imgs.data().chunks(per).enumerate() {
            let px: Vec<f64> = chunk.iter().map(|&v| v as f64).collect();
            let rgb = grid(&Tensor::<f64>::new(vec![1, arch.height, arch.width, arch.channels], px)?).0;
            let (h, w) = (arch.height + 2, arch.width + 2);
            m.write(&dir, &format!("sample_{:04}.ppm", start + i), &ppm_bytes(&rgb, h, w))?;
        }
        if first.is_none() {
            first = Some(imgs);
        }
    }
    let (px, gh, gw) = grid(first.as_ref().expect("count > 0"));
    m.write(&dir, "grid.ppm", &ppm_bytes(&px, gh, gw))?;
    lines.push(format!("{} images of class {class} written", c.count));
    finish(dir, m, lines)
}

/// One ablation variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub label: &'static str,
    pub method: Method,
    pub parts: AffinerParts,
}

/// `full`, `b-only`, `a-only`, `branch-only`, `lora` or `bias-only`.
pub fn variant(name: &str, rank: usize) -> anyhow::Result<Variant> {
    if let Some(parts) = AffinerParts::from_name(name) {
        return Ok(Variant {
            label: parts.name(),
            method: Method::Affiner { rank },
            parts,
        });
    }
    let method = parse_method(name, rank)?;
    Ok(Variant {
        label: method.name(),
        method,
        parts: AffinerParts::FULL,
    })
}

const DEFAULT_VARIANTS: [&str; 5] = ["full", "b-only", "a-only", "branch-only", "lora"];

fn cmd_ablate(c: &RunConfig) -> anyhow::Result<Report> {
    let (dir, mut m) = prepare_out(c)?;
    let schedule = c.schedule.build()?;
    let sampler = eval_sampler(c)?;
    let backbone = match &c.checkpoint {
        Some(_) => checkpoint(c)?,
        None => {
            let arch = c.arch_config()?;
            let ds = fit_dataset(&c.dataset.build()?, &arch);
            let mut b = Backbone::<F>::new(&arch, c.seed)?;
            let steps = c.pretrain_steps.unwrap_or(c.steps);
            pretrain(&mut b, source(&ds, Labels::pretrain()), &schedule, &train_spec(c, steps)?)?;
            b
        }
    };
    let arch = backbone.config().clone();
    m.set("backbone_fingerprint", backbone.fingerprint().to_hex());
    let task = c.task_list().into_iter().next().expect("at least one task");
    let ds = task.dataset.build()?;
    let rank = c.rank(&arch);

    let names: Vec<&str> = if c.variants.is_empty() {
        DEFAULT_VARIANTS.to_vec()
    } else {
        c.variants.iter().map(String::as_str).collect()
    };
    let mut plan: Vec<(String, Variant)> = Vec::new();
    for n in names {
        let v = variant(n, rank)?;
        plan.push((v.label.to_string(), v));
    }
    for &d in &c.d_sweep {
        plan.push((format!("full d={d}"), variant("full", d)?));
    }

    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (label, v) in &plan {
        let spec = adapter_spec(c, &arch, &task, &ds)?.with_method(v.method).with_parts(v.parts);
        // every variant shares the adapter seed and the batch/noise stream
        let spec = AdapterSpec {
            seed: derive_seed(c.seed, "ablate"),
            ..spec
        };
        let run = run_task(c, &backbone, &task, &spec, c.steps, &schedule, &sampler)?;
        let params = run.set.trainable_count();
        let ed = run.adapted.as_ref().map(|r| r.energy_distance);
        let mmd = run.adapted.as_ref().map(|r| r.mmd);
        let rank = match v.method {
            Method::Affiner { rank } | Method::Lora { rank } => rank.to_string(),
            Method::BiasOnly => String::new(),
        };
        let fmt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        rows.push(vec![
            label.clone(),
            rank,
            params.to_string(),
            format!("{:.6}", tail_mean(&run.curve, 50)),
            fmt(ed),
            fmt(mmd),
        ]);
        lines.push(format!("{label:<14} {params:>8} params  energy {}", fmt(ed)));
    }
    let header = ["variant", "rank", "params", "final_loss", "energy_distance", "mmd"];
    m.write(&dir, "ablation.csv", csv(&header, &rows).as_bytes())?;

    let reference = reference_counts(&ArchConfig::dit_xl().count_model());
    m.write(&dir, "reference_counts.csv", reference_csv(&reference).as_bytes())?;
    lines.extend(reference.iter().map(ReferenceCount::describe));
    finish(dir, m, lines)
}

/// A computed count beside a reference figure for the large transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCount {
    pub label: String,
    pub computed: usize,
    /// Published value, in parameters; `None` for rows shown for context only.
    pub reported: Option<f64>,
}

impl ReferenceCount {
    pub fn relative_error(&self) -> Option<f64> {
        self.reported.map(|r| (self.computed as f64 - r).abs() / r)
    }

    pub fn within(&self, tol: f64) -> Option<bool> {
        self.relative_error().map(|e| e <= tol)
    }

    fn describe(&self) -> String {
        match self.reported {
            Some(r) => format!(
                "{:<18} computed {:>11} reported {:>11.0} ({:+.1}%)",
                self.label,
                self.computed,
                r,
                100.0 * (self.computed as f64 - r) / r
            ),
            None => format!("{:<18} computed {:>11}", self.label, self.computed),
        }
    }
}

/// Counts for the 1152-wide, 28-block transformer beside reference figures.
///
/// Every linear layer in a block is wrapped: q, k, v, out, both MLP layers and the
/// modulation projection. The reference rank sweep tracks the branch parameters,
/// so the sweep rows count the branch alone; full totals follow for context.
pub fn reference_counts(model: &ParamCountModel) -> Vec<ReferenceCount> {
    let mut out = vec![ReferenceCount {
        label: "bias-only".into(),
        computed: count_params(model, CountMethod::BiasOnly),
        reported: Some(0.48e6),
    }];
    out.push(ReferenceCount {
        label: "b-only".into(),
        computed: count_params(
            model,
            CountMethod::Affiner {
                rank: 0,
                parts: AffinerParts::SHIFT_ONLY,
            },
        ),
        reported: Some(0.48e6),
    });
    for (d, r) in [(1, 0.77e6), (4, 3.01e6), (16, 11.9e6), (64, 48.7e6)] {
        out.push(ReferenceCount {
            label: format!("branch d={d}"),
            computed: count_params(
                model,
                CountMethod::Affiner {
                    rank: d,
                    parts: AffinerParts::BRANCH_ONLY,
                },
            ),
            reported: Some(r),
        });
    }
    for d in [1, 4, 16, 64] {
        out.push(ReferenceCount {
            label: format!("full d={d}"),
            computed: count_params(
                model,
                CountMethod::Affiner {
                    rank: d,
                    parts: AffinerParts::FULL,
                },
            ),
            reported: (d == 64).then_some(48.7e6),
        });
    }
    out
}

fn reference_csv(rows: &[ReferenceCount]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.computed.to_string(),
                r.reported.map_or(String::new(), |v| format!("{v:.0}")),
                r.relative_error().map_or(String::new(), |e| format!("{e:.4}")),
            ]
        })
        .collect();
    csv(&["row", "computed", "reported", "relative_error"], &rows)
}

fn cmd_count(c: &RunConfig) -> anyhow::Result<Report> {
    let (dir, mut m) = prepare_out(c)?;
    let arch = c.arch_config()?;
    let model = arch.count_model();
    let rank = c.rank(&arch);
    let parts = c.parts()?;
    let methods = [
        ("affiner", CountMethod::Affiner { rank, parts }),
        ("lora", CountMethod::Lora { rank }),
        ("bias_only", CountMethod::BiasOnly),
    ];
    let mut rows = Vec::new();
    let mut lines = vec![format!(
        "{:<28} {:>6} {:>6} {:>10} {:>10} {:>10}",
        "layer", "m", "n", "affiner", "lora", "bias_only"
    )];
    for l in &model.layers {
        let counts: Vec<usize> = methods.iter().map(|(_, cm)| model.layer_count(l, *cm)).collect();
        lines.push(format!(
            "{:<28} {:>6} {:>6} {:>10} {:>10} {:>10}",
            l.id, l.m, l.n, counts[0], counts[1], counts[2]
        ));
        let mut row = vec![l.id.clone(), format!("{:?}", l.role).to_lowercase(), l.m.to_string(), l.n.to_string()];
        row.extend(counts.iter().map(usize::to_string));
        rows.push(row);
    }
    let totals: Vec<usize> = methods.iter().map(|(_, cm)| count_params(&model, *cm)).collect();
    let mut total_row = vec!["total".to_string(), String::new(), String::new(), String::new()];
    total_row.extend(totals.iter().map(usize::to_string));
    rows.push(total_row);
    m.write(
        &dir,
        "counts.csv",
        csv(&["layer", "role", "m", "n", "affiner", "lora", "bias_only"], &rows).as_bytes(),
    )?;

    lines.push(format!("backbone parameters {}", model.backbone_total));
    let selected = CountMethod::from(c.method(&arch)?);
    let selected = match selected {
        CountMethod::Affiner { rank, .. } => CountMethod::Affiner { rank, parts },
        other => other,
    };
    for ((name, cm), total) in methods.iter().zip(&totals) {
        let frac = trainable_fraction(model.backbone_total, *total)?;
        let mark = if *cm == selected { " *" } else { "" };
        lines.push(format!("{name:<10} {total:>11} ({:.3}% of total){mark}", frac.of_total));
    }
    if arch == ArchConfig::dit_xl() {
        let reference = reference_counts(&model);
        m.write(&dir, "reference_counts.csv", reference_csv(&reference).as_bytes())?;
        lines.extend(reference.iter().map(ReferenceCount::describe));
    }
    m.set("rank", rank);
    finish(dir, m, lines)
}

/// Loads a config file, or starts from the command's defaults.
pub fn load_config(command: Command, path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let c = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(command),
    };
    if c.command != command {
        bail!("config is for `{}`, not `{}`", c.command.name(), command.name());
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rows_for_the_large_transformer() {
        let rows = reference_counts(&ArchConfig::dit_xl().count_model());
        let bias = &rows[0];
        // 28 blocks × (4·1152 attention + 4·1152 + 1152 MLP + 6·1152 modulation)
        assert_eq!(bias.computed, 28 * 15 * 1152);
        for r in &rows {
            if let Some(ok) = r.within(0.15) {
                assert!(ok, "{} off by {:?}", r.label, r.relative_error());
            }
        }
        assert_eq!(rows.iter().filter(|r| r.reported.is_none()).count(), 3);
    }

    #[test]
    fn variant_names() {
        assert_eq!(variant("b-only", 3).unwrap().parts, AffinerParts::SHIFT_ONLY);
        assert_eq!(variant("lora", 3).unwrap().method, Method::Lora { rank: 3 });
        assert_eq!(variant("bias-only", 3).unwrap().method, Method::BiasOnly);
        assert!(variant("everything", 3).is_err());
    }

    #[test]
    fn row_slices() {
        let t = Tensor::<F>::from_fn(vec![3, 2], |i| i as F);
        assert_eq!(rows(&t, 1, 3).data(), &[2.0, 3.0, 4.0, 5.0]);
    }
}
