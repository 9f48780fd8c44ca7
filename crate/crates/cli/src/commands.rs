use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use smoothbench::applications::{contrast_enhance, tone_map, Bilateral, Gaussian, HdrImage, Smoother};
use smoothbench::dataset::{render_statistics, synth_generate, vote_statistics, Dataset, Split, SynthSpec, VotePlan};
use smoothbench::grid::{method_label, METHOD_COUNT};
use smoothbench::metrics::{greedy_param_search, MethodResult, PoolingMode};
use smoothbench::models::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use smoothbench::report::{leaderboard, render_leaderboard, render_timing, timeit, to_json, LeaderboardEntry, TimingRow};
use smoothbench::trainer::{evaluate_images, train, TrainConfig};
use smoothbench::{Choice, GroundTruthSet, Image, LossKind, NeighborhoodSpec};
use smoothbench_annotate::{Service, ServiceConfig, SystemClock};

use crate::error::CliError;
use crate::{
    Command, EnhanceArgs, EvaluateArgs, GridsearchArgs, InferArgs, LossArg, Reference, ServeArgs, SmootherArgs, StatsArgs,
    SynthArgs, TimeitArgs, TonemapArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

/// Reference smoother settings used by `timeit`, `tonemap` and `enhance`.
const GAUSSIAN_SIGMA: f64 = 2.0;
const BILATERAL_SIGMA_SPACE: f64 = 3.0;
const BILATERAL_SIGMA_RANGE: f64 = 0.1;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Validate(a) => {
            let ds = open_dataset(&a.dataset)?;
            let m = ds.manifest();
            println!(
                "ok: {} images ({} train, {} test), {} votes",
                m.images.len(),
                ds.split_ids(Split::Train).len(),
                ds.split_ids(Split::Test).len(),
                ds.votes().len()
            );
            Ok(())
        }
        Command::Stats(a) => stats(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gridsearch(a) => gridsearch(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Timeit(a) => timeit_cmd(a),
        Command::Tonemap(a) => tonemap(a),
        Command::Enhance(a) => enhance(a),
        Command::Serve(a) => serve(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{}: no such file", path.display())))
    }
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.json");
    require_file(&manifest)?;
    Ok(Dataset::load_and_validate(&manifest)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_model(path: &Path) -> Result<Model> {
    require_file(path)?;
    let model = load_checkpoint(path)?.model;
    if !model.batch_norm_ready() {
        return Err(CliError::Validation(format!(
            "{}: batch-norm statistics were never initialized",
            path.display()
        )));
    }
    Ok(model)
}

/// Parses `NAME=PATH` into its two halves.
fn named_path(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(CliError::Usage(format!("expected NAME=PATH, got {s:?}"))),
    }
}

fn parse_cell(s: &str) -> Result<(u32, u32)> {
    let bad = || CliError::Usage(format!("expected M,P, got {s:?}"));
    let (m, p) = s.split_once(',').ok_or_else(bad)?;
    Ok((m.trim().parse().map_err(|_| bad())?, p.trim().parse().map_err(|_| bad())?))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.config {
        Some(path) => read_json(path)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(images, test_images, height, width, seed, votes_per_image, volunteers);
    if let Some(cell) = &a.unanimous {
        let (method, param) = parse_cell(cell)?;
        spec.vote_plan = VotePlan::Unanimous { method, param };
    }
    let report = synth_generate(&spec, &a.out)?;
    write_text(&a.out.join("synth_report.json"), &to_json(&report))?;
    println!(
        "wrote {} images ({} test) of {}x{} to {}",
        spec.images,
        spec.test_images,
        spec.height,
        spec.width,
        a.out.display()
    );
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let ds = open_dataset(&a.data.dataset)?;
    let s = vote_statistics(ds.tally());
    print!("{}", render_statistics(&s));
    let (top, votes) = s.top_method();
    println!();
    println!("top method: {} with {votes} of {} votes", method_label(top), s.total_votes);
    println!(
        "images whose top choice repeats at least 3 times: {} of {}",
        s.images_with_max_repeat_at_least(3),
        s.images
    );
    if let Some(path) = &a.json {
        write_text(path, &to_json(&s))?;
    }
    Ok(())
}

struct SplitData {
    ids: Vec<u32>,
    sets: Vec<GroundTruthSet>,
}

fn split_data(ds: &Dataset, split: Split) -> Result<SplitData> {
    let ids = ds.split_ids(split);
    if ids.is_empty() {
        return Err(CliError::Validation(format!("the {split:?} split is empty").to_lowercase()));
    }
    let sets = ids.iter().map(|&id| ds.ground_truth(id)).collect::<std::result::Result<_, _>>()?;
    Ok(SplitData { ids, sets })
}

fn grid_method(ds: &Dataset, data: &SplitData, method: u32, mode: PoolingMode) -> Result<MethodResult> {
    let missing = std::sync::Mutex::new(None);
    let result = greedy_param_search(method, &data.sets, mode, |param, i| {
        let choice = Choice::new(method, param).ok()?;
        match ds.candidate(data.ids[i], choice) {
            Ok(img) => Some(img),
            Err(e) => {
                missing.lock().unwrap().get_or_insert(e);
                None
            }
        }
    });
    if let Some(e) = missing.into_inner().unwrap() {
        return Err(e.into());
    }
    Ok(result?)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let checkpoints = a.checkpoint.iter().map(|s| named_path(s)).collect::<Result<Vec<_>>>()?;
    for (_, path) in &checkpoints {
        require_file(path)?;
    }
    if a.no_grid && checkpoints.is_empty() {
        return Err(CliError::Usage("nothing to evaluate: --no-grid without --checkpoint".into()));
    }
    let ds = open_dataset(&a.data.dataset)?;
    let split: Split = a.metric.split.into();
    let mode: PoolingMode = a.metric.mode.into();
    let data = split_data(&ds, split)?;

    let mut entries = Vec::new();
    if !a.no_grid {
        for method in 1..=METHOD_COUNT as u32 {
            let r = grid_method(&ds, &data, method, mode)?;
            entries.push(LeaderboardEntry {
                method: method_label(method).to_string(),
                wrmse: r.wrmse_star,
                wmae: r.wmae_star,
                wrmse_param: Some(r.wrmse_param),
                wmae_param: Some(r.wmae_param),
            });
        }
    }
    if !checkpoints.is_empty() {
        let images = ds.training_images(split)?;
        for (name, path) in &checkpoints {
            let model = load_model(path)?;
            info!("scoring {name} on {} images", images.len());
            let e = evaluate_images(&model, &images, mode)?;
            entries.push(LeaderboardEntry {
                method: name.clone(),
                wrmse: e.rmse,
                wmae: e.mae,
                wrmse_param: None,
                wmae_param: None,
            });
        }
    }
    let rows = leaderboard(&entries);
    print!("{}", render_leaderboard(&rows));
    if let Some(path) = &a.json {
        write_text(path, &to_json(&rows))?;
    }
    Ok(())
}

fn gridsearch(a: GridsearchArgs) -> Result<()> {
    let methods: Vec<u32> = match a.method {
        Some(m) if (1..=METHOD_COUNT as u32).contains(&m) => vec![m],
        Some(m) => return Err(CliError::Usage(format!("method {m} is outside 1..={METHOD_COUNT}"))),
        None => (1..=METHOD_COUNT as u32).collect(),
    };
    let ds = open_dataset(&a.data.dataset)?;
    let data = split_data(&ds, a.metric.split.into())?;
    let mode: PoolingMode = a.metric.mode.into();
    let mut results = Vec::new();
    for m in methods {
        let r = grid_method(&ds, &data, m, mode)?;
        println!("{}", method_label(m));
        println!("{:>8}{:>10}{:>10}", "param", "WRMSE", "WMAE");
        for (p, s) in r.settings.iter().enumerate() {
            let mark = |best: u32| if best == p as u32 + 1 { "*" } else { " " };
            println!(
                "{:>8}{:>9.2}{}{:>9.2}{}",
                p + 1,
                s.rmse,
                mark(r.wrmse_param),
                s.mae,
                mark(r.wmae_param)
            );
        }
        println!();
        results.push(r);
    }
    if let Some(path) = &a.json {
        write_text(path, &to_json(&results))?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::preset(&a.preset)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {:?}", a.preset)))?,
    };
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.max_steps {
        config.max_steps = v;
    }
    if let Some(v) = a.lr {
        config.adam.lr = v;
    }
    if let Some(v) = a.patch_size {
        config.patch_size = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.validation_interval {
        config.validation_interval = v;
    }
    if let Some(loss) = a.loss {
        config.loss = match loss {
            LossArg::L2 => LossKind::L2,
            LossArg::L1 => LossKind::L1,
            LossArg::L1Nb => LossKind::L1Nb {
                lambda: 1.0,
                window: NeighborhoodSpec::default(),
            },
        };
    }
    if let Some(l) = a.lambda {
        match &mut config.loss {
            LossKind::L1Nb { lambda, .. } => *lambda = l,
            _ => return Err(CliError::Usage("--lambda only applies to the l1-nb loss".into())),
        }
    }
    config.validate()?;

    let ds = open_dataset(&a.data.dataset)?;
    let images = ds.training_images(Split::Train)?;
    let validation = if ds.split_ids(Split::Test).is_empty() {
        Vec::new()
    } else {
        ds.training_images(Split::Test)?
    };
    info!(
        "training {:?} on {} images, patch {} batch {}",
        config.model.architecture,
        images.len(),
        config.patch_size,
        config.batch_size
    );
    let outcome = train(&config, &images, &validation)?;
    outcome.log.write(&a.log)?;
    save_checkpoint(
        &a.out,
        &outcome.model,
        Some(&outcome.optimizer),
        CheckpointMeta {
            step: outcome.steps,
            lr: outcome.optimizer.config.lr,
        },
    )?;
    let train_err = evaluate_images(&outcome.model, &images, PoolingMode::PerEntry)?;
    println!("stopped after {} steps ({:?})", outcome.steps, outcome.stop);
    for (step, from, to) in outcome.log.decay_events() {
        println!("learning rate {from:e} -> {to:e} at step {step}");
    }
    println!("train WRMSE {:.3}  WMAE {:.3}", train_err.rmse, train_err.mae);
    if !validation.is_empty() {
        let e = evaluate_images(&outcome.model, &validation, PoolingMode::PerEntry)?;
        println!("test WRMSE {:.3}  WMAE {:.3}", e.rmse, e.mae);
    }
    println!("checkpoint {}  log {}", a.out.display(), a.log.display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    require_file(&a.input)?;
    let model = load_model(&a.checkpoint)?;
    let img = Image::load(&a.input)?;
    model.forward(&img)?.save_png(&a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn reference_smoother(r: Reference) -> (String, Box<dyn Fn(&Image) -> Image>) {
    match r {
        Reference::Gaussian => {
            let f = Gaussian::new(GAUSSIAN_SIGMA);
            ("Gaussian".into(), Box::new(move |i| f.apply(i)))
        }
        Reference::Bilateral => {
            let f = Bilateral::new(BILATERAL_SIGMA_SPACE, BILATERAL_SIGMA_RANGE);
            ("Bilateral".into(), Box::new(move |i| f.apply(i)))
        }
    }
}

fn timeit_cmd(a: TimeitArgs) -> Result<()> {
    let checkpoints = a.checkpoint.iter().map(|s| named_path(s)).collect::<Result<Vec<_>>>()?;
    if checkpoints.is_empty() && a.reference.is_empty() {
        return Err(CliError::Usage("give at least one --checkpoint or --reference".into()));
    }
    let ds = open_dataset(&a.data.dataset)?;
    let split: Split = a.split.into();
    let images = ds
        .split_ids(split)
        .into_iter()
        .map(|id| ds.source(id))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if images.is_empty() {
        return Err(CliError::Validation(format!("the {split:?} split is empty").to_lowercase()));
    }
    let mut rows = Vec::new();
    for (name, path) in &checkpoints {
        let model = load_model(path)?;
        let t = timeit(|img| model.forward(img), &images, a.warmup);
        rows.push(TimingRow {
            method: name.clone(),
            seconds_per_image: t.mean_seconds,
        });
    }
    for &r in &a.reference {
        let (name, f) = reference_smoother(r);
        let t = timeit(|img| f(img), &images, a.warmup);
        rows.push(TimingRow {
            method: name,
            seconds_per_image: t.mean_seconds,
        });
    }
    print!("{}", render_timing(&rows));
    if let Some(path) = &a.json {
        write_text(path, &to_json(&rows))?;
    }
    Ok(())
}

fn with_smoother<T>(s: &SmootherArgs, f: impl FnOnce(&dyn SmootherRef) -> Result<T>) -> Result<T> {
    match &s.checkpoint {
        Some(path) => f(&load_model(path)?),
        None => match s.reference {
            Reference::Gaussian => f(&Gaussian::new(GAUSSIAN_SIGMA)),
            Reference::Bilateral => f(&Bilateral::new(BILATERAL_SIGMA_SPACE, BILATERAL_SIGMA_RANGE)),
        },
    }
}

/// Object-safe view of [`Smoother`] so the pipelines can take any of them.
trait SmootherRef {
    fn smooth_image(&self, img: &Image) -> std::result::Result<Image, smoothbench::applications::ApplicationError>;
}

impl<S: Smoother> SmootherRef for S {
    fn smooth_image(&self, img: &Image) -> std::result::Result<Image, smoothbench::applications::ApplicationError> {
        self.smooth(img)
    }
}

struct Dyn<'a>(&'a dyn SmootherRef);

impl Smoother for Dyn<'_> {
    fn smooth(&self, img: &Image) -> std::result::Result<Image, smoothbench::applications::ApplicationError> {
        self.0.smooth_image(img)
    }
}

fn tonemap(a: TonemapArgs) -> Result<()> {
    require_file(&a.input)?;
    let hdr = HdrImage::load(&a.input)?;
    let out = with_smoother(&a.smoother, |s| Ok(tone_map(&hdr, &Dyn(s), a.compression)?))?;
    out.save_png(&a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    require_file(&a.input)?;
    let img = Image::load(&a.input)?;
    let out = with_smoother(&a.smoother, |s| Ok(contrast_enhance(&img, &Dyn(s), a.gamma)?))?;
    out.save_png(&a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    require_file(&a.config)?;
    require_file(&a.data.dataset.join("manifest.json"))?;
    let config = ServiceConfig::load(&a.config)?;
    let service = Service::new(&a.data.dataset, config, Box::new(SystemClock))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    info!("listening on {}", a.addr);
    rt.block_on(smoothbench_annotate::serve(a.addr, Arc::new(service)))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.addr)))
}
