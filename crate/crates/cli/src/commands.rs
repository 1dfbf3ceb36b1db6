use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sdl_core::ablate::{self, CellSummary};
use sdl_core::eval::{self, GroundTruth, PrfAtK, RankedTag, ScoreMatrix};
use sdl_core::gradcheck::{self, GradcheckConfig, GradcheckReport};
use sdl_core::optim::{self, write_log};
use sdl_core::wordvec::{canonicalize, parse_vec_file};
use sdl_core::{
    synth, Dataset, EpochLog, HeadShape, MetricsReport, ModelParams, SynthConfig, Task, TrainConfig, Variant,
    WordVecTable,
};
use serde::Serialize;

use crate::args::*;
use crate::output::{emit, write_json, write_jsonl};
use crate::Failure;

pub fn run(cli: Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::runtime(format!("cannot start thread pool: {e}")))?;
    let json = cli.json;
    match cli.command {
        Command::Synth(a) => synth_cmd(a, json),
        Command::Train(a) => train_cmd(a, cli.threads, json),
        Command::Eval(a) => eval_cmd(a, json),
        Command::Rank(a) => rank_cmd(a, json),
        Command::Retrieve(a) => retrieve_cmd(a, json),
        Command::Report(a) => report_cmd(a, json),
        Command::Gradcheck(a) => gradcheck_cmd(a, json),
        Command::Ablate(a) => ablate_cmd(a, cli.threads, json),
    }
}

fn load_data(d: &DataArgs) -> Result<(Dataset, WordVecTable), Failure> {
    let wordvecs = parse_vec_file(&d.wordvecs)?;
    let dataset = Dataset::load(&d.features, &d.labels, &d.seen, &d.unseen)?;
    Ok((dataset, wordvecs))
}

/// Rows implied by `--m` and `--variant`: fast0tag has exactly one.
fn resolve_rows(loss: &LossArgs) -> Result<usize, Failure> {
    match (loss.variant, loss.m) {
        (VariantArg::Fast0tag, None | Some(1)) => Ok(1),
        (VariantArg::Fast0tag, Some(m)) => Err(Failure::usage(format!("--variant fast0tag needs --m 1, got {m}"))),
        (_, Some(0)) => Err(Failure::usage("--m must be at least 1")),
        (_, Some(m)) => Ok(m),
        (_, None) => Ok(7),
    }
}

#[derive(Serialize)]
struct SynthSummary {
    out: PathBuf,
    config: SynthConfig,
    train_images: usize,
    test_images: usize,
    seen_labels: usize,
    unseen_labels: usize,
}

fn synth_cmd(a: SynthArgs, json: bool) -> Result<(), Failure> {
    let config = SynthConfig {
        word_dim: a.word_dim,
        feature_dim: a.feature_dim,
        groups: a.groups,
        labels_per_group: a.labels_per_group,
        unseen_per_group: a.unseen_per_group,
        n_images: a.n_images,
        n_test: a.n_test,
        min_labels: a.min_labels,
        max_labels: a.max_labels,
        diversity_mix: a.diversity_mix,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let world = synth::generate(&config)?;
    world.save(&a.out)?;
    write_json(&a.out.join("synth_config.json"), &config)?;
    let split = world.train.split();
    let summary = SynthSummary {
        out: a.out,
        train_images: world.train.len(),
        test_images: world.test.len(),
        seen_labels: split.seen.len(),
        unseen_labels: split.unseen.len(),
        config,
    };
    emit(json, &summary, || {
        format!(
            "wrote {}\ntrain images  {}\ntest images   {}\nseen labels   {}\nunseen labels {}\n",
            summary.out.display(),
            summary.train_images,
            summary.test_images,
            summary.seen_labels,
            summary.unseen_labels
        )
    })
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    log: PathBuf,
    shape: HeadShape,
    config: TrainConfig,
    epochs: Vec<EpochLog>,
}

fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

fn train_cmd(a: TrainArgs, threads: usize, json: bool) -> Result<(), Failure> {
    let rows = resolve_rows(&a.loss)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        max_lr: a.lr,
        weight_decay: a.wd,
        lambda: a.loss.lambda,
        rows,
        variant: a.loss.variant.into(),
        use_sdw: !a.loss.no_sdw,
        seed: a.seed,
        threads,
    };
    cfg.validate()?;
    let (dataset, wordvecs) = load_data(&a.data)?;
    let outcome = optim::train(&dataset, &wordvecs, &cfg)?;
    outcome.params.save_checkpoint(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| default_log_path(&a.out));
    let file = std::fs::File::create(&log_path)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", log_path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_log(&mut w, &outcome.log)
        .and_then(|_| std::io::Write::flush(&mut w))
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", log_path.display())))?;

    let summary = TrainSummary {
        checkpoint: a.out,
        log: log_path,
        shape: outcome.params.shape(),
        config: cfg,
        epochs: outcome.log,
    };
    emit(json, &summary, || {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:>10}  {:>10}  {:>10}  {:>8}  {:>9}",
            "epoch", "loss", "l_rank", "l_reg", "omega_d", "lr"
        );
        for e in &summary.epochs {
            let _ = writeln!(
                s,
                "{:>5}  {:>10.5}  {:>10.5}  {:>10.4e}  {:>8.4}  {:>9.3e}",
                e.epoch, e.mean_loss, e.mean_l_rank, e.mean_l_reg, e.mean_omega_d, e.lr
            );
        }
        let skipped = summary.epochs.first().map_or(0, |e| e.skipped_samples);
        let _ = writeln!(s, "skipped samples {skipped}");
        let _ = writeln!(s, "checkpoint {}", summary.checkpoint.display());
        s
    })
}

struct Scored {
    matrix: ScoreMatrix,
    truth: GroundTruth,
    task: Task,
    variant: Variant,
}

fn score(a: &ScoreArgs) -> Result<Scored, Failure> {
    let params = ModelParams::load_checkpoint(&a.checkpoint)?;
    let (dataset, wordvecs) = load_data(&a.data)?;
    let task: Task = a.task.into();
    let variant: Variant = a.variant.into();
    if variant == Variant::Fast0Tag && params.shape().rows != 1 {
        return Err(Failure::usage(format!(
            "--variant fast0tag needs a single-row checkpoint, got {} rows",
            params.shape().rows
        )));
    }
    let tags = task.tags(&dataset);
    let matrix = eval::score_all(&params, &dataset, &wordvecs, &tags, variant)?;
    let truth = GroundTruth::from_dataset(&dataset, &tags)?;
    Ok(Scored {
        matrix,
        truth,
        task,
        variant,
    })
}

#[derive(Serialize)]
struct EvalOutput {
    task: Task,
    variant: Variant,
    #[serde(flatten)]
    report: MetricsReport,
}

fn prf_table(s: &mut String, at_k: &[PrfAtK]) {
    let _ = writeln!(s, "{:>4}  {:>9}  {:>7}  {:>7}", "K", "precision", "recall", "f1");
    for r in at_k {
        let _ = writeln!(s, "{:>4}  {:>9.4}  {:>7.4}  {:>7.4}", r.k, r.precision, r.recall, r.f1);
    }
}

fn eval_cmd(a: EvalArgs, json: bool) -> Result<(), Failure> {
    if a.k.contains(&0) {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let sc = score(&a.score)?;
    let report = eval::evaluate(&sc.matrix, &sc.truth, &a.k)?;
    let out = EvalOutput {
        task: sc.task,
        variant: sc.variant,
        report,
    };
    if let Some(path) = &a.out {
        write_json(path, &out)?;
    }
    emit(json, &out, || {
        let r = &out.report;
        let mut s = String::new();
        let task = if out.task == Task::Zsl { "zsl" } else { "gzsl" };
        let _ = writeln!(s, "task     {task}\nvariant  {}", out.variant);
        let _ = writeln!(s, "images   {}\ntags     {}", r.n_images, r.n_tags);
        let _ = writeln!(s, "mAP      {:.4}", r.map);
        if !r.skipped_labels.is_empty() {
            let _ = writeln!(s, "skipped  {} tags without relevant images", r.skipped_labels.len());
        }
        prf_table(&mut s, &r.at_k);
        s
    })
}

#[derive(Serialize)]
struct ImageTags {
    image_id: String,
    tags: Vec<RankedTag>,
}

fn rank_cmd(a: RankArgs, json: bool) -> Result<(), Failure> {
    if a.k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let sc = score(&a.score)?;
    let m = &sc.matrix;
    let ranked: Vec<ImageTags> = (0..m.n_images())
        .map(|i| ImageTags {
            image_id: m.image_ids[i].clone(),
            tags: eval::top_k_tags(m, i, a.k)
                .into_iter()
                .map(|j| RankedTag {
                    tag: m.tags[j].clone(),
                    score: m.get(i, j),
                    row: m.row_of(i, j),
                    relevant: sc.truth.is_relevant(i, j),
                })
                .collect(),
        })
        .collect();
    if let Some(path) = &a.out {
        write_jsonl(path, &ranked)?;
    }
    emit(json, &ranked, || {
        let width = ranked.iter().map(|r| r.image_id.len()).max().unwrap_or(0);
        let mut s = String::new();
        for r in &ranked {
            let tags: Vec<String> = r
                .tags
                .iter()
                .map(|t| format!("{}{}", t.tag, if t.relevant { "*" } else { "" }))
                .collect();
            let _ = writeln!(s, "{:<width$}  {}", r.image_id, tags.join(" "));
        }
        s
    })
}

#[derive(Serialize)]
struct Hit {
    rank: usize,
    image_id: String,
    score: f64,
    relevant: bool,
}

fn retrieve_cmd(a: RetrieveArgs, json: bool) -> Result<(), Failure> {
    if a.top == 0 {
        return Err(Failure::usage("--top must be at least 1"));
    }
    let params = ModelParams::load_checkpoint(&a.score.checkpoint)?;
    let (dataset, wordvecs) = load_data(&a.score.data)?;
    let tag = canonicalize(&a.tag);
    let matrix = eval::score_all(
        &params,
        &dataset,
        &wordvecs,
        std::slice::from_ref(&tag),
        a.score.variant.into(),
    )?;
    let position: std::collections::HashMap<&str, usize> = dataset
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let hits: Vec<Hit> = eval::retrieve(&matrix, &tag, a.top)?
        .into_iter()
        .enumerate()
        .map(|(r, h)| Hit {
            rank: r + 1,
            relevant: dataset.labels(position[h.image_id.as_str()]).contains(&tag),
            image_id: h.image_id,
            score: h.score,
        })
        .collect();
    if let Some(path) = &a.out {
        write_json(path, &hits)?;
    }
    emit(json, &hits, || {
        let mut s = String::new();
        let _ = writeln!(s, "{:>4}  {:<12}  {:>10}  relevant", "rank", "image", "score");
        for h in &hits {
            let _ = writeln!(
                s,
                "{:>4}  {:<12}  {:>10.5}  {}",
                h.rank,
                h.image_id,
                h.score,
                if h.relevant { "yes" } else { "no" }
            );
        }
        s
    })
}

fn report_cmd(a: ReportArgs, json: bool) -> Result<(), Failure> {
    if a.k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let sc = score(&a.score)?;
    let report = eval::row_attribution_report(&sc.matrix, &sc.truth, a.k)?;
    if let Some(path) = &a.out {
        write_jsonl(path, &report)?;
    }
    let rows = ModelParams::load_checkpoint(&a.score.checkpoint)?.shape().rows;
    emit(json, &report, || {
        let mut per_row = vec![(0usize, 0usize); rows];
        for img in &report {
            for (r, tags) in &img.rows {
                per_row[*r].0 += tags.len();
                per_row[*r].1 += tags.iter().filter(|t| t.relevant).count();
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "images {}, top {} tags each", report.len(), a.k);
        let _ = writeln!(s, "{:>4}  {:>8}  {:>8}", "row", "tags", "relevant");
        for (r, (n, rel)) in per_row.iter().enumerate() {
            let _ = writeln!(s, "{r:>4}  {n:>8}  {rel:>8}");
        }
        s
    })
}

fn gradcheck_cmd(a: GradcheckArgs, json: bool) -> Result<(), Failure> {
    if a.instances == 0 {
        return Err(Failure::usage("--instances must be at least 1"));
    }
    let mut cfg = GradcheckConfig {
        instances: a.instances,
        seed: a.seed,
        flip_sign: a.inject_sign_flip,
        ..GradcheckConfig::default()
    };
    if !a.variant.is_empty() {
        cfg.variants = a.variant.iter().map(|&v| v.into()).collect();
        cfg.variants.dedup();
    }
    let report: GradcheckReport = gradcheck::run(&cfg)?;
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    emit(json, &report, || {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<9}  {:<15}  {:>7}  {:>8}  {:>10}  result",
            "variant", "target", "checked", "excluded", "max_rel"
        );
        for r in &report.results {
            let _ = writeln!(
                s,
                "{:<9}  {:<15}  {:>7}  {:>8}  {:>10.3e}  {}",
                r.variant.as_str(),
                r.target,
                r.checked,
                r.excluded,
                r.max_relative_error,
                if r.passed() { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "max relative error {:.3e} (tolerance {:.0e})",
            report.max_relative_error(),
            gradcheck::TOLERANCE
        );
        s
    })?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::runtime("gradient check failed"))
    }
}

#[derive(Serialize)]
struct AblateOutput<'a> {
    mode: &'static str,
    seeds: &'a [u64],
    cells: Vec<CellSummary>,
}

fn ablate_cmd(a: AblateArgs, threads: usize, json: bool) -> Result<(), Failure> {
    if a.seeds.is_empty() {
        return Err(Failure::usage("--seeds needs at least one seed"));
    }
    if a.k.contains(&0) {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let (mode, cells) = match a.mode {
        AblateMode::Grid => {
            if !a.m.is_empty() || !a.lambda.is_empty() {
                return Err(Failure::usage("grid mode takes no --m or --lambda"));
            }
            ("grid", ablate::component_grid())
        }
        AblateMode::MSweep => {
            let rows = if a.m.is_empty() {
                vec![1, 2, 3, 5, 9]
            } else {
                a.m.clone()
            };
            if rows.contains(&0) {
                return Err(Failure::usage("--m must be at least 1"));
            }
            (
                "m-sweep",
                ablate::rows_sweep(&rows, a.lambda.first().copied().unwrap_or(0.3)),
            )
        }
        AblateMode::LambdaSweep => {
            let lambdas = if a.lambda.is_empty() {
                vec![0.0, 0.1, 0.3]
            } else {
                a.lambda.clone()
            };
            let rows = a.m.first().copied().unwrap_or(7);
            if rows == 0 {
                return Err(Failure::usage("--m must be at least 1"));
            }
            ("lambda-sweep", ablate::lambda_sweep(rows, &lambdas))
        }
    };
    let base = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        max_lr: a.lr,
        weight_decay: a.wd,
        threads,
        ..TrainConfig::default()
    };
    for cell in &cells {
        cell.apply(&base, 0).validate()?;
    }
    let dir = &a.data;
    let wordvecs = parse_vec_file(dir.join("wordvecs.vec"))?;
    let (seen, unseen) = (dir.join("seen.txt"), dir.join("unseen.txt"));
    let train_set = Dataset::load(dir.join("train.sdlf"), dir.join("train_labels.tsv"), &seen, &unseen)?;
    let test_set = Dataset::load(dir.join("test.sdlf"), dir.join("test_labels.tsv"), &seen, &unseen)?;
    let summaries = ablate::run_grid(&cells, &base, &a.seeds, &train_set, &test_set, &wordvecs, &a.k)?;
    let out = AblateOutput {
        mode,
        seeds: &a.seeds,
        cells: summaries,
    };
    if let Some(path) = &a.out {
        write_json(path, &out)?;
    }
    emit(json, &out, || ablate::render_table(&out.cells))
}
