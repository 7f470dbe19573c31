use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dfvt_core::data::{gen_task, load_manifest, write_manifest, Dataset};
use dfvt_core::eval::{fuse_all, score_dataset, DatasetScores, MetricsReport};
use dfvt_core::learn::{finetune_incremental, train, AnchorSnapshot, History};
use dfvt_core::verify::{run_suite, SuiteOptions, TOLERANCE};
use dfvt_core::{Error, Model};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::{
    Command, EvalArgs, FinetuneArgs, Failure, FuseArgs, GenDataArgs, GradcheckArgs, Overrides, ScoreArgs,
    TrainArgs, EXIT_VERIFY,
};

type Outcome = Result<(), Failure>;

pub fn execute(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Finetune(a) => cmd_finetune(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Fuse(a) => cmd_fuse(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments<'_>) {
    // a closed stdout is not worth failing a finished run over
    let _ = writeln!(out, "{msg}");
}

fn load_config(o: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| Failure::usage(format!("--set {kv:?}: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.tsv")
    } else {
        data.to_path_buf()
    }
}

fn load_data(data: &Path) -> Result<Dataset, Failure> {
    Ok(load_manifest(&manifest_path(data))?)
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Outcome {
    let mut cfg = load_config(&a.overrides)?;
    if let Some(t) = &a.task {
        cfg.data.task = t.parse()?;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    if let Some(n) = a.n {
        cfg.data.n = n;
    }
    let d = &cfg.data;
    let dataset = gen_task(d.task, d.seed, d.n, d.geometry, &d.params)?;
    create_dir(&a.out)?;
    let path = write_manifest(&a.out, &dataset)?;
    say(
        out,
        format_args!("wrote {} {} videos to {}", dataset.len(), d.task.name(), path.display()),
    );
    Ok(())
}

fn finish_training(cfg: &RunConfig, model: &Model<f32>, history: &History, dir: &Path, out: &mut dyn Write) -> Outcome {
    create_dir(dir)?;
    let ckpt = dir.join(&cfg.output.checkpoint);
    checkpoint::save(&ckpt, model)?;
    write_file(&dir.join(&cfg.output.history), &history.to_tsv())?;
    match history.last() {
        Some(r) => say(
            out,
            format_args!(
                "epoch {} loss {:.4} train accuracy {:.4}; saved {}",
                r.epoch,
                r.mean_loss,
                r.train_accuracy,
                ckpt.display()
            ),
        ),
        None => say(out, format_args!("no epochs run; saved {}", ckpt.display())),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Outcome {
    let cfg = load_config(&a.overrides)?;
    let data = load_data(&a.data)?;
    let mut model = Model::<f32>::init(&cfg.model, cfg.model_seed)?;
    let history = train(&mut model, &data, &cfg.train)?;
    finish_training(&cfg, &model, &history, &a.out, out)
}

fn cmd_finetune(a: FinetuneArgs, out: &mut dyn Write) -> Outcome {
    let mut cfg = load_config(&a.overrides)?;
    if let Some(l) = a.lambda {
        cfg.set("train.anchor_weight", &l.to_string())
            .map_err(|e| Failure::usage(format!("--lambda: {e}")))?;
    }
    let mut model = checkpoint::load(&a.anchor)?;
    if model.config() != &cfg.model {
        return Err(Failure::usage(format!(
            "anchor {} was saved with a different model configuration than the run config",
            a.anchor.display()
        )));
    }
    let data = load_data(&a.data)?;
    let anchor = AnchorSnapshot::capture(model.params());
    let history = finetune_incremental(&mut model, &data, &anchor, &cfg.train)?;
    let drift = anchor.squared_distance(model.params())?;
    say(out, format_args!("squared distance to anchor {drift:.6e}"));
    finish_training(&cfg, &model, &history, &a.out, out)
}

fn check_score_args(s: &ScoreArgs) -> Outcome {
    if s.stride == 0 {
        return Err(Failure::usage("--stride must be positive"));
    }
    if !(0.0..=1.0).contains(&s.threshold) {
        return Err(Failure::usage("--threshold must lie in [0, 1]"));
    }
    Ok(())
}

/// Window-level and video-level metrics, labelled by prefix.
fn report(scores: &DatasetScores, window: usize, s: &ScoreArgs) -> Result<String, Failure> {
    let mut text = String::new();
    let _ = writeln!(text, "frames_per_window\t{window}");
    let _ = writeln!(text, "stride\t{}", s.stride);
    let _ = writeln!(text, "threshold\t{}", s.threshold);
    MetricsReport::compute(&scores.windows, s.threshold)?.write_lines("window.", &mut text);
    MetricsReport::compute(&scores.videos, s.threshold)?.write_lines("video.", &mut text);
    Ok(text)
}

fn summarize(out: &mut dyn Write, text: &str, path: &Path) {
    for prefix in ["window.", "video."] {
        if let Ok(m) = MetricsReport::parse_lines(text, prefix) {
            let auc = m.auc.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"));
            say(
                out,
                format_args!(
                    "{:<6} n {:>5}  accuracy {:.4}  f1 {:.4}  auc {auc}",
                    prefix.trim_end_matches('.'),
                    m.n,
                    m.accuracy,
                    m.f1
                ),
            );
        }
    }
    say(out, format_args!("report written to {}", path.display()));
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Outcome {
    check_score_args(&a.score)?;
    let model = checkpoint::load(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let window = a.score.window.unwrap_or(model.config().frames);
    let scores = score_dataset(&model, &data, window, a.score.stride)?;
    let text = report(&scores, window, &a.score)?;
    write_file(&a.report, &text)?;
    summarize(out, &text, &a.report);
    Ok(())
}

fn cmd_fuse(a: FuseArgs, out: &mut dyn Write) -> Outcome {
    check_score_args(&a.score)?;
    let ma = checkpoint::load(&a.ckpt_a)?;
    let mb = checkpoint::load(&a.ckpt_b)?;
    let data = load_data(&a.data)?;
    let window = a
        .score
        .window
        .unwrap_or(ma.config().frames.max(mb.config().frames));
    let sa = score_dataset(&ma, &data, window, a.score.stride)?;
    let sb = score_dataset(&mb, &data, window, a.score.stride)?;
    let fused = DatasetScores {
        windows: fuse_all(&sa.windows, &sb.windows)?,
        videos: fuse_all(&sa.videos, &sb.videos)?,
    };
    let text = report(&fused, window, &a.score)?;
    write_file(&a.report, &text)?;
    summarize(out, &text, &a.report);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Outcome {
    let seed = match (a.seed, &a.config) {
        (Some(s), _) => s,
        (None, Some(p)) => RunConfig::load(p)?.model_seed,
        (None, None) => 0,
    };
    let results = run_suite(&SuiteOptions {
        seed,
        fault: a.corrupt_op.clone(),
    })?;
    say(out, format_args!("{:<20} {:>6} {:>12}  status", "check", "coords", "max_rel_err"));
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        say(
            out,
            format_args!("{:<20} {:>6} {:>12.3e}  {status}", r.name, r.checked, r.max_rel_error),
        );
        if !r.passed() {
            failed.push(r);
        }
    }
    for r in &failed {
        if let Some(e) = &r.error {
            say(out, format_args!("{}: {e}", r.name));
        }
        if let Some(w) = &r.worst {
            say(
                out,
                format_args!(
                    "{}: worst at {}[{}] analytic {:.9e} numeric {:.9e} rel {:.3e}",
                    r.name, w.param, w.index, w.analytic, w.numeric, w.rel_error
                ),
            );
        }
    }
    if failed.is_empty() {
        say(out, format_args!("all {} checks below {TOLERANCE:e}", results.len()));
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|r| r.name.as_str()).collect();
        Err(Failure::new(
            EXIT_VERIFY,
            anyhow::anyhow!("gradient check failed: {}", names.join(", ")),
        ))
    }
}
