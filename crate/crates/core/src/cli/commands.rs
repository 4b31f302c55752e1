use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{scan_dataset, DatasetIndex, EMOTION_NAMES, NUM_EMOTIONS};
use crate::features::MfccExtractor;
use crate::metrics::MetricsReport;
use crate::nn::{gradcheck_config, gradient_check, Model};
use crate::persistence::{
    config_differences, load_checkpoint, load_features, save_checkpoint, save_features, Checkpoint, FeatureArchive,
    FeatureRecord, TrainingMeta,
};
use crate::pipeline::{featurize_wav, Predictor};
use crate::train::{
    archive_samples, compare_architectures, epoch_log_csv, evaluate, prepare_data, split_archive, train_from, EpochLog,
    TrainError, TrainOutcome,
};
use crate::{AdamState, Error, Standardizer};

/// Featurization fails as a whole when more than this fraction of clips fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

pub struct Context {
    pub cfg: RunConfig,
    pub jobs: usize,
    pub digits: Option<usize>,
}

impl Context {
    fn num(&self, v: f64) -> String {
        match self.digits {
            Some(d) => format!("{v:.d$}"),
            None => format!("{v}"),
        }
    }

    fn data_root(&self) -> Result<&Path, Error> {
        self.cfg
            .data_root
            .as_deref()
            .ok_or_else(|| Error::Usage("no dataset root: pass --data, set SER_LSTM_DATA, or set data.root".into()))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, Error> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {} worker threads: {e}", self.jobs)))
    }
}

pub fn emit(out: &mut dyn Write, text: &str) -> Result<(), Error> {
    out.write_all(text.as_bytes()).map_err(|source| Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// `1234567` as `1,234,567`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn class_table(counts: &[usize; NUM_EMOTIONS]) -> String {
    let mut s = String::from("emotion\tcount\n");
    for (name, c) in EMOTION_NAMES.iter().zip(counts) {
        s.push_str(&format!("{name}\t{c}\n"));
    }
    s
}

pub fn scan(ctx: &Context, index_out: Option<&Path>, out: &mut dyn Write) -> Result<(), Error> {
    let index = scan_dataset(ctx.data_root()?, ctx.cfg.include_song)?;
    for w in &index.skipped {
        eprintln!("warning: skipped {}: {}", w.path.display(), w.reason);
    }
    if let Some(path) = index_out {
        write_file(path, index.to_jsonl())?;
    }
    emit(
        out,
        &format!(
            "entries\t{}\nskipped\t{}\n{}",
            index.len(),
            index.skipped.len(),
            class_table(&index.class_counts())
        ),
    )
}

pub fn featurize(ctx: &Context, archive_path: &Path, out: &mut dyn Write) -> Result<(), Error> {
    let root = ctx.data_root()?;
    let index: DatasetIndex = scan_dataset(root, ctx.cfg.include_song)?;
    let extractor = MfccExtractor::new(ctx.cfg.mfcc.clone())?;
    let started = Instant::now();
    let results: Vec<_> = ctx.pool()?.install(|| {
        index
            .entries()
            .par_iter()
            .map(|e| featurize_wav(&e.path, &extractor))
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = 0usize;
    for (entry, result) in index.entries().iter().zip(results) {
        match result {
            Ok((features, padded)) => records.push(FeatureRecord {
                path: entry.path.strip_prefix(root).unwrap_or(&entry.path).to_path_buf(),
                label: entry.label,
                padded,
                features,
            }),
            Err(e) => {
                failures += 1;
                eprintln!("warning: skipped {}: {e}", entry.path.display());
            }
        }
    }
    eprintln!(
        "featurized {} clips in {:.1} s",
        records.len(),
        started.elapsed().as_secs_f64()
    );
    let total = index.len();
    if failures as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::Data(format!(
            "{failures} of {total} clips failed to featurize (limit {:.0}%); no archive written",
            MAX_FAILURE_FRACTION * 100.0
        )));
    }
    let padded = records.iter().filter(|r| r.padded).count();
    let archive = FeatureArchive {
        mfcc: ctx.cfg.mfcc.clone(),
        records,
    };
    save_features(&archive, archive_path)?;
    write_file(&index_path(archive_path), archive.index_text())?;
    emit(
        out,
        &format!(
            "records\t{}\nfailed\t{failures}\npadded\t{padded}\narchive\t{}\n",
            archive.records.len(),
            archive_path.display()
        ),
    )
}

pub fn index_path(archive_path: &Path) -> PathBuf {
    let mut s = archive_path.as_os_str().to_os_string();
    s.push(".index.tsv");
    PathBuf::from(s)
}

fn load_archive(ctx: &Context, path: &Path) -> Result<FeatureArchive, Error> {
    let archive = load_features(path)?;
    if archive.mfcc != ctx.cfg.mfcc {
        return Err(Error::Usage(format!(
            "{} was featurized with different [mfcc] settings than this run configuration",
            path.display()
        )));
    }
    Ok(archive)
}

fn checkpoint(
    model: &Model,
    ctx: &Context,
    standardizer: &Standardizer,
    epoch: usize,
    test_accuracy: Option<f64>,
    optimizer: Option<&AdamState>,
) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        mfcc: ctx.cfg.mfcc.clone(),
        standardizer: standardizer.clone(),
        meta: TrainingMeta {
            seed: ctx.cfg.seed,
            epoch,
            lr0: ctx.cfg.lr0,
            schedule: ctx.cfg.lr_schedule(),
            split_fraction: ctx.cfg.split_fraction,
            speaker_disjoint: ctx.cfg.speaker_disjoint,
            test_accuracy,
        },
        optimizer: optimizer.cloned(),
    }
}

fn epoch_line(ctx: &Context, e: &EpochLog) -> String {
    format!(
        "epoch {:>3}  lr {}  loss {}  train_acc {}  test_acc {}",
        e.epoch,
        ctx.num(e.lr),
        ctx.num(e.train_loss),
        ctx.num(e.train_acc),
        e.test_acc.map_or_else(|| "-".to_string(), |v| ctx.num(v))
    )
}

pub fn train(ctx: &Context, features: &Path, dir: &Path, resume: Option<&Path>, out: &mut dyn Write) -> Result<(), Error> {
    let archive = load_archive(ctx, features)?;
    let model_cfg = ctx.cfg.model_config();
    model_cfg.validate()?;
    let train_cfg = ctx.cfg.train_config(ctx.jobs);
    let data = prepare_data(&archive, ctx.cfg.split_fraction, ctx.cfg.seed, ctx.cfg.speaker_disjoint)?;
    eprintln!("split: {} train / {} test", data.train.len(), data.test.len());

    let (model, optimizer, start_epoch) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let diffs = config_differences(&ckpt.model.config, &model_cfg);
            if !diffs.is_empty() {
                return Err(Error::Usage(format!(
                    "cannot resume {}: model configuration differs in {}",
                    path.display(),
                    diffs.join(", ")
                )));
            }
            if ckpt.meta.seed != ctx.cfg.seed || ckpt.meta.split_fraction != ctx.cfg.split_fraction {
                return Err(Error::Usage(format!(
                    "cannot resume {}: it was trained with seed {} and split fraction {}",
                    path.display(),
                    ckpt.meta.seed,
                    ckpt.meta.split_fraction
                )));
            }
            if ckpt.meta.epoch >= ctx.cfg.epochs {
                return Err(Error::Usage(format!(
                    "{} already completed {} of {} epochs",
                    path.display(),
                    ckpt.meta.epoch,
                    ctx.cfg.epochs
                )));
            }
            let optimizer = ckpt.resume_state()?.clone();
            (ckpt.model, optimizer, ckpt.meta.epoch)
        }
        None => {
            let model = Model::new(model_cfg.clone(), crate::rng::derive_seed(&[ctx.cfg.seed, 0x1417]))?;
            let optimizer = AdamState::new(train_cfg.adam, model.params.blocks());
            (model, optimizer, 0)
        }
    };

    create_dir(dir)?;
    let started = Instant::now();
    let result = train_from(model, optimizer, start_epoch, &train_cfg, &data.train, &data.test, |e| {
        eprintln!("{}  [{:.1} s]", epoch_line(ctx, e), started.elapsed().as_secs_f64());
    });
    let outcome: TrainOutcome = match result {
        Ok(o) => o,
        Err(TrainError::NonFiniteLoss { epoch, last_good }) => {
            let path = dir.join("last_good.ckpt");
            save_checkpoint(&checkpoint(&last_good, ctx, &data.standardizer, epoch - 1, None, None), &path)?;
            return Err(Error::Numeric(format!(
                "non-finite training loss in epoch {epoch}; last good parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let log_path = dir.join("epochs.csv");
    let mut log_text = epoch_log_csv(&outcome.log);
    if start_epoch > 0 {
        if let Ok(previous) = fs::read_to_string(&log_path) {
            let rows: String = log_text.lines().skip(1).map(|l| format!("{l}\n")).collect();
            log_text = previous + &rows;
        }
    }
    write_file(&log_path, log_text)?;
    write_file(&dir.join("run.conf"), ctx.cfg.to_text())?;
    let last = outcome.log.last().expect("at least one epoch");
    save_checkpoint(
        &checkpoint(&outcome.model, ctx, &data.standardizer, ctx.cfg.epochs, last.test_acc, Some(&outcome.optimizer)),
        dir.join("final.ckpt"),
    )?;
    save_checkpoint(
        &checkpoint(
            &outcome.best_model,
            ctx,
            &data.standardizer,
            outcome.best_epoch,
            outcome.best_test_accuracy,
            None,
        ),
        dir.join("best.ckpt"),
    )?;
    emit(
        out,
        &format!(
            "layers\t{}\nparams\t{}\nepochs\t{}\nfinal_train_loss\t{}\nfinal_test_accuracy\t{}\nbest_epoch\t{}\nbest_test_accuracy\t{}\n",
            model_cfg.num_lstm_layers,
            group_thousands(outcome.model.num_params()),
            ctx.cfg.epochs,
            ctx.num(last.train_loss),
            last.test_acc.map_or_else(|| "-".into(), |v| ctx.num(v)),
            outcome.best_epoch,
            outcome.best_test_accuracy.map_or_else(|| "-".into(), |v| ctx.num(v)),
        ),
    )
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    checkpoint: String,
    split: &'static str,
    emotion_names: [&'static str; NUM_EMOTIONS],
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn write_report_files(dir: &Path, stem: &str, title: &str, report: &MetricsReport) -> Result<(), Error> {
    write_file(&dir.join(format!("{stem}_confusion.csv")), report.confusion.to_csv(&EMOTION_NAMES))?;
    write_file(
        &dir.join(format!("{stem}_confusion.svg")),
        report.confusion.to_svg(&EMOTION_NAMES, title),
    )
}

fn report_table(ctx: &Context, rows: &[(String, &MetricsReport)]) -> String {
    let mut s = String::from("model\tlayers\tparams\tsamples\taccuracy\tmacro_f1\tmean_latency_s\tp95_latency_s\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.num_lstm_layers,
            group_thousands(r.num_params),
            r.samples,
            ctx.num(r.accuracy),
            ctx.num(r.macro_f1),
            ctx.num(r.latency.mean_s),
            ctx.num(r.latency.p95_s),
        ));
    }
    s
}

fn warn_undefined(name: &str, r: &MetricsReport) {
    for &c in &r.undefined_recall {
        eprintln!("warning: {name}: no {} samples evaluated; recall reported as 0", EMOTION_NAMES[c]);
    }
}

pub fn eval(ctx: &Context, features: &Path, checkpoints: &[PathBuf], dir: &Path, all: bool, out: &mut dyn Write) -> Result<(), Error> {
    let archive = load_features(features)?;
    create_dir(dir)?;
    let mut reports = Vec::new();
    for (k, path) in checkpoints.iter().enumerate() {
        let ckpt = load_checkpoint(path)?;
        if ckpt.mfcc != archive.mfcc {
            return Err(Error::Data(format!(
                "{} and {} use different MFCC settings",
                path.display(),
                features.display()
            )));
        }
        let ids: Vec<usize> = if all {
            (0..archive.records.len()).collect()
        } else {
            split_archive(&archive, ckpt.meta.split_fraction, ckpt.meta.seed, ckpt.meta.speaker_disjoint)?.test
        };
        let samples = archive_samples(&archive, &ids, &ckpt.standardizer)?;
        let report = evaluate(&ckpt.model, &samples)?;
        let stem = format!("eval{}_{}layer", k + 1, ckpt.model.config.num_lstm_layers);
        warn_undefined(&stem, &report);
        let record = EvalRecord {
            checkpoint: path.display().to_string(),
            split: if all { "all" } else { "test" },
            emotion_names: EMOTION_NAMES,
            report: &report,
        };
        write_file(&dir.join(format!("{stem}_metrics.json")), to_json(&record))?;
        let title = format!("{}-layer LSTM, accuracy {:.4}", ckpt.model.config.num_lstm_layers, report.accuracy);
        write_report_files(dir, &stem, &title, &report)?;
        reports.push((stem, report));
    }
    let rows: Vec<(String, &MetricsReport)> = reports.iter().map(|(s, r)| (s.clone(), r)).collect();
    emit(out, &report_table(ctx, &rows))
}

pub fn compare(ctx: &Context, features: &Path, dir: &Path, out: &mut dyn Write) -> Result<(), Error> {
    let archive = load_archive(ctx, features)?;
    let train_cfg = ctx.cfg.train_config(ctx.jobs);
    let base = ctx.cfg.model_config();
    let data = prepare_data(&archive, ctx.cfg.split_fraction, ctx.cfg.seed, ctx.cfg.speaker_disjoint)?;
    eprintln!("split: {} train / {} test", data.train.len(), data.test.len());
    let report = compare_architectures(&base, &train_cfg, &data.train, &data.test)?;
    create_dir(dir)?;
    write_file(&dir.join("compare.csv"), report.to_csv())?;
    write_file(&dir.join("compare.json"), to_json(&report))?;
    for (r, outcome) in report.reports.iter().zip(&report.outcomes) {
        let stem = format!("{}layer", r.num_lstm_layers);
        warn_undefined(&stem, r);
        write_file(&dir.join(format!("{stem}_metrics.json")), to_json(r))?;
        write_file(&dir.join(format!("{stem}_epochs.csv")), epoch_log_csv(&outcome.log))?;
        let title = format!("{}-layer LSTM, accuracy {:.4}", r.num_lstm_layers, r.accuracy);
        write_report_files(dir, &stem, &title, r)?;
        let last = outcome.log.last().and_then(|e| e.test_acc);
        save_checkpoint(
            &checkpoint(&outcome.model, ctx, &data.standardizer, ctx.cfg.epochs, last, Some(&outcome.optimizer)),
            dir.join(format!("{stem}.ckpt")),
        )?;
    }
    let rows: Vec<(String, &MetricsReport)> = report
        .reports
        .iter()
        .map(|r| (format!("{}layer", r.num_lstm_layers), r))
        .collect();
    emit(out, &report_table(ctx, &rows))
}

pub fn infer(ctx: &Context, checkpoint: &Path, wav: &Path, out: &mut dyn Write) -> Result<(), Error> {
    let predictor = Predictor::from_checkpoint(load_checkpoint(checkpoint)?)?;
    let p = predictor.predict_wav(wav)?;
    let mut s = String::from("emotion\tprobability\n");
    for (name, prob) in EMOTION_NAMES.iter().zip(&p.probabilities) {
        s.push_str(&format!("{name}\t{}\n", ctx.num(*prob)));
    }
    s.push_str(&format!("predicted\t{}\n", p.emotion_name()));
    emit(out, &s)
}

pub fn gradcheck(ctx: &Context, threshold: f64, out: &mut dyn Write) -> Result<(), Error> {
    let cfg = gradcheck_config();
    let started = Instant::now();
    let report = gradient_check(&cfg, ctx.cfg.seed)?;
    eprintln!("gradient check took {:.3} s", started.elapsed().as_secs_f64());
    let mut s = format!(
        "model\t{} layers, hidden {}, input {}, steps {}, classes {}\nstep\t{:e}\nblock\tparams\tmax_rel_error\n",
        cfg.num_lstm_layers, cfg.hidden_dim, cfg.input_dim, cfg.seq_len, cfg.num_classes, report.step
    );
    for b in &report.blocks {
        s.push_str(&format!("{}\t{}\t{:e}\n", b.name, b.params, b.max_rel_error));
    }
    let max = report.max_rel_error();
    s.push_str(&format!("total_params\t{}\nmax_rel_error\t{max:e}\n", report.total_params()));
    let flagged = report.flagged(threshold);
    s.push_str(&format!("result\t{}\n", if flagged.is_empty() { "PASS" } else { "FAIL" }));
    emit(out, &s)?;
    if flagged.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "relative error above {threshold:e} in: {}",
            flagged.join(", ")
        )))
    }
}
