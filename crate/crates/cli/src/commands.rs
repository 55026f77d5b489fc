//! The six subcommands. Each reads the dataset (if any) from `data` and
//! writes its artifacts under `out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kspace_core::coils::rss_combine;
use kspace_core::experiment::{pipeline_timing, stacks_at, AugmentedSource, PreparedSample, STAGES};
use kspace_core::io::{read_ksp, write_ksp, DatasetManifest, ManifestEntry, MANIFEST_VERSION};
use kspace_core::metrics::{evaluate, pr_curve, roc_curve};
use kspace_core::model::{load_checkpoint, save_checkpoint, score_stacks, train, Classifier};
use kspace_core::phantom::{coil_maps, make_dataset, make_sample_with_maps, PhantomSpec, Split};
use kspace_core::pipeline::{ChannelSet, ChannelTag, PipelineKind};
use kspace_core::seeding::derive_seed;
use kspace_core::{ComplexTensor, Domain, RealPlane};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;
use crate::output::{csv_reader, csv_writer, write_pgm};

pub const MANIFEST_FILE: &str = "manifest.json";
const EVAL_TAG: u64 = 0xE7A1;
/// Decades of k-space magnitude shown in the log-scaled dumps.
const LOG_DECADES: f64 = 4.0;

type Result<T> = std::result::Result<T, CliError>;

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// File stem shared by the artifacts of one (pipeline, channels) pair.
pub fn artifact_tag(pipeline: PipelineKind, channels: ChannelSet) -> String {
    format!("{}_{}", pipeline.name(), channels.name().replace('+', "-"))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn spec(&self) -> &PhantomSpec {
        &self.manifest.spec
    }

    fn entries(&self, split: Option<Split>) -> Vec<&ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .collect()
    }

    fn read(&self, entry: &ManifestEntry) -> Result<ComplexTensor> {
        let path = self.root.join(&entry.path);
        let k = read_ksp(&path)?;
        let s = self.spec();
        let want = [s.n_avg, s.n_coil, s.matrix, s.matrix];
        if k.dims() != want || k.domain() != Domain::KSpace {
            return Err(CliError::Data(format!(
                "{}: dims {:?} ({:?}) do not match the manifest's {want:?} k-space",
                path.display(),
                k.dims(),
                k.domain()
            )));
        }
        Ok(k)
    }

    fn check_factors(&self, factors: &[usize]) -> Result<()> {
        let m = self.spec().matrix;
        match factors.iter().find(|&&r| r > m) {
            Some(r) => Err(CliError::Config(format!("factor {r} exceeds the dataset matrix {m}"))),
            None => Ok(()),
        }
    }

    fn prepare(&self, split: Option<Split>, factors: &[usize], cfg: &Config) -> Result<Vec<PreparedSample>> {
        self.check_factors(factors)?;
        let smaps = coil_maps(self.spec().matrix, self.spec().n_coil);
        self.entries(split)
            .par_iter()
            .map(|e| {
                let raw = self.read(e)?;
                Ok(PreparedSample::prepare(
                    &raw,
                    e.id,
                    e.label,
                    cfg.pipeline,
                    factors,
                    &cfg.prep,
                    Some(&smaps),
                )?)
            })
            .collect()
    }
}

fn unique(grid: &[usize]) -> Vec<usize> {
    let mut seen = Vec::new();
    for &r in grid {
        if !seen.contains(&r) {
            seen.push(r);
        }
    }
    seen
}

pub fn generate(cfg: &Config, out: &Path) -> Result<()> {
    let plan = make_dataset(&cfg.phantom, cfg.dataset.n_samples, cfg.dataset.fractions)?;
    let dir = out.join("samples");
    mkdir(&dir)?;
    let smaps = coil_maps(cfg.phantom.matrix, cfg.phantom.n_coil);
    let entries = plan
        .entries
        .par_iter()
        .map(|p| {
            let sample = make_sample_with_maps(&cfg.phantom, p.index, &smaps)?;
            let rel = PathBuf::from("samples").join(format!("{:06}.ksp", p.index));
            write_ksp(&out.join(&rel), &sample.kspace)?;
            Ok(ManifestEntry {
                id: p.index,
                path: rel,
                label: sample.label,
                split: p.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let positives = entries.iter().filter(|e| e.label == 1).count();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        spec: cfg.phantom.clone(),
        seed: cfg.seed,
        entries,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    eprintln!(
        "wrote {} samples ({} train, {} val, {} test; {positives} with lesion) to {}",
        manifest.entries.len(),
        plan.count(Split::Train),
        plan.count(Split::Val),
        plan.count(Split::Test),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunRow {
    id: u64,
    split: &'static str,
    label: u8,
    pipeline: &'static str,
    #[serde(rename = "R")]
    r: usize,
    energy: f64,
    file: String,
}

pub fn run(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let grid = unique(&cfg.eval.r_grid);
    let dir = out.join("run");
    mkdir(&dir)?;
    let prepared = ds.prepare(None, &grid, cfg)?;
    let splits: BTreeMap<u64, Split> = ds.entries(None).iter().map(|e| (e.id, e.split)).collect();
    let mut w = csv_writer(&out.join("run.csv"), "run/1")?;
    for s in &prepared {
        for &r in &grid {
            let k = s.kspace(r)?;
            let name = format!("{:06}_r{r}.ksp", s.id);
            write_ksp(&dir.join(&name), k)?;
            w.serialize(RunRow {
                id: s.id,
                split: split_name(splits[&s.id]),
                label: s.label,
                pipeline: cfg.pipeline.name(),
                r,
                energy: k.energy(),
                file: format!("run/{name}"),
            })?;
        }
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    eprintln!("processed {} samples at R = {grid:?}", prepared.len());
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    lr: f64,
}

pub fn train_cmd(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let train_set = ds.prepare(Some(Split::Train), &cfg.train_factors, cfg)?;
    let val_set = ds.prepare(Some(Split::Val), &cfg.train_factors, cfg)?;
    let source = |samples, flip_p| AugmentedSource {
        samples,
        set: cfg.channels,
        factors: cfg.train_factors.clone(),
        flip_p,
    };
    let outcome = train(
        Classifier::new(cfg.channels, cfg.seed),
        &source(&train_set, cfg.flip_p),
        &source(&val_set, 0.0),
        &cfg.train,
    )?;
    mkdir(out)?;
    let tag = artifact_tag(cfg.pipeline, cfg.channels);
    let ckpt = out.join(format!("model_{tag}.knet"));
    save_checkpoint(&outcome.model, &ckpt)?;
    let mut w = csv_writer(&out.join(format!("history_{tag}.csv")), "history/1")?;
    for h in &outcome.history {
        w.serialize(HistoryRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_loss: h.val_loss,
            lr: h.lr,
        })?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    eprintln!(
        "trained {} on {} samples: best epoch {} of {}{}; checkpoint {}",
        cfg.channels.name(),
        train_set.len(),
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    pipeline: &'static str,
    channels: &'static str,
    #[serde(rename = "R")]
    r: usize,
    auroc: f64,
    auroc_lo: f64,
    auroc_hi: f64,
    auprc: f64,
    auprc_lo: f64,
    auprc_hi: f64,
    n: usize,
    auroc_sd: f64,
    auprc_sd: f64,
    n_pos: usize,
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    id: u64,
    label: u8,
    #[serde(rename = "R")]
    r: usize,
    score: f64,
}

/// Scores the test split at every factor of the grid. With
/// `scores_from_labels` the labels themselves are the scores, which checks
/// the evaluation path without a model.
pub fn eval(
    cfg: &Config,
    data: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    scores_from_labels: bool,
) -> Result<()> {
    let ds = Dataset::open(data)?;
    let grid = unique(&cfg.eval.r_grid);
    ds.check_factors(&grid)?;
    let entries = ds.entries(Some(Split::Test));
    let labels: Vec<u8> = entries.iter().map(|e| e.label).collect();
    let ids: Vec<u64> = entries.iter().map(|e| e.id).collect();

    let (set, scores_at): (ChannelSet, Vec<Vec<f64>>) = if scores_from_labels {
        let s: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        (cfg.channels, grid.iter().map(|_| s.clone()).collect())
    } else {
        let default = out.join(format!("model_{}.knet", artifact_tag(cfg.pipeline, cfg.channels)));
        let model = load_checkpoint(checkpoint.unwrap_or(&default))?;
        let set = model.set();
        let test = ds.prepare(Some(Split::Test), &grid, cfg)?;
        let scores = grid
            .iter()
            .map(|&r| Ok(score_stacks(&model, &stacks_at(&test, set, r)?, cfg.train.normalize)?))
            .collect::<Result<Vec<_>>>()?;
        (set, scores)
    };

    mkdir(out)?;
    let tag = artifact_tag(cfg.pipeline, set);
    let mut w = csv_writer(&out.join(format!("eval_{tag}.csv")), "eval/1")?;
    let mut sw = csv_writer(&out.join(format!("scores_{tag}.csv")), "scores/1")?;
    for (&r, scores) in grid.iter().zip(&scores_at) {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(CliError::Numeric(format!("non-finite score at R = {r}")));
        }
        let rep = evaluate(scores, &labels, cfg.eval.bootstrap_iters, derive_seed(cfg.seed, r as u64, EVAL_TAG))?;
        w.serialize(EvalRow {
            pipeline: cfg.pipeline.name(),
            channels: set.name(),
            r,
            auroc: rep.auroc.point,
            auroc_lo: rep.auroc.low,
            auroc_hi: rep.auroc.high,
            auprc: rep.auprc.point,
            auprc_lo: rep.auprc.low,
            auprc_hi: rep.auprc.high,
            n: rep.n,
            auroc_sd: rep.auroc.std,
            auprc_sd: rep.auprc.std,
            n_pos: rep.n_pos,
        })?;
        for ((&id, &label), &score) in ids.iter().zip(&labels).zip(scores) {
            sw.serialize(ScoreRow { id, label, r, score })?;
        }
        eprintln!(
            "R = {r:>2}: AUROC {:.3} [{:.3}, {:.3}]  AUPRC {:.3} [{:.3}, {:.3}]",
            rep.auroc.point, rep.auroc.low, rep.auroc.high, rep.auprc.point, rep.auprc.low, rep.auprc.high
        );
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    sw.flush().map_err(|e| CliError::io(out, e))?;
    Ok(())
}

pub fn bench(cfg: &Config, out: &Path) -> Result<()> {
    let b = &cfg.bench;
    let run = pipeline_timing(&cfg.phantom, b.slices, b.factor, cfg.prep.acs_lines, &cfg.prep.grappa)?;
    mkdir(out)?;
    let path = out.join("bench.csv");
    let mut w = csv_writer(&path, "bench/1")?;
    let mut header = vec!["slice".to_string(), "pipeline".into(), "lstsq_solves".into()];
    header.extend(STAGES.iter().map(|(name, _)| format!("{name}_ms")));
    header.push("total_ms".into());
    w.write_record(&header)?;
    for (kind, runs) in [(PipelineKind::Pca, &run.proposed), (PipelineKind::Grappa, &run.standard)] {
        for (i, s) in runs.iter().enumerate() {
            let mut rec = vec![i.to_string(), kind.name().to_string(), s.lstsq_solves.to_string()];
            rec.extend(STAGES.iter().map(|(_, pick)| format!("{:.6}", pick(s).as_secs_f64() * 1e3)));
            rec.push(format!("{:.6}", s.timings.total().as_secs_f64() * 1e3));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    for kind in [PipelineKind::Pca, PipelineKind::Grappa] {
        let stages: Vec<String> = run
            .stage_medians(kind)
            .iter()
            .filter(|(_, d)| !d.is_zero())
            .map(|(n, d)| format!("{n} {:.2} ms", d.as_secs_f64() * 1e3))
            .collect();
        eprintln!("{:>6}: {}", kind.name(), stages.join(", "));
    }
    let (p, s) = (run.median_proposed(), run.median_standard());
    eprintln!(
        "median total: proposed {:.2} ms, standard {:.2} ms ({:.1}x); output fingerprint {:016x}",
        p.as_secs_f64() * 1e3,
        s.as_secs_f64() * 1e3,
        s.as_secs_f64() / p.as_secs_f64(),
        run.fingerprint
    );
    Ok(())
}

fn magnitude_from_k(re: &RealPlane, im: &RealPlane) -> Vec<f64> {
    re.data().iter().zip(im.data()).map(|(a, b)| a.hypot(*b)).collect()
}

/// `log10 |k|` mapped onto the top [`LOG_DECADES`] decades.
fn log_scaled(mag: &[f64]) -> Vec<f64> {
    let top = mag.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return vec![0.0; mag.len()];
    }
    let floor = top.log10() - LOG_DECADES;
    mag.iter()
        .map(|&m| if m > 0.0 { (m.log10() - floor).max(0.0) } else { 0.0 })
        .collect()
}

#[derive(Serialize)]
struct CurveRow {
    x: f64,
    y: f64,
}

pub fn plot(cfg: &Config, data: &Path, out: &Path, sample: Option<u64>) -> Result<()> {
    let ds = Dataset::open(data)?;
    let entries = ds.entries(None);
    let entry = match sample {
        Some(id) => entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| CliError::Data(format!("sample {id} is not in the manifest")))?,
        None => entries.first().ok_or_else(|| CliError::Data("manifest has no samples".into()))?,
    };
    let grid = unique(&cfg.eval.r_grid);
    ds.check_factors(&grid)?;
    let dir = out.join("plots");
    mkdir(&dir)?;
    let raw = ds.read(entry)?;
    let (h, w) = (raw.height(), raw.width());
    let reference = rss_combine(&raw.sum_averages().ifft2_centered()?)?;
    write_pgm(&dir.join(format!("{:06}_reference.pgm", entry.id)), w, h, reference.data())?;

    let smaps = coil_maps(ds.spec().matrix, ds.spec().n_coil);
    let prepared = PreparedSample::prepare(&raw, entry.id, entry.label, cfg.pipeline, &grid, &cfg.prep, Some(&smaps))?;
    for &r in &grid {
        let stack = prepared.stack(ChannelSet::MagK, r)?;
        let plane = |t| stack.channel(t).expect("mag+k stack has every channel");
        let stem = format!("{:06}_{}_r{r}", entry.id, cfg.pipeline.name());
        write_pgm(&dir.join(format!("{stem}_image.pgm")), w, h, plane(ChannelTag::MagImage).data())?;
        let k = magnitude_from_k(plane(ChannelTag::RealK), plane(ChannelTag::ImagK));
        write_pgm(&dir.join(format!("{stem}_kspace_log.pgm")), w, h, &log_scaled(&k))?;
    }

    let tag = artifact_tag(cfg.pipeline, cfg.channels);
    let scores_path = out.join(format!("scores_{tag}.csv"));
    let mut curves = 0;
    if scores_path.is_file() {
        let mut by_r: BTreeMap<usize, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for row in csv_reader(&scores_path)?.deserialize() {
            let row: ScoreRow = row?;
            let e = by_r.entry(row.r).or_default();
            e.0.push(row.score);
            e.1.push(row.label);
        }
        for (r, (scores, labels)) in &by_r {
            for (kind, pts) in [("roc", roc_curve(scores, labels)?), ("pr", pr_curve(scores, labels)?)] {
                let path = dir.join(format!("{kind}_{tag}_r{r}.csv"));
                let mut cw = csv_writer(&path, if kind == "roc" { "roc/1 x=fpr y=tpr" } else { "pr/1 x=recall y=precision" })?;
                for (x, y) in pts {
                    cw.serialize(CurveRow { x, y })?;
                }
                cw.flush().map_err(|e| CliError::io(&path, e))?;
                curves += 1;
            }
        }
    }
    eprintln!(
        "wrote {} images and {curves} curves for sample {} to {}",
        1 + 2 * grid.len(),
        entry.id,
        dir.display()
    );
    Ok(())
}
