//! The experiment steps and the order they depend on each other.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ntk_features::data::{gen_modadd_dataset, gen_tms_dataset, split_train_test, FourierFamily};
use ntk_features::disentangle::{
    axis_laplacian, disentangle_over_time, two_stage_rotation, CliffSelector, EpochDisentanglement,
    Keep, RotationPlan,
};
use ntk_features::entk::{
    assemble_kernel_capped, kernel_dim, kernel_spectrum, load_kernel, save_kernel, Collapse,
    FactoredKernel, KernelSpec,
};
use ntk_features::io::{f64_from_le_bytes, f64_le_bytes, sha256_hex};
use ntk_features::linalg::SolverTag;
use ntk_features::models::{
    load_checkpoint, reconstructed_feature_count, Checkpoint, LayerSelection,
};
use ntk_features::spectral::{
    alignment_heatmap, detect_cliffs, expanded_data_matrix, family_heatmap, fourier_groups,
    match_features, spectrum_csv, spectrum_over_time, AlignmentHeatmap, CliffReport, FeatureGroup,
    FeatureMatch,
};
use ntk_features::training::{
    detect_grokking, train_modadd, train_tms, DirSink, Start, TrainHistory,
};
use ntk_features::{Dataset, Error, Matrix, ModelParams, Spectrum};

use crate::config::{AnalysisStep, CliffChoice, ConfigError, Experiment, ExperimentConfig};
use crate::output::Writer;

/// Written after a completed training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub training_hash: String,
    pub final_epoch: usize,
    pub checkpoints: Vec<usize>,
    pub grok_epoch: Option<usize>,
}

/// One requested kernel at one checkpoint, resolved to its cache entry.
#[derive(Clone, Debug)]
pub struct KernelEntry {
    pub label: String,
    pub spec: KernelSpec,
    pub key: String,
    /// Dense kernels are cached whole; larger ones as their top eigenpairs.
    pub dense: bool,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: Writer,
    pub force: bool,
    /// Kernels built in this process; `force` never rebuilds them twice.
    built: RefCell<HashSet<String>>,
}

fn figure(n: usize) -> String {
    format!("fig{n}")
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Self {
        let out = Writer {
            root: cfg.out.clone(),
            config_hash: cfg.hash(),
        };
        Self {
            cfg,
            out,
            force,
            built: RefCell::default(),
        }
    }

    fn ckpt_dir(&self) -> PathBuf {
        self.out.path("train/checkpoints")
    }

    fn kernel_dir(&self) -> PathBuf {
        self.out.path("kernels")
    }

    fn ckpt_path(&self, epoch: usize) -> PathBuf {
        DirSink::path_for(&self.ckpt_dir(), epoch)
    }

    fn half(&self) -> usize {
        self.cfg.modadd.as_ref().map_or(0, |m| m.p / 2)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let seed = self.cfg.seed;
        Ok(match (&self.cfg.tms, &self.cfg.modadd) {
            (Some(t), _) => gen_tms_dataset(t.n, t.samples, t.sparsity, seed)?,
            (_, Some(m)) => split_train_test(&gen_modadd_dataset(m.p)?, m.alpha, seed)?,
            _ => unreachable!("validated"),
        })
    }

    pub fn load_state(&self) -> Option<TrainState> {
        let bytes = fs::read(self.out.path("train/state.json")).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Current state if it belongs to this config and its final checkpoint
    /// is still on disk.
    fn valid_state(&self) -> Option<TrainState> {
        self.load_state().filter(|s| {
            s.training_hash == self.cfg.training_hash() && self.ckpt_path(s.final_epoch).exists()
        })
    }

    fn existing_checkpoints(&self) -> Vec<usize> {
        let mut epochs: Vec<usize> = fs::read_dir(self.ckpt_dir())
            .into_iter()
            .flatten()
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                name.strip_prefix("epoch_")?
                    .strip_suffix(".ckpt")?
                    .parse()
                    .ok()
            })
            .collect();
        epochs.sort_unstable();
        epochs
    }

    // ---- train ----

    pub fn train(&self, resume: bool) -> Result<TrainState> {
        if !self.force {
            if let Some(s) = self.valid_state() {
                log::info!("train: up to date (final epoch {})", s.final_epoch);
                return Ok(s);
            }
        }
        let ds = self.dataset()?;
        let tc = self.cfg.train_config();
        let existing = self.existing_checkpoints();
        let (start, mut history) = match existing.last() {
            Some(&last) if resume && !self.force => {
                let ck = load_checkpoint::<f64>(&self.ckpt_path(last))?;
                let old =
                    TrainHistory::load_csv(&self.out.path("train/history.csv")).unwrap_or_default();
                log::info!("train: resuming from epoch {last}");
                let records = old.records.into_iter().filter(|r| r.epoch < last).collect();
                let h = TrainHistory {
                    records,
                    ..Default::default()
                };
                (Start::Resume(ck), h)
            }
            Some(_) if !self.force && !resume => bail!(
                "{} already holds checkpoints from another run; pass --resume or --force",
                self.ckpt_dir().display()
            ),
            _ => {
                if self.force {
                    let _ = fs::remove_dir_all(self.out.path("train"));
                }
                let init = ntk_features::training::init_params(self.cfg.arch(), self.cfg.seed);
                (Start::Fresh(init), TrainHistory::default())
            }
        };
        if let Start::Resume(ck) = &start {
            if ck.epoch >= tc.epochs {
                return self.finish_training(history, &existing);
            }
        }
        let mut sink = DirSink::new(self.ckpt_dir())?;
        let new = match self.cfg.experiment {
            Experiment::Tms => {
                let imp = self.cfg.importance();
                train_tms(&ds, &imp, start, &tc, &mut sink)?.1
            }
            Experiment::Modadd => train_modadd(&ds, start, &tc, &mut sink)?.1,
        };
        history.records.extend(new.records);
        let last = history.records.last().map(|r| r.epoch);
        log::info!(
            "train: finished at epoch {} (loss {:.3e})",
            last.unwrap_or(0),
            history.records.last().map_or(f64::NAN, |r| r.train_loss)
        );
        let epochs = self.existing_checkpoints();
        self.finish_training(history, &epochs)
    }

    fn finish_training(&self, history: TrainHistory, epochs: &[usize]) -> Result<TrainState> {
        for &e in epochs {
            self.out.stamp(&self.ckpt_path(e), Some(e), None)?;
        }
        self.out
            .write("train/history.csv", &history.to_csv()?, None, None)?;
        let state = TrainState {
            training_hash: self.cfg.training_hash(),
            final_epoch: *epochs
                .last()
                .ok_or_else(|| anyhow!("no checkpoints written"))?,
            checkpoints: epochs.to_vec(),
            grok_epoch: match self.cfg.experiment {
                Experiment::Modadd => detect_grokking(&history),
                Experiment::Tms => None,
            },
        };
        self.out
            .write_json("train/state.json", &state, Some(state.final_epoch), None)?;
        Ok(state)
    }

    /// The training state, training first if needed.
    pub fn ensure_trained(&self) -> Result<TrainState> {
        match self.valid_state() {
            Some(s) => Ok(s),
            None => self.train(false),
        }
    }

    pub fn checkpoint(&self, epoch: usize) -> Result<Checkpoint<f64>> {
        Ok(load_checkpoint(&self.ckpt_path(epoch))?)
    }

    fn resolve_epoch(&self, state: &TrainState, epoch: Option<usize>) -> Result<usize> {
        match epoch {
            None => Ok(state.final_epoch),
            Some(e) if state.checkpoints.contains(&e) => Ok(e),
            Some(e) => Err(ConfigError(format!(
                "no checkpoint at epoch {e}; available: {:?}",
                state.checkpoints
            ))
            .into()),
        }
    }

    // ---- kernels ----

    pub fn entry(&self, label: &str, spec: &KernelSpec, epoch: usize) -> Result<KernelEntry> {
        let spec = spec.clone().at_checkpoint(epoch);
        let ck_bytes = fs::read(self.ckpt_path(epoch))
            .with_context(|| format!("reading checkpoint for epoch {epoch}"))?;
        let mut key_src = serde_json::to_vec(&spec)?;
        key_src.extend_from_slice(sha256_hex(&ck_bytes).as_bytes());
        let ds = spec.eval_set.select(&self.dataset()?)?;
        Ok(KernelEntry {
            label: label.to_string(),
            key: sha256_hex(&key_src),
            dense: kernel_dim(&ds, &spec) <= self.cfg.kernels.dense_cap,
            spec,
        })
    }

    fn is_cached(&self, e: &KernelEntry) -> bool {
        let dir = self.kernel_dir();
        if e.dense {
            load_kernel::<f64>(&dir, &e.key).is_ok()
        } else {
            load_topk(&dir, &e.key).is_ok()
        }
    }

    /// Computes (or reuses) one kernel entry.
    pub fn materialize(&self, e: &KernelEntry, params: &ModelParams) -> Result<()> {
        let fresh = self.built.borrow().contains(&e.key);
        if (fresh || !self.force) && self.is_cached(e) {
            log::info!("kernel {}: cached ({})", e.label, &e.key[..12]);
            return Ok(());
        }
        let ds = e.spec.eval_set.select(&self.dataset()?)?;
        let dir = self.kernel_dir();
        let spec_json = serde_json::to_value(&e.spec)?;
        let epoch = e.spec.checkpoint;
        let files: Vec<String> = if e.dense {
            let k = assemble_kernel_capped(params, &ds, &e.spec, None)?;
            save_kernel(&dir, &e.key, &k)?;
            ["bin", "json", "csv"]
                .iter()
                .map(|x| format!("{}.{x}", e.key))
                .collect()
        } else {
            if e.spec.collapse != Collapse::Flattened || e.spec.center {
                bail!(
                    "kernel {} has dimension {} above dense_cap {}; only uncentred flattened kernels have a factored path",
                    e.label,
                    kernel_dim(&ds, &e.spec),
                    self.cfg.kernels.dense_cap
                );
            }
            let fk = FactoredKernel::new(params, &ds, &e.spec)?;
            let k = self.cfg.kernels.top_k.min(fk.dim());
            save_topk(&dir, &e.key, &fk.top_eigenpairs(k)?)?;
            ["topk.bin", "topk.json"]
                .iter()
                .map(|x| format!("{}.{x}", e.key))
                .collect()
        };
        for f in files {
            let path = dir.join(f);
            if path.exists() {
                self.out.stamp(&path, epoch, Some(&spec_json))?;
            }
        }
        self.built.borrow_mut().insert(e.key.clone());
        log::info!("kernel {}: computed ({})", e.label, &e.key[..12]);
        Ok(())
    }

    pub fn spectrum(&self, e: &KernelEntry) -> Result<Spectrum> {
        let dir = self.kernel_dir();
        if e.dense {
            Ok(kernel_spectrum(&load_kernel(&dir, &e.key)?, None)?)
        } else {
            load_topk(&dir, &e.key)
        }
    }

    pub fn kernels(&self, epoch: Option<usize>) -> Result<Vec<KernelEntry>> {
        let state = self.ensure_trained()?;
        let epoch = self.resolve_epoch(&state, epoch)?;
        let params = self.checkpoint(epoch)?.params;
        let mut entries = Vec::new();
        for (label, spec) in self.cfg.specs() {
            let e = self.entry(&label, &spec, epoch)?;
            self.materialize(&e, &params)?;
            entries.push(e);
        }
        self.check_additivity(&entries)?;
        Ok(entries)
    }

    /// Logs `‖K_all − K_1 − K_2‖ / ‖K_all‖` when all three layer kernels of
    /// one collapse are present.
    fn check_additivity(&self, entries: &[KernelEntry]) -> Result<()> {
        let find = |l: LayerSelection, like: &KernelSpec| {
            entries.iter().find(|e| {
                e.dense
                    && e.spec.layers == l
                    && KernelSpec {
                        layers: like.layers,
                        ..e.spec.clone()
                    } == *like
            })
        };
        for all in entries
            .iter()
            .filter(|e| e.dense && e.spec.layers == LayerSelection::All)
        {
            if let (Some(l1), Some(l2)) = (
                find(LayerSelection::Layer1, &all.spec),
                find(LayerSelection::Layer2, &all.spec),
            ) {
                let dir = self.kernel_dir();
                let load = |e: &KernelEntry| load_kernel::<f64>(&dir, &e.key);
                let (a, b, c) = (load(all)?, load(l1)?, load(l2)?);
                let diff = a.matrix.as_matrix().sub(b.matrix.as_matrix())?;
                let diff = diff.sub(c.matrix.as_matrix())?;
                let rel = diff.frobenius_norm() / a.matrix.as_matrix().frobenius_norm().max(1e-300);
                log::info!("layer additivity {}: relative error {rel:.2e}", all.label);
                if rel > 1e-8 {
                    log::warn!("layer kernels of {} do not add up ({rel:.2e})", all.label);
                }
            }
        }
        Ok(())
    }

    // ---- analysis ----

    fn cliffs(&self, eigenvalues: &[f64]) -> Result<CliffReport> {
        let a = &self.cfg.analysis;
        Ok(detect_cliffs(eigenvalues, a.cliff_ratio, a.cliff_floor)?)
    }

    fn write_heatmap(&self, stem: &str, hm: &AlignmentHeatmap, epoch: usize) -> Result<()> {
        self.out
            .write(&format!("{stem}.csv"), &hm.to_csv()?, Some(epoch), None)?;
        self.out
            .write(&format!("{stem}.pgm"), &hm.to_pgm(), Some(epoch), None)?;
        Ok(())
    }

    fn fourier(&self, fams: [FourierFamily; 2], ds: &Dataset) -> Result<Vec<FeatureGroup<f64>>> {
        let p = self.cfg.modadd.as_ref().map(|m| m.p).unwrap_or(0);
        let mut g = fourier_groups(p, fams[0], ds)?;
        g.extend(fourier_groups(p, fams[1], ds)?);
        Ok(g)
    }

    fn selector(&self, choice: CliffChoice, index: usize) -> CliffSelector {
        let h = self.half();
        match choice {
            CliffChoice::Fixed => CliffSelector::Fixed(4 * h * index..4 * h * (index + 1)),
            CliffChoice::Detected => CliffSelector::Detected {
                index,
                threshold: self.cfg.analysis.cliff_ratio,
            },
        }
    }

    pub fn analyze(&self, epoch: Option<usize>) -> Result<Value> {
        let state = self.ensure_trained()?;
        let epoch = self.resolve_epoch(&state, epoch)?;
        let entries = self.kernels(Some(epoch))?;
        let steps = &self.cfg.analysis.steps;
        let mut summary = json!({
            "experiment": self.cfg.experiment,
            "config_hash": self.out.config_hash,
            "epoch": epoch,
            "grok_epoch": state.grok_epoch,
        });
        let history = TrainHistory::load_csv(&self.out.path("train/history.csv"))?;
        if let Some(r) = history.records.iter().rev().find(|r| r.epoch <= epoch) {
            summary["final"] = json!(r);
        }

        let fig_spectra = match self.cfg.experiment {
            Experiment::Tms => 1,
            Experiment::Modadd => 2,
        };
        let mut kernels = Vec::new();
        let mut spectra = Vec::new();
        for e in &entries {
            let s = self.spectrum(e)?;
            let report = self.cliffs(&s.eigenvalues)?;
            if steps.contains(&AnalysisStep::Cliffs) {
                let dir = figure(fig_spectra);
                let spec = serde_json::to_value(&e.spec)?;
                self.out.write(
                    &format!("{dir}/spectrum_{}.csv", e.label),
                    &spectrum_csv(&s.eigenvalues)?,
                    Some(epoch),
                    Some(&spec),
                )?;
                self.out.write_json(
                    &format!("{dir}/cliffs_{}.json", e.label),
                    &report,
                    Some(epoch),
                    Some(&spec),
                )?;
            }
            kernels.push(json!({
                "label": e.label,
                "solver": if s.solver == SolverTag::Dense { "dense" } else { "factored" },
                "eigenvalues": s.k(),
                "boundaries": report.boundaries,
                "ratios": report.ratios,
            }));
            spectra.push(s);
        }
        summary["kernels"] = Value::Array(kernels);

        match self.cfg.experiment {
            Experiment::Tms => self.analyze_tms(epoch, &entries, &spectra, &mut summary)?,
            Experiment::Modadd => self.analyze_modadd(&state, epoch, &mut summary)?,
        }
        self.out
            .write_json("analysis.json", &summary, Some(epoch), None)?;
        Ok(summary)
    }

    fn analyze_tms(
        &self,
        epoch: usize,
        entries: &[KernelEntry],
        spectra: &[Spectrum],
        summary: &mut Value,
    ) -> Result<()> {
        let params = self.checkpoint(epoch)?.params;
        let t = self.cfg.analysis.reconstruction_threshold;
        let count = reconstructed_feature_count(params.as_tms()?, t);
        self.out.write_json(
            "fig1/features.json",
            &json!({ "threshold": t, "reconstructed_feature_count": count }),
            Some(epoch),
            None,
        )?;
        summary["reconstructed_feature_count"] = json!(count);
        if !self.cfg.analysis.steps.contains(&AnalysisStep::Heatmaps) {
            return Ok(());
        }
        let n = self.cfg.tms.as_ref().map_or(0, |t| t.n);
        let ds = self.dataset()?;
        let mut matches = serde_json::Map::new();
        for (e, s) in entries.iter().zip(spectra) {
            if e.spec.collapse != Collapse::Flattened {
                continue;
            }
            let feats = expanded_data_matrix(&e.spec.eval_set.select(&ds)?)?;
            let rows = 0..n.min(s.k());
            let hm = alignment_heatmap(s, &feats, rows)?;
            self.write_heatmap(&format!("fig1/heatmap_{}", e.label), &hm, epoch)?;
            let m = match_features(&hm);
            self.out.write_json(
                &format!("fig1/match_{}.json", e.label),
                &m,
                Some(epoch),
                None,
            )?;
            matches.insert(e.label.clone(), scores(&m));
        }
        summary["matches"] = Value::Object(matches);
        Ok(())
    }

    fn analyze_modadd(&self, state: &TrainState, epoch: usize, summary: &mut Value) -> Result<()> {
        let steps = &self.cfg.analysis.steps;
        let h = self.half();
        let p = self.cfg.modadd.as_ref().map_or(0, |m| m.p);
        let full = full_lattice(&self.dataset()?)?;
        let needs_series =
            steps.contains(&AnalysisStep::TimeSeries) || steps.contains(&AnalysisStep::Disentangle);
        let checkpoints: Vec<Checkpoint<f64>> = if needs_series {
            state
                .checkpoints
                .iter()
                .filter(|&&e| e <= epoch)
                .map(|&e| self.checkpoint(e))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        if steps.contains(&AnalysisStep::TimeSeries) {
            let history = TrainHistory::load_csv(&self.out.path("train/history.csv"))?;
            let records: Vec<_> = history
                .records
                .into_iter()
                .filter(|r| r.epoch <= epoch)
                .collect();
            let history = TrainHistory {
                records,
                ..Default::default()
            };
            self.out
                .write("fig3/history.csv", &history.to_csv()?, Some(epoch), None)?;
            let mut appear = serde_json::Map::new();
            for (label, spec) in self.cfg.specs() {
                let eval = spec.eval_set.select(&full)?;
                if kernel_dim(&eval, &spec) > self.cfg.kernels.dense_cap {
                    log::warn!("time series skipped for {label}: above dense_cap");
                    continue;
                }
                let series = spectrum_over_time(&checkpoints, &eval, &spec, None)?;
                let spec_json = serde_json::to_value(&spec)?;
                self.out.write(
                    &format!("fig3/spectra_{label}.csv"),
                    &series.to_csv()?,
                    Some(epoch),
                    Some(&spec_json),
                )?;
                let a = &self.cfg.analysis;
                let reports = series.cliffs(a.cliff_ratio, a.cliff_floor)?;
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["epoch", "boundaries", "ratios"])?;
                for (ep, r) in series.epochs.iter().zip(&reports) {
                    let join = |v: Vec<String>| v.join(";");
                    w.write_record([
                        ep.to_string(),
                        join(r.boundaries.iter().map(|b| b.to_string()).collect()),
                        join(r.ratios.iter().map(|x| x.to_string()).collect()),
                    ])?;
                }
                self.out.write(
                    &format!("fig3/cliffs_{label}.csv"),
                    &w.into_inner().map_err(|e| anyhow!("{e}"))?,
                    Some(epoch),
                    Some(&spec_json),
                )?;
                let first = series
                    .epochs
                    .iter()
                    .zip(&reports)
                    .find(|(_, r)| r.contains(8 * h))
                    .map(|(e, _)| *e);
                appear.insert(label, json!(first));
            }
            let grok = json!({
                "grok_epoch": state.grok_epoch,
                "second_cliff_size": 8 * h,
                "second_cliff_first_epoch": appear,
            });
            self.out
                .write_json("fig3/grokking.json", &grok, Some(epoch), None)?;
            summary["fig3"] = grok;
        }

        if steps.contains(&AnalysisStep::Heatmaps) {
            let spec = KernelSpec::modadd_default().with_layers(LayerSelection::Layer1);
            let entry = self.entry("class_trace-layer1", &spec, epoch)?;
            self.materialize(&entry, &self.checkpoint(epoch)?.params)?;
            let s = self.spectrum(&entry)?;
            let range = self
                .selector(self.cfg.analysis.first_cliff, 0)
                .range(&s.eigenvalues)?;
            let groups = self.fourier([FourierFamily::A, FourierFamily::B], &full)?;
            let basis = s.columns(range.clone());
            let pre = family_heatmap(&basis, &groups)?;
            let rotated = two_stage_rotation(
                &basis,
                &axis_laplacian(p, FourierFamily::A),
                &axis_laplacian(p, FourierFamily::B),
                Keep::Half,
                self.cfg.analysis.offset,
            )?;
            let post = family_heatmap(&rotated.columns, &groups)?;
            self.write_heatmap("fig4/heatmap_pre", &pre, epoch)?;
            self.write_heatmap("fig4/heatmap_post", &post, epoch)?;
            self.out.write(
                "fig4/energies.csv",
                &rotated.energies_csv()?,
                Some(epoch),
                None,
            )?;
            let (mp, mq) = (match_features(&pre), match_features(&post));
            let fig4 = json!({
                "cliff": [range.start, range.end],
                "pre_rotation": scores(&mp),
                "post_rotation": scores(&mq),
            });
            self.out.write_json(
                "fig4/match.json",
                &json!({ "pre": mp, "post": mq }),
                Some(epoch),
                None,
            )?;
            summary["fig4"] = fig4;
        }

        if steps.contains(&AnalysisStep::Disentangle) {
            let (ls, ld) = (
                axis_laplacian(p, FourierFamily::Sum),
                axis_laplacian(p, FourierFamily::Diff),
            );
            let plan = RotationPlan {
                selector: self.selector(self.cfg.analysis.second_cliff, 1),
                l_first: &ls,
                l_second: &ld,
                keep: Keep::Half,
                offset: self.cfg.analysis.offset,
            };
            let groups = self.fourier([FourierFamily::Sum, FourierFamily::Diff], &full)?;
            let spec = KernelSpec::modadd_default();
            let results: Vec<EpochDisentanglement> = match plan.selector {
                CliffSelector::Fixed(_) => {
                    disentangle_over_time(&checkpoints, &full, &spec, &plan, &groups)?
                }
                CliffSelector::Detected { .. } => {
                    let mut out = Vec::new();
                    for ck in &checkpoints {
                        match disentangle_over_time(
                            std::slice::from_ref(ck),
                            &full,
                            &spec,
                            &plan,
                            &groups,
                        ) {
                            Ok(mut r) => out.append(&mut r),
                            Err(Error::CliffNotFound { .. }) => {}
                            Err(e) => return Err(e.into()),
                        }
                    }
                    out
                }
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "epoch",
                "cliff_start",
                "cliff_end",
                "mean_score",
                "min_score",
            ])?;
            for r in &results {
                self.write_heatmap(
                    &format!("fig5/heatmap_epoch_{:06}", r.epoch),
                    &r.heatmap,
                    r.epoch,
                )?;
                let m = match_features(&r.heatmap);
                w.write_record([
                    r.epoch.to_string(),
                    r.cliff.start.to_string(),
                    r.cliff.end.to_string(),
                    m.mean_score.to_string(),
                    m.min_score.to_string(),
                ])?;
            }
            self.out.write(
                "fig5/scores.csv",
                &w.into_inner().map_err(|e| anyhow!("{e}"))?,
                Some(epoch),
                None,
            )?;
            if let Some(last) = results.last() {
                summary["fig5"] = json!({
                    "epoch": last.epoch,
                    "cliff": [last.cliff.start, last.cliff.end],
                    "scores": scores(&match_features(&last.heatmap)),
                });
            }
        }
        Ok(())
    }

    // ---- report ----

    /// Renders `report.md`, re-running the analysis unless `reuse` and a
    /// summary for this config is on disk.
    pub fn report(&self, reuse: bool) -> Result<String> {
        let cached = fs::read(self.out.path("analysis.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
            .filter(|v| v["config_hash"] == json!(self.out.config_hash));
        let summary = match cached {
            Some(v) if reuse => v,
            _ => self.analyze(None)?,
        };
        let text = render_report(&self.cfg, &summary);
        self.out.write(
            "report.md",
            text.as_bytes(),
            summary["epoch"].as_u64().map(|e| e as usize),
            None,
        )?;
        Ok(text)
    }

    // ---- dry run ----

    /// The step DAG for `command`, with what is already on disk.
    pub fn plan(&self, command: &str, epoch: Option<usize>) -> Vec<PlannedStep> {
        let state = self.valid_state();
        let trained = state.is_some() && !self.force;
        let mut steps = vec![PlannedStep {
            name: "train".into(),
            deps: vec![],
            status: if trained { "done" } else { "pending" }.into(),
        }];
        if command == "train" {
            return steps;
        }
        let epoch = state
            .as_ref()
            .map(|s| epoch.unwrap_or(s.final_epoch))
            .filter(|_| trained);
        let mut kernel_names = Vec::new();
        for (label, spec) in self.cfg.specs() {
            let cached = epoch
                .and_then(|e| self.entry(&label, &spec, e).ok())
                .is_some_and(|e| self.is_cached(&e));
            let name = format!("kernel:{label}");
            steps.push(PlannedStep {
                name: name.clone(),
                deps: vec!["train".into()],
                status: if cached { "cached" } else { "pending" }.into(),
            });
            kernel_names.push(name);
        }
        if command == "kernel" {
            return steps;
        }
        let mut figs = Vec::new();
        let a = &self.cfg.analysis.steps;
        let mut add = |name: &str, deps: Vec<String>| {
            steps.push(PlannedStep {
                name: name.into(),
                deps,
                status: "pending".into(),
            });
            figs.push(name.to_string());
        };
        match self.cfg.experiment {
            Experiment::Tms => {
                if a.contains(&AnalysisStep::Cliffs) || a.contains(&AnalysisStep::Heatmaps) {
                    add("analyze:fig1", kernel_names.clone());
                }
            }
            Experiment::Modadd => {
                if a.contains(&AnalysisStep::Cliffs) {
                    add("analyze:fig2", kernel_names.clone());
                }
                if a.contains(&AnalysisStep::TimeSeries) {
                    add("analyze:fig3", vec!["train".into()]);
                }
                if a.contains(&AnalysisStep::Heatmaps) {
                    add("analyze:fig4", vec!["train".into()]);
                }
                if a.contains(&AnalysisStep::Disentangle) {
                    add("analyze:fig5", vec!["train".into()]);
                }
            }
        }
        if command == "report" || command == "all" {
            steps.push(PlannedStep {
                name: "report".into(),
                deps: figs,
                status: "pending".into(),
            });
        }
        steps
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PlannedStep {
    pub name: String,
    pub deps: Vec<String>,
    pub status: String,
}

/// The modular-addition dataset keeps its split; kernels on it are built on
/// the full lattice unless a spec says otherwise.
fn full_lattice(ds: &Dataset) -> Result<Dataset> {
    Ok(ntk_features::entk::EvalSet::Full.select(ds)?)
}

fn scores(m: &FeatureMatch) -> Value {
    json!({ "mean": m.mean_score, "min": m.min_score })
}

fn fmt_score(v: &Value) -> String {
    match (v["mean"].as_f64(), v["min"].as_f64()) {
        (Some(a), Some(b)) => format!("mean {a:.3}, min {b:.3}"),
        _ => "n/a".into(),
    }
}

fn render_report(cfg: &ExperimentConfig, s: &Value) -> String {
    let mut out = String::new();
    let line = |out: &mut String, t: String| {
        out.push_str(&t);
        out.push('\n');
    };
    line(
        &mut out,
        format!("# {:?} run", cfg.experiment).to_lowercase(),
    );
    line(&mut out, String::new());
    line(
        &mut out,
        format!(
            "- config hash: `{}`",
            s["config_hash"].as_str().unwrap_or("")
        ),
    );
    line(&mut out, format!("- seed: {}", cfg.seed));
    line(
        &mut out,
        format!("- analysed checkpoint: epoch {}", s["epoch"]),
    );
    let f = &s["final"];
    if f.is_object() {
        line(&mut out, format!("- train loss: {}", f["train_loss"]));
        if !f["test_acc"].is_null() {
            line(
                &mut out,
                format!(
                    "- accuracy: train {}, test {}",
                    f["train_acc"], f["test_acc"]
                ),
            );
        }
    }
    if cfg.experiment == Experiment::Modadd {
        line(&mut out, format!("- grokking epoch: {}", s["grok_epoch"]));
    }
    if let Some(c) = s["reconstructed_feature_count"].as_u64() {
        line(&mut out, format!("- reconstructed features: {c}"));
    }
    line(&mut out, String::new());
    line(
        &mut out,
        "| kernel | eigenpairs | cliff boundaries | ratios |".into(),
    );
    line(&mut out, "|---|---|---|---|".into());
    for k in s["kernels"].as_array().into_iter().flatten() {
        let ratios: Vec<String> = k["ratios"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|r| r.as_f64())
            .map(|r| format!("{r:.1}"))
            .collect();
        line(
            &mut out,
            format!(
                "| {} | {} | {} | {} |",
                k["label"].as_str().unwrap_or(""),
                k["eigenvalues"],
                k["boundaries"],
                ratios.join(", ")
            ),
        );
    }
    if let Some(m) = s["matches"].as_object() {
        line(&mut out, String::new());
        for (label, v) in m {
            line(
                &mut out,
                format!("- feature match {label}: {}", fmt_score(v)),
            );
        }
    }
    if s["fig3"].is_object() {
        line(&mut out, String::new());
        line(
            &mut out,
            format!(
                "- second cliff ({}) first detected: {}",
                s["fig3"]["second_cliff_size"], s["fig3"]["second_cliff_first_epoch"]
            ),
        );
    }
    if s["fig4"].is_object() {
        line(
            &mut out,
            format!(
                "- layer-1 cliff {}: a/b alignment before rotation {}, after {}",
                s["fig4"]["cliff"],
                fmt_score(&s["fig4"]["pre_rotation"]),
                fmt_score(&s["fig4"]["post_rotation"])
            ),
        );
    }
    if s["fig5"].is_object() {
        line(
            &mut out,
            format!(
                "- second cliff {} at epoch {}: sum/diff alignment {}",
                s["fig5"]["cliff"],
                s["fig5"]["epoch"],
                fmt_score(&s["fig5"]["scores"])
            ),
        );
    }
    out
}

// ---- top-k spectrum cache ----

#[derive(Serialize, Deserialize)]
struct TopkSidecar {
    dim: usize,
    k: usize,
    eigenvalues: Vec<f64>,
    sha256: String,
}

fn save_topk(dir: &Path, key: &str, s: &Spectrum) -> Result<()> {
    let bytes = f64_le_bytes(s.eigenvectors.as_slice().iter().copied());
    let side = TopkSidecar {
        dim: s.dim(),
        k: s.k(),
        eigenvalues: s.eigenvalues.clone(),
        sha256: sha256_hex(&bytes),
    };
    ntk_features::io::write_atomic(&dir.join(format!("{key}.topk.bin")), &bytes)?;
    ntk_features::io::write_atomic(
        &dir.join(format!("{key}.topk.json")),
        &serde_json::to_vec_pretty(&side)?,
    )?;
    Ok(())
}

fn load_topk(dir: &Path, key: &str) -> Result<Spectrum> {
    let side: TopkSidecar =
        serde_json::from_slice(&fs::read(dir.join(format!("{key}.topk.json")))?)?;
    let bin = dir.join(format!("{key}.topk.bin"));
    let bytes = fs::read(&bin)?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: bin.display().to_string(),
        reason: reason.into(),
    };
    if sha256_hex(&bytes) != side.sha256 {
        return Err(corrupt("checksum mismatch").into());
    }
    let values = f64_from_le_bytes(&bytes).ok_or_else(|| corrupt("not a whole number of f64"))?;
    if values.len() != side.dim * side.k || side.eigenvalues.len() != side.k {
        return Err(corrupt("size does not match sidecar").into());
    }
    Ok(Spectrum {
        eigenvalues: side.eigenvalues,
        eigenvectors: Matrix::from_vec(side.dim, side.k, values)?,
        solver: SolverTag::Iterative,
    })
}
