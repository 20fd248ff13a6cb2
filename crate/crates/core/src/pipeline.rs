//! End-to-end pruning, evaluation, ablation sweeps and fixture generation.
//!
//! Every function here is deterministic in its inputs; only the `timing`
//! section of a [`PruneReport`] varies between runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{capture_activations, ffn_dense, forward, ActivationCapture, FilterMask, ForwardOptions};
use crate::error::{Error, Result};
use crate::kcha::KernelParams;
use crate::linalg::{frobenius, max_abs_diff};
use crate::ranker::{compute_scores, select_topk, FlopsModel, LayerConvergence, ScoreOptions, ScoreTable, Strategy};
use crate::rescale::{apply_prune, check_compatible, fit_all, LayerFit};
use crate::tensorstore::{
    read_container, read_token_batch, synth_model, write_container, write_token_batch, ModelBundle, ModelConfig,
    TokenBatch,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_NUM_SAMPLES: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOptions {
    /// Target fraction of dense FLOPs, in (0, 1].
    pub flops: f64,
    pub strategy: Strategy,
    pub kernel: KernelParams,
    /// Use the first `num_samples` sequences of the sample file.
    pub num_samples: usize,
    pub seed: u64,
    /// Ridge for the scale fit, anchored at unit scale.
    pub ridge: f64,
    /// Sequence length for the FLOPs model; defaults to the longest sample.
    pub seq_len: Option<usize>,
    pub normalize_r2: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            flops: 0.6,
            strategy: Strategy::R2d2,
            kernel: KernelParams::default(),
            num_samples: DEFAULT_NUM_SAMPLES,
            seed: 0,
            ridge: 0.0,
            seq_len: None,
            normalize_r2: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KchaSummary {
    pub kernel_width: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub layers: Vec<LayerConvergence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub before_scaling: Vec<f64>,
    pub after_scaling: Vec<f64>,
    pub total_before_scaling: f64,
    pub total_after_scaling: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub capture_s: f64,
    pub scoring_s: f64,
    pub selection_s: f64,
    pub scaling_s: f64,
    pub compaction_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub flops_budget: f64,
    pub achieved_relative_flops: f64,
    pub seq_len: usize,
    pub dense_flops: u64,
    pub pruned_flops: u64,
    pub k: usize,
    pub total_filters: usize,
    pub retained_per_layer: Vec<usize>,
    pub pruned_per_layer: Vec<usize>,
    pub feature_map_loss: LossSummary,
    pub scale_fit: Vec<LayerFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kcha: Option<KchaSummary>,
    pub num_sequences: usize,
    pub num_tokens: usize,
    pub seed: u64,
    pub model_hash: String,
    pub sample_hash: String,
    pub pruned_hash: String,
    pub timing: Timing,
}

impl PruneReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub pruned: ModelBundle,
    /// Selected mask with fitted scales.
    pub mask: FilterMask,
    pub scores: ScoreTable,
    pub capture: ActivationCapture,
    pub report: PruneReport,
}

fn dense_only(bundle: &ModelBundle) -> Result<()> {
    if bundle.config.per_layer_filters.is_some() {
        return Err(Error::Validation("input model is already compacted".into()));
    }
    Ok(())
}

/// Capture → scores → budget → top-k → scale fit → compaction.
pub fn prune(bundle: &ModelBundle, samples: &TokenBatch, opts: &PruneOptions) -> Result<PruneOutcome> {
    let start = Instant::now();
    dense_only(bundle)?;
    opts.kernel.validate()?;
    if opts.num_samples == 0 {
        return Err(Error::Validation("num_samples must be positive".into()));
    }
    let batch = samples.first(opts.num_samples);
    batch.validate(&bundle.config)?;
    let seq_len = opts.seq_len.unwrap_or_else(|| batch.max_len());
    let flops = FlopsModel::new(&bundle.config, seq_len)?;
    // fail fast on an infeasible budget before any heavy work
    let k = flops.budget_to_k(opts.flops)?;

    let mut timing = Timing::default();
    let t = Instant::now();
    let capture = capture_activations(bundle, &batch)?;
    timing.capture_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let score_opts = ScoreOptions {
        kernel: opts.kernel,
        normalize_r2: opts.normalize_r2,
    };
    let scores = compute_scores(opts.strategy, bundle, Some(&capture), &score_opts)?;
    timing.scoring_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mask = select_topk(&scores.scores, k)?;
    timing.selection_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (mask, fits) = fit_all(bundle, &capture, &mask, opts.ridge)?;
    timing.scaling_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let pruned = apply_prune(bundle, &mask)?;
    timing.compaction_s = t.elapsed().as_secs_f64();

    let retained = mask.per_layer_counts();
    let n = bundle.config.num_filters;
    let before: Vec<f64> = fits.iter().map(|f| f.loss_before).collect();
    let after: Vec<f64> = fits.iter().map(|f| f.loss_after).collect();
    let kcha = opts.strategy.uses_kernel().then(|| KchaSummary {
        kernel_width: opts.kernel.width,
        alpha: opts.kernel.alpha,
        max_iters: opts.kernel.max_iters,
        layers: scores.meta.convergence.clone(),
    });
    let pruned_flops = flops.of(&retained)?;
    timing.total_s = start.elapsed().as_secs_f64();

    let report = PruneReport {
        schema_version: REPORT_SCHEMA_VERSION,
        strategy: opts.strategy,
        flops_budget: opts.flops,
        achieved_relative_flops: pruned_flops as f64 / flops.dense() as f64,
        seq_len,
        dense_flops: flops.dense(),
        pruned_flops,
        k,
        total_filters: bundle.config.num_layers * n,
        pruned_per_layer: retained.iter().map(|r| n - r).collect(),
        retained_per_layer: retained,
        feature_map_loss: LossSummary {
            total_before_scaling: before.iter().sum(),
            total_after_scaling: after.iter().sum(),
            before_scaling: before,
            after_scaling: after,
        },
        scale_fit: fits,
        kcha,
        num_sequences: batch.len(),
        num_tokens: capture.tokens,
        seed: opts.seed,
        model_hash: bundle.content_hash()?,
        sample_hash: batch.content_hash(),
        pruned_hash: pruned.content_hash()?,
        timing,
    };
    Ok(PruneOutcome {
        pruned,
        mask,
        scores,
        capture,
        report,
    })
}

/// File-level prune: reads the model and samples, writes the pruned
/// container, the JSON report and optionally the score table and mask.
pub fn prune_files(
    model: &Path,
    samples: &Path,
    opts: &PruneOptions,
    out: &Path,
    report: Option<&Path>,
    artifacts: Option<&Path>,
) -> Result<PruneReport> {
    let bundle = read_container(model)?;
    let batch = read_token_batch(samples)?;
    let outcome = prune(&bundle, &batch, opts)?;
    write_container(&outcome.pruned, out)?;
    if let Some(path) = report {
        write_text(path, &outcome.report.to_json())?;
    }
    if let Some(dir) = artifacts {
        outcome.scores.to_container()?.write(&dir.join("scores"))?;
        outcome.mask.to_container().write(&dir.join("mask"))?;
    }
    Ok(outcome.report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub per_layer_loss: Vec<f64>,
    pub total_loss: f64,
    pub hidden_state_deviation: f64,
    pub achieved_relative_flops: f64,
    pub retained_per_layer: Vec<usize>,
    pub seq_len: usize,
    pub num_tokens: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Compares a pruned model against its original on `samples`.
///
/// Per-layer loss is `‖FFN_ℓ(x) − FFN̂_ℓ(x)‖_F` over all real tokens, where
/// `x` is the original model's FFN input at layer `ℓ`.
pub fn evaluate(
    original: &ModelBundle,
    pruned: &ModelBundle,
    samples: &TokenBatch,
    seq_len: Option<usize>,
) -> Result<EvalReport> {
    dense_only(original)?;
    check_compatible(original, pruned)?;
    samples.validate(&original.config)?;
    let widths = pruned.layer_widths();
    let seq_len = seq_len.unwrap_or_else(|| samples.max_len());
    let flops = FlopsModel::new(&original.config, seq_len)?;
    let achieved = flops
        .relative(&widths)
        .map_err(|e| Error::ModelMismatch(format!("pruned widths incompatible with original: {e}")))?;

    let reference = forward(
        original,
        samples,
        ForwardOptions {
            ffn_inputs: true,
            ..Default::default()
        },
    )?;
    let inputs = reference.ffn_inputs.expect("ffn inputs requested");
    let per_layer = original
        .layers
        .iter()
        .zip(&pruned.layers)
        .zip(&inputs)
        .map(|((dense, compact), x)| {
            let a = ffn_dense(dense, x.view())?;
            let b = ffn_dense(compact, x.view())?;
            let diff = (&a.mapv(f64::from) - &b.mapv(f64::from)).to_owned();
            Ok(frobenius(diff.view()))
        })
        .collect::<Result<Vec<f64>>>()?;

    let other = forward(pruned, samples, ForwardOptions::default())?;
    let deviation = reference
        .hidden_states
        .iter()
        .zip(&other.hidden_states)
        .map(|(a, b)| max_abs_diff(a.view(), b.view()))
        .fold(0.0, f64::max);

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        total_loss: per_layer.iter().sum(),
        per_layer_loss: per_layer,
        hidden_state_deviation: deviation,
        achieved_relative_flops: achieved,
        retained_per_layer: widths,
        seq_len,
        num_tokens: samples.real_tokens(),
    })
}

pub fn evaluate_files(original: &Path, pruned: &Path, samples: &Path) -> Result<EvalReport> {
    let a = read_container(original)?;
    let b = read_container(pruned)?;
    let batch = read_token_batch(samples)?;
    evaluate(&a, &b, &batch, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub budget: f64,
    pub k: usize,
    pub total_loss_unscaled: f64,
    pub total_loss: f64,
    pub retained_per_layer: Vec<usize>,
}

/// Runs every strategy at every budget, sharing one capture and one score
/// table per strategy. Rows are ordered by strategy, then budget, as given.
pub fn ablate(
    bundle: &ModelBundle,
    samples: &TokenBatch,
    grid: &[f64],
    strategies: &[Strategy],
    opts: &PruneOptions,
) -> Result<Vec<AblationRow>> {
    dense_only(bundle)?;
    if strategies.is_empty() {
        return Err(Error::Validation("ablation needs at least one strategy".into()));
    }
    if grid.is_empty() {
        return Err(Error::Validation("ablation needs at least one budget".into()));
    }
    let batch = samples.first(opts.num_samples);
    batch.validate(&bundle.config)?;
    let flops = FlopsModel::new(&bundle.config, opts.seq_len.unwrap_or_else(|| batch.max_len()))?;
    let ks = grid
        .iter()
        .map(|&c| flops.budget_to_k(c))
        .collect::<Result<Vec<_>>>()?;
    let capture = capture_activations(bundle, &batch)?;
    let score_opts = ScoreOptions {
        kernel: opts.kernel,
        normalize_r2: opts.normalize_r2,
    };

    let mut rows = Vec::with_capacity(strategies.len() * grid.len());
    for &strategy in strategies {
        let scores = compute_scores(strategy, bundle, Some(&capture), &score_opts)?;
        for (&budget, &k) in grid.iter().zip(&ks) {
            let mask = select_topk(&scores.scores, k)?;
            let (mask, fits) = fit_all(bundle, &capture, &mask, opts.ridge)?;
            rows.push(AblationRow {
                strategy,
                budget,
                k,
                total_loss_unscaled: fits.iter().map(|f| f.loss_before).sum(),
                total_loss: fits.iter().map(|f| f.loss_after).sum(),
                retained_per_layer: mask.per_layer_counts(),
            });
        }
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "strategy,budget,k,total_loss_unscaled,total_loss,per_layer_counts";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let counts: Vec<String> = r.retained_per_layer.iter().map(|c| c.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.strategy,
            r.budget,
            r.k,
            r.total_loss_unscaled,
            r.total_loss,
            counts.join(";")
        )
        .expect("write to string");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub layers: usize,
    pub dim: usize,
    pub filters: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub redundancy: f64,
    pub num_sequences: usize,
    /// Padded length of generated sequences; defaults to `max_seq_len`.
    pub seq_len: Option<usize>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 2,
            dim: 16,
            filters: 64,
            heads: 2,
            vocab: 100,
            max_seq_len: 16,
            redundancy: 0.0,
            num_sequences: 64,
            seq_len: None,
        }
    }
}

pub const SYNTH_MODEL_DIR: &str = "model";
pub const SYNTH_SAMPLES_FILE: &str = "samples.bin";

/// Synthetic model plus a matching random token batch.
pub fn synth(opts: &SynthOptions) -> Result<(ModelBundle, TokenBatch)> {
    let config = ModelConfig::new(opts.layers, opts.dim, opts.filters, opts.heads, opts.vocab, opts.max_seq_len);
    let bundle = synth_model(opts.seed, &config, opts.redundancy)?;
    let seq_len = opts.seq_len.unwrap_or(opts.max_seq_len);
    if seq_len == 0 || seq_len > opts.max_seq_len {
        return Err(Error::Validation(format!(
            "seq_len {seq_len} must be in [1, max_seq_len = {}]",
            opts.max_seq_len
        )));
    }
    if opts.num_sequences == 0 {
        return Err(Error::Validation("num_sequences must be positive".into()));
    }
    let batch = TokenBatch::random(opts.seed ^ 0x5EED_BA7C_0000_0001, opts.vocab, opts.num_sequences, seq_len);
    Ok((bundle, batch))
}

/// Writes `out/model/` and `out/samples.bin`; returns their paths.
pub fn synth_files(opts: &SynthOptions, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (bundle, batch) = synth(opts)?;
    let model_dir = out.join(SYNTH_MODEL_DIR);
    let samples = out.join(SYNTH_SAMPLES_FILE);
    write_container(&bundle, &model_dir)?;
    write_token_batch(&batch, &samples)?;
    Ok((model_dir, samples))
}
