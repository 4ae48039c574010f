//! Closed-form activation and FLOP counts for the attention layers, and an
//! instrumented forward pass to check them.
//!
//! Per attention layer over `N` tokens of width `C`, with `S` padded window
//! slots, `G = outer * heads * nW` score matrices of side `L`:
//!
//! ```text
//! elements = 3NC (q, k, v) + 3SC (windowed q, k, v) + 2GL^2 (scores, probs)
//!          + SC (attended) + 2NC (merged, projected)
//! ```
//!
//! Masks, weights, layer norms and MLPs are excluded; weights and the
//! remaining block activations are reported on separate lines.

use std::fmt::Write as _;

use crate::attention::{joint_attention, spatial_attention, temporal_attention, AttnWeights};
use crate::encoder::{ModelConfig, STAGES};
use crate::error::{Error, Result};
use crate::patching::WindowLayout;
use crate::tensor::probe::{Probe, ProbeReading};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Spatial windows per frame plus temporal attention per position.
    Stda,
    /// One `d^4` space-time window.
    Joint4d,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stda" => Ok(Self::Stda),
            "joint" | "joint4d" => Ok(Self::Joint4d),
            _ => Err(Error::Config(format!("unknown attention mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stda => "stda",
            Self::Joint4d => "joint4d",
        }
    }
}

/// Counts for one attention layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub kind: &'static str,
    pub window: Vec<usize>,
    /// Independent attention groups (`B*T` spatial, `B` otherwise).
    pub outer: usize,
    pub windows: usize,
    pub tokens_per_window: usize,
    /// `L^2`, per head and per window.
    pub scores_per_window: u64,
    pub score_elements: u64,
    pub activation_elements: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCost {
    pub stage: usize,
    pub extent: usize,
    pub channels: usize,
    pub heads: usize,
    /// Attention blocks in the stage (two per pair).
    pub blocks: usize,
    pub layers: Vec<LayerCost>,
    /// LN, MLP and residual activations of one block, excluded from totals.
    pub other_elements_per_block: u64,
    pub weight_elements_per_block: u64,
}

impl StageCost {
    pub fn score_elements(&self) -> u64 {
        self.layers.iter().map(|l| l.score_elements).sum()
    }

    pub fn activation_elements(&self) -> u64 {
        self.layers.iter().map(|l| l.activation_elements).sum()
    }

    pub fn flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub mode: AttentionMode,
    pub window: usize,
    pub batch: usize,
    pub precision_bytes: usize,
    pub stages: Vec<StageCost>,
}

impl CostReport {
    /// Attention activation bytes of one block at `stage`.
    pub fn stage_bytes(&self, stage: usize) -> u64 {
        self.stages[stage].activation_elements() * self.precision_bytes as u64
    }

    pub fn total_score_elements(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.score_elements() * s.blocks as u64)
            .sum()
    }

    pub fn total_activation_bytes(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.activation_elements() * s.blocks as u64)
            .sum::<u64>()
            * self.precision_bytes as u64
    }

    pub fn total_flops(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.flops() * s.blocks as u64)
            .sum()
    }

    pub fn other_bytes(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.other_elements_per_block * s.blocks as u64)
            .sum::<u64>()
            * self.precision_bytes as u64
    }

    pub fn weight_bytes(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.weight_elements_per_block * s.blocks as u64)
            .sum::<u64>()
            * self.precision_bytes as u64
    }

    /// Tab-separated rows with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "mode\twindow\tprecision\tstage\tlayer\twindow_shape\twindows\ttokens_per_window\tscores_per_window\tscore_elements\tactivation_bytes\tflops\n",
        );
        for s in &self.stages {
            for l in &s.layers {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    self.mode.as_str(),
                    self.window,
                    self.precision_bytes,
                    s.stage,
                    l.kind,
                    shape_str(&l.window),
                    l.windows,
                    l.tokens_per_window,
                    l.scores_per_window,
                    l.score_elements,
                    l.activation_elements * self.precision_bytes as u64,
                    l.flops
                );
            }
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{}\ttotal\tattention\t-\t-\t-\t-\t{}\t{}\t{}",
            self.mode.as_str(),
            self.window,
            self.precision_bytes,
            self.total_score_elements(),
            self.total_activation_bytes(),
            self.total_flops()
        );
        out
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} attention, window {}, batch {}, {} bytes/element\n",
            self.mode.as_str(),
            self.window,
            self.batch,
            self.precision_bytes
        );
        let _ = writeln!(
            out,
            "{:>5} {:>8} {:>10} {:>8} {:>8} {:>12} {:>16} {:>12} {:>16}",
            "stage",
            "layer",
            "window",
            "windows",
            "tokens",
            "scores/win",
            "score elems",
            "MiB",
            "GFLOP"
        );
        for s in &self.stages {
            for l in &s.layers {
                let _ = writeln!(
                    out,
                    "{:>5} {:>8} {:>10} {:>8} {:>8} {:>12} {:>16} {:>12.1} {:>16.3}",
                    s.stage,
                    l.kind,
                    shape_str(&l.window),
                    l.windows,
                    l.tokens_per_window,
                    l.scores_per_window,
                    l.score_elements,
                    mib(l.activation_elements * self.precision_bytes as u64),
                    l.flops as f64 / 1e9
                );
            }
        }
        let _ = writeln!(
            out,
            "total attention activations {:.1} MiB, {} score elements, {:.3} GFLOP",
            mib(self.total_activation_bytes()),
            self.total_score_elements(),
            self.total_flops() as f64 / 1e9
        );
        let _ = writeln!(
            out,
            "excluded: LN/MLP/residual activations {:.1} MiB, attention and MLP weights {:.1} MiB",
            mib(self.other_bytes()),
            mib(self.weight_bytes())
        );
        out
    }
}

fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

fn shape_str(w: &[usize]) -> String {
    w.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

/// Counts for a windowed attention layer over `outer` groups of `layout`.
pub fn layer_cost(
    kind: &'static str,
    outer: usize,
    layout: &WindowLayout,
    channels: usize,
    heads: usize,
) -> LayerCost {
    let (nw, l) = (layout.num_windows(), layout.window_len());
    let n = (outer * layout.extents.iter().product::<usize>()) as u64;
    let s = (outer * nw * l) as u64;
    let g = (outer * heads * nw) as u64;
    let (c, l2) = (channels as u64, (l * l) as u64);
    let dh = c / heads as u64;
    LayerCost {
        kind,
        window: layout.window.clone(),
        outer,
        windows: nw,
        tokens_per_window: l,
        scores_per_window: l2,
        score_elements: g * l2,
        activation_elements: 5 * n * c + 4 * s * c + 2 * g * l2,
        flops: 8 * n * c * c + 4 * g * l2 * dh,
    }
}

/// Closed-form attention cost of every stage of `cfg` for a batch of `batch`.
/// The window size is `cfg.window` (`d` in joint mode).
pub fn attention_cost(
    cfg: &ModelConfig,
    mode: AttentionMode,
    precision_bytes: usize,
    batch: usize,
) -> Result<CostReport> {
    cfg.validate()?;
    if ![2, 4, 8].contains(&precision_bytes) {
        return Err(Error::Config(format!(
            "precision must be 2, 4 or 8 bytes, got {precision_bytes}"
        )));
    }
    let m = cfg.window;
    let t = cfg.frames;
    let mut stages = Vec::with_capacity(STAGES);
    for (s, &e) in cfg.stage_extents().iter().enumerate() {
        let c = cfg.stage_channels(s);
        let h = cfg.heads[s];
        let layers = match mode {
            AttentionMode::Stda => vec![
                layer_cost(
                    "spatial",
                    batch * t,
                    &WindowLayout::spatial([e; 3], m, false)?,
                    c,
                    h,
                ),
                layer_cost(
                    "temporal",
                    batch,
                    &WindowLayout::new(&[t, e, e, e], &[t, 1, 1, 1], false)?,
                    c,
                    h,
                ),
            ],
            AttentionMode::Joint4d => vec![layer_cost(
                "joint",
                batch,
                &WindowLayout::new(&[t, e, e, e], &[m; 4], false)?,
                c,
                h,
            )],
        };
        let n = (batch * t * e * e * e) as u64;
        let c64 = c as u64;
        let hidden = c64 * cfg.mlp_ratio as u64;
        let attn_layers = layers.len() as u64;
        stages.push(StageCost {
            stage: s + 1,
            extent: e,
            channels: c,
            heads: h,
            blocks: 2 * cfg.depths[s],
            layers,
            // Per sub-layer: LN output and residual sum; per MLP: two hidden
            // buffers (pre/post activation) and the output.
            other_elements_per_block: n * c64 * 2 * (attn_layers + 2) + 2 * n * (2 * hidden + c64),
            weight_elements_per_block: attn_layers * (4 * c64 * c64 + c64)
                + 2 * (2 * c64 * hidden + hidden + c64)
                + 2 * (attn_layers + 2) * c64,
        });
    }
    Ok(CostReport {
        mode,
        window: m,
        batch,
        precision_bytes,
        stages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeComparison {
    pub measured: ProbeReading,
    /// Analytic bytes at 8 bytes per element.
    pub analytic_bytes: u64,
    pub analytic_scores: u64,
}

impl ProbeComparison {
    pub fn ratio(&self) -> f64 {
        self.measured.peak_bytes as f64 / self.analytic_bytes as f64
    }
}

fn random_weights(c: usize, heads: usize, seed: u64) -> AttnWeights {
    let w = |k: u64| {
        Var::leaf(pseudo_random(
            &[c, c],
            seed.wrapping_mul(31).wrapping_add(k),
        ))
    };
    AttnWeights {
        wq: w(1),
        wk: w(2),
        wv: w(3),
        wo: w(4),
        bo: Some(Var::leaf(Tensor::zeros(&[c]))),
        rel_bias: None,
        heads,
    }
}

/// Deterministic values in [-0.5, 0.5) from a simple LCG; the probe only
/// needs finite, non-degenerate inputs.
fn pseudo_random(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

/// Runs the stage-1 attention layer(s) of `cfg` once with gradients enabled,
/// so every intermediate stays alive as in training, and compares the peak of
/// live attention buffers against [`attention_cost`].
pub fn empirical_probe(
    cfg: &ModelConfig,
    mode: AttentionMode,
    batch: usize,
) -> Result<ProbeComparison> {
    let report = attention_cost(cfg, mode, 8, batch)?;
    let e = cfg.stage_extents()[0];
    let (c, h) = (cfg.embed_dim, cfg.heads[0]);
    let x = Var::leaf(pseudo_random(&[batch, cfg.frames, e, e, e, c], 7));
    let w1 = random_weights(c, h, 1);
    let w2 = random_weights(c, h, 2);
    let probe = Probe::start();
    let outputs = match mode {
        AttentionMode::Stda => vec![
            spatial_attention(&x, &w1, cfg.window, false)?,
            temporal_attention(&x, &w2)?,
        ],
        AttentionMode::Joint4d => vec![joint_attention(&x, &w1, cfg.window, false)?],
    };
    let measured = probe.finish();
    drop(outputs);
    Ok(ProbeComparison {
        measured,
        analytic_bytes: report.stage_bytes(0),
        analytic_scores: report.stages[0].score_elements(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(m: usize) -> ModelConfig {
        ModelConfig {
            window: m,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn window_token_counts() {
        let c = ModelConfig::default();
        let r = attention_cost(&c, AttentionMode::Stda, 2, 1).unwrap();
        assert_eq!(r.stages[0].layers[0].tokens_per_window, 216);
        let j = attention_cost(
            &ModelConfig { window: 4, ..c },
            AttentionMode::Joint4d,
            2,
            1,
        )
        .unwrap();
        assert_eq!(j.stages[0].layers[0].tokens_per_window, 256);
    }

    #[test]
    fn per_window_scores_follow_power_laws() {
        let big = ModelConfig {
            extent: 96,
            frames: 16,
            ..ModelConfig::toy()
        };
        let per_win = |mode, m| {
            attention_cost(
                &ModelConfig {
                    window: m,
                    ..big.clone()
                },
                mode,
                8,
                1,
            )
            .unwrap()
            .stages[0]
                .layers[0]
                .scores_per_window
        };
        assert_eq!(per_win(AttentionMode::Stda, 2), 64);
        assert_eq!(
            per_win(AttentionMode::Stda, 4) / per_win(AttentionMode::Stda, 2),
            64
        );
        assert_eq!(
            per_win(AttentionMode::Joint4d, 4) / per_win(AttentionMode::Joint4d, 2),
            256
        );
    }

    #[test]
    fn totals_are_per_window_times_windows_heads_and_frames() {
        let c = ModelConfig::default();
        let r = attention_cost(&c, AttentionMode::Stda, 8, 1).unwrap();
        let sp = &r.stages[0].layers[0];
        // 16^3 positions pad to 18^3: 27 windows per frame, 3 heads, 15 frames.
        assert_eq!(sp.windows, 27);
        assert_eq!(sp.score_elements, 6u64.pow(6) * 27 * 3 * 15);
        assert_eq!(sp.windows * sp.outer, 405);
        let tp = &r.stages[0].layers[1];
        assert_eq!(tp.score_elements, 15 * 15 * 16u64.pow(3) * 3);
    }

    #[test]
    fn joint_exceeds_stda_at_full_size() {
        let c = ModelConfig::default();
        let s = attention_cost(&c, AttentionMode::Stda, 2, 1).unwrap();
        let j = attention_cost(&c, AttentionMode::Joint4d, 2, 1).unwrap();
        assert!(j.stage_bytes(0) > s.stage_bytes(0));
        assert!(j.total_activation_bytes() > s.total_activation_bytes());
    }

    #[test]
    fn stda_below_joint_over_sweep() {
        // Per token and head, stda scores M^3 spatial plus T temporal keys
        // against d^4 for joint attention. Stage 1 of this shape (12^3 x 12)
        // needs no padding for any of the windows.
        let base = ModelConfig {
            extent: 72,
            frames: 12,
            ..ModelConfig::default()
        };
        let t = base.frames;
        let mut checked = 0;
        for d in [2, 4, 6] {
            for m in [2, 4, 6] {
                let s = attention_cost(
                    &ModelConfig {
                        window: m,
                        ..base.clone()
                    },
                    AttentionMode::Stda,
                    8,
                    1,
                )
                .unwrap();
                let j = attention_cost(
                    &ModelConfig {
                        window: d,
                        ..base.clone()
                    },
                    AttentionMode::Joint4d,
                    8,
                    1,
                )
                .unwrap();
                if d.pow(4) > m.pow(3) + t {
                    checked += 1;
                    assert!(
                        s.stages[0].score_elements() < j.stages[0].score_elements(),
                        "d={d} m={m}"
                    );
                }
            }
        }
        assert_eq!(checked, 6);
        // d^4 > M^3 alone is not enough once the temporal term is counted.
        let s = attention_cost(
            &ModelConfig {
                window: 2,
                ..base.clone()
            },
            AttentionMode::Stda,
            8,
            1,
        )
        .unwrap();
        let j = attention_cost(
            &ModelConfig { window: 2, ..base },
            AttentionMode::Joint4d,
            8,
            1,
        )
        .unwrap();
        assert!(s.stages[0].score_elements() > j.stages[0].score_elements());
    }

    #[test]
    fn probe_matches_analytic_counts() {
        for m in [2, 4] {
            let p = empirical_probe(&toy(m), AttentionMode::Stda, 1).unwrap();
            assert_eq!(p.measured.score_elements, p.analytic_scores);
            assert!(
                (0.8..=1.5).contains(&p.ratio()),
                "m={m} ratio {}",
                p.ratio()
            );
        }
        let p = empirical_probe(&toy(2), AttentionMode::Joint4d, 1).unwrap();
        assert_eq!(p.measured.score_elements, p.analytic_scores);
        assert!(
            (0.8..=1.5).contains(&p.ratio()),
            "joint ratio {}",
            p.ratio()
        );
    }

    #[test]
    fn reports_render() {
        let r = attention_cost(&ModelConfig::toy(), AttentionMode::Stda, 2, 1).unwrap();
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 2 * STAGES + 1);
        assert!(tsv.lines().all(|l| l.split('\t').count() == 12));
        assert!(r.to_table().contains("total attention activations"));
        assert!(attention_cost(&ModelConfig::toy(), AttentionMode::Stda, 3, 1).is_err());
    }
}
