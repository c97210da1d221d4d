//! Which losses supervise which backbone features: gradient norms of every
//! per-level (and auxiliary) loss with respect to each backbone feature.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::heads::LossMode;
use crate::model::{Detector, ModelConfig};
use crate::pyramid::Builder;
use crate::scene::{generate_scene, stack_batch, SceneSpec};

pub const FEATURE_LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    /// Inter-stage backbone edges blocked: only pyramid and head paths count.
    DirectPath,
    FullPath,
}

impl FlowMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowMode::DirectPath => "direct-path",
            FlowMode::FullPath => "full-path",
        }
    }
}

/// What the gradient norm is taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowStatistic {
    /// `‖∂L/∂C_i‖₂` over the feature map.
    #[default]
    Feature,
    /// `‖∂L/∂θ‖₂` over the parameters of the stage producing `C_i`.
    StageParameters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossSource {
    /// Loss of pyramid level `l` (or of the single head without a pyramid).
    Level(usize),
    /// Auxiliary loss on backbone feature `C_i`.
    Aux(usize),
}

impl LossSource {
    pub fn label(self) -> String {
        match self {
            LossSource::Level(l) => format!("L{l}"),
            LossSource::Aux(i) => format!("aux{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowOptions {
    pub mode: FlowMode,
    pub statistic: FlowStatistic,
    pub seeds: Vec<u64>,
    /// Probe images per seed.
    pub batch: usize,
    pub scene: SceneSpec,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            mode: FlowMode::DirectPath,
            statistic: FlowStatistic::Feature,
            seeds: (0..5).collect(),
            batch: 2,
            scene: SceneSpec::default(),
        }
    }
}

/// Gradient norms indexed by (loss source, backbone feature `C_2..C_5`).
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionMatrix {
    pub mode: FlowMode,
    pub statistic: FlowStatistic,
    pub builder: Builder,
    pub seeds: Vec<u64>,
    pub sources: Vec<LossSource>,
    /// `per_seed[s][row][col]`, columns in [`FEATURE_LEVELS`] order.
    pub per_seed: Vec<Vec<[f64; 4]>>,
}

fn column(feature: usize) -> Result<usize> {
    FEATURE_LEVELS
        .iter()
        .position(|&f| f == feature)
        .ok_or_else(|| {
            Error::invalid(
                "supervision matrix",
                format!("no backbone feature C{feature}"),
            )
        })
}

impl SupervisionMatrix {
    fn row(&self, source: LossSource) -> Result<usize> {
        self.sources
            .iter()
            .position(|&s| s == source)
            .ok_or_else(|| {
                Error::invalid("supervision matrix", format!("no loss {}", source.label()))
            })
    }

    /// Seed-averaged entry.
    pub fn entry(&self, source: LossSource, feature: usize) -> Result<f64> {
        let (r, c) = (self.row(source)?, column(feature)?);
        Ok(self.per_seed.iter().map(|m| m[r][c]).sum::<f64>() / self.per_seed.len() as f64)
    }

    pub fn median(&self, source: LossSource, feature: usize) -> Result<f64> {
        let (r, c) = (self.row(source)?, column(feature)?);
        let mut v: Vec<f64> = self.per_seed.iter().map(|m| m[r][c]).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Ok(if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        })
    }

    /// Largest entry over seeds; zero only if every seed gave exactly zero.
    pub fn max_over_seeds(&self, source: LossSource, feature: usize) -> Result<f64> {
        let (r, c) = (self.row(source)?, column(feature)?);
        Ok(self.per_seed.iter().map(|m| m[r][c]).fold(0.0, f64::max))
    }
}

/// Measures the supervision matrix of `config` on a probe batch per seed.
///
/// Each seed initializes its own model and draws its own probe scenes. In
/// direct-path mode every inter-stage backbone edge is blocked.
pub fn supervision_matrix(
    config: &ModelConfig,
    options: &FlowOptions,
) -> Result<SupervisionMatrix> {
    if options.seeds.is_empty() {
        return Err(Error::invalid("supervision matrix", "no seeds"));
    }
    if options.batch == 0 {
        return Err(Error::invalid(
            "supervision matrix",
            "probe batch must be non-empty",
        ));
    }
    let mut sources = Vec::new();
    let mut per_seed = Vec::with_capacity(options.seeds.len());
    for &seed in &options.seeds {
        let (model, params) = Detector::new(config, seed)?;
        let spec = SceneSpec {
            seed,
            ..options.scene.clone()
        };
        let scenes = (0..options.batch as u64)
            .map(|i| generate_scene(&spec, i))
            .collect::<Result<Vec<_>>>()?;
        let (images, objects) = stack_batch(&scenes)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = model.forward_train(
            &mut tape,
            &params,
            x,
            &objects,
            options.mode == FlowMode::DirectPath,
        )?;

        let mut losses = Vec::new();
        for (l, loss) in &out.levels {
            losses.push((LossSource::Level(*l), loss.combined));
        }
        for a in &out.aux {
            let r = tape.scale(a.reg, config.loss.lambda);
            losses.push((LossSource::Aux(a.level), tape.add(a.cls, r)?));
        }
        sources = losses.iter().map(|l| l.0).collect();

        let mut rows = Vec::with_capacity(losses.len());
        for (_, loss) in &losses {
            let grads = tape.backward(*loss)?;
            let mut row = [0.0; 4];
            for (c, &f) in FEATURE_LEVELS.iter().enumerate() {
                row[c] = match options.statistic {
                    FlowStatistic::Feature => grads
                        .slice(out.features.level(f))
                        .map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt()),
                    FlowStatistic::StageParameters => {
                        let prefix = format!("{}.", crate::backbone::stage_name(f - 1));
                        let mut sq = 0.0;
                        for (name, v) in tape.param_vars() {
                            if name.starts_with(&prefix) {
                                if let Some(g) = grads.slice(*v) {
                                    sq += g.iter().map(|x| x * x).sum::<f64>();
                                }
                            }
                        }
                        sq.sqrt()
                    }
                };
            }
            rows.push(row);
        }
        per_seed.push(rows);
    }
    Ok(SupervisionMatrix {
        mode: options.mode,
        statistic: options.statistic,
        builder: config.pyramid.builder,
        seeds: options.seeds.clone(),
        sources,
        per_seed,
    })
}

/// Direct-path matrix: `stop_gradient` on every inter-stage backbone edge.
pub fn direct_supervision_matrix(config: &ModelConfig, seeds: &[u64]) -> Result<SupervisionMatrix> {
    supervision_matrix(
        config,
        &FlowOptions {
            mode: FlowMode::DirectPath,
            seeds: seeds.to_vec(),
            ..FlowOptions::default()
        },
    )
}

pub fn full_supervision_matrix(config: &ModelConfig, seeds: &[u64]) -> Result<SupervisionMatrix> {
    supervision_matrix(
        config,
        &FlowOptions {
            mode: FlowMode::FullPath,
            seeds: seeds.to_vec(),
            ..FlowOptions::default()
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowCell {
    pub loss: String,
    pub feature: String,
    pub norm: f64,
}

/// Serializable form of a supervision matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub mode: FlowMode,
    pub builder: Builder,
    pub seeds: Vec<u64>,
    pub cells: Vec<FlowCell>,
    pub config_digest: String,
}

impl FlowReport {
    pub fn new(matrix: &SupervisionMatrix, config_digest: &str) -> Result<Self> {
        let mut cells = Vec::new();
        for &s in &matrix.sources {
            for &f in &FEATURE_LEVELS {
                cells.push(FlowCell {
                    loss: s.label(),
                    feature: format!("C{f}"),
                    norm: matrix.entry(s, f)?,
                });
            }
        }
        Ok(FlowReport {
            mode: matrix.mode,
            builder: matrix.builder,
            seeds: matrix.seeds.clone(),
            cells,
            config_digest: config_digest.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    fn norm(&self, loss: &str, feature: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.loss == loss && c.feature == feature)
            .map(|c| c.norm)
    }

    fn losses(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.loss) {
                out.push(c.loss.clone());
            }
        }
        out
    }

    /// Fixed-width text table, one row per loss.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{} / {}\n{:<6}",
            self.builder.as_str(),
            self.mode.as_str(),
            "loss"
        );
        for f in FEATURE_LEVELS {
            let _ = write!(s, "{:>12}", format!("C{f}"));
        }
        s.push('\n');
        for loss in self.losses() {
            let _ = write!(s, "{loss:<6}");
            for f in FEATURE_LEVELS {
                let v = self.norm(&loss, &format!("C{f}")).unwrap_or(f64::NAN);
                let _ = write!(s, "{v:>12.4e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Text table of `direct / full` per cell; `-` where the full entry is zero.
pub fn render_ratio_table(direct: &FlowReport, full: &FlowReport) -> String {
    let mut s = format!("{} direct/full\n{:<6}", direct.builder.as_str(), "loss");
    for f in FEATURE_LEVELS {
        let _ = write!(s, "{:>10}", format!("C{f}"));
    }
    s.push('\n');
    for loss in direct.losses() {
        let _ = write!(s, "{loss:<6}");
        for f in FEATURE_LEVELS {
            let feat = format!("C{f}");
            match (direct.norm(&loss, &feat), full.norm(&loss, &feat)) {
                (Some(d), Some(fu)) if fu > 0.0 => {
                    let _ = write!(s, "{:>10.4}", d / fu);
                }
                _ => {
                    let _ = write!(s, "{:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Model configuration used for gradient-flow probes of `builder`.
pub fn probe_config(
    base: &ModelConfig,
    builder: Builder,
    cascade_times: usize,
    aux: bool,
) -> ModelConfig {
    let mut c = base.clone();
    c.pyramid.builder = builder;
    c.pyramid.cascade_times = if builder == Builder::Cfg {
        cascade_times
    } else {
        1
    };
    c.loss.mode = if aux { LossMode::Aux } else { LossMode::Base };
    c
}
