use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNormState, BnMode};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// How the projection weights of a fusion layer start out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitPolicy {
    /// Own-task block `alpha·I`, every other task's block `beta·I`.
    Diagonal { alpha: f64, beta: f64 },
    /// Uniform Xavier over the full `KC → C` projection.
    Xavier,
}

impl InitPolicy {
    pub const IDENTITY: InitPolicy = InitPolicy::Diagonal {
        alpha: 1.0,
        beta: 0.0,
    };

    pub const RECOMMENDED: InitPolicy = InitPolicy::Diagonal {
        alpha: 0.9,
        beta: 0.1,
    };
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::RECOMMENDED
    }
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitPolicy::Diagonal { alpha, beta } => write!(f, "diag:{alpha},{beta}"),
            InitPolicy::Xavier => f.write_str("xavier"),
        }
    }
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("xavier") || s.eq_ignore_ascii_case("random") {
            return Ok(InitPolicy::Xavier);
        }
        let bad = || Error::Invalid(format!("init `{s}`: expected diag:ALPHA,BETA or xavier"));
        let body = s.strip_prefix("diag:").ok_or_else(bad)?;
        let (a, b) = body.split_once(',').ok_or_else(bad)?;
        Ok(InitPolicy::Diagonal {
            alpha: a.trim().parse().map_err(|_| bad())?,
            beta: b.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// Where batch normalization sits inside an NDDR layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// One normalization over the concatenated `KC` channels.
    #[default]
    Shared,
    /// One normalization per task over its `C` channels, before concat.
    PerTask,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NddrConfig {
    pub norm: NormPlacement,
    /// Learned γ, β in the normalization.
    pub affine: bool,
}

impl Default for NddrConfig {
    fn default() -> Self {
        NddrConfig {
            norm: NormPlacement::Shared,
            affine: true,
        }
    }
}

/// Projection weights for all tasks under diagonal initialization. Each
/// filter bank is `(C, 1, 1, KC)`: output channel `o` of task `i` reads
/// input channel `j·C + o` with weight `alpha` when `j == i` and `beta`
/// otherwise.
pub fn diagonal_init<T: Scalar>(
    tasks: usize,
    channels: usize,
    alpha: f64,
    beta: f64,
) -> Vec<Tensor<T>> {
    let kc = tasks * channels;
    (0..tasks)
        .map(|i| {
            Tensor::from_fn([channels, 1, 1, kc], |[o, _, _, input]| {
                let (j, c) = (input / channels, input % channels);
                if c != o {
                    T::zero()
                } else if j == i {
                    T::from_f64_lossy(alpha)
                } else {
                    T::from_f64_lossy(beta)
                }
            })
        })
        .collect()
}

/// Xavier-uniform filter banks with fan-in `KC` and fan-out `C`.
pub fn xavier_init<T: Scalar>(tasks: usize, channels: usize, rng: &mut impl Rng) -> Vec<Tensor<T>> {
    let kc = tasks * channels;
    let limit = (6.0 / (kc + channels) as f64).sqrt();
    (0..tasks)
        .map(|_| Tensor::random_uniform([channels, 1, 1, kc], -limit, limit, rng))
        .collect()
}

pub fn init_projections<T: Scalar>(
    tasks: usize,
    channels: usize,
    init: InitPolicy,
    rng: &mut impl Rng,
) -> Vec<Tensor<T>> {
    match init {
        InitPolicy::Diagonal { alpha, beta } => diagonal_init(tasks, channels, alpha, beta),
        InitPolicy::Xavier => xavier_init(tasks, channels, rng),
    }
}

/// Per-task `KC × C` projection matrix (rows indexed by concatenated
/// input channel) from a `(C, 1, 1, KC)` filter bank.
pub fn projection_matrix<T: Scalar>(filters: &Tensor<T>) -> Vec<Vec<T>> {
    let s = filters.shape();
    (0..s.c)
        .map(|input| (0..s.n).map(|o| filters.at(o, 0, 0, input)).collect())
        .collect()
}

/// Neural discriminative dimensionality reduction layer for `K` tasks of
/// `C` channels each.
#[derive(Debug, Clone)]
pub struct NddrLayer<T> {
    pub tasks: usize,
    pub channels: usize,
    /// `K` filter banks, each `(C, 1, 1, KC)`.
    pub weights: Vec<Tensor<T>>,
    /// `K` biases, each `(1, 1, 1, C)`.
    pub biases: Vec<Tensor<T>>,
    /// Empty, one `KC`-channel state, or `K` states of `C` channels,
    /// according to `config.norm`.
    pub norms: Vec<BatchNormState<T>>,
    pub config: NddrConfig,
}

/// Graph handles produced by one [`NddrLayer::forward`].
#[derive(Debug, Clone)]
pub struct NddrVars {
    pub outputs: Vec<Var>,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
}

impl<T: Scalar> NddrLayer<T> {
    pub fn new(
        tasks: usize,
        channels: usize,
        init: InitPolicy,
        config: NddrConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if tasks == 0 || channels == 0 {
            return Err(Error::Invalid("NDDR layer needs K ≥ 1 and C ≥ 1".into()));
        }
        let norms = match config.norm {
            NormPlacement::Shared => vec![BatchNormState::new(tasks * channels)],
            NormPlacement::PerTask => (0..tasks).map(|_| BatchNormState::new(channels)).collect(),
            NormPlacement::None => Vec::new(),
        };
        let mut layer = NddrLayer {
            tasks,
            channels,
            weights: init_projections(tasks, channels, init, rng),
            biases: (0..tasks)
                .map(|_| Tensor::zeros([1, 1, 1, channels]))
                .collect(),
            norms,
            config,
        };
        for n in &mut layer.norms {
            n.affine = config.affine;
        }
        Ok(layer)
    }

    /// Puts every normalization in the exact-identity eval state.
    pub fn set_norm_identity(&mut self) {
        for n in &mut self.norms {
            let affine = n.affine;
            *n = BatchNormState::identity(n.channels());
            n.affine = affine;
        }
    }

    pub fn set_norm_mode(&mut self, mode: BnMode) {
        for n in &mut self.norms {
            n.options.mode = mode;
        }
    }

    /// `outᵢ = conv1x1(norm(concat(features)), Wᵢ) + bᵢ`.
    pub fn forward(&mut self, g: &mut Graph<T>, features: &[Var]) -> Result<NddrVars> {
        let weights: Vec<Var> = self.weights.iter().map(|w| g.param(w.clone())).collect();
        let biases: Vec<Var> = self.biases.iter().map(|b| g.param(b.clone())).collect();
        let (outputs, gammas, betas) = self.forward_with(g, features, &weights, &biases)?;
        Ok(NddrVars {
            outputs,
            weights,
            biases,
            gammas,
            betas,
        })
    }

    /// [`forward`](Self::forward) with the projections supplied as graph
    /// values instead of the stored ones. Returns the outputs and the
    /// normalization's γ and β handles.
    pub fn forward_with(
        &mut self,
        g: &mut Graph<T>,
        features: &[Var],
        weights: &[Var],
        biases: &[Var],
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        check_features(g, features, self.tasks, self.channels)?;
        if weights.len() != self.tasks || biases.len() != self.tasks {
            return Err(Error::shape(
                "nddr",
                format!(
                    "{} weights and {} biases for {} tasks",
                    weights.len(),
                    biases.len(),
                    self.tasks
                ),
            ));
        }
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        let fused = match self.config.norm {
            NormPlacement::Shared => {
                let cat = g.concat_channels(features)?;
                let (y, gm, bt) = self.norms[0].forward(g, cat)?;
                gammas.extend(gm);
                betas.extend(bt);
                y
            }
            NormPlacement::PerTask => {
                let mut normed = Vec::with_capacity(self.tasks);
                for (state, &f) in self.norms.iter_mut().zip(features) {
                    let (y, gm, bt) = state.forward(g, f)?;
                    gammas.extend(gm);
                    betas.extend(bt);
                    normed.push(y);
                }
                g.concat_channels(&normed)?
            }
            NormPlacement::None => g.concat_channels(features)?,
        };
        let outputs = project(g, fused, weights, biases)?;
        Ok((outputs, gammas, betas))
    }
}

pub(crate) fn check_features<T: Scalar>(
    g: &Graph<T>,
    features: &[Var],
    tasks: usize,
    channels: usize,
) -> Result<()> {
    if features.len() != tasks {
        return Err(Error::shape(
            "fusion",
            format!("{} feature maps for {tasks} tasks", features.len()),
        ));
    }
    for &f in features {
        if g.shape(f).c != channels {
            return Err(Error::shape(
                "fusion",
                format!(
                    "feature map {} for layer with {channels} channels",
                    g.shape(f)
                ),
            ));
        }
    }
    Ok(())
}

/// Applies each task's 1×1 projection to the fused tensor.
pub(crate) fn project<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    weights: &[Var],
    biases: &[Var],
) -> Result<Vec<Var>> {
    weights
        .iter()
        .zip(biases)
        .map(|(&w, &b)| g.conv1x1(fused, w, Some(b)))
        .collect()
}
