use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{
    init_projections, mix_features, shortcut_aggregate, NormPlacement, SluiceLayer,
};
use crate::layers::{identity_running_var, BnMode, BnOptions, ConvGeometry, ResizeMode};
use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::registry::{ParamGroup, ParamRegistry};
use super::spec::{BackboneSpec, HeadSpec, Mode, NetConfig};

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma: Option<usize>,
    beta: Option<usize>,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
enum FusionIdx {
    Nddr {
        weights: Vec<usize>,
        biases: Vec<usize>,
        norms: Vec<NormIdx>,
    },
    Mix(usize),
}

#[derive(Debug, Clone)]
struct Layout {
    /// `[branch][stage][conv]`.
    branches: Vec<Vec<Vec<Affine>>>,
    fusion: Vec<FusionIdx>,
    shortcuts: Vec<Affine>,
    heads: Vec<(HeadSpec, Affine)>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    /// One output per task.
    pub outputs: Vec<Var>,
    /// One handle per registry parameter, in registry order.
    pub params: Vec<Var>,
    /// Per stage, the per-branch features after fusion.
    pub levels: Vec<Vec<Var>>,
}

/// A built multi-task network: structure, parameters and fusion state.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub spec: BackboneSpec,
    pub config: NetConfig,
    pub registry: ParamRegistry<T>,
    /// Options of every fusion normalization.
    pub norm: BnOptions,
    layout: Layout,
}

fn uniform<T: Scalar>(shape: [usize; 4], limit: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::random_uniform(shape, -limit, limit, rng)
}

impl<T: Scalar> Network<T> {
    /// Builds the network with all random initialization drawn from `seed`.
    /// Convolutions use He-uniform weights, heads and the shortcut
    /// reduction Xavier-uniform; every bias starts at zero.
    pub fn build(spec: BackboneSpec, config: NetConfig, seed: u64) -> Result<Self> {
        config.validate(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new();
        let k = config.tasks(&spec);
        let chans = spec.stage_channels();

        let mut branches = Vec::new();
        for b in 0..config.branches(&spec) {
            let mut cin = spec.in_channels;
            let mut stages = Vec::new();
            for (j, s) in spec.stages.iter().enumerate() {
                let mut convs = Vec::new();
                for c in 0..s.convs {
                    let limit = (6.0 / (9 * cin) as f64).sqrt();
                    let name = format!("b{b}.s{j}.conv{c}");
                    let w = reg.add_param(
                        format!("{name}.weight"),
                        uniform([s.out_channels, 3, 3, cin], limit, &mut rng),
                        ParamGroup::Backbone,
                        true,
                    );
                    let bias = reg.add_param(
                        format!("{name}.bias"),
                        Tensor::zeros([1, 1, 1, s.out_channels]),
                        ParamGroup::Backbone,
                        false,
                    );
                    convs.push(Affine { w, b: bias });
                    cin = s.out_channels;
                }
                stages.push(convs);
            }
            branches.push(stages);
        }

        let mut fusion = Vec::new();
        if config.mode.is_fusion() {
            for (j, &c) in chans.iter().enumerate() {
                fusion.push(match config.mode {
                    Mode::Nddr => {
                        let mut weights = Vec::new();
                        let mut biases = Vec::new();
                        for (i, w) in init_projections::<T>(k, c, config.init, &mut rng)
                            .into_iter()
                            .enumerate()
                        {
                            weights.push(reg.add_param(
                                format!("fuse{j}.t{i}.weight"),
                                w,
                                ParamGroup::Fusion,
                                true,
                            ));
                            biases.push(reg.add_param(
                                format!("fuse{j}.t{i}.bias"),
                                Tensor::zeros([1, 1, 1, c]),
                                ParamGroup::Fusion,
                                false,
                            ));
                        }
                        let norm_specs: Vec<(String, usize)> = match config.nddr.norm {
                            NormPlacement::Shared => vec![(format!("fuse{j}.bn"), k * c)],
                            NormPlacement::PerTask => {
                                (0..k).map(|i| (format!("fuse{j}.bn{i}"), c)).collect()
                            }
                            NormPlacement::None => Vec::new(),
                        };
                        let norms = norm_specs
                            .into_iter()
                            .map(|(name, width)| {
                                let (gamma, beta) = if config.nddr.affine {
                                    let g = reg.add_param(
                                        format!("{name}.gamma"),
                                        Tensor::full([1, 1, 1, width], T::one()),
                                        ParamGroup::FusionNorm,
                                        false,
                                    );
                                    let b = reg.add_param(
                                        format!("{name}.beta"),
                                        Tensor::zeros([1, 1, 1, width]),
                                        ParamGroup::FusionNorm,
                                        false,
                                    );
                                    (Some(g), Some(b))
                                } else {
                                    (None, None)
                                };
                                NormIdx {
                                    gamma,
                                    beta,
                                    mean: reg.add_buffer(
                                        format!("{name}.running_mean"),
                                        Tensor::zeros([1, 1, 1, width]),
                                    ),
                                    var: reg.add_buffer(
                                        format!("{name}.running_var"),
                                        Tensor::full([1, 1, 1, width], T::one()),
                                    ),
                                }
                            })
                            .collect();
                        FusionIdx::Nddr {
                            weights,
                            biases,
                            norms,
                        }
                    }
                    _ => {
                        let s = if config.mode == Mode::Sluice {
                            config.subspaces
                        } else {
                            1
                        };
                        let layer = SluiceLayer::<T>::new(k, c, s, config.init, &mut rng)?;
                        FusionIdx::Mix(reg.add_param(
                            format!("fuse{j}.mix"),
                            layer.mix,
                            ParamGroup::Fusion,
                            false,
                        ))
                    }
                });
            }
        }

        let mut shortcuts = Vec::new();
        if config.shortcut {
            let cat: usize = chans.iter().sum();
            let cr = spec.reduce_channels();
            let limit = (6.0 / (cat + cr) as f64).sqrt();
            for i in 0..k {
                let w = reg.add_param(
                    format!("b{i}.shortcut.weight"),
                    uniform([cr, 1, 1, cat], limit, &mut rng),
                    ParamGroup::Shortcut,
                    true,
                );
                let b = reg.add_param(
                    format!("b{i}.shortcut.bias"),
                    Tensor::zeros([1, 1, 1, cr]),
                    ParamGroup::Shortcut,
                    false,
                );
                shortcuts.push(Affine { w, b });
            }
        }

        let head_in = if config.shortcut {
            spec.reduce_channels()
        } else {
            *chans.last().unwrap()
        };
        let head_specs: Vec<HeadSpec> = match config.mode {
            Mode::Single => vec![spec.heads[config.task]],
            _ => spec.heads.clone(),
        };
        let mut heads = Vec::new();
        for (i, h) in head_specs.into_iter().enumerate() {
            let o = h.outputs();
            let limit = (6.0 / (head_in + o) as f64).sqrt();
            let w = reg.add_param(
                format!("b{i}.head.weight"),
                uniform([o, 1, 1, head_in], limit, &mut rng),
                ParamGroup::Head,
                true,
            );
            let b = reg.add_param(
                format!("b{i}.head.bias"),
                Tensor::zeros([1, 1, 1, o]),
                ParamGroup::Head,
                false,
            );
            heads.push((h, Affine { w, b }));
        }

        Ok(Network {
            spec,
            config,
            registry: reg,
            norm: BnOptions::train(),
            layout: Layout {
                branches,
                fusion,
                shortcuts,
                heads,
            },
        })
    }

    pub fn tasks(&self) -> usize {
        self.layout.heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.registry.count()
    }

    pub fn fusion_layers(&self) -> usize {
        self.layout.fusion.len()
    }

    pub fn set_norm_mode(&mut self, mode: BnMode) {
        self.norm.mode = mode;
    }

    /// Puts every fusion normalization into the exact-identity state:
    /// eval mode, γ = 1, β = 0, running mean 0 and running variance
    /// `1 − eps`.
    pub fn set_norm_identity(&mut self) {
        self.norm.mode = BnMode::Eval;
        let var = identity_running_var::<T>(self.norm.eps);
        let norms: Vec<NormIdx> = self
            .layout
            .fusion
            .iter()
            .flat_map(|f| match f {
                FusionIdx::Nddr { norms, .. } => norms.clone(),
                FusionIdx::Mix(_) => Vec::new(),
            })
            .collect();
        for n in norms {
            let (m, v) = self.registry.buffer_pair_mut(n.mean, n.var);
            m.fill(T::zero());
            v.fill(var);
            if let Some(g) = n.gamma {
                self.registry.params_mut()[g]
                    .value
                    .data_mut()
                    .fill(T::one());
            }
            if let Some(b) = n.beta {
                self.registry.params_mut()[b]
                    .value
                    .data_mut()
                    .fill(T::zero());
            }
        }
    }

    /// Records the network on `g`. Parameters are placed as leaves that
    /// require gradients only when `grads` is set.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, grads: bool) -> Result<Pass> {
        let s = g.shape(x);
        let f = self.spec.downsample_factor();
        if s.c != self.spec.in_channels || s.h % f != 0 || s.w % f != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {s} for {} channels and extents divisible by {f}",
                    self.spec.in_channels
                ),
            ));
        }
        let params: Vec<Var> = self
            .registry
            .params()
            .iter()
            .map(|p| g.leaf(p.value.clone(), grads))
            .collect();
        let k = self.tasks();
        let mut feats = vec![x; self.layout.branches.len()];
        let mut levels = Vec::with_capacity(self.spec.stages.len());
        for j in 0..self.spec.stages.len() {
            for (b, feat) in feats.iter_mut().enumerate() {
                let mut y = *feat;
                for conv in &self.layout.branches[b][j] {
                    y = g.conv2d(
                        y,
                        params[conv.w],
                        Some(params[conv.b]),
                        ConvGeometry::same(3),
                    )?;
                    y = g.relu(y)?;
                }
                if let Some(pool) = self.spec.stages[j].pool.spec() {
                    y = g.max_pool(y, pool)?;
                }
                *feat = y;
            }
            if !self.layout.fusion.is_empty() {
                feats = self.fuse(g, &params, j, &feats)?;
            }
            levels.push(feats.clone());
        }

        let head_inputs: Vec<Var> = if self.config.shortcut {
            let last = g.shape(feats[0]);
            (0..k)
                .map(|i| {
                    let per_task: Vec<Var> = levels.iter().map(|l| l[i]).collect();
                    let sc = self.layout.shortcuts[i];
                    shortcut_aggregate(
                        g,
                        &per_task,
                        (last.h, last.w),
                        params[sc.w],
                        Some(params[sc.b]),
                        ResizeMode::Bilinear,
                    )
                })
                .collect::<Result<_>>()?
        } else if feats.len() == 1 {
            vec![feats[0]; k]
        } else {
            feats
        };

        let mut outputs = Vec::with_capacity(k);
        for (&(head, a), &input) in self.layout.heads.iter().zip(&head_inputs) {
            let out = match head {
                HeadSpec::Pixel { .. } => {
                    let y = g.conv1x1(input, params[a.w], Some(params[a.b]))?;
                    if (g.shape(y).h, g.shape(y).w) == (s.h, s.w) {
                        y
                    } else {
                        g.bilinear_resize(y, s.h, s.w)?
                    }
                }
                HeadSpec::Vector { .. } => {
                    let pooled = g.global_avg_pool(input)?;
                    g.fully_connected(pooled, params[a.w], Some(params[a.b]))?
                }
            };
            outputs.push(out);
        }
        Ok(Pass {
            outputs,
            params,
            levels,
        })
    }

    fn fuse(
        &mut self,
        g: &mut Graph<T>,
        params: &[Var],
        stage: usize,
        feats: &[Var],
    ) -> Result<Vec<Var>> {
        let c = self.spec.stages[stage].out_channels;
        let k = feats.len();
        match &self.layout.fusion[stage] {
            FusionIdx::Mix(m) => mix_features(g, feats, params[*m], k, c),
            FusionIdx::Nddr {
                weights,
                biases,
                norms,
            } => {
                let opts = self.norm;
                let mut bn = |g: &mut Graph<T>, x: Var, n: NormIdx| {
                    let (rm, rv) = self.registry.buffer_pair_mut(n.mean, n.var);
                    g.batch_norm(
                        x,
                        n.gamma.map(|i| params[i]),
                        n.beta.map(|i| params[i]),
                        rm,
                        rv,
                        opts,
                    )
                };
                let fused = match self.config.nddr.norm {
                    NormPlacement::Shared => {
                        let cat = g.concat_channels(feats)?;
                        bn(g, cat, norms[0])?
                    }
                    NormPlacement::PerTask => {
                        let normed = feats
                            .iter()
                            .zip(norms)
                            .map(|(&f, &n)| bn(g, f, n))
                            .collect::<Result<Vec<_>>>()?;
                        g.concat_channels(&normed)?
                    }
                    NormPlacement::None => g.concat_channels(feats)?,
                };
                weights
                    .iter()
                    .zip(biases)
                    .map(|(&w, &b)| g.conv1x1(fused, params[w], Some(params[b])))
                    .collect()
            }
        }
    }

    /// Per-task outputs for a batch, without recording gradients.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pass = self.forward(&mut g, xv, false)?;
        Ok(pass.outputs.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Every parameter and buffer as checkpoint records.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.registry.named_tensors() {
            ck.push_tensor(name, t).expect("registry names are unique");
        }
        ck
    }

    /// Restores every parameter and buffer from `ck`. All names must be
    /// present with matching shapes; problems are reported together and
    /// nothing is modified unless all records match.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        let names: Vec<(String, [usize; 4])> = self
            .registry
            .named_tensors()
            .map(|(n, t)| (n.to_string(), t.shape().dims()))
            .collect();
        let expected: HashSet<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
        for (name, dims) in &names {
            match ck.get(name) {
                None => problems.push(format!("missing `{name}`")),
                Some(r) if r.shape4() != *dims => problems.push(format!(
                    "`{name}`: checkpoint {:?} vs network {:?}",
                    r.dims, dims
                )),
                Some(r) => updates.push((name.clone(), r.to_tensor::<T>()?)),
            }
        }
        for r in &ck.records {
            if !r.name.starts_with("meta.") && !expected.contains(r.name.as_str()) {
                problems.push(format!("unexpected `{}`", r.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems));
        }
        for (name, t) in updates {
            *self.registry.get_mut(&name).unwrap() = t;
        }
        Ok(())
    }

    /// Warm start from single-task checkpoints (saved from single-mode
    /// networks, whose names all live under `b0.`). Branch `i` and head `i`
    /// come from checkpoint `i`; in shared mode the trunk comes from
    /// checkpoint 0. Fusion and shortcut parameters keep their
    /// initialization. Every missing, mismatched or unused name is
    /// reported, and nothing is modified on error.
    pub fn load_pretrained(&mut self, sources: &[&Checkpoint]) -> Result<()> {
        let k = self.tasks();
        if sources.len() != k {
            return Err(Error::ParamMismatch(vec![format!(
                "{} checkpoints for {k} tasks",
                sources.len()
            )]));
        }
        let shared = self.config.mode == Mode::Shared;
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        let mut used: Vec<HashSet<String>> = vec![HashSet::new(); k];
        for (pi, p) in self.registry.params().iter().enumerate() {
            if !matches!(p.group, ParamGroup::Backbone | ParamGroup::Head) {
                continue;
            }
            let (branch, rest) =
                split_branch(&p.name).expect("backbone and head names start with b{i}.");
            let src = if shared && p.group == ParamGroup::Backbone {
                0
            } else {
                branch
            };
            let ck_name = format!("b0.{rest}");
            match sources[src].get(&ck_name) {
                None => problems.push(format!(
                    "checkpoint {src}: missing `{ck_name}` for `{}`",
                    p.name
                )),
                Some(r) if r.shape4() != p.value.shape().dims() => problems.push(format!(
                    "checkpoint {src}: `{ck_name}` is {:?}, `{}` is {:?}",
                    r.dims,
                    p.name,
                    p.value.shape().dims()
                )),
                Some(r) => {
                    updates.push((pi, r.to_tensor::<T>()?));
                    used[src].insert(ck_name);
                }
            }
        }
        for (i, ck) in sources.iter().enumerate() {
            for r in &ck.records {
                let skipped_trunk = shared && i > 0 && r.name.starts_with("b0.s");
                if !r.name.starts_with("meta.") && !skipped_trunk && !used[i].contains(&r.name) {
                    problems.push(format!("checkpoint {i}: unexpected `{}`", r.name));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems));
        }
        for (pi, t) in updates {
            self.registry.params_mut()[pi].value = t;
        }
        Ok(())
    }
}

/// `"b3.s0.conv1.weight"` → `(3, "s0.conv1.weight")`.
fn split_branch(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix('b')?;
    let (idx, tail) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tail))
}
