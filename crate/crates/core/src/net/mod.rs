//! Declarative multi-task networks.
//!
//! A [`BackboneSpec`] describes one branch (stages of 3×3 convs, each
//! optionally pooled) and one head per task. [`Network::build`] turns it
//! into a single-task network, a shared trunk with per-task heads, or `K`
//! parallel branches joined after every stage by NDDR, cross-stitch or
//! sluice fusion. All parameters live in a flat, named
//! [`ParamRegistry`](registry::ParamRegistry).
//!
//! Naming: `b{i}.s{j}.conv{k}.{weight,bias}` for branch convs,
//! `b{i}.head.*`, `b{i}.shortcut.*`, `fuse{j}.t{i}.*` for NDDR projections,
//! `fuse{j}.bn.*` (or `fuse{j}.bn{i}.*`) for fusion normalization and
//! `fuse{j}.mix` for cross-stitch/sluice matrices. Single-task networks
//! use branch 0, which is what [`Network::load_pretrained`] expects.

mod network;
mod registry;
mod spec;

pub use network::{Network, Pass};
pub use registry::{Buffer, Param, ParamGroup, ParamRegistry, Slot};
pub use spec::{BackboneSpec, HeadSpec, Mode, NetConfig, ParamLedger, PoolKind, StageSpec};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::fusion::{count_fusion_params, InitPolicy, NddrConfig, NormPlacement};
    use crate::tensor::{Graph, Tensor};
    use crate::Error;

    fn two_task() -> BackboneSpec {
        BackboneSpec::toy_vgg(
            3,
            vec![
                HeadSpec::Pixel { out_channels: 3 },
                HeadSpec::Pixel { out_channels: 3 },
            ],
        )
    }

    fn small() -> BackboneSpec {
        BackboneSpec {
            in_channels: 2,
            stages: vec![
                StageSpec {
                    convs: 1,
                    out_channels: 4,
                    pool: PoolKind::Halving,
                },
                StageSpec {
                    convs: 2,
                    out_channels: 4,
                    pool: PoolKind::Dense,
                },
            ],
            heads: vec![
                HeadSpec::Pixel { out_channels: 2 },
                HeadSpec::Vector { classes: 3 },
            ],
            shortcut_channels: Some(3),
        }
    }

    fn all_configs() -> Vec<NetConfig> {
        let mut out = vec![
            NetConfig::single(0),
            NetConfig::single(1),
            NetConfig::with_mode(Mode::Shared),
        ];
        for mode in [Mode::Nddr, Mode::CrossStitch, Mode::Sluice] {
            for shortcut in [false, true] {
                out.push(NetConfig {
                    mode,
                    shortcut,
                    ..Default::default()
                });
            }
        }
        for norm in [NormPlacement::PerTask, NormPlacement::None] {
            out.push(NetConfig {
                nddr: NddrConfig { norm, affine: true },
                ..Default::default()
            });
        }
        out.push(NetConfig {
            nddr: NddrConfig {
                norm: NormPlacement::Shared,
                affine: false,
            },
            ..Default::default()
        });
        out
    }

    #[test]
    fn toy_vgg_single_has_four_stages_and_head() {
        let net = Network::<f32>::build(two_task(), NetConfig::single(0), 0).unwrap();
        assert_eq!(net.spec.stages.len(), 4);
        assert_eq!(net.fusion_layers(), 0);
        assert_eq!(net.tasks(), 1);
        assert!(net.registry.get("b0.head.weight").is_some());
        assert!(net.registry.get("b0.s3.conv1.weight").is_some());
        assert_eq!(net.spec.downsample_factor(), 2);
    }

    #[test]
    fn nddr_has_one_fusion_layer_per_stage() {
        let net = Network::<f32>::build(two_task(), NetConfig::default(), 0).unwrap();
        assert_eq!(net.fusion_layers(), 4);
        for j in 0..4 {
            assert!(net.registry.get(&format!("fuse{j}.t1.weight")).is_some());
        }
        assert!(net.registry.get("fuse4.t0.weight").is_none());
    }

    #[test]
    fn ledger_matches_registry_for_every_mode() {
        for spec in [two_task(), small()] {
            for cfg in all_configs() {
                let net = Network::<f32>::build(spec.clone(), cfg, 3).unwrap();
                let l = ParamLedger::compute(&spec, &cfg).unwrap();
                let r = &net.registry;
                assert_eq!(l.total, r.count(), "{cfg:?}");
                assert_eq!(l.backbone, r.count_group(ParamGroup::Backbone));
                assert_eq!(l.heads, r.count_group(ParamGroup::Head));
                assert_eq!(l.fusion, r.count_group(ParamGroup::Fusion));
                assert_eq!(l.fusion_norm, r.count_group(ParamGroup::FusionNorm));
                assert_eq!(l.shortcut, r.count_group(ParamGroup::Shortcut));
            }
        }
    }

    #[test]
    fn nddr_overhead_over_two_singles() {
        let spec = two_task();
        let singles: usize = (0..2)
            .map(|t| {
                Network::<f32>::build(spec.clone(), NetConfig::single(t), 0)
                    .unwrap()
                    .param_count()
            })
            .sum();
        let fusion = count_fusion_params(2, &spec.stage_channels(), true);
        let bare = NetConfig {
            nddr: NddrConfig {
                norm: NormPlacement::None,
                affine: false,
            },
            ..Default::default()
        };
        let n = Network::<f32>::build(spec.clone(), bare, 0).unwrap();
        assert_eq!(n.param_count() - singles, fusion.total);
        let n = Network::<f32>::build(spec, NetConfig::default(), 0).unwrap();
        assert_eq!(n.param_count() - singles, fusion.total + fusion.norm_affine);
    }

    #[test]
    fn decay_only_on_weights() {
        for cfg in all_configs() {
            let net = Network::<f32>::build(small(), cfg, 0).unwrap();
            for p in net.registry.params() {
                let is_weight = p.name.ends_with(".weight");
                assert_eq!(p.decay, is_weight, "{}", p.name);
                assert_eq!(
                    p.group.lr_scaled(),
                    p.name.starts_with("fuse"),
                    "{}",
                    p.name
                );
            }
            for b in net.registry.buffers() {
                assert!(b.name.ends_with("running_mean") || b.name.ends_with("running_var"));
            }
        }
    }

    #[test]
    fn build_errors() {
        let mut one = two_task();
        one.heads.truncate(1);
        assert!(Network::<f32>::build(one.clone(), NetConfig::default(), 0).is_err());
        assert!(Network::<f32>::build(one, NetConfig::single(0), 0).is_ok());
        let bad = NetConfig {
            mode: Mode::Single,
            shortcut: true,
            ..Default::default()
        };
        assert!(Network::<f32>::build(two_task(), bad, 0).is_err());
        let sluice = NetConfig {
            mode: Mode::Sluice,
            subspaces: 3,
            ..Default::default()
        };
        assert!(Network::<f32>::build(two_task(), sluice, 0).is_err());
        let mut empty = two_task();
        empty.stages[1].out_channels = 0;
        assert!(Network::<f32>::build(empty, NetConfig::single(0), 0).is_err());
    }

    #[test]
    fn forward_shapes_and_input_checks() {
        let mut net = Network::<f64>::build(small(), NetConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::random_uniform([2, 4, 6, 2], -1.0, 1.0, &mut rng);
        let out = net.predict(&x).unwrap();
        assert_eq!(out[0].shape().dims(), [2, 4, 6, 2]);
        assert_eq!(out[1].shape().dims(), [2, 1, 1, 3]);
        assert!(net.predict(&Tensor::zeros([1, 3, 4, 2])).is_err());
        assert!(net.predict(&Tensor::zeros([1, 4, 4, 3])).is_err());
    }

    #[test]
    fn shortcut_head_width_is_reduction_width() {
        for stages in 1..=4 {
            let mut spec = two_task();
            spec.stages.truncate(stages);
            let cfg = NetConfig {
                shortcut: true,
                ..Default::default()
            };
            let mut net = Network::<f32>::build(spec.clone(), cfg, 0).unwrap();
            let cr = spec.reduce_channels();
            assert_eq!(net.registry.get("b0.head.weight").unwrap().shape().c, cr);
            let out = net.predict(&Tensor::zeros([1, 8, 8, 3])).unwrap();
            assert_eq!(out[1].shape().dims(), [1, 8, 8, 3]);
        }
    }

    fn identity_start_case<T: crate::tensor::Scalar>(cfg: NetConfig, tol: f64) {
        let spec = two_task();
        let mut singles: Vec<Network<T>> = (0..2)
            .map(|t| Network::build(spec.clone(), NetConfig::single(t), 10 + t as u64).unwrap())
            .collect();
        let cks: Vec<_> = singles.iter().map(|n| n.to_checkpoint()).collect();
        let mut fused = Network::<T>::build(spec, cfg, 99).unwrap();
        fused.load_pretrained(&[&cks[0], &cks[1]]).unwrap();
        fused.set_norm_identity();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let x = Tensor::random_uniform([2, 16, 16, 3], -1.0, 1.0, &mut rng);
            let got = fused.predict(&x).unwrap();
            for (t, single) in singles.iter_mut().enumerate() {
                let want = single.predict(&x).unwrap().remove(0);
                assert!(
                    got[t].max_abs_diff(&want) <= tol,
                    "task {t}: {}",
                    got[t].max_abs_diff(&want)
                );
            }
        }
    }

    #[test]
    fn identity_start_reproduces_singles() {
        for mode in [Mode::Nddr, Mode::CrossStitch, Mode::Sluice] {
            identity_start_case::<f32>(
                NetConfig {
                    mode,
                    init: InitPolicy::IDENTITY,
                    ..Default::default()
                },
                1e-5,
            );
        }
        identity_start_case::<f64>(
            NetConfig {
                init: InitPolicy::IDENTITY,
                nddr: NddrConfig {
                    norm: NormPlacement::PerTask,
                    affine: true,
                },
                ..Default::default()
            },
            1e-12,
        );
    }

    #[test]
    fn checkpoint_into_own_graph_is_bit_identical() {
        let a = Network::<f32>::build(two_task(), NetConfig::single(1), 5).unwrap();
        let mut b = Network::<f32>::build(two_task(), NetConfig::single(1), 6).unwrap();
        assert_ne!(a.registry, b.registry);
        b.load_pretrained(&[&a.to_checkpoint()]).unwrap();
        assert_eq!(a.registry, b.registry);
        let c = Network::<f32>::build(two_task(), NetConfig::default(), 7).unwrap();
        let mut d = Network::<f32>::build(two_task(), NetConfig::default(), 8).unwrap();
        d.load_state(&c.to_checkpoint()).unwrap();
        assert_eq!(c.registry, d.registry);
    }

    #[test]
    fn mismatched_names_are_all_reported() {
        let single = Network::<f32>::build(small(), NetConfig::single(0), 0).unwrap();
        let mut ck = single.to_checkpoint();
        ck.records.retain(|r| !r.name.starts_with("b0.s1"));
        ck.push_tensor("b0.extra", &Tensor::<f32>::scalar(0.0))
            .unwrap();
        let other = Network::<f32>::build(small(), NetConfig::single(1), 0)
            .unwrap()
            .to_checkpoint();
        let mut net = Network::<f32>::build(small(), NetConfig::default(), 0).unwrap();
        let before = net.registry.clone();
        match net.load_pretrained(&[&ck, &other]) {
            Err(Error::ParamMismatch(p)) => {
                // 2 convs × (weight, bias) missing, 1 unexpected
                assert_eq!(p.len(), 5, "{p:?}");
                assert!(p.iter().any(|m| m.contains("b0.s1.conv1.bias")));
                assert!(p.iter().any(|m| m.contains("b0.extra")));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(net.registry, before);
        // head shape mismatch: task 1's checkpoint in task 0's slot
        assert!(matches!(
            net.load_pretrained(&[&other, &other]),
            Err(Error::ParamMismatch(_))
        ));
        assert!(net.load_pretrained(&[&other]).is_err());
    }

    #[test]
    fn shared_trunk_heads_see_identical_features() {
        let mut net =
            Network::<f32>::build(two_task(), NetConfig::with_mode(Mode::Shared), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 8, 8, 3], 0.5));
        let pass = net.forward(&mut g, x, false).unwrap();
        assert!(pass.levels.iter().all(|l| l.len() == 1));
        let single = Network::<f32>::build(two_task(), NetConfig::single(0), 1).unwrap();
        let ck = single.to_checkpoint();
        let other = Network::<f32>::build(two_task(), NetConfig::single(1), 2)
            .unwrap()
            .to_checkpoint();
        net.load_pretrained(&[&ck, &other]).unwrap();
        assert_eq!(
            net.registry.get("b0.s0.conv0.weight"),
            single.registry.get("b0.s0.conv0.weight")
        );
        assert_eq!(
            net.registry.get("b1.head.weight").unwrap().data(),
            Network::<f32>::build(two_task(), NetConfig::single(1), 2)
                .unwrap()
                .registry
                .get("b0.head.weight")
                .unwrap()
                .data()
        );
    }

    #[test]
    fn shared_trunk_gradients_add_across_tasks() {
        let spec = small();
        let mut net = Network::<f64>::build(spec, NetConfig::with_mode(Mode::Shared), 2).unwrap();
        net.set_norm_mode(crate::layers::BnMode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random_uniform([2, 4, 4, 2], -1.0, 1.0, &mut rng);
        let proj0 = Tensor::random_uniform([2, 4, 4, 2], -1.0, 1.0, &mut rng);
        let proj1 = Tensor::random_uniform([2, 1, 1, 3], -1.0, 1.0, &mut rng);
        let grads = |net: &mut Network<f64>, which: [bool; 2]| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let pass = net.forward(&mut g, xv, true).unwrap();
            let mut terms = Vec::new();
            for (t, proj) in [&proj0, &proj1].into_iter().enumerate() {
                if which[t] {
                    let p = g.constant(proj.clone());
                    let m = g.mul(pass.outputs[t], p).unwrap();
                    terms.push((g.sum(m).unwrap(), 1.0));
                }
            }
            let loss = g.weighted_sum(&terms).unwrap();
            g.backward(loss).unwrap();
            pass.params
                .iter()
                .map(|&p| g.grad(p).map(|s| s.to_vec()).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        let both = grads(&mut net, [true, true]);
        let a = grads(&mut net, [true, false]);
        let b = grads(&mut net, [false, true]);
        for (i, p) in net.registry.params().iter().enumerate() {
            if p.group != ParamGroup::Backbone {
                continue;
            }
            for k in 0..both[i].len() {
                let sum = a[i].get(k).copied().unwrap_or(0.0) + b[i].get(k).copied().unwrap_or(0.0);
                assert!(
                    (both[i][k] - sum).abs() <= 1e-12 * (1.0 + sum.abs()),
                    "{}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn seeded_build_and_forward_are_deterministic() {
        for cfg in all_configs() {
            let mut a = Network::<f32>::build(small(), cfg, 42).unwrap();
            let mut b = Network::<f32>::build(small(), cfg, 42).unwrap();
            assert_eq!(a.registry, b.registry);
            let x = Tensor::from_fn([2, 4, 4, 2], |[n, h, w, c]| {
                (n + 2 * h + 3 * w + 5 * c) as f32 * 0.1
            });
            let (oa, ob) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
            assert_eq!(oa, ob);
            assert_eq!(a.registry, b.registry);
        }
    }
}
