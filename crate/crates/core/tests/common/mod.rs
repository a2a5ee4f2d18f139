//! Finite-difference gradient checks shared by the gradient suite and the
//! acceptance run.
#![allow(dead_code)]

use dyconv::arch::{BlockKind, BlockSpec, FusionPath, Network, NetworkSpec, StemSpec};
use dyconv::tensor::BatchNormState;
use dyconv::training::{Graph, Mode, NodeId};
use dyconv::{ConvGeometry, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, zero when
/// both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds a scalar loss from differentiable leaves `vars`.
pub type LossFn = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

/// Worst relative error over all inputs of `f`.
pub fn check(inputs: &[Tensor<f64>], f: &LossFn) -> Result<f64> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<NodeId> = vals.iter().map(|v| g.variable(v.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss)?.data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<NodeId> = inputs.iter().map(|v| g.variable(v.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*var)? {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut vals = inputs.to_vec();
        for j in 0..inputs[k].numel() {
            let orig = vals[k].data()[j];
            vals[k].data_mut()[j] = orig + STEP;
            let up = eval(&vals)?;
            vals[k].data_mut()[j] = orig - STEP;
            let down = eval(&vals)?;
            vals[k].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Reduce any node to a scalar through a fixed random projection, so every
/// output element carries a distinct weight.
pub fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(y)?.shape().to_vec();
    let r = g.input(Tensor::rand_normal(&shape, 1.0, &mut rng(seed)));
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Random values bounded away from zero, keeping ReLU kinks out of reach of
/// the finite-difference step.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_normal(shape, 1.0, &mut rng(seed)).map(|v: f64| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub loss: Box<LossFn>,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, loss: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        loss: Box::new(loss),
    }
}

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_normal(shape, 1.0, &mut rng(seed))
}

/// One case per differentiable graph op, plus conv geometries that matter.
pub fn op_cases() -> Vec<OpCase> {
    let conv = |name, geom: ConvGeometry, bias: bool| {
        let mut inputs = vec![normal(&[2, geom.in_channels, 5, 5], 1), normal(&geom.weight_shape(), 2)];
        if bias {
            inputs.push(normal(&[geom.out_channels], 3));
        }
        case(name, inputs, move |g, v| {
            let y = g.conv2d(v[0], v[1], v.get(2).copied(), geom)?;
            project(g, y, 10)
        })
    };
    let kfc = |name, geom: ConvGeometry, gt: usize| {
        let bank = geom.with_out_channels(geom.out_channels * gt).unwrap();
        case(
            name,
            vec![
                normal(&[2, geom.in_channels, 5, 5], 4),
                normal(&bank.weight_shape(), 5),
                Tensor::rand_uniform(&[2, geom.out_channels * gt], 0.1, 0.9, &mut rng(6)),
                normal(&[geom.out_channels], 7),
            ],
            move |g, v| {
                let y = g.kernel_fusion_conv(v[0], v[1], v[2], Some(v[3]), geom, gt)?;
                project(g, y, 11)
            },
        )
    };
    vec![
        conv("conv2d", ConvGeometry::new(3, 4, 3, 2, 1, 1).unwrap(), true),
        conv("conv2d grouped", ConvGeometry::new(4, 6, 3, 1, 1, 2).unwrap(), false),
        conv("conv2d depthwise", ConvGeometry::new(4, 4, 3, 1, 1, 4).unwrap(), true),
        conv("conv2d 1x1", ConvGeometry::new(3, 5, 1, 1, 0, 1).unwrap(), false),
        case("linear", vec![normal(&[3, 4], 1), normal(&[5, 4], 2), normal(&[5], 3)], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, 12)
        }),
        case("relu", vec![away_from_zero(&[2, 3, 2, 2], 1)], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, 13)
        }),
        case("sigmoid", vec![normal(&[3, 5], 1)], |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, 14)
        }),
        case("global_avg_pool", vec![normal(&[2, 3, 3, 4], 1)], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, 15)
        }),
        case(
            "batch_norm train",
            vec![normal(&[3, 2, 3, 3], 1), normal(&[2], 2), normal(&[2], 3)],
            |g, v| {
                let mut state = BatchNormState::new(2);
                let y = g.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train)?;
                project(g, y, 16)
            },
        ),
        case(
            "batch_norm eval",
            vec![normal(&[2, 2, 3, 3], 1), normal(&[2], 2), normal(&[2], 3)],
            |g, v| {
                let mut state = BatchNormState::with_running_stats(
                    Tensor::new(&[2], vec![0.3, -0.2])?,
                    Tensor::new(&[2], vec![1.5, 0.7])?,
                )?;
                let y = g.batch_norm(v[0], v[1], v[2], &mut state, Mode::Eval)?;
                project(g, y, 17)
            },
        ),
        case("add", vec![normal(&[2, 3], 1), normal(&[2, 3], 2)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 18)
        }),
        case("mul", vec![normal(&[2, 3], 1), normal(&[2, 3], 2)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 19)
        }),
        case("sum", vec![normal(&[2, 3], 1)], |g, v| {
            let s = g.sum(v[0])?;
            g.mul(s, s)
        }),
        case("reshape", vec![normal(&[2, 6], 1)], |g, v| {
            let y = g.reshape(v[0], &[2, 3, 2, 1])?;
            project(g, y, 20)
        }),
        case(
            "feature_fusion",
            vec![normal(&[2, 6, 3, 3], 1), Tensor::rand_uniform(&[2, 6], 0.0, 1.0, &mut rng(2))],
            |g, v| {
                let y = g.feature_fusion(v[0], v[1], 3)?;
                project(g, y, 21)
            },
        ),
        kfc("kernel_fusion_conv", ConvGeometry::new(3, 4, 3, 1, 1, 1).unwrap(), 3),
        kfc("kernel_fusion_conv grouped", ConvGeometry::new(4, 4, 3, 2, 1, 2).unwrap(), 2),
        case("slice_cols", vec![normal(&[3, 7], 1)], |g, v| {
            let y = g.slice_cols(v[0], 2, 4)?;
            project(g, y, 22)
        }),
        case("slice_channels", vec![normal(&[2, 5, 2, 2], 1)], |g, v| {
            let y = g.slice_channels(v[0], 1, 3)?;
            project(g, y, 23)
        }),
        case("concat_channels", vec![normal(&[2, 2, 2, 2], 1), normal(&[2, 3, 2, 2], 2)], |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            project(g, y, 24)
        }),
        case("channel_shuffle", vec![normal(&[2, 6, 2, 2], 1)], |g, v| {
            let y = g.channel_shuffle(v[0], 2)?;
            project(g, y, 25)
        }),
        case("smoothed_cross_entropy", vec![normal(&[4, 5], 1)], |g, v| {
            g.smoothed_cross_entropy(v[0], &[0, 3, 4, 1], 0.1)
        }),
    ]
}

/// Two blocks of `kind` (`c -> c` then `c -> 2c` at stride 2) on a 3x8x8
/// input with four classes.
pub fn two_block_net(kind: &str, channels: usize, group_size: usize) -> Result<NetworkSpec> {
    let kind: BlockKind = kind.parse()?;
    Ok(NetworkSpec {
        name: format!("two-{kind}"),
        input: (3, 8, 8),
        classes: 4,
        stem: StemSpec {
            out_channels: channels,
            kernel_size: 3,
            stride: 1,
        },
        blocks: vec![
            BlockSpec::new(kind, channels, channels, 1, group_size)?,
            BlockSpec::new(kind, channels, 2 * channels, 2, group_size)?,
        ],
    })
}

fn network_loss(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize], path: FusionPath) -> Result<(f64, Graph<f64>, NodeId)> {
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let logits = net.forward(&mut g, input, Mode::Train, path)?;
    let loss = g.smoothed_cross_entropy(logits, labels, 0.1)?;
    Ok((g.value(loss)?.data()[0], g, loss))
}

/// Per-parameter relative errors of a train-mode network loss. Every
/// element of every parameter is perturbed.
pub fn check_network(spec: &NetworkSpec, path: FusionPath, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut net = Network::<f64>::new(spec, &mut rng(seed))?;
    let (c, h, w) = spec.input;
    let x = Tensor::rand_normal(&[3, c, h, w], 1.0, &mut rng(seed + 1));
    let labels = [0, 2, 3];
    let (_, mut g, loss) = network_loss(&mut net, &x, &labels, path)?;
    g.backward(loss)?;
    let grads = g.param_grads()?;
    let mut out = Vec::new();
    for (id, analytic) in grads {
        let name = net.params().get(id).name.clone();
        let mut numeric = Vec::with_capacity(analytic.numel());
        for j in 0..analytic.numel() {
            let orig = net.params().value(id).data()[j];
            net.params_mut().get_mut(id).value.data_mut()[j] = orig + STEP;
            let up = network_loss(&mut net, &x, &labels, path)?.0;
            net.params_mut().get_mut(id).value.data_mut()[j] = orig - STEP;
            let down = network_loss(&mut net, &x, &labels, path)?.0;
            net.params_mut().get_mut(id).value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        out.push((name, relative_error(analytic.data(), &numeric)));
    }
    Ok(out)
}

/// Parameter gradients of one train-mode step under `path`.
pub fn network_grads(spec: &NetworkSpec, path: FusionPath, seed: u64) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut net = Network::<f64>::new(spec, &mut rng(seed))?;
    let (c, h, w) = spec.input;
    let x = Tensor::rand_normal(&[3, c, h, w], 1.0, &mut rng(seed + 1));
    let (_, mut g, loss) = network_loss(&mut net, &x, &[1, 0, 3], path)?;
    g.backward(loss)?;
    Ok(g
        .param_grads()?
        .into_iter()
        .map(|(id, t)| (net.params().get(id).name.clone(), t))
        .collect())
}
