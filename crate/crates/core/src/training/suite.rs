//! Ready-made finite-difference suites over every differentiable primitive,
//! both cell versions and a whole network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{Cell, CellVersion, StateNodes};
use crate::error::Result;
use crate::network::{Network, NetworkConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, NodeId, Pointwise, Tensor};
use crate::training::gradcheck::{GradCheck, GradCheckReport};

fn rand_tensor(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum so every output coordinate carries a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = g.constant(rand_tensor(g.shape(y), seed)?);
    let p = g.hadamard(y, w)?;
    g.sum(p)
}

/// One report per primitive op.
pub fn primitive_suite(check: &GradCheck) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let x = rand_tensor(&[2, 3, 5, 4], 1)?;
    let y = rand_tensor(&[2, 3, 5, 4], 2)?;

    let conv = [rand_tensor(&[2, 3, 5, 5], 3)?, rand_tensor(&[4, 3, 3, 3], 4)?, rand_tensor(&[4], 5)?];
    out.push(check.run("conv2d", &conv, |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
        weighted_sum(g, y, 6)
    })?);
    let tconv = [rand_tensor(&[2, 3, 3, 4], 7)?, rand_tensor(&[3, 2, 3, 3], 8)?, rand_tensor(&[2], 9)?];
    out.push(check.run("conv_transpose2d", &tconv, |g, ids| {
        let y = g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
        weighted_sum(g, y, 10)
    })?);
    let lin = [rand_tensor(&[3, 4], 11)?, rand_tensor(&[5, 4], 12)?, rand_tensor(&[5], 13)?];
    out.push(check.run("linear", &lin, |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
        weighted_sum(g, y, 14)
    })?);
    for (name, op) in [("sigmoid", Pointwise::Sigmoid), ("tanh", Pointwise::Tanh), ("relu", Pointwise::Relu)] {
        out.push(check.run(name, std::slice::from_ref(&x), |g, ids| {
            let y = g.pointwise(op, ids[0], None)?;
            weighted_sum(g, y, 15)
        })?);
    }
    for (name, op) in [("add", Pointwise::Add), ("hadamard", Pointwise::Hadamard)] {
        out.push(check.run(name, &[x.clone(), y.clone()], |g, ids| {
            let y = g.pointwise(op, ids[0], Some(ids[1]))?;
            weighted_sum(g, y, 16)
        })?);
    }
    out.push(check.run("scale", std::slice::from_ref(&x), |g, ids| {
        let y = g.scale(ids[0], -0.7)?;
        weighted_sum(g, y, 17)
    })?);
    out.push(check.run("concat_channels", &[x.clone(), rand_tensor(&[2, 1, 5, 4], 18)?], |g, ids| {
        let y = g.concat_channels(ids[0], ids[1])?;
        weighted_sum(g, y, 19)
    })?);
    out.push(check.run("slice_channels", std::slice::from_ref(&x), |g, ids| {
        let y = g.slice_channels(ids[0], 1, 2)?;
        weighted_sum(g, y, 20)
    })?);
    let rows = [rand_tensor(&[2, 3, 2], 29)?, rand_tensor(&[1, 3, 2], 30)?, rand_tensor(&[3, 3, 2], 31)?];
    out.push(check.run("concat_rows", &rows, |g, ids| {
        let y = g.concat_rows(ids)?;
        weighted_sum(g, y, 32)
    })?);
    out.push(check.run("global_avg_pool", std::slice::from_ref(&x), |g, ids| {
        let y = g.global_avg_pool(ids[0])?;
        weighted_sum(g, y, 21)
    })?);
    out.push(check.run("avg_pool2d", std::slice::from_ref(&x), |g, ids| {
        let y = g.avg_pool2d(ids[0], 2)?;
        weighted_sum(g, y, 22)
    })?);
    out.push(check.run("batch_mean", std::slice::from_ref(&x), |g, ids| {
        let y = g.batch_mean(ids[0])?;
        weighted_sum(g, y, 23)
    })?);
    out.push(check.run("batch_broadcast", &[rand_tensor(&[1, 2, 3, 3], 24)?], |g, ids| {
        let y = g.batch_broadcast(ids[0], 3)?;
        weighted_sum(g, y, 25)
    })?);
    out.push(check.run("sum", std::slice::from_ref(&x), |g, ids| g.sum(ids[0]))?);
    out.push(check.run("softmax_cross_entropy", &[rand_tensor(&[4, 5], 26)?], |g, ids| {
        g.softmax_cross_entropy(ids[0], &[1, 0, 4, 2])
    })?);
    out.push(check.run("l1_loss", &[rand_tensor(&[3, 6], 27)?, rand_tensor(&[3, 6], 28)?], |g, ids| {
        g.l1_loss(ids[0], ids[1])
    })?);
    Ok(out)
}

/// One report per cell version, differentiating through the output and both
/// carried states with respect to input, states and every parameter.
pub fn cell_suite(check: &GradCheck) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (name, version) in [("bconv_cell", CellVersion::V1), ("bconv_cell_v2", CellVersion::V2)] {
        let mut store = ParamStore::<f64>::new();
        let cell = Cell::new(version, &mut store, "cell", 2, 3, 3, &mut ChaCha8Rng::seed_from_u64(30))?;
        let probe = rand_tensor(&[2, 3, 4, 3], 34)?;
        let is_v2 = version == CellVersion::V2;
        let mut inputs = vec![
            rand_tensor(&[2, 2, 4, 3], 31)?,
            rand_tensor(&[1, 3, 4, 3], 32)?,
            rand_tensor(&[1, 3, 4, 3], 33)?,
        ];
        inputs.extend(store.tensors().iter().cloned());
        out.push(check.run(name, &inputs, |g, ids| {
            let p = Bound::from_ids(ids[3..].to_vec());
            let state = StateNodes {
                c: ids[1],
                h: is_v2.then_some(ids[2]),
            };
            let o = cell.forward(g, &p, ids[0], state)?;
            let mut total = weighted_sum_with(g, o.y, &probe)?;
            let sc = g.sum(o.state.c)?;
            total = g.add(total, sc)?;
            if let Some(h) = o.state.h {
                let sh = g.sum(h)?;
                total = g.add(total, sh)?;
            }
            Ok(total)
        })?);
    }
    Ok(out)
}

fn weighted_sum_with(g: &mut Graph<f64>, y: NodeId, w: &Tensor<f64>) -> Result<NodeId> {
    let w = g.constant(w.clone());
    let p = g.hadamard(y, w)?;
    g.sum(p)
}

/// Cross-entropy gradients of a whole network, one report per layer class.
/// Parameters are doubled from their initial draw so every layer's gradient
/// stands well above rounding noise, and cell states are warmed by one
/// training-mode batch first.
pub fn network_suite(check: &GradCheck, config: &NetworkConfig, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut net = Network::<f64>::new(config, seed)?;
    for t in net.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let shape = [2, config.in_channels, config.resolution, config.resolution];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    net.forward(&Tensor::uniform(&shape, 0.0, 1.0, &mut rng)?)?;
    let states = net.states().to_vec();
    let x = Tensor::uniform(&shape, 0.0, 1.0, &mut rng)?;
    let labels: Vec<usize> = (0..2).map(|i| (i * 2 + 1) % config.classes).collect();
    let groups = net.layer_classes();
    check.run_groups(net.store.tensors(), &groups, |g, ids| {
        let p = Bound::from_ids(ids.to_vec());
        let xi = g.constant(x.clone());
        let sn: Vec<StateNodes> = states.iter().map(|s| s.bind(g)).collect();
        let o = net.forward_graph(g, &p, xi, &sn)?;
        g.softmax_cross_entropy(o.logits, &labels)
    })
}
