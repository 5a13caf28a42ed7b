//! Reverse-mode gradient computation.

use std::collections::{HashMap, HashSet};

use super::ops::{conv2d_input_grad, conv2d_kernel_grad, conv2d_nobias};
use super::{Op, Result, Tensor, TensorError};

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// Entries of `wrt` that are not graph-linked, or that `output` does not
/// depend on, get a zero gradient. With `build_higher` the returned gradients
/// are themselves linked into the graph, so they can be fed to another
/// `backward` call; otherwise they are plain tensors.
pub fn backward(output: &Tensor, wrt: &[Tensor], build_higher: bool) -> Result<Vec<Tensor>> {
    if !output.is_scalar() {
        return Err(TensorError::NotScalar {
            op: "backward",
            shape: output.shape().to_vec(),
        });
    }
    let targets: HashSet<u64> = wrt.iter().filter_map(Tensor::node_id).collect();
    let mut grads: HashMap<u64, Tensor> = HashMap::new();

    if let Some(root_id) = output.node_id() {
        let order = topological_order(output);
        let reaches = reachability(&order, &targets);
        grads.insert(root_id, Tensor::ones(output.shape()));

        for t in order.iter().rev() {
            let node = t.node().expect("ordered tensors are linked");
            if !reaches.contains(&node.id) || node.op == Op::Leaf {
                continue;
            }
            let upstream = if targets.contains(&node.id) {
                match grads.get(&node.id) {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads.remove(&node.id) {
                    Some(g) => g,
                    None => continue,
                }
            };
            let (parents, out) = if build_higher {
                (node.parents.clone(), t.clone())
            } else {
                (node.parents.iter().map(Tensor::detach).collect(), t.detach())
            };
            for (i, parent) in node.parents.iter().enumerate() {
                let Some(pid) = parent.node_id() else { continue };
                if !reaches.contains(&pid) {
                    continue;
                }
                let contrib = parent_grad(&node.op, &parents, i, &upstream, &out)?;
                let total = match grads.remove(&pid) {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                };
                grads.insert(pid, total);
            }
        }
    }

    Ok(wrt
        .iter()
        .map(|w| match w.node_id().and_then(|id| grads.get(&id)) {
            Some(g) if build_higher => g.clone(),
            Some(g) => g.detach(),
            None => Tensor::zeros(w.shape()),
        })
        .collect())
}

/// Linked tensors reachable from `root`, parents before children.
fn topological_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        let node = t.node().expect("only linked tensors are pushed").clone();
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(node.id) {
            continue;
        }
        stack.push((t, true));
        for p in node.parents.iter().rev() {
            if let Some(pid) = p.node_id() {
                if !seen.contains(&pid) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Ids of nodes that have some target among their ancestors (or are one).
fn reachability(order: &[Tensor], targets: &HashSet<u64>) -> HashSet<u64> {
    let mut reaches = HashSet::new();
    for t in order {
        let node = t.node().expect("ordered tensors are linked");
        let hit = targets.contains(&node.id)
            || node
                .parents
                .iter()
                .filter_map(Tensor::node_id)
                .any(|pid| reaches.contains(&pid));
        if hit {
            reaches.insert(node.id);
        }
    }
    reaches
}

fn match_shape(g: Tensor, like: &Tensor) -> Result<Tensor> {
    if g.shape() == like.shape() {
        Ok(g)
    } else {
        g.reshape(like.shape())
    }
}

/// Contribution of `upstream` (gradient wrt the node output `out`) to the
/// gradient of parent `i`, built from differentiable operations.
fn parent_grad(op: &Op, p: &[Tensor], i: usize, upstream: &Tensor, out: &Tensor) -> Result<Tensor> {
    let u = upstream;
    match op {
        Op::Leaf => unreachable!("leaves have no parents"),
        Op::Add => Ok(u.clone()),
        Op::Sub => {
            if i == 0 {
                Ok(u.clone())
            } else {
                u.neg()
            }
        }
        Op::Mul => u.mul(&p[1 - i]),
        Op::Scale => {
            if i == 0 {
                u.scale(&p[1])
            } else {
                match_shape(u.dot(&p[0])?, &p[1])
            }
        }
        Op::MulConst(c) => u.mul_const(*c),
        Op::AddConst(_) => Ok(u.clone()),
        Op::Relu => {
            let step = p[0].data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
            u.mul(&Tensor::plain(p[0].shape().to_vec(), step))
        }
        Op::Sigmoid => {
            let slope = out.mul(&out.neg()?.add_const(1.0)?)?;
            u.mul(&slope)
        }
        Op::Exp => u.mul(out),
        Op::Ln => u.mul(&p[0].powf(-1.0)?),
        Op::Powf(e) => {
            if *e == 1.0 {
                Ok(u.clone())
            } else {
                u.mul(&p[0].powf(e - 1.0)?.mul_const(*e)?)
            }
        }
        Op::Sum => u.expand(p[0].shape()),
        Op::Expand => match_shape(u.sum()?, &p[0]),
        Op::Dot => p[1 - i].scale(u),
        Op::Reshape => u.reshape(p[0].shape()),
        Op::MaxAll { index } => {
            let mut hot = vec![0.0; p[0].len()];
            hot[*index] = 1.0;
            Tensor::plain(p[0].shape().to_vec(), hot).scale(u)
        }
        Op::Conv2d { stride, padding } => {
            let (x, k) = (&p[0], &p[1]);
            if i == 0 {
                conv2d_input_grad(u, k, x.shape()[1], x.shape()[2], *stride, *padding)
            } else {
                conv2d_kernel_grad(x, u, k.shape()[2], k.shape()[3], *stride, *padding)
            }
        }
        Op::ConvInputGrad { stride, padding } => {
            let (g, k) = (&p[0], &p[1]);
            if i == 0 {
                conv2d_nobias(u, k, *stride, *padding)
            } else {
                conv2d_kernel_grad(u, g, k.shape()[2], k.shape()[3], *stride, *padding)
            }
        }
        Op::ConvKernelGrad { stride, padding } => {
            let (x, g) = (&p[0], &p[1]);
            if i == 0 {
                conv2d_input_grad(g, u, x.shape()[1], x.shape()[2], *stride, *padding)
            } else {
                conv2d_nobias(x, u, *stride, *padding)
            }
        }
        Op::ChannelSum => u.channel_expand(p[0].shape()[1], p[0].shape()[2]),
        Op::ChannelExpand => u.channel_sum(),
        Op::MatVec => {
            if i == 0 {
                u.outer(&p[1])
            } else {
                p[0].mattvec(u)
            }
        }
        Op::MatTVec => {
            if i == 0 {
                p[1].outer(u)
            } else {
                p[0].matvec(u)
            }
        }
        Op::Outer => {
            if i == 0 {
                u.matvec(&p[1])
            } else {
                u.mattvec(&p[0])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_self_dot() {
        let x = Tensor::from_slice(&[1.0, 2.0]).variable();
        let y = x.dot(&x).unwrap();
        let g = backward(&y, &[x], false).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        assert!(!g[0].requires_grad());
    }

    #[test]
    fn second_derivative_through_gradient() {
        let x = Tensor::from_slice(&[1.0, 2.0]).variable();
        let y = x.mul(&x).unwrap().sum().unwrap();
        let g = backward(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
        assert!(g.requires_grad());
        let z = g.mul(&g).unwrap().sum().unwrap();
        let h = backward(&z, &[x], false).unwrap();
        assert_eq!(h[0].data(), &[8.0, 16.0]);
    }

    #[test]
    fn unreachable_and_unlinked_get_zeros() {
        let x = Tensor::from_slice(&[1.0, 2.0]).variable();
        let other = Tensor::from_slice(&[5.0, 5.0, 5.0]).variable();
        let plain = Tensor::from_slice(&[1.0]);
        let y = x.sum().unwrap();
        let g = backward(&y, &[other, plain], false).unwrap();
        assert_eq!(g[0].data(), &[0.0; 3]);
        assert_eq!(g[1].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::from_slice(&[1.0, 2.0]).variable();
        assert!(matches!(backward(&x, std::slice::from_ref(&x), false), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn gradient_wrt_intermediate() {
        let x = Tensor::from_slice(&[1.0, -2.0]).variable();
        let h = x.mul_const(3.0).unwrap();
        let y = h.dot(&h).unwrap();
        let g = backward(&y, &[h.clone(), x], false).unwrap();
        assert_eq!(g[0].data(), &[6.0, -12.0]);
        assert_eq!(g[1].data(), &[18.0, -36.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::from_slice(&[3.0]).variable();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
        let g = backward(&y, &[x], false).unwrap();
        assert_eq!(g[0].data(), &[7.0]);
    }

    #[test]
    fn relu_kink_has_zero_slope() {
        let x = Tensor::from_slice(&[0.0, 1.0]).variable();
        let g = backward(&x.relu().unwrap().sum().unwrap(), &[x], false).unwrap();
        assert_eq!(g[0].data(), &[0.0, 1.0]);
    }
}
