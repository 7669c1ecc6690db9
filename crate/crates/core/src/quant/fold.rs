//! Folding of per-channel normalization into the preceding convolution.
//!
//! An eval-mode batch norm is the per-channel map
//! `y = gamma (x - mean) / sqrt(var + eps) + beta`, and an affine layer is
//! `y = scale x + bias`. Both are `y = a x + b`, so for a convolution with
//! weight `W[f]` and bias `c[f]` feeding it the pair becomes one
//! convolution with weight `a[f] W[f]` and bias `a[f] c[f] + b[f]`.

use crate::error::{Error, Result};
use crate::nn::{Graph, ModelGraph, Node, Op, ParamStore, ValueRef};
use crate::tensor::Tensor;

/// Per-channel `(a, b)` of a normalization node.
fn linear_form(model: &ModelGraph, node: &Node) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let p = |s: &str| model.params.get(&format!("{}.{s}", node.name));
    Ok(match node.op {
        Op::Affine => Some((p("scale")?.data().to_vec(), p("bias")?.data().to_vec())),
        Op::BatchNorm => {
            let st = model.params.stats(&node.name)?;
            let (g, b) = (p("gamma")?.data(), p("beta")?.data());
            let a: Vec<f64> = g.iter().zip(&st.var).map(|(g, v)| g / (v + st.eps).sqrt()).collect();
            let shift = b.iter().zip(&a).zip(&st.mean).map(|((b, a), m)| b - a * m).collect();
            Some((a, shift))
        }
        _ => None,
    })
}

/// Equivalent eval-mode model with every normalization that directly
/// follows a convolution (and is that convolution's only consumer) folded
/// into it. The folded convolution keeps its name; other nodes are
/// unchanged.
pub fn fold_norms(model: &ModelGraph) -> Result<ModelGraph> {
    let nodes = &model.graph.nodes;
    let mut consumers = vec![0usize; nodes.len()];
    for n in nodes {
        for r in &n.inputs {
            if let ValueRef::Node(i) = r {
                consumers[*i] += 1;
            }
        }
    }
    for r in [model.graph.heatmap, model.graph.descmap] {
        if let ValueRef::Node(i) = r {
            consumers[i] += 1;
        }
    }
    // fold_into[j] = Some(conv index) when node j is folded away
    let mut fold_into: Vec<Option<usize>> = vec![None; nodes.len()];
    let mut folded_params: Vec<(String, Tensor, Tensor)> = Vec::new();
    let mut dropped: Vec<String> = Vec::new();
    for (j, n) in nodes.iter().enumerate() {
        let [ValueRef::Node(i)] = n.inputs[..] else { continue };
        if !matches!(nodes[i].op, Op::Conv { .. }) || consumers[i] != 1 {
            continue;
        }
        let Some((a, b)) = linear_form(model, n)? else { continue };
        let conv = &nodes[i].name;
        let w = model.params.get(&format!("{conv}.weight"))?;
        let c = model.params.get(&format!("{conv}.bias"))?;
        let f = w.shape()[0];
        if a.len() != f || c.numel() != f {
            return Err(Error::MalformedModel(format!("cannot fold `{}` ({} channels) into `{conv}` ({f} filters)", n.name, a.len())));
        }
        let per = w.numel() / f;
        let w2 = Tensor::from_fn(w.shape(), |k| a[k / per] * w.data()[k]);
        let c2 = Tensor::from_fn(&[f], |k| a[k] * c.data()[k] + b[k]);
        folded_params.push((conv.clone(), w2, c2));
        dropped.push(n.name.clone());
        fold_into[j] = Some(i);
    }

    let mut remap: Vec<ValueRef> = Vec::with_capacity(nodes.len());
    let mut graph = Graph::new();
    let map = |r: ValueRef, remap: &[ValueRef]| match r {
        ValueRef::Input => ValueRef::Input,
        ValueRef::Node(i) => remap[i],
    };
    for (j, n) in nodes.iter().enumerate() {
        let r = match fold_into[j] {
            Some(i) => remap[i],
            None => graph.push(n.name.clone(), n.op.clone(), n.inputs.iter().map(|&r| map(r, &remap)).collect()),
        };
        remap.push(r);
    }
    graph.heatmap = map(model.graph.heatmap, &remap);
    graph.descmap = map(model.graph.descmap, &remap);

    let is_dropped = |name: &str| {
        dropped.iter().any(|d| name.strip_prefix(d.as_str()).is_some_and(|rest| rest.is_empty() || rest.starts_with('.')))
    };
    let mut params = ParamStore::new();
    for (name, p) in model.params.iter() {
        if is_dropped(name) {
            continue;
        }
        let value = folded_params
            .iter()
            .find_map(|(conv, w, c)| {
                if name == format!("{conv}.weight") {
                    Some(w.clone())
                } else if name == format!("{conv}.bias") {
                    Some(c.clone())
                } else {
                    None
                }
            })
            .unwrap_or_else(|| p.value.clone());
        params.insert(name, value, p.trainable);
    }
    for (name, st) in model.params.stats_iter() {
        if !is_dropped(name) {
            params.insert_stats(name, st.clone());
        }
    }
    Ok(ModelGraph {
        spec: model.spec.clone(),
        graph,
        params,
    })
}
