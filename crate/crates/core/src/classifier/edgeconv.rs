//! Edge convolution: for node `i`,
//! `out_i = max_{j in N(i)} relu(W [x_i ; x_j - x_i] + b)` elementwise.
//!
//! With `W = [Wa | Wb]` the pre-activation splits into a node term
//! `(Wa - Wb) x_i + b` and a neighbor term `Wb x_j`, and since relu is
//! monotone the max can be taken before it. Each channel keeps the neighbor
//! that attained the max for the backward pass.

use super::layers::{Dense, NodeMatrix};

#[derive(Debug, Clone)]
pub struct EdgeConvCache {
    /// Winning neighbor per (node, channel).
    argmax: Vec<usize>,
    /// Whether the winning pre-activation was positive.
    active: Vec<bool>,
}

fn node_and_neighbor_terms(layer: &Dense, x: &NodeMatrix) -> (NodeMatrix, NodeMatrix) {
    let f = x.cols;
    debug_assert_eq!(layer.inputs, 2 * f);
    let h = layer.outputs;
    let (reps, class) = x.row_classes();
    let (mut a, mut c) = (vec![0.0; h], vec![0.0; h]);
    let mut node_rep = NodeMatrix::zeros(reps.len(), h);
    let mut nbr_rep = NodeMatrix::zeros(reps.len(), h);
    for (k, &r) in reps.iter().enumerate() {
        let xr = x.row(r);
        layer.forward_columns_into(0..f, xr, &mut a);
        layer.forward_columns_into(f..2 * f, xr, &mut c);
        nbr_rep.row_mut(k).copy_from_slice(&c);
        for (o, v) in node_rep.row_mut(k).iter_mut().enumerate() {
            *v = a[o] - c[o] + layer.bias[o];
        }
    }
    let mut node_term = NodeMatrix::zeros(x.rows, h);
    let mut nbr_term = NodeMatrix::zeros(x.rows, h);
    for (r, &k) in class.iter().enumerate() {
        node_term.row_mut(r).copy_from_slice(node_rep.row(k));
        nbr_term.row_mut(r).copy_from_slice(nbr_rep.row(k));
    }
    (node_term, nbr_term)
}

pub fn edge_conv(
    layer: &Dense,
    x: &NodeMatrix,
    neighbors: &[Vec<usize>],
) -> (NodeMatrix, EdgeConvCache) {
    let h = layer.outputs;
    let (node_term, nbr_term) = node_and_neighbor_terms(layer, x);
    let mut out = NodeMatrix::zeros(x.rows, h);
    let mut argmax = vec![0usize; x.rows * h];
    let mut active = vec![false; x.rows * h];
    let mut best_val = vec![0.0; h];
    for i in 0..x.rows {
        let own = [i];
        let list: &[usize] = if neighbors[i].is_empty() {
            &own
        } else {
            &neighbors[i]
        };
        let best = &mut argmax[i * h..(i + 1) * h];
        best.fill(list[0]);
        best_val.copy_from_slice(nbr_term.row(list[0]));
        for &j in &list[1..] {
            for ((bv, b), &v) in best_val.iter_mut().zip(best.iter_mut()).zip(nbr_term.row(j)) {
                if v > *bv {
                    *bv = v;
                    *b = j;
                }
            }
        }
        let row = out.row_mut(i);
        for o in 0..h {
            let pre = node_term.row(i)[o] + best_val[o];
            active[i * h + o] = pre > 0.0;
            row[o] = pre.max(0.0);
        }
    }
    (out, EdgeConvCache { argmax, active })
}

/// Accumulate parameter gradients into `grad` and, when requested, input
/// gradients into `dx`. Neighborhoods stay as they were at forward time.
pub fn edge_conv_backward(
    layer: &Dense,
    x: &NodeMatrix,
    cache: &EdgeConvCache,
    grad_out: &NodeMatrix,
    grad: &mut Dense,
    mut dx: Option<&mut NodeMatrix>,
) {
    let f = x.cols;
    let h = layer.outputs;
    let n = x.rows;
    let mut d_node = NodeMatrix::zeros(n, h);
    let mut d_nbr = NodeMatrix::zeros(n, h);
    for i in 0..n {
        for o in 0..h {
            let k = i * h + o;
            if cache.active[k] {
                let g = grad_out.row(i)[o];
                d_node.row_mut(i)[o] += g;
                d_nbr.row_mut(cache.argmax[k])[o] += g;
            }
        }
    }
    // identical input rows contribute identical outer-product factors
    let (reps, class) = x.row_classes();
    let mut dn_sum = NodeMatrix::zeros(reps.len(), h);
    let mut dc_sum = NodeMatrix::zeros(reps.len(), h);
    for (r, &k) in class.iter().enumerate() {
        for (s, g) in dn_sum.row_mut(k).iter_mut().zip(d_node.row(r)) {
            *s += g;
        }
        for (s, g) in dc_sum.row_mut(k).iter_mut().zip(d_nbr.row(r)) {
            *s += g;
        }
    }
    for (k, &r) in reps.iter().enumerate() {
        let xr = x.row(r);
        let dn = dn_sum.row(k);
        let dc = dc_sum.row(k);
        // node term (Wa - Wb) x_r + b
        grad.accumulate_outer(0..f, dn, xr, 1.0);
        grad.accumulate_outer(f..2 * f, dn, xr, -1.0);
        for (b, g) in grad.bias.iter_mut().zip(dn) {
            *b += g;
        }
        // neighbor term Wb x_r
        grad.accumulate_outer(f..2 * f, dc, xr, 1.0);
    }
    if let Some(dx) = dx {
        let mut dxr = vec![0.0; f];
        for r in 0..n {
            let dn = d_node.row(r);
            let dc = d_nbr.row(r);
            if dn.iter().chain(dc).all(|&g| g == 0.0) {
                continue;
            }
            dxr.fill(0.0);
            layer.backprop_columns(0..f, dn, &mut dxr, 1.0);
            layer.backprop_columns(f..2 * f, dn, &mut dxr, -1.0);
            layer.backprop_columns(f..2 * f, dc, &mut dxr, 1.0);
            for (d, v) in dx.row_mut(r).iter_mut().zip(&dxr) {
                *d += v;
            }
        }
    }
}
