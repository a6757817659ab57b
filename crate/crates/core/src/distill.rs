//! Online distillation: grid minimum spanning trees, the learnable tree filter,
//! its two-stage cascade, and the feature and logit distillation losses.
//!
//! Edges of an `h × w` grid are numbered from their source vertex `v = r·w + c`:
//! `2v` is the edge to the right neighbour and `2v + 1` the edge to the one
//! below. Edge weights live in `[n, 2·h·w]` tensors with unused slots zero.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{log_softmax_channels, softmax_channels, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NO_EDGE: usize = usize::MAX;

/// Rooted spanning tree of a 4-connected grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanningTree {
    pub rows: usize,
    pub cols: usize,
    /// `parent[root] == root`.
    pub parent: Vec<usize>,
    /// Weight of the edge to the parent (0 at the root).
    pub edge_weight: Vec<f64>,
    /// Grid edge id of the edge to the parent ([`NO_EDGE`] at the root).
    pub parent_edge: Vec<usize>,
    /// Vertices in breadth-first order from the root.
    pub bfs_order: Vec<usize>,
}

impl SpanningTree {
    pub fn root(&self) -> usize {
        self.bfs_order[0]
    }

    pub fn num_vertices(&self) -> usize {
        self.rows * self.cols
    }

    pub fn total_weight(&self) -> f64 {
        self.edge_weight.iter().sum()
    }

    /// Undirected edges as `(min, max)` vertex pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = (0..self.num_vertices())
            .filter(|&v| self.parent[v] != v)
            .map(|v| (v.min(self.parent[v]), v.max(self.parent[v])))
            .collect();
        e.sort_unstable();
        e
    }
}

/// Endpoints of grid edge `id`, or `None` if it leaves the grid.
pub fn edge_endpoints(id: usize, rows: usize, cols: usize) -> Option<(usize, usize)> {
    let v = id / 2;
    let (r, c) = (v / cols, v % cols);
    if r >= rows {
        return None;
    }
    if id % 2 == 0 {
        (c + 1 < cols).then_some((v, v + 1))
    } else {
        (r + 1 < rows).then_some((v, v + cols))
    }
}

struct Dsu {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return false;
        }
        match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => self.parent[a] = b,
            std::cmp::Ordering::Greater => self.parent[b] = a,
            std::cmp::Ordering::Equal => {
                self.parent[b] = a;
                self.rank[a] += 1;
            }
        }
        true
    }
}

/// Borůvka MST over grid edge weights indexed by edge id (`2·rows·cols`
/// entries). Ties are broken by edge id, i.e. by row-major source vertex and
/// then right before down, so the tree is unique. Rooted at vertex 0.
pub fn mst_from_edge_weights(rows: usize, cols: usize, weights: &[f64]) -> SpanningTree {
    let n = rows * cols;
    assert!(n > 0, "empty grid");
    assert_eq!(weights.len(), 2 * n, "one weight slot per grid edge id");
    let edges: Vec<(usize, usize, usize)> = (0..2 * n)
        .filter_map(|id| edge_endpoints(id, rows, cols).map(|(u, v)| (id, u, v)))
        .collect();
    let less = |a: usize, b: usize| (weights[a], a) < (weights[b], b);

    let mut dsu = Dsu::new(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(n.saturating_sub(1));
    let mut components = n;
    let mut cheapest = vec![NO_EDGE; n];
    while components > 1 {
        cheapest.fill(NO_EDGE);
        for &(id, u, v) in &edges {
            let (cu, cv) = (dsu.find(u), dsu.find(v));
            if cu == cv {
                continue;
            }
            for c in [cu, cv] {
                if cheapest[c] == NO_EDGE || less(id, cheapest[c]) {
                    cheapest[c] = id;
                }
            }
        }
        let mut picked: Vec<usize> = cheapest.iter().copied().filter(|&e| e != NO_EDGE).collect();
        picked.sort_unstable();
        picked.dedup();
        for id in picked {
            let (u, v) = edge_endpoints(id, rows, cols).expect("valid edge");
            if dsu.union(u, v) {
                chosen.push(id);
                components -= 1;
            }
        }
    }

    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    chosen.sort_unstable();
    for &id in &chosen {
        let (u, v) = edge_endpoints(id, rows, cols).expect("valid edge");
        adj[u].push((v, id));
        adj[v].push((u, id));
    }
    let mut parent = vec![NO_EDGE; n];
    let mut parent_edge = vec![NO_EDGE; n];
    let mut edge_weight = vec![0.0; n];
    let mut bfs_order = Vec::with_capacity(n);
    parent[0] = 0;
    bfs_order.push(0);
    let mut head = 0;
    while head < bfs_order.len() {
        let u = bfs_order[head];
        head += 1;
        for &(v, id) in &adj[u] {
            if parent[v] == NO_EDGE {
                parent[v] = u;
                parent_edge[v] = id;
                edge_weight[v] = weights[id];
                bfs_order.push(v);
            }
        }
    }
    debug_assert_eq!(bfs_order.len(), n);
    SpanningTree {
        rows,
        cols,
        parent,
        edge_weight,
        parent_edge,
        bfs_order,
    }
}

/// Squared L2 distance between adjacent cells of one `[c, h, w]` guide.
pub fn grid_edge_weights_f64<T: Scalar>(guide: &[T], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; 2 * hw];
    for id in 0..2 * hw {
        if let Some((u, v)) = edge_endpoints(id, h, w) {
            out[id] = (0..c)
                .map(|ch| {
                    let d = (guide[ch * hw + u] - guide[ch * hw + v]).f64();
                    d * d
                })
                .sum();
        }
    }
    out
}

/// MST of a `[c, h, w]` guide with squared-L2 edge weights.
pub fn build_mst<T: Scalar>(guide: &Tensor<T>) -> SpanningTree {
    let (c, h, w) = match guide.shape() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        s => panic!("build_mst expects [c, h, w], got {s:?}"),
    };
    mst_from_edge_weights(h, w, &grid_edge_weights_f64(guide.data(), c, h, w))
}

/// Differentiable grid edge weights `[n, 2·h·w]` of a guide `[n, c, h, w]`.
pub fn grid_edge_weights<T: Scalar>(g: &Graph<T>, guide: Var) -> Var {
    let vg = g.value(guide);
    let [n, c, h, w] = vg.dims4();
    let hw = h * w;
    let chw = c * hw;
    let mut out = Tensor::zeros(&[n, 2 * hw]);
    {
        let od = out.data_mut();
        for b in 0..n {
            let gd = &vg.data()[b * chw..(b + 1) * chw];
            for id in 0..2 * hw {
                if let Some((u, v)) = edge_endpoints(id, h, w) {
                    let mut s = T::zero();
                    for ch in 0..c {
                        let d = gd[ch * hw + u] - gd[ch * hw + v];
                        s += d * d;
                    }
                    od[b * 2 * hw + id] = s;
                }
            }
        }
    }
    g.custom_op(&[guide], out, move |gw, _| {
        let mut gg = Tensor::zeros(&[n, c, h, w]);
        let gd = gg.data_mut();
        for b in 0..n {
            let src = &vg.data()[b * chw..(b + 1) * chw];
            for id in 0..2 * hw {
                let Some((u, v)) = edge_endpoints(id, h, w) else {
                    continue;
                };
                let gwe = gw.data()[b * 2 * hw + id];
                if gwe == T::zero() {
                    continue;
                }
                for ch in 0..c {
                    let d = (src[ch * hw + u] - src[ch * hw + v]) * (T::one() + T::one()) * gwe;
                    gd[b * chw + ch * hw + u] += d;
                    gd[b * chw + ch * hw + v] -= d;
                }
            }
        }
        vec![Some(gg)]
    })
}

/// Filter state of one sample kept for the backward pass.
struct FilterPass<T> {
    a: Vec<T>,
    /// Up-pass aggregates `[hw][c]` and their normalizer.
    u: Vec<T>,
    uz: Vec<T>,
    /// Down-pass results `[hw][c]` and their normalizer.
    y: Vec<T>,
    yz: Vec<T>,
}

/// Runs both passes for one sample; `f` is `[hw][c]`.
fn filter_forward<T: Scalar>(
    f: &[T],
    c: usize,
    tree: &SpanningTree,
    weights: &[T],
) -> FilterPass<T> {
    let n = tree.num_vertices();
    let a: Vec<T> = (0..n)
        .map(|v| {
            if tree.parent_edge[v] == NO_EDGE {
                T::zero()
            } else {
                (-weights[tree.parent_edge[v]]).exp()
            }
        })
        .collect();
    let mut u = f.to_vec();
    let mut uz = vec![T::one(); n];
    for &v in tree.bfs_order[1..].iter().rev() {
        let p = tree.parent[v];
        let av = a[v];
        for ch in 0..c {
            let t = av * u[v * c + ch];
            u[p * c + ch] += t;
        }
        let t = av * uz[v];
        uz[p] += t;
    }
    let mut y = u.clone();
    let mut yz = uz.clone();
    for &v in &tree.bfs_order[1..] {
        let p = tree.parent[v];
        let av = a[v];
        let keep = T::one() - av * av;
        for ch in 0..c {
            y[v * c + ch] = av * y[p * c + ch] + keep * u[v * c + ch];
        }
        yz[v] = av * yz[p] + keep * uz[v];
    }
    FilterPass { a, u, uz, y, yz }
}

/// Gradients of one sample: returns `(g_features [hw][c], g_affinity [hw])`.
fn filter_backward<T: Scalar>(
    gout: &[T],
    c: usize,
    tree: &SpanningTree,
    st: &FilterPass<T>,
) -> (Vec<T>, Vec<T>) {
    let n = tree.num_vertices();
    let two = T::one() + T::one();
    let mut gy = vec![T::zero(); n * c];
    let mut gyz = vec![T::zero(); n];
    for v in 0..n {
        let inv = T::one() / st.yz[v];
        let mut acc = T::zero();
        for ch in 0..c {
            let go = gout[v * c + ch];
            gy[v * c + ch] = go * inv;
            acc += go * st.y[v * c + ch];
        }
        gyz[v] = -acc * inv * inv;
    }
    let mut ga = vec![T::zero(); n];
    let mut gu = vec![T::zero(); n * c];
    let mut guz = vec![T::zero(); n];
    // Down pass in reverse.
    for &v in tree.bfs_order[1..].iter().rev() {
        let p = tree.parent[v];
        let av = st.a[v];
        let keep = T::one() - av * av;
        let mut acc = T::zero();
        for ch in 0..c {
            let g = gy[v * c + ch];
            gy[p * c + ch] += av * g;
            gu[v * c + ch] += keep * g;
            acc += g * (st.y[p * c + ch] - two * av * st.u[v * c + ch]);
        }
        let g = gyz[v];
        gyz[p] += av * g;
        guz[v] += keep * g;
        acc += g * (st.yz[p] - two * av * st.uz[v]);
        ga[v] += acc;
    }
    let root = tree.root();
    for ch in 0..c {
        gu[root * c + ch] += gy[root * c + ch];
    }
    guz[root] += gyz[root];
    // Up pass in reverse.
    for &v in &tree.bfs_order[1..] {
        let p = tree.parent[v];
        let av = st.a[v];
        let mut acc = T::zero();
        for ch in 0..c {
            let g = gu[p * c + ch];
            gu[v * c + ch] += av * g;
            acc += g * st.u[v * c + ch];
        }
        let g = guz[p];
        guz[v] += av * g;
        acc += g * st.uz[v];
        ga[v] += acc;
    }
    (gu, ga)
}

fn to_cell_major<T: Scalar>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        for v in 0..hw {
            out[v * c + ch] = x[ch * hw + v];
        }
    }
    out
}

fn to_channel_major<T: Scalar>(x: &[T], c: usize, hw: usize, out: &mut [T]) {
    for v in 0..hw {
        for ch in 0..c {
            out[ch * hw + v] = x[v * c + ch];
        }
    }
}

/// Tree filter of `features: [n, c, h, w]` with per-sample trees and edge
/// weights `[n, 2·h·w]`: `out_i = Σ_j S(i,j)·f_j / Σ_j S(i,j)` with
/// `S(i,j) = exp(−Σ path weights)`. Differentiable in features and weights.
pub fn tree_filter<T: Scalar>(
    g: &Graph<T>,
    features: Var,
    weights: Var,
    trees: Rc<Vec<SpanningTree>>,
) -> Result<Var> {
    let vf = g.value(features);
    let vw = g.value(weights);
    let [n, c, h, w] = vf.dims4();
    let hw = h * w;
    if trees.len() != n || trees.iter().any(|t| t.rows != h || t.cols != w) {
        return Err(Error::Contract(format!(
            "tree grid does not match {n}×{h}×{w} features"
        )));
    }
    if vw.shape() != [n, 2 * hw] {
        return Err(Error::Contract(format!(
            "edge weights {:?} do not match {n}×{h}×{w} grid",
            vw.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut passes = Vec::with_capacity(n);
    for b in 0..n {
        let f = to_cell_major(&vf.data()[b * c * hw..(b + 1) * c * hw], c, hw);
        let st = filter_forward(&f, c, &trees[b], &vw.data()[b * 2 * hw..(b + 1) * 2 * hw]);
        let res: Vec<T> = (0..hw * c).map(|k| st.y[k] / st.yz[k / c]).collect();
        to_channel_major(
            &res,
            c,
            hw,
            &mut out.data_mut()[b * c * hw..(b + 1) * c * hw],
        );
        passes.push(st);
    }
    Ok(g.custom_op(&[features, weights], out, move |gout, needs| {
        let mut gf = Tensor::zeros(&[n, c, h, w]);
        let mut gw = Tensor::zeros(&[n, 2 * hw]);
        for b in 0..n {
            let go = to_cell_major(&gout.data()[b * c * hw..(b + 1) * c * hw], c, hw);
            let (gu, ga) = filter_backward(&go, c, &trees[b], &passes[b]);
            to_channel_major(&gu, c, hw, &mut gf.data_mut()[b * c * hw..(b + 1) * c * hw]);
            let tree = &trees[b];
            let gwd = &mut gw.data_mut()[b * 2 * hw..(b + 1) * 2 * hw];
            for v in 0..hw {
                if tree.parent_edge[v] != NO_EDGE {
                    gwd[tree.parent_edge[v]] = -passes[b].a[v] * ga[v];
                }
            }
        }
        vec![needs[0].then_some(gf), needs[1].then_some(gw)]
    }))
}

/// Tree filter of a single `[c, h, w]` map outside any graph.
pub fn filter_tensor<T: Scalar>(features: &Tensor<T>, tree: &SpanningTree) -> Tensor<T> {
    let (c, h, w) = match features.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("filter_tensor expects [c, h, w], got {s:?}"),
    };
    let weights: Vec<T> = {
        let mut wv = vec![T::zero(); 2 * h * w];
        for v in 0..h * w {
            if tree.parent_edge[v] != NO_EDGE {
                wv[tree.parent_edge[v]] = T::of(tree.edge_weight[v]);
            }
        }
        wv
    };
    let g = Graph::inference();
    let f = g.constant(features.clone().reshape(&[1, c, h, w]));
    let wt = g.constant(Tensor::from_vec(&[1, 2 * h * w], weights));
    let out = tree_filter(&g, f, wt, Rc::new(vec![tree.clone()])).expect("shapes agree");
    (*g.value(out)).clone().reshape(&[c, h, w])
}

/// Per-sample MSTs of a `[n, c, h, w]` guide.
pub fn build_trees<T: Scalar>(guide: &Tensor<T>) -> Vec<SpanningTree> {
    let [n, c, h, w] = guide.dims4();
    let chw = c * h * w;
    (0..n)
        .map(|b| {
            mst_from_edge_weights(
                h,
                w,
                &grid_edge_weights_f64(&guide.data()[b * chw..(b + 1) * chw], c, h, w),
            )
        })
        .collect()
}

/// Filters `features` with the tree of `guide`; gradients reach the guide
/// through the chosen edges' weights.
pub fn guided_filter<T: Scalar>(g: &Graph<T>, features: Var, guide: Var) -> Result<Var> {
    let trees = Rc::new(build_trees(&g.value(guide)));
    let weights = grid_edge_weights(g, guide);
    tree_filter(g, features, weights, trees)
}

/// Two-stage cascade: filter `bev` by the tree of the (pooled) low-level map,
/// then filter the result by the tree of `bev` itself.
pub fn cascade_transform<T: Scalar>(g: &Graph<T>, bev: Var, low: Var) -> Result<Var> {
    let [n, _, h, w] = g.value(bev).dims4();
    let [nl, _, hl, wl] = g.value(low).dims4();
    if n != nl || hl < h || wl < w {
        return Err(Error::Contract(format!(
            "low features {nl}×{hl}×{wl} cannot guide {n}×{h}×{w}"
        )));
    }
    let pooled = g.adaptive_avg_pool(low, h, w);
    let stage1 = guided_filter(g, bev, pooled)?;
    guided_filter(g, stage1, bev)
}

/// `Σ_i mean|M_teacher,i − M_student,i|` over decoder scales, with the
/// teacher side cut from the gradient tape.
pub fn feature_distill_loss<T: Scalar>(
    g: &Graph<T>,
    teacher_scales: &[Var],
    student_scales: &[Var],
    teacher_low: Var,
    student_low: Var,
) -> Result<Var> {
    if teacher_scales.len() != student_scales.len() || teacher_scales.is_empty() {
        return Err(Error::Contract(format!(
            "{} teacher scales vs {} student scales",
            teacher_scales.len(),
            student_scales.len()
        )));
    }
    let t_low = g.detach(teacher_low);
    let mut terms = Vec::with_capacity(teacher_scales.len());
    for (&t, &s) in teacher_scales.iter().zip(student_scales) {
        if g.shape(t) != g.shape(s) {
            return Err(Error::Contract(format!(
                "scale shapes differ: {:?} vs {:?}",
                g.shape(t),
                g.shape(s)
            )));
        }
        let mt = cascade_transform(g, g.detach(t), t_low)?;
        let ms = cascade_transform(g, s, student_low)?;
        terms.push(g.mean_all(g.abs(g.sub(mt, ms))));
    }
    Ok(g.add_n(&terms))
}

/// Mean over cells of `KL(softmax(teacher) ‖ softmax(student))`; only the
/// student receives a gradient.
pub fn logit_distill_loss<T: Scalar>(
    g: &Graph<T>,
    teacher_logits: Var,
    student_logits: Var,
) -> Result<Var> {
    let (vt, vs) = (g.value(teacher_logits), g.value(student_logits));
    if vt.shape() != vs.shape() {
        return Err(Error::Contract(format!(
            "logit shapes differ: {:?} vs {:?}",
            vt.shape(),
            vs.shape()
        )));
    }
    let [n, c, h, w] = vs.dims4();
    let cells = T::of((n * h * w) as f64);
    let (lp, lq) = (log_softmax_channels(&vt), log_softmax_channels(&vs));
    let mut kl = T::zero();
    for (&a, &b) in lp.data().iter().zip(lq.data()) {
        kl += a.exp() * (a - b);
    }
    let p = Rc::new(softmax_channels(&vt));
    let q = Rc::new(softmax_channels(&vs));
    let _ = c;
    let teacher = g.detach(teacher_logits);
    Ok(g.custom_op(
        &[teacher, student_logits],
        Tensor::scalar(kl / cells),
        move |gout, needs| {
            let s = gout.data()[0] / cells;
            let gs = needs[1].then(|| q.zip_map(&p, |qi, pi| (qi - pi) * s));
            vec![None, gs]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn hand_built_two_by_two_mst() {
        // Vertices 0 1 / 2 3; right edges 0–1 (id 0), 2–3 (id 4); down edges 0–2 (id 1), 1–3 (id 3).
        let mut w = vec![0.0; 8];
        w[0] = 1.0;
        w[1] = 4.0;
        w[3] = 2.0;
        w[4] = 8.0;
        let t = mst_from_edge_weights(2, 2, &w);
        assert_eq!(t.edges(), vec![(0, 1), (0, 2), (1, 3)]);
        assert_eq!(t.total_weight(), 7.0);
        assert_eq!(t.parent[0], 0);
        assert_eq!(t.root(), 0);
    }

    #[test]
    fn constant_guide_gives_scan_order_tree() {
        let t = build_mst(&Tensor::<f64>::full(&[2, 3, 4], 0.7));
        assert_eq!(t.total_weight(), 0.0);
        // Ties resolve by edge id: the whole first row, then every column downward.
        let mut expect: Vec<(usize, usize)> = (0..3).map(|c| (c, c + 1)).collect();
        expect.extend((0..8).map(|v| (v, v + 4)));
        expect.sort_unstable();
        assert_eq!(t.edges(), expect);
    }

    #[test]
    fn one_cell_tree_is_trivial() {
        let t = build_mst(&Tensor::<f64>::full(&[3, 1, 1], 2.0));
        assert_eq!(t.bfs_order, vec![0]);
        assert!(t.edges().is_empty());
    }

    #[test]
    fn zero_weights_average_and_infinite_weights_are_identity() {
        let f = rand_t(&[3, 4, 5], 2);
        let flat = mst_from_edge_weights(4, 5, &vec![0.0; 40]);
        let out = filter_tensor(&f, &flat);
        for ch in 0..3 {
            let mean: f64 = f.data()[ch * 20..(ch + 1) * 20].iter().sum::<f64>() / 20.0;
            assert!(out.data()[ch * 20..(ch + 1) * 20]
                .iter()
                .all(|v| (v - mean).abs() < 1e-12));
        }
        let mut steep = flat.clone();
        steep
            .edge_weight
            .iter_mut()
            .skip(1)
            .for_each(|w| *w = f64::INFINITY);
        assert!(filter_tensor(&f, &steep).max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn constants_are_fixed_points_and_outputs_stay_in_range() {
        let guide = rand_t(&[2, 5, 6], 3);
        let tree = build_mst(&guide);
        let ones = Tensor::<f64>::full(&[1, 5, 6], 1.0);
        assert!(filter_tensor(&ones, &tree)
            .data()
            .iter()
            .all(|v| (v - 1.0).abs() < 1e-12));
        let f = rand_t(&[2, 5, 6], 4);
        let out = filter_tensor(&f, &tree);
        for ch in 0..2 {
            let s = &f.data()[ch * 30..(ch + 1) * 30];
            let (lo, hi) = s
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
            assert!(out.data()[ch * 30..(ch + 1) * 30]
                .iter()
                .all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn filter_gradients_wrt_features_and_guide() {
        let probe = rand_t(&[2, 3, 4, 5], 7);
        let guide = rand_t(&[2, 2, 4, 5], 8).map(|v| v * 0.6);
        let r = check_gradient(&[rand_t(&[2, 3, 4, 5], 9), guide], 1e-6, |g, vs| {
            let out = guided_filter(g, vs[0], vs[1]).unwrap();
            g.sum_all(g.mul(out, g.constant(probe.clone())))
        });
        assert!(r.rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn cascade_gradients_pass_finite_differences() {
        let probe = rand_t(&[1, 3, 4, 4], 10);
        let inputs = [
            rand_t(&[1, 3, 4, 4], 11).map(|v| v * 0.5),
            rand_t(&[1, 2, 8, 8], 12).map(|v| v * 0.5),
        ];
        let r = check_gradient(&inputs, 1e-6, |g, vs| {
            let out = cascade_transform(g, vs[0], vs[1]).unwrap();
            g.sum_all(g.mul(out, g.constant(probe.clone())))
        });
        assert!(r.rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn single_cell_feature_loss_is_the_absolute_difference() {
        let g = Graph::<f64>::new(true);
        let t = g.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
        let s = g.leaf(Tensor::full(&[1, 1, 1, 1], 1.0));
        let low = g.constant(Tensor::full(&[1, 1, 1, 1], 0.0));
        let l = feature_distill_loss(&g, &[t], &[s], low, low).unwrap();
        assert!((g.value(l).data()[0] - 2.0).abs() < 1e-12);
        let same = feature_distill_loss(&g, &[s], &[s], low, low).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0);
        assert!(matches!(
            feature_distill_loss(&g, &[t, t], &[s], low, low),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_hand_value_and_zero_at_equality() {
        let g = Graph::<f64>::new(true);
        let t = g.constant(Tensor::from_vec(&[1, 2, 1, 1], vec![2f64.ln(), 0.0]));
        let s = g.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        let kl = logit_distill_loss(&g, t, s).unwrap();
        let expect = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((g.value(kl).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.0566).abs() < 1e-4);
        let x = g.leaf(rand_t(&[2, 4, 3, 3], 5));
        assert!(g.value(logit_distill_loss(&g, x, x).unwrap()).data()[0].abs() < 1e-15);
    }

    #[test]
    fn kl_gradient_reaches_only_the_student() {
        let t = rand_t(&[1, 4, 2, 3], 13);
        let r = check_gradient(&[rand_t(&[1, 4, 2, 3], 14)], 1e-6, |g, vs| {
            let tv = g.constant(t.clone());
            logit_distill_loss(g, tv, vs[0]).unwrap()
        });
        assert!(r.rel_error < 1e-6, "{r:?}");
        let g = Graph::<f64>::new(true);
        let tv = g.leaf(t);
        let sv = g.leaf(rand_t(&[1, 4, 2, 3], 15));
        let loss = logit_distill_loss(&g, tv, sv).unwrap();
        let grads = g.backward(loss);
        assert!(grads.get(tv).is_none());
        assert!(grads.get(sv).is_some());
    }
}
