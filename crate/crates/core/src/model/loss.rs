use std::ops::AddAssign;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;

use super::{propagate, LossConfig, ModelError, ModelState, NormAdjacency};
use crate::data::BipartiteGraph;

/// A `(user, positive item, negative item)` training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Gradients with respect to the layer-0 tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl Gradients {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        Self {
            users: Array2::zeros((n_users, dim)),
            items: Array2::zeros((n_items, dim)),
        }
    }

    pub fn zeros_like(state: &ModelState) -> Self {
        Self::zeros(state.n_users(), state.n_items(), state.dim())
    }

    pub fn scale(&mut self, factor: f64) {
        self.users *= factor;
        self.items *= factor;
    }
}

impl AddAssign<&Gradients> for Gradients {
    fn add_assign(&mut self, rhs: &Gradients) {
        self.users += &rhs.users;
        self.items += &rhs.items;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_scaled(mut dst: ndarray::ArrayViewMut1<'_, f64>, src: ArrayView1<'_, f64>, factor: f64) {
    Zip::from(&mut dst).and(&src).for_each(|d, &s| *d += factor * s);
}

/// Mean BPR loss `-ln sigmoid(s(u,pos) - s(u,neg))` over the batch, plus
/// `l2_weight * (|e_u|^2 + |e_pos|^2 + |e_neg|^2)` on layer-0 rows.
/// Gradients flow back through the propagation.
pub fn bpr_loss(state: &ModelState, batch: &[Triple], cfg: &LossConfig) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(state);
    if batch.is_empty() {
        return (0.0, grads);
    }
    let out = propagate(state);
    let inv_b = 1.0 / batch.len() as f64;
    let mut out_u = Array2::<f64>::zeros(state.user_table.raw_dim());
    let mut out_i = Array2::<f64>::zeros(state.item_table.raw_dim());
    let mut loss = 0.0;
    for t in batch {
        let u = out.users.row(t.user);
        let p = out.items.row(t.pos);
        let n = out.items.row(t.neg);
        let x = u.dot(&p) - u.dot(&n);
        loss += softplus(-x);
        let c = -sigmoid(-x) * inv_b;
        let diff: Array1<f64> = &p - &n;
        add_scaled(out_u.row_mut(t.user), diff.view(), c);
        add_scaled(out_i.row_mut(t.pos), u, c);
        add_scaled(out_i.row_mut(t.neg), u, -c);
    }
    let (g_u, g_i) = state.adjacency().propagate(&out_u, &out_i, state.layers);
    grads.users = g_u;
    grads.items = g_i;

    if cfg.l2_weight > 0.0 {
        let c = 2.0 * cfg.l2_weight * inv_b;
        for t in batch {
            let eu = state.user_table.row(t.user);
            let ep = state.item_table.row(t.pos);
            let en = state.item_table.row(t.neg);
            loss += cfg.l2_weight * (eu.dot(&eu) + ep.dot(&ep) + en.dot(&en));
            add_scaled(grads.users.row_mut(t.user), eu, c);
            add_scaled(grads.items.row_mut(t.pos), ep, c);
            add_scaled(grads.items.row_mut(t.neg), en, c);
        }
    }
    (loss * inv_b, grads)
}

/// Two independently edge-dropped views of the train graph.
#[derive(Clone, Debug)]
pub struct SslViews {
    pub first: NormAdjacency,
    pub second: NormAdjacency,
}

impl SslViews {
    /// Keeps each edge with probability `1 - dropout`, separately per view.
    pub fn sample<R: Rng>(graph: &BipartiteGraph, dropout: f64, rng: &mut R) -> Self {
        let mut view = || {
            let kept: Vec<(usize, usize)> = graph.edges().filter(|_| rng.random::<f64>() >= dropout).collect();
            NormAdjacency::from_edges(graph.n_users(), graph.n_items(), kept)
        };
        let first = view();
        let second = view();
        Self { first, second }
    }

    /// Both views equal to the full graph.
    pub fn identical(graph: &BipartiteGraph) -> Self {
        let adj = NormAdjacency::from_graph(graph);
        Self {
            first: adj.clone(),
            second: adj,
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

/// InfoNCE between rows `nodes` of two view embeddings. Returns the loss and
/// full-size gradients with respect to `za` and `zb`.
fn info_nce(za: &Array2<f64>, zb: &Array2<f64>, nodes: &[usize], tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n = nodes.len();
    let k = za.ncols();
    let mut ga = Array2::zeros(za.raw_dim());
    let mut gb = Array2::zeros(zb.raw_dim());
    if n == 0 {
        return (0.0, ga, gb);
    }
    let normalize = |z: &Array2<f64>| {
        let mut unit = Array2::<f64>::zeros((n, k));
        let mut norms = vec![0.0; n];
        for (r, &node) in nodes.iter().enumerate() {
            let row = z.row(node);
            let norm = row.dot(&row).sqrt().max(NORM_FLOOR);
            norms[r] = norm;
            unit.row_mut(r).assign(&(&row / norm));
        }
        (unit, norms)
    };
    let (a, na) = normalize(za);
    let (b, nb) = normalize(zb);
    let logits = a.dot(&b.t()) / tau;

    let mut loss = 0.0;
    let mut probs = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + sum.ln() - logits[[i, i]];
        for j in 0..n {
            probs[[i, j]] = (logits[[i, j]] - max).exp() / sum;
        }
    }
    // dL/dlogits = P - I; logits = A B^T / tau.
    let mut d = probs;
    for i in 0..n {
        d[[i, i]] -= 1.0;
    }
    let d_a = d.dot(&b) / tau;
    let d_b = d.t().dot(&a) / tau;

    // Back through z -> z / |z|.
    for (r, &node) in nodes.iter().enumerate() {
        let (ar, gr) = (a.row(r), d_a.row(r));
        let proj = ar.dot(&gr);
        Zip::from(ga.row_mut(node))
            .and(&gr)
            .and(&ar)
            .for_each(|g, &gv, &av| *g += (gv - av * proj) / na[r]);
        let (br, gr) = (b.row(r), d_b.row(r));
        let proj = br.dot(&gr);
        Zip::from(gb.row_mut(node))
            .and(&gr)
            .and(&br)
            .for_each(|g, &gv, &bv| *g += (gv - bv * proj) / nb[r]);
    }
    (loss, ga, gb)
}

fn unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// `ssl_weight` times the InfoNCE loss over the batch's users plus the
/// batch's items, each contrasted against the other nodes of its own type
/// across two propagated views.
pub fn ssl_loss(
    state: &ModelState,
    views: &SslViews,
    users: &[usize],
    items: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Gradients), ModelError> {
    if cfg.ssl_temperature.is_nan() || cfg.ssl_temperature <= 0.0 {
        return Err(ModelError::Config(format!(
            "ssl_temperature must be > 0, got {}",
            cfg.ssl_temperature
        )));
    }
    let mut grads = Gradients::zeros_like(state);
    if cfg.ssl_weight == 0.0 {
        return Ok((0.0, grads));
    }
    let users = unique(users.to_vec());
    let items = unique(items.to_vec());
    let tau = cfg.ssl_temperature;
    let (au, ai) = views
        .first
        .propagate(&state.user_table, &state.item_table, state.layers);
    let (bu, bi) = views
        .second
        .propagate(&state.user_table, &state.item_table, state.layers);

    let (loss_u, gau, gbu) = info_nce(&au, &bu, &users, tau);
    let (loss_i, gai, gbi) = info_nce(&ai, &bi, &items, tau);

    let (g1u, g1i) = views.first.propagate(&gau, &gai, state.layers);
    let (g2u, g2i) = views.second.propagate(&gbu, &gbi, state.layers);
    grads.users = g1u + g2u;
    grads.items = g1i + g2i;
    grads.scale(cfg.ssl_weight);
    Ok((cfg.ssl_weight * (loss_u + loss_i), grads))
}

/// BPR plus, when `ssl_weight > 0` and views are given, the contrastive term
/// over the batch's distinct users and positive items.
pub fn objective(
    state: &ModelState,
    batch: &[Triple],
    views: Option<&SslViews>,
    cfg: &LossConfig,
) -> Result<(f64, Gradients), ModelError> {
    cfg.validate()?;
    let (mut loss, mut grads) = bpr_loss(state, batch, cfg);
    if let (Some(views), true) = (views, cfg.ssl_weight > 0.0) {
        let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
        let items: Vec<usize> = batch.iter().map(|t| t.pos).collect();
        let (l, g) = ssl_loss(state, views, &users, &items, cfg)?;
        loss += l;
        grads += &g;
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Edge;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn toy(layers: usize, scale: f64, seed: u64) -> (ModelState, BipartiteGraph) {
        let edges: Vec<Edge> = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 0), (3, 3), (0, 2)]
            .iter()
            .map(|&(u, i)| Edge::new(u, i, 0))
            .collect();
        let g = BipartiteGraph::from_edges(4, 4, &edges);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users = Array2::from_shape_fn((4, 3), |_| rng.random_range(-scale..scale));
        let items = Array2::from_shape_fn((4, 3), |_| rng.random_range(-scale..scale));
        let s = ModelState::new(users, items, layers, Arc::new(NormAdjacency::from_graph(&g))).unwrap();
        (s, g)
    }

    fn fd_check<F: Fn(&ModelState) -> f64>(state: &ModelState, analytic: &Gradients, f: F) -> f64 {
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for side in 0..2 {
            let (rows, cols) = if side == 0 {
                state.user_table.dim()
            } else {
                state.item_table.dim()
            };
            for r in 0..rows {
                for c in 0..cols {
                    let bump = |delta: f64| {
                        let mut s = state.clone();
                        if side == 0 {
                            s.user_table[[r, c]] += delta;
                        } else {
                            s.item_table[[r, c]] += delta;
                        }
                        f(&s)
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    let a = if side == 0 {
                        analytic.users[[r, c]]
                    } else {
                        analytic.items[[r, c]]
                    };
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max((a - numeric).abs() / denom);
                }
            }
        }
        worst
    }

    #[test]
    fn equal_scores_cost_ln2() {
        let (mut s, _) = toy(0, 1.0, 1);
        let row = s.item_table.row(1).to_owned();
        s.item_table.row_mut(2).assign(&row);
        let batch = [Triple {
            user: 0,
            pos: 1,
            neg: 2,
        }];
        let (loss, _) = bpr_loss(&s, &batch, &LossConfig::bpr_only().with_l2(0.0));
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_margin_loss_vanishes() {
        let (mut s, _) = toy(0, 1.0, 1);
        s.user_table.row_mut(0).assign(&ndarray::arr1(&[10.0, 0.0, 0.0]));
        s.item_table.row_mut(1).assign(&ndarray::arr1(&[10.0, 0.0, 0.0]));
        s.item_table.row_mut(2).assign(&ndarray::arr1(&[-10.0, 0.0, 0.0]));
        let batch = [Triple {
            user: 0,
            pos: 1,
            neg: 2,
        }];
        let (loss, _) = bpr_loss(&s, &batch, &LossConfig::bpr_only().with_l2(0.0));
        assert!(loss > 0.0 && loss < 1e-80);
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        for layers in 0..4 {
            let (s, _) = toy(layers, 1.0, 10 + layers as u64);
            let batch = [
                Triple {
                    user: 0,
                    pos: 1,
                    neg: 3,
                },
                Triple {
                    user: 1,
                    pos: 2,
                    neg: 0,
                },
                Triple {
                    user: 3,
                    pos: 0,
                    neg: 1,
                },
                Triple {
                    user: 0,
                    pos: 0,
                    neg: 3,
                },
            ];
            let cfg = LossConfig::bpr_only().with_l2(0.05);
            let (_, g) = bpr_loss(&s, &batch, &cfg);
            let err = fd_check(&s, &g, |s| bpr_loss(s, &batch, &cfg).0);
            assert!(err < 1e-4, "layers {layers}: rel err {err}");
        }
    }

    #[test]
    fn ssl_gradient_matches_finite_differences() {
        for layers in [1, 2] {
            let (s, g) = toy(layers, 1.0, 20 + layers as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let views = SslViews::sample(&g, 0.3, &mut rng);
            let cfg = LossConfig {
                ssl_weight: 0.7,
                ssl_temperature: 0.5,
                ..LossConfig::default()
            };
            let users = [0, 1, 3];
            let items = [0, 2, 3];
            let (_, grad) = ssl_loss(&s, &views, &users, &items, &cfg).unwrap();
            let err = fd_check(&s, &grad, |s| ssl_loss(s, &views, &users, &items, &cfg).unwrap().0);
            assert!(err < 1e-4, "layers {layers}: rel err {err}");
        }
    }

    #[test]
    fn singleton_identical_views_cost_nothing() {
        let (s, g) = toy(2, 1.0, 4);
        let views = SslViews::identical(&g);
        let cfg = LossConfig {
            ssl_weight: 1.0,
            ..LossConfig::default()
        };
        let (loss, _) = ssl_loss(&s, &views, &[2], &[1], &cfg).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn ssl_rejects_bad_temperature() {
        let (s, g) = toy(1, 1.0, 4);
        let views = SslViews::identical(&g);
        let cfg = LossConfig {
            ssl_temperature: 0.0,
            ..LossConfig::default()
        };
        assert!(matches!(
            ssl_loss(&s, &views, &[0], &[0], &cfg),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn zero_ssl_weight_is_plain_bpr() {
        let (s, g) = toy(2, 1.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let views = SslViews::sample(&g, 0.2, &mut rng);
        let batch = [Triple {
            user: 2,
            pos: 3,
            neg: 0,
        }];
        let cfg = LossConfig::bpr_only();
        let (l1, g1) = objective(&s, &batch, Some(&views), &cfg).unwrap();
        let (l2, g2) = bpr_loss(&s, &batch, &cfg);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    impl LossConfig {
        fn with_l2(self, l2_weight: f64) -> Self {
            Self { l2_weight, ..self }
        }
    }
}
