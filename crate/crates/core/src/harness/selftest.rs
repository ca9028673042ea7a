//! Invariant suites shared by `raca selftest` and the acceptance tests.
//! Each suite returns a [`Check`] carrying its worst observed deviation.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agentnet::{greedy, AgentNet, AgentNetConfig, ObsBatch};
use crate::arena::{Arena, ArenaConfig, ObservationTriple};
use crate::error::Result;
use crate::learner::{run_episode, td_loss, Model, Variant, Widths};
use crate::numerics::gradcheck::{check, check_store, GradCheckReport};
use crate::numerics::{Graph, GruCell, ParamStore, Segment, Tensor, Var};
use crate::relmix::{
    build_adjacency, normalize_adjacency, Gcn, MixerConfig, MixerKind, MonotoneMixer, Relation,
};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Weighted sum `sum(y * r)` with a fixed random `r`, so every output entry
/// reaches the loss with a distinct sensitivity.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

pub const GRAD_INSTANCES: usize = 100;
pub const GRAD_TOL: f64 = 1e-4;

/// Reverse-mode gradients of every layer type against central differences.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut reports: Vec<(&str, GradCheckReport)> = Vec::new();
    let mut run =
        |name: &'static str, r: GradCheckReport| match reports.iter_mut().find(|(n, _)| *n == name)
        {
            Some((_, acc)) => *acc = acc.merge(r),
            None => reports.push((name, r)),
        };
    let started = Instant::now();
    for _ in 0..instances {
        // linear
        let (m, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let r = rand_tensor(&mut rng, &[m, n], 1.0);
        let inputs = [
            rand_tensor(&mut rng, &[m, k], 1.0),
            rand_tensor(&mut rng, &[k, n], 1.0),
            rand_tensor(&mut rng, &[n], 1.0),
        ];
        run(
            "linear",
            check(&inputs, h, |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, &r)
            })?,
        );

        // softmax
        let (rows, cols) = (rng.gen_range(1..4), rng.gen_range(1..6));
        let r = rand_tensor(&mut rng, &[rows, cols], 1.0);
        let inputs = [rand_tensor(&mut rng, &[rows, cols], 2.0)];
        run(
            "softmax",
            check(&inputs, h, |g, v| {
                let y = g.softmax_rows(v[0])?;
                project(g, y, &r)
            })?,
        );

        // GRU
        let (d_in, d_h, b) = (
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..3),
        );
        let cell = GruCell::new("gru", d_in, d_h);
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut rng);
        store.insert("x", rand_tensor(&mut rng, &[b, d_in], 1.0));
        store.insert("h", rand_tensor(&mut rng, &[b, d_h], 1.0));
        let r = rand_tensor(&mut rng, &[b, d_h], 1.0);
        run(
            "gru",
            check_store(&store, h, usize::MAX, |g, s| {
                let x = g.param_from(s, "x")?;
                let hv = g.param_from(s, "h")?;
                let y = cell.step(g, s, x, hv)?;
                project(g, y, &r)
            })?,
        );

        // attention over ragged segments, including empty ones
        let n_q = rng.gen_range(1..4);
        let d = rng.gen_range(1..4);
        let lens: Vec<usize> = (0..n_q).map(|_| rng.gen_range(0..4)).collect();
        let total: usize = lens.iter().sum();
        let mut start = 0;
        let segments: Arc<[Segment]> = lens
            .iter()
            .map(|&len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect();
        let r = rand_tensor(&mut rng, &[n_q, d], 1.0);
        let inputs = [
            rand_tensor(&mut rng, &[n_q, d], 1.0),
            rand_tensor(&mut rng, &[total, d], 1.0),
            rand_tensor(&mut rng, &[total, d], 1.0),
        ];
        run(
            "attention",
            check(&inputs, h, |g, v| {
                let y = g.segment_attention(v[0], v[1], v[2], segments.clone())?;
                project(g, y, &r)
            })?,
        );

        // GCN with skip connections over a random visibility graph
        let n = rng.gen_range(1..5);
        let (d_in, d_g) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let sees: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.5)).collect();
        let a_hat = normalize_adjacency(&build_adjacency(n, &sees));
        let gcn = Gcn::new(d_in, d_g);
        let mut store = ParamStore::new();
        gcn.init(&mut store, &mut rng);
        store.insert("x", rand_tensor(&mut rng, &[n, d_in], 1.0));
        let r = rand_tensor(&mut rng, &[n, 1], 1.0);
        let blocks: Arc<[f64]> = a_hat.data().to_vec().into();
        run(
            "gcn",
            check_store(&store, h, usize::MAX, |g, s| {
                let x = g.param_from(s, "x")?;
                let y = gcn.forward(g, s, x, blocks.clone(), n)?;
                project(g, y, &r)
            })?,
        );

        // mixer with relation weights
        let (p, n, sd) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..5),
        );
        let mixer = MonotoneMixer::new(
            MixerConfig {
                kind: MixerKind::Qmix,
                d_mix: rng.gen_range(1..4),
            },
            n,
            sd,
        )?;
        let mut store = ParamStore::new();
        mixer.init(&mut store, &mut rng);
        store.insert("q", rand_tensor(&mut rng, &[p, n], 1.0));
        store.insert("logits", rand_tensor(&mut rng, &[p, n], 1.0));
        store.insert("s", rand_tensor(&mut rng, &[p, sd], 1.0));
        let r = rand_tensor(&mut rng, &[p, 1], 1.0);
        run(
            "mixer",
            check_store(&store, h, usize::MAX, |g, s| {
                let q = g.param_from(s, "q")?;
                let l = g.param_from(s, "logits")?;
                let w = g.softmax_rows(l)?;
                let st = g.param_from(s, "s")?;
                let qt = crate::relmix::weight_q(g, q, Some(w))?;
                let y = mixer.forward(g, s, qt, st)?;
                project(g, y, &r)
            })?,
        );
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(reports
        .into_iter()
        .map(|(name, r)| {
            Check::new(
                &format!("gradient/{name}"),
                r.max_rel_error < GRAD_TOL,
                format!(
                    "max rel error {:.2e} over {instances} instances ({} entries, {secs:.1}s total)",
                    r.max_rel_error, r.entries
                ),
            )
        })
        .collect())
}

/// Closed-form normalised adjacency computed entry by entry.
fn oracle_normalized(n: usize, adj: &[bool]) -> Vec<f64> {
    let deg: Vec<f64> = (0..n)
        .map(|u| 1.0 + (0..n).filter(|&v| adj[u * n + v]).count() as f64)
        .collect();
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let a = if u == v {
                1.0
            } else {
                adj[u * n + v] as u8 as f64
            };
            out[u * n + v] = a / (deg[u] * deg[v]).sqrt();
        }
    }
    out
}

/// Every visibility relation on `n <= 4` agents: the adjacency must be the
/// "or"-symmetrisation and the normalisation must match the closed form.
pub fn adjacency_suite() -> Check {
    let mut worst: f64 = 0.0;
    let mut graphs = 0;
    let mut ok = true;
    for n in 1..=4usize {
        let pairs = n * n;
        for bits in 0u32..(1 << pairs) {
            let sees: Vec<bool> = (0..pairs).map(|k| bits >> k & 1 == 1).collect();
            let g = build_adjacency(n, &sees);
            let expect: Vec<bool> = (0..pairs)
                .map(|k| {
                    let (u, v) = (k / n, k % n);
                    u != v && (sees[u * n + v] || sees[v * n + u])
                })
                .collect();
            ok &= (0..pairs).all(|k| g.edge(k / n, k % n) == expect[k]);
            let got = normalize_adjacency(&g);
            for (a, b) in got.data().iter().zip(oracle_normalized(n, &expect)) {
                worst = worst.max((a - b).abs());
            }
            graphs += 1;
        }
    }
    // 3-node path 1-2-3.
    let path = normalize_adjacency(&build_adjacency(
        3,
        &[false, true, false, true, false, true, false, true, false],
    ));
    let fixture = [
        0.5,
        1.0 / 6f64.sqrt(),
        0.0,
        1.0 / 6f64.sqrt(),
        1.0 / 3.0,
        1.0 / 6f64.sqrt(),
        0.0,
        1.0 / 6f64.sqrt(),
        0.5,
    ];
    for (a, b) in path.data().iter().zip(fixture) {
        worst = worst.max((a - b).abs());
    }
    Check::new(
        "adjacency",
        ok && worst <= 1e-12,
        format!("{graphs} relations, max deviation {worst:.1e}"),
    )
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    crate::relmix::relation_weights(&logits).expect("finite")
}

/// Finite-difference slope of `Q_tot` in each agent value, over random
/// mixers, states, values and relation weights.
pub fn monotonicity_suite(seed: u64, draws: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = f64::INFINITY;
    for _ in 0..draws {
        let n = rng.gen_range(1..7);
        let sd = rng.gen_range(1..12);
        let mixer = MonotoneMixer::new(
            MixerConfig {
                kind: MixerKind::Qmix,
                d_mix: rng.gen_range(1..17),
            },
            n,
            sd,
        )?;
        let mut store = ParamStore::new();
        mixer.init(&mut store, &mut rng);
        let scale = rng.gen_range(0.1..5.0);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            for x in store.get_mut(&name).expect("present").data_mut() {
                *x *= scale;
            }
        }
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let s: Vec<f64> = (0..sd).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w = random_simplex(&mut rng, n);
        for i in 0..n {
            let mut qp = q.clone();
            qp[i] += h;
            let mut qm = q.clone();
            qm[i] -= h;
            let up = mixer.mix(&store, &qp, Some(&w), &s)?;
            let down = mixer.mix(&store, &qm, Some(&w), &s)?;
            worst = worst.min((up - down) / (2.0 * h));
        }
    }
    Ok(Check::new(
        "monotonicity",
        worst >= -1e-6,
        format!("{draws} draws, smallest slope {worst:.3e}"),
    ))
}

/// Brute-force joint argmax of `Q_tot` against per-agent argmaxes, with
/// relation weights produced by a random GCN.
pub fn igm_suite(seed: u64, draws: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    for _ in 0..draws {
        let n = rng.gen_range(1..=3usize);
        let a = rng.gen_range(2..=4usize);
        let sd = rng.gen_range(1..8);
        let mixer = MonotoneMixer::new(MixerConfig::default(), n, sd)?;
        let gcn = Gcn::new(3, 4);
        let mut store = ParamStore::new();
        mixer.init(&mut store, &mut rng);
        gcn.init(&mut store, &mut rng);
        let sees: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.5)).collect();
        let a_hat = normalize_adjacency(&build_adjacency(n, &sees));
        let x = rand_tensor(&mut rng, &[n, 3], 1.0);
        let logits = crate::relmix::gcn_forward(&gcn, &store, &x, &a_hat)?;
        let w = crate::relmix::relation_weights(logits.data())?;
        let qs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..a).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let s: Vec<f64> = (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let greedy_tuple: Vec<usize> = qs
            .iter()
            .map(|q| greedy(q, &vec![true; a]).expect("non-empty"))
            .collect();
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for code in 0..a.pow(n as u32) {
            let joint: Vec<usize> = (0..n).map(|i| code / a.pow(i as u32) % a).collect();
            let q: Vec<f64> = joint.iter().enumerate().map(|(i, &u)| qs[i][u]).collect();
            let v = mixer.mix(&store, &q, Some(&w), &s)?;
            if v > best.0 {
                best = (v, joint);
            }
        }
        agree += (best.1 == greedy_tuple) as usize;
    }
    Ok(Check::new(
        "igm",
        agree == draws,
        format!("{agree}/{draws} draws agree"),
    ))
}

/// Observations after a few random steps, so entity rows are non-trivial.
fn observations_of(cfg: ArenaConfig, seed: u64, steps: usize) -> Result<Vec<ObservationTriple>> {
    let mut arena = Arena::new(cfg)?;
    let mut snap = arena.reset(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        if arena.is_done() {
            break;
        }
        let acts = crate::arena::script::random_actions(&snap.masks, &mut rng);
        snap = arena.step(&acts)?.1;
    }
    Ok(snap.observations)
}

/// Team-size invariance, row-permutation invariance of agent Q-values and
/// node-permutation equivariance of the GCN.
pub fn invariance_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = AgentNet::new(AgentNetConfig::default())?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    let count = store.num_scalars();

    let mut sizes_ok = true;
    let mut detail = Vec::new();
    for size in [3, 5, 8] {
        let mut cfg = ArenaConfig::rangers(size, size);
        cfg.spawn = None;
        let obs = observations_of(cfg, seed, 0)?;
        let (q, h) = net.step(&store, &obs, &net.initial_hidden(size))?;
        let rows: usize = obs.iter().map(|o| o.variant.len()).sum();
        sizes_ok &= q.shape() == [size, 6 + size] && h.rows() == size && q.is_finite();
        detail.push(format!(
            "{size}v{size}: q {:?}, {rows} entity rows",
            q.shape()
        ));
    }
    sizes_ok &= store.num_scalars() == count;
    let sizes = Check::new(
        "invariance/population",
        sizes_ok,
        format!("{} ({count} parameters throughout)", detail.join("; ")),
    );

    let mut worst: f64 = 0.0;
    let mut trials = 0;
    let mut cfg = ArenaConfig::rangers(5, 5);
    cfg.spawn = None;
    for ep in 0..10 {
        let obs = observations_of(cfg.clone(), seed + ep, 3)?;
        let hidden = rand_tensor(&mut rng, &[1, net.hidden_dim()], 1.0);
        for o in &obs {
            let (q0, _) = net.agent_q(&store, o, hidden.data())?;
            for _ in 0..5 {
                let mut perm: Vec<usize> = (0..o.variant.len()).collect();
                perm.shuffle(&mut rng);
                let (q1, _) = net.agent_q(&store, &o.permute_rows(&perm), hidden.data())?;
                for (a, b) in q0.iter().zip(&q1) {
                    worst = worst.max((a - b).abs());
                }
                trials += 1;
            }
        }
    }
    let perm = Check::new(
        "invariance/permutation",
        worst < 1e-9,
        format!("{trials} permutations, max |dq| {worst:.1e}"),
    );

    let mut worst_gcn: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..7);
        let d = rng.gen_range(1..6);
        let gcn = Gcn::new(d, rng.gen_range(1..6));
        let mut s = ParamStore::new();
        gcn.init(&mut s, &mut rng);
        let sees: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.4)).collect();
        let x = rand_tensor(&mut rng, &[n, d], 1.0);
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        let sees_p: Vec<bool> = (0..n * n).map(|k| sees[p[k / n] * n + p[k % n]]).collect();
        let xp = Tensor::matrix(n, d, p.iter().flat_map(|&i| x.row(i).to_vec()).collect())?;
        let h = crate::relmix::gcn_forward(
            &gcn,
            &s,
            &x,
            &normalize_adjacency(&build_adjacency(n, &sees)),
        )?;
        let hp = crate::relmix::gcn_forward(
            &gcn,
            &s,
            &xp,
            &normalize_adjacency(&build_adjacency(n, &sees_p)),
        )?;
        for (k, &i) in p.iter().enumerate() {
            worst_gcn = worst_gcn.max((hp.data()[k] - h.data()[i]).abs());
        }
    }
    let gcn = Check::new(
        "invariance/gcn_equivariance",
        worst_gcn < 1e-9,
        format!("100 graphs, max deviation {worst_gcn:.1e}"),
    );
    Ok(vec![sizes, perm, gcn])
}

/// Uniform relation weights reduce to the plain mixer, and a mean-pooling
/// agent with uniform weights reproduces the plain QMIX loss.
pub fn qmix_reduction_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_mix: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..9);
        let sd = rng.gen_range(1..10);
        let mixer = MonotoneMixer::new(MixerConfig::default(), n, sd)?;
        let mut store = ParamStore::new();
        mixer.init(&mut store, &mut rng);
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let uniform = crate::relmix::relation_weights(&vec![0.0; n])?;
        let a = mixer.mix(&store, &q, Some(&uniform), &s)?;
        let b = mixer.mix(&store, &q, None, &s)?;
        worst_mix = worst_mix.max((a - b).abs());
    }
    let mix = Check::new(
        "qmix_reduction/mixer",
        worst_mix <= 1e-12,
        format!("200 draws, max |dQ_tot| {worst_mix:.1e}"),
    );

    let cfg = ArenaConfig::rangers(3, 3);
    let mut arena = Arena::new(cfg.clone())?;
    let widths = Widths {
        d_k: 16,
        d_h: 16,
        d_mix: 8,
        d_gcn: 8,
    };
    let plain = Model::new(Variant::Qmix, &widths, 3, arena.state_dim())?;
    let mut reduced = Model::new(Variant::Raca, &widths, 3, arena.state_dim())?;
    reduced.agent = plain.agent.clone();
    reduced.relation = Relation::Uniform;
    let params = plain.init(&mut rng);
    let target = plain.init(&mut rng);
    let episodes = (0..6)
        .map(|k| run_episode(&mut arena, &plain.agent, &params, 0.7, k, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<_> = episodes.iter().collect();
    let a = td_loss(&plain, &params, &target, &batch, 0.99)?;
    let b = td_loss(&reduced, &params, &target, &batch, 0.99)?;
    let mut worst_grad: f64 = 0.0;
    for (name, g) in &a.grads {
        if let Some(h) = b.grads.get(name) {
            worst_grad = worst_grad.max(g.max_abs_diff(h));
        }
    }
    let diff = (a.loss - b.loss).abs();
    let loss = Check::new(
        "qmix_reduction/td_loss",
        diff <= 1e-8 && worst_grad <= 1e-8,
        format!("|dloss| {diff:.1e}, max |dgrad| {worst_grad:.1e}"),
    );
    Ok(vec![mix, loss])
}

/// Padded batch loss against the step-weighted mean of single-episode
/// losses computed by the same library.
pub fn padding_suite(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ArenaConfig::rangers(3, 3);
    let mut arena = Arena::new(cfg)?;
    let widths = Widths {
        d_k: 8,
        d_h: 8,
        d_mix: 4,
        d_gcn: 4,
    };
    let model = Model::new(Variant::Raca, &widths, 3, arena.state_dim())?;
    let params = model.init(&mut rng);
    let target = model.init(&mut rng);
    let episodes = (0..5)
        .map(|k| run_episode(&mut arena, &model.agent, &params, 1.0, k, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = episodes.iter().collect();
    let batched = td_loss(&model, &params, &target, &refs, 0.99)?.loss;
    let (mut weighted, mut steps) = (0.0, 0.0);
    for ep in &episodes {
        let l = td_loss(&model, &params, &target, &[ep], 0.99)?.loss;
        weighted += l * ep.len() as f64;
        steps += ep.len() as f64;
    }
    let diff = (batched - weighted / steps).abs();
    Ok(Check::new(
        "td_loss/padding",
        diff <= 1e-8,
        format!(
            "batched {batched:.6e} vs per-episode {:.6e}",
            weighted / steps
        ),
    ))
}

/// Quick sanity for the batch layout used everywhere else.
fn obs_batch_suite() -> Result<Check> {
    let obs = observations_of(ArenaConfig::rangers(3, 3), 0, 0)?;
    let refs: Vec<&ObservationTriple> = obs.iter().collect();
    let b = ObsBatch::new(&refs, 3)?;
    Ok(Check::new(
        "obs_batch",
        b.rows() == 3 && b.n_actions() == 9,
        format!("{} rows, {} actions", b.rows(), b.n_actions()),
    ))
}

/// All suites. `quick` trims the sample counts.
pub fn run_all(seed: u64, quick: bool) -> Result<Vec<Check>> {
    let scale = if quick { 10 } else { 1 };
    let mut out = gradient_suite(seed, GRAD_INSTANCES / scale)?;
    out.push(adjacency_suite());
    out.push(monotonicity_suite(seed, 1000 / scale)?);
    out.push(igm_suite(seed, 100 / scale)?);
    out.extend(invariance_suite(seed)?);
    out.extend(qmix_reduction_suite(seed)?);
    out.push(padding_suite(seed)?);
    out.push(obs_batch_suite()?);
    Ok(out)
}
