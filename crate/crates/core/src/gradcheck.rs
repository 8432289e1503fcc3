//! Finite-difference verification of the analytic adjoints.
//!
//! [`grad_check`] compares one analytic gradient against central differences.
//! [`run_suite`] applies it to every loss path the trainer differentiates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::head::{classify_on, fuse_on, HeadVars};
use crate::memory::{tape, DEFAULT_SCALE};
use crate::model::{Architecture, Batch, GradientFlow, Model};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;
/// Absolute floor of the comparison, relative to `max(1, |L|)`. Rounding in
/// `L` puts noise of order `ε·|L|/h` on every central difference, so smaller
/// components cannot be resolved to [`PASS_THRESHOLD`].
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Largest `|a − n| / max(|a|, |n|, ABS_FLOOR·max(1, |L|))` over all
/// coordinates of `point`, where `L` is the value of `f` at `point`, `a` the
/// analytic gradient returned by `f` and `n` the central difference
/// `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (value, analytic) = f(point)?;
    let floor = ABS_FLOOR * value.abs().max(1.0);
    if !analytic.same_shape(point) {
        return Err(Error::dim(
            "grad_check",
            format!("{:?}", point.shape()),
            format!("{:?}", analytic.shape()),
        ));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: point.len(),
    };
    let mut x = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        x.data_mut()[i] = x0 + h;
        let (fp, _) = f(&x)?;
        x.data_mut()[i] = x0 - h;
        let (fm, _) = f(&x)?;
        x.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::GradCheck {
                op: "grad_check".into(),
                coordinate: i,
                analytic: a,
                numeric,
            });
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: rel.max(report.max_rel_error),
                worst_coordinate: i,
                analytic: a,
                numeric,
                coordinates: point.len(),
            };
        }
    }
    Ok(report)
}

/// Gradient of the scalar built by `build` with respect to the one
/// differentiable input it receives.
fn check_input<B>(point: &Tensor, h: f64, corrupt: Option<OpKind>, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check(
        |x| {
            let mut g = Graph::new();
            g.corrupt_adjoint(corrupt);
            let v = g.param(x.clone());
            let out = build(&mut g, v)?;
            let grads = g.backward(out)?;
            Ok((g.value(out).item(), grads.get(v).expect("param has a gradient").clone()))
        },
        point,
        h,
    )
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub seeds: usize,
    /// Upper bound on every dimension of the random problems.
    pub dims: usize,
    pub step: f64,
    pub scale: f64,
    pub corrupt: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 10,
            dims: 8,
            step: DEFAULT_STEP,
            scale: DEFAULT_SCALE,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub path: String,
    pub max_rel_error: f64,
    /// `(seed index, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= PASS_THRESHOLD
    }
}

struct Problem {
    t: usize,
    c: usize,
    d: usize,
    n: usize,
    k: usize,
    f: usize,
    f_src: Tensor,
    f_tgt: Tensor,
    key: Tensor,
    value: Tensor,
    fuse_w: Tensor,
    fuse_b: Tensor,
    cls_w: Tensor,
    cls_b: Tensor,
    q: Vec<f64>,
    label: usize,
}

impl Problem {
    fn random(dims: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let d = dims.max(1);
        let pick = |rng: &mut ChaCha8Rng, lo: usize| rng.random_range(lo.min(d)..=d);
        let (t, c, dd, n, f) = (pick(rng, 1), pick(rng, 1), pick(rng, 1), pick(rng, 1), pick(rng, 1));
        let k = rng.random_range(2..=d.max(2));
        let q = {
            let mut z = Tensor::randn(1, n, 1.0, rng).into_data();
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            z.iter_mut().for_each(|v| *v = v.exp() / s);
            z
        };
        Self {
            t,
            c,
            d: dd,
            n,
            k,
            f,
            f_src: Tensor::randn(t, c, 1.0, rng),
            f_tgt: Tensor::randn(t, dd, 1.0, rng),
            key: Tensor::randn(n, c, 1.0, rng),
            value: Tensor::randn(n, dd, 1.0, rng),
            fuse_w: Tensor::randn(c + dd, f, 0.5, rng),
            fuse_b: Tensor::randn(1, f, 0.1, rng),
            cls_w: Tensor::randn(f, k, 0.5, rng),
            cls_b: Tensor::randn(1, k, 0.1, rng),
            q,
            label: rng.random_range(0..k),
        }
    }
}

struct Inputs {
    f_src: Var,
    f_tgt: Var,
    key: Var,
    value: Var,
    head: HeadVars,
}

/// Every tensor of `p` as a constant except the one at `slot`, which is `x`.
fn inputs(g: &mut Graph, p: &Problem, slot: usize, x: Var) -> Inputs {
    let mut c = |i: usize, t: &Tensor| if i == slot { x } else { g.constant(t.clone()) };
    Inputs {
        f_src: c(0, &p.f_src),
        f_tgt: c(1, &p.f_tgt),
        key: c(2, &p.key),
        value: c(3, &p.value),
        head: HeadVars {
            fuse_w: c(4, &p.fuse_w),
            fuse_b: c(5, &p.fuse_b),
            cls_w: c(6, &p.cls_w),
            cls_b: c(7, &p.cls_b),
        },
    }
}

fn slot_tensor(p: &Problem, slot: usize) -> &Tensor {
    match slot {
        0 => &p.f_src,
        1 => &p.f_tgt,
        2 => &p.key,
        3 => &p.value,
        4 => &p.fuse_w,
        5 => &p.fuse_b,
        6 => &p.cls_w,
        _ => &p.cls_b,
    }
}

type PathFn = fn(&mut Graph, &Inputs, &Problem, f64) -> Result<Var>;

/// addressing → softmax → recall → fusion → pooled classifier → CE
fn recall_task(g: &mut Graph, i: &Inputs, p: &Problem, r: f64) -> Result<Var> {
    let a = tape::address(g, i.key, i.f_src, r)?;
    let v = tape::read(g, a, i.value)?;
    let fused = fuse_on(g, i.f_src, Some(v), &i.head)?;
    let logits = classify_on(g, fused, p.t, &i.head)?;
    g.cross_entropy(logits, &[p.label])
}

fn oracle_task(g: &mut Graph, i: &Inputs, p: &Problem, _r: f64) -> Result<Var> {
    let fused = fuse_on(g, i.f_src, Some(i.f_tgt), &i.head)?;
    let logits = classify_on(g, fused, p.t, &i.head)?;
    g.cross_entropy(logits, &[p.label])
}

fn saving(g: &mut Graph, i: &Inputs, _p: &Problem, r: f64) -> Result<Var> {
    let a = tape::address(g, i.value, i.f_tgt, r)?;
    let rec = tape::read(g, a, i.value)?;
    tape::saving_loss(g, i.f_tgt, rec)
}

fn bridging_detached(g: &mut Graph, i: &Inputs, _p: &Problem, r: f64) -> Result<Var> {
    let a_src = tape::address(g, i.key, i.f_src, r)?;
    let a_tgt = tape::address(g, i.value, i.f_tgt, r)?;
    tape::bridging_loss(g, a_tgt, a_src, true)
}

fn bridging_full(g: &mut Graph, i: &Inputs, _p: &Problem, r: f64) -> Result<Var> {
    let a_src = tape::address(g, i.key, i.f_src, r)?;
    let a_tgt = tape::address(g, i.value, i.f_tgt, r)?;
    tape::bridging_loss(g, a_tgt, a_src, false)
}

const PATHS: &[(&str, PathFn, &[usize])] = &[
    ("recall_task", recall_task, &[0, 2, 3, 4, 5, 6, 7]),
    ("oracle_task", oracle_task, &[0, 1, 4, 6]),
    ("l_save", saving, &[1, 3]),
    ("l_bridge", bridging_detached, &[0, 2]),
    ("l_bridge_undetached", bridging_full, &[0, 1, 2, 3]),
];

struct Tracker {
    entry: SuiteEntry,
}

impl Tracker {
    fn new(path: &str) -> Self {
        Self {
            entry: SuiteEntry {
                path: path.to_string(),
                max_rel_error: 0.0,
                worst: (0, 0),
                analytic: 0.0,
                numeric: 0.0,
            },
        }
    }

    fn update(&mut self, seed_idx: usize, r: &GradCheckReport) {
        if r.max_rel_error >= self.entry.max_rel_error {
            self.entry.max_rel_error = r.max_rel_error;
            self.entry.worst = (seed_idx, r.worst_coordinate);
            self.entry.analytic = r.analytic;
            self.entry.numeric = r.numeric;
        }
    }
}

/// Runs every loss path over `opts.seeds` random problems and returns one
/// entry per path with its worst relative error.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    if opts.dims == 0 {
        return Err(Error::Config("gradcheck dims must be at least 1".into()));
    }
    let h = opts.step;
    let r = opts.scale;
    let mut trackers: Vec<Tracker> = Vec::new();
    let tracker = |name: &str, trackers: &mut Vec<Tracker>| -> usize {
        if let Some(i) = trackers.iter().position(|t| t.entry.path == name) {
            i
        } else {
            trackers.push(Tracker::new(name));
            trackers.len() - 1
        }
    };

    for s in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[s as u64]));
        let p = Problem::random(opts.dims, &mut rng);

        // primitives
        let b = Tensor::randn(1, p.c, 1.0, &mut rng);
        let rep = check_input(&p.f_src, h, opts.corrupt, |g, x| {
            let bv = g.constant(b.clone());
            let s = g.cosine_rows(x, bv)?;
            // Σ (cos + 1)², away from the stationary points of cos itself
            let target = g.constant(Tensor::full(p.t, 1, -1.0));
            g.squared_error(s, target)
        })?;
        let i = tracker("cosine", &mut trackers);
        trackers[i].update(s, &rep);

        let q = Tensor::row_vector(p.q.clone());
        let logits = Tensor::randn(1, p.n, 1.0, &mut rng);
        let rep = check_input(&logits, h, opts.corrupt, |g, x| {
            let pr = g.scale(x, r);
            let pr = g.softmax_rows(pr);
            let qv = g.constant(q.clone());
            g.kl_rows(pr, qv)
        })?;
        let i = tracker("softmax_kl", &mut trackers);
        trackers[i].update(s, &rep);

        for (name, path, slots) in PATHS {
            let i = tracker(name, &mut trackers);
            for &slot in *slots {
                let rep = check_input(slot_tensor(&p, slot), h, opts.corrupt, |g, x| {
                    let ins = inputs(g, &p, slot, x);
                    path(g, &ins, &p, r)
                })?;
                trackers[i].update(s, &rep);
            }
        }

        let rep = total_loss_check(&p, opts, &mut rng)?;
        let i = tracker("l_total", &mut trackers);
        for rp in rep {
            trackers[i].update(s, &rp);
        }
    }
    Ok(trackers.into_iter().map(|t| t.entry).collect())
}

/// Full training objective through both encoders, checked for every
/// parameter tensor of a small model.
fn total_loss_check(p: &Problem, opts: &SuiteOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    use rand::Rng;
    let dims = opts.dims;
    let arch = Architecture {
        source_input: rng.random_range(1..=dims),
        target_input: rng.random_range(1..=dims),
        hidden: rng.random_range(1..=dims),
        source_features: p.c,
        target_features: p.d,
        fused: p.f,
        classes: p.k,
        slots: p.n,
        scale: opts.scale,
        share_head: true,
    };
    let model = Model::init(arch.clone(), rng)?;
    let samples = 2;
    let batch = Batch {
        x_src: Tensor::randn(samples * p.t, arch.source_input, 1.0, rng),
        x_tgt: Some(Tensor::randn(samples * p.t, arch.target_input, 1.0, rng)),
        labels: (0..samples).map(|_| rng.random_range(0..p.k)).collect(),
        steps: p.t,
    };
    // the detached bridging target is a stop-gradient, not the derivative
    // of the loss value, so only the undetached flow is comparable
    let flow = GradientFlow {
        detach_target: false,
        ..GradientFlow::default()
    };
    let mut out = Vec::new();
    for idx in 0..model.store.len() {
        let point = model.store.param(idx).value.clone();
        let rep = grad_check(
            |x| {
                let mut m = model.clone();
                m.store.param_mut(idx).value = x.clone();
                let mut g = Graph::new();
                g.corrupt_adjoint(opts.corrupt);
                let bound = m.bind(&mut g, true);
                let fv = m.forward(&mut g, &bound, &batch, flow)?;
                let grads = g.backward(fv.total)?;
                Ok((g.value(fv.total).item(), grads.get(bound.vars[idx]).expect("param").clone()))
            },
            &point,
            opts.step,
        )?;
        out.push(rep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let x = Tensor::row_vector(vec![1.0, 2.0, 3.0]);
        let rep = grad_check(
            |x| {
                let v: f64 = x.data().iter().map(|a| a * a).sum();
                Ok((v, x.scale(2.0)))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
        assert_eq!(rep.coordinates, 3);
    }

    #[test]
    fn cosine_stationary_point() {
        let b = Tensor::row_vector(vec![2.0, 0.0, 0.0]);
        let rep = check_input(&b, DEFAULT_STEP, None, |g, x| {
            let bv = g.constant(b.clone());
            g.cosine_rows(x, bv)
        })
        .unwrap();
        assert!(rep.analytic.abs() < 1e-12);
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn softmax_kl_gradient() {
        let x = Tensor::row_vector(vec![0.3, -1.2, 0.8, 0.1]);
        let q = Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4]);
        let rep = check_input(&x, DEFAULT_STEP, None, |g, x| {
            let p = g.softmax_rows(x);
            let qv = g.constant(q.clone());
            g.kl_rows(p, qv)
        })
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let x = Tensor::row_vector(vec![1.0, 2.0]);
        let err = grad_check(|x| Ok((x.sum(), Tensor::row_vector(vec![1.0, f64::NAN]))), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::GradCheck { coordinate: 1, .. }));
    }

    #[test]
    fn scalar_dimension_suite_passes() {
        let opts = SuiteOptions {
            dims: 1,
            seeds: 3,
            ..Default::default()
        };
        for e in run_suite(&opts).unwrap() {
            assert!(e.passed(), "{e:?}");
        }
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        for op in [OpKind::CosineRows, OpKind::SoftmaxRows, OpKind::KlRows, OpKind::MatMul] {
            let opts = SuiteOptions {
                dims: 4,
                seeds: 2,
                corrupt: Some(op),
                ..Default::default()
            };
            let entries = run_suite(&opts).unwrap();
            assert!(entries.iter().any(|e| !e.passed()), "{op:?} corruption went unnoticed");
        }
    }
}
