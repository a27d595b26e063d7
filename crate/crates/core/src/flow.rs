//! Residuals and cost for 1D two-phase filling of a porous medium.
//!
//! Three networks approximate the Darcy velocity `v`, the pressure `p` and
//! the fraction `c` of injected fluid. The strong form is
//!
//! ```text
//! f1 = c_t + v c_x
//! f2 = v + k / mu(c) p_x,   mu(c) = c mu2 + (1 - c) mu1
//! f3 = v_x
//! ```
//!
//! with `p = p_in`, `c = 1` at the inlet, `p = p_out` at the outlet and
//! `c = 0` at `t = 0`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffnet::{init_network, ActivationKind, FieldSample, NetworkParams, NetworkSpec, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// Domain length.
    pub l: f64,
    /// End time.
    #[serde(rename = "T", alias = "t_end")]
    pub t_end: f64,
    /// Permeability.
    pub k: f64,
    /// Viscosity of the displaced fluid (initially filling the domain).
    pub mu1: f64,
    /// Viscosity of the injected fluid.
    pub mu2: f64,
    pub p_in: f64,
    pub p_out: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            l: 1.0,
            t_end: 0.5,
            k: 1.0,
            mu1: 1e-5,
            mu2: 1.0,
            p_in: 1.0,
            p_out: 0.0,
        }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l", self.l),
            ("T", self.t_end),
            ("k", self.k),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    key,
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        if !self.p_in.is_finite() || !self.p_out.is_finite() {
            return Err(Error::config("p_in", "pressures must be finite"));
        }
        if self.p_in <= self.p_out {
            return Err(Error::config(
                "p_in",
                format!("must exceed p_out ({} <= {})", self.p_in, self.p_out),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, t: f64) -> bool {
        (0.0..=self.l).contains(&x) && (0.0..=self.t_end).contains(&t)
    }
}

pub fn mixed_viscosity(c: f64, cfg: &ProblemConfig) -> f64 {
    c * cfg.mu2 + (1.0 - c) * cfg.mu1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeResiduals {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
}

pub fn pde_residuals(
    v: &FieldSample,
    p: &FieldSample,
    c: &FieldSample,
    cfg: &ProblemConfig,
) -> PdeResiduals {
    let mu = mixed_viscosity(c.value, cfg);
    PdeResiduals {
        f1: c.d_dt + v.value * c.d_dx,
        f2: v.value + cfg.k / mu * p.d_dx,
        f3: v.d_dx,
    }
}

/// Velocity, pressure and fraction networks.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTriple {
    pub v_net: NetworkParams,
    pub p_net: NetworkParams,
    pub c_net: NetworkParams,
}

impl FieldTriple {
    pub fn new(v_net: NetworkParams, p_net: NetworkParams, c_net: NetworkParams) -> Result<Self> {
        if v_net.spec().output_activation != ActivationKind::Linear {
            return Err(Error::config(
                "v_net",
                "velocity network needs a linear output",
            ));
        }
        for (key, net) in [("p_net", &p_net), ("c_net", &c_net)] {
            if net.spec().output_activation != ActivationKind::Sigmoid {
                return Err(Error::config(
                    key,
                    "pressure and fraction networks need a sigmoid output",
                ));
            }
        }
        for (key, net) in [("v_net", &v_net), ("p_net", &p_net), ("c_net", &c_net)] {
            if net.spec().output_dim != 1 {
                return Err(Error::config(key, "networks must have a single output"));
            }
        }
        Ok(FieldTriple {
            v_net,
            p_net,
            c_net,
        })
    }

    /// Three independently seeded networks with the given hidden layout.
    pub fn init(hidden_layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let spec = |out| NetworkSpec {
            hidden_layer_sizes: hidden_layer_sizes.to_vec(),
            ..NetworkSpec::standard(out)
        };
        let base = seed.wrapping_mul(3);
        FieldTriple::new(
            init_network(&spec(ActivationKind::Linear), base)?,
            init_network(&spec(ActivationKind::Sigmoid), base.wrapping_add(1))?,
            init_network(&spec(ActivationKind::Sigmoid), base.wrapping_add(2))?,
        )
    }

    pub fn num_params(&self) -> usize {
        self.v_net.num_params() + self.p_net.num_params() + self.c_net.num_params()
    }

    /// `[v | p | c]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.v_net.to_flat();
        out.extend(self.p_net.to_flat());
        out.extend(self.c_net.to_flat());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let nv = self.v_net.num_params();
        let np = self.p_net.num_params();
        self.v_net.set_flat(&flat[..nv]);
        self.p_net.set_flat(&flat[nv..nv + np]);
        self.c_net.set_flat(&flat[nv + np..]);
    }

    pub fn residuals_at(&self, points: &[(f64, f64)], cfg: &ProblemConfig) -> Vec<PdeResiduals> {
        let v = self.v_net.samples(points);
        let p = self.p_net.samples(points);
        let c = self.c_net.samples(points);
        v.iter()
            .zip(&p)
            .zip(&c)
            .map(|((v, p), c)| pde_residuals(v, p, c, cfg))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            lambda_v: 1.0,
            lambda_c: 1.0,
            lambda_p: 1.0,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_v", self.lambda_v),
            ("lambda_c", self.lambda_c),
            ("lambda_p", self.lambda_p),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    key,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// A point carrying a Dirichlet target value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub x: f64,
    pub t: f64,
    pub target: f64,
}

/// A point on an impermeable wall with its outward normal component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallPoint {
    pub x: f64,
    pub t: f64,
    pub normal: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSets {
    pub f1: Vec<(f64, f64)>,
    pub f2: Vec<(f64, f64)>,
    pub f3: Vec<(f64, f64)>,
    pub c_bc: Vec<BoundaryPoint>,
    pub p_bc: Vec<BoundaryPoint>,
    /// Always empty for the 1D filling problem.
    pub v_bc: Vec<WallPoint>,
}

impl PointSets {
    /// Uniform `n_x x n_t` grid for every PDE residual plus the boundary and
    /// initial points lying on that grid. The corner `(0, 0)` belongs to the
    /// inlet (`c = 1`), not to the initial line.
    pub fn uniform_grid(n_x: usize, n_t: usize, cfg: &ProblemConfig) -> Self {
        let xs = linspace(0.0, cfg.l, n_x);
        let ts = linspace(0.0, cfg.t_end, n_t);
        let grid: Vec<(f64, f64)> = ts
            .iter()
            .flat_map(|&t| xs.iter().map(move |&x| (x, t)))
            .collect();
        let mut c_bc: Vec<BoundaryPoint> = ts
            .iter()
            .map(|&t| BoundaryPoint {
                x: 0.0,
                t,
                target: 1.0,
            })
            .collect();
        c_bc.extend(xs.iter().filter(|&&x| x > 0.0).map(|&x| BoundaryPoint {
            x,
            t: 0.0,
            target: 0.0,
        }));
        let mut p_bc: Vec<BoundaryPoint> = ts
            .iter()
            .map(|&t| BoundaryPoint {
                x: 0.0,
                t,
                target: cfg.p_in,
            })
            .collect();
        p_bc.extend(ts.iter().map(|&t| BoundaryPoint {
            x: cfg.l,
            t,
            target: cfg.p_out,
        }));
        PointSets {
            f1: grid.clone(),
            f2: grid.clone(),
            f3: grid,
            c_bc,
            p_bc,
            v_bc: Vec::new(),
        }
    }

    pub fn sizes(&self) -> [usize; 5] {
        [
            self.f1.len(),
            self.f2.len(),
            self.f3.len(),
            self.c_bc.len(),
            self.p_bc.len(),
        ]
    }

    pub fn validate(&self, cfg: &ProblemConfig) -> Result<()> {
        let lo = cfg.p_out.min(cfg.p_in);
        let hi = cfg.p_out.max(cfg.p_in);
        for (name, set) in [("f1", &self.f1), ("f2", &self.f2), ("f3", &self.f3)] {
            if let Some(&(x, t)) = set.iter().find(|&&(x, t)| !cfg.contains(x, t)) {
                return Err(Error::config(
                    name,
                    format!("point ({x}, {t}) outside the domain"),
                ));
            }
        }
        for b in &self.c_bc {
            if !cfg.contains(b.x, b.t) || !(0.0..=1.0).contains(&b.target) {
                return Err(Error::config(
                    "c_bc",
                    format!("invalid boundary point {b:?}"),
                ));
            }
        }
        for b in &self.p_bc {
            if !cfg.contains(b.x, b.t) || !(lo..=hi).contains(&b.target) {
                return Err(Error::config(
                    "p_bc",
                    format!("invalid boundary point {b:?}"),
                ));
            }
        }
        for w in &self.v_bc {
            if !cfg.contains(w.x, w.t) {
                return Err(Error::config("v_bc", format!("invalid wall point {w:?}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    b
                } else {
                    a + (b - a) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryResiduals {
    pub r_c: Vec<f64>,
    pub r_p: Vec<f64>,
    pub r_v: Vec<f64>,
}

pub fn boundary_residuals(triple: &FieldTriple, sets: &PointSets) -> BoundaryResiduals {
    let pts = |b: &[BoundaryPoint]| b.iter().map(|b| (b.x, b.t)).collect::<Vec<_>>();
    let c = triple.c_net.samples(&pts(&sets.c_bc));
    let p = triple.p_net.samples(&pts(&sets.p_bc));
    let wall: Vec<_> = sets.v_bc.iter().map(|w| (w.x, w.t)).collect();
    let v = triple.v_net.samples(&wall);
    BoundaryResiduals {
        r_c: c
            .iter()
            .zip(&sets.c_bc)
            .map(|(s, b)| s.value - b.target)
            .collect(),
        r_p: p
            .iter()
            .zip(&sets.p_bc)
            .map(|(s, b)| s.value - b.target)
            .collect(),
        r_v: v
            .iter()
            .zip(&sets.v_bc)
            .map(|(s, w)| s.value * w.normal)
            .collect(),
    }
}

/// Unweighted mean squared residual of every cost term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostComponents {
    pub cost_v: f64,
    pub cost_c: f64,
    pub cost_p: f64,
    pub cost_f1: f64,
    pub cost_f2: f64,
    pub cost_f3: f64,
}

impl CostComponents {
    pub fn weighted_total(&self, w: &CostWeights) -> f64 {
        w.lambda_v * self.cost_v
            + w.lambda_c * self.cost_c
            + w.lambda_p * self.cost_p
            + w.lambda_1 * self.cost_f1
            + w.lambda_2 * self.cost_f2
            + w.lambda_3 * self.cost_f3
    }
}

pub fn assemble_cost(
    triple: &FieldTriple,
    sets: &PointSets,
    weights: &CostWeights,
    cfg: &ProblemConfig,
) -> Result<(f64, CostComponents)> {
    let eval = CostEvaluator::new(sets, *weights, *cfg)?;
    let comps = eval.components(triple);
    Ok((comps.weighted_total(weights), comps))
}

const IN_F1: u8 = 1;
const IN_F2: u8 = 2;
const IN_F3: u8 = 4;

/// Precomputed evaluation plan for one set of collocation and boundary
/// points. PDE points shared by several residual sets are evaluated once,
/// and each network only sees the points its terms depend on.
#[derive(Debug, Clone)]
pub struct CostEvaluator {
    cfg: ProblemConfig,
    weights: CostWeights,
    union: Vec<(f64, f64)>,
    flags: Vec<u8>,
    counts: [usize; 3],
    v_points: Vec<(f64, f64)>,
    c_points: Vec<(f64, f64)>,
    p_points: Vec<(f64, f64)>,
    /// Position of each union point in `c_points` / `p_points`.
    c_slot: Vec<usize>,
    p_slot: Vec<usize>,
    c_bc: Vec<BoundaryPoint>,
    p_bc: Vec<BoundaryPoint>,
    v_bc: Vec<WallPoint>,
}

impl CostEvaluator {
    pub fn new(sets: &PointSets, weights: CostWeights, cfg: ProblemConfig) -> Result<Self> {
        weights.validate()?;
        for (key, len, w) in [
            ("f1", sets.f1.len(), weights.lambda_1),
            ("f2", sets.f2.len(), weights.lambda_2),
            ("f3", sets.f3.len(), weights.lambda_3),
            ("c_bc", sets.c_bc.len(), weights.lambda_c),
            ("p_bc", sets.p_bc.len(), weights.lambda_p),
        ] {
            if len == 0 && w != 0.0 {
                return Err(Error::config(
                    key,
                    "point set is empty but its weight is nonzero",
                ));
            }
        }

        let mut index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut union = Vec::new();
        let mut flags: Vec<u8> = Vec::new();
        for (set, flag) in [(&sets.f1, IN_F1), (&sets.f2, IN_F2), (&sets.f3, IN_F3)] {
            for &(x, t) in set {
                let slot = *index.entry((x.to_bits(), t.to_bits())).or_insert_with(|| {
                    union.push((x, t));
                    flags.push(0);
                    union.len() - 1
                });
                flags[slot] |= flag;
            }
        }
        // Repeated points inside one set collapse into one union slot, so the
        // per-set means run over distinct members.
        let mut counts = [0usize; 3];
        for f in &flags {
            for (k, n) in counts.iter_mut().enumerate() {
                *n += usize::from(f & (1 << k) != 0);
            }
        }

        let mut c_points = Vec::new();
        let mut p_points = Vec::new();
        let mut c_slot = vec![usize::MAX; union.len()];
        let mut p_slot = vec![usize::MAX; union.len()];
        for (i, (&pt, &f)) in union.iter().zip(&flags).enumerate() {
            if f & (IN_F1 | IN_F2) != 0 {
                c_slot[i] = c_points.len();
                c_points.push(pt);
            }
            if f & IN_F2 != 0 {
                p_slot[i] = p_points.len();
                p_points.push(pt);
            }
        }
        c_points.extend(sets.c_bc.iter().map(|b| (b.x, b.t)));
        p_points.extend(sets.p_bc.iter().map(|b| (b.x, b.t)));
        let mut v_points = union.clone();
        v_points.extend(sets.v_bc.iter().map(|w| (w.x, w.t)));

        Ok(CostEvaluator {
            cfg,
            weights,
            union,
            flags,
            counts,
            v_points,
            c_points,
            p_points,
            c_slot,
            p_slot,
            c_bc: sets.c_bc.clone(),
            p_bc: sets.p_bc.clone(),
            v_bc: sets.v_bc.clone(),
        })
    }

    pub fn cfg(&self) -> &ProblemConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn components(&self, triple: &FieldTriple) -> CostComponents {
        let tapes = self.tapes(triple);
        self.accumulate(&tapes, None)
    }

    pub fn total(&self, triple: &FieldTriple) -> f64 {
        self.components(triple).weighted_total(&self.weights)
    }

    /// Weighted total, its components, and the gradient w.r.t. the flat
    /// `[v | p | c]` parameter array.
    pub fn value_and_gradient(
        &self,
        triple: &FieldTriple,
        grad: &mut [f64],
    ) -> Result<(f64, CostComponents)> {
        let tapes = self.tapes(triple);
        let mut adj = Adjoints {
            v: vec![FieldSample::ZERO; self.v_points.len()],
            p: vec![FieldSample::ZERO; self.p_points.len()],
            c: vec![FieldSample::ZERO; self.c_points.len()],
        };
        let comps = self.accumulate(&tapes, Some(&mut adj));
        let total = comps.weighted_total(&self.weights);
        if !total.is_finite() {
            return Err(Error::Numerical(format!("cost evaluated to {total}")));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let nv = triple.v_net.num_params();
        let np = triple.p_net.num_params();
        tapes.v.backward(&triple.v_net, &adj.v, &mut grad[..nv]);
        tapes
            .p
            .backward(&triple.p_net, &adj.p, &mut grad[nv..nv + np]);
        tapes
            .c
            .backward(&triple.c_net, &adj.c, &mut grad[nv + np..]);
        Ok((total, comps))
    }

    fn tapes(&self, triple: &FieldTriple) -> Tapes {
        Tapes {
            v: triple.v_net.tape(&self.v_points),
            p: triple.p_net.tape(&self.p_points),
            c: triple.c_net.tape(&self.c_points),
        }
    }

    fn accumulate(&self, tapes: &Tapes, mut adj: Option<&mut Adjoints>) -> CostComponents {
        let cfg = &self.cfg;
        let w = &self.weights;
        let mean = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let (m1, m2, m3) = (
            mean(self.counts[0]),
            mean(self.counts[1]),
            mean(self.counts[2]),
        );
        let mut comps = CostComponents::default();

        for (i, &flag) in self.flags.iter().enumerate() {
            let v = tapes.v.sample(0, i);
            if flag & IN_F3 != 0 {
                let f3 = v.d_dx;
                comps.cost_f3 += f3 * f3 * m3;
                if let Some(a) = adj.as_deref_mut() {
                    a.v[i].d_dx += 2.0 * w.lambda_3 * m3 * f3;
                }
            }
            if flag & (IN_F1 | IN_F2) == 0 {
                continue;
            }
            let ci = self.c_slot[i];
            let c = tapes.c.sample(0, ci);
            if flag & IN_F1 != 0 {
                let f1 = c.d_dt + v.value * c.d_dx;
                comps.cost_f1 += f1 * f1 * m1;
                if let Some(a) = adj.as_deref_mut() {
                    let g = 2.0 * w.lambda_1 * m1 * f1;
                    a.c[ci].d_dt += g;
                    a.c[ci].d_dx += g * v.value;
                    a.v[i].value += g * c.d_dx;
                }
            }
            if flag & IN_F2 != 0 {
                let pi = self.p_slot[i];
                let p = tapes.p.sample(0, pi);
                let mu = mixed_viscosity(c.value, cfg);
                let mobility = cfg.k / mu;
                let f2 = v.value + mobility * p.d_dx;
                comps.cost_f2 += f2 * f2 * m2;
                if let Some(a) = adj.as_deref_mut() {
                    let g = 2.0 * w.lambda_2 * m2 * f2;
                    a.v[i].value += g;
                    a.p[pi].d_dx += g * mobility;
                    // d(k/mu)/dc = -k (mu2 - mu1) / mu^2
                    a.c[ci].value -= g * mobility / mu * (cfg.mu2 - cfg.mu1) * p.d_dx;
                }
            }
        }

        let c_off = self.c_points.len() - self.c_bc.len();
        let mc = mean(self.c_bc.len());
        for (j, b) in self.c_bc.iter().enumerate() {
            let r = tapes.c.sample(0, c_off + j).value - b.target;
            comps.cost_c += r * r * mc;
            if let Some(a) = adj.as_deref_mut() {
                a.c[c_off + j].value += 2.0 * w.lambda_c * mc * r;
            }
        }
        let p_off = self.p_points.len() - self.p_bc.len();
        let mp = mean(self.p_bc.len());
        for (j, b) in self.p_bc.iter().enumerate() {
            let r = tapes.p.sample(0, p_off + j).value - b.target;
            comps.cost_p += r * r * mp;
            if let Some(a) = adj.as_deref_mut() {
                a.p[p_off + j].value += 2.0 * w.lambda_p * mp * r;
            }
        }
        let v_off = self.union.len();
        let mv = mean(self.v_bc.len());
        for (j, wall) in self.v_bc.iter().enumerate() {
            let r = tapes.v.sample(0, v_off + j).value * wall.normal;
            comps.cost_v += r * r * mv;
            if let Some(a) = adj.as_deref_mut() {
                a.v[v_off + j].value += 2.0 * w.lambda_v * mv * r * wall.normal;
            }
        }
        comps
    }
}

struct Tapes {
    v: Tape,
    p: Tape,
    c: Tape,
}

struct Adjoints {
    v: Vec<FieldSample>,
    p: Vec<FieldSample>,
    c: Vec<FieldSample>,
}
