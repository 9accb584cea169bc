//! Executable checks of the mixing-mass bound and the susceptibility lower
//! bound on instances whose assumptions are verified rather than assumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const Z95: f64 = 1.959_963_984_540_054;

/// Deterministic pairwise summation.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let total = pairwise_sum(p);
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("not a distribution (sum {total})")));
    }
    Ok(())
}

pub fn inverse_simpson(p: &[f64]) -> f64 {
    1.0 / p.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingInstance {
    pub p: Vec<f64>,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingCheck {
    pub neff: f64,
    /// `min over |S| <= m of Pr[C not in S]`.
    pub worst_actual: f64,
    pub bound: f64,
    pub holds: bool,
}

/// The minimising subset holds the `m` largest masses.
pub fn mixing_bound_check(inst: &MixingInstance) -> Result<MixingCheck> {
    if inst.m == 0 {
        return Err(Error::Contract("subset budget m must be positive".into()));
    }
    check_distribution(&inst.p)?;
    let mut sorted = inst.p.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = pairwise_sum(&sorted[..inst.m.min(sorted.len())]);
    let neff = inverse_simpson(&inst.p);
    let worst_actual = (1.0 - top).max(0.0);
    let bound = 1.0 - (inst.m as f64 / neff).sqrt();
    Ok(MixingCheck { neff, worst_actual, bound, holds: worst_actual >= bound - 1e-12 })
}

/// Brute-force minimum of `Pr[C not in S]` over all subsets of size at most
/// `m`; exponential, for cross-checking small cases.
pub fn exhaustive_worst(p: &[f64], m: usize) -> f64 {
    let c = p.len();
    assert!(c <= 20, "exhaustive search limited to 20 compositions");
    let mut best: f64 = 1.0;
    for mask in 0u32..(1 << c) {
        if mask.count_ones() as usize <= m {
            let inside: f64 = (0..c).filter(|&i| mask >> i & 1 == 1).map(|i| p[i]).sum();
            best = best.min(1.0 - inside);
        }
    }
    best.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingSweep {
    pub instances: usize,
    pub violations: usize,
    /// Smallest `worst_actual - bound` seen.
    pub min_margin: f64,
}

/// Random Dirichlet distributions (support 2..=64, concentration in
/// `[0.05, 5]`) checked at every budget in `ms`.
pub fn mixing_bound_sweep(draws: usize, ms: &[usize], seed: u64) -> Result<MixingSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MixingSweep { instances: 0, violations: 0, min_margin: f64::INFINITY };
    for _ in 0..draws {
        let c = rng.gen_range(2..=64);
        let alpha = rng.gen_range(0.05..5.0);
        let dir = Dirichlet::new(&vec![alpha; c]).map_err(|e| Error::Numeric(format!("dirichlet: {e}")))?;
        let mut p: Vec<f64> = dir.sample(&mut rng);
        let s = pairwise_sum(&p);
        p.iter_mut().for_each(|v| *v /= s);
        for &m in ms {
            let r = mixing_bound_check(&MixingInstance { p: p.clone(), m })?;
            out.instances += 1;
            out.min_margin = out.min_margin.min(r.worst_actual - r.bound);
            if !r.holds {
                out.violations += 1;
            }
        }
    }
    Ok(out)
}

/// How update directions are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Directions {
    Isotropic,
    /// `normalise(toward + spread * z)` with `z` standard normal.
    Tilted { toward: Vec<f64>, spread: f64 },
}

impl Directions {
    fn sample<R: Rng>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        loop {
            let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = match self {
                Directions::Isotropic => z,
                Directions::Tilted { toward, spread } => toward.iter().zip(&z).map(|(t, z)| t + spread * z).collect(),
            };
            let n = norm(&v);
            if n > 1e-12 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Route objective `F_r = sum_c p_c F_c` with quadratic `F_c(theta) =
/// |theta - optimum_c|^2 / 2`, so every `F_c` is 1-smooth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityInstance {
    pub theta: Vec<f64>,
    pub optima: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    /// Indices of the protected compositions `S`.
    pub protected: Vec<usize>,
    pub m: usize,
    pub eta: f64,
    pub g: f64,
    pub directions: Directions,
}

pub const SMOOTHNESS: f64 = 1.0;

impl SusceptibilityInstance {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn neff(&self) -> f64 {
        inverse_simpson(&self.p)
    }

    /// `Delta_c = F_c(theta - eta u) - F_c(theta)` in closed form.
    pub fn delta(&self, c: usize, u: &[f64]) -> f64 {
        let grad: Vec<f64> = self.theta.iter().zip(&self.optima[c]).map(|(t, o)| t - o).collect();
        -self.eta * dot(&grad, u) + SMOOTHNESS * self.eta * self.eta / 2.0
    }

    pub fn route_delta(&self, u: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.p.len()).map(|c| self.p[c] * self.delta(c, u)).collect();
        pairwise_sum(&terms)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("instance serialises");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Structural assumptions: shapes, distribution, `|S| <= m`, `eta > 0`,
    /// and the gradient bound at the evaluation point.
    pub fn verify(&self) -> Result<()> {
        check_distribution(&self.p)?;
        if self.optima.len() != self.p.len() || self.optima.iter().any(|o| o.len() != self.dim()) {
            return Err(Error::Rejected("optima do not match the distribution or dimension".into()));
        }
        if self.protected.len() > self.m || self.protected.iter().any(|&c| c >= self.p.len()) {
            return Err(Error::Rejected(format!("protected set of {} exceeds m = {} or is out of range", self.protected.len(), self.m)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Rejected("step size must be positive".into()));
        }
        if let Directions::Tilted { toward, .. } = &self.directions {
            if toward.len() != self.dim() {
                return Err(Error::Rejected("tilt direction has the wrong dimension".into()));
            }
        }
        for (c, o) in self.optima.iter().enumerate() {
            let gn = norm(&self.theta.iter().zip(o).map(|(t, o)| t - o).collect::<Vec<_>>());
            if gn > self.g + 1e-12 {
                return Err(Error::Rejected(format!("gradient norm {gn:.4} of composition {c} exceeds G = {}", self.g)));
            }
        }
        Ok(())
    }

    fn unprotected(&self) -> Vec<usize> {
        (0..self.p.len()).filter(|c| !self.protected.contains(c)).collect()
    }
}

/// Measured tail parameters: `Pr(Delta_c >= kappa) >= rho` for every
/// unprotected composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub rho: f64,
    pub kappa: f64,
    pub draws: usize,
    /// Smallest estimated `E[Delta_c]` over protected compositions.
    pub protected_min_mean: f64,
}

/// `kappa` is the smallest `(1 - target_rho)`-quantile of `Delta_c` over the
/// unprotected compositions; `rho` is then the measured minimum tail
/// frequency at that `kappa`.
///
/// Also estimates `E[Delta_c]` on the protected set. The step that drops
/// protected terms from the mixture needs those expectations nonnegative, so
/// an instance whose protected compositions gain on average is rejected.
pub fn measure_tail(inst: &SusceptibilityInstance, draws: usize, target_rho: f64, seed: u64) -> Result<TailEstimate> {
    inst.verify()?;
    if draws == 0 || !(0.0..1.0).contains(&(1.0 - target_rho)) {
        return Err(Error::Contract("need draws > 0 and target rho in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outside = inst.unprotected();
    let mut deltas = vec![Vec::with_capacity(draws); inst.p.len()];
    for _ in 0..draws {
        let u = inst.directions.sample(inst.dim(), &mut rng);
        for (c, d) in deltas.iter_mut().enumerate() {
            d.push(inst.delta(c, &u));
        }
    }
    let q = ((1.0 - target_rho) * draws as f64).floor() as usize;
    let kappa = outside
        .iter()
        .map(|&c| {
            let mut d = deltas[c].clone();
            d.sort_by(f64::total_cmp);
            d[q.min(draws - 1)]
        })
        .fold(f64::INFINITY, f64::min);
    if outside.is_empty() {
        return Err(Error::Rejected("every composition is protected".into()));
    }
    if !(kappa > 0.0) {
        return Err(Error::Rejected(format!("measured kappa {kappa:.4} is not positive")));
    }
    let rho = outside
        .iter()
        .map(|&c| deltas[c].iter().filter(|&&d| d >= kappa).count() as f64 / draws as f64)
        .fold(1.0, f64::min);
    let protected_min_mean = inst
        .protected
        .iter()
        .map(|&c| pairwise_sum(&deltas[c]) / draws as f64)
        .fold(f64::INFINITY, f64::min);
    if protected_min_mean < 0.0 {
        return Err(Error::Rejected(format!("protected composition has mean change {protected_min_mean:.4} < 0")));
    }
    Ok(TailEstimate { rho, kappa, draws, protected_min_mean })
}

/// `(1 - a)_+ (rho kappa - (1 - rho)(eta G + L eta^2 / 2))`, `a = sqrt(m / N_eff)`.
pub fn susceptibility_rhs(neff: f64, m: usize, tail: &TailEstimate, eta: f64, g: f64) -> f64 {
    let a = (m as f64 / neff).sqrt();
    let b = tail.rho * tail.kappa - (1.0 - tail.rho) * (eta * g + SMOOTHNESS * eta * eta / 2.0);
    (1.0 - a).max(0.0) * b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityCheck {
    pub instance: String,
    pub neff: f64,
    pub trials: usize,
    pub lhs: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub rhs: f64,
    pub holds_within_ci: bool,
}

/// Monte-Carlo estimate of `E[F_r(theta+) - F_r(theta)]` with a 95% normal
/// interval. Holds when the lower end is at least `rhs - slack`.
pub fn susceptibility_simulate(inst: &SusceptibilityInstance, tail: &TailEstimate, trials: usize, seed: u64, slack: f64) -> Result<SusceptibilityCheck> {
    inst.verify()?;
    if trials < 2 {
        return Err(Error::Contract("need at least two trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..trials).map(|_| inst.route_delta(&inst.directions.sample(inst.dim(), &mut rng))).collect();
    let n = trials as f64;
    let lhs = pairwise_sum(&samples) / n;
    let sq: Vec<f64> = samples.iter().map(|x| (x - lhs) * (x - lhs)).collect();
    let se = (pairwise_sum(&sq) / (n - 1.0) / n).sqrt();
    let rhs = susceptibility_rhs(inst.neff(), inst.m, tail, inst.eta, inst.g);
    let ci_low = lhs - Z95 * se;
    Ok(SusceptibilityCheck {
        instance: inst.hash(),
        neff: inst.neff(),
        trials,
        lhs,
        ci_low,
        ci_high: lhs + Z95 * se,
        rhs,
        holds_within_ci: ci_low >= rhs - slack,
    })
}

/// Designed family sharing one pool of compositions. Protected optima sit at
/// radius `0.3` along axes orthogonal to the tilt, so updates leave them
/// unharmed on average; unprotected optima lie on the unit sphere in a cap
/// around the tilt direction, the side the step moves away from. The
/// instance with `n` compositions takes the first `n - m` unprotected ones,
/// uniform `p`, so `N_eff = n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignedFamily {
    pub dim: usize,
    pub m: usize,
    pub eta: f64,
    pub protected: Vec<Vec<f64>>,
    pub pool: Vec<Vec<f64>>,
    pub spread: f64,
}

impl DesignedFamily {
    pub fn new(max_n: usize, m: usize, seed: u64) -> Result<Self> {
        let dim = 8;
        if m == 0 || m >= dim || max_n <= m {
            return Err(Error::Contract(format!("family needs 0 < m < {dim} and more than m compositions")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protected = (0..m)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[1 + i] = 0.3;
                v
            })
            .collect();
        let pool = (0..max_n - m)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|j| if j == 0 { 1.0 } else { 0.0 } + 0.15 * rng.sample::<f64, _>(StandardNormal)).collect();
                let n = norm(&v);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        Ok(Self { dim, m, eta: 0.1, protected, pool, spread: 0.3 })
    }

    fn toward(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.dim];
        t[0] = 1.0;
        t
    }

    pub fn instance(&self, n: usize) -> Result<SusceptibilityInstance> {
        if n <= self.m || n - self.m > self.pool.len() {
            return Err(Error::Contract(format!("family supports {} < n <= {}", self.m, self.m + self.pool.len())));
        }
        let mut optima = self.protected.clone();
        optima.extend(self.pool[..n - self.m].iter().cloned());
        Ok(SusceptibilityInstance {
            theta: vec![0.0; self.dim],
            optima,
            p: vec![1.0 / n as f64; n],
            protected: (0..self.m).collect(),
            m: self.m,
            eta: self.eta,
            g: 1.0,
            directions: Directions::Tilted { toward: self.toward(), spread: self.spread },
        })
    }

    /// The largest member; its unprotected set contains every smaller
    /// member's, so its tail estimate is valid for the whole family.
    pub fn full(&self) -> Result<SusceptibilityInstance> {
        self.instance(self.m + self.pool.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySweep {
    pub tail: TailEstimate,
    pub checks: Vec<SusceptibilityCheck>,
    pub rhs_nondecreasing: bool,
    pub all_hold: bool,
}

pub fn susceptibility_family(neffs: &[usize], trials: usize, tail_draws: usize, seed: u64) -> Result<FamilySweep> {
    let max_n = *neffs.iter().max().ok_or_else(|| Error::Contract("empty sweep".into()))?;
    let family = DesignedFamily::new(max_n, 2, seed)?;
    let full = family.full()?;
    let tail = measure_tail(&full, tail_draws, 0.9, seed ^ 1)?;
    let per_term = tail.rho * tail.kappa - (1.0 - tail.rho) * (full.eta * full.g + SMOOTHNESS * full.eta * full.eta / 2.0);
    if !(per_term > 0.0) {
        return Err(Error::Rejected(format!("tail too light for a positive bound (rho kappa margin {per_term:.4})")));
    }
    let mut sorted = neffs.to_vec();
    sorted.sort_unstable();
    let checks = sorted
        .iter()
        .enumerate()
        .map(|(i, &n)| susceptibility_simulate(&family.instance(n)?, &tail, trials, seed.wrapping_add(100 + i as u64), 0.0))
        .collect::<Result<Vec<_>>>()?;
    let rhs_nondecreasing = checks.windows(2).all(|w| w[1].rhs >= w[0].rhs);
    let all_hold = checks.iter().all(|c| c.holds_within_ci);
    Ok(FamilySweep { tail, checks, rhs_nondecreasing, all_hold })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStep {
    pub bound: f64,
    pub actual: f64,
}

/// Uniform one-step bound `Delta_c >= -eta G - L eta^2 / 2` for a quadratic.
pub fn one_step_uniform_lower_bound(theta: &[f64], optimum: &[f64], eta: f64, u: &[f64], g: f64) -> Result<OneStep> {
    if theta.len() != optimum.len() || u.len() != theta.len() {
        return Err(Error::Dimension("theta, optimum and direction differ in length".into()));
    }
    if (norm(u) - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("direction has norm {}, expected 1", norm(u))));
    }
    let grad: Vec<f64> = theta.iter().zip(optimum).map(|(t, o)| t - o).collect();
    if norm(&grad) > g + 1e-12 {
        return Err(Error::Rejected(format!("gradient norm {} exceeds G = {g}", norm(&grad))));
    }
    let actual = -eta * dot(&grad, u) + SMOOTHNESS * eta * eta / 2.0;
    let bound = -eta * g - SMOOTHNESS * eta * eta / 2.0;
    if actual < bound - 1e-12 {
        return Err(Error::Violation(format!("one-step change {actual} below bound {bound}")));
    }
    Ok(OneStep { bound, actual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub check: String,
    pub instance: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ci: Option<(f64, f64)>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub lines: Vec<ReportLine>,
}

impl TheoryReport {
    pub fn all_hold(&self) -> bool {
        self.lines.iter().all(|l| l.holds)
    }
}

/// Mixing-mass sweep, one-step sweep and the designed susceptibility family.
pub fn verify_all(trials: usize, seed: u64) -> Result<TheoryReport> {
    let mut lines = Vec::new();
    let sweep = mixing_bound_sweep(10_000, &[1, 2, 4], seed)?;
    lines.push(ReportLine {
        check: "mixing-mass-bound".into(),
        instance: format!("dirichlet-sweep-{}", sweep.instances),
        lhs: sweep.min_margin,
        rhs: 0.0,
        ci: None,
        holds: sweep.violations == 0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    let mut worst_gap = f64::INFINITY;
    for _ in 0..1000 {
        let dim = 8;
        let theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let optimum: Vec<f64> = theta.iter().map(|t| t + rng.gen_range(-0.3..0.3)).collect();
        let g = norm(&theta.iter().zip(&optimum).map(|(t, o)| t - o).collect::<Vec<_>>());
        let u = Directions::Isotropic.sample(dim, &mut rng);
        let r = one_step_uniform_lower_bound(&theta, &optimum, rng.gen_range(0.0..1.0), &u, g)?;
        worst_gap = worst_gap.min(r.actual - r.bound);
    }
    lines.push(ReportLine { check: "one-step-bound".into(), instance: "random-1000".into(), lhs: worst_gap, rhs: 0.0, ci: None, holds: worst_gap >= -1e-12 });
    let fam = susceptibility_family(&[4, 8, 16, 32], trials, 10_000, seed)?;
    for c in &fam.checks {
        lines.push(ReportLine {
            check: format!("susceptibility-bound-neff-{}", c.neff.round()),
            instance: c.instance.clone(),
            lhs: c.lhs,
            rhs: c.rhs,
            ci: Some((c.ci_low, c.ci_high)),
            holds: c.holds_within_ci,
        });
    }
    lines.push(ReportLine {
        check: "susceptibility-rhs-monotone".into(),
        instance: "designed-family".into(),
        lhs: fam.checks.last().map_or(0.0, |c| c.rhs),
        rhs: fam.checks.first().map_or(0.0, |c| c.rhs),
        ci: None,
        holds: fam.rhs_nondecreasing,
    });
    Ok(TheoryReport { lines })
}
