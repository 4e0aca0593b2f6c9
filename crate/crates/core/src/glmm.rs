//! Logistic regression with crossed subject and item random intercepts,
//! marginalized by the Laplace approximation.
//!
//! Random effects are written as `b = Λ u` with `u ~ N(0, I)` and
//! `Λ = diag(σ_u I, σ_v I)`. For fixed `(β, σ_u, σ_v)` the mode `û` of the
//! penalized log-density
//!
//! ```text
//! g(u) = Σ_r [y_r η_r − log(1 + e^{η_r})] − ½ uᵀu,   η = Xβ + ZΛu
//! ```
//!
//! is found by Newton's method, and the approximate marginal log-likelihood
//! is `g(û) − ½ log|H|` with `H = ΛZᵀWZΛ + I`. `H` has a diagonal subject
//! block, a diagonal item block and a dense subject×item coupling, so it is
//! factored by eliminating the larger diagonal block and taking a Cholesky
//! factor of the Schur complement on the smaller one.
//!
//! The outer problem over `(β, σ_u, σ_v)` is solved by BFGS with an
//! analytic gradient (including the implicit dependence of `û` and `W` on
//! the parameters), followed by Newton polishing on a finite-difference
//! Hessian of that gradient. The objective is even in each σ, so σ = 0 is
//! reached smoothly; a variance below `1e-8` is reported as a boundary
//! estimate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::design::ModelFrame;
use crate::error::{Error, Result};
use crate::glm::{fit_irls, FitResult, VarianceComponents};
use crate::linalg::{self, inv_logit, log1p_exp, max_abs};

/// Variance-component seed values and the level counts they apply to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectsSpec {
    pub subject_levels: usize,
    pub item_levels: usize,
    pub sigma_u2: f64,
    pub sigma_v2: f64,
}

impl RandomEffectsSpec {
    pub fn for_frame(frame: &ModelFrame, sigma_u2: f64, sigma_v2: f64) -> Self {
        Self {
            subject_levels: frame.subjects.len(),
            item_levels: frame.items.len(),
            sigma_u2,
            sigma_v2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlmmOptions {
    pub max_outer: usize,
    /// Max-norm of the outer gradient on the (β, σ) scale.
    pub gradient_tol: f64,
    pub inner_tol: f64,
    /// Hold the variances at these values instead of estimating them.
    pub fixed_variances: Option<(f64, f64)>,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        Self {
            max_outer: 300,
            gradient_tol: 1e-5,
            inner_tol: 1e-10,
            fixed_variances: None,
        }
    }
}

const BOUNDARY_VARIANCE: f64 = 1e-8;

pub fn fit_glmm_laplace(frame: &ModelFrame, spec: &RandomEffectsSpec) -> Result<FitResult> {
    fit_glmm_laplace_with(frame, spec, GlmmOptions::default())
}

/// Factorization of `[[diag(a), C], [Cᵀ, diag(d)]]` through the Schur
/// complement `diag(d) − Cᵀ diag(a)⁻¹ C`.
struct ArrowFactor {
    a: Vec<f64>,
    /// `diag(a)⁻¹ C`
    ac: DMatrix<f64>,
    cross: DMatrix<f64>,
    schur: Cholesky<f64, Dyn>,
}

impl ArrowFactor {
    fn new(a: Vec<f64>, d: Vec<f64>, cross: DMatrix<f64>) -> Result<Self> {
        let n2 = d.len();
        let mut ac = cross.clone();
        for (j, aj) in a.iter().enumerate() {
            ac.row_mut(j).scale_mut(1.0 / aj);
        }
        let mut s = -(cross.tr_mul(&ac));
        for k in 0..n2 {
            s[(k, k)] += d[k];
        }
        let schur = linalg::cholesky(&linalg::symmetrize(&s), "random-effects Hessian")?;
        Ok(Self { a, ac, cross, schur })
    }

    fn log_det(&self) -> f64 {
        let l = self.schur.l_dirty();
        self.a.iter().map(|v| v.ln()).sum::<f64>() + 2.0 * (0..l.nrows()).map(|k| l[(k, k)].ln()).sum::<f64>()
    }

    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let ainv_r1 = DVector::from_iterator(r1.len(), r1.iter().zip(&self.a).map(|(r, a)| r / a));
        let x2 = self.schur.solve(&(r2 - self.cross.tr_mul(&ainv_r1)));
        let x1 = ainv_r1 - &self.ac * &x2;
        (x1, x2)
    }

    /// Diagonal of the first block of `H⁻¹`, the full second block and the
    /// full off-diagonal block.
    fn inverse_blocks(&self) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
        let s_inv = self.schur.inverse();
        let p = &self.ac * &s_inv;
        let diag1 = (0..self.a.len())
            .map(|j| 1.0 / self.a[j] + p.row(j).dot(&self.ac.row(j)))
            .collect();
        (diag1, s_inv, -p)
    }
}

/// Row → (subject, item) bookkeeping and aggregation helpers.
struct Layout {
    n_s: usize,
    n_i: usize,
    /// Per cluster: subject, item, row range.
    pairs: Vec<(usize, usize, std::ops::Range<usize>)>,
    subjects_first: bool,
}

impl Layout {
    fn new(frame: &ModelFrame) -> Self {
        let n_s = frame.subjects.len();
        let n_i = frame.items.len();
        Self {
            n_s,
            n_i,
            pairs: frame
                .clusters
                .iter()
                .map(|c| (c.subject, c.item, c.rows.clone()))
                .collect(),
            subjects_first: n_s >= n_i,
        }
    }

    fn dim(&self) -> usize {
        self.n_s + self.n_i
    }

    /// Splits a (subjects ++ items) vector into (first, second) blocks.
    fn split(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let s = v.rows(0, self.n_s).into_owned();
        let i = v.rows(self.n_s, self.n_i).into_owned();
        if self.subjects_first {
            (s, i)
        } else {
            (i, s)
        }
    }

    fn join(&self, first: DVector<f64>, second: DVector<f64>) -> DVector<f64> {
        let (s, i) = if self.subjects_first {
            (first, second)
        } else {
            (second, first)
        };
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.n_s).copy_from(&s);
        out.rows_mut(self.n_s, self.n_i).copy_from(&i);
        out
    }
}

/// Quantities at the inner mode for one parameter value.
struct ModeState {
    u: DVector<f64>,
    p: Vec<f64>,
    value: f64,
    factor: ArrowFactor,
    /// Per-pair Σ w
    pair_w: Vec<f64>,
}

struct Laplace<'a> {
    frame: &'a ModelFrame,
    layout: Layout,
    inner_tol: f64,
    warm: DVector<f64>,
}

/// Outer objective value and gradient with respect to (β, σ_u, σ_v).
struct Evaluation {
    value: f64,
    gradient: DVector<f64>,
    u: DVector<f64>,
}

impl<'a> Laplace<'a> {
    fn new(frame: &'a ModelFrame, inner_tol: f64) -> Self {
        let layout = Layout::new(frame);
        let warm = DVector::zeros(layout.dim());
        Self {
            frame,
            layout,
            inner_tol,
            warm,
        }
    }

    fn eta(&self, xb: &DVector<f64>, su: f64, sv: f64, u: &DVector<f64>, out: &mut [f64]) {
        let ns = self.layout.n_s;
        for (s, i, rows) in &self.layout.pairs {
            let shift = su * u[*s] + sv * u[ns + *i];
            for r in rows.clone() {
                out[r] = xb[r] + shift;
            }
        }
    }

    fn penalized(&self, eta: &[f64], u: &DVector<f64>) -> f64 {
        let y = &self.frame.response;
        eta.iter().zip(y).map(|(&e, &yi)| yi * e - log1p_exp(e)).sum::<f64>() - 0.5 * u.norm_squared()
    }

    fn factor(&self, su: f64, sv: f64, pair_w: &[f64]) -> Result<ArrowFactor> {
        let l = &self.layout;
        let mut ws = vec![0.0; l.n_s];
        let mut wi = vec![0.0; l.n_i];
        let mut cross_si = DMatrix::<f64>::zeros(l.n_s, l.n_i);
        for (k, (s, i, _)) in l.pairs.iter().enumerate() {
            ws[*s] += pair_w[k];
            wi[*i] += pair_w[k];
            cross_si[(*s, *i)] += su * sv * pair_w[k];
        }
        let a_s: Vec<f64> = ws.iter().map(|w| su * su * w + 1.0).collect();
        let a_i: Vec<f64> = wi.iter().map(|w| sv * sv * w + 1.0).collect();
        if l.subjects_first {
            ArrowFactor::new(a_s, a_i, cross_si)
        } else {
            ArrowFactor::new(a_i, a_s, cross_si.transpose())
        }
    }

    fn mode(&mut self, beta: &DVector<f64>, su: f64, sv: f64) -> Result<ModeState> {
        let n = self.frame.n_rows();
        let ns = self.layout.n_s;
        let xb = &self.frame.design * beta;
        let y = &self.frame.response;
        let mut u = self.warm.clone();
        let mut eta = vec![0.0; n];
        self.eta(&xb, su, sv, &u, &mut eta);
        let mut value = self.penalized(&eta, &u);
        for _ in 0..200 {
            let mut p = vec![0.0; n];
            let mut pair_w = vec![0.0; self.layout.pairs.len()];
            let mut grad = -u.clone();
            for (k, (s, i, rows)) in self.layout.pairs.iter().enumerate() {
                let mut res = 0.0;
                for r in rows.clone() {
                    let pr = inv_logit(eta[r]);
                    p[r] = pr;
                    res += y[r] - pr;
                    pair_w[k] += pr * (1.0 - pr);
                }
                grad[*s] += su * res;
                grad[ns + *i] += sv * res;
            }
            let factor = self.factor(su, sv, &pair_w)?;
            if max_abs(&grad) < self.inner_tol {
                self.warm = u.clone();
                return Ok(ModeState {
                    u,
                    p,
                    value,
                    factor,
                    pair_w,
                });
            }
            let (g1, g2) = self.layout.split(&grad);
            let (d1, d2) = factor.solve(&g1, &g2);
            let delta = self.layout.join(d1, d2);
            let mut step = 1.0;
            loop {
                let cand = &u + &delta * step;
                self.eta(&xb, su, sv, &cand, &mut eta);
                let v = self.penalized(&eta, &cand);
                if v >= value - 1e-12 * value.abs() || step < 1e-8 {
                    u = cand;
                    value = v;
                    break;
                }
                step *= 0.5;
            }
        }
        Err(Error::NonConvergence {
            iterations: 200,
            detail: "inner Newton iteration for the random-effect mode".into(),
        })
    }

    /// Laplace log-likelihood and its gradient in (β, σ_u, σ_v).
    fn evaluate(&mut self, beta: &DVector<f64>, su: f64, sv: f64) -> Result<Evaluation> {
        let frame = self.frame;
        let x = &frame.design;
        let y = &frame.response;
        let q = x.ncols();
        let (ns, ni) = (self.layout.n_s, self.layout.n_i);
        let st = self.mode(beta, su, sv)?;
        let value = st.value - 0.5 * st.factor.log_det();

        let (diag1, inv2, inv12) = st.factor.inverse_blocks();
        // H⁻¹ entries in subject/item coordinates
        let h_ss = |s: usize| {
            if self.layout.subjects_first {
                diag1[s]
            } else {
                inv2[(s, s)]
            }
        };
        let h_ii = |i: usize| {
            if self.layout.subjects_first {
                inv2[(i, i)]
            } else {
                diag1[i]
            }
        };
        let h_si = |s: usize, i: usize| {
            if self.layout.subjects_first {
                inv12[(s, i)]
            } else {
                inv12[(i, s)]
            }
        };

        let mut e = DVector::<f64>::zeros(ns + ni);
        let mut wsum = DVector::<f64>::zeros(ns + ni);
        let mut csum = DVector::<f64>::zeros(ns + ni);
        let mut xw = DMatrix::<f64>::zeros(ns + ni, q);
        let mut x_res = DVector::<f64>::zeros(q);
        let mut x_c = DVector::<f64>::zeros(q);
        let mut explicit_u = 0.0;
        let mut explicit_v = 0.0;
        let mut cross_u = DVector::<f64>::zeros(ns + ni);
        for (k, (s, i, rows)) in self.layout.pairs.iter().enumerate() {
            let (s, i) = (*s, *i);
            let lev = su * su * h_ss(s) + sv * sv * h_ii(i) + 2.0 * su * sv * h_si(s, i);
            let mut res = 0.0;
            let mut csum_pair = 0.0;
            for r in rows.clone() {
                let p = st.p[r];
                let w = p * (1.0 - p);
                let c = w * (1.0 - 2.0 * p) * lev;
                res += y[r] - p;
                csum_pair += c;
                for j in 0..q {
                    let xr = x[(r, j)];
                    xw[(s, j)] += w * xr;
                    xw[(ns + i, j)] += w * xr;
                    x_res[j] += (y[r] - p) * xr;
                    x_c[j] += c * xr;
                }
            }
            let pw = st.pair_w[k];
            e[s] += res;
            e[ns + i] += res;
            wsum[s] += pw;
            wsum[ns + i] += pw;
            csum[s] += csum_pair;
            csum[ns + i] += csum_pair;
            let hsi = h_si(s, i);
            explicit_u += 2.0 * sv * pw * hsi;
            explicit_v += 2.0 * su * pw * hsi;
            // Σ_p C0[p] u_other for the implicit σ derivatives
            cross_u[ns + i] += pw * st.u[s];
            cross_u[s] += pw * st.u[ns + i];
        }
        for s in 0..ns {
            explicit_u += 2.0 * su * wsum[s] * h_ss(s);
        }
        for i in 0..ni {
            explicit_v += 2.0 * sv * wsum[ns + i] * h_ii(i);
        }

        let mut gamma = DVector::<f64>::zeros(ns + ni);
        for s in 0..ns {
            gamma[s] = su * csum[s];
        }
        for i in 0..ni {
            gamma[ns + i] = sv * csum[ns + i];
        }
        let (g1, g2) = self.layout.split(&gamma);
        let (h1, h2) = st.factor.solve(&g1, &g2);
        let h = self.layout.join(h1, h2);

        let mut gradient = DVector::<f64>::zeros(q + 2);
        for j in 0..q {
            let mut dg = DVector::<f64>::zeros(ns + ni);
            for s in 0..ns {
                dg[s] = -su * xw[(s, j)];
            }
            for i in 0..ni {
                dg[ns + i] = -sv * xw[(ns + i, j)];
            }
            let term3 = x_c[j] + h.dot(&dg);
            gradient[j] = x_res[j] - 0.5 * term3;
        }
        {
            let mut dg = DVector::<f64>::zeros(ns + ni);
            for s in 0..ns {
                dg[s] = e[s] - su * wsum[s] * st.u[s];
            }
            for i in 0..ni {
                dg[ns + i] = -sv * cross_u[ns + i];
            }
            let us = st.u.rows(0, ns);
            let direct = us.dot(&e.rows(0, ns));
            let term3 = us.dot(&csum.rows(0, ns)) + h.dot(&dg);
            gradient[q] = direct - 0.5 * (explicit_u + term3);
        }
        {
            let mut dg = DVector::<f64>::zeros(ns + ni);
            for s in 0..ns {
                dg[s] = -su * cross_u[s];
            }
            for i in 0..ni {
                dg[ns + i] = e[ns + i] - sv * wsum[ns + i] * st.u[ns + i];
            }
            let ui = st.u.rows(ns, ni);
            let direct = ui.dot(&e.rows(ns, ni));
            let term3 = ui.dot(&csum.rows(ns, ni)) + h.dot(&dg);
            gradient[q + 1] = direct - 0.5 * (explicit_v + term3);
        }
        Ok(Evaluation {
            value,
            gradient,
            u: st.u,
        })
    }
}

/// Laplace-approximated marginal log-likelihood and its gradient with
/// respect to `(β, σ_u, σ_v)` (standard deviations, not log scale).
pub fn laplace_objective(frame: &ModelFrame, beta: &[f64], sigma_u: f64, sigma_v: f64) -> Result<(f64, Vec<f64>)> {
    let mut lp = Laplace::new(frame, 1e-12);
    let ev = lp.evaluate(&DVector::from_column_slice(beta), sigma_u, sigma_v)?;
    Ok((ev.value, ev.gradient.iter().copied().collect()))
}

/// Parameter vector on the optimizer scale: β then σ for each variance
/// that is estimated. The objective is even in each σ, so the optimizer may
/// cross zero freely and only σ² is reported.
struct Outer<'a, 'b> {
    lp: &'b mut Laplace<'a>,
    q: usize,
    /// Some(σ) when pinned, None when estimated on the log scale.
    pinned: [Option<f64>; 2],
    evaluations: usize,
}

impl Outer<'_, '_> {
    fn free_sigmas(&self) -> Vec<usize> {
        (0..2).filter(|&k| self.pinned[k].is_none()).collect()
    }

    fn sigmas(&self, theta: &DVector<f64>) -> [f64; 2] {
        let mut out = [0.0; 2];
        let mut pos = self.q;
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = match self.pinned[k] {
                Some(s) => s,
                None => {
                    pos += 1;
                    theta[pos - 1]
                }
            };
        }
        out
    }

    /// Negative Laplace log-likelihood and its gradient on the optimizer scale.
    fn eval(&mut self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.evaluations += 1;
        let beta = theta.rows(0, self.q).into_owned();
        let [su, sv] = self.sigmas(theta);
        let ev = self.lp.evaluate(&beta, su, sv)?;
        let mut g = DVector::zeros(theta.len());
        for j in 0..self.q {
            g[j] = -ev.gradient[j];
        }
        for (pos, k) in self.free_sigmas().into_iter().enumerate() {
            g[self.q + pos] = -ev.gradient[self.q + k];
        }
        Ok((-ev.value, g))
    }
}

fn bfgs(
    outer: &mut Outer,
    mut theta: DVector<f64>,
    h0: DMatrix<f64>,
    opts: &GlmmOptions,
    trace: &mut Vec<String>,
) -> Result<(DVector<f64>, bool)> {
    let (mut f, mut g) = outer.eval(&theta)?;
    let mut hinv = h0;
    for it in 0..opts.max_outer {
        if max_abs(&g) < opts.gradient_tol {
            return Ok((theta, true));
        }
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(theta.len(), theta.len()) * 1e-3;
            dir = -(&hinv * &g);
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &theta + &dir * step;
            match outer.eval(&cand) {
                Ok((fc, gc)) if fc.is_finite() && fc <= f + 1e-4 * step * slope => {
                    accepted = Some((cand, fc, gc));
                    break;
                }
                Ok(_) | Err(Error::Linalg(_)) | Err(Error::NonConvergence { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((cand, fc, gc)) = accepted else {
            trace.push(format!(
                "iteration {it}: line search failed at f = {f:.10}, |g| = {:.3e}",
                max_abs(&g)
            ));
            return Ok((theta, false));
        };
        let s = &cand - &theta;
        let yv = &gc - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let n = theta.len();
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * yv.transpose() * rho;
            let right = &eye - &yv * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        theta = cand;
        f = fc;
        g = gc;
        if trace.len() > 20 {
            trace.remove(0);
        }
        trace.push(format!("iteration {it}: f = {f:.10}, |g| = {:.3e}", max_abs(&g)));
    }
    Ok((theta, max_abs(&g) < opts.gradient_tol))
}

/// Central-difference Hessian of the optimizer-scale gradient.
fn hessian(outer: &mut Outer, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-4 * theta[j].abs().max(1.0);
        let mut plus = theta.clone();
        plus[j] += step;
        let mut minus = theta.clone();
        minus[j] -= step;
        let (_, gp) = outer.eval(&plus)?;
        let (_, gm) = outer.eval(&minus)?;
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Ok(linalg::symmetrize(&h))
}

pub fn fit_glmm_laplace_with(frame: &ModelFrame, spec: &RandomEffectsSpec, opts: GlmmOptions) -> Result<FitResult> {
    if frame.subjects.len() < 2 || frame.items.len() < 2 {
        return Err(Error::Domain(format!(
            "crossed random intercepts need at least 2 subjects and 2 items (got {} and {})",
            frame.subjects.len(),
            frame.items.len()
        )));
    }
    if spec.subject_levels != frame.subjects.len() || spec.item_levels != frame.items.len() {
        return Err(Error::Domain(
            "random-effects spec does not match the frame's levels".into(),
        ));
    }
    if !(spec.sigma_u2 >= 0.0 && spec.sigma_v2 >= 0.0) {
        return Err(Error::Domain("variance seeds must be nonnegative".into()));
    }
    let glm = fit_irls(frame)?;
    if opts.fixed_variances == Some((0.0, 0.0)) {
        return Ok(FitResult {
            variance_components: Some(VarianceComponents {
                subject: 0.0,
                item: 0.0,
                boundary: true,
            }),
            ..glm
        });
    }

    let q = frame.n_cols();
    let mut lp = Laplace::new(frame, opts.inner_tol);
    let pinned = match opts.fixed_variances {
        Some((a, b)) => {
            if !(a >= 0.0 && b >= 0.0) {
                return Err(Error::Domain("fixed variances must be nonnegative".into()));
            }
            [Some(a.sqrt()), Some(b.sqrt())]
        }
        None => [None, None],
    };
    let mut outer = Outer {
        lp: &mut lp,
        q,
        pinned,
        evaluations: 0,
    };
    let mut theta: Vec<f64> = glm.coefficients.clone();
    for (k, seed) in [spec.sigma_u2, spec.sigma_v2].into_iter().enumerate() {
        if outer.pinned[k].is_none() {
            // σ = 0 is always stationary, so never start there
            theta.push(seed.sqrt().max(0.1));
        }
    }
    let theta = DVector::from_vec(theta);
    let start_h = |outer: &Outer| {
        let n = q + outer.free_sigmas().len();
        let mut h = DMatrix::<f64>::identity(n, n) * 1e-2;
        h.view_mut((0, 0), (q, q)).copy_from(&glm.covariance_model);
        h
    };

    let mut trace = Vec::new();
    let h0 = start_h(&outer);
    let (t, converged) = bfgs(&mut outer, theta, h0, &opts, &mut trace)?;
    let mut theta = t;

    // Newton polish; also yields the Hessian for the covariance.
    let (mut f, mut g) = outer.eval(&theta)?;
    let mut hess = hessian(&mut outer, &theta)?;
    for _ in 0..8 {
        if max_abs(&g) < opts.gradient_tol * 1e-2 {
            break;
        }
        let Some(chol) = hess.clone().cholesky() else { break };
        let cand = &theta - chol.solve(&g);
        match outer.eval(&cand) {
            Ok((fc, gc)) if fc <= f + 1e-9 * f.abs() && max_abs(&gc) <= max_abs(&g) => {
                theta = cand;
                (f, g) = (fc, gc);
                hess = hessian(&mut outer, &theta)?;
            }
            _ => break,
        }
    }
    if max_abs(&g) >= opts.gradient_tol {
        return Err(Error::NonConvergence {
            iterations: outer.evaluations,
            detail: format!(
                "Laplace outer gradient max-norm {:.3e}; recent trace: {}",
                max_abs(&g),
                trace.join("; ")
            ),
        });
    }

    if !converged {
        log::debug!("BFGS stopped early; Newton polishing reached the gradient tolerance");
    }
    let [su, sv] = outer.sigmas(&theta);
    // A variance on the boundary has no usable curvature; leave it out.
    let keep: Vec<usize> = (0..q)
        .chain(
            outer
                .free_sigmas()
                .into_iter()
                .enumerate()
                .filter_map(|(pos, k)| ([su, sv][k].powi(2) >= BOUNDARY_VARIANCE).then_some(q + pos)),
        )
        .collect();
    let sub = hess.select_rows(&keep).select_columns(&keep);
    let cov_all = linalg::spd_inverse(&sub, "Laplace outer Hessian")?;
    let covariance = cov_all.view((0, 0), (q, q)).into_owned();
    let evaluations = outer.evaluations;
    let (su2, sv2) = (su * su, sv * sv);
    Ok(FitResult {
        names: frame.column_names.clone(),
        coefficients: theta.rows(0, q).iter().copied().collect(),
        covariance_model: covariance,
        covariance_robust: None,
        dispersion: None,
        correlation: None,
        variance_components: Some(VarianceComponents {
            subject: su2,
            item: sv2,
            boundary: su2 < BOUNDARY_VARIANCE || sv2 < BOUNDARY_VARIANCE,
        }),
        log_likelihood: Some(-f),
        iterations: evaluations,
        converged: true,
        gradient_norm: max_abs(&g),
    })
}

/// Conditional modes of the subject and item effects (`b = Λ û`) at the
/// given parameters.
pub fn random_effect_modes(
    frame: &ModelFrame,
    beta: &[f64],
    sigma_u2: f64,
    sigma_v2: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lp = Laplace::new(frame, 1e-10);
    let (su, sv) = (sigma_u2.sqrt(), sigma_v2.sqrt());
    let ev = lp.evaluate(&DVector::from_column_slice(beta), su, sv)?;
    let ns = frame.subjects.len();
    Ok((
        ev.u.rows(0, ns).iter().map(|u| su * u).collect(),
        ev.u.rows(ns, frame.items.len()).iter().map(|u| sv * u).collect(),
    ))
}
