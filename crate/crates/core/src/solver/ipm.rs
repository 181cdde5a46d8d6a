//! Primal-dual interior-point method for sparse nonlinear programs.
//!
//! Problems are posed in partially separable form: the objective is a sum
//! of small element functions and the constraints come in small blocks,
//! each touching only a handful of variables. All first and second
//! derivatives are taken per element with the forward AD types from
//! [`super::ad`], so the KKT system stays sparse and exact, and sparsity
//! is detected once per layout from the block structure.
//!
//! The algorithm is the standard one: slacks turn inequalities into
//! equalities, a log barrier keeps them interior, Newton steps on the
//! perturbed KKT conditions come from a symmetric quasi-definite system
//! (inertia-corrected LDL^T), a fraction-to-boundary rule protects
//! positivity, and an l1 merit function governs the backtracking line
//! search. When the line search stalls, a restoration phase minimizes the
//! squared constraint violation before the main loop resumes. The barrier
//! parameter decreases geometrically and everything is deterministic.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ad::{Dual, HDual, Scalar};
use super::ldl::{ldl_numeric, ldl_symbolic, LdlSymbolic, SymmetricCsc};
use crate::error::SolverError;

/// A variable slot of an element: either a solver unknown or a pinned
/// constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VarRef {
    Free(usize),
    Fixed(f64),
}

/// A nonlinear program in partially separable form. Inequalities are
/// `c(x) <= 0`. Element evaluation must stay within the smooth AD
/// primitives; branching on `.value()` is allowed.
pub trait SeparableNlp {
    fn num_vars(&self) -> usize;

    fn num_obj_elements(&self) -> usize;
    fn obj_vars(&self, e: usize) -> &[VarRef];
    fn eval_obj<T: Scalar>(&self, e: usize, local: &[T]) -> T;

    fn num_eq_blocks(&self) -> usize;
    fn eq_dim(&self, b: usize) -> usize;
    fn eq_vars(&self, b: usize) -> &[VarRef];
    fn eval_eq<T: Scalar>(&self, b: usize, local: &[T], out: &mut [T]);

    fn num_ineq_blocks(&self) -> usize;
    fn ineq_dim(&self, b: usize) -> usize;
    fn ineq_vars(&self, b: usize) -> &[VarRef];
    fn eval_ineq<T: Scalar>(&self, b: usize, local: &[T], out: &mut [T]);

    /// Ordering key used to interleave primal and dual unknowns in the KKT
    /// matrix (e.g. the time step of a trajectory variable). Defaults to
    /// the variable index.
    fn var_key(&self, v: usize) -> usize {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Exact,
    QuasiNewton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mu0: f64,
    pub mu_reduction: f64,
    pub kkt_tol: f64,
    pub max_iters: usize,
    pub backtrack_factor: f64,
    pub min_step: f64,
    /// Consecutive line-search failures before restoration triggers.
    pub restoration_trigger: usize,
    pub hessian_mode: HessianMode,
    /// Compare AD derivatives against central differences at the initial
    /// point and abort on mismatch.
    pub check_derivatives: bool,
    /// Write one CSV row per iteration to this path.
    pub debug_iteration_log: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mu0: 0.1,
            mu_reduction: 0.2,
            kkt_tol: 1e-6,
            max_iters: 100,
            backtrack_factor: 0.5,
            min_step: 1e-10,
            restoration_trigger: 1,
            hessian_mode: HessianMode::Exact,
            check_derivatives: false,
            debug_iteration_log: None,
        }
    }
}

/// Which Hessian the configuration selects.
pub fn hessian_mode(cfg: &SolverConfig) -> HessianMode {
    cfg.hessian_mode
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    AcceptablyFeasible,
    RestorationUsed,
    Failed,
}

impl SolveStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::RestorationUsed)
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Free-variable vector at exit.
    pub x: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub kkt_error: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
}

/// Sparsity pattern of the stacked equality Jacobian, one `(row, col)` per
/// structural nonzero, read off the block layout.
pub fn equality_jacobian_pattern<P: SeparableNlp>(p: &P) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut row = 0;
    for b in 0..p.num_eq_blocks() {
        let dim = p.eq_dim(b);
        for r in 0..dim {
            for v in p.eq_vars(b) {
                if let VarRef::Free(idx) = v {
                    out.push((row + r, *idx));
                }
            }
        }
        row += dim;
    }
    out
}

struct BlockWork {
    vars: Vec<VarRef>,
    /// (position within `vars`, free variable index)
    free: Vec<(usize, usize)>,
    dim: usize,
    row_offset: usize,
    /// Dense local Jacobian, dim x free.len(), row-major.
    jac: Vec<f64>,
    prev_jac: Vec<f64>,
    /// Packed lower-triangular quasi-Newton approximation.
    qn: Vec<f64>,
    /// KKT value positions for local Hessian pairs and Jacobian entries.
    hess_pos: Vec<usize>,
    jac_pos: Vec<usize>,
}

struct ObjWork {
    vars: Vec<VarRef>,
    free: Vec<(usize, usize)>,
    grad: Vec<f64>,
    prev_grad: Vec<f64>,
    qn: Vec<f64>,
    hess_pos: Vec<usize>,
}

fn split_free(vars: &[VarRef]) -> Vec<(usize, usize)> {
    vars.iter()
        .enumerate()
        .filter_map(|(i, v)| match v {
            VarRef::Free(idx) => Some((i, *idx)),
            VarRef::Fixed(_) => None,
        })
        .collect()
}

/// Damped symmetric-rank-one update of a packed lower-triangular matrix.
fn sr1_update(b: &mut [f64], s: &[f64], y: &[f64]) {
    let n = s.len();
    if n == 0 {
        return;
    }
    // r = y - B s
    let mut r = y.to_vec();
    for i in 0..n {
        for j in 0..n {
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            r[i] -= b[hi * (hi + 1) / 2 + lo] * s[j];
        }
    }
    let denom: f64 = r.iter().zip(s).map(|(a, b)| a * b).sum();
    let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Damping: skip exact, near-singular, or explosive updates.
    if s_norm < 1e-14 || r_norm == 0.0 || denom.abs() <= 1e-8 * r_norm * s_norm {
        return;
    }
    if r_norm * r_norm / denom.abs() > 1e8 {
        return;
    }
    for i in 0..n {
        for j in 0..=i {
            b[i * (i + 1) / 2 + j] += r[i] * r[j] / denom;
        }
    }
}

struct IterationRow {
    iter: usize,
    objective: f64,
    violation: f64,
    mu: f64,
    step: f64,
}

struct Workspace {
    n: usize,
    m_eq: usize,
    m_ineq: usize,
    obj: Vec<ObjWork>,
    eq: Vec<BlockWork>,
    ineq: Vec<BlockWork>,

    objective: f64,
    trial_objective: f64,
    grad: Vec<f64>,
    c_eq: Vec<f64>,
    c_ineq: Vec<f64>,
    trial_c_eq: Vec<f64>,
    trial_c_ineq: Vec<f64>,

    prev_x: Vec<f64>,
    has_prev_x: bool,

    kkt_n: usize,
    kkt_of_var: Vec<usize>,
    kkt_of_eq: Vec<usize>,
    kkt_of_ineq: Vec<usize>,
    kkt: SymmetricCsc,
    var_diag_pos: Vec<usize>,
    eq_diag_pos: Vec<usize>,
    ineq_diag_pos: Vec<usize>,
    symbolic: LdlSymbolic,

    locals_f: Vec<f64>,
    locals_d: Vec<Dual>,
    locals_h: Vec<HDual>,
    out_f: Vec<f64>,
    out_d: Vec<Dual>,
    out_h: Vec<HDual>,
}

impl Workspace {
    fn new<P: SeparableNlp>(p: &P) -> Self {
        let n = p.num_vars();
        let mut max_arity = 1usize;
        let mut max_dim = 1usize;

        let mut obj = Vec::with_capacity(p.num_obj_elements());
        for e in 0..p.num_obj_elements() {
            let vars = p.obj_vars(e).to_vec();
            let free = split_free(&vars);
            max_arity = max_arity.max(vars.len());
            let nf = free.len();
            let mut qn = vec![0.0; nf * (nf + 1) / 2];
            for i in 0..nf {
                qn[i * (i + 1) / 2 + i] = 1e-3;
            }
            obj.push(ObjWork {
                vars,
                grad: vec![0.0; nf],
                prev_grad: vec![0.0; nf],
                qn,
                hess_pos: Vec::new(),
                free,
            });
        }

        let mut eq: Vec<BlockWork> = Vec::with_capacity(p.num_eq_blocks());
        let mut m_eq = 0usize;
        for b in 0..p.num_eq_blocks() {
            let vars = p.eq_vars(b).to_vec();
            let free = split_free(&vars);
            let dim = p.eq_dim(b);
            max_arity = max_arity.max(vars.len());
            max_dim = max_dim.max(dim);
            let nf = free.len();
            eq.push(BlockWork {
                vars,
                dim,
                row_offset: m_eq,
                jac: vec![0.0; dim * nf],
                prev_jac: vec![0.0; dim * nf],
                qn: vec![0.0; nf * (nf + 1) / 2],
                hess_pos: Vec::new(),
                jac_pos: Vec::new(),
                free,
            });
            m_eq += dim;
        }
        let mut ineq: Vec<BlockWork> = Vec::with_capacity(p.num_ineq_blocks());
        let mut m_ineq = 0usize;
        for b in 0..p.num_ineq_blocks() {
            let vars = p.ineq_vars(b).to_vec();
            let free = split_free(&vars);
            let dim = p.ineq_dim(b);
            max_arity = max_arity.max(vars.len());
            max_dim = max_dim.max(dim);
            let nf = free.len();
            ineq.push(BlockWork {
                vars,
                dim,
                row_offset: m_ineq,
                jac: vec![0.0; dim * nf],
                prev_jac: vec![0.0; dim * nf],
                qn: vec![0.0; nf * (nf + 1) / 2],
                hess_pos: Vec::new(),
                jac_pos: Vec::new(),
                free,
            });
            m_ineq += dim;
        }

        // KKT ordering: duals interleave right after the last primal
        // variable (by key) their block touches.
        let kkt_n = n + m_eq + m_ineq;
        let mut keys: Vec<usize> = vec![0; kkt_n];
        for v in 0..n {
            keys[v] = 2 * p.var_key(v);
        }
        let block_key = |bw: &BlockWork| {
            2 * bw
                .free
                .iter()
                .map(|&(_, g)| p.var_key(g))
                .max()
                .unwrap_or(0)
                + 1
        };
        for bw in &eq {
            let k = block_key(bw);
            for r in 0..bw.dim {
                keys[n + bw.row_offset + r] = k;
            }
        }
        for bw in &ineq {
            let k = block_key(bw);
            for r in 0..bw.dim {
                keys[n + m_eq + bw.row_offset + r] = k;
            }
        }
        let mut order: Vec<usize> = (0..kkt_n).collect();
        order.sort_by_key(|&i| (keys[i], i));
        let mut kkt_index = vec![0usize; kkt_n];
        for (pos, &orig) in order.iter().enumerate() {
            kkt_index[orig] = pos;
        }
        let kkt_of_var: Vec<usize> = (0..n).map(|v| kkt_index[v]).collect();
        let kkt_of_eq: Vec<usize> = (0..m_eq).map(|r| kkt_index[n + r]).collect();
        let kkt_of_ineq: Vec<usize> = (0..m_ineq).map(|r| kkt_index[n + m_eq + r]).collect();

        // Coordinate collection with deduplication. HashMap is only used
        // for lookup; ordering comes from the deterministic push order.
        let mut coords: Vec<(usize, usize)> = Vec::new();
        let mut ids: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        let mut coord_of = |r: usize, c: usize, coords: &mut Vec<(usize, usize)>| -> usize {
            let key = if r <= c { (r, c) } else { (c, r) };
            *ids.entry(key).or_insert_with(|| {
                coords.push(key);
                coords.len() - 1
            })
        };

        let var_diag_ids: Vec<usize> = (0..n)
            .map(|v| coord_of(kkt_of_var[v], kkt_of_var[v], &mut coords))
            .collect();
        let eq_diag_ids: Vec<usize> = (0..m_eq)
            .map(|r| coord_of(kkt_of_eq[r], kkt_of_eq[r], &mut coords))
            .collect();
        let ineq_diag_ids: Vec<usize> = (0..m_ineq)
            .map(|r| coord_of(kkt_of_ineq[r], kkt_of_ineq[r], &mut coords))
            .collect();

        let mut obj_hess_ids: Vec<Vec<usize>> = Vec::with_capacity(obj.len());
        for ow in &obj {
            let nf = ow.free.len();
            let mut h = Vec::with_capacity(nf * (nf + 1) / 2);
            for i in 0..nf {
                for j in 0..=i {
                    let (gi, gj) = (kkt_of_var[ow.free[i].1], kkt_of_var[ow.free[j].1]);
                    h.push(coord_of(gi, gj, &mut coords));
                }
            }
            obj_hess_ids.push(h);
        }
        let mut eq_hess_ids = Vec::with_capacity(eq.len());
        let mut eq_jac_ids = Vec::with_capacity(eq.len());
        for bw in &eq {
            let nf = bw.free.len();
            let mut h = Vec::with_capacity(nf * (nf + 1) / 2);
            for i in 0..nf {
                for j in 0..=i {
                    let (gi, gj) = (kkt_of_var[bw.free[i].1], kkt_of_var[bw.free[j].1]);
                    h.push(coord_of(gi, gj, &mut coords));
                }
            }
            eq_hess_ids.push(h);
            let mut jp = Vec::with_capacity(bw.dim * nf);
            for r in 0..bw.dim {
                let kr = kkt_of_eq[bw.row_offset + r];
                for &(_, g) in &bw.free {
                    jp.push(coord_of(kr, kkt_of_var[g], &mut coords));
                }
            }
            eq_jac_ids.push(jp);
        }
        let mut ineq_hess_ids = Vec::with_capacity(ineq.len());
        let mut ineq_jac_ids = Vec::with_capacity(ineq.len());
        for bw in &ineq {
            let nf = bw.free.len();
            let mut h = Vec::with_capacity(nf * (nf + 1) / 2);
            for i in 0..nf {
                for j in 0..=i {
                    let (gi, gj) = (kkt_of_var[bw.free[i].1], kkt_of_var[bw.free[j].1]);
                    h.push(coord_of(gi, gj, &mut coords));
                }
            }
            ineq_hess_ids.push(h);
            let mut jp = Vec::with_capacity(bw.dim * nf);
            for r in 0..bw.dim {
                let kr = kkt_of_ineq[bw.row_offset + r];
                for &(_, g) in &bw.free {
                    jp.push(coord_of(kr, kkt_of_var[g], &mut coords));
                }
            }
            ineq_jac_ids.push(jp);
        }

        let (kkt, positions) = SymmetricCsc::from_coordinates(kkt_n, &coords);
        let map = |idv: Vec<usize>| -> Vec<usize> {
            idv.into_iter().map(|i| positions[i]).collect()
        };
        for (ow, h) in obj.iter_mut().zip(obj_hess_ids) {
            ow.hess_pos = map(h);
        }
        for ((bw, h), j) in eq.iter_mut().zip(eq_hess_ids).zip(eq_jac_ids) {
            bw.hess_pos = map(h);
            bw.jac_pos = map(j);
        }
        for ((bw, h), j) in ineq.iter_mut().zip(ineq_hess_ids).zip(ineq_jac_ids) {
            bw.hess_pos = map(h);
            bw.jac_pos = map(j);
        }
        let var_diag_pos = map(var_diag_ids);
        let eq_diag_pos = map(eq_diag_ids);
        let ineq_diag_pos = map(ineq_diag_ids);

        let symbolic = ldl_symbolic(&kkt);

        Workspace {
            n,
            m_eq,
            m_ineq,
            obj,
            eq,
            ineq,
            objective: 0.0,
            trial_objective: 0.0,
            grad: vec![0.0; n],
            c_eq: vec![0.0; m_eq],
            c_ineq: vec![0.0; m_ineq],
            trial_c_eq: vec![0.0; m_eq],
            trial_c_ineq: vec![0.0; m_ineq],
            prev_x: vec![0.0; n],
            has_prev_x: false,
            kkt_n,
            kkt_of_var,
            kkt_of_eq,
            kkt_of_ineq,
            kkt,
            var_diag_pos,
            eq_diag_pos,
            ineq_diag_pos,
            symbolic,
            locals_f: vec![0.0; max_arity],
            locals_d: vec![Dual::constant(0.0); max_arity],
            locals_h: vec![HDual::constant(0.0); max_arity],
            out_f: vec![0.0; max_dim],
            out_d: vec![Dual::constant(0.0); max_dim],
            out_h: vec![HDual::constant(0.0); max_dim],
        }
    }

    fn gather<T: Scalar>(vars: &[VarRef], x: &[f64], locals: &mut [T]) {
        for (i, v) in vars.iter().enumerate() {
            locals[i] = match v {
                VarRef::Free(idx) => T::constant(x[*idx]),
                VarRef::Fixed(c) => T::constant(*c),
            };
        }
    }

    /// Evaluate objective and constraints into trial buffers.
    fn try_evaluate<P: SeparableNlp>(&mut self, p: &P, x: &[f64]) -> Result<(), SolverError> {
        let mut total = 0.0;
        let obj = std::mem::take(&mut self.obj);
        for (e, ow) in obj.iter().enumerate() {
            let arity = ow.vars.len();
            Self::gather(&ow.vars, x, &mut self.locals_f[..arity]);
            let v = p.eval_obj(e, &self.locals_f[..arity]);
            if !v.is_finite() {
                self.obj = obj;
                return Err(SolverError::NonFiniteEvaluation {
                    context: format!("objective element {e}"),
                });
            }
            total += v;
        }
        self.obj = obj;
        self.trial_objective = total;

        let eq = std::mem::take(&mut self.eq);
        for (b, bw) in eq.iter().enumerate() {
            let arity = bw.vars.len();
            Self::gather(&bw.vars, x, &mut self.locals_f[..arity]);
            p.eval_eq(b, &self.locals_f[..arity], &mut self.out_f[..bw.dim]);
            for r in 0..bw.dim {
                if !self.out_f[r].is_finite() {
                    self.eq = eq;
                    return Err(SolverError::NonFiniteEvaluation {
                        context: format!("equality block {b} row {r}"),
                    });
                }
                self.trial_c_eq[bw.row_offset + r] = self.out_f[r];
            }
        }
        self.eq = eq;

        let ineq = std::mem::take(&mut self.ineq);
        for (b, bw) in ineq.iter().enumerate() {
            let arity = bw.vars.len();
            Self::gather(&bw.vars, x, &mut self.locals_f[..arity]);
            p.eval_ineq(b, &self.locals_f[..arity], &mut self.out_f[..bw.dim]);
            for r in 0..bw.dim {
                if !self.out_f[r].is_finite() {
                    self.ineq = ineq;
                    return Err(SolverError::NonFiniteEvaluation {
                        context: format!("inequality block {b} row {r}"),
                    });
                }
                self.trial_c_ineq[bw.row_offset + r] = self.out_f[r];
            }
        }
        self.ineq = ineq;
        Ok(())
    }

    fn commit_trial(&mut self) {
        self.objective = self.trial_objective;
        self.c_eq.copy_from_slice(&self.trial_c_eq);
        self.c_ineq.copy_from_slice(&self.trial_c_ineq);
    }

    fn evaluate<P: SeparableNlp>(&mut self, p: &P, x: &[f64]) -> Result<(), SolverError> {
        self.try_evaluate(p, x)?;
        self.commit_trial();
        Ok(())
    }

    /// Values, gradient and block Jacobians at `x`; in quasi-Newton mode
    /// also performs the partitioned SR1 updates (which need the previous
    /// local derivatives with the current multipliers).
    fn derivatives<P: SeparableNlp>(
        &mut self,
        p: &P,
        x: &[f64],
        mode: HessianMode,
        lam: &[f64],
        nu: &[f64],
    ) -> Result<(), SolverError> {
        self.evaluate(p, x)?;
        self.grad.iter_mut().for_each(|g| *g = 0.0);

        let mut obj = std::mem::take(&mut self.obj);
        for (e, ow) in obj.iter_mut().enumerate() {
            let arity = ow.vars.len();
            std::mem::swap(&mut ow.prev_grad, &mut ow.grad);
            Self::gather(&ow.vars, x, &mut self.locals_d[..arity]);
            for (fi, &(pos, _)) in ow.free.iter().enumerate() {
                self.locals_d[pos].d = 1.0;
                let out = p.eval_obj(e, &self.locals_d[..arity]);
                self.locals_d[pos].d = 0.0;
                if !out.d.is_finite() {
                    self.obj = obj;
                    return Err(SolverError::NonFiniteEvaluation {
                        context: format!("objective gradient, element {e}"),
                    });
                }
                ow.grad[fi] = out.d;
            }
            for (fi, &(_, g)) in ow.free.iter().enumerate() {
                self.grad[g] += ow.grad[fi];
            }
        }
        self.obj = obj;

        let mut eq = std::mem::take(&mut self.eq);
        for (b, bw) in eq.iter_mut().enumerate() {
            self.block_jacobian(p, x, true, b, bw)?;
        }
        self.eq = eq;
        let mut ineq = std::mem::take(&mut self.ineq);
        for (b, bw) in ineq.iter_mut().enumerate() {
            self.block_jacobian(p, x, false, b, bw)?;
        }
        self.ineq = ineq;

        if mode == HessianMode::QuasiNewton {
            if self.has_prev_x {
                self.sr1_all(x, lam, nu);
            }
            self.prev_x.copy_from_slice(x);
            self.has_prev_x = true;
        }
        Ok(())
    }

    fn block_jacobian<P: SeparableNlp>(
        &mut self,
        p: &P,
        x: &[f64],
        is_eq: bool,
        b: usize,
        bw: &mut BlockWork,
    ) -> Result<(), SolverError> {
        let arity = bw.vars.len();
        let dim = bw.dim;
        let nf = bw.free.len();
        std::mem::swap(&mut bw.prev_jac, &mut bw.jac);
        Self::gather(&bw.vars, x, &mut self.locals_d[..arity]);
        for (fi, &(pos, _)) in bw.free.iter().enumerate() {
            self.locals_d[pos].d = 1.0;
            if is_eq {
                p.eval_eq(b, &self.locals_d[..arity], &mut self.out_d[..dim]);
            } else {
                p.eval_ineq(b, &self.locals_d[..arity], &mut self.out_d[..dim]);
            }
            self.locals_d[pos].d = 0.0;
            for r in 0..dim {
                let d = self.out_d[r].d;
                if !d.is_finite() {
                    return Err(SolverError::NonFiniteEvaluation {
                        context: format!("jacobian block {b} row {r}"),
                    });
                }
                bw.jac[r * nf + fi] = d;
            }
        }
        Ok(())
    }

    fn sr1_all(&mut self, x: &[f64], lam: &[f64], nu: &[f64]) {
        for ow in &mut self.obj {
            let nf = ow.free.len();
            if nf == 0 {
                continue;
            }
            let s: Vec<f64> = ow.free.iter().map(|&(_, g)| x[g] - self.prev_x[g]).collect();
            let y: Vec<f64> = (0..nf).map(|i| ow.grad[i] - ow.prev_grad[i]).collect();
            sr1_update(&mut ow.qn, &s, &y);
        }
        let update_blocks = |blocks: &mut Vec<BlockWork>, mults: &[f64], prev_x: &[f64]| {
            for bw in blocks.iter_mut() {
                let nf = bw.free.len();
                if nf == 0 {
                    continue;
                }
                let s: Vec<f64> = bw.free.iter().map(|&(_, g)| x[g] - prev_x[g]).collect();
                let mut y = vec![0.0; nf];
                for r in 0..bw.dim {
                    let m = mults[bw.row_offset + r];
                    if m != 0.0 {
                        for fi in 0..nf {
                            y[fi] += m * (bw.jac[r * nf + fi] - bw.prev_jac[r * nf + fi]);
                        }
                    }
                }
                sr1_update(&mut bw.qn, &s, &y);
            }
        };
        let prev_x = self.prev_x.clone();
        update_blocks(&mut self.eq, lam, &prev_x);
        update_blocks(&mut self.ineq, nu, &prev_x);
    }

    /// Scatter the Hessian of the Lagrangian into the KKT values.
    fn fill_hessian<P: SeparableNlp>(
        &mut self,
        p: &P,
        x: &[f64],
        mode: HessianMode,
        lam: &[f64],
        nu: &[f64],
    ) -> Result<(), SolverError> {
        if mode == HessianMode::QuasiNewton {
            let scatter = |kkt: &mut SymmetricCsc, qn: &[f64], pos: &[usize]| {
                for (k, &pp) in pos.iter().enumerate() {
                    kkt.values[pp] += qn[k];
                }
            };
            let obj = std::mem::take(&mut self.obj);
            for ow in &obj {
                scatter(&mut self.kkt, &ow.qn, &ow.hess_pos);
            }
            self.obj = obj;
            let eq = std::mem::take(&mut self.eq);
            for bw in &eq {
                scatter(&mut self.kkt, &bw.qn, &bw.hess_pos);
            }
            self.eq = eq;
            let ineq = std::mem::take(&mut self.ineq);
            for bw in &ineq {
                scatter(&mut self.kkt, &bw.qn, &bw.hess_pos);
            }
            self.ineq = ineq;
            return Ok(());
        }

        // Exact mode: forward-over-forward sweeps per free-variable pair.
        let obj = std::mem::take(&mut self.obj);
        for (e, ow) in obj.iter().enumerate() {
            let arity = ow.vars.len();
            let nf = ow.free.len();
            Self::gather(&ow.vars, x, &mut self.locals_h[..arity]);
            let mut k = 0;
            for i in 0..nf {
                for j in 0..=i {
                    let (pi, pj) = (ow.free[i].0, ow.free[j].0);
                    self.locals_h[pi].da = 1.0;
                    self.locals_h[pj].db = 1.0;
                    let out = p.eval_obj(e, &self.locals_h[..arity]);
                    self.locals_h[pi].da = 0.0;
                    self.locals_h[pj].db = 0.0;
                    if !out.dab.is_finite() {
                        self.obj = obj;
                        return Err(SolverError::NonFiniteEvaluation {
                            context: format!("objective hessian, element {e}"),
                        });
                    }
                    self.kkt.values[ow.hess_pos[k]] += out.dab;
                    k += 1;
                }
            }
        }
        self.obj = obj;

        let eq = std::mem::take(&mut self.eq);
        for (b, bw) in eq.iter().enumerate() {
            self.block_hessian(p, x, true, b, bw, lam)?;
        }
        self.eq = eq;
        let ineq = std::mem::take(&mut self.ineq);
        for (b, bw) in ineq.iter().enumerate() {
            self.block_hessian(p, x, false, b, bw, nu)?;
        }
        self.ineq = ineq;
        Ok(())
    }

    fn block_hessian<P: SeparableNlp>(
        &mut self,
        p: &P,
        x: &[f64],
        is_eq: bool,
        b: usize,
        bw: &BlockWork,
        mults: &[f64],
    ) -> Result<(), SolverError> {
        let arity = bw.vars.len();
        let dim = bw.dim;
        let nf = bw.free.len();
        // With all multipliers exactly zero the contribution vanishes.
        if (0..dim).all(|r| mults[bw.row_offset + r] == 0.0) {
            return Ok(());
        }
        Self::gather(&bw.vars, x, &mut self.locals_h[..arity]);
        let mut k = 0;
        for i in 0..nf {
            for j in 0..=i {
                let (pi, pj) = (bw.free[i].0, bw.free[j].0);
                self.locals_h[pi].da = 1.0;
                self.locals_h[pj].db = 1.0;
                if is_eq {
                    p.eval_eq(b, &self.locals_h[..arity], &mut self.out_h[..dim]);
                } else {
                    p.eval_ineq(b, &self.locals_h[..arity], &mut self.out_h[..dim]);
                }
                self.locals_h[pi].da = 0.0;
                self.locals_h[pj].db = 0.0;
                let mut acc = 0.0;
                for r in 0..dim {
                    acc += mults[bw.row_offset + r] * self.out_h[r].dab;
                }
                if !acc.is_finite() {
                    return Err(SolverError::NonFiniteEvaluation {
                        context: format!("constraint hessian block {b}"),
                    });
                }
                self.kkt.values[bw.hess_pos[k]] += acc;
                k += 1;
            }
        }
        Ok(())
    }

    fn ineq_jac_times(&self, dx: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m_ineq];
        for bw in &self.ineq {
            let nf = bw.free.len();
            for r in 0..bw.dim {
                let mut acc = 0.0;
                for fi in 0..nf {
                    acc += bw.jac[r * nf + fi] * dx[bw.free[fi].1];
                }
                out[bw.row_offset + r] = acc;
            }
        }
        out
    }

    fn dual_residual(&self, lam: &[f64], nu: &[f64]) -> Vec<f64> {
        let mut r_d = self.grad.clone();
        for bw in &self.eq {
            let nf = bw.free.len();
            for r in 0..bw.dim {
                let l = lam[bw.row_offset + r];
                if l != 0.0 {
                    for fi in 0..nf {
                        r_d[bw.free[fi].1] += l * bw.jac[r * nf + fi];
                    }
                }
            }
        }
        for bw in &self.ineq {
            let nf = bw.free.len();
            for r in 0..bw.dim {
                let v = nu[bw.row_offset + r];
                if v != 0.0 {
                    for fi in 0..nf {
                        r_d[bw.free[fi].1] += v * bw.jac[r * nf + fi];
                    }
                }
            }
        }
        r_d
    }

    fn violation_l1(&self, s: &[f64]) -> f64 {
        self.c_eq.iter().map(|c| c.abs()).sum::<f64>()
            + self
                .c_ineq
                .iter()
                .zip(s)
                .map(|(c, si)| (c + si).abs())
                .sum::<f64>()
    }

    fn trial_violation_l1(&self, s: &[f64]) -> f64 {
        self.trial_c_eq.iter().map(|c| c.abs()).sum::<f64>()
            + self
                .trial_c_ineq
                .iter()
                .zip(s)
                .map(|(c, si)| (c + si).abs())
                .sum::<f64>()
    }

    /// Violation of the original program (inequalities clipped at zero).
    fn violation_inf(&self) -> f64 {
        let mut v: f64 = 0.0;
        for &c in &self.c_eq {
            v = v.max(c.abs());
        }
        for &c in &self.c_ineq {
            v = v.max(c.max(0.0));
        }
        v
    }

    fn kkt_error(&self, s: &[f64], nu: &[f64], lam: &[f64], mu: f64) -> f64 {
        let (d, f, c) = self.kkt_error_parts(s, nu, lam, mu);
        d.max(f).max(c)
    }

    /// (scaled dual, feasibility, scaled complementarity) error parts.
    fn kkt_error_parts(&self, s: &[f64], nu: &[f64], lam: &[f64], mu: f64) -> (f64, f64, f64) {
        let r_d = self.dual_residual(lam, nu);
        let m_total = (self.m_eq + self.m_ineq).max(1);
        let dual_sum: f64 =
            lam.iter().map(|v| v.abs()).sum::<f64>() + nu.iter().map(|v| v.abs()).sum::<f64>();
        let s_d = ((dual_sum / m_total as f64).max(100.0)) / 100.0;
        let dual = r_d.iter().fold(0.0f64, |a, &b| a.max(b.abs())) / s_d;
        let mut feas: f64 = 0.0;
        for &c in &self.c_eq {
            feas = feas.max(c.abs());
        }
        for (c, si) in self.c_ineq.iter().zip(s) {
            feas = feas.max((c + si).abs());
        }
        let s_c = if self.m_ineq > 0 {
            ((nu.iter().map(|v| v.abs()).sum::<f64>() / self.m_ineq as f64).max(100.0)) / 100.0
        } else {
            1.0
        };
        let mut comp: f64 = 0.0;
        for (si, vi) in s.iter().zip(nu) {
            comp = comp.max((si * vi - mu).abs() / s_c);
        }
        (dual, feas, comp)
    }

    /// Assemble the regularized KKT system, correct inertia, and return
    /// the Newton direction `(dx, dlam, dnu)`.
    fn newton_step<P: SeparableNlp>(
        &mut self,
        p: &P,
        x: &[f64],
        s: &[f64],
        nu: &[f64],
        lam: &[f64],
        mu: f64,
        mode: HessianMode,
        delta_w_last: &mut f64,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), SolverError> {
        let mut delta_try = 0.0f64;
        for attempt in 0..30 {
            if attempt == 1 {
                delta_try = if *delta_w_last > 0.0 {
                    (*delta_w_last / 3.0).max(1e-10)
                } else {
                    1e-8
                };
            } else if attempt >= 2 {
                delta_try = (delta_try * 8.0).max(1e-8);
            }
            let delta_c = 1e-8 * mu.max(1e-8);

            self.kkt.values.iter_mut().for_each(|v| *v = 0.0);
            self.fill_hessian(p, x, mode, lam, nu)?;
            for bw in &self.eq {
                let nf = bw.free.len();
                for k in 0..bw.dim * nf {
                    self.kkt.values[bw.jac_pos[k]] += bw.jac[k];
                }
            }
            for bw in &self.ineq {
                let nf = bw.free.len();
                for k in 0..bw.dim * nf {
                    self.kkt.values[bw.jac_pos[k]] += bw.jac[k];
                }
            }
            for v in 0..self.n {
                self.kkt.values[self.var_diag_pos[v]] += delta_try;
            }
            for r in 0..self.m_eq {
                self.kkt.values[self.eq_diag_pos[r]] -= delta_c;
            }
            for r in 0..self.m_ineq {
                let ratio = (s[r] / nu[r]).max(1e-14);
                self.kkt.values[self.ineq_diag_pos[r]] -= ratio;
            }

            let factor = match ldl_numeric(&self.kkt, &self.symbolic) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let (pos, neg, zero) = factor.inertia();
            if zero > 0 || pos != self.n || neg != self.m_eq + self.m_ineq {
                continue;
            }
            if delta_try > 0.0 {
                *delta_w_last = delta_try;
            }

            let r_d = self.dual_residual(lam, nu);
            let mut rhs = vec![0.0; self.kkt_n];
            for v in 0..self.n {
                rhs[self.kkt_of_var[v]] = -r_d[v];
            }
            for r in 0..self.m_eq {
                rhs[self.kkt_of_eq[r]] = -self.c_eq[r];
            }
            for r in 0..self.m_ineq {
                rhs[self.kkt_of_ineq[r]] = -self.c_ineq[r] - mu / nu[r];
            }
            let mut sol = rhs.clone();
            factor.solve(&mut sol);
            if sol.iter().any(|v| !v.is_finite()) {
                continue;
            }
            if std::env::var("MMPC_KKT_TRACE").is_ok() {
                // Residual of the linear solve through a symmetric matvec.
                let mut ax = vec![0.0; self.kkt_n];
                for col in 0..self.kkt_n {
                    for p in self.kkt.col_ptr[col]..self.kkt.col_ptr[col + 1] {
                        let row = self.kkt.row_idx[p];
                        let v = self.kkt.values[p];
                        ax[row] += v * sol[col];
                        if row != col {
                            ax[col] += v * sol[row];
                        }
                    }
                }
                let res = ax
                    .iter()
                    .zip(&rhs)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                let step_inf = sol.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                if res > 1e-6 * (1.0 + step_inf) {
                    eprintln!("  linsolve residual {res:.3e}, |step| {step_inf:.3e}, delta_w {delta_try:.1e}");
                }
            }
            let dx: Vec<f64> = (0..self.n).map(|v| sol[self.kkt_of_var[v]]).collect();
            let dlam: Vec<f64> = (0..self.m_eq).map(|r| sol[self.kkt_of_eq[r]]).collect();
            let dnu: Vec<f64> = (0..self.m_ineq).map(|r| sol[self.kkt_of_ineq[r]]).collect();
            return Ok((dx, dlam, dnu));
        }
        let max_abs = self
            .kkt
            .values
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        Err(SolverError::Failed(format!(
            "inertia correction exhausted (n={}, m_eq={}, m_ineq={}, max |kkt| = {max_abs:.3e})",
            self.n, self.m_eq, self.m_ineq
        )))
    }

    /// Levenberg-Marquardt descent on the squared constraint violation.
    /// Returns true when the violation dropped enough to resume.
    fn restoration<P: SeparableNlp>(
        &mut self,
        p: &P,
        x: &mut [f64],
    ) -> Result<bool, SolverError> {
        self.evaluate(p, x)?;
        let entry = self.restoration_violation();
        if entry == 0.0 {
            return Ok(true);
        }
        let target = (0.1 * entry).max(1e-10);

        // Static pattern: [[delta I, J^T], [J, -I]] over all constraint
        // rows; inactive inequality rows get zero weight.
        let m = self.m_eq + self.m_ineq;
        let dim = self.n + m;
        let mut coords: Vec<(usize, usize)> = Vec::new();
        for v in 0..self.n {
            coords.push((v, v));
        }
        for r in 0..m {
            coords.push((self.n + r, self.n + r));
        }
        // Jacobian entries are unique per (row, var) so no dedup is needed;
        // variables come before constraint rows, keeping entries upper
        // triangular.
        let mut jac_coord_of: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
        for (kind, (blocks, base)) in [(&self.eq, 0usize), (&self.ineq, self.m_eq)]
            .into_iter()
            .enumerate()
        {
            for bw in blocks {
                for r in 0..bw.dim {
                    let row = base + bw.row_offset + r;
                    for &(_, gi) in &bw.free {
                        coords.push((gi, self.n + row));
                        jac_coord_of[kind].push(coords.len() - 1);
                    }
                }
            }
        }
        let (mut mat, positions) = SymmetricCsc::from_coordinates(dim, &coords);
        let sym = ldl_symbolic(&mat);

        let mut lm_delta = 1e-4f64;
        let mut current = entry;
        for _ in 0..40 {
            if self.violation_inf() <= target {
                return Ok(true);
            }
            // Fresh Jacobians at x.
            let mut eq = std::mem::take(&mut self.eq);
            for (b, bw) in eq.iter_mut().enumerate() {
                self.block_jacobian(p, x, true, b, bw)?;
            }
            self.eq = eq;
            let mut ineq = std::mem::take(&mut self.ineq);
            for (b, bw) in ineq.iter_mut().enumerate() {
                self.block_jacobian(p, x, false, b, bw)?;
            }
            self.ineq = ineq;

            let weights: Vec<f64> = (0..m)
                .map(|r| {
                    if r < self.m_eq {
                        1.0
                    } else if self.c_ineq[r - self.m_eq] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();

            let mut improved = false;
            for _ in 0..12 {
                mat.values.iter_mut().for_each(|v| *v = 0.0);
                for v in 0..self.n {
                    mat.values[positions[v]] = lm_delta;
                }
                for r in 0..m {
                    mat.values[positions[self.n + r]] = -1.0;
                }
                let mut idx = 0usize;
                for bw in &self.eq {
                    let nf = bw.free.len();
                    for r in 0..bw.dim {
                        let w = weights[bw.row_offset + r];
                        for fi in 0..nf {
                            mat.values[positions[jac_coord_of[0][idx]]] = w * bw.jac[r * nf + fi];
                            idx += 1;
                        }
                    }
                }
                idx = 0;
                for bw in &self.ineq {
                    let nf = bw.free.len();
                    for r in 0..bw.dim {
                        let w = weights[self.m_eq + bw.row_offset + r];
                        for fi in 0..nf {
                            mat.values[positions[jac_coord_of[1][idx]]] = w * bw.jac[r * nf + fi];
                            idx += 1;
                        }
                    }
                }
                let factor = match ldl_numeric(&mat, &sym) {
                    Ok(f) => f,
                    Err(_) => {
                        lm_delta *= 10.0;
                        continue;
                    }
                };
                let mut rhs = vec![0.0; dim];
                for r in 0..self.m_eq {
                    rhs[self.n + r] = -weights[r] * self.c_eq[r];
                }
                for r in 0..self.m_ineq {
                    rhs[self.n + self.m_eq + r] =
                        -weights[self.m_eq + r] * self.c_ineq[r];
                }
                let mut sol = rhs;
                factor.solve(&mut sol);
                if sol.iter().any(|v| !v.is_finite()) {
                    lm_delta *= 10.0;
                    continue;
                }
                let mut scale = 1.0;
                'backtrack: for _ in 0..6 {
                    let x_try: Vec<f64> =
                        (0..self.n).map(|v| x[v] + scale * sol[v]).collect();
                    if self.try_evaluate(p, &x_try).is_ok() {
                        let v_try = {
                            let mut v = 0.0;
                            for &c in &self.trial_c_eq {
                                v += c * c;
                            }
                            for &c in &self.trial_c_ineq {
                                let cc = c.max(0.0);
                                v += cc * cc;
                            }
                            0.5 * v
                        };
                        if v_try < current {
                            x.copy_from_slice(&x_try);
                            self.commit_trial();
                            current = v_try;
                            lm_delta = (lm_delta * 0.3).max(1e-10);
                            improved = true;
                            break 'backtrack;
                        }
                    }
                    scale *= 0.5;
                }
                if improved {
                    break;
                }
                lm_delta *= 10.0;
                if lm_delta > 1e10 {
                    break;
                }
            }
            if !improved {
                return Ok(false);
            }
        }
        Ok(self.violation_inf() <= target)
    }

    fn restoration_violation(&self) -> f64 {
        let mut v = 0.0;
        for &c in &self.c_eq {
            v += c * c;
        }
        for &c in &self.c_ineq {
            let cc = c.max(0.0);
            v += cc * cc;
        }
        0.5 * v
    }

    /// Central-difference spot check of the AD gradient and Jacobians.
    fn finite_difference_check<P: SeparableNlp>(
        &mut self,
        p: &P,
        x: &[f64],
    ) -> Result<(), SolverError> {
        let lam = vec![0.0; self.m_eq];
        let nu = vec![0.0; self.m_ineq];
        self.derivatives(p, x, HessianMode::Exact, &lam, &nu)?;
        let grad = self.grad.clone();
        let mut jac_eq = vec![vec![0.0; self.n]; self.m_eq];
        for bw in &self.eq {
            let nf = bw.free.len();
            for r in 0..bw.dim {
                for fi in 0..nf {
                    jac_eq[bw.row_offset + r][bw.free[fi].1] = bw.jac[r * nf + fi];
                }
            }
        }
        let h = 1e-6;
        let mut xp = x.to_vec();
        for v in 0..self.n {
            xp[v] = x[v] + h;
            self.try_evaluate(p, &xp)?;
            let f_plus = self.trial_objective;
            let ce_plus = self.trial_c_eq.clone();
            xp[v] = x[v] - h;
            self.try_evaluate(p, &xp)?;
            let f_minus = self.trial_objective;
            let ce_minus = self.trial_c_eq.clone();
            xp[v] = x[v];
            let fd = (f_plus - f_minus) / (2.0 * h);
            if (fd - grad[v]).abs() > 1e-4 * (1.0 + fd.abs()) {
                return Err(SolverError::Failed(format!(
                    "gradient check failed at var {v}: ad {} vs fd {fd}",
                    grad[v]
                )));
            }
            for r in 0..self.m_eq {
                let fd = (ce_plus[r] - ce_minus[r]) / (2.0 * h);
                if (fd - jac_eq[r][v]).abs() > 1e-4 * (1.0 + fd.abs()) {
                    return Err(SolverError::Failed(format!(
                        "jacobian check failed at ({r}, {v}): ad {} vs fd {fd}",
                        jac_eq[r][v]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Solve the program from the given initial free-variable vector.
pub fn solve<P: SeparableNlp>(
    problem: &P,
    init: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    let t_start = std::time::Instant::now();
    let n = problem.num_vars();
    assert_eq!(init.len(), n, "initial point has wrong dimension");
    if init.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteEvaluation {
            context: "initial point".into(),
        });
    }

    let mut ws = Workspace::new(problem);
    if cfg.check_derivatives {
        ws.finite_difference_check(problem, init)?;
    }

    let m_eq = ws.m_eq;
    let m_ineq = ws.m_ineq;
    let mut x = init.to_vec();
    ws.evaluate(problem, &x)?;

    let mut mu = cfg.mu0;
    let mu_min = cfg.kkt_tol / 10.0;
    // Slack initialization: honest for satisfied rows, floored at a
    // violation-relative margin for active or violated ones so the
    // matching central duals stay moderate.
    let slack_init = |c: f64| (-c).max(1e-2 * c.abs().max(1.0));
    let mut s: Vec<f64> = ws.c_ineq.iter().map(|&c| slack_init(c)).collect();
    let mut nu: Vec<f64> = s.iter().map(|&si| (mu / si).clamp(1e-8, 1e4)).collect();
    let mut lam = vec![0.0f64; m_eq];

    let mut delta_w_last = 0.0f64;
    let mut used_restoration = false;
    let mut restoration_failed = false;
    let mut log_rows: Vec<IterationRow> = Vec::new();
    let mut converged = false;
    let mut iter = 0usize;
    let mut ls_failures = 0usize;

    // Filter line search (Fletcher-Leyffer style, with the usual
    // switching rule): a trial point is acceptable when it is not
    // dominated by any (violation, barrier-objective) pair in the filter
    // and it sufficiently improves either measure over the current point.
    const GAMMA_THETA: f64 = 1e-5;
    const GAMMA_PHI: f64 = 1e-5;
    const S_THETA: f64 = 1.1;
    const S_PHI: f64 = 2.3;
    const ETA_PHI: f64 = 1e-4;
    let theta_init = ws.violation_l1(&s);
    let theta_max = 1e4 * theta_init.max(1.0);
    let theta_min = 1e-4 * theta_init.max(1.0);
    let mut filter: Vec<(f64, f64)> = vec![(theta_max, f64::NEG_INFINITY)];

    while iter < cfg.max_iters {
        ws.derivatives(problem, &x, cfg.hessian_mode, &lam, &nu)?;

        let err0 = ws.kkt_error(&s, &nu, &lam, 0.0);
        if std::env::var("MMPC_KKT_TRACE").is_ok() {
            let (d, f, c) = ws.kkt_error_parts(&s, &nu, &lam, 0.0);
            let r_d = ws.dual_residual(&lam, &nu);
            let (argmax, val) = r_d
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, v)| (i, *v))
                .unwrap_or((0, 0.0));
            eprintln!(
                "it {iter}: dual {d:.3e} feas {f:.3e} comp {c:.3e} mu {mu:.2e} | worst r_d {val:.3e} at var {argmax} (pt {}, slot {})",
                argmax / 8,
                argmax % 8
            );
        }
        if err0 <= cfg.kkt_tol {
            converged = true;
            break;
        }
        let mu_before = mu;
        while mu > mu_min && ws.kkt_error(&s, &nu, &lam, mu) <= 10.0 * mu {
            mu = (mu * cfg.mu_reduction).max(mu_min);
        }
        if mu != mu_before {
            // Fresh barrier subproblem, fresh filter.
            filter.clear();
            filter.push((theta_max, f64::NEG_INFINITY));
        }

        let (dx, dlam, dnu) = ws.newton_step(
            problem,
            &x,
            &s,
            &nu,
            &lam,
            mu,
            cfg.hessian_mode,
            &mut delta_w_last,
        )?;
        let j_dx = ws.ineq_jac_times(&dx);
        let ds: Vec<f64> = (0..m_ineq)
            .map(|i| -(ws.c_ineq[i] + s[i]) - j_dx[i])
            .collect();

        let tau = 0.99f64.max(1.0 - mu);
        let mut alpha_max: f64 = 1.0;
        let mut blocking_row = usize::MAX;
        for i in 0..m_ineq {
            if ds[i] < 0.0 {
                let a = -tau * s[i] / ds[i];
                if a < alpha_max {
                    alpha_max = a;
                    blocking_row = i;
                }
            }
        }
        if alpha_max < 0.05 && std::env::var("MMPC_KKT_TRACE").is_ok() {
            eprintln!(
                "  blocking row {blocking_row}: s {:.3e} ds {:.3e} c {:.3e} nu {:.3e} alpha_max {alpha_max:.3e}",
                s[blocking_row], ds[blocking_row], ws.c_ineq[blocking_row], nu[blocking_row]
            );
        }
        let mut alpha_d: f64 = 1.0;
        for i in 0..m_ineq {
            if dnu[i] < 0.0 {
                alpha_d = alpha_d.min(-tau * nu[i] / dnu[i]);
            }
        }

        let theta0 = ws.violation_l1(&s);
        let grad_dot_dx: f64 = ws.grad.iter().zip(&dx).map(|(g, d)| g * d).sum();
        let barrier_dir: f64 = -mu * s.iter().zip(&ds).map(|(si, di)| di / si).sum::<f64>();
        let dphi = grad_dot_dx + barrier_dir;
        let barrier0: f64 = -mu * s.iter().map(|v| v.ln()).sum::<f64>();
        let phi0 = ws.objective + barrier0;

        let mut alpha = alpha_max;
        let mut accepted = false;
        let mut f_type_accept = false;
        let mut x_try = x.clone();
        let mut s_try = s.clone();
        while alpha >= cfg.min_step {
            for i in 0..n {
                x_try[i] = x[i] + alpha * dx[i];
            }
            for i in 0..m_ineq {
                s_try[i] = s[i] + alpha * ds[i];
            }
            if ws.try_evaluate(problem, &x_try).is_ok() {
                let theta_t = ws.trial_violation_l1(&s_try);
                let barrier_try: f64 = -mu * s_try.iter().map(|v| v.ln()).sum::<f64>();
                let phi_t = ws.trial_objective + barrier_try;
                let dominated = filter
                    .iter()
                    .any(|&(tj, pj)| theta_t >= (1.0 - GAMMA_THETA) * tj && phi_t >= pj);
                if !dominated {
                    let slack = 1e-13 * (1.0 + phi0.abs());
                    let switching = dphi < 0.0
                        && alpha * (-dphi).powf(S_PHI) > theta0.powf(S_THETA);
                    if switching && theta0 <= theta_min {
                        if phi_t <= phi0 + ETA_PHI * alpha * dphi + slack {
                            accepted = true;
                            f_type_accept = true;
                            break;
                        }
                    } else if theta_t <= (1.0 - GAMMA_THETA) * theta0 + slack
                        || phi_t <= phi0 - GAMMA_PHI * theta0 + slack
                    {
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= cfg.backtrack_factor;
        }

        if accepted {
            ls_failures = 0;
            if !f_type_accept {
                // Augment the filter so the pair just improved upon cannot
                // be revisited.
                filter.push((
                    (1.0 - GAMMA_THETA) * theta0,
                    phi0 - GAMMA_PHI * theta0,
                ));
            }
            x.copy_from_slice(&x_try);
            s.copy_from_slice(&s_try);
            for i in 0..m_eq {
                lam[i] += alpha * dlam[i];
            }
            // Bound duals step to their own fraction-to-boundary limit,
            // then clamp into a wide band around the central path so
            // complementarity cannot run away.
            const KAPPA_SIGMA: f64 = 1e10;
            for i in 0..m_ineq {
                let nu_new = (nu[i] + alpha_d * dnu[i]).max(1e-16);
                let lo = mu / (KAPPA_SIGMA * s[i]);
                let hi = KAPPA_SIGMA * mu / s[i];
                nu[i] = nu_new.clamp(lo, hi);
            }
            ws.commit_trial();
        } else {
            ls_failures += 1;
            if ls_failures >= cfg.restoration_trigger {
                used_restoration = true;
                let ok = ws.restoration(problem, &mut x)?;
                iter += 1;
                log_rows.push(IterationRow {
                    iter,
                    objective: ws.objective,
                    violation: ws.violation_inf(),
                    mu,
                    step: 0.0,
                });
                if !ok {
                    restoration_failed = true;
                    break;
                }
                ws.evaluate(problem, &x)?;
                for i in 0..m_ineq {
                    s[i] = slack_init(ws.c_ineq[i]);
                    nu[i] = (mu / s[i]).clamp(1e-8, 1e4);
                }
                lam.iter_mut().for_each(|l| *l = 0.0);
                filter.clear();
                filter.push((theta_max, f64::NEG_INFINITY));
                ls_failures = 0;
                continue;
            }
        }

        iter += 1;
        log_rows.push(IterationRow {
            iter,
            objective: ws.objective,
            violation: ws.violation_inf(),
            mu,
            step: if accepted { alpha } else { 0.0 },
        });
    }

    ws.evaluate(problem, &x)?;
    let max_violation = ws.violation_inf();
    ws.derivatives(problem, &x, cfg.hessian_mode, &lam, &nu)?;
    let kkt_error = ws.kkt_error(&s, &nu, &lam, 0.0);

    let status = if converged || kkt_error <= cfg.kkt_tol {
        if used_restoration {
            SolveStatus::RestorationUsed
        } else {
            SolveStatus::Optimal
        }
    } else if !restoration_failed && kkt_error <= 100.0 * cfg.kkt_tol {
        SolveStatus::AcceptablyFeasible
    } else {
        SolveStatus::Failed
    };

    if let Some(path) = &cfg.debug_iteration_log {
        let mut f = std::fs::File::create(path)
            .map_err(|e| SolverError::Failed(format!("iteration log: {e}")))?;
        writeln!(f, "iteration,objective,violation,mu,step_length")
            .map_err(|e| SolverError::Failed(format!("iteration log: {e}")))?;
        for r in &log_rows {
            writeln!(
                f,
                "{},{:.12e},{:.12e},{:.6e},{:.6e}",
                r.iter, r.objective, r.violation, r.mu, r.step
            )
            .map_err(|e| SolverError::Failed(format!("iteration log: {e}")))?;
        }
    }

    Ok(SolveResult {
        status,
        objective: ws.objective,
        max_violation,
        kkt_error,
        iterations: iter,
        wall_time_s: t_start.elapsed().as_secs_f64(),
        x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x-3)^2 s.t. x >= 5.
    struct BoundQuad {
        vars: Vec<VarRef>,
    }
    impl BoundQuad {
        fn new() -> Self {
            BoundQuad {
                vars: vec![VarRef::Free(0)],
            }
        }
    }
    impl SeparableNlp for BoundQuad {
        fn num_vars(&self) -> usize {
            1
        }
        fn num_obj_elements(&self) -> usize {
            1
        }
        fn obj_vars(&self, _e: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_obj<T: Scalar>(&self, _e: usize, local: &[T]) -> T {
            (local[0] - T::constant(3.0)).squared()
        }
        fn num_eq_blocks(&self) -> usize {
            0
        }
        fn eq_dim(&self, _b: usize) -> usize {
            0
        }
        fn eq_vars(&self, _b: usize) -> &[VarRef] {
            &[]
        }
        fn eval_eq<T: Scalar>(&self, _b: usize, _l: &[T], _o: &mut [T]) {}
        fn num_ineq_blocks(&self) -> usize {
            1
        }
        fn ineq_dim(&self, _b: usize) -> usize {
            1
        }
        fn ineq_vars(&self, _b: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_ineq<T: Scalar>(&self, _b: usize, local: &[T], out: &mut [T]) {
            out[0] = T::constant(5.0) - local[0];
        }
    }

    /// min x^2 + y^2 s.t. x + y = 1.
    struct EqQp {
        vars: Vec<VarRef>,
    }
    impl EqQp {
        fn new() -> Self {
            EqQp {
                vars: vec![VarRef::Free(0), VarRef::Free(1)],
            }
        }
    }
    impl SeparableNlp for EqQp {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_obj_elements(&self) -> usize {
            1
        }
        fn obj_vars(&self, _e: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_obj<T: Scalar>(&self, _e: usize, local: &[T]) -> T {
            local[0].squared() + local[1].squared()
        }
        fn num_eq_blocks(&self) -> usize {
            1
        }
        fn eq_dim(&self, _b: usize) -> usize {
            1
        }
        fn eq_vars(&self, _b: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_eq<T: Scalar>(&self, _b: usize, local: &[T], out: &mut [T]) {
            out[0] = local[0] + local[1] - T::one();
        }
        fn num_ineq_blocks(&self) -> usize {
            0
        }
        fn ineq_dim(&self, _b: usize) -> usize {
            0
        }
        fn ineq_vars(&self, _b: usize) -> &[VarRef] {
            &[]
        }
        fn eval_ineq<T: Scalar>(&self, _b: usize, _l: &[T], _o: &mut [T]) {}
    }

    /// Rosenbrock inside the box [-2, 2]^2; unconstrained optimum (1, 1)
    /// lies in the interior, verified by its zero gradient.
    struct RosenbrockBox {
        vars: Vec<VarRef>,
    }
    impl RosenbrockBox {
        fn new() -> Self {
            RosenbrockBox {
                vars: vec![VarRef::Free(0), VarRef::Free(1)],
            }
        }
    }
    impl SeparableNlp for RosenbrockBox {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_obj_elements(&self) -> usize {
            1
        }
        fn obj_vars(&self, _e: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_obj<T: Scalar>(&self, _e: usize, l: &[T]) -> T {
            let a = T::one() - l[0];
            let b = l[1] - l[0].squared();
            a.squared() + T::constant(100.0) * b.squared()
        }
        fn num_eq_blocks(&self) -> usize {
            0
        }
        fn eq_dim(&self, _b: usize) -> usize {
            0
        }
        fn eq_vars(&self, _b: usize) -> &[VarRef] {
            &[]
        }
        fn eval_eq<T: Scalar>(&self, _b: usize, _l: &[T], _o: &mut [T]) {}
        fn num_ineq_blocks(&self) -> usize {
            1
        }
        fn ineq_dim(&self, _b: usize) -> usize {
            4
        }
        fn ineq_vars(&self, _b: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_ineq<T: Scalar>(&self, _b: usize, l: &[T], out: &mut [T]) {
            out[0] = l[0] - T::constant(2.0);
            out[1] = -l[0] - T::constant(2.0);
            out[2] = l[1] - T::constant(2.0);
            out[3] = -l[1] - T::constant(2.0);
        }
    }

    /// Separable convex QP with a coupling equality, for quasi-Newton
    /// comparison.
    struct CoupledQp {
        vars: Vec<VarRef>,
    }
    impl CoupledQp {
        fn new() -> Self {
            CoupledQp {
                vars: (0..6).map(VarRef::Free).collect(),
            }
        }
    }
    impl SeparableNlp for CoupledQp {
        fn num_vars(&self) -> usize {
            6
        }
        fn num_obj_elements(&self) -> usize {
            1
        }
        fn obj_vars(&self, _e: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_obj<T: Scalar>(&self, _e: usize, l: &[T]) -> T {
            let mut total = T::zero();
            for (i, &x) in l.iter().enumerate() {
                let target = T::constant(i as f64 * 0.5);
                total += (x - target).squared() * T::constant(1.0 + i as f64 * 0.3);
            }
            total
        }
        fn num_eq_blocks(&self) -> usize {
            1
        }
        fn eq_dim(&self, _b: usize) -> usize {
            1
        }
        fn eq_vars(&self, _b: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_eq<T: Scalar>(&self, _b: usize, l: &[T], out: &mut [T]) {
            let mut sum = T::zero();
            for &x in l {
                sum += x;
            }
            out[0] = sum - T::constant(3.0);
        }
        fn num_ineq_blocks(&self) -> usize {
            1
        }
        fn ineq_dim(&self, _b: usize) -> usize {
            6
        }
        fn ineq_vars(&self, _b: usize) -> &[VarRef] {
            &self.vars
        }
        fn eval_ineq<T: Scalar>(&self, _b: usize, l: &[T], out: &mut [T]) {
            // Upper bounds, active for the larger targets at the optimum.
            for (i, &x) in l.iter().enumerate() {
                out[i] = x - T::constant(0.8);
            }
        }
    }

    #[test]
    fn active_bound_quadratic() {
        let p = BoundQuad::new();
        let r = solve(&p, &[0.0], &SolverConfig::default()).unwrap();
        assert!(r.status.is_success(), "{:?}", r.status);
        assert!((r.x[0] - 5.0).abs() < 1e-6, "x = {}", r.x[0]);
    }

    #[test]
    fn equality_qp_symmetric_solution() {
        let p = EqQp::new();
        let r = solve(&p, &[3.0, -2.0], &SolverConfig::default()).unwrap();
        assert!(r.status.is_success());
        assert!((r.x[0] - 0.5).abs() < 1e-6 && (r.x[1] - 0.5).abs() < 1e-6);
        assert!(r.max_violation <= 1e-6);
    }

    #[test]
    fn rosenbrock_in_box() {
        let p = RosenbrockBox::new();
        let mut cfg = SolverConfig::default();
        cfg.check_derivatives = true;
        let r = solve(&p, &[-1.2, 1.0], &cfg).unwrap();
        assert!(r.status.is_success(), "{:?}", r.status);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quasi_newton_matches_exact_within_iteration_budget() {
        let p = CoupledQp::new();
        let exact = solve(&p, &[0.0; 6], &SolverConfig::default()).unwrap();
        let mut cfg = SolverConfig::default();
        cfg.hessian_mode = HessianMode::QuasiNewton;
        let qn = solve(&p, &[0.0; 6], &cfg).unwrap();
        assert!(exact.status.is_success() && qn.status.is_success());
        assert!(
            (exact.objective - qn.objective).abs() < 1e-6,
            "objectives {} vs {}",
            exact.objective,
            qn.objective
        );
        assert!(
            qn.iterations <= 3 * exact.iterations.max(1),
            "qn {} vs exact {}",
            qn.iterations,
            exact.iterations
        );
    }

    #[test]
    fn superlinear_tail_needs_few_extra_iterations() {
        let p = RosenbrockBox::new();
        let mut loose = SolverConfig::default();
        loose.kkt_tol = 1e-5;
        let mut tight = SolverConfig::default();
        tight.kkt_tol = 1e-10;
        let r1 = solve(&p, &[-1.2, 1.0], &loose).unwrap();
        let r2 = solve(&p, &[-1.2, 1.0], &tight).unwrap();
        assert!(r1.status.is_success() && r2.status.is_success());
        assert!(
            r2.iterations <= r1.iterations + 4,
            "tightening 5 orders costs {} extra iterations",
            r2.iterations - r1.iterations
        );
    }

    #[test]
    fn barrier_monotone_in_iteration_log() {
        let dir = std::env::temp_dir().join("mmpc_ipm_log_test");
        std::fs::create_dir_all(&dir).unwrap();
        let log = dir.join("iters.csv");
        let p = RosenbrockBox::new();
        let mut cfg = SolverConfig::default();
        cfg.debug_iteration_log = Some(log.clone());
        solve(&p, &[-1.2, 1.0], &cfg).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        let mus: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        assert!(!mus.is_empty());
        for w in mus.windows(2) {
            assert!(w[1] <= w[0] + 1e-300, "barrier went up: {} -> {}", w[0], w[1]);
        }
        assert!(mus.last().unwrap() < &mus[0]);
    }

    #[test]
    fn deterministic_bitwise_results() {
        let p = RosenbrockBox::new();
        let a = solve(&p, &[-1.2, 1.0], &SolverConfig::default()).unwrap();
        let b = solve(&p, &[-1.2, 1.0], &SolverConfig::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn pinned_variables_stay_fixed() {
        // Same as EqQp but with y pinned: min x^2 s.t. x + 0.25 = 1.
        struct Pinned {
            vars: Vec<VarRef>,
        }
        impl SeparableNlp for Pinned {
            fn num_vars(&self) -> usize {
                1
            }
            fn num_obj_elements(&self) -> usize {
                1
            }
            fn obj_vars(&self, _e: usize) -> &[VarRef] {
                &self.vars
            }
            fn eval_obj<T: Scalar>(&self, _e: usize, l: &[T]) -> T {
                l[0].squared() + l[1].squared()
            }
            fn num_eq_blocks(&self) -> usize {
                1
            }
            fn eq_dim(&self, _b: usize) -> usize {
                1
            }
            fn eq_vars(&self, _b: usize) -> &[VarRef] {
                &self.vars
            }
            fn eval_eq<T: Scalar>(&self, _b: usize, l: &[T], out: &mut [T]) {
                out[0] = l[0] + l[1] - T::one();
            }
            fn num_ineq_blocks(&self) -> usize {
                0
            }
            fn ineq_dim(&self, _b: usize) -> usize {
                0
            }
            fn ineq_vars(&self, _b: usize) -> &[VarRef] {
                &[]
            }
            fn eval_ineq<T: Scalar>(&self, _b: usize, _l: &[T], _o: &mut [T]) {}
        }
        let p = Pinned {
            vars: vec![VarRef::Free(0), VarRef::Fixed(0.25)],
        };
        let r = solve(&p, &[0.0], &SolverConfig::default()).unwrap();
        assert!(r.status.is_success());
        assert!((r.x[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn max_iteration_cap_reports_failure_or_acceptable() {
        let p = RosenbrockBox::new();
        let mut cfg = SolverConfig::default();
        cfg.max_iters = 1;
        let r = solve(&p, &[-1.2, 1.0], &cfg).unwrap();
        assert!(!matches!(r.status, SolveStatus::Optimal));
    }

    #[test]
    fn equality_jacobian_pattern_reflects_blocks() {
        let p = EqQp::new();
        let pat = equality_jacobian_pattern(&p);
        assert_eq!(pat, vec![(0, 0), (0, 1)]);
    }
}
