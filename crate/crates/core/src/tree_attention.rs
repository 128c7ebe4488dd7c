//! Structured attention over latent dependency trees.
//!
//! Nodes (keys of a bar, or bars of a window) are scored pairwise with a
//! two-layer tanh head; the scores define a distribution over spanning
//! arborescences hanging off a virtual root. Exact edge marginals come from the
//! matrix-tree theorem: with edge weights `A_ij = exp(theta_ij)` and root
//! weights `rho_j = exp(theta_root_j)`, the Laplacian
//! `L_jj = rho_j + sum_i A_ij`, `L_ij = -A_ij` has determinant equal to the
//! partition function, and
//!
//! ```text
//! P(i -> j) = A_ij * (Linv_jj - Linv_ji)
//! P(root -> j) = rho_j * Linv_jj
//! ```
//!
//! Multiple root children are allowed. Masked edges carry `-inf` potentials.

use crate::numerics::{lu_logdet_inverse, Matrix, NumericsError, Tape, Var};

/// Largest node count accepted by [`brute_force_marginals`].
pub const BRUTE_FORCE_MAX_NODES: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("tree Laplacian is singular: {0}")]
    Singular(#[from] NumericsError),
    #[error("brute-force enumeration supports at most {max} nodes, got {n}")]
    TooLarge { n: usize, max: usize },
}

/// Parameters of one attention head: pair scores use `w1`/`w2`/`b`/`s`,
/// root attachment reuses `w2` with its own `b_root`/`s_root`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeAttentionParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
    pub b_root: Vec<f64>,
    pub s_root: Vec<f64>,
}

impl TreeAttentionParams {
    pub fn zeros(embed_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, embed_dim),
            w2: Matrix::zeros(hidden, embed_dim),
            b: vec![0.0; hidden],
            s: vec![0.0; hidden],
            b_root: vec![0.0; hidden],
            s_root: vec![0.0; hidden],
        }
    }
}

/// Tape handles for a [`TreeAttentionParams`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w1: Var,
    pub w2: Var,
    pub b: Var,
    pub s: Var,
    pub b_root: Var,
    pub s_root: Var,
}

impl AttentionVars {
    pub fn constants(tape: &mut Tape, p: &TreeAttentionParams) -> Self {
        Self {
            w1: tape.constant(p.w1.clone()),
            w2: tape.constant(p.w2.clone()),
            b: tape.constant(Matrix::column(&p.b)),
            s: tape.constant(Matrix::column(&p.s)),
            b_root: tape.constant(Matrix::column(&p.b_root)),
            s_root: tape.constant(Matrix::column(&p.s_root)),
        }
    }
}

/// `theta[(i, j)]` scores `i` as the parent of `j`; the diagonal is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePotentials {
    pub theta: Matrix,
    pub theta_root: Vec<f64>,
}

impl TreePotentials {
    pub fn n(&self) -> usize {
        self.theta_root.len()
    }

    /// Forbids every edge whose parent comes after its child.
    pub fn causal(mut self) -> Self {
        let n = self.n();
        for i in 0..n {
            for j in 0..i {
                self.theta[(i, j)] = f64::NEG_INFINITY;
            }
        }
        self
    }

    /// Adds `c` to every potential, root scores included.
    pub fn shifted(&self, c: f64) -> Self {
        Self { theta: self.theta.map(|x| x + c), theta_root: self.theta_root.iter().map(|x| x + c).collect() }
    }
}

/// `marg[(i, j)]` is the probability that `i` is the parent of `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMarginals {
    pub marg: Matrix,
    pub marg_root: Vec<f64>,
}

impl TreeMarginals {
    pub fn n(&self) -> usize {
        self.marg_root.len()
    }

    /// Total probability flowing into `j` from the root and every other node.
    pub fn incoming_mass(&self, j: usize) -> f64 {
        self.marg_root[j] + (0..self.n()).filter(|&i| i != j).map(|i| self.marg[(i, j)]).sum::<f64>()
    }

    /// Stacks the root row above the node rows: an `(n + 1) x n` matrix.
    pub fn stacked(&self) -> Matrix {
        let n = self.n();
        let mut m = Matrix::zeros(n + 1, n);
        for j in 0..n {
            m[(0, j)] = self.marg_root[j];
            for i in 0..n {
                m[(i + 1, j)] = self.marg[(i, j)];
            }
        }
        m
    }

    pub fn from_stacked(m: &Matrix) -> Self {
        let n = m.cols();
        let mut marg = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                marg[(i, j)] = m[(i + 1, j)];
            }
        }
        Self { marg, marg_root: m.row(0).to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parent {
    Root,
    Node(usize),
}

/// Pairwise potentials `theta_ij = tanh(s . tanh(W1 h_i + W2 h_j + b))` and
/// root scores `tanh(s_root . tanh(W2 h_j + b_root))`.
pub fn potentials(embeddings: &[Vec<f64>], params: &TreeAttentionParams) -> TreePotentials {
    let mut tape = Tape::new();
    let cols: Vec<Var> = embeddings.iter().map(|e| tape.constant(Matrix::column(e))).collect();
    let h = tape.hstack(&cols);
    let vars = AttentionVars::constants(&mut tape, params);
    let (theta, root) = potentials_var(&mut tape, h, &vars, false);
    TreePotentials { theta: tape.value(theta).clone(), theta_root: tape.value(root).data().to_vec() }
}

/// Differentiable potentials for the embeddings stored as columns of `h`.
/// With `causal` set, edges from later to earlier columns get `-inf`.
pub fn potentials_var(tape: &mut Tape, h: Var, p: &AttentionVars, causal: bool) -> (Var, Var) {
    let parent_proj = tape.matmul(p.w1, h);
    let child_lin = tape.matmul(p.w2, h);
    let child_proj = tape.add_column(child_lin, p.b);
    let root_proj = tape.add_column(child_lin, p.b_root);
    let theta = pair_scores(tape, Some(parent_proj), child_proj, p.s, causal);
    let root = pair_scores(tape, None, root_proj, p.s_root, false);
    (theta, root)
}

/// With a parent projection: `n x n` pair scores. Without: `n x 1` scores
/// of each child column alone.
fn pair_scores(tape: &mut Tape, parent: Option<Var>, child: Var, s: Var, causal: bool) -> Var {
    let q = tape.value(child).clone();
    let p = parent.map(|v| tape.value(v).clone());
    let sv = tape.value(s).data().to_vec();
    let (a, n) = q.shape();
    let rows = if p.is_some() { n } else { 1 };
    let layout = ScoreLayout { rows, causal, paired: p.is_some() };

    let mut value = Matrix::zeros(rows, n);
    for i in 0..rows {
        for j in 0..n {
            if p.is_some() && i == j {
                continue;
            }
            if !layout.allowed(i, j) {
                value[(i, j)] = f64::NEG_INFINITY;
                continue;
            }
            let score: f64 = (0..a).map(|k| sv[k] * pre_activation(&q, p.as_ref(), i, j, k).tanh()).sum();
            value[(i, j)] = score.tanh();
        }
    }
    let out = value.clone();
    let value = if p.is_some() { value } else { value.transpose() };

    let backward = Box::new(move |g: &Matrix| {
        let g = if layout.paired { g.clone() } else { g.transpose() };
        let mut dp = Matrix::zeros(a, n);
        let mut dq = Matrix::zeros(a, n);
        let mut ds = Matrix::zeros(a, 1);
        for i in 0..layout.rows {
            for j in 0..n {
                if !layout.allowed(i, j) || g[(i, j)] == 0.0 {
                    continue;
                }
                let t = out[(i, j)];
                let outer = g[(i, j)] * (1.0 - t * t);
                for k in 0..a {
                    let u = pre_activation(&q, p.as_ref(), i, j, k).tanh();
                    ds.data_mut()[k] += outer * u;
                    let d = outer * sv[k] * (1.0 - u * u);
                    dq[(k, j)] += d;
                    if layout.paired {
                        dp[(k, i)] += d;
                    }
                }
            }
        }
        let mut grads = vec![Some(dq), Some(ds)];
        if layout.paired {
            grads.insert(0, Some(dp));
        }
        grads
    });
    let inputs: Vec<Var> = parent.into_iter().chain([child, s]).collect();
    tape.custom(&inputs, value, backward)
}

#[derive(Clone, Copy)]
struct ScoreLayout {
    rows: usize,
    causal: bool,
    paired: bool,
}

impl ScoreLayout {
    fn allowed(&self, i: usize, j: usize) -> bool {
        !self.paired || (i != j && !(self.causal && i > j))
    }
}

#[inline]
fn pre_activation(q: &Matrix, p: Option<&Matrix>, i: usize, j: usize, k: usize) -> f64 {
    q[(k, j)] + p.map_or(0.0, |p| p[(k, i)])
}

/// Intermediate quantities of the matrix-tree computation, kept for the
/// backward pass.
struct Laplacian {
    weights: Matrix,
    root_weights: Vec<f64>,
    inverse: Matrix,
}

fn build_laplacian(pot: &TreePotentials) -> Result<Laplacian, TreeError> {
    let n = pot.n();
    let shift = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| pot.theta[(i, j)])
        .chain(pot.theta_root.iter().copied())
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };

    let mut weights = Matrix::zeros(n, n);
    let root_weights: Vec<f64> = pot.theta_root.iter().map(|t| (t - shift).exp()).collect();
    let mut lap = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = root_weights[j];
        for i in 0..n {
            if i == j {
                continue;
            }
            let w = (pot.theta[(i, j)] - shift).exp();
            weights[(i, j)] = w;
            lap[(i, j)] = -w;
            diag += w;
        }
        lap[(j, j)] = diag;
    }
    let inverse = lu_logdet_inverse(&lap)?.inverse;
    Ok(Laplacian { weights, root_weights, inverse })
}

fn marginals_from(lap: &Laplacian) -> TreeMarginals {
    let n = lap.root_weights.len();
    let x = &lap.inverse;
    let mut marg = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                marg[(i, j)] = lap.weights[(i, j)] * (x[(j, j)] - x[(j, i)]);
            }
        }
    }
    let marg_root = (0..n).map(|j| lap.root_weights[j] * x[(j, j)]).collect();
    TreeMarginals { marg, marg_root }
}

/// Exact edge marginals through the matrix-tree theorem in `O(n^3)`.
pub fn marginals(pot: &TreePotentials) -> Result<TreeMarginals, TreeError> {
    Ok(marginals_from(&build_laplacian(pot)?))
}

/// Vector-Jacobian product of [`marginals`]: given adjoints of `marg` and
/// `marg_root`, returns adjoints of `theta` and `theta_root`.
fn marginals_vjp(lap: &Laplacian, m: &TreeMarginals, g: &Matrix, g_root: &[f64]) -> (Matrix, Vec<f64>) {
    let n = m.n();
    let x = &lap.inverse;
    let mut gx = Matrix::zeros(n, n);
    for j in 0..n {
        gx[(j, j)] += g_root[j] * lap.root_weights[j];
        for i in 0..n {
            if i == j {
                continue;
            }
            let ga = g[(i, j)] * lap.weights[(i, j)];
            gx[(j, j)] += ga;
            gx[(j, i)] -= ga;
        }
    }
    // dL = -X^T gX X^T
    let gl = x.t_matmul(&gx).matmul_t(x).scale(-1.0);
    let mut d_theta = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d_theta[(i, j)] = g[(i, j)] * m.marg[(i, j)] + lap.weights[(i, j)] * (gl[(j, j)] - gl[(i, j)]);
            }
        }
    }
    let d_root = (0..n).map(|j| g_root[j] * m.marg_root[j] + lap.root_weights[j] * gl[(j, j)]).collect();
    (d_theta, d_root)
}

/// Differentiable marginals. The result is the `(n + 1) x n` stacked layout
/// of [`TreeMarginals::stacked`]: row 0 holds root attachments.
pub fn marginals_var(tape: &mut Tape, theta: Var, theta_root: Var) -> Result<Var, TreeError> {
    let pot = TreePotentials { theta: tape.value(theta).clone(), theta_root: tape.value(theta_root).data().to_vec() };
    let lap = build_laplacian(&pot)?;
    let m = marginals_from(&lap);
    let n = m.n();
    let value = m.stacked();
    let backward = Box::new(move |g: &Matrix| {
        let gm = TreeMarginals::from_stacked(g);
        let (dt, dr) = marginals_vjp(&lap, &m, &gm.marg, &gm.marg_root);
        vec![Some(dt), Some(Matrix::from_vec(n, 1, dr))]
    });
    Ok(tape.custom(&[theta, theta_root], value, backward))
}

/// Soft parents `c_j = sum_i P(i -> j) h_i` for the columns of `h`; the root
/// contributes nothing. Returns a matrix with one context column per node.
pub fn context_var(tape: &mut Tape, h: Var, stacked_marginals: Var) -> Var {
    let n = tape.value(h).cols();
    let node_rows = tape.slice_rows(stacked_marginals, 1, n);
    tape.matmul(h, node_rows)
}

pub fn context_vectors(embeddings: &[Vec<f64>], m: &TreeMarginals) -> Vec<Vec<f64>> {
    let n = m.n();
    assert_eq!(embeddings.len(), n, "embedding count does not match marginals");
    let dim = embeddings.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| {
            let mut c = vec![0.0; dim];
            for (i, e) in embeddings.iter().enumerate() {
                if i == j {
                    continue;
                }
                let w = m.marg[(i, j)];
                for (ck, ek) in c.iter_mut().zip(e) {
                    *ck += w * ek;
                }
            }
            c
        })
        .collect()
}

/// Most probable parent of every node, read off the marginals independently.
///
/// Ties go to the root, then to the lowest index. The result is not
/// guaranteed to be a tree.
pub fn argmax_parent_tree(m: &TreeMarginals) -> Vec<Parent> {
    let n = m.n();
    (0..n)
        .map(|j| {
            let mut best = Parent::Root;
            let mut best_p = m.marg_root[j];
            for i in 0..n {
                if i != j && m.marg[(i, j)] > best_p {
                    best = Parent::Node(i);
                    best_p = m.marg[(i, j)];
                }
            }
            best
        })
        .collect()
}

/// Marginals by enumerating every parent assignment and keeping those that
/// form an arborescence under the virtual root. Exponential; `n <= 7`.
pub fn brute_force_marginals(pot: &TreePotentials) -> Result<TreeMarginals, TreeError> {
    let n = pot.n();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(TreeError::TooLarge { n, max: BRUTE_FORCE_MAX_NODES });
    }
    let finite_max = pot
        .theta
        .data()
        .iter()
        .chain(&pot.theta_root)
        .copied()
        .filter(|x| x.is_finite())
        .fold(0.0f64, f64::max);

    // parent[j] == j encodes attachment to the root.
    let mut parent = vec![0usize; n];
    for (j, p) in parent.iter_mut().enumerate() {
        *p = j;
    }
    let mut total = 0.0;
    let mut marg = Matrix::zeros(n, n);
    let mut marg_root = vec![0.0; n];
    let assignments = n.pow(n as u32);
    for code in 0..assignments {
        let mut c = code;
        for p in parent.iter_mut() {
            *p = c % n;
            c /= n;
        }
        if !reaches_root(&parent) {
            continue;
        }
        let score: f64 = (0..n)
            .map(|j| if parent[j] == j { pot.theta_root[j] } else { pot.theta[(parent[j], j)] })
            .sum();
        let w = (score - n as f64 * finite_max).exp();
        if w == 0.0 {
            continue;
        }
        total += w;
        for j in 0..n {
            if parent[j] == j {
                marg_root[j] += w;
            } else {
                marg[(parent[j], j)] += w;
            }
        }
    }
    let marg = marg.scale(1.0 / total);
    let marg_root = marg_root.into_iter().map(|w| w / total).collect();
    Ok(TreeMarginals { marg, marg_root })
}

fn reaches_root(parent: &[usize]) -> bool {
    let n = parent.len();
    (0..n).all(|start| {
        let mut node = start;
        for _ in 0..=n {
            if parent[node] == node {
                return true;
            }
            node = parent[node];
        }
        false
    })
}
